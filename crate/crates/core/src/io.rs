//! PNG frame sequences, JSON documents and checkpoints.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use relumix_autograd::Tensor;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::denoiser::{DenoiserConfig, Param, Params};
use crate::error::{Error, Result};
use crate::video::{Frame, VideoClip};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut de = serde_json::Deserializer::from_reader(BufReader::new(file));
    serde_path_to_error::deserialize(&mut de).map_err(|e| {
        let key = e.path().to_string();
        Error::data(
            path.to_path_buf(),
            format!("at `{key}`: {}", e.into_inner()),
        )
    })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::data(path.to_path_buf(), e.to_string()))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes one frame as an 8-bit RGB PNG; values are clamped to `[0, 1]` and rounded.
pub fn write_png(path: &Path, frame: &Frame) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(
        BufWriter::new(file),
        frame.width as u32,
        frame.height as u32,
    );
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    enc.set_source_srgb(png::SrgbRenderingIntent::Perceptual);
    let bytes: Vec<u8> = frame
        .data
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let mut w = enc
        .write_header()
        .map_err(|e| Error::data(path.to_path_buf(), e.to_string()))?;
    w.write_image_data(&bytes)
        .map_err(|e| Error::data(path.to_path_buf(), e.to_string()))?;
    w.finish()
        .map_err(|e| Error::data(path.to_path_buf(), e.to_string()))
}

/// Reads an 8-bit RGB or RGBA PNG into `[0, 1]` values (alpha is dropped).
pub fn read_png(path: &Path) -> Result<Frame> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut dec = png::Decoder::new(BufReader::new(file));
    dec.set_transformations(png::Transformations::EXPAND);
    let mut reader = dec
        .read_info()
        .map_err(|e| Error::data(path.to_path_buf(), e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::data(path.to_path_buf(), "image too large"))?;
    let mut buf = vec![0u8; size];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::data(path.to_path_buf(), e.to_string()))?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(Error::data(
            path.to_path_buf(),
            format!("expected 8-bit samples, got {:?}", info.bit_depth),
        ));
    }
    let channels = match info.color_type {
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        other => {
            return Err(Error::data(
                path.to_path_buf(),
                format!("unsupported color type {other:?}"),
            ))
        }
    };
    let (w, h) = (info.width as usize, info.height as usize);
    let mut data = Vec::with_capacity(w * h * 3);
    for px in buf[..info.buffer_size()].chunks_exact(channels) {
        let rgb = if channels < 3 {
            [px[0]; 3]
        } else {
            [px[0], px[1], px[2]]
        };
        data.extend(rgb.iter().map(|&b| b as f32 / 255.0));
    }
    Frame::new(h, w, data)
}

pub fn frame_file_name(index: usize) -> String {
    format!("frame_{index:05}.png")
}

/// Writes `frame_00000.png`, `frame_00001.png`, ... into `dir`, creating it if needed.
pub fn write_clip(clip: &VideoClip, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (t, frame) in clip.frames().enumerate() {
        write_png(&dir.join(frame_file_name(t)), &frame)?;
    }
    Ok(())
}

/// Splits `name` into a prefix and a trailing decimal index before `.png`.
fn indexed_name(name: &str) -> Option<(&str, &str)> {
    let stem = name
        .strip_suffix(".png")
        .or_else(|| name.strip_suffix(".PNG"))?;
    let digits = stem.len() - stem.bytes().rev().take_while(u8::is_ascii_digit).count();
    (digits < stem.len()).then(|| stem.split_at(digits))
}

/// Frame paths of a clip: a directory of indexed PNGs, or a `dir/prefix*.png` pattern.
pub fn clip_frame_paths(source: &Path) -> Result<Vec<PathBuf>> {
    let (dir, filter) = match source.file_name().and_then(|n| n.to_str()) {
        Some(name) if name.contains('*') => {
            let (pre, post) = name.split_once('*').unwrap_or((name, ""));
            (
                source.parent().unwrap_or(Path::new(".")).to_path_buf(),
                Some((pre.to_string(), post.to_string())),
            )
        }
        _ => (source.to_path_buf(), None),
    };
    let entries = std::fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut found: Vec<(String, String, String)> = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(&dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some((pre, post)) = &filter {
            if !(name.starts_with(pre.as_str())
                && name.ends_with(post.as_str())
                && name.len() >= pre.len() + post.len())
            {
                continue;
            }
        }
        if let Some((prefix, digits)) = indexed_name(&name) {
            found.push((name.clone(), prefix.to_string(), digits.to_string()));
        }
    }
    if found.is_empty() {
        return Err(Error::data(
            source.to_path_buf(),
            "no indexed PNG frames found",
        ));
    }
    found.sort();
    let (_, prefix, first_digits) = &found[0];
    let width = first_digits.len();
    let start: usize = first_digits
        .parse()
        .map_err(|_| Error::data(source.to_path_buf(), "bad frame index"))?;
    for (i, (name, p, d)) in found.iter().enumerate() {
        if p != prefix || d.len() != width {
            return Err(Error::data(
                dir.join(name),
                "frame names use inconsistent prefixes or padding",
            ));
        }
        let idx: usize = d
            .parse()
            .map_err(|_| Error::data(dir.join(name), "bad frame index"))?;
        if idx != start + i {
            return Err(Error::data(
                dir.clone(),
                format!("missing frame index {} (found {idx} next)", start + i),
            ));
        }
    }
    Ok(found
        .into_iter()
        .map(|(name, _, _)| dir.join(name))
        .collect())
}

pub fn read_clip(source: &Path) -> Result<VideoClip> {
    let frames = clip_frame_paths(source)?
        .iter()
        .map(|p| read_png(p))
        .collect::<Result<Vec<_>>>()?;
    VideoClip::from_frames(&frames).map_err(|e| Error::data(source.to_path_buf(), e.to_string()))
}

fn has_png(dir: &Path) -> Result<bool> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let name = entry.map_err(|e| Error::io(dir, e))?.file_name();
        if name.to_string_lossy().ends_with(".png") {
            return Ok(true);
        }
    }
    Ok(false)
}

/// Every clip directory under `root`, keyed by its `/`-joined path relative to `root`.
///
/// A `root` that holds frames itself is a single clip keyed by its own name.
pub fn discover_clips(root: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    if has_png(root)? {
        let id = root
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "clip".into());
        out.insert(id, root.to_path_buf());
        return Ok(out);
    }
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        let entries = std::fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))?;
        for entry in entries {
            let path = entry.map_err(|e| Error::io(&dir, e))?.path();
            if !path.is_dir() {
                continue;
            }
            if has_png(&path)? {
                let rel = path.strip_prefix(root).unwrap_or(&path);
                let id = rel
                    .components()
                    .map(|c| c.as_os_str().to_string_lossy().into_owned())
                    .collect::<Vec<_>>()
                    .join("/");
                out.insert(id, path);
            } else {
                stack.push(path);
            }
        }
    }
    if out.is_empty() {
        return Err(Error::data(root.to_path_buf(), "no clip directories found"));
    }
    Ok(out)
}

/// Reads every clip found by [`discover_clips`].
pub fn read_clips(root: &Path) -> Result<BTreeMap<String, VideoClip>> {
    discover_clips(root)?
        .into_iter()
        .map(|(id, dir)| Ok((id, read_clip(&dir)?)))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: usize,
    pub trainable: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub config: DenoiserConfig,
    pub step: usize,
    pub total_bytes: usize,
    pub arrays: Vec<ArrayEntry>,
}

/// A loaded checkpoint: model configuration, training step and weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: DenoiserConfig,
    pub step: usize,
    pub params: Params<f32>,
}

/// `(manifest, blob)` paths for a checkpoint path given with or without its extensions.
pub fn checkpoint_paths(path: &Path) -> (PathBuf, PathBuf) {
    let s = path.to_string_lossy();
    let stem = s
        .strip_suffix(".ckpt.json")
        .or_else(|| s.strip_suffix(".ckpt.bin"))
        .unwrap_or(&s);
    (
        PathBuf::from(format!("{stem}.ckpt.json")),
        PathBuf::from(format!("{stem}.ckpt.bin")),
    )
}

pub fn save_checkpoint(
    path: &Path,
    params: &Params<f32>,
    config: &DenoiserConfig,
    step: usize,
) -> Result<()> {
    let (json, bin) = checkpoint_paths(path);
    if let Some(dir) = json.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut arrays = Vec::with_capacity(params.len());
    let mut blob = Vec::new();
    for p in params.entries() {
        arrays.push(ArrayEntry {
            name: p.name.clone(),
            shape: p.tensor.shape().to_vec(),
            dtype: "f32le".into(),
            offset: blob.len(),
            trainable: p.trainable,
        });
        for v in p.tensor.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = CheckpointManifest {
        format_version: CHECKPOINT_FORMAT_VERSION,
        config: config.clone(),
        step,
        total_bytes: blob.len(),
        arrays,
    };
    let file = File::create(&bin).map_err(|e| Error::io(&bin, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&blob)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(&bin, e))?;
    write_json(&json, &manifest)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let (json, bin) = checkpoint_paths(path);
    let manifest: CheckpointManifest = read_json(&json)?;
    if manifest.format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(Error::data(
            json,
            format!(
                "format version {} (expected {CHECKPOINT_FORMAT_VERSION})",
                manifest.format_version
            ),
        ));
    }
    let mut blob = Vec::new();
    File::open(&bin)
        .and_then(|mut f| f.read_to_end(&mut blob))
        .map_err(|e| Error::io(&bin, e))?;
    if blob.len() != manifest.total_bytes {
        return Err(Error::data(
            bin,
            format!(
                "blob holds {} bytes, manifest expects {}",
                blob.len(),
                manifest.total_bytes
            ),
        ));
    }
    let mut entries = Vec::with_capacity(manifest.arrays.len());
    let mut expected_offset = 0;
    for a in &manifest.arrays {
        if a.dtype != "f32le" {
            return Err(Error::data(
                json.clone(),
                format!("array `{}` has unsupported dtype {}", a.name, a.dtype),
            ));
        }
        let n: usize = a.shape.iter().product();
        if a.offset != expected_offset || a.offset + 4 * n > blob.len() {
            return Err(Error::data(
                json.clone(),
                format!("array `{}` has inconsistent offset {}", a.name, a.offset),
            ));
        }
        let data = blob[a.offset..a.offset + 4 * n]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        entries.push(Param {
            name: a.name.clone(),
            tensor: Tensor::from_vec(&a.shape, data),
            trainable: a.trainable,
        });
        expected_offset = a.offset + 4 * n;
    }
    if expected_offset != blob.len() {
        return Err(Error::data(
            bin,
            format!(
                "{} trailing bytes after the last array",
                blob.len() - expected_offset
            ),
        ));
    }
    let params = Params::from_entries(entries);
    let model = crate::denoiser::Denoiser::new(manifest.config.clone())?;
    params
        .validate(model.specs())
        .map_err(|e| Error::data(json, e.to_string()))?;
    Ok(Checkpoint {
        config: manifest.config,
        step: manifest.step,
        params,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp_frame(h: usize, w: usize, phase: f32) -> Frame {
        let data = (0..h * w * 3)
            .map(|i| (i as f32 * 0.37 + phase).sin() * 0.5 + 0.5)
            .collect();
        Frame::new(h, w, data).unwrap()
    }

    #[test]
    fn clip_round_trip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let frames: Vec<_> = (0..3).map(|t| ramp_frame(5, 7, t as f32)).collect();
        let clip = VideoClip::from_frames(&frames).unwrap();
        write_clip(&clip, dir.path()).unwrap();
        let back = read_clip(dir.path()).unwrap();
        assert_eq!((back.frames, back.height, back.width), (3, 5, 7));
        let err = clip
            .data
            .iter()
            .zip(&back.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(err <= 1.0 / 255.0, "{err}");
        let pattern = dir.path().join("frame_*.png");
        assert_eq!(read_clip(&pattern).unwrap(), back);
    }

    #[test]
    fn empty_dir_and_gaps_rejected() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(read_clip(dir.path()), Err(Error::Data { .. })));
        for t in [0, 1, 3] {
            write_png(&dir.path().join(frame_file_name(t)), &ramp_frame(4, 4, 0.0)).unwrap();
        }
        let err = read_clip(dir.path()).unwrap_err().to_string();
        assert!(err.contains("missing frame index 2"), "{err}");
    }

    #[test]
    fn checkpoint_round_trip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = DenoiserConfig {
            base_channels: 8,
            channel_mult: vec![1, 2],
            attention_levels: vec![1],
            heads: 2,
            context_dim: 8,
            frames: 2,
            norm_groups: 4,
            encoder_channels: vec![4, 4, 4],
            ..Default::default()
        };
        let model = crate::denoiser::Denoiser::new(cfg.clone()).unwrap();
        let params = model.init_params::<f32>(9);
        let path = dir.path().join("m");
        save_checkpoint(&path, &params, &cfg, 12).unwrap();
        let back = load_checkpoint(&dir.path().join("m.ckpt.json")).unwrap();
        assert_eq!(back.params, params);
        assert_eq!(back.step, 12);
        assert_eq!(back.config, cfg);

        let (_, bin) = checkpoint_paths(&path);
        let bytes = std::fs::read(&bin).unwrap();
        std::fs::write(&bin, &bytes[..bytes.len() - 8]).unwrap();
        let err = load_checkpoint(&path).unwrap_err().to_string();
        assert!(
            err.contains(&format!(
                "blob holds {} bytes, manifest expects {}",
                bytes.len() - 8,
                bytes.len()
            )),
            "{err}"
        );

        std::fs::write(&bin, &bytes).unwrap();
        let (json, _) = checkpoint_paths(&path);
        let text =
            std::fs::read_to_string(&json)
                .unwrap()
                .replacen("conv_in.weight", "conv_in.kernel", 1);
        std::fs::write(&json, text).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Data { .. })));
    }
}
