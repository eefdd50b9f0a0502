//! Inference: propagate a relit reference frame through a video.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use relumix_autograd::Tensor;

use crate::conditioning::{assemble_input, context, context_depends_on_noise, Condition};
use crate::denoiser::{Denoiser, ForwardOptions, Params};
use crate::edm::{euler_trajectory, Branch, EdmParams, Precond};
use crate::error::{Error, Result};
use crate::io::Checkpoint;
use crate::video::{denormalize, Frame, VideoClip};

/// `[R, V[1], ..., V[T-1]]`.
pub fn frame_replacement(v: &VideoClip, r: &Frame) -> Result<VideoClip> {
    if !v.spatial_matches(r) {
        return Err(Error::Shape(format!(
            "reference {}x{} does not match clip {}x{}",
            r.height, r.width, v.height, v.width
        )));
    }
    let mut out = v.clone();
    out.data[..r.data.len()].copy_from_slice(&r.data);
    Ok(out)
}

/// Start frames of the sampling windows for a clip of `len` frames and windows of `t`.
///
/// Consecutive windows share one frame: each starts on the previous window's last frame.
pub fn window_starts(len: usize, t: usize) -> Vec<usize> {
    if len <= t || t < 2 {
        return vec![0];
    }
    let stride = t - 1;
    (0..)
        .map(|k| k * stride)
        .take_while(|&s| s == 0 || s + 1 < len)
        .collect()
}

#[derive(Clone, Debug)]
pub struct Propagator {
    model: Denoiser,
    params: Params<f32>,
    pub edm: EdmParams,
    /// Write `R` verbatim into output frame 0 instead of the generated frame.
    pub paste_reference: bool,
}

impl Propagator {
    pub fn new(model: Denoiser, params: Params<f32>, edm: EdmParams) -> Result<Self> {
        params.validate(model.specs())?;
        edm.validate("edm.")?;
        Ok(Self {
            model,
            params,
            edm,
            paste_reference: false,
        })
    }

    pub fn from_checkpoint(ckpt: Checkpoint, edm: EdmParams) -> Result<Self> {
        let model = Denoiser::new(ckpt.config)?;
        Self::new(model, ckpt.params, edm)
    }

    pub fn model(&self) -> &Denoiser {
        &self.model
    }

    /// Samples one window of exactly `model.frames` frames.
    pub fn sample_window(
        &self,
        input: &VideoClip,
        reference: &Frame,
        rng: &mut ChaCha8Rng,
    ) -> Result<VideoClip> {
        let cfg = self.model.config();
        let (t, h, w) = (cfg.frames, input.height, input.width);
        if input.frames != t {
            return Err(Error::Shape(format!(
                "window has {} frames, model expects {t}",
                input.frames
            )));
        }
        let v_prime = frame_replacement(input, reference)?;
        let cond = Condition::new(&v_prime, reference)?;
        let fixed_ctx = if context_depends_on_noise(&self.model) {
            None
        } else {
            Some(context(
                &self.model,
                &self.params,
                &[],
                Some(&cond),
                t,
                h,
                w,
            )?)
        };
        let opts = ForwardOptions::default();
        let denoise = |x: &[f64], sigma: f64, branch: Branch| -> Result<Vec<f64>> {
            let pc = Precond::new(sigma)?;
            let scaled: Vec<f32> = x.iter().map(|v| (pc.c_in * v) as f32).collect();
            let c = match branch {
                Branch::Conditional => Some(&cond),
                Branch::Unconditional => None,
            };
            let net_in = Tensor::from_vec(
                &[t, h, w, cfg.in_channels],
                assemble_input(cfg.use_ef, &scaled, c),
            );
            let ctx = match (&fixed_ctx, c) {
                (Some(fc), Some(_)) => fc.clone(),
                _ => context(&self.model, &self.params, &scaled, c, t, h, w)?,
            };
            let raw = self
                .model
                .predict(&self.params, net_in, &[pc.c_noise], Some(ctx), &opts)?;
            Ok(x.iter()
                .zip(raw.data())
                .map(|(&xv, &r)| pc.combine(xv, r as f64))
                .collect())
        };
        let x = euler_trajectory(denoise, t, h * w * 3, &self.edm, rng)?;
        VideoClip::new(t, h, w, x.into_iter().map(denormalize).collect())
    }

    /// Relights `input` so it follows `reference`, chaining windows for long clips.
    pub fn propagate(&self, input: &VideoClip, reference: &Frame, seed: u64) -> Result<VideoClip> {
        if input.frames < 2 {
            return Err(Error::data(
                None,
                format!("input needs at least 2 frames, got {}", input.frames),
            ));
        }
        if !input.spatial_matches(reference) {
            return Err(Error::Shape(format!(
                "reference {}x{} does not match clip {}x{}",
                reference.height, reference.width, input.height, input.width
            )));
        }
        let t = self.model.config().frames;
        let len = input.frames;
        let n = input.frame_len();
        let starts = window_starts(len, t);
        let mut out: Vec<f32> = Vec::with_capacity(len * n);
        let mut anchor = reference.clone();
        for (k, &s) in starts.iter().enumerate() {
            // Pad past the end of the clip by repeating its last frame.
            let mut data = Vec::with_capacity(t * n);
            for i in 0..t {
                data.extend_from_slice(input.frame_slice((s + i).min(len - 1)));
            }
            let window = VideoClip::new(t, input.height, input.width, data)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(k as u64);
            let generated = self.sample_window(&window, &anchor, &mut rng)?;
            let skip = if k == 0 { 0 } else { 1 };
            let keep = (len - s).min(t);
            out.extend_from_slice(&generated.data[skip * n..keep * n]);
            anchor = generated.frame(t - 1);
        }
        if self.paste_reference {
            out[..n].copy_from_slice(&reference.data);
        }
        VideoClip::new(len, input.height, input.width, out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn clip(frames: usize) -> VideoClip {
        VideoClip::new(
            frames,
            2,
            2,
            (0..frames * 12)
                .map(|i| i as f32 / (frames * 12) as f32)
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn replacement_examples() {
        let v = clip(8);
        let r = Frame::filled(2, 2, [0.5, 0.25, 1.0]);
        let out = frame_replacement(&v, &r).unwrap();
        assert_eq!(out.frame(0), r);
        for t in 1..8 {
            assert_eq!(out.frame_slice(t), v.frame_slice(t));
        }
        assert_eq!(frame_replacement(&v, &v.frame(0)).unwrap(), v);
        assert_eq!(frame_replacement(&clip(1), &r).unwrap().frame(0), r);
        assert!(frame_replacement(&v, &Frame::filled(3, 2, [0.0; 3])).is_err());
    }

    #[test]
    fn windows() {
        assert_eq!(window_starts(8, 8), vec![0]);
        assert_eq!(window_starts(15, 8), vec![0, 7]);
        assert_eq!(window_starts(16, 8), vec![0, 7, 14]);
        assert_eq!(window_starts(3, 8), vec![0]);
    }
}
