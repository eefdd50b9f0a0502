//! Procedural record-and-replay scenes: one recorded set of object trajectories re-rendered
//! under several lighting presets, so illumination is the only thing that changes.

use std::f64::consts::{FRAC_PI_2, PI};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::video::{Frame, VideoClip};

pub const DATASET_FORMAT_VERSION: u32 = 1;
pub const PRESETS_VERSION: &str = "presets-v1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Disc,
    Box,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Waypoint {
    pub frame: usize,
    pub x: f64,
    pub y: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub shape: Shape,
    /// Radius of a disc, half side length of a box, in pixels.
    pub size: f64,
    pub albedo: [f64; 3],
    /// Height above the ground plane; drives shadow length.
    pub height: f64,
    pub waypoints: Vec<Waypoint>,
}

impl ObjectSpec {
    /// Center at frame `t`, interpolated linearly between waypoints.
    pub fn position(&self, t: usize) -> (f64, f64) {
        let wps = &self.waypoints;
        let last = wps[wps.len() - 1];
        if t >= last.frame {
            return (last.x, last.y);
        }
        let i = wps.iter().rposition(|w| w.frame <= t).unwrap_or(0);
        let (a, b) = (wps[i], wps[i + 1]);
        let u = (t - a.frame) as f64 / (b.frame - a.frame) as f64;
        (a.x + u * (b.x - a.x), a.y + u * (b.y - a.y))
    }

    /// Signed distance from `(px, py)` to the footprint centered at `(cx, cy)`.
    ///
    /// Euclidean for discs, Chebyshev for boxes.
    fn footprint_distance(&self, px: f64, py: f64, cx: f64, cy: f64) -> f64 {
        match self.shape {
            Shape::Disc => ((px - cx).powi(2) + (py - cy).powi(2)).sqrt() - self.size,
            Shape::Box => (px - cx).abs().max((py - cy).abs()) - self.size,
        }
    }

    /// Signed distance to the footprint swept from `(cx, cy)` along `(ox, oy)`.
    fn shadow_distance(&self, px: f64, py: f64, cx: f64, cy: f64, ox: f64, oy: f64) -> f64 {
        let (dx, dy) = (px - cx, py - cy);
        match self.shape {
            Shape::Disc => {
                let len2 = ox * ox + oy * oy;
                let k = if len2 > 0.0 {
                    ((dx * ox + dy * oy) / len2).clamp(0.0, 1.0)
                } else {
                    0.0
                };
                ((dx - k * ox).powi(2) + (dy - k * oy).powi(2)).sqrt() - self.size
            }
            Shape::Box => {
                // The Chebyshev distance to a moving point is convex and piecewise linear in k, so
                // its minimum sits at an endpoint or a breakpoint.
                let f = |k: f64| (dx - k * ox).abs().max((dy - k * oy).abs());
                let mut cands = vec![0.0, 1.0];
                for (num, den) in [(dx, ox), (dy, oy), (dx - dy, ox - oy), (dx + dy, ox + oy)] {
                    if den != 0.0 {
                        cands.push((num / den).clamp(0.0, 1.0));
                    }
                }
                cands.into_iter().map(f).fold(f64::INFINITY, f64::min) - self.size
            }
        }
    }

    /// Surface normal of the impostor at offset `(dx, dy)` from the center, for covered pixels.
    fn normal(&self, dx: f64, dy: f64) -> [f64; 3] {
        match self.shape {
            Shape::Disc => {
                let (u, v) = (dx / self.size, dy / self.size);
                let nz = (1.0 - u * u - v * v).max(0.0).sqrt();
                normalize3([u, v, nz])
            }
            Shape::Box => {
                let bevel = (0.3 * self.size).max(1.0);
                let (ax, ay) = (dx.abs(), dy.abs());
                if ax.max(ay) <= self.size - bevel {
                    [0.0, 0.0, 1.0]
                } else if ax >= ay {
                    normalize3([dx.signum(), 0.0, 1.0])
                } else {
                    normalize3([0.0, dy.signum(), 1.0])
                }
            }
        }
    }
}

fn normalize3(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub duration_frames: usize,
    pub height: usize,
    pub width: usize,
    pub objects: Vec<ObjectSpec>,
    pub ground_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LightingConfig {
    pub name: String,
    pub sun_azimuth: f64,
    pub sun_elevation: f64,
    pub sun_intensity: f64,
    pub sun_color: [f64; 3],
    pub ambient: [f64; 3],
    pub fog_density: f64,
    pub fog_color: [f64; 3],
    pub exposure: f64,
    pub shadow_floor: f64,
}

impl LightingConfig {
    /// Unit vector toward the sun; `x` right, `y` down the image, `z` up.
    pub fn sun_direction(&self) -> [f64; 3] {
        let (el, az) = (self.sun_elevation, self.sun_azimuth);
        [el.cos() * az.cos(), el.cos() * az.sin(), el.sin()]
    }

    /// Ground-plane displacement of the shadow of something `height` tall.
    pub fn shadow_offset(&self, height: f64) -> (f64, f64) {
        let len = height / self.sun_elevation.tan();
        (-len * self.sun_azimuth.cos(), -len * self.sun_azimuth.sin())
    }
}

const MAX_OBJECTS: usize = 8;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Draws a scene: 2 to 8 discs and boxes moving along piecewise-linear paths.
pub fn sample_scene(
    seed: u64,
    duration_frames: usize,
    height: usize,
    width: usize,
) -> Result<SceneSpec> {
    if duration_frames < 8 {
        return Err(Error::config(
            "data.frames",
            format!("need at least 8 frames, got {duration_frames}"),
        ));
    }
    if height < 32 || width < 32 {
        return Err(Error::config(
            "data.height",
            format!("world {height}x{width} is smaller than 32x32"),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = height.min(width) as f64 / 32.0;
    let count = rng.random_range(2..=MAX_OBJECTS.min(2 + (scale * 4.0) as usize));
    let objects = (0..count)
        .map(|_| {
            let shape = if rng.random_bool(0.5) {
                Shape::Disc
            } else {
                Shape::Box
            };
            let size = scale * rng.random_range(2.5..5.0);
            let albedo = [
                rng.random_range(0.15..0.95),
                rng.random_range(0.15..0.95),
                rng.random_range(0.15..0.95),
            ];
            let obj_height = rng.random_range(1.0..4.0) * scale;
            let margin = size + 1.0;
            let inner = duration_frames - 2;
            let n_mid = rng.random_range(0..=2usize.min(inner));
            let mut frames: Vec<usize> = Vec::with_capacity(n_mid + 2);
            frames.push(0);
            while frames.len() < n_mid + 1 {
                let f = rng.random_range(1..duration_frames - 1);
                if !frames.contains(&f) {
                    frames.push(f);
                }
            }
            frames.push(duration_frames - 1);
            frames.sort_unstable();
            let waypoints = frames
                .into_iter()
                .map(|frame| Waypoint {
                    frame,
                    x: rng.random_range(margin..width as f64 - 1.0 - margin),
                    y: rng.random_range(margin..height as f64 - 1.0 - margin),
                })
                .collect();
            ObjectSpec {
                shape,
                size,
                albedo,
                height: obj_height,
                waypoints,
            }
        })
        .collect();
    Ok(SceneSpec {
        seed,
        duration_frames,
        height,
        width,
        objects,
        ground_seed: splitmix(seed ^ 0x6772_6f75_6e64),
    })
}

/// Smooth value noise in `[0, 1]` on a 4-pixel lattice.
fn ground_noise(seed: u64, x: f64, y: f64) -> f64 {
    let cell = 4.0;
    let (gx, gy) = (x / cell, y / cell);
    let (x0, y0) = (gx.floor(), gy.floor());
    let (fx, fy) = (gx - x0, gy - y0);
    let lattice = |i: f64, j: f64| {
        let h = splitmix(
            seed ^ splitmix(
                (i as i64 as u64).wrapping_mul(0x1f1f)
                    ^ (j as i64 as u64).wrapping_mul(0x3b3b_0000),
            ),
        );
        (h >> 11) as f64 / (1u64 << 53) as f64
    };
    let s = |t: f64| t * t * (3.0 - 2.0 * t);
    let (sx, sy) = (s(fx), s(fy));
    let top = lattice(x0, y0) * (1.0 - sx) + lattice(x0 + 1.0, y0) * sx;
    let bottom = lattice(x0, y0 + 1.0) * (1.0 - sx) + lattice(x0 + 1.0, y0 + 1.0) * sx;
    top * (1.0 - sy) + bottom * sy
}

fn ground_albedo(seed: u64, x: f64, y: f64) -> [f64; 3] {
    let v = 0.8 + 0.35 * ground_noise(seed, x, y);
    [0.46 * v, 0.43 * v, 0.38 * v]
}

/// Index of the object visible at pixel `(x, y)`: the tallest cover, later objects winning ties.
fn visible_object(spec: &SceneSpec, centers: &[(f64, f64)], px: f64, py: f64) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, o) in spec.objects.iter().enumerate() {
        let (cx, cy) = centers[i];
        if o.footprint_distance(px, py, cx, cy) <= 0.0
            && best.is_none_or(|b| spec.objects[b].height <= o.height)
        {
            best = Some(i);
        }
    }
    best
}

fn pixel_center(x: usize, y: usize) -> (f64, f64) {
    (x as f64, y as f64)
}

/// Binary coverage mask (`H x W`, row-major) of all objects at frame `t`.
pub fn object_masks(spec: &SceneSpec, t: usize) -> Vec<bool> {
    let centers: Vec<_> = spec.objects.iter().map(|o| o.position(t)).collect();
    let mut mask = Vec::with_capacity(spec.height * spec.width);
    for y in 0..spec.height {
        for x in 0..spec.width {
            let (px, py) = pixel_center(x, y);
            mask.push(visible_object(spec, &centers, px, py).is_some());
        }
    }
    mask
}

/// Renders frame `t` of `spec` under `lighting`.
#[allow(clippy::needless_range_loop)]
pub fn render_frame(spec: &SceneSpec, lighting: &LightingConfig, t: usize) -> Result<Frame> {
    if t >= spec.duration_frames {
        return Err(Error::Shape(format!(
            "frame {t} outside scene of {} frames",
            spec.duration_frames
        )));
    }
    let (h, w) = (spec.height, spec.width);
    let centers: Vec<_> = spec.objects.iter().map(|o| o.position(t)).collect();
    let offsets: Vec<_> = spec
        .objects
        .iter()
        .map(|o| lighting.shadow_offset(o.height))
        .collect();
    let l = lighting.sun_direction();
    let mut data = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        let depth = 1.0 + (1.0 - y as f64 / (h - 1) as f64);
        let fog = (lighting.fog_density * depth).clamp(0.0, 1.0);
        for x in 0..w {
            let (px, py) = pixel_center(x, y);
            let owner = visible_object(spec, &centers, px, py);
            let (albedo, normal, receiver_height) = match owner {
                Some(i) => {
                    let o = &spec.objects[i];
                    (
                        o.albedo,
                        o.normal(px - centers[i].0, py - centers[i].1),
                        o.height,
                    )
                }
                None => (
                    ground_albedo(spec.ground_seed, px, py),
                    [0.0, 0.0, 1.0],
                    0.0,
                ),
            };
            let mut s: f64 = 1.0;
            for (j, o) in spec.objects.iter().enumerate() {
                if Some(j) == owner || o.height <= receiver_height {
                    continue;
                }
                let (cx, cy) = centers[j];
                let (ox, oy) = offsets[j];
                let d = o.shadow_distance(px, py, cx, cy, ox, oy);
                let occlusion = (0.5 - 0.5 * d).clamp(0.0, 1.0);
                s = s.min(1.0 - occlusion * (1.0 - lighting.shadow_floor));
            }
            let lambert = (normal[0] * l[0] + normal[1] * l[1] + normal[2] * l[2]).max(0.0);
            let direct = s * lighting.sun_intensity * lambert;
            for c in 0..3 {
                let shaded = albedo[c] * (lighting.ambient[c] + direct * lighting.sun_color[c]);
                let fogged = shaded + fog * (lighting.fog_color[c] - shaded);
                data.push((lighting.exposure * fogged).clamp(0.0, 1.0) as f32);
            }
        }
    }
    Frame::new(h, w, data)
}

pub fn render_clip(spec: &SceneSpec, lighting: &LightingConfig) -> Result<VideoClip> {
    let frames = (0..spec.duration_frames)
        .map(|t| render_frame(spec, lighting, t))
        .collect::<Result<Vec<_>>>()?;
    VideoClip::from_frames(&frames)
}

#[allow(clippy::too_many_arguments)]
fn preset(
    name: &str,
    azimuth_deg: f64,
    elevation_deg: f64,
    intensity: f64,
    sun_color: [f64; 3],
    ambient: [f64; 3],
    fog: (f64, [f64; 3]),
    exposure: f64,
    shadow_floor: f64,
) -> LightingConfig {
    LightingConfig {
        name: name.to_string(),
        sun_azimuth: azimuth_deg.to_radians().rem_euclid(2.0 * PI),
        sun_elevation: elevation_deg.to_radians().min(FRAC_PI_2),
        sun_intensity: intensity,
        sun_color,
        ambient,
        fog_density: fog.0,
        fog_color: fog.1,
        exposure,
        shadow_floor,
    }
}

/// The fixed lighting pool.
pub fn lighting_presets() -> Vec<LightingConfig> {
    const NO_FOG: (f64, [f64; 3]) = (0.0, [0.7, 0.7, 0.7]);
    vec![
        preset(
            "noon_clear",
            30.0,
            80.0,
            1.0,
            [1.0, 0.98, 0.92],
            [0.25, 0.27, 0.32],
            NO_FOG,
            1.0,
            0.35,
        ),
        preset(
            "morning_clear",
            200.0,
            35.0,
            0.9,
            [1.0, 0.9, 0.75],
            [0.22, 0.24, 0.3],
            NO_FOG,
            1.0,
            0.3,
        ),
        preset(
            "afternoon_clear",
            320.0,
            50.0,
            0.95,
            [1.0, 0.95, 0.85],
            [0.24, 0.26, 0.3],
            NO_FOG,
            1.0,
            0.3,
        ),
        preset(
            "sunset_clear",
            10.0,
            12.0,
            0.85,
            [1.0, 0.55, 0.3],
            [0.2, 0.15, 0.2],
            NO_FOG,
            1.1,
            0.25,
        ),
        preset(
            "sunset_cloudy",
            350.0,
            15.0,
            0.45,
            [1.0, 0.6, 0.4],
            [0.3, 0.25, 0.28],
            (0.1, [0.6, 0.5, 0.5]),
            1.0,
            0.5,
        ),
        preset(
            "sunrise_warm",
            160.0,
            10.0,
            0.7,
            [1.0, 0.7, 0.45],
            [0.18, 0.16, 0.22],
            NO_FOG,
            1.1,
            0.3,
        ),
        preset(
            "long_shadows",
            100.0,
            7.0,
            0.9,
            [1.0, 0.8, 0.6],
            [0.18, 0.18, 0.22],
            NO_FOG,
            1.05,
            0.2,
        ),
        preset(
            "overcast",
            60.0,
            60.0,
            0.2,
            [0.9, 0.9, 0.95],
            [0.55, 0.56, 0.6],
            NO_FOG,
            1.0,
            0.75,
        ),
        preset(
            "hazy_noon",
            250.0,
            70.0,
            0.8,
            [1.0, 0.97, 0.9],
            [0.3, 0.3, 0.32],
            (0.25, [0.8, 0.8, 0.78]),
            1.0,
            0.4,
        ),
        preset(
            "light_fog",
            140.0,
            40.0,
            0.5,
            [0.95, 0.95, 0.95],
            [0.35, 0.36, 0.38],
            (0.3, [0.72, 0.74, 0.78]),
            1.0,
            0.5,
        ),
        preset(
            "dense_fog",
            280.0,
            45.0,
            0.3,
            [0.9, 0.9, 0.9],
            [0.4, 0.4, 0.42],
            (0.7, [0.78, 0.8, 0.82]),
            1.0,
            0.6,
        ),
        preset(
            "dusk_blue",
            300.0,
            5.0,
            0.25,
            [0.9, 0.6, 0.5],
            [0.12, 0.15, 0.3],
            NO_FOG,
            1.2,
            0.4,
        ),
        preset(
            "storm_dark",
            70.0,
            55.0,
            0.15,
            [0.8, 0.85, 0.9],
            [0.15, 0.17, 0.2],
            (0.15, [0.3, 0.32, 0.35]),
            1.0,
            0.6,
        ),
        preset(
            "night_clear",
            0.0,
            30.0,
            0.0,
            [0.6, 0.7, 1.0],
            [0.05, 0.06, 0.12],
            NO_FOG,
            1.4,
            0.5,
        ),
        preset(
            "foggy_night",
            220.0,
            25.0,
            0.02,
            [0.6, 0.7, 1.0],
            [0.06, 0.06, 0.1],
            (0.45, [0.12, 0.12, 0.16]),
            1.3,
            0.5,
        ),
        preset(
            "golden_hour",
            240.0,
            18.0,
            0.8,
            [1.0, 0.75, 0.4],
            [0.2, 0.18, 0.18],
            NO_FOG,
            1.05,
            0.3,
        ),
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub n_scenes: usize,
    pub lightings_per_scene: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            n_scenes: 24,
            lightings_per_scene: 10,
            frames: 48,
            height: 32,
            width: 32,
            seed: 0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self, prefix: &str) -> Result<()> {
        let key = |k: &str| format!("{prefix}{k}");
        if self.n_scenes < 10 {
            return Err(Error::config(
                key("n_scenes"),
                "need at least 10 scenes so every split is non-empty",
            ));
        }
        if self.lightings_per_scene < 2 {
            return Err(Error::config(
                key("lightings_per_scene"),
                "need at least 2 lightings",
            ));
        }
        let pool = lighting_presets().len();
        if self.lightings_per_scene > pool {
            return Err(Error::config(
                key("lightings_per_scene"),
                format!(
                    "{} exceeds the preset pool of {pool}",
                    self.lightings_per_scene
                ),
            ));
        }
        if self.frames < 8 {
            return Err(Error::config(key("frames"), "need at least 8 frames"));
        }
        if self.height < 32 || self.width < 32 {
            return Err(Error::config(
                key("height"),
                "resolution must be at least 32x32",
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneEntry {
    pub id: usize,
    pub seed: u64,
    pub split: Split,
    pub lightings: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub presets_version: String,
    pub config: GenConfig,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub lighting_names: Vec<String>,
    pub split_counts: [usize; 3],
    pub scenes: Vec<SceneEntry>,
    #[serde(skip)]
    pub root: PathBuf,
}

/// Scene counts for the 0.7 / 0.2 / 0.1 split, each at least 1.
pub fn split_sizes(n: usize) -> [usize; 3] {
    let train = ((0.7 * n as f64).round() as usize).max(1);
    let val = ((0.2 * n as f64).round() as usize).max(1);
    [train, val, n.saturating_sub(train + val).max(1)]
}

pub fn scene_seed(dataset_seed: u64, index: usize) -> u64 {
    splitmix(dataset_seed ^ splitmix(index as u64 + 1))
}

/// `k` distinct preset indices chosen by a seeded shuffle.
pub fn choose_lightings(scene_seed: u64, k: usize, pool: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(scene_seed ^ 0x6c69_6768_7473);
    let mut ids: Vec<usize> = (0..pool).collect();
    for i in 0..k {
        let j = rng.random_range(i..pool);
        ids.swap(i, j);
    }
    ids.truncate(k);
    ids
}

pub fn scene_dir(root: &Path, scene: usize) -> PathBuf {
    root.join(format!("scene_{scene:03}"))
}

pub fn clip_dir(root: &Path, scene: usize, lighting: usize) -> PathBuf {
    scene_dir(root, scene).join(format!("light_{lighting:02}"))
}

#[derive(Serialize, Deserialize)]
struct SceneFile {
    spec: SceneSpec,
    lightings: Vec<usize>,
    lighting_names: Vec<String>,
}

/// Plans the manifest for `config` without touching the file system.
pub fn plan_dataset(config: &GenConfig, root: &Path) -> Result<DatasetManifest> {
    config.validate("data.")?;
    let presets = lighting_presets();
    let sizes = split_sizes(config.n_scenes);
    let scenes = (0..config.n_scenes)
        .map(|id| {
            let seed = scene_seed(config.seed, id);
            let split = if id < sizes[0] {
                Split::Train
            } else if id < sizes[0] + sizes[1] {
                Split::Val
            } else {
                Split::Test
            };
            SceneEntry {
                id,
                seed,
                split,
                lightings: choose_lightings(seed, config.lightings_per_scene, presets.len()),
            }
        })
        .collect();
    Ok(DatasetManifest {
        format_version: DATASET_FORMAT_VERSION,
        presets_version: PRESETS_VERSION.to_string(),
        config: config.clone(),
        frames: config.frames,
        height: config.height,
        width: config.width,
        lighting_names: presets.into_iter().map(|p| p.name).collect(),
        split_counts: sizes,
        scenes,
        root: root.to_path_buf(),
    })
}

fn write_scene(manifest: &DatasetManifest, entry: &SceneEntry) -> Result<()> {
    let cfg = &manifest.config;
    let presets = lighting_presets();
    let spec = sample_scene(entry.seed, cfg.frames, cfg.height, cfg.width)?;
    let dir = scene_dir(&manifest.root, entry.id);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let file = SceneFile {
        spec: spec.clone(),
        lightings: entry.lightings.clone(),
        lighting_names: entry
            .lightings
            .iter()
            .map(|&l| presets[l].name.clone())
            .collect(),
    };
    io::write_json(&dir.join("scene.json"), &file)?;
    for &l in &entry.lightings {
        let clip = render_clip(&spec, &presets[l])?;
        io::write_clip(&clip, &clip_dir(&manifest.root, entry.id, l))?;
    }
    Ok(())
}

/// Renders every scene under its lightings and writes the dataset tree under `root`.
///
/// Output bytes do not depend on `workers`.
pub fn generate_dataset(
    config: &GenConfig,
    root: &Path,
    workers: usize,
) -> Result<DatasetManifest> {
    let manifest = plan_dataset(config, root)?;
    std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    if workers <= 1 {
        for entry in &manifest.scenes {
            write_scene(&manifest, entry)?;
        }
    } else {
        use rayon::prelude::*;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| Error::config("workers", e.to_string()))?;
        pool.install(|| {
            manifest
                .scenes
                .par_iter()
                .try_for_each(|entry| write_scene(&manifest, entry))
        })?;
    }
    io::write_json(&root.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

impl DatasetManifest {
    /// Reads and checks `<root>/manifest.json`.
    pub fn load(root: &Path) -> Result<Self> {
        let path = root.join("manifest.json");
        let mut m: DatasetManifest = io::read_json(&path)?;
        if m.format_version != DATASET_FORMAT_VERSION {
            return Err(Error::data(
                path,
                format!(
                    "format version {} (expected {DATASET_FORMAT_VERSION})",
                    m.format_version
                ),
            ));
        }
        m.root = root.to_path_buf();
        m.check()
            .map_err(|msg| Error::data(root.join("manifest.json"), msg))?;
        Ok(m)
    }

    fn check(&self) -> std::result::Result<(), String> {
        let first = self.scenes.first().ok_or("manifest lists no scenes")?;
        for s in &self.scenes {
            if s.lightings.len() < 2 {
                return Err(format!(
                    "scene {} has {} lightings, need at least 2",
                    s.id,
                    s.lightings.len()
                ));
            }
            if s.lightings.len() != first.lightings.len() {
                return Err(format!("scene {} has a different lighting count", s.id));
            }
            if let Some(&l) = s
                .lightings
                .iter()
                .find(|&&l| l >= self.lighting_names.len())
            {
                return Err(format!("scene {} references unknown lighting {l}", s.id));
            }
        }
        Ok(())
    }

    pub fn scenes_in(&self, split: Split) -> impl Iterator<Item = &SceneEntry> {
        self.scenes.iter().filter(move |s| s.split == split)
    }

    pub fn clip_dir(&self, scene: usize, lighting: usize) -> PathBuf {
        clip_dir(&self.root, scene, lighting)
    }

    pub fn load_clip(&self, scene: usize, lighting: usize) -> Result<VideoClip> {
        let clip = io::read_clip(&self.clip_dir(scene, lighting))?;
        if clip.frames != self.frames || clip.height != self.height || clip.width != self.width {
            return Err(Error::data(
                self.clip_dir(scene, lighting),
                format!(
                    "clip is {}x{}x{}, manifest says {}x{}x{}",
                    clip.frames, clip.height, clip.width, self.frames, self.height, self.width
                ),
            ));
        }
        Ok(clip)
    }

    pub fn load_scene_spec(&self, scene: usize) -> Result<SceneSpec> {
        let f: SceneFile = io::read_json(&scene_dir(&self.root, scene).join("scene.json"))?;
        Ok(f.spec)
    }
}

#[cfg(test)]
#[allow(clippy::needless_range_loop)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_spec() {
        assert_eq!(
            sample_scene(7, 16, 32, 32).unwrap(),
            sample_scene(7, 16, 32, 32).unwrap()
        );
        assert_ne!(
            sample_scene(7, 16, 32, 32).unwrap(),
            sample_scene(8, 16, 32, 32).unwrap()
        );
    }

    #[test]
    fn waypoints_span_clip() {
        let s = sample_scene(0, 8, 32, 32).unwrap();
        assert!((2..=8).contains(&s.objects.len()));
        for o in &s.objects {
            assert_eq!(o.waypoints.first().unwrap().frame, 0);
            assert_eq!(o.waypoints.last().unwrap().frame, 7);
            assert!(o.waypoints.windows(2).all(|w| w[0].frame < w[1].frame));
        }
    }

    #[test]
    fn rejects_tiny_world() {
        assert!(matches!(
            sample_scene(0, 8, 16, 32),
            Err(Error::Config { .. })
        ));
        assert!(sample_scene(0, 4, 32, 32).is_err());
    }

    #[test]
    fn empty_scene_has_empty_mask() {
        let mut s = sample_scene(1, 8, 32, 32).unwrap();
        s.objects.clear();
        assert!(object_masks(&s, 3).iter().all(|m| !m));
    }

    #[test]
    fn disc_mask_at_waypoint() {
        let mut s = sample_scene(1, 8, 32, 32).unwrap();
        s.objects.truncate(1);
        let o = &mut s.objects[0];
        o.shape = Shape::Disc;
        o.size = 4.0;
        o.waypoints = vec![
            Waypoint {
                frame: 0,
                x: 10.0,
                y: 12.0,
            },
            Waypoint {
                frame: 7,
                x: 20.0,
                y: 20.0,
            },
        ];
        let m = object_masks(&s, 0);
        for y in 0..32 {
            for x in 0..32 {
                let inside = ((x as f64 - 10.0).powi(2) + (y as f64 - 12.0).powi(2)).sqrt() <= 4.0;
                assert_eq!(m[y * 32 + x], inside, "({x}, {y})");
            }
        }
    }

    #[test]
    fn presets_pool() {
        let p = lighting_presets();
        assert!(p.len() >= 15);
        assert_eq!(p, lighting_presets());
        let noon = p.iter().find(|l| l.name == "noon_clear").unwrap();
        assert_eq!(noon.fog_density, 0.0);
        assert!(p.iter().any(|l| l.fog_density >= 0.5));
        assert!(p.iter().any(|l| l.sun_elevation < 10f64.to_radians()));
        assert!(p.iter().any(|l| l.sun_intensity < 0.05));
        let mut names: Vec<_> = p.iter().map(|l| l.name.clone()).collect();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), p.len());
        for l in &p {
            assert!((0.0..2.0 * PI).contains(&l.sun_azimuth));
            assert!(l.sun_elevation > 0.0 && l.sun_elevation <= FRAC_PI_2);
            for c in l.sun_color.iter().chain(&l.ambient).chain(&l.fog_color) {
                assert!((0.0..=1.0).contains(c));
            }
        }
    }

    #[test]
    fn no_sun_gives_albedo_times_ambient() {
        let s = sample_scene(3, 8, 32, 32).unwrap();
        let mut l = lighting_presets()[0].clone();
        l.sun_intensity = 0.0;
        l.fog_density = 0.0;
        l.exposure = 1.0;
        let f = render_frame(&s, &l, 2).unwrap();
        let centers: Vec<_> = s.objects.iter().map(|o| o.position(2)).collect();
        for y in 0..32 {
            for x in 0..32 {
                if let Some(i) = visible_object(&s, &centers, x as f64, y as f64) {
                    let px = f.pixel(y, x);
                    for c in 0..3 {
                        assert_eq!(
                            px[c],
                            (s.objects[i].albedo[c] * l.ambient[c]).clamp(0.0, 1.0) as f32
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn full_fog_is_fog_color() {
        let s = sample_scene(3, 8, 32, 32).unwrap();
        let mut l = lighting_presets()[4].clone();
        l.fog_density = 1.0;
        let f = render_frame(&s, &l, 0).unwrap();
        for y in 0..32 {
            for x in 0..32 {
                let px = f.pixel(y, x);
                for c in 0..3 {
                    assert_eq!(px[c], (l.exposure * l.fog_color[c]).clamp(0.0, 1.0) as f32);
                }
            }
        }
    }

    #[test]
    fn box_shadow_distance_matches_brute_force() {
        let o = ObjectSpec {
            shape: Shape::Box,
            size: 3.0,
            albedo: [0.5; 3],
            height: 2.0,
            waypoints: vec![],
        };
        for &(px, py, ox, oy) in &[
            (5.0, 1.0, 4.0, -2.0),
            (-3.0, 2.5, 7.0, 1.0),
            (0.3, -8.0, -1.0, -6.0),
            (9.0, 9.0, 0.0, 0.0),
        ] {
            let exact = o.shadow_distance(px, py, 0.0, 0.0, ox, oy);
            let brute = (0..=100_000)
                .map(|i| i as f64 / 100_000.0)
                .map(|k: f64| (px - k * ox).abs().max((py - k * oy).abs()))
                .fold(f64::INFINITY, f64::min)
                - 3.0;
            assert!((exact - brute).abs() < 1e-4, "{exact} vs {brute}");
        }
    }

    #[test]
    fn split_sizes_follow_ratio() {
        assert_eq!(split_sizes(10), [7, 2, 1]);
        assert_eq!(split_sizes(24), [17, 5, 2]);
    }
}
