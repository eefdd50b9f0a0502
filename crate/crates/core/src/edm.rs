//! Diffusion math: noise schedules, v-scaling preconditioning, training noise, loss weights,
//! classifier-free guidance and the Euler sampler.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::video::{denormalize, VideoClip};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum GuidanceMode {
    /// Scale grows linearly from `min` at frame 0 to `max` at the last frame.
    #[serde(rename = "linear_per_frame", alias = "linear")]
    LinearPerFrame,
    #[serde(rename = "constant")]
    Constant,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GuidanceConfig {
    pub mode: GuidanceMode,
    pub min: f64,
    pub max: f64,
    pub constant: f64,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            mode: GuidanceMode::LinearPerFrame,
            min: 1.0,
            max: 2.5,
            constant: 1.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EdmParams {
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub rho: f64,
    pub steps: usize,
    pub p_mean: f64,
    pub p_std: f64,
    pub guidance: GuidanceConfig,
}

impl Default for EdmParams {
    fn default() -> Self {
        Self {
            sigma_min: 0.002,
            sigma_max: 700.0,
            rho: 7.0,
            steps: 25,
            p_mean: 0.7,
            p_std: 1.6,
            guidance: GuidanceConfig::default(),
        }
    }
}

impl EdmParams {
    pub fn validate(&self, prefix: &str) -> Result<()> {
        let key = |k: &str| format!("{prefix}{k}");
        let positive_finite = |v: f64| v.is_finite() && v > 0.0;
        if !positive_finite(self.sigma_min) {
            return Err(Error::config(
                key("sigma_min"),
                "must be positive and finite",
            ));
        }
        if !positive_finite(self.sigma_max) || self.sigma_max <= self.sigma_min {
            return Err(Error::config(
                key("sigma_max"),
                "must be finite and greater than sigma_min",
            ));
        }
        if !positive_finite(self.rho) {
            return Err(Error::config(key("rho"), "must be positive and finite"));
        }
        if self.steps == 0 {
            return Err(Error::config(key("steps"), "must be at least 1"));
        }
        if !self.p_mean.is_finite() {
            return Err(Error::config(key("p_mean"), "must be finite"));
        }
        if !self.p_std.is_finite() || self.p_std < 0.0 {
            return Err(Error::config(
                key("p_std"),
                "must be finite and non-negative",
            ));
        }
        let g = &self.guidance;
        if !g.min.is_finite() {
            return Err(Error::config(key("guidance.min"), "must be finite"));
        }
        if !g.max.is_finite() || g.max < g.min {
            return Err(Error::config(
                key("guidance.max"),
                "must be finite and at least guidance.min",
            ));
        }
        if !g.constant.is_finite() {
            return Err(Error::config(key("guidance.constant"), "must be finite"));
        }
        Ok(())
    }

    pub fn sigmas(&self) -> Result<Vec<f64>> {
        karras_sigmas(self.steps, self.sigma_min, self.sigma_max, self.rho)
    }
}

/// Karras noise levels, `steps` values from `sigma_max` down to `sigma_min`, then a terminal 0.
///
/// The endpoints are written exactly rather than recomputed through the power law.
pub fn karras_sigmas(steps: usize, sigma_min: f64, sigma_max: f64, rho: f64) -> Result<Vec<f64>> {
    if steps == 0 {
        return Err(Error::config("edm.steps", "must be at least 1"));
    }
    if !(sigma_min > 0.0 && sigma_max > sigma_min && sigma_max.is_finite() && rho > 0.0) {
        return Err(Error::config(
            "edm.sigma_max",
            format!("invalid schedule sigma_min={sigma_min} sigma_max={sigma_max} rho={rho}"),
        ));
    }
    if steps == 1 {
        return Ok(vec![sigma_max, 0.0]);
    }
    let hi = sigma_max.powf(1.0 / rho);
    let lo = sigma_min.powf(1.0 / rho);
    let mut out: Vec<f64> = (0..steps)
        .map(|i| {
            if i == 0 {
                sigma_max
            } else if i == steps - 1 {
                sigma_min
            } else {
                (hi + (i as f64 / (steps - 1) as f64) * (lo - hi)).powf(rho)
            }
        })
        .collect();
    out.push(0.0);
    Ok(out)
}

/// v-scaling preconditioning coefficients at one noise level.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Precond {
    pub c_skip: f64,
    pub c_out: f64,
    pub c_in: f64,
    pub c_noise: f64,
}

impl Precond {
    pub fn new(sigma: f64) -> Result<Self> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::Numerical(format!(
                "preconditioning needs sigma > 0, got {sigma}"
            )));
        }
        let s2 = sigma * sigma;
        let r = (1.0 + s2).sqrt();
        Ok(Self {
            c_skip: 1.0 / (1.0 + s2),
            c_out: -sigma / r,
            c_in: 1.0 / r,
            c_noise: 0.25 * sigma.ln(),
        })
    }

    /// `c_skip * x + c_out * raw`, where `raw` is the network output for `c_in * x`.
    pub fn combine(&self, x: f64, raw: f64) -> f64 {
        self.c_skip * x + self.c_out * raw
    }
}

/// Denoised estimate `D(x; sigma)` around a raw network `f(c_in * x, c_noise)`.
pub fn precondition<F>(sigma: f64, x: &[f64], f: F) -> Result<Vec<f64>>
where
    F: FnOnce(&[f64], f64) -> Result<Vec<f64>>,
{
    let p = Precond::new(sigma)?;
    let scaled: Vec<f64> = x.iter().map(|v| p.c_in * v).collect();
    let raw = f(&scaled, p.c_noise)?;
    if raw.len() != x.len() {
        return Err(Error::Shape(format!(
            "network returned {} values for {} inputs",
            raw.len(),
            x.len()
        )));
    }
    Ok(x.iter()
        .zip(&raw)
        .map(|(&xv, &r)| p.combine(xv, r))
        .collect())
}

/// Log-normal training noise level, clamped to the schedule range.
pub fn sample_training_sigma<R: Rng + ?Sized>(params: &EdmParams, rng: &mut R) -> f64 {
    let z: f64 = StandardNormal.sample(rng);
    (params.p_mean + params.p_std * z)
        .exp()
        .clamp(params.sigma_min, params.sigma_max)
}

/// `(1 + sigma^2) / sigma^2`.
pub fn loss_weight(sigma: f64) -> Result<f64> {
    if sigma.is_nan() || sigma <= 0.0 {
        return Err(Error::Numerical(format!(
            "loss weight needs sigma > 0, got {sigma}"
        )));
    }
    Ok((1.0 + sigma * sigma) / (sigma * sigma))
}

/// One guidance scale per frame.
pub fn guidance_scales(frames: usize, params: &EdmParams) -> Vec<f64> {
    let g = &params.guidance;
    match g.mode {
        GuidanceMode::Constant => vec![g.constant; frames],
        GuidanceMode::LinearPerFrame if frames <= 1 => vec![g.min; frames],
        GuidanceMode::LinearPerFrame => (0..frames)
            .map(|t| g.min + (t as f64 / (frames - 1) as f64) * (g.max - g.min))
            .collect(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    Conditional,
    Unconditional,
}

/// Applies per-frame guidance to a conditional/unconditional pair, in place on `cond`.
///
/// A scale of exactly 1 keeps the conditional value untouched.
pub fn apply_guidance(cond: &mut [f64], uncond: &[f64], scales: &[f64]) {
    let per_frame = cond.len() / scales.len();
    for (t, &s) in scales.iter().enumerate() {
        if s == 1.0 {
            continue;
        }
        let r = t * per_frame..(t + 1) * per_frame;
        for (c, &u) in cond[r.clone()].iter_mut().zip(&uncond[r]) {
            *c = u + s * (*c - u);
        }
    }
}

/// Integrates the probability-flow ODE with Euler steps over the Karras schedule.
///
/// The state has `frames * frame_len` values, frame-major. `denoise(x, sigma, branch)` returns
/// `D(x; sigma)` for that branch; the unconditional branch is only queried when some guidance
/// scale differs from 1. Returns the final state in network space (no clamping).
pub fn euler_trajectory<R, D>(
    mut denoise: D,
    frames: usize,
    frame_len: usize,
    params: &EdmParams,
    rng: &mut R,
) -> Result<Vec<f64>>
where
    R: Rng + ?Sized,
    D: FnMut(&[f64], f64, Branch) -> Result<Vec<f64>>,
{
    let sigmas = params.sigmas()?;
    let scales = guidance_scales(frames, params);
    let guided = scales.iter().any(|&s| s != 1.0);
    let n = frames * frame_len;
    let mut x: Vec<f64> = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * params.sigma_max
        })
        .collect();
    for (i, pair) in sigmas.windows(2).enumerate() {
        let (s_cur, s_next) = (pair[0], pair[1]);
        let mut d = denoise(&x, s_cur, Branch::Conditional)?;
        if d.len() != n {
            return Err(Error::Shape(format!(
                "denoiser returned {} values, expected {n}",
                d.len()
            )));
        }
        if guided {
            let u = denoise(&x, s_cur, Branch::Unconditional)?;
            if u.len() != n {
                return Err(Error::Shape(format!(
                    "denoiser returned {} values, expected {n}",
                    u.len()
                )));
            }
            apply_guidance(&mut d, &u, &scales);
        }
        let h = s_next - s_cur;
        for (xv, dv) in x.iter_mut().zip(&d) {
            let slope = (*xv - dv) / s_cur;
            *xv += h * slope;
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!(
                "non-finite sampler state at step {i} (sigma {s_cur})"
            )));
        }
    }
    Ok(x)
}

/// Samples a clip: runs [`euler_trajectory`] and maps the result back to `[0, 1]`.
pub fn euler_sample<R, D>(
    denoise: D,
    frames: usize,
    height: usize,
    width: usize,
    params: &EdmParams,
    rng: &mut R,
) -> Result<VideoClip>
where
    R: Rng + ?Sized,
    D: FnMut(&[f64], f64, Branch) -> Result<Vec<f64>>,
{
    let x = euler_trajectory(denoise, frames, height * width * 3, params, rng)?;
    VideoClip::new(
        frames,
        height,
        width,
        x.into_iter().map(denormalize).collect(),
    )
}
