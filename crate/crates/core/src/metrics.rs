//! Paired and no-reference quality metrics.
//!
//! The perceptual metric is a deterministic random-feature stand-in for LPIPS and the NSS
//! score is a Mahalanobis distance to pristine feature statistics; both carry version tags.

use std::collections::BTreeMap;
use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use relumix_autograd::{Graph, Tensor};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::gamma;

use crate::error::{Error, Result};
use crate::video::{Frame, VideoClip};

pub const PSNR_CAP: f64 = 99.0;
pub const SSIM_VERSION: &str = "ssim-gauss11-v1";
pub const PSNR_VERSION: &str = "psnr-cap99-v1";
pub const PROXY_VERSION: &str = "randconv3-unitnorm-v1";
pub const FLOW_VERSION: &str = "shitomasi-lk2-v1";
pub const COLOR_VERSION: &str = "lab-chroma-std-v1";
pub const BRISQUE_VERSION: &str = "nss36-mahalanobis-v1";

fn check_same(a: &Frame, b: &Frame) -> Result<()> {
    if !a.same_shape(b) {
        return Err(Error::Shape(format!(
            "frames {}x{} and {}x{} differ",
            a.height, a.width, b.height, b.width
        )));
    }
    Ok(())
}

/// Normalized 1-D Gaussian taps.
fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let k: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable filtering of an `h x w` plane, keeping only fully covered positions.
fn filter_valid(img: &[f64], h: usize, w: usize, k: &[f64]) -> (Vec<f64>, usize, usize) {
    let n = k.len();
    let (oh, ow) = (h + 1 - n, w + 1 - n);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..n).map(|i| k[i] * img[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    (out, oh, ow)
}

/// Separable filtering with edge replication; output has the input size.
fn filter_same(img: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len() as isize;
    let r = n / 2;
    let clampi = |v: isize, hi: usize| v.clamp(0, hi as isize - 1) as usize;
    let mut rows = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            rows[y * w + x] = (0..n)
                .map(|i| k[i as usize] * img[y * w + clampi(x as isize + i - r, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = (0..n)
                .map(|i| k[i as usize] * rows[clampi(y as isize + i - r, h) * w + x])
                .sum();
        }
    }
    out
}

fn channel(f: &Frame, c: usize) -> Vec<f64> {
    f.data
        .iter()
        .skip(c)
        .step_by(3)
        .map(|&v| v as f64)
        .collect()
}

/// Mean structural similarity over all valid 11x11 Gaussian windows and channels.
pub fn ssim(a: &Frame, b: &Frame) -> Result<f64> {
    check_same(a, b)?;
    let (h, w) = (a.height, a.width);
    if h < 11 || w < 11 {
        return Err(Error::Shape(format!(
            "SSIM needs at least 11x11 frames, got {h}x{w}"
        )));
    }
    let k = gaussian_kernel(11, 1.5);
    let (c1, c2) = ((0.01f64).powi(2), (0.03f64).powi(2));
    let mut total = 0.0;
    let mut count = 0usize;
    for c in 0..3 {
        let x = channel(a, c);
        let y = channel(b, c);
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
        let (mx, oh, ow) = filter_valid(&x, h, w, &k);
        let (my, _, _) = filter_valid(&y, h, w, &k);
        let (sxx, _, _) = filter_valid(&xx, h, w, &k);
        let (syy, _, _) = filter_valid(&yy, h, w, &k);
        let (sxy, _, _) = filter_valid(&xy, h, w, &k);
        for i in 0..oh * ow {
            let (ma, mb) = (mx[i], my[i]);
            let va = sxx[i] - ma * ma;
            let vb = syy[i] - mb * mb;
            let cov = sxy[i] - ma * mb;
            let num = (2.0 * ma * mb + c1) * (2.0 * cov + c2);
            let den = (ma * ma + mb * mb + c1) * (va + vb + c2);
            total += num / den;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// `10 log10(1 / MSE)`, or [`PSNR_CAP`] for identical inputs.
pub fn psnr(a: &Frame, b: &Frame) -> Result<f64> {
    check_same(a, b)?;
    let mse = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(&p, &q)| (p as f64 - q as f64).powi(2))
        .sum::<f64>()
        / a.data.len() as f64;
    Ok(psnr_from_mse(mse))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        PSNR_CAP
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
    }
}

struct ProxyNet {
    stages: Vec<(Tensor<f64>, Tensor<f64>, usize)>,
}

const PROXY_SEED: u64 = 0x1_9195;

fn proxy_net() -> &'static ProxyNet {
    static NET: OnceLock<ProxyNet> = OnceLock::new();
    NET.get_or_init(|| {
        let mut rng = ChaCha8Rng::seed_from_u64(PROXY_SEED);
        let widths = [(3, 16, 1), (16, 32, 2), (32, 32, 2)];
        let stages = widths
            .iter()
            .map(|&(cin, cout, stride)| {
                let std = (2.0 / (9 * cin) as f64).sqrt();
                let w: Vec<f64> = (0..9 * cin * cout)
                    .map(|_| {
                        std * {
                            let z: f64 = StandardNormal.sample(&mut rng);
                            z
                        }
                    })
                    .collect();
                let b: Vec<f64> = (0..cout)
                    .map(|_| {
                        0.1 * {
                            let z: f64 = StandardNormal.sample(&mut rng);
                            z
                        }
                    })
                    .collect();
                (
                    Tensor::from_vec(&[3, 3, cin, cout], w),
                    Tensor::from_vec(&[cout], b),
                    stride,
                )
            })
            .collect();
        ProxyNet { stages }
    })
}

/// Channel-unit-normalized activations of each stage, `[positions, channels]` flattened.
fn proxy_features(f: &Frame) -> Vec<(Vec<f64>, usize)> {
    let net = proxy_net();
    let mut g = Graph::<f64>::inference();
    let x: Vec<f64> = f.data.iter().map(|&v| 2.0 * v as f64 - 1.0).collect();
    let mut h = g.constant(Tensor::from_vec(&[1, f.height, f.width, 3], x));
    let mut out = Vec::with_capacity(net.stages.len());
    for (w, b, stride) in &net.stages {
        let wv = g.constant(w.clone());
        let bv = g.constant(b.clone());
        let conv = g.conv2d(h, wv, Some(bv), *stride, 1);
        let relu = g.value(conv).map(|v| v.max(0.0));
        let c = relu.last_dim();
        let mut feats = relu.data().to_vec();
        for px in feats.chunks_exact_mut(c) {
            let norm = px.iter().map(|v| v * v).sum::<f64>().sqrt() + 1e-10;
            px.iter_mut().for_each(|v| *v /= norm);
        }
        out.push((feats, c));
        h = g.constant(relu);
    }
    out
}

/// Mean over stages of the position-averaged squared distance between unit-normalized features.
pub fn perceptual_proxy(a: &Frame, b: &Frame) -> Result<f64> {
    check_same(a, b)?;
    let fa = proxy_features(a);
    let fb = proxy_features(b);
    let mut total = 0.0;
    for ((xa, c), (xb, _)) in fa.iter().zip(&fb) {
        let positions = xa.len() / c;
        let d: f64 = xa.iter().zip(xb).map(|(p, q)| (p - q) * (p - q)).sum();
        total += d / positions as f64;
    }
    Ok(total / fa.len() as f64)
}

/// Mean perceptual distance between adjacent frames.
pub fn temporal_perceptual(clip: &VideoClip) -> Result<f64> {
    if clip.frames < 2 {
        return Err(Error::Shape(
            "temporal metrics need at least 2 frames".into(),
        ));
    }
    let mut total = 0.0;
    for t in 0..clip.frames - 1 {
        total += perceptual_proxy(&clip.frame(t), &clip.frame(t + 1))?;
    }
    Ok(total / (clip.frames - 1) as f64)
}

/// How angle dispersion is measured.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AngleStd {
    /// Population standard deviation of angles in `[-pi, pi)`.
    #[default]
    Literal,
    /// `sqrt(-2 ln R)` with `R` the mean resultant length.
    Circular,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowStats {
    pub score: f64,
    pub sigma_mag: f64,
    pub sigma_angle: f64,
    pub tracks: usize,
    /// Set when no track survived and the score defaulted to 1.
    pub no_tracks: bool,
}

/// `1 / (1 + sigma_mag + sigma_angle)`.
pub fn flow_score(sigma_mag: f64, sigma_angle: f64) -> f64 {
    1.0 / (1.0 + sigma_mag + sigma_angle)
}

fn luma_255(f: &Frame) -> Vec<f64> {
    f.data
        .chunks_exact(3)
        .map(|p| 255.0 * (0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64))
        .collect()
}

struct Plane {
    h: usize,
    w: usize,
    v: Vec<f64>,
}

impl Plane {
    fn at(&self, y: isize, x: isize) -> f64 {
        let y = y.clamp(0, self.h as isize - 1) as usize;
        let x = x.clamp(0, self.w as isize - 1) as usize;
        self.v[y * self.w + x]
    }

    fn bilinear(&self, y: f64, x: f64) -> f64 {
        let (y0, x0) = (y.floor(), x.floor());
        let (fy, fx) = (y - y0, x - x0);
        let (yi, xi) = (y0 as isize, x0 as isize);
        let top = self.at(yi, xi) * (1.0 - fx) + self.at(yi, xi + 1) * fx;
        let bottom = self.at(yi + 1, xi) * (1.0 - fx) + self.at(yi + 1, xi + 1) * fx;
        top * (1.0 - fy) + bottom * fy
    }

    fn grad(&self, y: isize, x: isize) -> (f64, f64) {
        let gx = (self.at(y, x + 1) - self.at(y, x - 1)) * 0.5;
        let gy = (self.at(y + 1, x) - self.at(y - 1, x)) * 0.5;
        (gx, gy)
    }

    fn grad_at(&self, y: f64, x: f64) -> (f64, f64) {
        let gx = (self.bilinear(y, x + 1.0) - self.bilinear(y, x - 1.0)) * 0.5;
        let gy = (self.bilinear(y + 1.0, x) - self.bilinear(y - 1.0, x)) * 0.5;
        (gx, gy)
    }

    fn half(&self) -> Plane {
        let (h, w) = (self.h.div_ceil(2), self.w.div_ceil(2));
        let mut v = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                let (yy, xx) = (2 * y as isize, 2 * x as isize);
                v.push(
                    (self.at(yy, xx)
                        + self.at(yy, xx + 1)
                        + self.at(yy + 1, xx)
                        + self.at(yy + 1, xx + 1))
                        * 0.25,
                );
            }
        }
        Plane { h, w, v }
    }
}

/// Shi-Tomasi corners: minimum structure-tensor eigenvalue over 3x3 blocks, at least 1% of the
/// strongest response, greedily suppressed within radius 4.
fn corners(p: &Plane) -> Vec<(usize, usize)> {
    let (h, w) = (p.h, p.w);
    let mut grads = vec![(0.0, 0.0); h * w];
    for y in 0..h {
        for x in 0..w {
            grads[y * w + x] = p.grad(y as isize, x as isize);
        }
    }
    let mut resp = vec![0.0; h * w];
    for y in 1..h.saturating_sub(1) {
        for x in 1..w.saturating_sub(1) {
            let (mut a, mut b, mut c) = (0.0, 0.0, 0.0);
            for dy in 0..3 {
                for dx in 0..3 {
                    let (gx, gy) = grads[(y + dy - 1) * w + x + dx - 1];
                    a += gx * gx;
                    b += gx * gy;
                    c += gy * gy;
                }
            }
            resp[y * w + x] = (a + c) / 2.0 - (((a - c) / 2.0).powi(2) + b * b).sqrt();
        }
    }
    let max = resp.iter().cloned().fold(0.0, f64::max);
    if max <= 1e-12 {
        return Vec::new();
    }
    let mut cands: Vec<(f64, usize)> = resp
        .iter()
        .enumerate()
        .filter(|(_, &r)| r >= 0.01 * max)
        .map(|(i, &r)| (r, i))
        .collect();
    cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut accepted: Vec<(usize, usize)> = Vec::new();
    for (_, i) in cands {
        let (y, x) = (i / w, i % w);
        if accepted.iter().all(|&(ay, ax)| {
            let (dy, dx) = (ay as f64 - y as f64, ax as f64 - x as f64);
            dy * dy + dx * dx >= 16.0
        }) {
            accepted.push((y, x));
        }
    }
    accepted
}

const LK_HALF: isize = 7;
const LK_ITERS: usize = 10;
const LK_EPS: f64 = 1e-2;

/// Pyramidal Lucas-Kanade for one point; `None` when the window is untrackable or the point
/// leaves the image.
fn track(prev: &[Plane; 2], next: &[Plane; 2], y: f64, x: f64) -> Option<(f64, f64)> {
    let (mut gy, mut gx) = (0.0, 0.0);
    for level in (0..2).rev() {
        let scale = (1u32 << level) as f64;
        let (py, px) = (y / scale, x / scale);
        let (i, j) = (&prev[level], &next[level]);
        let mut window = Vec::with_capacity(((2 * LK_HALF + 1) * (2 * LK_HALF + 1)) as usize);
        let (mut a, mut b, mut c) = (0.0, 0.0, 0.0);
        for dy in -LK_HALF..=LK_HALF {
            for dx in -LK_HALF..=LK_HALF {
                let (sy, sx) = (py + dy as f64, px + dx as f64);
                let (ix, iy) = i.grad_at(sy, sx);
                a += ix * ix;
                b += ix * iy;
                c += iy * iy;
                window.push((sy, sx, i.bilinear(sy, sx), ix, iy));
            }
        }
        let n = window.len() as f64;
        let min_eig = ((a + c) / 2.0 - (((a - c) / 2.0).powi(2) + b * b).sqrt()) / n;
        let det = a * c - b * b;
        if min_eig < 1e-4 || det.abs() < 1e-12 {
            return None;
        }
        let (mut vy, mut vx) = (0.0, 0.0);
        for _ in 0..LK_ITERS {
            let (mut bx, mut by) = (0.0, 0.0);
            for &(sy, sx, iv, ix, iy) in &window {
                let diff = iv - j.bilinear(sy + gy + vy, sx + gx + vx);
                bx += diff * ix;
                by += diff * iy;
            }
            let ex = (c * bx - b * by) / det;
            let ey = (a * by - b * bx) / det;
            vx += ex;
            vy += ey;
            if (ex * ex + ey * ey).sqrt() < LK_EPS {
                break;
            }
        }
        if level > 0 {
            gx = 2.0 * (gx + vx);
            gy = 2.0 * (gy + vy);
        } else {
            gx += vx;
            gy += vy;
        }
    }
    let (ny, nx) = (y + gy, x + gx);
    let (h, w) = (prev[0].h as f64, prev[0].w as f64);
    if !(gx.is_finite() && gy.is_finite()) || ny < 0.0 || nx < 0.0 || ny > h - 1.0 || nx > w - 1.0 {
        return None;
    }
    Some((gx, gy))
}

fn population_std(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    let m = v.iter().sum::<f64>() / v.len() as f64;
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64).sqrt()
}

/// Angle in `[-pi, pi)`.
fn wrap_angle(dx: f64, dy: f64) -> f64 {
    let a = dy.atan2(dx);
    if a >= std::f64::consts::PI {
        a - 2.0 * std::f64::consts::PI
    } else {
        a
    }
}

/// Dispersion of tracked corner flow across the clip.
pub fn flow_consistency(clip: &VideoClip, mode: AngleStd) -> Result<FlowStats> {
    if clip.frames < 2 {
        return Err(Error::Shape(
            "flow consistency needs at least 2 frames".into(),
        ));
    }
    let pyramid = |f: &Frame| {
        let p0 = Plane {
            h: f.height,
            w: f.width,
            v: luma_255(f),
        };
        let p1 = p0.half();
        [p0, p1]
    };
    let mut mags = Vec::new();
    let mut angles = Vec::new();
    let mut prev = pyramid(&clip.frame(0));
    for t in 1..clip.frames {
        let next = pyramid(&clip.frame(t));
        for (y, x) in corners(&prev[0]) {
            if let Some((dx, dy)) = track(&prev, &next, y as f64, x as f64) {
                mags.push((dx * dx + dy * dy).sqrt());
                angles.push(wrap_angle(dx, dy));
            }
        }
        prev = next;
    }
    if mags.is_empty() {
        log::warn!("flow consistency: no tracks survived; reporting 1");
        return Ok(FlowStats {
            score: 1.0,
            sigma_mag: 0.0,
            sigma_angle: 0.0,
            tracks: 0,
            no_tracks: true,
        });
    }
    let sigma_mag = population_std(&mags);
    let sigma_angle = match mode {
        AngleStd::Literal => population_std(&angles),
        AngleStd::Circular => {
            let n = angles.len() as f64;
            let (s, c) = angles
                .iter()
                .fold((0.0, 0.0), |(s, c), a| (s + a.sin(), c + a.cos()));
            let r = ((s / n).powi(2) + (c / n).powi(2)).sqrt().min(1.0);
            if r >= 1.0 {
                0.0
            } else {
                (-2.0 * r.ln()).sqrt()
            }
        }
    };
    Ok(FlowStats {
        score: flow_score(sigma_mag, sigma_angle),
        sigma_mag,
        sigma_angle,
        tracks: mags.len(),
        no_tracks: false,
    })
}

const SRGB_TO_XYZ: [[f64; 3]; 3] = [
    [0.4124564, 0.3575761, 0.1804375],
    [0.2126729, 0.7151522, 0.0721750],
    [0.0193339, 0.1191920, 0.9503041],
];

fn white_point() -> [f64; 3] {
    let m = SRGB_TO_XYZ;
    [
        m[0][0] + m[0][1] + m[0][2],
        m[1][0] + m[1][1] + m[1][2],
        m[2][0] + m[2][1] + m[2][2],
    ]
}

pub fn srgb_to_linear(v: f64) -> f64 {
    if v <= 0.04045 {
        v / 12.92
    } else {
        ((v + 0.055) / 1.055).powf(2.4)
    }
}

pub fn linear_to_srgb(v: f64) -> f64 {
    if v <= 0.0031308 {
        v * 12.92
    } else {
        1.055 * v.powf(1.0 / 2.4) - 0.055
    }
}

const LAB_EPS: f64 = 216.0 / 24389.0;
const LAB_KAPPA: f64 = 24389.0 / 27.0;

/// sRGB in `[0, 1]` to CIELAB under D65.
pub fn srgb_to_lab(rgb: [f64; 3]) -> [f64; 3] {
    let lin = rgb.map(srgb_to_linear);
    let m = SRGB_TO_XYZ;
    let wp = white_point();
    let xyz: [f64; 3] =
        std::array::from_fn(|i| (m[i][0] * lin[0] + m[i][1] * lin[1] + m[i][2] * lin[2]) / wp[i]);
    let f = |t: f64| {
        if t > LAB_EPS {
            t.cbrt()
        } else {
            (LAB_KAPPA * t + 16.0) / 116.0
        }
    };
    let (fx, fy, fz) = (f(xyz[0]), f(xyz[1]), f(xyz[2]));
    [116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)]
}

/// Inverse of [`srgb_to_lab`].
pub fn lab_to_srgb(lab: [f64; 3]) -> [f64; 3] {
    let fy = (lab[0] + 16.0) / 116.0;
    let fx = fy + lab[1] / 500.0;
    let fz = fy - lab[2] / 200.0;
    let finv = |f: f64| {
        if f.powi(3) > LAB_EPS {
            f.powi(3)
        } else {
            (116.0 * f - 16.0) / LAB_KAPPA
        }
    };
    let wp = white_point();
    let xyz = [finv(fx) * wp[0], finv(fy) * wp[1], finv(fz) * wp[2]];
    let m = DMatrix::from_fn(3, 3, |i, j| SRGB_TO_XYZ[i][j]);
    let inv = m.try_inverse().expect("sRGB matrix is invertible");
    let lin = &inv * DVector::from_column_slice(&xyz);
    [
        linear_to_srgb(lin[0]),
        linear_to_srgb(lin[1]),
        linear_to_srgb(lin[2]),
    ]
}

/// Mean over frames of the per-frame population std of CIELAB chroma.
pub fn color_consistency(clip: &VideoClip) -> f64 {
    let mut total = 0.0;
    for t in 0..clip.frames {
        let chroma: Vec<f64> = clip
            .frame_slice(t)
            .chunks_exact(3)
            .map(|p| {
                let lab = srgb_to_lab([p[0] as f64, p[1] as f64, p[2] as f64]);
                (lab[1] * lab[1] + lab[2] * lab[2]).sqrt()
            })
            .collect();
        total += population_std(&chroma);
    }
    total / clip.frames as f64
}

/// Fitted asymmetric generalized Gaussian parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Aggd {
    pub alpha: f64,
    pub eta: f64,
    pub sigma_l: f64,
    pub sigma_r: f64,
}

const AGGD_SIGMA_FLOOR: f64 = 1e-6;
const ALPHA_MIN: f64 = 0.2;
const ALPHA_MAX: f64 = 10.0;
const ALPHA_STEP: f64 = 0.001;

fn alpha_table() -> &'static [(f64, f64)] {
    static TABLE: OnceLock<Vec<(f64, f64)>> = OnceLock::new();
    TABLE.get_or_init(|| {
        let n = ((ALPHA_MAX - ALPHA_MIN) / ALPHA_STEP).round() as usize;
        (0..=n)
            .map(|i| {
                let a = ALPHA_MIN + i as f64 * ALPHA_STEP;
                (
                    a,
                    gamma(2.0 / a).powi(2) / (gamma(1.0 / a) * gamma(3.0 / a)),
                )
            })
            .collect()
    })
}

/// Moment-matching AGGD fit; all-zero input gives the sentinel `alpha = 10`, `sigma = 1e-6`.
pub fn fit_aggd(x: &[f64]) -> Aggd {
    let (mut sl, mut nl, mut sr, mut nr) = (0.0, 0usize, 0.0, 0usize);
    let (mut abs_sum, mut sq_sum) = (0.0, 0.0);
    for &v in x {
        if v < 0.0 {
            sl += v * v;
            nl += 1;
        } else if v > 0.0 {
            sr += v * v;
            nr += 1;
        }
        abs_sum += v.abs();
        sq_sum += v * v;
    }
    if sq_sum == 0.0 || x.is_empty() {
        return Aggd {
            alpha: ALPHA_MAX,
            eta: 0.0,
            sigma_l: AGGD_SIGMA_FLOOR,
            sigma_r: AGGD_SIGMA_FLOOR,
        };
    }
    let sigma_l = if nl > 0 { (sl / nl as f64).sqrt() } else { 0.0 }.max(AGGD_SIGMA_FLOOR);
    let sigma_r = if nr > 0 { (sr / nr as f64).sqrt() } else { 0.0 }.max(AGGD_SIGMA_FLOOR);
    let n = x.len() as f64;
    let gamma_hat = sigma_l / sigma_r;
    let r_hat = (abs_sum / n).powi(2) / (sq_sum / n);
    let big_r = r_hat * (gamma_hat.powi(3) + 1.0) * (gamma_hat + 1.0)
        / (gamma_hat * gamma_hat + 1.0).powi(2);
    let alpha = alpha_table()
        .iter()
        .min_by(|a, b| (a.1 - big_r).powi(2).total_cmp(&(b.1 - big_r).powi(2)))
        .map(|&(a, _)| a)
        .unwrap_or(ALPHA_MAX);
    let eta = (sigma_r - sigma_l) * gamma(2.0 / alpha) / gamma(1.0 / alpha)
        * (gamma(1.0 / alpha) / gamma(3.0 / alpha)).sqrt();
    Aggd {
        alpha,
        eta,
        sigma_l,
        sigma_r,
    }
}

pub const NSS_FEATURES: usize = 36;

/// Rec. 601 luma of linearized RGB, in `[0, 1]`.
pub fn nss_gray(f: &Frame) -> Vec<f64> {
    f.data
        .chunks_exact(3)
        .map(|p| {
            0.299 * srgb_to_linear(p[0] as f64)
                + 0.587 * srgb_to_linear(p[1] as f64)
                + 0.114 * srgb_to_linear(p[2] as f64)
        })
        .collect()
}

/// Mean-subtracted contrast-normalized coefficients with a 7x7 Gaussian (sigma 7/6).
pub fn mscn(gray: &[f64], h: usize, w: usize) -> Vec<f64> {
    let k = gaussian_kernel(7, 7.0 / 6.0);
    // Centering first keeps flat regions exactly zero.
    let g = gray.iter().sum::<f64>() / gray.len().max(1) as f64;
    let centered: Vec<f64> = gray.iter().map(|v| v - g).collect();
    let mu = filter_same(&centered, h, w, &k);
    let sq: Vec<f64> = centered.iter().map(|v| v * v).collect();
    let mu_sq = filter_same(&sq, h, w, &k);
    centered
        .iter()
        .zip(&mu)
        .zip(&mu_sq)
        .map(|((&i, &m), &m2)| {
            let sigma = (m2 - m * m).abs().sqrt();
            (i - m) / (sigma + 1.0 / 255.0)
        })
        .collect()
}

fn scale_features(gray: &[f64], h: usize, w: usize, out: &mut Vec<f64>) {
    let m = mscn(gray, h, w);
    let fit = fit_aggd(&m);
    out.push(fit.alpha);
    out.push(((fit.sigma_l.powi(2) + fit.sigma_r.powi(2)) / 2.0).sqrt());
    let shifts: [(isize, isize); 4] = [(0, 1), (1, 0), (1, 1), (1, -1)];
    for (dy, dx) in shifts {
        let mut prod = Vec::with_capacity(h * w);
        for y in 0..h as isize {
            for x in 0..w as isize {
                let (yy, xx) = (y + dy, x + dx);
                if yy < h as isize && xx >= 0 && xx < w as isize {
                    prod.push(
                        m[(y * w as isize + x) as usize] * m[(yy * w as isize + xx) as usize],
                    );
                }
            }
        }
        let f = fit_aggd(&prod);
        out.extend([f.alpha, f.eta, f.sigma_l, f.sigma_r]);
    }
}

/// 36 natural-scene-statistics features: 18 at full and 18 at half resolution.
pub fn brisque_features(f: &Frame) -> Result<Vec<f64>> {
    let (h, w) = (f.height, f.width);
    if h < 16 || w < 16 {
        return Err(Error::Shape(format!(
            "NSS features need at least 16x16 frames, got {h}x{w}"
        )));
    }
    let gray = nss_gray(f);
    let mut out = Vec::with_capacity(NSS_FEATURES);
    scale_features(&gray, h, w, &mut out);
    let (h2, w2) = (h / 2, w / 2);
    let mut half = Vec::with_capacity(h2 * w2);
    for y in 0..h2 {
        for x in 0..w2 {
            let s = gray[2 * y * w + 2 * x]
                + gray[2 * y * w + 2 * x + 1]
                + gray[(2 * y + 1) * w + 2 * x]
                + gray[(2 * y + 1) * w + 2 * x + 1];
            half.push(s / 4.0);
        }
    }
    scale_features(&half, h2, w2, &mut out);
    Ok(out)
}

/// Mean and regularized covariance of NSS features over ground-truth frames.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PristineStats {
    pub version: String,
    pub frames: usize,
    pub mean: Vec<f64>,
    /// Row-major `36 x 36`, ridge already added.
    pub covariance: Vec<f64>,
}

pub const PRISTINE_MIN_FRAMES: usize = 100;
pub const PRISTINE_RIDGE: f64 = 1e-6;

impl PristineStats {
    pub fn fit(features: &[Vec<f64>]) -> Result<Self> {
        if features.len() < PRISTINE_MIN_FRAMES {
            return Err(Error::config(
                "pristine.frames",
                format!(
                    "need at least {PRISTINE_MIN_FRAMES} frames, got {}",
                    features.len()
                ),
            ));
        }
        let d = features[0].len();
        let n = features.len() as f64;
        let mut mean = vec![0.0; d];
        for f in features {
            for (m, v) in mean.iter_mut().zip(f) {
                *m += v / n;
            }
        }
        let mut cov = vec![0.0; d * d];
        for f in features {
            for i in 0..d {
                for j in 0..d {
                    cov[i * d + j] += (f[i] - mean[i]) * (f[j] - mean[j]) / (n - 1.0);
                }
            }
        }
        for i in 0..d {
            cov[i * d + i] += PRISTINE_RIDGE;
        }
        let stats = Self {
            version: BRISQUE_VERSION.into(),
            frames: features.len(),
            mean,
            covariance: cov,
        };
        stats.cholesky()?;
        Ok(stats)
    }

    fn cholesky(&self) -> Result<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
        let d = self.mean.len();
        if self.covariance.len() != d * d {
            return Err(Error::config(
                "pristine.covariance",
                format!("expected {} entries", d * d),
            ));
        }
        DMatrix::from_row_slice(d, d, &self.covariance)
            .cholesky()
            .ok_or_else(|| {
                Error::config(
                    "pristine.covariance",
                    "covariance is singular even with the ridge",
                )
            })
    }

    /// Mahalanobis distance of `features` from the pristine mean.
    pub fn distance(&self, features: &[f64]) -> Result<f64> {
        let chol = self.cholesky()?;
        let diff = DVector::from_iterator(
            self.mean.len(),
            features.iter().zip(&self.mean).map(|(f, m)| f - m),
        );
        let sol = chol.solve(&diff);
        Ok(diff.dot(&sol).max(0.0).sqrt())
    }
}

pub fn brisque_score(f: &Frame, pristine: &PristineStats) -> Result<f64> {
    pristine.distance(&brisque_features(f)?)
}

/// Per-clip values and aggregates of one metric.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricEntry {
    pub per_clip: BTreeMap<String, f64>,
    pub mean: f64,
    pub std: f64,
    pub version: String,
}

impl MetricEntry {
    pub fn from_values(per_clip: BTreeMap<String, f64>, version: &str) -> Self {
        let v: Vec<f64> = per_clip.values().copied().collect();
        let mean = v.iter().sum::<f64>() / v.len().max(1) as f64;
        Self {
            per_clip,
            mean,
            std: population_std(&v),
            version: version.into(),
        }
    }
}

pub type MetricsReport = BTreeMap<String, MetricEntry>;

#[derive(Clone, Debug, Default)]
pub struct EvalOptions {
    pub angle_std: AngleStd,
}

#[derive(Default)]
struct ClipValues {
    values: Vec<(&'static str, f64)>,
}

fn mean_over_frames(
    clip: &VideoClip,
    gt: &VideoClip,
    f: impl Fn(&Frame, &Frame) -> Result<f64>,
) -> Result<f64> {
    let mut total = 0.0;
    for t in 0..clip.frames {
        total += f(&clip.frame(t), &gt.frame(t))?;
    }
    Ok(total / clip.frames as f64)
}

fn clip_metrics(
    clip: &VideoClip,
    gt: Option<&VideoClip>,
    pristine: Option<&PristineStats>,
    opts: &EvalOptions,
) -> Result<ClipValues> {
    let mut out = ClipValues::default();
    if let Some(gt) = gt {
        out.values.push(("ssim", mean_over_frames(clip, gt, ssim)?));
        out.values.push(("psnr", mean_over_frames(clip, gt, psnr)?));
        out.values.push((
            "perceptual_proxy",
            mean_over_frames(clip, gt, perceptual_proxy)?,
        ));
    }
    if clip.frames >= 2 {
        out.values
            .push(("temporal_perceptual", temporal_perceptual(clip)?));
        out.values.push((
            "flow_consistency",
            flow_consistency(clip, opts.angle_std)?.score,
        ));
    }
    out.values
        .push(("color_consistency", color_consistency(clip)));
    if let Some(p) = pristine {
        let mut total = 0.0;
        for f in clip.frames() {
            total += brisque_score(&f, p)?;
        }
        out.values.push(("brisque", total / clip.frames as f64));
    }
    Ok(out)
}

fn version_of(metric: &str) -> &'static str {
    match metric {
        "ssim" => SSIM_VERSION,
        "psnr" => PSNR_VERSION,
        "perceptual_proxy" | "temporal_perceptual" => PROXY_VERSION,
        "flow_consistency" => FLOW_VERSION,
        "color_consistency" => COLOR_VERSION,
        _ => BRISQUE_VERSION,
    }
}

/// Evaluates every clip; paired metrics need ground truth for every clip id.
pub fn evaluate(
    clips: &BTreeMap<String, VideoClip>,
    ground_truth: Option<&BTreeMap<String, VideoClip>>,
    pristine: Option<&PristineStats>,
    opts: &EvalOptions,
) -> Result<MetricsReport> {
    if clips.is_empty() {
        return Err(Error::data(None, "no clips to evaluate"));
    }
    if let Some(gt) = ground_truth {
        for (id, c) in clips {
            let g = gt
                .get(id)
                .ok_or_else(|| Error::data(None, format!("no ground truth for clip `{id}`")))?;
            if (g.frames, g.height, g.width) != (c.frames, c.height, c.width) {
                return Err(Error::data(
                    None,
                    format!("ground truth for clip `{id}` has a different shape"),
                ));
            }
        }
    }
    let ids: Vec<&String> = clips.keys().collect();
    let rows = ids
        .par_iter()
        .map(|id| clip_metrics(&clips[*id], ground_truth.map(|g| &g[*id]), pristine, opts))
        .collect::<Result<Vec<_>>>()?;
    let mut per_metric: BTreeMap<&'static str, BTreeMap<String, f64>> = BTreeMap::new();
    for (id, row) in ids.iter().zip(rows) {
        for (name, v) in row.values {
            if !v.is_finite() {
                return Err(Error::Numerical(format!(
                    "metric {name} is not finite for clip `{id}`"
                )));
            }
            per_metric.entry(name).or_default().insert((*id).clone(), v);
        }
    }
    Ok(per_metric
        .into_iter()
        .map(|(k, v)| (k.to_string(), MetricEntry::from_values(v, version_of(k))))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn textured(h: usize, w: usize, seed: u64) -> Frame {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..h * w * 3)
            .map(|_| rand::Rng::random_range(&mut rng, 0.0f32..1.0))
            .collect();
        Frame::new(h, w, data).unwrap()
    }

    #[test]
    fn ssim_identity_symmetry_and_anticorrelation() {
        let a = textured(24, 24, 1);
        let b = textured(24, 24, 2);
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
        assert_eq!(ssim(&a, &b).unwrap(), ssim(&b, &a).unwrap());
        let checker = Frame::new(
            24,
            24,
            (0..24 * 24 * 3)
                .map(|i| (((i / 3) % 24 + (i / 3) / 24) % 2) as f32)
                .collect(),
        )
        .unwrap();
        let inv = Frame::new(24, 24, checker.data.iter().map(|v| 1.0 - v).collect()).unwrap();
        assert!(ssim(&checker, &inv).unwrap() < 0.0);
    }

    #[test]
    fn psnr_examples() {
        let z = Frame::filled(4, 4, [0.0; 3]);
        let t = Frame::filled(4, 4, [0.1; 3]);
        assert_eq!(psnr(&z, &z).unwrap(), PSNR_CAP);
        assert!((psnr(&z, &t).unwrap() - 20.0).abs() < 1e-5);
        let h = Frame::filled(4, 4, [0.05; 3]);
        assert!((psnr(&z, &h).unwrap() - psnr(&z, &t).unwrap() - 20.0 * 2f64.log10()).abs() < 1e-4);
    }

    #[test]
    fn proxy_identity_symmetry_monotone() {
        let a = textured(32, 32, 3);
        let b = textured(32, 32, 4);
        assert_eq!(perceptual_proxy(&a, &a).unwrap(), 0.0);
        assert_eq!(
            perceptual_proxy(&a, &b).unwrap(),
            perceptual_proxy(&b, &a).unwrap()
        );
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let eps: Vec<f32> = (0..a.data.len())
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        let noisy = |s: f32| {
            Frame::new(
                32,
                32,
                a.data.iter().zip(&eps).map(|(v, e)| v + s * e).collect(),
            )
            .unwrap()
        };
        let d: Vec<f64> = [0.01, 0.05, 0.1]
            .iter()
            .map(|&s| perceptual_proxy(&a, &noisy(s)).unwrap())
            .collect();
        assert!(d[0] < d[1] && d[1] < d[2], "{d:?}");
    }

    #[test]
    fn lab_white_black_round_trip() {
        let w = srgb_to_lab([1.0, 1.0, 1.0]);
        assert!(
            (w[0] - 100.0).abs() < 1e-6 && w[1].abs() < 1e-6 && w[2].abs() < 1e-6,
            "{w:?}"
        );
        assert_eq!(srgb_to_lab([0.0, 0.0, 0.0]), [0.0, 0.0, 0.0]);
        for r in 0..10 {
            for g in 0..10 {
                for b in 0..10 {
                    let c = [r as f64 / 9.0, g as f64 / 9.0, b as f64 / 9.0];
                    let lab = srgb_to_lab(c);
                    let back = srgb_to_lab(lab_to_srgb(lab));
                    for i in 0..3 {
                        assert!((lab[i] - back[i]).abs() < 1e-4, "{c:?}");
                    }
                }
            }
        }
    }

    #[test]
    fn aggd_gaussian_recovery() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let x: Vec<f64> = (0..1_000_000)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        let f = fit_aggd(&x);
        assert!((f.alpha - 2.0).abs() < 0.05, "{f:?}");
        assert!((f.sigma_l / f.sigma_r - 1.0).abs() < 0.02, "{f:?}");
        assert!(f.eta.abs() < 0.01, "{f:?}");
    }

    #[test]
    fn constant_frame_features() {
        let f = Frame::filled(16, 16, [0.4; 3]);
        let g = nss_gray(&f);
        assert!(mscn(&g, 16, 16).iter().all(|&v| v == 0.0));
        let feats = brisque_features(&f).unwrap();
        assert_eq!(feats.len(), NSS_FEATURES);
        assert_eq!(feats[0], ALPHA_MAX);
    }

    #[test]
    fn flow_static_and_formula() {
        let f = textured(32, 32, 9);
        let clip = VideoClip::from_frames(&[f.clone(), f.clone(), f]).unwrap();
        let s = flow_consistency(&clip, AngleStd::Literal).unwrap();
        assert_eq!(s.score, 1.0);
        assert!(s.tracks > 0);
        assert_eq!(flow_score(0.5, 0.5), 0.5);
    }

    #[test]
    fn report_shapes() {
        let f = textured(32, 32, 9);
        let clip = VideoClip::from_frames(&[f.clone(), f]).unwrap();
        let clips: BTreeMap<String, VideoClip> = [("a".to_string(), clip)].into();
        let r = evaluate(&clips, Some(&clips), None, &EvalOptions::default()).unwrap();
        assert_eq!(r["ssim"].per_clip["a"], 1.0);
        assert_eq!(r["psnr"].mean, PSNR_CAP);
        assert_eq!(r["perceptual_proxy"].mean, 0.0);
        assert_eq!(r["ssim"].std, 0.0);
        assert!(evaluate(&BTreeMap::new(), None, None, &EvalOptions::default()).is_err());
    }
}
