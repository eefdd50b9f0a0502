//! Raw forward/backward kernels on flat slices. Layouts are channel-last.

use crate::scalar::{gemm, MatRef};
use crate::Float;

/// Geometry of a 2-D convolution over an NHWC batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub kh: usize,
    pub kw: usize,
    pub cout: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_hw(&self) -> (usize, usize) {
        let ho = (self.h + 2 * self.pad - self.kh) / self.stride + 1;
        let wo = (self.w + 2 * self.pad - self.kw) / self.stride + 1;
        (ho, wo)
    }

    /// Rows of the im2col matrix.
    pub fn rows(&self) -> usize {
        let (ho, wo) = self.out_hw();
        self.n * ho * wo
    }

    /// Columns of the im2col matrix (`kh * kw * cin`).
    pub fn patch(&self) -> usize {
        self.kh * self.kw * self.cin
    }
}

pub fn im2col<T: Float>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let (ho, wo) = g.out_hw();
    let k = g.patch();
    let mut cols = vec![T::zero(); g.rows() * k];
    for n in 0..g.n {
        for oy in 0..ho {
            for ox in 0..wo {
                let row = (n * ho + oy) * wo + ox;
                let dst = &mut cols[row * k..(row + 1) * k];
                for ky in 0..g.kh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for kx in 0..g.kw {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let src = ((n * g.h + iy as usize) * g.w + ix as usize) * g.cin;
                        let off = (ky * g.kw + kx) * g.cin;
                        dst[off..off + g.cin].copy_from_slice(&x[src..src + g.cin]);
                    }
                }
            }
        }
    }
    cols
}

pub fn col2im<T: Float>(cols: &[T], g: &ConvGeom) -> Vec<T> {
    let (ho, wo) = g.out_hw();
    let k = g.patch();
    let mut x = vec![T::zero(); g.n * g.h * g.w * g.cin];
    for n in 0..g.n {
        for oy in 0..ho {
            for ox in 0..wo {
                let row = (n * ho + oy) * wo + ox;
                let src = &cols[row * k..(row + 1) * k];
                for ky in 0..g.kh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for kx in 0..g.kw {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let dst = ((n * g.h + iy as usize) * g.w + ix as usize) * g.cin;
                        let off = (ky * g.kw + kx) * g.cin;
                        for c in 0..g.cin {
                            x[dst + c] += src[off + c];
                        }
                    }
                }
            }
        }
    }
    x
}

/// `out = im2col(x) * w + bias`, with `w` laid out as `[kh, kw, cin, cout]`.
pub fn conv2d_forward<T: Float>(x: &[T], w: &[T], bias: Option<&[T]>, g: &ConvGeom) -> Vec<T> {
    let m = g.rows();
    let k = g.patch();
    let mut out = vec![T::zero(); m * g.cout];
    if let Some(b) = bias {
        for row in out.chunks_exact_mut(g.cout) {
            row.copy_from_slice(b);
        }
    }
    let beta = if bias.is_some() { T::one() } else { T::zero() };
    if g.kh == 1 && g.kw == 1 && g.stride == 1 && g.pad == 0 {
        gemm(
            T::one(),
            MatRef::row_major(x, 0, m, k, k),
            MatRef::row_major(w, 0, k, g.cout, g.cout),
            beta,
            &mut out,
            0,
            g.cout,
        );
    } else {
        let cols = im2col(x, g);
        gemm(
            T::one(),
            MatRef::row_major(&cols, 0, m, k, k),
            MatRef::row_major(w, 0, k, g.cout, g.cout),
            beta,
            &mut out,
            0,
            g.cout,
        );
    }
    out
}

/// Gradients of [`conv2d_forward`]: returns `(dx, dw, dbias)`; `dx` only when requested.
pub fn conv2d_backward<T: Float>(
    x: &[T],
    w: &[T],
    dy: &[T],
    g: &ConvGeom,
    want_dx: bool,
) -> (Option<Vec<T>>, Vec<T>, Vec<T>) {
    let m = g.rows();
    let k = g.patch();
    let pointwise = g.kh == 1 && g.kw == 1 && g.stride == 1 && g.pad == 0;
    let owned_cols;
    let cols: &[T] = if pointwise {
        x
    } else {
        owned_cols = im2col(x, g);
        &owned_cols
    };
    let mut dw = vec![T::zero(); k * g.cout];
    gemm(
        T::one(),
        MatRef::row_major(cols, 0, m, k, k).t(),
        MatRef::row_major(dy, 0, m, g.cout, g.cout),
        T::zero(),
        &mut dw,
        0,
        g.cout,
    );
    let mut db = vec![T::zero(); g.cout];
    for row in dy.chunks_exact(g.cout) {
        for (acc, &v) in db.iter_mut().zip(row) {
            *acc += v;
        }
    }
    let dx = want_dx.then(|| {
        let mut dcols = vec![T::zero(); m * k];
        gemm(
            T::one(),
            MatRef::row_major(dy, 0, m, g.cout, g.cout),
            MatRef::row_major(w, 0, k, g.cout, g.cout).t(),
            T::zero(),
            &mut dcols,
            0,
            k,
        );
        if pointwise {
            dcols
        } else {
            col2im(&dcols, g)
        }
    });
    (dx, dw, db)
}

/// Per-(sample, group) statistics saved for the normalization backward pass.
#[derive(Clone, Debug)]
pub struct NormStats<T> {
    pub mean: Vec<T>,
    pub rstd: Vec<T>,
}

/// Group normalization over `[n, spatial, c]` with `groups` channel groups.
#[allow(clippy::too_many_arguments)]
pub fn group_norm_forward<T: Float>(
    x: &[T],
    n: usize,
    spatial: usize,
    c: usize,
    groups: usize,
    gamma: &[T],
    beta: &[T],
    eps: T,
) -> (Vec<T>, NormStats<T>) {
    assert!(
        c.is_multiple_of(groups),
        "channels {c} not divisible by groups {groups}"
    );
    let cg = c / groups;
    let count = T::lit((spatial * cg) as f64);
    let mut out = vec![T::zero(); x.len()];
    let mut mean = vec![T::zero(); n * groups];
    let mut rstd = vec![T::zero(); n * groups];
    for s in 0..n {
        let base = s * spatial * c;
        for grp in 0..groups {
            let c0 = grp * cg;
            let mut sum = T::zero();
            for p in 0..spatial {
                let o = base + p * c + c0;
                for &v in &x[o..o + cg] {
                    sum += v;
                }
            }
            let mu = sum / count;
            let mut var = T::zero();
            for p in 0..spatial {
                let o = base + p * c + c0;
                for &v in &x[o..o + cg] {
                    let d = v - mu;
                    var += d * d;
                }
            }
            let r = T::one() / (var / count + eps).sqrt();
            mean[s * groups + grp] = mu;
            rstd[s * groups + grp] = r;
            for p in 0..spatial {
                let o = base + p * c + c0;
                for j in 0..cg {
                    out[o + j] = (x[o + j] - mu) * r * gamma[c0 + j] + beta[c0 + j];
                }
            }
        }
    }
    (out, NormStats { mean, rstd })
}

/// Backward of [`group_norm_forward`]: returns `(dx, dgamma, dbeta)`.
#[allow(clippy::too_many_arguments)]
pub fn group_norm_backward<T: Float>(
    x: &[T],
    dy: &[T],
    n: usize,
    spatial: usize,
    c: usize,
    groups: usize,
    gamma: &[T],
    stats: &NormStats<T>,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let cg = c / groups;
    let count = T::lit((spatial * cg) as f64);
    let mut dx = vec![T::zero(); x.len()];
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for s in 0..n {
        let base = s * spatial * c;
        for grp in 0..groups {
            let c0 = grp * cg;
            let mu = stats.mean[s * groups + grp];
            let r = stats.rstd[s * groups + grp];
            let mut sum_dxhat = T::zero();
            let mut sum_dxhat_xhat = T::zero();
            for p in 0..spatial {
                let o = base + p * c + c0;
                for j in 0..cg {
                    let xhat = (x[o + j] - mu) * r;
                    let g = dy[o + j];
                    dgamma[c0 + j] += g * xhat;
                    dbeta[c0 + j] += g;
                    let dxhat = g * gamma[c0 + j];
                    sum_dxhat += dxhat;
                    sum_dxhat_xhat += dxhat * xhat;
                }
            }
            let m1 = sum_dxhat / count;
            let m2 = sum_dxhat_xhat / count;
            for p in 0..spatial {
                let o = base + p * c + c0;
                for j in 0..cg {
                    let xhat = (x[o + j] - mu) * r;
                    let dxhat = dy[o + j] * gamma[c0 + j];
                    dx[o + j] = r * (dxhat - m1 - xhat * m2);
                }
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// Saved softmax probabilities of a multi-head attention call, `[batch, heads, nq, nk]`.
#[derive(Clone, Debug)]
pub struct AttnSaved<T> {
    pub probs: Vec<T>,
}

/// Dimensions of a batched multi-head attention call.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttnGeom {
    pub batch: usize,
    pub nq: usize,
    pub nk: usize,
    pub dim: usize,
    pub heads: usize,
}

impl AttnGeom {
    fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

/// Scaled dot-product attention. `q: [b, nq, d]`, `k, v: [b, nk, d]`, softmax over keys.
pub fn attention_forward<T: Float>(
    q: &[T],
    k: &[T],
    v: &[T],
    g: &AttnGeom,
) -> (Vec<T>, AttnSaved<T>) {
    assert!(
        g.dim.is_multiple_of(g.heads),
        "dim {} not divisible by heads {}",
        g.dim,
        g.heads
    );
    let dh = g.head_dim();
    let scale = T::one() / T::lit(dh as f64).sqrt();
    let mut out = vec![T::zero(); g.batch * g.nq * g.dim];
    let mut probs = vec![T::zero(); g.batch * g.heads * g.nq * g.nk];
    for b in 0..g.batch {
        for h in 0..g.heads {
            let qo = b * g.nq * g.dim + h * dh;
            let ko = b * g.nk * g.dim + h * dh;
            let po = ((b * g.heads) + h) * g.nq * g.nk;
            gemm(
                scale,
                MatRef::row_major(q, qo, g.nq, dh, g.dim),
                MatRef::row_major(k, ko, g.nk, dh, g.dim).t(),
                T::zero(),
                &mut probs,
                po,
                g.nk,
            );
            for row in probs[po..po + g.nq * g.nk].chunks_exact_mut(g.nk) {
                softmax_in_place(row);
            }
            gemm(
                T::one(),
                MatRef::row_major(&probs, po, g.nq, g.nk, g.nk),
                MatRef::row_major(v, ko, g.nk, dh, g.dim),
                T::zero(),
                &mut out,
                qo,
                g.dim,
            );
        }
    }
    (out, AttnSaved { probs })
}

/// Backward of [`attention_forward`]: returns `(dq, dk, dv)`.
pub fn attention_backward<T: Float>(
    q: &[T],
    k: &[T],
    v: &[T],
    dout: &[T],
    saved: &AttnSaved<T>,
    g: &AttnGeom,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let dh = g.head_dim();
    let scale = T::one() / T::lit(dh as f64).sqrt();
    let mut dq = vec![T::zero(); q.len()];
    let mut dk = vec![T::zero(); k.len()];
    let mut dv = vec![T::zero(); v.len()];
    let mut dp = vec![T::zero(); g.nq * g.nk];
    for b in 0..g.batch {
        for h in 0..g.heads {
            let qo = b * g.nq * g.dim + h * dh;
            let ko = b * g.nk * g.dim + h * dh;
            let po = ((b * g.heads) + h) * g.nq * g.nk;
            let p = &saved.probs[po..po + g.nq * g.nk];
            // dv = p^T dout
            gemm(
                T::one(),
                MatRef::row_major(p, 0, g.nq, g.nk, g.nk).t(),
                MatRef::row_major(dout, qo, g.nq, dh, g.dim),
                T::zero(),
                &mut dv,
                ko,
                g.dim,
            );
            // dp = dout v^T
            gemm(
                T::one(),
                MatRef::row_major(dout, qo, g.nq, dh, g.dim),
                MatRef::row_major(v, ko, g.nk, dh, g.dim).t(),
                T::zero(),
                &mut dp,
                0,
                g.nk,
            );
            // ds = p * (dp - rowsum(dp * p)), scaled.
            for (prow, drow) in p.chunks_exact(g.nk).zip(dp.chunks_exact_mut(g.nk)) {
                let dot: T = prow.iter().zip(drow.iter()).map(|(&a, &b)| a * b).sum();
                for (d, &pp) in drow.iter_mut().zip(prow) {
                    *d = pp * (*d - dot) * scale;
                }
            }
            gemm(
                T::one(),
                MatRef::row_major(&dp, 0, g.nq, g.nk, g.nk),
                MatRef::row_major(k, ko, g.nk, dh, g.dim),
                T::zero(),
                &mut dq,
                qo,
                g.dim,
            );
            gemm(
                T::one(),
                MatRef::row_major(&dp, 0, g.nq, g.nk, g.nk).t(),
                MatRef::row_major(q, qo, g.nq, dh, g.dim),
                T::zero(),
                &mut dk,
                ko,
                g.dim,
            );
        }
    }
    (dq, dk, dv)
}

pub fn softmax_in_place<T: Float>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = T::one() / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

/// Nearest-neighbour 2x upsampling of `[n, h, w, c]`.
pub fn upsample2x<T: Float>(x: &[T], n: usize, h: usize, w: usize, c: usize) -> Vec<T> {
    let mut out = vec![T::zero(); n * 4 * h * w * c];
    for s in 0..n {
        for y in 0..2 * h {
            for xo in 0..2 * w {
                let src = ((s * h + y / 2) * w + xo / 2) * c;
                let dst = ((s * 2 * h + y) * 2 * w + xo) * c;
                out[dst..dst + c].copy_from_slice(&x[src..src + c]);
            }
        }
    }
    out
}

pub fn upsample2x_backward<T: Float>(dy: &[T], n: usize, h: usize, w: usize, c: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); n * h * w * c];
    for s in 0..n {
        for y in 0..2 * h {
            for xo in 0..2 * w {
                let dst = ((s * h + y / 2) * w + xo / 2) * c;
                let src = ((s * 2 * h + y) * 2 * w + xo) * c;
                for j in 0..c {
                    dx[dst + j] += dy[src + j];
                }
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &[f64], w: &[f64], g: &ConvGeom) -> Vec<f64> {
        let (ho, wo) = g.out_hw();
        let mut out = vec![0.0; g.n * ho * wo * g.cout];
        for n in 0..g.n {
            for oy in 0..ho {
                for ox in 0..wo {
                    for co in 0..g.cout {
                        let mut acc = 0.0;
                        for ky in 0..g.kh {
                            for kx in 0..g.kw {
                                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                                let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                if iy < 0 || ix < 0 || iy >= g.h as isize || ix >= g.w as isize {
                                    continue;
                                }
                                for ci in 0..g.cin {
                                    acc += x[((n * g.h + iy as usize) * g.w + ix as usize) * g.cin
                                        + ci]
                                        * w[((ky * g.kw + kx) * g.cin + ci) * g.cout + co];
                                }
                            }
                        }
                        out[((n * ho + oy) * wo + ox) * g.cout + co] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_naive_loops() {
        for &(stride, pad, k) in &[(1, 1, 3), (2, 1, 3), (1, 0, 1), (2, 0, 3)] {
            let g = ConvGeom {
                n: 2,
                h: 6,
                w: 5,
                cin: 3,
                kh: k,
                kw: k,
                cout: 4,
                stride,
                pad,
            };
            let x: Vec<f64> = (0..g.n * g.h * g.w * g.cin)
                .map(|i| ((i * 37) % 11) as f64 - 5.0)
                .collect();
            let w: Vec<f64> = (0..g.patch() * g.cout)
                .map(|i| ((i * 13) % 7) as f64 * 0.1 - 0.3)
                .collect();
            let got = conv2d_forward(&x, &w, None, &g);
            let want = naive_conv(&x, &w, &g);
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut row = vec![1.0f64, 2.0, -3.0, 1000.0];
        softmax_in_place(&mut row);
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(row[3] > 0.999);
    }

    #[test]
    fn upsample_backward_is_adjoint() {
        let (n, h, w, c) = (1, 2, 3, 2);
        let x: Vec<f64> = (0..n * h * w * c).map(|i| i as f64).collect();
        let dy: Vec<f64> = (0..n * 4 * h * w * c).map(|i| (i % 5) as f64).collect();
        let up = upsample2x(&x, n, h, w, c);
        let lhs: f64 = up.iter().zip(&dy).map(|(a, b)| a * b).sum();
        let dx = upsample2x_backward(&dy, n, h, w, c);
        let rhs: f64 = x.iter().zip(&dx).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
