//! The recording tape and its reverse pass.

use crate::kernels::{self, AttnGeom, AttnSaved, ConvGeom, NormStats};
use crate::{Float, Tensor};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddBias(Var, Var),
    MatMul(Var, Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    Silu(Var),
    Sigmoid(Var),
    Norm {
        x: Var,
        gamma: Var,
        beta: Var,
        n: usize,
        spatial: usize,
        c: usize,
        groups: usize,
        stats: NormStats<T>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        geom: AttnGeom,
        saved: AttnSaved<T>,
    },
    Reshape(Var),
    Permute(Var, Vec<usize>),
    ConcatLast(Var, Var),
    Upsample2x(Var),
    MeanAxis {
        x: Var,
        axis: usize,
    },
    AddGroupBias {
        x: Var,
        e: Var,
        group: usize,
    },
    ScaleRows(Var, Var),
    MulScalar(Var, Var),
    Mean(Var),
    TopKMean {
        x: Var,
        selected: Vec<usize>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// A reverse-mode autodiff tape.
///
/// Every operation evaluates eagerly and records how to propagate gradients back to its
/// inputs. Tapes built with [`Graph::inference`] never track gradients.
pub struct Graph<T: Float> {
    nodes: Vec<Node<T>>,
    grad_enabled: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Float> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl<T: Float> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn outer_inner(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<T: Float> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A tape that records values only; [`Graph::param`] behaves like [`Graph::constant`].
    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf whose gradient is wanted.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        let needs_grad = self.grad_enabled;
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn val(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "elementwise shape mismatch");
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::from_vec(ta.shape(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let t = self.binary(a, b, |x, y| x + y);
        self.push(t, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let t = self.binary(a, b, |x, y| x - y);
        self.push(t, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let t = self.binary(a, b, |x, y| x * y);
        self.push(t, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let t = self.value(a).map(|x| x * c);
        self.push(t, Op::Scale(a, c), &[a])
    }

    /// Adds `bias` (shape `[c]`) along the last axis of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Var {
        let c = self.value(bias).len();
        let tx = self.value(x);
        assert_eq!(tx.last_dim(), c, "bias length mismatch");
        let b = self.val(bias);
        let mut data = tx.data().to_vec();
        for row in data.chunks_exact_mut(c) {
            for (v, &bb) in row.iter_mut().zip(b) {
                *v += bb;
            }
        }
        let t = Tensor::from_vec(tx.shape(), data);
        self.push(t, Op::AddBias(x, bias), &[x, bias])
    }

    /// `x[..., k] @ w[k, n]`.
    pub fn matmul(&mut self, x: Var, w: Var) -> Var {
        let (tx, tw) = (self.value(x), self.value(w));
        assert_eq!(tw.shape().len(), 2, "matmul weight must be 2-D");
        let (k, n) = (tw.shape()[0], tw.shape()[1]);
        assert_eq!(tx.last_dim(), k, "matmul inner dimension mismatch");
        let m = tx.len() / k;
        let mut out = vec![T::zero(); m * n];
        crate::gemm(
            T::one(),
            crate::MatRef::row_major(tx.data(), 0, m, k, k),
            crate::MatRef::row_major(tw.data(), 0, k, n, n),
            T::zero(),
            &mut out,
            0,
            n,
        );
        let mut shape = tx.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let t = Tensor::from_vec(&shape, out);
        self.push(t, Op::MatMul(x, w), &[x, w])
    }

    /// Linear layer: `x @ w + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let y = self.matmul(x, w);
        match b {
            Some(b) => self.add_bias(y, b),
            None => y,
        }
    }

    /// 2-D convolution of NHWC `x` with `w: [kh, kw, cin, cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(xs.len(), 4, "conv2d input must be NHWC");
        assert_eq!(ws.len(), 4, "conv2d weight must be [kh, kw, cin, cout]");
        assert_eq!(xs[3], ws[2], "conv2d channel mismatch");
        let geom = ConvGeom {
            n: xs[0],
            h: xs[1],
            w: xs[2],
            cin: xs[3],
            kh: ws[0],
            kw: ws[1],
            cout: ws[3],
            stride,
            pad,
        };
        let bias = b.map(|b| self.val(b));
        let out = kernels::conv2d_forward(self.val(x), self.val(w), bias, &geom);
        let (ho, wo) = geom.out_hw();
        let t = Tensor::from_vec(&[geom.n, ho, wo, geom.cout], out);
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(t, Op::Conv2d { x, w, b, geom }, &inputs)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| v / (T::one() + (-v).exp()));
        self.push(t, Op::Silu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.value(x).map(sigmoid);
        self.push(t, Op::Sigmoid(x), &[x])
    }

    /// Group normalization of `[n, ..., c]`, statistics per sample and channel group.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize, eps: f64) -> Var {
        let shape = self.shape(x).to_vec();
        let n = shape[0];
        let c = *shape.last().unwrap();
        let spatial = shape[1..shape.len() - 1].iter().product();
        self.norm(x, gamma, beta, n, spatial, c, groups, eps)
    }

    /// Layer normalization over the last axis.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let shape = self.shape(x);
        let c = *shape.last().unwrap();
        let rows = self.value(x).len() / c;
        self.norm(x, gamma, beta, rows, 1, c, 1, eps)
    }

    #[allow(clippy::too_many_arguments)]
    fn norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        n: usize,
        spatial: usize,
        c: usize,
        groups: usize,
        eps: f64,
    ) -> Var {
        let (out, stats) = kernels::group_norm_forward(
            self.val(x),
            n,
            spatial,
            c,
            groups,
            self.val(gamma),
            self.val(beta),
            T::lit(eps),
        );
        let t = Tensor::from_vec(self.shape(x), out);
        self.push(
            t,
            Op::Norm {
                x,
                gamma,
                beta,
                n,
                spatial,
                c,
                groups,
                stats,
            },
            &[x, gamma, beta],
        )
    }

    /// Multi-head scaled dot-product attention; `q: [b, nq, d]`, `k, v: [b, nk, d]`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Var {
        let qs = self.shape(q).to_vec();
        let ks = self.shape(k).to_vec();
        assert_eq!(qs.len(), 3, "attention expects [batch, tokens, dim]");
        assert_eq!(ks, self.shape(v), "key/value shape mismatch");
        assert_eq!((qs[0], qs[2]), (ks[0], ks[2]), "query/key shape mismatch");
        let geom = AttnGeom {
            batch: qs[0],
            nq: qs[1],
            nk: ks[1],
            dim: qs[2],
            heads,
        };
        let (out, saved) = kernels::attention_forward(self.val(q), self.val(k), self.val(v), &geom);
        let t = Tensor::from_vec(&qs, out);
        self.push(
            t,
            Op::Attention {
                q,
                k,
                v,
                geom,
                saved,
            },
            &[q, k, v],
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let t = self.value(x).clone().reshape(shape);
        self.push(t, Op::Reshape(x), &[x])
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Var {
        let t = self.value(x).permute(perm);
        self.push(t, Op::Permute(x, perm.to_vec()), &[x])
    }

    /// Concatenates along the last axis.
    pub fn concat_last(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        let (ca, cb) = (ta.last_dim(), tb.last_dim());
        assert_eq!(
            ta.len() / ca,
            tb.len() / cb,
            "concat leading shape mismatch"
        );
        let mut data = Vec::with_capacity(ta.len() + tb.len());
        for (ra, rb) in ta.data().chunks_exact(ca).zip(tb.data().chunks_exact(cb)) {
            data.extend_from_slice(ra);
            data.extend_from_slice(rb);
        }
        let mut shape = ta.shape().to_vec();
        *shape.last_mut().unwrap() = ca + cb;
        let t = Tensor::from_vec(&shape, data);
        self.push(t, Op::ConcatLast(a, b), &[a, b])
    }

    pub fn upsample2x(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        let out = kernels::upsample2x(self.val(x), s[0], s[1], s[2], s[3]);
        let t = Tensor::from_vec(&[s[0], 2 * s[1], 2 * s[2], s[3]], out);
        self.push(t, Op::Upsample2x(x), &[x])
    }

    /// Mean over one axis, which is removed from the shape.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Var {
        let shape = self.shape(x).to_vec();
        let (outer, a, inner) = outer_inner(&shape, axis);
        let src = self.val(x);
        let inv = T::one() / T::lit(a as f64);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..a {
                let base = (o * a + j) * inner;
                for i in 0..inner {
                    out[o * inner + i] += src[base + i];
                }
            }
        }
        for v in &mut out {
            *v *= inv;
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let t = Tensor::from_vec(&out_shape, out);
        self.push(t, Op::MeanAxis { x, axis }, &[x])
    }

    /// Adds a per-group vector: `x[n, ..., c] += e[n / group, c]`.
    pub fn add_group_bias(&mut self, x: Var, e: Var, group: usize) -> Var {
        let tx = self.value(x);
        let te = self.value(e);
        let c = tx.last_dim();
        let n = tx.shape()[0];
        assert_eq!(te.shape(), &[n / group, c], "group bias shape mismatch");
        let per = tx.len() / n;
        let mut data = tx.data().to_vec();
        for s in 0..n {
            let ev = &te.data()[(s / group) * c..(s / group + 1) * c];
            for row in data[s * per..(s + 1) * per].chunks_exact_mut(c) {
                for (v, &b) in row.iter_mut().zip(ev) {
                    *v += b;
                }
            }
        }
        let t = Tensor::from_vec(tx.shape(), data);
        self.push(t, Op::AddGroupBias { x, e, group }, &[x, e])
    }

    /// Multiplies each leading-axis slab `x[b, ...]` by `g[b]`.
    pub fn scale_rows(&mut self, x: Var, g: Var) -> Var {
        let tx = self.value(x);
        let gv = self.val(g);
        let n = tx.shape()[0];
        assert_eq!(gv.len(), n, "row scale length mismatch");
        let per = tx.len() / n;
        let mut data = tx.data().to_vec();
        for (s, chunk) in data.chunks_exact_mut(per).enumerate() {
            for v in chunk {
                *v *= gv[s];
            }
        }
        let t = Tensor::from_vec(tx.shape(), data);
        self.push(t, Op::ScaleRows(x, g), &[x, g])
    }

    /// Multiplies `x` by the single element of `s`.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Var {
        assert_eq!(
            self.value(s).len(),
            1,
            "mul_scalar expects a one-element tensor"
        );
        let sv = self.val(s)[0];
        let t = self.value(x).map(|v| v * sv);
        self.push(t, Op::MulScalar(x, s), &[x, s])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let m = tx.sum() / T::lit(tx.len() as f64);
        self.push(Tensor::scalar(m), Op::Mean(x), &[x])
    }

    /// Mean of the `k` largest elements. Ties are resolved by lower flat index first.
    pub fn topk_mean(&mut self, x: Var, k: usize) -> Var {
        let data = self.val(x);
        assert!(k >= 1 && k <= data.len(), "top-k count {k} out of range");
        let mut order: Vec<usize> = (0..data.len()).collect();
        let cmp = |a: &usize, b: &usize| {
            data[*b]
                .partial_cmp(&data[*a])
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(b))
        };
        if k < order.len() {
            order.select_nth_unstable_by(k - 1, cmp);
        }
        let mut selected = order[..k].to_vec();
        selected.sort_unstable();
        let sum: T = selected.iter().map(|&i| data[i]).sum();
        let t = Tensor::scalar(sum / T::lit(k as f64));
        self.push(t, Op::TopKMean { x, selected }, &[x])
    }

    /// Runs the reverse pass from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.value(loss).len(), 1, "backward expects a scalar loss");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &gout, &mut grads);
            grads[idx] = Some(gout);
        }
        Gradients { grads }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.wants(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, idx: usize, gout: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[idx];
        let gd = gout.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, gout.clone());
                self.accumulate(grads, *b, gout.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, gout.clone());
                if self.wants(*b) {
                    self.accumulate(grads, *b, gout.map(|v| -v));
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    let d = gd.iter().zip(self.val(*b)).map(|(&g, &y)| g * y).collect();
                    self.accumulate(grads, *a, Tensor::from_vec(gout.shape(), d));
                }
                if self.wants(*b) {
                    let d = gd.iter().zip(self.val(*a)).map(|(&g, &x)| g * x).collect();
                    self.accumulate(grads, *b, Tensor::from_vec(gout.shape(), d));
                }
            }
            Op::Scale(a, c) => {
                let c = *c;
                self.accumulate(grads, *a, gout.map(|v| v * c));
            }
            Op::AddBias(x, b) => {
                self.accumulate(grads, *x, gout.clone());
                if self.wants(*b) {
                    let c = self.value(*b).len();
                    let mut db = vec![T::zero(); c];
                    for row in gd.chunks_exact(c) {
                        for (acc, &v) in db.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    self.accumulate(grads, *b, Tensor::from_vec(self.shape(*b), db));
                }
            }
            Op::MatMul(x, w) => {
                let tw = self.value(*w);
                let (k, n) = (tw.shape()[0], tw.shape()[1]);
                let m = gout.len() / n;
                if self.wants(*x) {
                    let mut dx = vec![T::zero(); m * k];
                    crate::gemm(
                        T::one(),
                        crate::MatRef::row_major(gd, 0, m, n, n),
                        crate::MatRef::row_major(tw.data(), 0, k, n, n).t(),
                        T::zero(),
                        &mut dx,
                        0,
                        k,
                    );
                    self.accumulate(grads, *x, Tensor::from_vec(self.shape(*x), dx));
                }
                if self.wants(*w) {
                    let mut dw = vec![T::zero(); k * n];
                    crate::gemm(
                        T::one(),
                        crate::MatRef::row_major(self.val(*x), 0, m, k, k).t(),
                        crate::MatRef::row_major(gd, 0, m, n, n),
                        T::zero(),
                        &mut dw,
                        0,
                        n,
                    );
                    self.accumulate(grads, *w, Tensor::from_vec(tw.shape(), dw));
                }
            }
            Op::Conv2d { x, w, b, geom } => {
                let (dx, dw, db) =
                    kernels::conv2d_backward(self.val(*x), self.val(*w), gd, geom, self.wants(*x));
                if let Some(dx) = dx {
                    self.accumulate(grads, *x, Tensor::from_vec(self.shape(*x), dx));
                }
                self.accumulate(grads, *w, Tensor::from_vec(self.shape(*w), dw));
                if let Some(b) = b {
                    self.accumulate(grads, *b, Tensor::from_vec(self.shape(*b), db));
                }
            }
            Op::Silu(x) => {
                let d = gd
                    .iter()
                    .zip(self.val(*x))
                    .map(|(&g, &v)| {
                        let s = sigmoid(v);
                        g * s * (T::one() + v * (T::one() - s))
                    })
                    .collect();
                self.accumulate(grads, *x, Tensor::from_vec(gout.shape(), d));
            }
            Op::Sigmoid(x) => {
                let d = gd
                    .iter()
                    .zip(node.value.data())
                    .map(|(&g, &s)| g * s * (T::one() - s))
                    .collect();
                self.accumulate(grads, *x, Tensor::from_vec(gout.shape(), d));
            }
            Op::Norm {
                x,
                gamma,
                beta,
                n,
                spatial,
                c,
                groups,
                stats,
            } => {
                let (dx, dg, db) = kernels::group_norm_backward(
                    self.val(*x),
                    gd,
                    *n,
                    *spatial,
                    *c,
                    *groups,
                    self.val(*gamma),
                    stats,
                );
                self.accumulate(grads, *x, Tensor::from_vec(self.shape(*x), dx));
                self.accumulate(grads, *gamma, Tensor::from_vec(self.shape(*gamma), dg));
                self.accumulate(grads, *beta, Tensor::from_vec(self.shape(*beta), db));
            }
            Op::Attention {
                q,
                k,
                v,
                geom,
                saved,
            } => {
                let (dq, dk, dv) = kernels::attention_backward(
                    self.val(*q),
                    self.val(*k),
                    self.val(*v),
                    gd,
                    saved,
                    geom,
                );
                self.accumulate(grads, *q, Tensor::from_vec(self.shape(*q), dq));
                self.accumulate(grads, *k, Tensor::from_vec(self.shape(*k), dk));
                self.accumulate(grads, *v, Tensor::from_vec(self.shape(*v), dv));
            }
            Op::Reshape(x) => {
                self.accumulate(grads, *x, gout.clone().reshape(self.shape(*x)));
            }
            Op::Permute(x, perm) => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                self.accumulate(grads, *x, gout.permute(&inv));
            }
            Op::ConcatLast(a, b) => {
                let ca = self.value(*a).last_dim();
                let cb = self.value(*b).last_dim();
                let rows = gout.len() / (ca + cb);
                let mut da = Vec::with_capacity(rows * ca);
                let mut db = Vec::with_capacity(rows * cb);
                for row in gd.chunks_exact(ca + cb) {
                    da.extend_from_slice(&row[..ca]);
                    db.extend_from_slice(&row[ca..]);
                }
                self.accumulate(grads, *a, Tensor::from_vec(self.shape(*a), da));
                self.accumulate(grads, *b, Tensor::from_vec(self.shape(*b), db));
            }
            Op::Upsample2x(x) => {
                let s = self.shape(*x);
                let dx = kernels::upsample2x_backward(gd, s[0], s[1], s[2], s[3]);
                self.accumulate(grads, *x, Tensor::from_vec(s, dx));
            }
            Op::MeanAxis { x, axis } => {
                let shape = self.shape(*x);
                let (outer, a, inner) = outer_inner(shape, *axis);
                let inv = T::one() / T::lit(a as f64);
                let mut dx = vec![T::zero(); outer * a * inner];
                for o in 0..outer {
                    for j in 0..a {
                        let base = (o * a + j) * inner;
                        for i in 0..inner {
                            dx[base + i] = gd[o * inner + i] * inv;
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::from_vec(shape, dx));
            }
            Op::AddGroupBias { x, e, group } => {
                self.accumulate(grads, *x, gout.clone());
                if self.wants(*e) {
                    let c = gout.last_dim();
                    let n = gout.shape()[0];
                    let per = gout.len() / n;
                    let mut de = vec![T::zero(); (n / group) * c];
                    for s in 0..n {
                        let dst = &mut de[(s / group) * c..(s / group + 1) * c];
                        for row in gd[s * per..(s + 1) * per].chunks_exact(c) {
                            for (acc, &v) in dst.iter_mut().zip(row) {
                                *acc += v;
                            }
                        }
                    }
                    self.accumulate(grads, *e, Tensor::from_vec(self.shape(*e), de));
                }
            }
            Op::ScaleRows(x, g) => {
                let gv = self.val(*g);
                let n = gv.len();
                let per = gout.len() / n;
                if self.wants(*x) {
                    let mut dx = gd.to_vec();
                    for (s, chunk) in dx.chunks_exact_mut(per).enumerate() {
                        for v in chunk {
                            *v *= gv[s];
                        }
                    }
                    self.accumulate(grads, *x, Tensor::from_vec(gout.shape(), dx));
                }
                if self.wants(*g) {
                    let xv = self.val(*x);
                    let dg = (0..n)
                        .map(|s| {
                            gd[s * per..(s + 1) * per]
                                .iter()
                                .zip(&xv[s * per..(s + 1) * per])
                                .map(|(&a, &b)| a * b)
                                .sum()
                        })
                        .collect();
                    self.accumulate(grads, *g, Tensor::from_vec(self.shape(*g), dg));
                }
            }
            Op::MulScalar(x, s) => {
                let sv = self.val(*s)[0];
                if self.wants(*x) {
                    self.accumulate(grads, *x, gout.map(|v| v * sv));
                }
                if self.wants(*s) {
                    let ds: T = gd.iter().zip(self.val(*x)).map(|(&a, &b)| a * b).sum();
                    self.accumulate(grads, *s, Tensor::from_vec(self.shape(*s), vec![ds]));
                }
            }
            Op::Mean(x) => {
                let n = self.value(*x).len();
                let g = gd[0] / T::lit(n as f64);
                self.accumulate(grads, *x, Tensor::full(self.shape(*x), g));
            }
            Op::TopKMean { x, selected } => {
                let g = gd[0] / T::lit(selected.len() as f64);
                let mut dx = Tensor::zeros(self.shape(*x));
                for &i in selected {
                    dx.data_mut()[i] = g;
                }
                self.accumulate(grads, *x, dx);
            }
        }
    }
}

#[inline]
pub(crate) fn sigmoid<T: Float>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}
