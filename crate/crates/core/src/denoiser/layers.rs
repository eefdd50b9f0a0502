//! Building blocks of the video U-Net.

use relumix_autograd::{Float, Graph, Var};

use super::params::{Bound, Init, ParamBuilder, Pid};

const NORM_EPS: f64 = 1e-5;

/// Largest group count `<= max_groups` that divides `channels`.
pub fn groups_for(channels: usize, max_groups: usize) -> usize {
    (1..=max_groups.min(channels))
        .rev()
        .find(|g| channels.is_multiple_of(*g))
        .unwrap_or(1)
}

#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: Pid,
    pub bias: Pid,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    pub fn new(
        pb: &mut ParamBuilder,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        gain: f64,
    ) -> Self {
        pb.push_scope(name);
        let weight = pb.add(
            "weight",
            &[k, k, cin, cout],
            Init::Fan {
                fan_in: k * k * cin,
                gain,
            },
        );
        let bias = pb.add("bias", &[cout], Init::Zeros);
        pb.pop_scope();
        Self {
            weight,
            bias,
            stride,
            pad: k / 2,
        }
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Var {
        g.conv2d(
            x,
            p.var(self.weight),
            Some(p.var(self.bias)),
            self.stride,
            self.pad,
        )
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: Pid,
    pub bias: Option<Pid>,
}

impl Linear {
    pub fn new(
        pb: &mut ParamBuilder,
        name: &str,
        din: usize,
        dout: usize,
        bias: bool,
        gain: f64,
    ) -> Self {
        pb.push_scope(name);
        let weight = pb.add("weight", &[din, dout], Init::Fan { fan_in: din, gain });
        let bias = bias.then(|| pb.add("bias", &[dout], Init::Zeros));
        pb.pop_scope();
        Self { weight, bias }
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Var {
        g.linear(x, p.var(self.weight), self.bias.map(|b| p.var(b)))
    }
}

#[derive(Clone, Debug)]
pub struct Norm {
    pub gamma: Pid,
    pub beta: Pid,
    /// `None` for layer norm over the channel axis.
    pub groups: Option<usize>,
}

impl Norm {
    pub fn group(pb: &mut ParamBuilder, name: &str, channels: usize, groups: usize) -> Self {
        Self::build(pb, name, channels, Some(groups))
    }

    pub fn layer(pb: &mut ParamBuilder, name: &str, channels: usize) -> Self {
        Self::build(pb, name, channels, None)
    }

    fn build(pb: &mut ParamBuilder, name: &str, channels: usize, groups: Option<usize>) -> Self {
        pb.push_scope(name);
        let gamma = pb.add("gamma", &[channels], Init::Ones);
        let beta = pb.add("beta", &[channels], Init::Zeros);
        pb.pop_scope();
        Self {
            gamma,
            beta,
            groups,
        }
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Var {
        match self.groups {
            Some(groups) => g.group_norm(x, p.var(self.gamma), p.var(self.beta), groups, NORM_EPS),
            None => g.layer_norm(x, p.var(self.gamma), p.var(self.beta), NORM_EPS),
        }
    }
}

/// Residual block with an additive per-clip noise-level embedding.
#[derive(Clone, Debug)]
pub struct ResBlock {
    norm1: Norm,
    conv1: Conv,
    emb: Linear,
    norm2: Norm,
    conv2: Conv,
    skip: Option<Linear>,
}

impl ResBlock {
    pub fn new(
        pb: &mut ParamBuilder,
        name: &str,
        cin: usize,
        cout: usize,
        emb_dim: usize,
        max_groups: usize,
    ) -> Self {
        pb.push_scope(name);
        let block = Self {
            norm1: Norm::group(pb, "norm1", cin, groups_for(cin, max_groups)),
            conv1: Conv::new(pb, "conv1", cin, cout, 3, 1, 1.0),
            emb: Linear::new(pb, "emb", emb_dim, cout, true, 1.0),
            norm2: Norm::group(pb, "norm2", cout, groups_for(cout, max_groups)),
            conv2: Conv::new(pb, "conv2", cout, cout, 3, 1, 0.2),
            skip: (cin != cout).then(|| Linear::new(pb, "skip", cin, cout, true, 1.0)),
        };
        pb.pop_scope();
        block
    }

    /// `x: [b * frames, h, w, cin]`, `emb: [b, emb_dim]` (already passed through SiLU).
    pub fn forward<T: Float>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        x: Var,
        emb: Var,
        frames: usize,
    ) -> Var {
        let h = self.norm1.forward(g, p, x);
        let h = g.silu(h);
        let h = self.conv1.forward(g, p, h);
        let e = self.emb.forward(g, p, emb);
        let h = g.add_group_bias(h, e, frames);
        let h = self.norm2.forward(g, p, h);
        let h = g.silu(h);
        let h = self.conv2.forward(g, p, h);
        let skip = match &self.skip {
            Some(s) => s.forward(g, p, x),
            None => x,
        };
        g.add(skip, h)
    }
}

/// Query/key/value/output projections shared by the attention sublayers.
#[derive(Clone, Debug)]
pub struct AttnProj {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    heads: usize,
}

impl AttnProj {
    pub fn new(pb: &mut ParamBuilder, dim: usize, kv_dim: usize, heads: usize) -> Self {
        Self {
            q: Linear::new(pb, "to_q", dim, dim, false, 1.0),
            k: Linear::new(pb, "to_k", kv_dim, dim, false, 1.0),
            v: Linear::new(pb, "to_v", kv_dim, dim, false, 1.0),
            out: Linear::new(pb, "to_out", dim, dim, true, 0.2),
            heads,
        }
    }

    /// `query: [batch, nq, dim]`, `context: [batch, nk, kv_dim]` -> `[batch, nq, dim]`.
    pub fn forward<T: Float>(&self, g: &mut Graph<T>, p: &Bound, query: Var, context: Var) -> Var {
        let q = self.q.forward(g, p, query);
        let k = self.k.forward(g, p, context);
        let v = self.v.forward(g, p, context);
        let o = g.attention(q, k, v, self.heads);
        self.out.forward(g, p, o)
    }
}

/// Learnable gate state of one gated cross-attention sublayer.
///
/// `weight: [d_model, 1]` and `bias: [1]` form the query-dependent gate; `alpha: [1]` is the
/// static gate, initialized to zero.
#[derive(Clone, Debug)]
pub struct GateState {
    pub weight: Pid,
    pub bias: Pid,
    pub alpha: Pid,
}

impl GateState {
    pub fn new(pb: &mut ParamBuilder, dim: usize) -> Self {
        pb.push_scope("gate");
        let s = Self {
            weight: pb.add(
                "w",
                &[dim, 1],
                Init::Fan {
                    fan_in: dim,
                    gain: 1.0,
                },
            ),
            bias: pb.add("b", &[1], Init::Zeros),
            alpha: pb.add("alpha", &[1], Init::Zeros),
        };
        pb.pop_scope();
        s
    }

    /// Clip-level gate `alpha * mean_t logistic(W . mean_tokens(Q_t) + b)`, shape `[b]`.
    ///
    /// `query: [b * frames, tokens, dim]`.
    pub fn gate<T: Float>(&self, g: &mut Graph<T>, p: &Bound, query: Var, frames: usize) -> Var {
        let n = g.shape(query)[0];
        let q_global = g.mean_axis(query, 1);
        let logits = g.linear(q_global, p.var(self.weight), Some(p.var(self.bias)));
        let dynamic = g.sigmoid(logits);
        let per_clip = g.reshape(dynamic, &[n / frames, frames]);
        let pooled = g.mean_axis(per_clip, 1);
        g.mul_scalar(pooled, p.var(self.alpha))
    }
}

/// Cross-attention from U-Net tokens to per-frame context tokens, optionally gated.
#[derive(Clone, Debug)]
pub struct CrossAttention {
    norm: Norm,
    proj: AttnProj,
    pub gate: Option<GateState>,
}

impl CrossAttention {
    pub fn new(
        pb: &mut ParamBuilder,
        dim: usize,
        context_dim: usize,
        heads: usize,
        gated: bool,
    ) -> Self {
        pb.push_scope("cross");
        let s = Self {
            norm: Norm::layer(pb, "norm", dim),
            proj: AttnProj::new(pb, dim, context_dim, heads),
            gate: gated.then(|| GateState::new(pb, dim)),
        };
        pb.pop_scope();
        s
    }

    /// Sublayer output (before the residual add) for `tokens: [b * frames, n, dim]`.
    pub fn forward<T: Float>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        tokens: Var,
        context: Var,
        frames: usize,
    ) -> Var {
        let q = self.norm.forward(g, p, tokens);
        match &self.gate {
            None => self.proj.forward(g, p, q, context),
            Some(gate) => gated_cross_attention(g, p, &self.proj, gate, q, context, frames),
        }
    }
}

/// Gated cross-attention: `O = alpha * G_dyn(Q) * CrossAttention(Q, C)`.
///
/// `query: [b * frames, nq, d_model]`, `context: [b * frames, n_ctx, context_dim]`. The
/// dynamic gate is computed per frame from the token mean of `query` and averaged over the
/// frames of each clip, so every clip gets one scalar gate.
pub fn gated_cross_attention<T: Float>(
    g: &mut Graph<T>,
    p: &Bound,
    proj: &AttnProj,
    gate: &GateState,
    query: Var,
    context: Var,
    frames: usize,
) -> Var {
    let attn = proj.forward(g, p, query, context);
    let gv = gate.gate(g, p, query, frames);
    let shape = g.shape(attn).to_vec();
    let clips = shape[0] / frames;
    let flat = g.reshape(attn, &[clips, shape[0] / clips * shape[1] * shape[2]]);
    let scaled = g.scale_rows(flat, gv);
    g.reshape(scaled, &shape)
}

/// Spatial self-attention, temporal attention and cross-attention, each residual.
#[derive(Clone, Debug)]
pub struct AttnBlock {
    spatial_norm: Norm,
    spatial: AttnProj,
    temporal: Option<(Norm, Pid, AttnProj)>,
    pub cross: CrossAttention,
}

/// Switches used by tests and by the gate-closure check.
#[derive(Clone, Copy, Debug, Default)]
pub struct ForwardOptions {
    /// Drop every cross-attention sublayer (its residual contributes nothing).
    pub skip_cross_attention: bool,
}

impl AttnBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        pb: &mut ParamBuilder,
        name: &str,
        dim: usize,
        context_dim: usize,
        heads: usize,
        frames: usize,
        temporal: bool,
        gated: bool,
    ) -> Self {
        pb.push_scope(name);
        let spatial_norm = Norm::layer(pb, "spatial_norm", dim);
        pb.push_scope("spatial");
        let spatial = AttnProj::new(pb, dim, dim, heads);
        pb.pop_scope();
        let temporal = temporal.then(|| {
            let norm = Norm::layer(pb, "temporal_norm", dim);
            let pos = pb.add(
                "temporal_pos",
                &[frames, dim],
                Init::Fan {
                    fan_in: dim,
                    gain: 1.0,
                },
            );
            pb.push_scope("temporal");
            let proj = AttnProj::new(pb, dim, dim, heads);
            pb.pop_scope();
            (norm, pos, proj)
        });
        let cross = CrossAttention::new(pb, dim, context_dim, heads, gated);
        pb.pop_scope();
        Self {
            spatial_norm,
            spatial,
            temporal,
            cross,
        }
    }

    /// `x: [b * frames, h, w, c]`; `context: [b * frames, n_ctx, context_dim]`.
    pub fn forward<T: Float>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        x: Var,
        context: Option<Var>,
        frames: usize,
        opts: &ForwardOptions,
    ) -> Var {
        let s = g.shape(x).to_vec();
        let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
        let tokens = g.reshape(x, &[n, h * w, c]);

        let normed = self.spatial_norm.forward(g, p, tokens);
        let sa = self.spatial.forward(g, p, normed, normed);
        let mut tokens = g.add(tokens, sa);

        if let Some((norm, pos, proj)) = &self.temporal {
            let b = n / frames;
            let grid = g.reshape(tokens, &[b, frames, h * w, c]);
            let seq = g.permute(grid, &[0, 2, 1, 3]);
            let seq = g.reshape(seq, &[b * h * w, frames, c]);
            let normed = norm.forward(g, p, seq);
            let flat = g.reshape(normed, &[b * h * w, frames * c]);
            let pos_flat = g.reshape(p.var(*pos), &[frames * c]);
            let flat = g.add_bias(flat, pos_flat);
            let normed = g.reshape(flat, &[b * h * w, frames, c]);
            let ta = proj.forward(g, p, normed, normed);
            let ta = g.reshape(ta, &[b, h * w, frames, c]);
            let ta = g.permute(ta, &[0, 2, 1, 3]);
            let ta = g.reshape(ta, &[n, h * w, c]);
            tokens = g.add(tokens, ta);
        }

        if let (Some(ctx), false) = (context, opts.skip_cross_attention) {
            let ca = self.cross.forward(g, p, tokens, ctx, frames);
            tokens = g.add(tokens, ca);
        }
        g.reshape(tokens, &[n, h, w, c])
    }
}
