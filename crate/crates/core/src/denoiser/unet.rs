//! The video U-Net.

use relumix_autograd::{Float, Graph, Tensor, Var};

use super::config::DenoiserConfig;
use super::encoder::ContextEncoder;
use super::layers::{groups_for, AttnBlock, Conv, ForwardOptions, Linear, Norm, ResBlock};
use super::params::{Bound, ParamBuilder, ParamSpec, Params};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
struct DownLevel {
    res: ResBlock,
    attn: Option<AttnBlock>,
    down: Option<Conv>,
}

#[derive(Clone, Debug)]
struct UpLevel {
    res: ResBlock,
    attn: Option<AttnBlock>,
    up: Option<Conv>,
}

/// Video denoising network: a U-Net whose attention blocks hold spatial, temporal and
/// (optionally gated) cross-attention sublayers.
#[derive(Clone, Debug)]
pub struct Denoiser {
    config: DenoiserConfig,
    specs: Vec<ParamSpec>,
    conv_in: Conv,
    time1: Linear,
    time2: Linear,
    down: Vec<DownLevel>,
    mid_res: ResBlock,
    mid_attn: Option<AttnBlock>,
    up: Vec<UpLevel>,
    out_norm: Norm,
    conv_out: Conv,
    encoder: ContextEncoder,
}

/// Sinusoidal features of `1000 * c_noise`, `[len(c_noise), dim]`.
pub fn noise_embedding(c_noise: &[f64], dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; c_noise.len() * dim];
    for (i, &c) in c_noise.iter().enumerate() {
        let t = 1000.0 * c;
        for j in 0..half {
            let freq = (-(10000f64.ln()) * j as f64 / half as f64).exp();
            out[i * dim + j] = (t * freq).sin();
            out[i * dim + half + j] = (t * freq).cos();
        }
    }
    out
}

impl Denoiser {
    pub fn new(config: DenoiserConfig) -> Result<Self> {
        config.validate("model.")?;
        let mut pb = ParamBuilder::new();
        let c0 = config.base_channels;
        let emb = config.emb_dim();
        let groups = config.norm_groups;
        let levels = config.levels();
        let attn_at = |l: usize| config.attention_levels.contains(&l);
        let make_attn = |pb: &mut ParamBuilder, name: &str, c: usize| {
            AttnBlock::new(
                pb,
                name,
                c,
                config.context_dim,
                config.heads,
                config.frames,
                config.temporal_attention,
                config.use_gc,
            )
        };

        let conv_in = Conv::new(&mut pb, "conv_in", config.in_channels, c0, 3, 1, 1.0);
        let time1 = Linear::new(&mut pb, "time.fc1", c0, emb, true, 1.0);
        let time2 = Linear::new(&mut pb, "time.fc2", emb, emb, true, 1.0);

        let mut down = Vec::with_capacity(levels);
        let mut cur = c0;
        for l in 0..levels {
            let c = config.level_channels(l);
            pb.push_scope(format!("down{l}"));
            let res = ResBlock::new(&mut pb, "res", cur, c, emb, groups);
            let attn = attn_at(l).then(|| make_attn(&mut pb, "attn", c));
            let dconv = (l + 1 < levels).then(|| Conv::new(&mut pb, "downsample", c, c, 3, 2, 1.0));
            pb.pop_scope();
            down.push(DownLevel {
                res,
                attn,
                down: dconv,
            });
            cur = c;
        }

        pb.push_scope("mid");
        let mid_res = ResBlock::new(&mut pb, "res", cur, cur, emb, groups);
        let mid_attn = attn_at(levels - 1).then(|| make_attn(&mut pb, "attn", cur));
        pb.pop_scope();

        let mut up = Vec::with_capacity(levels);
        for l in (0..levels).rev() {
            let c = config.level_channels(l);
            pb.push_scope(format!("up{l}"));
            let res = ResBlock::new(&mut pb, "res", cur + c, c, emb, groups);
            let attn = attn_at(l).then(|| make_attn(&mut pb, "attn", c));
            let uconv = (l > 0).then(|| {
                Conv::new(
                    &mut pb,
                    "upsample",
                    c,
                    config.level_channels(l - 1),
                    3,
                    1,
                    1.0,
                )
            });
            pb.pop_scope();
            cur = if l > 0 {
                config.level_channels(l - 1)
            } else {
                c
            };
            up.push(UpLevel {
                res,
                attn,
                up: uconv,
            });
        }

        let out_norm = Norm::group(&mut pb, "out_norm", cur, groups_for(cur, groups));
        let conv_out = Conv::new(&mut pb, "conv_out", cur, config.out_channels, 3, 1, 0.2);
        let encoder = ContextEncoder::new(&mut pb, &config.encoder_channels, config.context_dim);

        Ok(Self {
            specs: pb.finish(),
            config,
            conv_in,
            time1,
            time2,
            down,
            mid_res,
            mid_attn,
            up,
            out_norm,
            conv_out,
            encoder,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn encoder(&self) -> &ContextEncoder {
        &self.encoder
    }

    pub fn init_params<T: Float>(&self, seed: u64) -> Params<T> {
        Params::init(&self.specs, seed, self.config.encoder_seed)
    }

    /// Records the forward pass on `g`.
    ///
    /// `x: [b * frames, h, w, in_channels]`, one `c_noise` per clip, optional
    /// `context: [b * frames, tokens, context_dim]`. Returns `[b * frames, h, w, 3]`.
    pub fn forward<T: Float>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        x: Var,
        c_noise: &[f64],
        context: Option<Var>,
        opts: &ForwardOptions,
    ) -> Result<Var> {
        let cfg = &self.config;
        let shape = g.shape(x).to_vec();
        if shape.len() != 4 || shape[3] != cfg.in_channels {
            return Err(Error::Shape(format!(
                "denoiser input {shape:?} must be [n, h, w, {}]",
                cfg.in_channels
            )));
        }
        let frames = cfg.frames;
        let (n, h, w) = (shape[0], shape[1], shape[2]);
        if n % frames != 0 || n / frames != c_noise.len() {
            return Err(Error::Shape(format!(
                "{n} input frames do not split into {} clips of {frames}",
                c_noise.len()
            )));
        }
        let factor = 1usize << (cfg.levels() - 1);
        if h % factor != 0 || w % factor != 0 {
            return Err(Error::Shape(format!(
                "resolution {h}x{w} must be divisible by {factor}"
            )));
        }
        if let Some(ctx) = context {
            let cs = g.shape(ctx);
            if cs.len() != 3 || cs[0] != n || cs[2] != cfg.context_dim {
                return Err(Error::Shape(format!(
                    "context {cs:?} must be [{n}, tokens, {}]",
                    cfg.context_dim
                )));
            }
        }
        if !g.value(x).is_finite() {
            return Err(Error::Numerical("non-finite denoiser input".into()));
        }

        let emb = Tensor::from_vec(
            &[c_noise.len(), cfg.base_channels],
            noise_embedding(c_noise, cfg.base_channels)
                .into_iter()
                .map(T::lit)
                .collect(),
        );
        let emb = g.constant(emb);
        let emb = self.time1.forward(g, p, emb);
        let emb = g.silu(emb);
        let emb = self.time2.forward(g, p, emb);
        let emb = g.silu(emb);

        let mut hcur = self.conv_in.forward(g, p, x);
        let mut skips = Vec::with_capacity(self.down.len());
        for level in &self.down {
            hcur = level.res.forward(g, p, hcur, emb, frames);
            if let Some(a) = &level.attn {
                hcur = a.forward(g, p, hcur, context, frames, opts);
            }
            skips.push(hcur);
            if let Some(d) = &level.down {
                hcur = d.forward(g, p, hcur);
            }
        }

        hcur = self.mid_res.forward(g, p, hcur, emb, frames);
        if let Some(a) = &self.mid_attn {
            hcur = a.forward(g, p, hcur, context, frames, opts);
        }

        for level in &self.up {
            let skip = skips.pop().expect("one skip per level");
            hcur = g.concat_last(hcur, skip);
            hcur = level.res.forward(g, p, hcur, emb, frames);
            if let Some(a) = &level.attn {
                hcur = a.forward(g, p, hcur, context, frames, opts);
            }
            if let Some(u) = &level.up {
                hcur = g.upsample2x(hcur);
                hcur = u.forward(g, p, hcur);
            }
        }

        let hcur = self.out_norm.forward(g, p, hcur);
        let hcur = g.silu(hcur);
        Ok(self.conv_out.forward(g, p, hcur))
    }

    /// Runs the network without recording gradients.
    pub fn predict<T: Float>(
        &self,
        params: &Params<T>,
        x: Tensor<T>,
        c_noise: &[f64],
        context: Option<Tensor<T>>,
        opts: &ForwardOptions,
    ) -> Result<Tensor<T>> {
        let mut g = Graph::inference();
        let bound = params.bind(&mut g);
        let xv = g.constant(x);
        let ctx = context.map(|c| g.constant(c));
        let out = self.forward(&mut g, &bound, xv, c_noise, ctx, opts)?;
        let out = g.value(out).clone();
        if !out.is_finite() {
            return Err(Error::Numerical("non-finite denoiser output".into()));
        }
        Ok(out)
    }

    /// Every gate state in declaration order.
    pub fn gates(&self) -> Vec<&super::layers::GateState> {
        let mut out = Vec::new();
        let blocks = self
            .down
            .iter()
            .filter_map(|l| l.attn.as_ref())
            .chain(self.mid_attn.as_ref())
            .chain(self.up.iter().filter_map(|l| l.attn.as_ref()));
        for b in blocks {
            out.extend(b.cross.gate.as_ref());
        }
        out
    }
}
