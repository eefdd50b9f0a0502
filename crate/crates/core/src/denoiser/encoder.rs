//! The frozen per-frame context encoder and reference replication.

use relumix_autograd::{Float, Graph, Tensor};

use super::layers::{Conv, Linear};
use super::params::{ParamBuilder, Params, Pid};
use crate::error::{Error, Result};
use crate::video::{Frame, VideoClip};

/// Repeats `reference` along time: every slice of the result equals `reference`.
pub fn replicate_reference(reference: &Frame, frames: usize) -> VideoClip {
    let mut data = Vec::with_capacity(frames * reference.data.len());
    for _ in 0..frames {
        data.extend_from_slice(&reference.data);
    }
    VideoClip {
        frames,
        height: reference.height,
        width: reference.width,
        data,
    }
}

/// Three stride-2 convolution stages followed by a token projection.
///
/// All weights are declared frozen and are drawn from the encoder seed only.
#[derive(Clone, Debug)]
pub struct ContextEncoder {
    stages: Vec<Conv>,
    proj: Linear,
    pub context_dim: usize,
}

impl ContextEncoder {
    pub const IN_CHANNELS: usize = 6;

    pub fn new(pb: &mut ParamBuilder, widths: &[usize], context_dim: usize) -> Self {
        pb.set_frozen(true);
        pb.push_scope("encoder");
        let mut cin = Self::IN_CHANNELS;
        let stages = widths
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                let c = Conv::new(pb, &format!("stage{i}"), cin, w, 3, 2, 1.0);
                cin = w;
                c
            })
            .collect();
        let proj = Linear::new(pb, "proj", cin, context_dim, true, 1.0);
        pb.pop_scope();
        pb.set_frozen(false);
        Self {
            stages,
            proj,
            context_dim,
        }
    }

    /// Token count per frame for an `h x w` input.
    pub fn tokens_for(&self, h: usize, w: usize) -> usize {
        let (mut h, mut w) = (h, w);
        for _ in &self.stages {
            h = h.div_ceil(2);
            w = w.div_ceil(2);
        }
        h * w
    }

    fn pids(&self) -> Vec<Pid> {
        let mut v: Vec<Pid> = self
            .stages
            .iter()
            .flat_map(|c| [c.weight, c.bias])
            .collect();
        v.push(self.proj.weight);
        v.extend(self.proj.bias);
        v
    }

    /// Encodes `[first, second]` concatenated along channels.
    ///
    /// Both inputs are `[n, h, w, 3]` in the network's value range; the result is
    /// `[n, tokens, context_dim]`.
    pub fn encode<T: Float>(
        &self,
        params: &Params<T>,
        first: &Tensor<T>,
        second: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        if first.shape() != second.shape() || first.shape().len() != 4 || first.shape()[3] != 3 {
            return Err(Error::Shape(format!(
                "context encoder inputs {:?} and {:?} must both be [n, h, w, 3]",
                first.shape(),
                second.shape()
            )));
        }
        let mut g = Graph::inference();
        let a = g.constant(first.clone());
        let b = g.constant(second.clone());
        let mut h = g.concat_last(a, b);
        // Frozen weights enter as constants; the encoder never receives gradients.
        let pids = self.pids();
        let vars: Vec<_> = pids
            .iter()
            .map(|&p| g.constant(params.get(p).clone()))
            .collect();
        for (i, _) in self.stages.iter().enumerate() {
            h = g.conv2d(h, vars[2 * i], Some(vars[2 * i + 1]), 2, 1);
            if i + 1 < self.stages.len() {
                h = g.silu(h);
            }
        }
        let s = g.shape(h).to_vec();
        let tokens = g.reshape(h, &[s[0], s[1] * s[2], s[3]]);
        let k = 2 * self.stages.len();
        let out = g.linear(tokens, vars[k], Some(vars[k + 1]));
        Ok(g.value(out).clone())
    }
}
