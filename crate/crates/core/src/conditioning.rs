//! Network inputs and cross-attention context for each variant.
//!
//! Every variant sees the noisy clip (scaled by `c_in`) and the bootstrapped input `V'_input`
//! as channels. Embedding-fusion variants also see the replicated reference `R~` as channels
//! and take their context from `E([R~, c_in * x_noisy])`; the others take it from
//! `E([V'_input, V'_input])`. The unconditional branch zeroes every condition channel and the
//! context.

use relumix_autograd::Tensor;

use crate::denoiser::{replicate_reference, Denoiser, Params};
use crate::error::{Error, Result};
use crate::video::{normalize, Frame, VideoClip};

/// Condition clips in network range.
#[derive(Clone, Debug, PartialEq)]
pub struct Condition {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    /// `V'_input`, normalized.
    pub input: Vec<f32>,
    /// `R~`, normalized.
    pub reference: Vec<f32>,
}

impl Condition {
    pub fn new(v_input: &VideoClip, reference: &Frame) -> Result<Self> {
        if !v_input.spatial_matches(reference) {
            return Err(Error::Shape(format!(
                "reference {}x{} does not match clip {}x{}",
                reference.height, reference.width, v_input.height, v_input.width
            )));
        }
        let rep = replicate_reference(reference, v_input.frames);
        Ok(Self {
            frames: v_input.frames,
            height: v_input.height,
            width: v_input.width,
            input: v_input.data.iter().map(|&v| normalize(v)).collect(),
            reference: rep.data.iter().map(|&v| normalize(v)).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.input.len()
    }

    pub fn is_empty(&self) -> bool {
        self.input.is_empty()
    }
}

/// Channel-interleaved network input `[frames * h * w, in_channels]` for one clip.
///
/// `scaled_noisy` is `c_in * x_noisy` in network range; `cond = None` builds the
/// unconditional input.
pub fn assemble_input(use_ef: bool, scaled_noisy: &[f32], cond: Option<&Condition>) -> Vec<f32> {
    let channels = if use_ef { 9 } else { 6 };
    let pixels = scaled_noisy.len() / 3;
    let mut out = vec![0.0f32; pixels * channels];
    for p in 0..pixels {
        let o = p * channels;
        out[o..o + 3].copy_from_slice(&scaled_noisy[p * 3..p * 3 + 3]);
        if let Some(c) = cond {
            out[o + 3..o + 6].copy_from_slice(&c.input[p * 3..p * 3 + 3]);
            if use_ef {
                out[o + 6..o + 9].copy_from_slice(&c.reference[p * 3..p * 3 + 3]);
            }
        }
    }
    out
}

fn frames_tensor(data: &[f32], frames: usize, h: usize, w: usize) -> Tensor<f32> {
    Tensor::from_vec(&[frames, h, w, 3], data.to_vec())
}

/// Context tokens `[frames, tokens, context_dim]` for one clip.
pub fn context(
    model: &Denoiser,
    params: &Params<f32>,
    scaled_noisy: &[f32],
    cond: Option<&Condition>,
    frames: usize,
    height: usize,
    width: usize,
) -> Result<Tensor<f32>> {
    let enc = model.encoder();
    match cond {
        None => Ok(Tensor::zeros(&[
            frames,
            enc.tokens_for(height, width),
            enc.context_dim,
        ])),
        Some(c) if model.config().use_ef => {
            let r = frames_tensor(&c.reference, frames, height, width);
            let x = frames_tensor(scaled_noisy, frames, height, width);
            enc.encode(params, &r, &x)
        }
        Some(c) => {
            let v = frames_tensor(&c.input, frames, height, width);
            enc.encode(params, &v, &v)
        }
    }
}

/// Whether the context depends on the noisy state (and must be recomputed every step).
pub fn context_depends_on_noise(model: &Denoiser) -> bool {
    model.config().use_ef
}
