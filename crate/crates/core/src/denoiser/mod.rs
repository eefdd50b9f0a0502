//! The video denoising network, its gated cross-attention and the frozen context encoder.

mod config;
mod encoder;
pub mod layers;
mod params;
mod unet;

pub use config::DenoiserConfig;
pub use encoder::{replicate_reference, ContextEncoder};
pub use layers::{gated_cross_attention, AttnProj, ForwardOptions, GateState};
pub use params::{Bound, Init, Param, ParamBuilder, ParamSpec, Params, Pid};
pub use unet::{noise_embedding, Denoiser};
