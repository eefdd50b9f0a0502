//! Reference-guided video relighting at desk scale.
//!
//! A relit reference frame replaces the first frame of a video and a small video diffusion
//! model propagates its illumination to the remaining frames. The crate covers the whole
//! pipeline: a record-and-replay synthetic dataset ([`scenegen`]), the denoiser with gated
//! cross-attention ([`denoiser`]), diffusion math and sampling ([`edm`]), training
//! ([`trainer`]), inference ([`propagator`]), metrics ([`metrics`]) and ablations
//! ([`experiments`]).

pub mod conditioning;
pub mod config;
pub mod denoiser;
pub mod edm;
pub mod error;
pub mod experiments;
pub mod io;
pub mod metrics;
pub mod propagator;
pub mod scenegen;
pub mod trainer;
pub mod variant;
pub mod video;

pub use error::{Error, Result};
pub use variant::Variant;
pub use video::{Frame, VideoClip};
