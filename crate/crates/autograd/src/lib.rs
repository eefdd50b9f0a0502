//! A compact reverse-mode automatic differentiation tape.
//!
//! Values are dense row-major [`Tensor`]s; image batches use the NHWC layout so that
//! convolutions, linear layers and attention all reduce to GEMMs over rows of channels.
//! Everything is generic over [`Float`] so that the same model code runs in `f32` for
//! training and in `f64` for finite-difference gradient checks.

mod graph;
pub mod kernels;
mod scalar;
mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use scalar::{gemm, Float, MatRef};
pub use tensor::Tensor;
