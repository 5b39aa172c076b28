//! Minimal tensor and reverse-mode autodiff engine for small convolutional
//! networks on the CPU.
//!
//! Scope is deliberately narrow: NCHW tensors, the handful of layers a
//! feature-pyramid detector needs (convolution, batch norm, SiLU, resampling,
//! concatenation) and an escape hatch ([`Graph::custom_scalar`]) for losses whose
//! gradients are computed in closed form by the caller.

pub mod exec;
pub mod graph;
pub mod kernels;
pub mod nn;
pub mod optim;
pub mod params;
mod scalar;
mod tensor;

pub use graph::{sigmoid, Gradients, Graph, Var};
pub use params::{BnUpdate, ParamEntry, ParamId, ParamKind, ParamStore};
pub use scalar::{matmul, Scalar};
pub use tensor::Tensor;
