//! Context-aware detection: a feature-pyramid detector whose classifier is
//! conditioned on an auxiliary anatomy segmentation, trained from partially
//! annotated data with a per-sample masked joint loss.

pub mod ablation;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod detection;
mod error;
pub mod eval;
pub mod loss;
pub mod model;
pub mod sce;
pub mod train;

pub use config::{ModelConfig, RunMode};
pub use error::{Error, Result};
pub use model::{build_model, Model};

/// Switches the data-parallel kernels on or off for the whole process. Without
/// the `parallel` feature everything runs sequentially regardless.
pub fn set_parallelism(parallel: bool) {
    use ctxdet_tensor::exec::{set_mode, Parallelism};
    set_mode(if parallel { Parallelism::Parallel } else { Parallelism::Sequential });
}
