//! Small reverse-mode differentiation engine over dense `f64` tensors.
//!
//! The operator set is exactly what the supernet and its loss need:
//! convolutions (full, depthwise, 1×1), linear layers, batch norm, the
//! usual activations, pooling, channel gating, and the hard indicator with
//! a logistic surrogate gradient used by threshold-gated superkernels.
//! Every op checks its output for NaN/Inf and fails instead of propagating.

mod graph;
mod kernels;
mod optim;
mod params;
mod tensor;

use thiserror::Error;

pub use self::graph::{h_swish, sigmoid, sigmoid_prime, BatchStats, Gradients, Graph, Unary, Var};
pub use self::optim::{Sgd, StepStats};
pub use self::params::{BatchNormParams, ParamId, ParamStore, Parameter};
pub use self::tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("{op}: shape mismatch ({detail})")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}
