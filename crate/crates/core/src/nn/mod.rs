//! Reverse-mode automatic differentiation, fully connected networks and Adam.

mod adam;
mod graph;
mod mlp;

use alloc::string::String;
use alloc::vec::Vec;

pub use adam::{AdamConfig, AdamState};
pub use graph::{log_sum_exp, Activation, Gradients, Graph, NodeId};
pub use mlp::{widths, BoundParams, Layer, Mlp, MlpTrace, Parameters};

#[derive(Clone, Debug, PartialEq, thiserror::Error)]
pub enum NnError {
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("dimension mismatch at layer {layer}: expected width {expected}, got {got}")]
    Dimension { layer: usize, expected: usize, got: usize },
    #[error("backward needs a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("activation `{0}` is not supported for differentiable input gradients")]
    UnsupportedActivation(&'static str),
    #[error("non-finite gradient for parameter {index}")]
    NonFiniteGradient { index: usize },
    #[error("gradient/parameter mismatch: expected {expected}, got {got}")]
    GradientMismatch { expected: usize, got: usize },
}

impl NnError {
    pub(crate) fn shape(op: &'static str, detail: String) -> Self {
        NnError::Shape { op, detail }
    }
}
