//! Dense `f64` tensors, a reverse-mode autodiff tape, Adam, and checkpoint IO.

mod checkpoint;
mod graph;
mod optim;
mod params;
mod tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint, Manifest, TensorEntry, CHECKPOINT_FORMAT};
pub use graph::{Gradients, Graph, Var, LAYER_NORM_EPS};
pub use optim::{Adam, AdamConfig, InverseSqrtSchedule};
pub use params::{ParamId, ParamStore, Parameter};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid shape {0:?}")]
    InvalidShape(Vec<usize>),
    #[error("shape {shape:?} does not hold {len} values")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("{op}: index {index} out of range for length {len}")]
    OutOfRange {
        op: &'static str,
        index: usize,
        len: usize,
    },
    #[error("mask entries must be 0 or 1, found {0}")]
    InvalidMask(f64),
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("parameter {0} has no gradient")]
    MissingGradient(String),
    #[error("duplicate parameter name {0}")]
    DuplicateParameter(String),
    #[error("optimizer state: {0}")]
    OptimizerState(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}
