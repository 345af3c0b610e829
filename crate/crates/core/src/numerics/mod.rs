//! Numerical substrate: tensors, reverse-mode differentiation, SGD, gradient
//! checking and the checkpoint container.

mod checkpoint;
mod gradcheck;
mod graph;
mod optim;
mod tensor;

use thiserror::Error;

pub use checkpoint::{Checkpoint, CheckpointError, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use gradcheck::{gradient_check, GradCheckReport};
pub use graph::{log_sum_exp, softmax, with_tanh_derivative_scale, Gradients, Graph, Var};
pub use optim::{Sgd, SgdConfig};
pub use tensor::Tensor;

#[derive(Clone, Debug, Error, PartialEq)]
pub enum NumericsError {
    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: expected a rank-2 tensor, got shape {shape:?}")]
    Rank { op: &'static str, shape: Vec<usize> },
    #[error("{op}: index out of range for shape {shape:?}")]
    Index { op: &'static str, shape: Vec<usize> },
    #[error("{op}: empty input")]
    Empty { op: &'static str },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("expected a one-element tensor, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("output does not depend on any trainable leaf")]
    Detached,
    #[error("variable does not belong to this graph")]
    UnknownVar,
    #[error("non-finite loss while probing parameter {param}, entry {entry}")]
    ProbeNonFinite { param: usize, entry: usize },
    #[error("{0}")]
    InvalidArgument(String),
}
