//! Dense f64 tensors with a tape-based reverse-mode autodiff, a
//! finite-difference checker and optimizers.

mod dense;
mod gradcheck;
mod graph;
mod optim;
mod tensor;

pub use dense::{Dense, DenseNodes};
pub use gradcheck::{gradcheck, relative_error, GradcheckReport};
pub use graph::{kl_divergence, Gradients, Graph, NodeId};
pub use optim::{sgd_step, Adam, AdamConfig};
pub use tensor::Tensor;
pub(crate) use tensor::gemm;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    ShapeMismatch { op: &'static str, left: Vec<usize>, right: Vec<usize> },
    #[error("loss must be scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("{0} produced a non-finite value")]
    NonFinite(&'static str),
    #[error("axis {axis} invalid for rank {rank}")]
    InvalidAxis { axis: usize, rank: usize },
    #[error("data length {actual} does not match shape product {expected}")]
    DataLength { expected: usize, actual: usize },
    #[error("rank {0} tensors are not supported")]
    UnsupportedRank(usize),
    #[error("rows have different lengths")]
    RaggedRows,
    #[error("{0} of an empty tensor")]
    Empty(&'static str),
    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("distribution is not normalized (sum {0})")]
    NotNormalized(f64),
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
}
