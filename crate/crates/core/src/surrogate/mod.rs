//! Server and client surrogate models: dense GELU stacks with per-layer
//! low-rank adapters over a shared output vocabulary, split into a
//! foundation and an adapter that the server dispatches to clients.

mod checkpoint;
mod model;
mod vocab;

pub use checkpoint::{flatten, load_checkpoint, manifest, save_checkpoint};
pub use model::{
    build_llm, build_slm, dispatch_adapter, return_adapter, AdapterBundle, ForwardTape, LayerNodes, LayerState,
    LayerTrain, ModelConfig, ModelGrads, ModelOptimizer, SurrogateModel,
};
pub use vocab::{ClassLabel, Token, Vocab};

use thiserror::Error;

use crate::autodiff::TensorError;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SurrogateError {
    #[error("configuration mismatch: {0}")]
    ConfigMismatch(String),
    #[error("input has {got} features, model expects {expected}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("adapter bundle version {got} is stale (current {expected})")]
    StaleVersion { expected: u64, got: u64 },
    #[error("unknown layer {0}")]
    UnknownLayer(usize),
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("io: {0}")]
    Io(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}
