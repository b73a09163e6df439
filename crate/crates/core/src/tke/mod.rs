//! Prompt encoding, layer change tracking and sampling, adapter
//! aggregation and the two distillation losses.

mod aggregate;
mod distill;
mod features;
mod prompt;
mod selection;

pub use aggregate::{aggregate_lora, AggregationMode};
pub use distill::{forward_kl_loss, reverse_kl_loss};
pub use features::{point_features, pooled_features, PointView, POINT_FEATURES};
pub use prompt::{
    build_prompt, featurize_prompt, Information, Prompt, PromptData, Weather, WeatherCondition, PROMPT_FEATURES,
};
pub use selection::{
    change_rate, layers_to_train, ratios, sample_layers, select_layers, selection_probabilities, selection_probability,
    ChangeTracker, LayerStats, SelectionPlan, MAX_EXACT_LAYERS,
};

use thiserror::Error;

use crate::tasks::{OutputFormat, TaskKind};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TkeError {
    #[error("format {format:?} does not fit task {task:?}")]
    FormatTaskMismatch { task: TaskKind, format: OutputFormat },
    #[error("cannot select {nm} of {n} layers")]
    InvalidNm { nm: usize, n: usize },
    #[error("ratios must be finite and non-negative")]
    InvalidRatios,
    #[error("{0} layers exceed the exact-probability limit")]
    TooManyLayers(usize),
    #[error("unknown layer {0}")]
    UnknownLayer(usize),
    #[error("shape mismatch: {0} vs {1}")]
    ShapeMismatch(usize, usize),
    #[error("no updates for this layer")]
    NoUpdates,
    #[error("{updates} updates from {clients} clients")]
    TooManyUpdates { updates: usize, clients: usize },
    #[error("sample weight {0} must be positive")]
    InvalidWeight(f64),
}
