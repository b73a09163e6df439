//! The simulated federation: one server actor and one actor per client
//! exchanging frames over in-process channels, the alternating
//! fresh/frozen round loop, the parallel client and server objectives and
//! communication accounting.

mod actors;
mod config;
mod data;
mod eval;
mod items;
mod ledger;
mod report;
mod run;
mod schedule;

pub use config::{CorruptionStep, DataSpec, ModelSpec, RunConfig, Thresholds, TrainSpec};
pub use data::{build_dataset, derive_seed, Dataset, Sample};
pub use eval::{evaluate_predictions, tsim_sed, ItemPrediction};
pub use items::{
    build_split, candidate_tokens, positive_token, ClientView, FederatedSplit, GapSite, Item, ItemKey, ItemSite,
    LocalSegment, SLM_INPUT_DIM,
};
pub use ledger::{Category, CommEntry, CommLedger, Direction, RoundComm};
pub use report::{ClientLosses, ClientRoundReport, DataSummary, ReportHeader, RoundReport, RunReport, ServerLosses, ServerRoundReport, TaskMetric};
pub use run::{evaluate_models, init_models, run_on_dataset, run_training, Models, RunOutput, LLM_INPUT_DIM, SERVER_BLOCK};
pub use schedule::{context_window, is_frozen, multi_task_loss, multi_task_loss_value, route_task, FreezeSchedule, Route};

use thiserror::Error;

use crate::autodiff::TensorError;
use crate::secure_agg::SecureAggError;
use crate::surrogate::SurrogateError;
use crate::tasks::TaskError;
use crate::tke::TkeError;
use crate::tpa::TpaError;
use crate::traj::TrajError;

#[derive(Debug, Error)]
pub enum FpoError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("channel closed: {0}")]
    ChannelClosed(String),
    #[error("round {round}: no batch from client {client}")]
    MissingBatch { round: u32, client: usize },
    #[error("malformed message: {0}")]
    Protocol(String),
    #[error("actor failures: {}", .0.join("; "))]
    ActorFailed(Vec<String>),
    #[error("io: {0}")]
    Io(String),
    #[error(transparent)]
    Traj(#[from] TrajError),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error(transparent)]
    Tpa(#[from] TpaError),
    #[error(transparent)]
    Surrogate(#[from] SurrogateError),
    #[error(transparent)]
    Tke(#[from] TkeError),
    #[error(transparent)]
    SecureAgg(#[from] SecureAggError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}
