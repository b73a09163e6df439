use serde::{Deserialize, Serialize};

use super::ledger::{CommEntry, RoundComm};
use super::RunConfig;
use crate::tasks::MetricReport;
use crate::tke::{LayerStats, SelectionPlan};

/// The only field that may differ between identical runs.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportHeader {
    pub generated_at: Option<String>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ClientLosses {
    pub reconstruction: f64,
    pub reverse_kl: f64,
    pub task: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ServerLosses {
    pub forward_kl: f64,
    pub task: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientRoundReport {
    pub client: usize,
    pub round: u32,
    pub losses: ClientLosses,
    pub selection: SelectionPlan,
    pub layer_stats: Vec<LayerStats>,
    pub uploaded_points: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServerRoundReport {
    pub round: u32,
    pub frozen: bool,
    pub losses: ServerLosses,
    pub selection: SelectionPlan,
    pub layer_stats: Vec<LayerStats>,
    /// Size and SHA-256 of the embedding union trained on this round.
    pub union_points: usize,
    pub union_digest: String,
    pub items: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: u32,
    pub frozen: bool,
    pub server: ServerRoundReport,
    pub clients: Vec<ClientRoundReport>,
    pub comm: RoundComm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskMetric {
    /// Trained on (seen) or evaluated zero-shot.
    pub seen: bool,
    #[serde(flatten)]
    pub report: MetricReport,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DataSummary {
    pub train_trajectories: usize,
    pub test_trajectories: usize,
    pub train_items: usize,
    pub cross_train_items: usize,
    pub test_items: usize,
    pub tpa_parameters: usize,
    pub slm_lora_parameters: usize,
    pub llm_lora_parameters: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub header: ReportHeader,
    pub config: RunConfig,
    pub data: DataSummary,
    pub rounds: Vec<RoundReport>,
    /// Post-training context exchange for the held-out split.
    pub eval_comm: Option<RoundComm>,
    pub metrics: Vec<TaskMetric>,
    /// Training-round totals per direction and category.
    pub comm_totals: Vec<CommEntry>,
}

impl RunReport {
    pub fn metric(&self, task: crate::tasks::TaskKind) -> Option<&MetricReport> {
        self.metrics.iter().map(|m| &m.report).find(|m| m.task == task)
    }
}
