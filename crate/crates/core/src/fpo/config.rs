use serde::{Deserialize, Serialize};

use super::FpoError;
use crate::tasks::TaskKind;
use crate::tke::AggregationMode;
use crate::traj::{BBox, CorruptionKind};

/// Everything a training run depends on. Unknown keys are rejected when
/// deserializing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub clients: usize,
    pub rounds: usize,
    pub freeze_period: usize,
    /// Fraction of layers trained per round.
    pub m: f64,
    /// Tasks trained and evaluated (seen).
    pub tasks: Vec<TaskKind>,
    /// Extra tasks evaluated without training (unseen).
    pub unseen_tasks: Vec<TaskKind>,
    pub data: DataSpec,
    pub model: ModelSpec,
    pub train: TrainSpec,
    pub thresholds: Thresholds,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorruptionStep {
    pub kind: CorruptionKind,
    pub rate: f64,
    pub magnitude: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSpec {
    pub bbox: BBox,
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub users: usize,
    pub trajectories: usize,
    pub points_per_traj: usize,
    pub test_fraction: f64,
    /// Applied in order to every trajectory.
    pub corruptions: Vec<CorruptionStep>,
    /// Share of trajectories that also receive a detour.
    pub anomaly_fraction: f64,
    pub anomaly_magnitude: f64,
    pub road_lines: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSpec {
    pub width: usize,
    pub lora_rank: usize,
    pub adapter_depth: usize,
    pub llm_layers: usize,
    pub slm_layers: usize,
    /// Train client foundation weights fully (LoRA selection still applies).
    pub train_foundation: bool,
    pub aggregation: AggregationMode,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSpec {
    pub local_steps: usize,
    /// Items per task per step.
    pub batch_size: usize,
    pub lr: f64,
    /// Fraction of each learning rate left at the last round.
    pub lr_floor: f64,
    pub server_lr: f64,
    pub tpa_lr: f64,
    pub tpa_steps: usize,
    pub tpa_batch: usize,
    /// Points on either side that form a point's context.
    pub context_radius: usize,
    /// Share of each client minibatch drawn from items labelled with the
    /// task's positive token (0 samples uniformly).
    pub positive_fraction: f64,
    /// Reconstruction, reverse KL, task.
    pub client_weights: [f64; 3],
    /// Forward KL, task.
    pub server_weights: [f64; 2],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Thresholds {
    /// m/s
    pub noise_speed: f64,
    /// m
    pub stay_distance: f64,
    /// s
    pub stay_time: f64,
    /// m
    pub simplify_epsilon: f64,
    /// m
    pub anomaly_detour: f64,
    /// s
    pub sampling_interval: i64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            clients: 4,
            rounds: 50,
            freeze_period: 2,
            m: 0.25,
            tasks: vec![TaskKind::NF, TaskKind::SPD, TaskKind::TSim],
            unseen_tasks: Vec::new(),
            data: DataSpec::default(),
            model: ModelSpec::default(),
            train: TrainSpec::default(),
            thresholds: Thresholds::default(),
        }
    }
}

impl Default for DataSpec {
    fn default() -> Self {
        Self {
            bbox: BBox::new(116.20, 39.80, 116.40, 39.95),
            grid_rows: 2,
            grid_cols: 2,
            users: 8,
            trajectories: 48,
            points_per_traj: 100,
            test_fraction: 0.25,
            corruptions: vec![
                CorruptionStep { kind: CorruptionKind::StayInject, rate: 0.25, magnitude: 8.0 },
                CorruptionStep { kind: CorruptionKind::Noise, rate: 0.05, magnitude: 800.0 },
            ],
            anomaly_fraction: 0.0,
            anomaly_magnitude: 600.0,
            road_lines: 6,
        }
    }
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            width: 64,
            lora_rank: 4,
            adapter_depth: 2,
            llm_layers: 8,
            slm_layers: 4,
            train_foundation: true,
            aggregation: AggregationMode::Blend,
        }
    }
}

impl Default for TrainSpec {
    fn default() -> Self {
        Self {
            local_steps: 4,
            batch_size: 96,
            lr: 2e-2,
            lr_floor: 0.1,
            server_lr: 3e-3,
            tpa_lr: 1e-3,
            tpa_steps: 10,
            tpa_batch: 128,
            context_radius: 2,
            positive_fraction: 0.4,
            client_weights: [1.0, 1.0, 1.0],
            server_weights: [1.0, 1.0],
        }
    }
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            noise_speed: 50.0,
            stay_distance: 100.0,
            stay_time: 180.0,
            simplify_epsilon: 30.0,
            anomaly_detour: 300.0,
            sampling_interval: 10,
        }
    }
}

fn positive(name: &str, v: f64) -> Result<(), FpoError> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(FpoError::InvalidConfig(format!("{name} must be positive, got {v}")))
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), FpoError> {
        let bad = |m: String| Err(FpoError::InvalidConfig(m));
        if !(self.m > 0.0 && self.m <= 1.0) {
            return bad(format!("m must be in (0, 1], got {}", self.m));
        }
        if self.clients == 0 {
            return bad("clients must be at least 1".into());
        }
        let d = &self.data;
        if d.grid_rows * d.grid_cols != self.clients {
            return bad(format!(
                "grid {}x{} does not give {} clients",
                d.grid_rows, d.grid_cols, self.clients
            ));
        }
        if self.clients > u16::MAX as usize {
            return bad("too many clients".into());
        }
        if self.rounds == 0 {
            return bad("rounds must be at least 1".into());
        }
        if self.freeze_period == 0 {
            return bad("freeze_period must be at least 1".into());
        }
        if self.tasks.is_empty() {
            return bad("at least one task is required".into());
        }
        let mut all = self.tasks.clone();
        all.extend(&self.unseen_tasks);
        all.sort();
        if all.windows(2).any(|w| w[0] == w[1]) {
            return bad("a task is listed twice".into());
        }
        if !d.bbox.is_valid() {
            return bad("invalid bbox".into());
        }
        if d.users == 0 || d.trajectories < 2 || d.points_per_traj < 3 {
            return bad("need users >= 1, trajectories >= 2 and points_per_traj >= 3".into());
        }
        if !(d.test_fraction > 0.0 && d.test_fraction < 1.0) {
            return bad(format!("test_fraction must be in (0, 1), got {}", d.test_fraction));
        }
        if !(0.0..=1.0).contains(&d.anomaly_fraction) {
            return bad("anomaly_fraction must be in [0, 1]".into());
        }
        if d.road_lines < 2 {
            return bad("road_lines must be at least 2".into());
        }
        for c in &d.corruptions {
            if !(0.0..=1.0).contains(&c.rate) || !(c.magnitude >= 0.0 && c.magnitude.is_finite()) {
                return bad(format!("bad corruption step {c:?}"));
            }
        }
        let md = &self.model;
        if md.width == 0 || md.lora_rank == 0 || md.adapter_depth == 0 {
            return bad("width, lora_rank and adapter_depth must be positive".into());
        }
        if md.slm_layers <= md.adapter_depth || md.llm_layers <= md.adapter_depth {
            return bad("both models need a foundation below the adapter".into());
        }
        let t = &self.train;
        if t.batch_size == 0 || t.tpa_batch == 0 {
            return bad("batch sizes must be positive".into());
        }
        positive("lr", t.lr)?;
        if !(0.0..=1.0).contains(&t.lr_floor) {
            return bad(format!("lr_floor must be in [0, 1], got {}", t.lr_floor));
        }
        positive("server_lr", t.server_lr)?;
        positive("tpa_lr", t.tpa_lr)?;
        if t.client_weights.iter().chain(&t.server_weights).any(|w| !(*w >= 0.0 && w.is_finite())) {
            return bad("objective weights must be non-negative".into());
        }
        if !(0.0..1.0).contains(&t.positive_fraction) {
            return bad(format!("positive_fraction must be in [0, 1), got {}", t.positive_fraction));
        }
        let th = &self.thresholds;
        positive("noise_speed", th.noise_speed)?;
        positive("stay_distance", th.stay_distance)?;
        positive("stay_time", th.stay_time)?;
        positive("simplify_epsilon", th.simplify_epsilon)?;
        positive("anomaly_detour", th.anomaly_detour)?;
        if th.sampling_interval <= 0 {
            return bad("sampling_interval must be positive".into());
        }
        Ok(())
    }

    /// Trained tasks followed by unseen ones.
    pub fn all_tasks(&self) -> Vec<TaskKind> {
        let mut v = self.tasks.clone();
        v.extend(&self.unseen_tasks);
        v
    }
}
