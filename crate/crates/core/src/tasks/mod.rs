//! The ten trajectory data preparation tasks: definitions, classical oracle
//! algorithms that produce reference labels, and evaluation metrics.

mod metrics;
mod oracles;
mod road;

pub use metrics::{f1_score, sed, F1Average, MetricReport};
pub use oracles::{
    detect_gaps, label_tmi, label_tul, oracle_anomaly, oracle_impute, oracle_map_match,
    oracle_noise_filter, oracle_recover, oracle_segment, oracle_simplify, oracle_stay_points,
    simplify_mask, stay_runs, travel_mode_for_speed, AnnotatedTrajectory, NoiseFilterResult,
    StayRun, TravelMode,
};
pub use road::{RoadNetwork, RoadSegment};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::traj::{SpatioTemporalPoint, TrajError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TaskError {
    #[error("road network is empty")]
    EmptyNetwork,
    #[error("missing timestamp {0} is not bracketed by observed points")]
    UnbracketedGap(i64),
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("empty input")]
    Empty,
    #[error("simplified trajectory is not a subsequence of the original sharing its endpoints")]
    NotSubsequence,
    #[error("invalid threshold: {0}")]
    InvalidThreshold(String),
    #[error("unknown task name {0:?}")]
    UnknownTask(String),
    #[error(transparent)]
    Traj(#[from] TrajError),
}

/// T-1 … T-10.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TaskKind {
    AD,
    TI,
    NF,
    SPD,
    MM,
    TUL,
    TMI,
    TSim,
    TSeg,
    TR,
}

/// Expected output shape of a task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum OutputFormat {
    Classification,
    Points,
    Trajectory,
}

impl OutputFormat {
    pub const ALL: [OutputFormat; 3] =
        [OutputFormat::Classification, OutputFormat::Points, OutputFormat::Trajectory];

    pub fn index(self) -> usize {
        match self {
            OutputFormat::Classification => 0,
            OutputFormat::Points => 1,
            OutputFormat::Trajectory => 2,
        }
    }
}

impl TaskKind {
    pub const ALL: [TaskKind; 10] = [
        TaskKind::AD,
        TaskKind::TI,
        TaskKind::NF,
        TaskKind::SPD,
        TaskKind::MM,
        TaskKind::TUL,
        TaskKind::TMI,
        TaskKind::TSim,
        TaskKind::TSeg,
        TaskKind::TR,
    ];

    /// Zero-based position in T-1 … T-10.
    pub fn index(self) -> usize {
        Self::ALL.iter().position(|k| *k == self).expect("listed")
    }

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::AD => "AD",
            TaskKind::TI => "TI",
            TaskKind::NF => "NF",
            TaskKind::SPD => "SPD",
            TaskKind::MM => "MM",
            TaskKind::TUL => "TUL",
            TaskKind::TMI => "TMI",
            TaskKind::TSim => "TSim",
            TaskKind::TSeg => "TSeg",
            TaskKind::TR => "TR",
        }
    }

    pub fn parse(s: &str) -> Result<Self, TaskError> {
        Self::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| TaskError::UnknownTask(s.to_string()))
    }

    pub fn description(self) -> &'static str {
        match self {
            TaskKind::AD => "Anomaly detection: decide whether the trajectory departs from the user's usual route.",
            TaskKind::TI => "Trajectory imputation: estimate the points missing between observations.",
            TaskKind::NF => "Noise filtering: remove points whose motion is physically implausible.",
            TaskKind::SPD => "Stay point detection: find places where the object lingered.",
            TaskKind::MM => "Map matching: assign each point to a road segment.",
            TaskKind::TUL => "Trajectory-user linking: identify which user produced the trajectory.",
            TaskKind::TMI => "Travel mode identification: walk, bike, bus or car.",
            TaskKind::TSim => "Trajectory simplification: keep few points while preserving shape.",
            TaskKind::TSeg => "Trajectory segmentation: split the trajectory into trips.",
            TaskKind::TR => "Trajectory recovery: rebuild the full-rate trajectory from sparse points.",
        }
    }

    pub fn format(self) -> OutputFormat {
        match self {
            TaskKind::AD | TaskKind::TUL | TaskKind::TMI => OutputFormat::Classification,
            TaskKind::SPD => OutputFormat::Points,
            _ => OutputFormat::Trajectory,
        }
    }
}

impl std::fmt::Display for TaskKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TaskOutput {
    Classification(usize),
    Points(Vec<SpatioTemporalPoint>),
    TrajectoryOut(AnnotatedTrajectory),
}

impl TaskOutput {
    pub fn format(&self) -> OutputFormat {
        match self {
            TaskOutput::Classification(_) => OutputFormat::Classification,
            TaskOutput::Points(_) => OutputFormat::Points,
            TaskOutput::TrajectoryOut(_) => OutputFormat::Trajectory,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ten_tasks_with_consistent_formats() {
        assert_eq!(TaskKind::ALL.len(), 10);
        for (i, k) in TaskKind::ALL.iter().enumerate() {
            assert_eq!(k.index(), i);
            assert_eq!(TaskKind::parse(k.name()).unwrap(), *k);
        }
        assert_eq!(TaskKind::SPD.format(), OutputFormat::Points);
        assert_eq!(TaskKind::TMI.format(), OutputFormat::Classification);
        assert_eq!(TaskKind::TSeg.format(), OutputFormat::Trajectory);
        assert!(TaskKind::parse("XX").is_err());
    }
}
