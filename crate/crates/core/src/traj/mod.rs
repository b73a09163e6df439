//! Trajectory data model, geographic partitioning into per-client
//! sub-trajectories, synthetic generation, corruption and CSV I/O.

mod corrupt;
mod csv_io;
mod geo;
mod partition;
mod synth;

pub use corrupt::{corrupt, CorruptionKind, CorruptionSpec, GroundTruth};
pub use csv_io::{load_csv, read_csv, save_csv, write_csv};
pub use geo::{LocalProjection, EARTH_RADIUS_M};
pub(crate) use geo::{lerp_at, synchronized_distance};
pub use partition::{partition_trajectory, reassemble, RegionPartition};
pub use synth::{synth_generate, synth_generate_with_meta, SynthMeta, SynthTrajectory, SAMPLE_INTERVAL_S};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrajError {
    #[error("point {0} lies outside the partition bounding box")]
    PointOutsidePartition(usize),
    #[error("segment {0} is missing")]
    MissingSegment(usize),
    #[error("timestamps are not strictly increasing")]
    NonMonotonicTime,
    #[error("sub-trajectories belong to different parents")]
    MixedParents,
    #[error("trajectory is empty")]
    Empty,
    #[error("invalid coordinate: lon {lon}, lat {lat}")]
    InvalidCoordinate { lon: f64, lat: f64 },
    #[error("invalid partition: {0}")]
    InvalidPartition(String),
    #[error("invalid corruption spec: {0}")]
    InvalidCorruption(String),
    #[error("parse error on line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("trajectory {0} violates an invariant")]
    InvariantViolation(String),
    #[error("io: {0}")]
    Io(String),
}

/// Axis-aligned lon/lat box in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub lon_min: f64,
    pub lat_min: f64,
    pub lon_max: f64,
    pub lat_max: f64,
}

impl BBox {
    pub fn new(lon_min: f64, lat_min: f64, lon_max: f64, lat_max: f64) -> Self {
        Self { lon_min, lat_min, lon_max, lat_max }
    }

    pub fn contains(&self, lon: f64, lat: f64) -> bool {
        lon >= self.lon_min && lon <= self.lon_max && lat >= self.lat_min && lat <= self.lat_max
    }

    pub fn is_valid(&self) -> bool {
        self.lon_min < self.lon_max
            && self.lat_min < self.lat_max
            && (-180.0..=180.0).contains(&self.lon_min)
            && (-180.0..=180.0).contains(&self.lon_max)
            && (-90.0..=90.0).contains(&self.lat_min)
            && (-90.0..=90.0).contains(&self.lat_max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpatioTemporalPoint {
    pub lon: f64,
    pub lat: f64,
    /// Epoch seconds.
    pub t: i64,
}

impl SpatioTemporalPoint {
    pub fn new(lon: f64, lat: f64, t: i64) -> Self {
        Self { lon, lat, t }
    }

    pub fn is_valid(&self) -> bool {
        self.lon.is_finite()
            && self.lat.is_finite()
            && (-180.0..=180.0).contains(&self.lon)
            && (-90.0..=90.0).contains(&self.lat)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub traj_id: String,
    pub user_id: String,
    pub points: Vec<SpatioTemporalPoint>,
}

impl Trajectory {
    /// Builds a trajectory and checks its invariants.
    pub fn new(
        traj_id: impl Into<String>,
        user_id: impl Into<String>,
        points: Vec<SpatioTemporalPoint>,
    ) -> Result<Self, TrajError> {
        let t = Self { traj_id: traj_id.into(), user_id: user_id.into(), points };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<(), TrajError> {
        if self.points.is_empty() {
            return Err(TrajError::Empty);
        }
        if let Some(p) = self.points.iter().find(|p| !p.is_valid()) {
            return Err(TrajError::InvalidCoordinate { lon: p.lon, lat: p.lat });
        }
        if self.points.windows(2).any(|w| w[1].t <= w[0].t) {
            return Err(TrajError::NonMonotonicTime);
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn duration(&self) -> i64 {
        match (self.points.first(), self.points.last()) {
            (Some(a), Some(b)) => b.t - a.t,
            _ => 0,
        }
    }

    /// Equirectangular projection centred on this trajectory.
    pub fn projection(&self) -> LocalProjection {
        LocalProjection::for_points(&self.points)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubTrajectory {
    pub parent_id: String,
    pub user_id: String,
    pub client_id: usize,
    pub segment_index: usize,
    pub points: Vec<SpatioTemporalPoint>,
}
