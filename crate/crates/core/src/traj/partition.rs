use serde::{Deserialize, Serialize};

use super::{BBox, SpatioTemporalPoint, SubTrajectory, TrajError, Trajectory};

/// Rectangular lon/lat grid over a bounding box with an explicit cell→client
/// map. Cells are indexed row-major from the south-west corner. A point lying
/// exactly on a cell edge belongs to the cell with the larger index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionPartition {
    pub bbox: BBox,
    pub rows: usize,
    pub cols: usize,
    pub cell_to_client: Vec<usize>,
}

impl RegionPartition {
    pub fn new(
        bbox: BBox,
        rows: usize,
        cols: usize,
        cell_to_client: Vec<usize>,
    ) -> Result<Self, TrajError> {
        if !bbox.is_valid() {
            return Err(TrajError::InvalidPartition("degenerate bounding box".into()));
        }
        if rows == 0 || cols == 0 {
            return Err(TrajError::InvalidPartition("grid must have at least one cell".into()));
        }
        if cell_to_client.len() != rows * cols {
            return Err(TrajError::InvalidPartition(format!(
                "{} cells but {} client assignments",
                rows * cols,
                cell_to_client.len()
            )));
        }
        Ok(Self { bbox, rows, cols, cell_to_client })
    }

    /// One client per cell, client index = cell index.
    pub fn grid(bbox: BBox, rows: usize, cols: usize) -> Result<Self, TrajError> {
        Self::new(bbox, rows, cols, (0..rows * cols).collect())
    }

    pub fn num_clients(&self) -> usize {
        self.cell_to_client.iter().max().map_or(0, |m| m + 1)
    }

    pub fn cell_of(&self, lon: f64, lat: f64) -> Option<usize> {
        if !self.bbox.contains(lon, lat) {
            return None;
        }
        let b = &self.bbox;
        let col = ((lon - b.lon_min) * self.cols as f64 / (b.lon_max - b.lon_min)).floor() as usize;
        let row = ((lat - b.lat_min) * self.rows as f64 / (b.lat_max - b.lat_min)).floor() as usize;
        Some(row.min(self.rows - 1) * self.cols + col.min(self.cols - 1))
    }

    pub fn client_of(&self, p: &SpatioTemporalPoint) -> Option<usize> {
        self.cell_of(p.lon, p.lat).map(|c| self.cell_to_client[c])
    }
}

/// Splits a trajectory into maximal runs of consecutive points owned by the
/// same client.
pub fn partition_trajectory(
    traj: &Trajectory,
    part: &RegionPartition,
) -> Result<Vec<SubTrajectory>, TrajError> {
    let mut out: Vec<SubTrajectory> = Vec::new();
    for (i, p) in traj.points.iter().enumerate() {
        let client = part.client_of(p).ok_or(TrajError::PointOutsidePartition(i))?;
        match out.last_mut() {
            Some(seg) if seg.client_id == client => seg.points.push(*p),
            _ => {
                let segment_index = out.len();
                out.push(SubTrajectory {
                    parent_id: traj.traj_id.clone(),
                    user_id: traj.user_id.clone(),
                    client_id: client,
                    segment_index,
                    points: vec![*p],
                });
            }
        }
    }
    Ok(out)
}

/// Inverse of [`partition_trajectory`]. Input order does not matter.
pub fn reassemble(subs: &[SubTrajectory]) -> Result<Trajectory, TrajError> {
    let first = subs.first().ok_or(TrajError::Empty)?;
    if subs.iter().any(|s| s.parent_id != first.parent_id) {
        return Err(TrajError::MixedParents);
    }
    let mut ordered: Vec<&SubTrajectory> = subs.iter().collect();
    ordered.sort_by_key(|s| s.segment_index);
    for (expected, s) in ordered.iter().enumerate() {
        if s.segment_index != expected {
            return Err(TrajError::MissingSegment(expected));
        }
    }
    let points: Vec<SpatioTemporalPoint> =
        ordered.iter().flat_map(|s| s.points.iter().copied()).collect();
    let traj = Trajectory { traj_id: first.parent_id.clone(), user_id: first.user_id.clone(), points };
    match traj.validate() {
        Ok(()) => Ok(traj),
        Err(TrajError::NonMonotonicTime) => Err(TrajError::NonMonotonicTime),
        Err(TrajError::Empty) => Err(TrajError::Empty),
        Err(_) => Err(TrajError::InvariantViolation(traj.traj_id)),
    }
}
