use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::TaskError;
use super::oracles::project_on_segment;
use crate::traj::{BBox, LocalProjection, SpatioTemporalPoint, TrajError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoadSegment {
    pub id: u64,
    pub start_lon: f64,
    pub start_lat: f64,
    pub stop_lon: f64,
    pub stop_lat: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RoadNetwork {
    pub segments: Vec<RoadSegment>,
}

impl RoadNetwork {
    pub fn new(mut segments: Vec<RoadSegment>) -> Self {
        segments.sort_by_key(|s| s.id);
        Self { segments }
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    /// The `k` nearest segments to `p` as (id, metres), nearest first, ties by id.
    pub fn nearest(&self, p: &SpatioTemporalPoint, k: usize) -> Vec<(u64, f64)> {
        let proj = LocalProjection::new(p.lon, p.lat, p.lat);
        let mut d: Vec<(u64, f64)> = self
            .segments
            .iter()
            .map(|s| {
                let a = proj.to_xy(s.start_lon, s.start_lat);
                let b = proj.to_xy(s.stop_lon, s.stop_lat);
                (s.id, project_on_segment((0.0, 0.0), a, b).1)
            })
            .collect();
        d.sort_by(|x, y| x.1.total_cmp(&y.1).then(x.0.cmp(&y.0)));
        d.truncate(k);
        d
    }

    /// Manhattan grid with `lines` horizontal and `lines` vertical roads, each
    /// cut into `lines - 1` segments between intersections.
    pub fn grid(bbox: BBox, lines: usize) -> Self {
        let lines = lines.max(2);
        let lon = |i: usize| bbox.lon_min + (bbox.lon_max - bbox.lon_min) * i as f64 / (lines - 1) as f64;
        let lat = |i: usize| bbox.lat_min + (bbox.lat_max - bbox.lat_min) * i as f64 / (lines - 1) as f64;
        let mut segments = Vec::new();
        for a in 0..lines {
            for b in 0..lines - 1 {
                let id = segments.len() as u64;
                segments.push(RoadSegment { id, start_lon: lon(b), start_lat: lat(a), stop_lon: lon(b + 1), stop_lat: lat(a) });
                let id = segments.len() as u64;
                segments.push(RoadSegment { id, start_lon: lon(a), start_lat: lat(b), stop_lon: lon(a), stop_lat: lat(b + 1) });
            }
        }
        Self { segments }
    }

    /// Reads `id,start_lon,start_lat,stop_lon,stop_lat` with a header row.
    pub fn load_csv(path: impl AsRef<Path>) -> Result<Self, TaskError> {
        let f = std::fs::File::open(path).map_err(|e| TrajError::Io(e.to_string()))?;
        Self::read_csv(f)
    }

    pub fn read_csv(reader: impl Read) -> Result<Self, TaskError> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let mut segments = Vec::new();
        for (row, rec) in rdr.records().enumerate() {
            let line = row + 2;
            let rec = rec.map_err(|e| TrajError::Parse { line, msg: e.to_string() })?;
            let field = |i: usize| -> Result<&str, TaskError> {
                rec.get(i).map(str::trim).ok_or(TaskError::Traj(TrajError::Parse { line, msg: "missing field".into() }))
            };
            let num = |i: usize| -> Result<f64, TaskError> {
                field(i)?.parse().map_err(|_| TaskError::Traj(TrajError::Parse { line, msg: format!("bad field {i}") }))
            };
            let id = field(0)?
                .parse()
                .map_err(|_| TaskError::Traj(TrajError::Parse { line, msg: "bad id".into() }))?;
            segments.push(RoadSegment { id, start_lon: num(1)?, start_lat: num(2)?, stop_lon: num(3)?, stop_lat: num(4)? });
        }
        Ok(Self::new(segments))
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<(), TaskError> {
        let io = |e: csv::Error| TaskError::Traj(TrajError::Io(e.to_string()));
        let mut w = csv::Writer::from_path(path).map_err(io)?;
        w.write_record(["id", "start_lon", "start_lat", "stop_lon", "stop_lat"]).map_err(io)?;
        for s in &self.segments {
            w.write_record([
                s.id.to_string(),
                s.start_lon.to_string(),
                s.start_lat.to_string(),
                s.stop_lon.to_string(),
                s.stop_lat.to_string(),
            ])
            .map_err(io)?;
        }
        w.flush().map_err(|e| TaskError::Traj(TrajError::Io(e.to_string())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip() {
        let net = RoadNetwork::grid(BBox::new(0.0, 0.0, 1.0, 1.0), 3);
        assert_eq!(net.segments.len(), 12);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("roads.csv");
        net.write_csv(&p).unwrap();
        assert_eq!(RoadNetwork::load_csv(&p).unwrap(), net);
    }

    #[test]
    fn nearest_segments() {
        let net = RoadNetwork::grid(BBox::new(0.0, 0.0, 0.02, 0.02), 3);
        // Just east of the lower-left intersection, on the bottom road.
        let p = SpatioTemporalPoint::new(0.001, 0.0, 0);
        let near = net.nearest(&p, 3);
        assert_eq!(near.len(), 3);
        assert!(near[0].1 < 1e-6);
        assert!(near.windows(2).all(|w| w[0].1 <= w[1].1));
    }
}
