use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use super::{SpatioTemporalPoint, TrajError, Trajectory};

const HEADER: [&str; 5] = ["user_id", "traj_id", "t", "lon", "lat"];

/// Reads `user_id,traj_id,t,lon,lat` rows into trajectories, in order of
/// first appearance.
pub fn load_csv(path: impl AsRef<Path>) -> Result<Vec<Trajectory>, TrajError> {
    let file = std::fs::File::open(path.as_ref()).map_err(|e| TrajError::Io(e.to_string()))?;
    read_csv(file)
}

pub fn read_csv(reader: impl Read) -> Result<Vec<Trajectory>, TrajError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr.headers().map_err(|e| TrajError::Parse { line: 1, msg: e.to_string() })?;
    if headers.iter().map(str::trim).ne(HEADER) {
        return Err(TrajError::Parse { line: 1, msg: format!("expected header {}", HEADER.join(",")) });
    }
    let mut order: Vec<String> = Vec::new();
    let mut by_id: HashMap<String, Trajectory> = HashMap::new();
    for (row, rec) in rdr.records().enumerate() {
        let line = row + 2;
        let rec = rec.map_err(|e| TrajError::Parse { line, msg: e.to_string() })?;
        if rec.len() != 5 {
            return Err(TrajError::Parse { line, msg: format!("expected 5 fields, got {}", rec.len()) });
        }
        let parse_err = |what: &str| TrajError::Parse { line, msg: format!("bad {what}") };
        let t: i64 = rec[2].trim().parse().map_err(|_| parse_err("t"))?;
        let lon: f64 = rec[3].trim().parse().map_err(|_| parse_err("lon"))?;
        let lat: f64 = rec[4].trim().parse().map_err(|_| parse_err("lat"))?;
        let traj_id = rec[1].trim().to_string();
        let user_id = rec[0].trim().to_string();
        let entry = by_id.entry(traj_id.clone()).or_insert_with(|| {
            order.push(traj_id.clone());
            Trajectory { traj_id: traj_id.clone(), user_id: user_id.clone(), points: Vec::new() }
        });
        if entry.user_id != user_id {
            return Err(TrajError::InvariantViolation(traj_id));
        }
        entry.points.push(SpatioTemporalPoint::new(lon, lat, t));
    }
    order
        .into_iter()
        .map(|id| {
            let traj = by_id.remove(&id).expect("inserted above");
            traj.validate().map_err(|_| TrajError::InvariantViolation(id))?;
            Ok(traj)
        })
        .collect()
}

/// Writes trajectories sorted by (traj_id, t).
pub fn save_csv(trajs: &[Trajectory], path: impl AsRef<Path>) -> Result<(), TrajError> {
    let file = std::fs::File::create(path.as_ref()).map_err(|e| TrajError::Io(e.to_string()))?;
    write_csv(trajs, file)
}

pub fn write_csv(trajs: &[Trajectory], writer: impl Write) -> Result<(), TrajError> {
    let io = |e: csv::Error| TrajError::Io(e.to_string());
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(HEADER).map_err(io)?;
    let mut sorted: Vec<&Trajectory> = trajs.iter().collect();
    sorted.sort_by(|a, b| a.traj_id.cmp(&b.traj_id));
    for traj in sorted {
        let mut pts = traj.points.clone();
        pts.sort_by_key(|p| p.t);
        for p in pts {
            w.write_record([
                traj.user_id.as_str(),
                traj.traj_id.as_str(),
                &p.t.to_string(),
                &p.lon.to_string(),
                &p.lat.to_string(),
            ])
            .map_err(io)?;
        }
    }
    w.flush().map_err(|e| TrajError::Io(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::traj::{synth_generate, BBox};

    #[test]
    fn round_trip() {
        let trajs = synth_generate(3, 6, 40, BBox::new(116.25, 39.85, 116.45, 40.0), 5);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        save_csv(&trajs, &path).unwrap();
        assert_eq!(load_csv(&path).unwrap(), trajs);
    }

    #[test]
    fn header_only_is_empty() {
        assert!(read_csv("user_id,traj_id,t,lon,lat\n".as_bytes()).unwrap().is_empty());
    }

    #[test]
    fn latitude_out_of_range() {
        let data = "user_id,traj_id,t,lon,lat\nu,a,0,1.0,2.0\nu,a,1,1.0,100\n";
        assert_eq!(read_csv(data.as_bytes()), Err(TrajError::InvariantViolation("a".into())));
    }

    #[test]
    fn parse_error_reports_line() {
        let data = "user_id,traj_id,t,lon,lat\nu,a,0,1.0,2.0\nu,a,x,1.0,2.0\n";
        assert!(matches!(read_csv(data.as_bytes()), Err(TrajError::Parse { line: 3, .. })));
    }
}
