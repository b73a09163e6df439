//! Classical reference algorithms for each task. All are deterministic and
//! pure; the training harness uses them to synthesise labels.

use serde::{Deserialize, Serialize};

use super::{RoadNetwork, TaskError, TaskOutput};
use crate::traj::{
    lerp_at, synchronized_distance, LocalProjection, SpatioTemporalPoint, SynthMeta, Trajectory,
};

/// A trajectory output, optionally annotated with per-point road segment ids
/// (map matching) or segment boundaries (segmentation).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotatedTrajectory {
    pub traj: Trajectory,
    pub segment_ids: Option<Vec<u64>>,
    /// Indices at which a new segment starts (never 0).
    pub boundaries: Option<Vec<usize>>,
}

impl AnnotatedTrajectory {
    pub fn plain(traj: Trajectory) -> Self {
        Self { traj, segment_ids: None, boundaries: None }
    }
}

/// Inclusive index range of a dwell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StayRun {
    pub start: usize,
    pub end: usize,
}

fn check_positive(name: &str, v: f64) -> Result<(), TaskError> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(TaskError::InvalidThreshold(format!("{name} = {v}")))
    }
}

/// Maximal runs whose spatial diameter stays within `dist_thresh` and whose
/// duration reaches `time_thresh`. Runs are grown greedily from left to right.
pub fn stay_runs(
    traj: &Trajectory,
    dist_thresh: f64,
    time_thresh: f64,
) -> Result<Vec<StayRun>, TaskError> {
    check_positive("dist_thresh", dist_thresh)?;
    check_positive("time_thresh", time_thresh)?;
    let proj = traj.projection();
    let xy: Vec<(f64, f64)> = traj.points.iter().map(|p| proj.point_xy(p)).collect();
    let n = xy.len();
    let mut runs = Vec::new();
    let mut i = 0;
    while i < n {
        let mut j = i;
        'grow: while j + 1 < n {
            let (cx, cy) = xy[j + 1];
            for &(x, y) in &xy[i..=j] {
                if (x - cx).hypot(y - cy) > dist_thresh {
                    break 'grow;
                }
            }
            j += 1;
        }
        if j > i && (traj.points[j].t - traj.points[i].t) as f64 >= time_thresh {
            runs.push(StayRun { start: i, end: j });
            i = j + 1;
        } else {
            i += 1;
        }
    }
    Ok(runs)
}

/// One representative point (centroid, mid-time) per stay run.
pub fn oracle_stay_points(
    traj: &Trajectory,
    dist_thresh: f64,
    time_thresh: f64,
) -> Result<TaskOutput, TaskError> {
    let runs = stay_runs(traj, dist_thresh, time_thresh)?;
    let pts = runs
        .iter()
        .map(|r| {
            let slice = &traj.points[r.start..=r.end];
            let k = slice.len() as f64;
            let lon = slice.iter().map(|p| p.lon).sum::<f64>() / k;
            let lat = slice.iter().map(|p| p.lat).sum::<f64>() / k;
            let t = slice[0].t + (slice[slice.len() - 1].t - slice[0].t) / 2;
            SpatioTemporalPoint::new(lon, lat, t)
        })
        .collect();
    Ok(TaskOutput::Points(pts))
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseFilterResult {
    pub output: TaskOutput,
    /// Per input point: true if kept.
    pub keep: Vec<bool>,
}

/// Drops interior points whose implied speed to both neighbours exceeds
/// `speed_thresh` (m/s). Endpoints are always kept.
pub fn oracle_noise_filter(traj: &Trajectory, speed_thresh: f64) -> Result<NoiseFilterResult, TaskError> {
    check_positive("speed_thresh", speed_thresh)?;
    let proj = traj.projection();
    let pts = &traj.points;
    let n = pts.len();
    let speed = |a: &SpatioTemporalPoint, b: &SpatioTemporalPoint| {
        proj.distance(a, b) / ((b.t - a.t).abs().max(1)) as f64
    };
    let keep: Vec<bool> = (0..n)
        .map(|i| {
            if i == 0 || i + 1 == n {
                return true;
            }
            !(speed(&pts[i - 1], &pts[i]) > speed_thresh && speed(&pts[i], &pts[i + 1]) > speed_thresh)
        })
        .collect();
    let kept = Trajectory {
        traj_id: traj.traj_id.clone(),
        user_id: traj.user_id.clone(),
        points: pts.iter().zip(&keep).filter(|(_, k)| **k).map(|(p, _)| *p).collect(),
    };
    Ok(NoiseFilterResult { output: TaskOutput::TrajectoryOut(AnnotatedTrajectory::plain(kept)), keep })
}

/// Douglas-Peucker on the time-synchronised deviation. A span is split while
/// its largest deviation is at least `epsilon`, so `epsilon = 0` keeps every
/// point.
pub fn simplify_mask(traj: &Trajectory, epsilon: f64) -> Result<Vec<bool>, TaskError> {
    if !(epsilon >= 0.0) {
        return Err(TaskError::InvalidThreshold(format!("epsilon = {epsilon}")));
    }
    let n = traj.len();
    let mut keep = vec![false; n];
    if n == 0 {
        return Ok(keep);
    }
    keep[0] = true;
    keep[n - 1] = true;
    let proj = traj.projection();
    let pts = &traj.points;
    let mut stack = vec![(0usize, n - 1)];
    while let Some((s, e)) = stack.pop() {
        if e <= s + 1 {
            continue;
        }
        let (mut best, mut best_d) = (s + 1, -1.0f64);
        for i in s + 1..e {
            let d = synchronized_distance(&proj, &pts[i], &pts[s], &pts[e]);
            if d > best_d {
                best = i;
                best_d = d;
            }
        }
        if best_d >= epsilon {
            keep[best] = true;
            stack.push((s, best));
            stack.push((best, e));
        }
    }
    Ok(keep)
}

pub fn oracle_simplify(traj: &Trajectory, epsilon: f64) -> Result<TaskOutput, TaskError> {
    let keep = simplify_mask(traj, epsilon)?;
    let points = traj.points.iter().zip(&keep).filter(|(_, k)| **k).map(|(p, _)| *p).collect();
    Ok(TaskOutput::TrajectoryOut(AnnotatedTrajectory::plain(Trajectory {
        traj_id: traj.traj_id.clone(),
        user_id: traj.user_id.clone(),
        points,
    })))
}

/// Closest point on segment a→b to p in planar coordinates, and its distance.
pub(crate) fn project_on_segment(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> ((f64, f64), f64) {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let f = if len2 > 0.0 { (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0) } else { 0.0 };
    let q = (a.0 + f * dx, a.1 + f * dy);
    (q, (p.0 - q.0).hypot(p.1 - q.1))
}

/// Snaps each point to its nearest road segment; ties go to the lower id.
pub fn oracle_map_match(traj: &Trajectory, net: &RoadNetwork) -> Result<TaskOutput, TaskError> {
    if net.is_empty() {
        return Err(TaskError::EmptyNetwork);
    }
    let proj = traj.projection();
    let mut segs: Vec<_> = net
        .segments
        .iter()
        .map(|s| (s.id, proj.to_xy(s.start_lon, s.start_lat), proj.to_xy(s.stop_lon, s.stop_lat)))
        .collect();
    segs.sort_by_key(|s| s.0);
    let mut ids = Vec::with_capacity(traj.len());
    let mut points = Vec::with_capacity(traj.len());
    for p in &traj.points {
        let xy = proj.point_xy(p);
        let mut best: Option<(u64, (f64, f64), f64)> = None;
        for &(id, a, b) in &segs {
            let (q, d) = project_on_segment(xy, a, b);
            if best.map_or(true, |(_, _, bd)| d < bd) {
                best = Some((id, q, d));
            }
        }
        let (id, q, _) = best.expect("non-empty network");
        let (lon, lat) = proj.to_lonlat(q.0, q.1);
        ids.push(id);
        points.push(SpatioTemporalPoint::new(lon, lat, p.t));
    }
    Ok(TaskOutput::TrajectoryOut(AnnotatedTrajectory {
        traj: Trajectory { traj_id: traj.traj_id.clone(), user_id: traj.user_id.clone(), points },
        segment_ids: Some(ids),
        boundaries: None,
    }))
}

/// Timestamps on the regular `interval` grid that fall strictly between
/// consecutive observations.
pub fn detect_gaps(traj: &Trajectory, interval: i64) -> Vec<i64> {
    if interval <= 0 {
        return Vec::new();
    }
    traj.points
        .windows(2)
        .flat_map(|w| {
            let (a, b) = (w[0].t, w[1].t);
            (1..).map(move |k| a + k * interval).take_while(move |&t| t < b)
        })
        .collect()
}

/// Inserts linearly interpolated points at each `missing` timestamp.
pub fn oracle_impute(traj: &Trajectory, missing: &[i64]) -> Result<TaskOutput, TaskError> {
    let pts = &traj.points;
    let mut inserted = Vec::with_capacity(missing.len());
    for &t in missing {
        let k = pts.partition_point(|p| p.t < t);
        if k < pts.len() && pts[k].t == t {
            continue;
        }
        if k == 0 || k == pts.len() {
            return Err(TaskError::UnbracketedGap(t));
        }
        let (lon, lat) = lerp_at(&pts[k - 1], &pts[k], t);
        inserted.push(SpatioTemporalPoint::new(lon, lat, t));
    }
    let mut points = pts.clone();
    points.extend(inserted);
    points.sort_by_key(|p| p.t);
    points.dedup_by_key(|p| p.t);
    Ok(TaskOutput::TrajectoryOut(AnnotatedTrajectory::plain(Trajectory {
        traj_id: traj.traj_id.clone(),
        user_id: traj.user_id.clone(),
        points,
    })))
}

/// Recovery: fills every missing slot of the regular sampling grid.
pub fn oracle_recover(traj: &Trajectory, interval: i64) -> Result<TaskOutput, TaskError> {
    oracle_impute(traj, &detect_gaps(traj, interval))
}

/// Splits at each stay point: a new segment starts at the first point whose
/// time is at or after the stay's representative time.
pub fn oracle_segment(traj: &Trajectory, stay_points: &[SpatioTemporalPoint]) -> TaskOutput {
    let mut boundaries: Vec<usize> = stay_points
        .iter()
        .map(|s| traj.points.partition_point(|p| p.t < s.t))
        .filter(|&b| b > 0 && b < traj.len())
        .collect();
    boundaries.sort_unstable();
    boundaries.dedup();
    TaskOutput::TrajectoryOut(AnnotatedTrajectory {
        traj: traj.clone(),
        segment_ids: None,
        boundaries: Some(boundaries),
    })
}

/// Largest distance from any point of `traj` to the reference polyline.
pub(crate) fn max_deviation(traj: &Trajectory, reference: &Trajectory) -> f64 {
    let proj = LocalProjection::for_points(&reference.points);
    let rxy: Vec<(f64, f64)> = reference.points.iter().map(|p| proj.point_xy(p)).collect();
    traj.points
        .iter()
        .map(|p| {
            let xy = proj.point_xy(p);
            if rxy.len() == 1 {
                return (xy.0 - rxy[0].0).hypot(xy.1 - rxy[0].1);
            }
            rxy.windows(2).map(|w| project_on_segment(xy, w[0], w[1]).1).fold(f64::INFINITY, f64::min)
        })
        .fold(0.0, f64::max)
}

/// 1 if the trajectory strays further than `detour_thresh` metres from the
/// reference route, else 0.
pub fn oracle_anomaly(
    traj: &Trajectory,
    reference_route: &Trajectory,
    detour_thresh: f64,
) -> Result<TaskOutput, TaskError> {
    if reference_route.is_empty() || traj.is_empty() {
        return Err(TaskError::Empty);
    }
    let anomalous = max_deviation(traj, reference_route) > detour_thresh;
    Ok(TaskOutput::Classification(anomalous as usize))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TravelMode {
    Walk,
    Bike,
    Bus,
    Car,
}

impl TravelMode {
    pub const ALL: [TravelMode; 4] = [TravelMode::Walk, TravelMode::Bike, TravelMode::Bus, TravelMode::Car];

    pub fn index(self) -> usize {
        self as usize
    }
}

/// Mean-speed classes: walk < 2, bike < 6, bus < 15, car ≥ 15 m/s.
pub fn travel_mode_for_speed(mean_speed: f64) -> TravelMode {
    match mean_speed {
        v if v < 2.0 => TravelMode::Walk,
        v if v < 6.0 => TravelMode::Bike,
        v if v < 15.0 => TravelMode::Bus,
        _ => TravelMode::Car,
    }
}

pub fn label_tmi(meta: &SynthMeta) -> TaskOutput {
    TaskOutput::Classification(travel_mode_for_speed(meta.nominal_speed).index())
}

pub fn label_tul(meta: &SynthMeta) -> TaskOutput {
    TaskOutput::Classification(meta.user_index)
}
