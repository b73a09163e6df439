use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{SpatioTemporalPoint, TrajError, Trajectory};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    /// Isolated interior points (at least three apart) displaced by a Gaussian offset (σ = magnitude m per axis).
    Noise,
    /// Interior points removed.
    Drop,
    /// Near-copies inserted one second after existing points (jitter σ = magnitude m).
    Duplicate,
    /// A contiguous window turned into a stationary dwell (jitter σ = magnitude m);
    /// the remaining path is delayed accordingly.
    StayInject,
    /// A contiguous window pushed sideways by a sine-shaped bump of peak `magnitude` m.
    AnomalyDetour,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    pub rate: f64,
    pub magnitude: f64,
    pub seed: u64,
}

impl CorruptionSpec {
    pub fn new(kind: CorruptionKind, rate: f64, magnitude: f64, seed: u64) -> Result<Self, TrajError> {
        let s = Self { kind, rate, magnitude, seed };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), TrajError> {
        if !(0.0..=1.0).contains(&self.rate) {
            return Err(TrajError::InvalidCorruption(format!("rate {} not in [0,1]", self.rate)));
        }
        if !(self.magnitude >= 0.0 && self.magnitude.is_finite()) {
            return Err(TrajError::InvalidCorruption(format!("magnitude {}", self.magnitude)));
        }
        Ok(())
    }
}

/// Labels describing what a corruption did. Per-point vectors are indexed by
/// the corrupted trajectory's points.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct GroundTruth {
    pub noise: Vec<bool>,
    pub duplicate: Vec<bool>,
    /// Removed points with their index in the input trajectory.
    pub dropped: Vec<(usize, SpatioTemporalPoint)>,
    /// Injected dwell intervals as inclusive (start_t, end_t).
    pub stays: Vec<(i64, i64)>,
    pub anomalous: bool,
}

impl GroundTruth {
    fn clean(n: usize) -> Self {
        Self { noise: vec![false; n], duplicate: vec![false; n], ..Default::default() }
    }
}

pub fn corrupt(traj: &Trajectory, spec: &CorruptionSpec) -> Result<(Trajectory, GroundTruth), TrajError> {
    spec.validate()?;
    traj.validate()?;
    let n = traj.len();
    let count = (spec.rate * n as f64).floor() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let proj = traj.projection();
    let mut points = traj.points.clone();
    let mut truth = GroundTruth::clean(n);
    if count == 0 || n < 3 {
        return Ok((traj.clone(), truth));
    }
    let jitter = Normal::new(0.0, spec.magnitude.max(f64::MIN_POSITIVE)).expect("finite sigma");

    match spec.kind {
        CorruptionKind::Noise => {
            // Interior indices at least three apart, so no point has two noisy neighbours.
            let offset = rng.random_range(0..3usize);
            let candidates: Vec<usize> = (1..n - 1).filter(|i| i % 3 == offset).collect();
            let k = count.min(candidates.len());
            for c in sample(&mut rng, candidates.len(), k).into_iter() {
                let i = candidates[c];
                let (x, y) = proj.point_xy(&points[i]);
                let (dx, dy) = if spec.magnitude > 0.0 {
                    (jitter.sample(&mut rng), jitter.sample(&mut rng))
                } else {
                    (0.0, 0.0)
                };
                let (lon, lat) = proj.to_lonlat(x + dx, y + dy);
                points[i].lon = lon.clamp(-180.0, 180.0);
                points[i].lat = lat.clamp(-90.0, 90.0);
                truth.noise[i] = true;
            }
        }
        CorruptionKind::Drop => {
            let k = count.min(n - 2);
            let mut chosen: Vec<usize> = sample(&mut rng, n - 2, k).into_iter().map(|i| i + 1).collect();
            chosen.sort_unstable();
            truth.dropped = chosen.iter().map(|&i| (i, points[i])).collect();
            let mut keep = vec![true; n];
            for &i in &chosen {
                keep[i] = false;
            }
            points = points.into_iter().zip(keep).filter_map(|(p, k)| k.then_some(p)).collect();
            truth.noise = vec![false; points.len()];
            truth.duplicate = vec![false; points.len()];
        }
        CorruptionKind::Duplicate => {
            let eligible: Vec<usize> =
                (0..n - 1).filter(|&i| points[i + 1].t - points[i].t > 1).collect();
            let k = count.min(eligible.len());
            let mut chosen: Vec<usize> =
                sample(&mut rng, eligible.len(), k).into_iter().map(|c| eligible[c]).collect();
            chosen.sort_unstable();
            let mut out = Vec::with_capacity(n + k);
            let mut dup = Vec::with_capacity(n + k);
            let mut next = chosen.iter().peekable();
            for (i, p) in points.iter().enumerate() {
                out.push(*p);
                dup.push(false);
                if next.peek() == Some(&&i) {
                    next.next();
                    let (x, y) = proj.point_xy(p);
                    let (dx, dy) = if spec.magnitude > 0.0 {
                        (jitter.sample(&mut rng), jitter.sample(&mut rng))
                    } else {
                        (0.0, 0.0)
                    };
                    let (lon, lat) = proj.to_lonlat(x + dx, y + dy);
                    out.push(SpatioTemporalPoint::new(lon, lat, p.t + 1));
                    dup.push(true);
                }
            }
            points = out;
            truth.noise = vec![false; points.len()];
            truth.duplicate = dup;
        }
        CorruptionKind::StayInject => {
            let len = count.min(n - 2);
            if len >= 2 {
                let start = rng.random_range(1..=n - 1 - len);
                let centre = proj.point_xy(&points[start]);
                let original = points.clone();
                for j in start..n {
                    let (x, y) = if j < start + len {
                        let (dx, dy) = if spec.magnitude > 0.0 {
                            (jitter.sample(&mut rng), jitter.sample(&mut rng))
                        } else {
                            (0.0, 0.0)
                        };
                        (centre.0 + dx, centre.1 + dy)
                    } else {
                        // Resume the original path where the dwell interrupted it.
                        proj.point_xy(&original[j + 1 - len])
                    };
                    let (lon, lat) = proj.to_lonlat(x, y);
                    points[j].lon = lon;
                    points[j].lat = lat;
                }
                truth.stays.push((points[start].t, points[start + len - 1].t));
            }
        }
        CorruptionKind::AnomalyDetour => {
            let len = count.min(n - 2);
            let start = rng.random_range(1..=n - 1 - len);
            let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let xy: Vec<(f64, f64)> = points.iter().map(|p| proj.point_xy(p)).collect();
            for (k, j) in (start..start + len).enumerate() {
                let (ax, ay) = xy[j - 1];
                let (bx, by) = xy[j + 1];
                let (hx, hy) = (bx - ax, by - ay);
                let norm = hx.hypot(hy);
                let (nx, ny) = if norm > 0.0 { (-hy / norm, hx / norm) } else { (0.0, 1.0) };
                let bump = spec.magnitude
                    * (std::f64::consts::PI * (k + 1) as f64 / (len + 1) as f64).sin()
                    * side;
                let (lon, lat) = proj.to_lonlat(xy[j].0 + nx * bump, xy[j].1 + ny * bump);
                points[j].lon = lon;
                points[j].lat = lat;
            }
            truth.anomalous = spec.magnitude > 0.0 && len > 0;
        }
    }

    let out = Trajectory { traj_id: traj.traj_id.clone(), user_id: traj.user_id.clone(), points };
    Ok((out, truth))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::traj::{synth_generate, BBox};

    fn sample_traj(n: usize, seed: u64) -> Trajectory {
        synth_generate(1, 1, n, BBox::new(116.25, 39.85, 116.45, 40.0), seed).remove(0)
    }

    #[test]
    fn zero_rate_is_identity() {
        let t = sample_traj(100, 1);
        for kind in [
            CorruptionKind::Noise,
            CorruptionKind::Drop,
            CorruptionKind::Duplicate,
            CorruptionKind::StayInject,
            CorruptionKind::AnomalyDetour,
        ] {
            let (c, g) = corrupt(&t, &CorruptionSpec::new(kind, 0.0, 50.0, 3).unwrap()).unwrap();
            assert_eq!(c, t);
            assert!(g.noise.iter().chain(&g.duplicate).all(|b| !b));
            assert!(g.dropped.is_empty() && g.stays.is_empty() && !g.anomalous);
        }
    }

    #[test]
    fn drop_removes_exact_count() {
        let t = sample_traj(100, 2);
        let (c, g) = corrupt(&t, &CorruptionSpec::new(CorruptionKind::Drop, 0.2, 0.0, 5).unwrap()).unwrap();
        assert_eq!(c.len(), 80);
        assert_eq!(g.dropped.len(), 20);
        for (i, p) in &g.dropped {
            assert_eq!(t.points[*i], *p);
            assert!(!c.points.contains(p));
        }
        c.validate().unwrap();
    }

    #[test]
    fn noise_displacement_is_gaussian_bounded() {
        // 10k noisy points: per-axis |d| <= 3σ for ~99.73%, radial <= 3σ for ~98.89%.
        let sigma = 50.0;
        let mut axis_in = 0usize;
        let mut axis_total = 0usize;
        let mut radial_in = 0usize;
        let mut total = 0usize;
        let mut seed = 0;
        while total < 10_000 {
            let t = sample_traj(301, seed);
            let spec = CorruptionSpec::new(CorruptionKind::Noise, 0.33, sigma, seed + 1000).unwrap();
            let (c, g) = corrupt(&t, &spec).unwrap();
            let proj = t.projection();
            for i in (0..t.len()).filter(|&i| g.noise[i]) {
                let (x0, y0) = proj.point_xy(&t.points[i]);
                let (x1, y1) = proj.point_xy(&c.points[i]);
                for d in [x1 - x0, y1 - y0] {
                    axis_total += 1;
                    axis_in += (d.abs() <= 3.0 * sigma) as usize;
                }
                total += 1;
                radial_in += ((x1 - x0).hypot(y1 - y0) <= 3.0 * sigma) as usize;
            }
            seed += 1;
        }
        assert!(axis_in as f64 / axis_total as f64 >= 0.995);
        assert!(radial_in as f64 / total as f64 >= 0.984);
        assert!(radial_in < total, "a Gaussian should occasionally exceed 3σ radially");
    }

    #[test]
    fn noise_points_are_isolated_interior() {
        let t = sample_traj(100, 9);
        let (_, g) = corrupt(&t, &CorruptionSpec::new(CorruptionKind::Noise, 0.3, 500.0, 1).unwrap()).unwrap();
        assert_eq!(g.noise.iter().filter(|b| **b).count(), 30);
        assert!(!g.noise[0] && !g.noise[99]);
        assert!(g.noise.windows(3).all(|w| w.iter().filter(|b| **b).count() <= 1));
    }

    #[test]
    fn stay_inject_keeps_invariants() {
        let t = sample_traj(100, 4);
        let (c, g) =
            corrupt(&t, &CorruptionSpec::new(CorruptionKind::StayInject, 0.3, 3.0, 2).unwrap()).unwrap();
        c.validate().unwrap();
        assert_eq!(c.len(), t.len());
        let (s, e) = g.stays[0];
        assert_eq!(e - s, 29 * 10);
    }

    #[test]
    fn duplicate_inserts_and_labels() {
        let t = sample_traj(50, 5);
        let (c, g) =
            corrupt(&t, &CorruptionSpec::new(CorruptionKind::Duplicate, 0.1, 2.0, 2).unwrap()).unwrap();
        assert_eq!(c.len(), 55);
        assert_eq!(g.duplicate.iter().filter(|b| **b).count(), 5);
        c.validate().unwrap();
    }

    #[test]
    fn detour_flags_anomaly() {
        let t = sample_traj(60, 6);
        let (c, g) = corrupt(
            &t,
            &CorruptionSpec::new(CorruptionKind::AnomalyDetour, 0.2, 800.0, 2).unwrap(),
        )
        .unwrap();
        assert!(g.anomalous);
        assert_ne!(c, t);
    }

    #[test]
    fn deterministic() {
        let t = sample_traj(80, 7);
        let spec = CorruptionSpec::new(CorruptionKind::Noise, 0.1, 100.0, 42).unwrap();
        assert_eq!(corrupt(&t, &spec).unwrap(), corrupt(&t, &spec).unwrap());
    }

    #[test]
    fn rejects_bad_spec() {
        assert!(CorruptionSpec::new(CorruptionKind::Drop, 1.5, 0.0, 0).is_err());
        assert!(CorruptionSpec::new(CorruptionKind::Drop, 0.5, -1.0, 0).is_err());
    }
}
