use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{FpoError, RunConfig};
use crate::tasks::RoadNetwork;
use crate::tke::{Weather, WeatherCondition};
use crate::tpa::Normalization;
use crate::traj::{
    corrupt, synth_generate_with_meta, CorruptionKind, CorruptionSpec, RegionPartition, SynthMeta, Trajectory,
};

/// Independent sub-seed for a named purpose.
pub fn derive_seed(seed: u64, label: &str, index: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(label.as_bytes());
    h.update(seed.to_le_bytes());
    h.update(index.to_le_bytes());
    let d: [u8; 32] = h.finalize().into();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

/// One corrupted trajectory with what the harness knows about it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub traj: Trajectory,
    /// Route before any corruption; the reference for detours.
    pub clean: Trajectory,
    pub meta: SynthMeta,
    pub weather: Weather,
    /// Timestamps removed by drop corruption.
    pub dropped: Vec<i64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub partition: RegionPartition,
    pub norm: Normalization,
    pub road: RoadNetwork,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

fn clamp_into(traj: &mut Trajectory, cfg: &RunConfig) {
    let b = &cfg.data.bbox;
    for p in &mut traj.points {
        p.lon = p.lon.clamp(b.lon_min, b.lon_max);
        p.lat = p.lat.clamp(b.lat_min, b.lat_max);
    }
}

/// Synthesizes, corrupts and splits the data set described by `cfg`.
pub fn build_dataset(cfg: &RunConfig) -> Result<Dataset, FpoError> {
    cfg.validate()?;
    let d = &cfg.data;
    let synth = synth_generate_with_meta(d.users, d.trajectories, d.points_per_traj, d.bbox, derive_seed(cfg.seed, "synth", 0));
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "dataset", 0));
    let n = synth.len();
    let n_anomalous = (d.anomaly_fraction * n as f64).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let anomalous: Vec<bool> = {
        let mut v = vec![false; n];
        order.iter().take(n_anomalous).for_each(|&k| v[k] = true);
        v
    };

    let mut samples = Vec::with_capacity(n);
    for (k, s) in synth.into_iter().enumerate() {
        let mut clean = s.traj.clone();
        let mut traj = s.traj;
        if anomalous[k] {
            let spec = CorruptionSpec::new(CorruptionKind::AnomalyDetour, 0.3, d.anomaly_magnitude, derive_seed(cfg.seed, "detour", k as u64))?;
            traj = corrupt(&traj, &spec)?.0;
        }
        let mut dropped = Vec::new();
        for (step, c) in d.corruptions.iter().enumerate() {
            let spec = CorruptionSpec::new(c.kind, c.rate, c.magnitude, derive_seed(cfg.seed, "corrupt", (k * 64 + step) as u64))?;
            let (out, gt) = corrupt(&traj, &spec)?;
            traj = out;
            if c.kind == CorruptionKind::Drop {
                dropped.extend(gt.dropped.iter().map(|(_, p)| p.t));
            }
        }
        clamp_into(&mut traj, cfg);
        clamp_into(&mut clean, cfg);
        dropped.retain(|t| traj.points.first().is_some_and(|a| a.t < *t) && traj.points.last().is_some_and(|b| *t < b.t));
        dropped.sort_unstable();
        let weather = Weather {
            condition: WeatherCondition::ALL[rng.random_range(0..WeatherCondition::ALL.len())],
            temperature_c: rng.random_range(-5.0..35.0),
        };
        samples.push(Sample { traj, clean, meta: s.meta, weather, dropped });
    }

    let n_test = ((d.test_fraction * n as f64).round() as usize).clamp(1, n - 1);
    order.shuffle(&mut rng);
    let mut is_test = vec![false; n];
    order.iter().take(n_test).for_each(|&k| is_test[k] = true);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (k, s) in samples.into_iter().enumerate() {
        if is_test[k] { test.push(s) } else { train.push(s) }
    }

    let norm = Normalization::covering(train.iter().chain(&test).flat_map(|s| &s.traj.points), d.bbox)?;
    Ok(Dataset {
        partition: RegionPartition::grid(d.bbox, d.grid_rows, d.grid_cols)?,
        norm,
        road: RoadNetwork::grid(d.bbox, d.road_lines),
        train,
        test,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_split() {
        let cfg = RunConfig::default();
        let a = build_dataset(&cfg).unwrap();
        let b = build_dataset(&cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.train.len() + a.test.len(), cfg.data.trajectories);
        assert_eq!(a.test.len(), 12);
        for s in a.train.iter().chain(&a.test) {
            s.traj.validate().unwrap();
            assert!(s.traj.points.iter().all(|p| cfg.data.bbox.contains(p.lon, p.lat)));
            assert!(s.traj.points.iter().all(|p| a.partition.client_of(p).is_some()));
        }
    }

    #[test]
    fn seeds_are_independent() {
        assert_ne!(derive_seed(1, "a", 0), derive_seed(1, "b", 0));
        assert_ne!(derive_seed(1, "a", 0), derive_seed(1, "a", 1));
        assert_eq!(derive_seed(9, "x", 3), derive_seed(9, "x", 3));
    }

    #[test]
    fn drop_timestamps_are_recorded() {
        let mut cfg = RunConfig::default();
        cfg.data.corruptions = vec![super::super::CorruptionStep { kind: CorruptionKind::Drop, rate: 0.1, magnitude: 0.0 }];
        let d = build_dataset(&cfg).unwrap();
        for s in &d.train {
            assert_eq!(s.dropped.len(), 10);
            assert!(s.dropped.iter().all(|t| s.traj.points.iter().all(|p| p.t != *t)));
        }
    }
}
