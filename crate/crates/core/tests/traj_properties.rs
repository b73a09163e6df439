use proptest::prelude::*;
use trajfed_core::tasks::{oracle_noise_filter, oracle_simplify, sed, simplify_mask, stay_runs, TaskOutput};
use trajfed_core::traj::{
    corrupt, partition_trajectory, reassemble, synth_generate, BBox, CorruptionKind,
    CorruptionSpec, RegionPartition, SpatioTemporalPoint, Trajectory,
};

fn bbox() -> BBox {
    BBox::new(116.25, 39.85, 116.45, 40.0)
}

prop_compose! {
    fn arb_trajectory()(steps in prop::collection::vec((0.0f64..1.0, 0.0f64..1.0, 1i64..120), 1..60)) -> Trajectory {
        let b = bbox();
        let mut t = 0;
        let points = steps.into_iter().map(|(fx, fy, dt)| {
            t += dt;
            SpatioTemporalPoint::new(
                b.lon_min + fx * (b.lon_max - b.lon_min),
                b.lat_min + fy * (b.lat_max - b.lat_min),
                t,
            )
        }).collect();
        Trajectory::new("p", "u", points).unwrap()
    }
}

prop_compose! {
    fn arb_partition()(rows in 1usize..5, cols in 1usize..5, clients in 1usize..4, salt in any::<u64>()) -> RegionPartition {
        let map = (0..rows * cols).map(|c| ((c as u64).wrapping_mul(salt | 1) >> 7) as usize % clients).collect();
        RegionPartition::new(bbox(), rows, cols, map).unwrap()
    }
}

proptest! {
    #[test]
    fn partition_round_trip(traj in arb_trajectory(), part in arb_partition()) {
        let subs = partition_trajectory(&traj, &part).unwrap();
        for s in &subs {
            prop_assert!(s.points.iter().all(|p| part.client_of(p) == Some(s.client_id)));
        }
        for w in subs.windows(2) {
            prop_assert_ne!(w[0].client_id, w[1].client_id);
        }
        let mut shuffled = subs.clone();
        shuffled.reverse();
        prop_assert_eq!(reassemble(&shuffled).unwrap(), traj);
    }

    #[test]
    fn zero_rate_corruption_is_identity(seed in any::<u64>(), mag in 0.0f64..1000.0) {
        let traj = synth_generate(1, 1, 40, bbox(), seed % 1000).remove(0);
        let spec = CorruptionSpec::new(CorruptionKind::Noise, 0.0, mag, seed).unwrap();
        prop_assert_eq!(corrupt(&traj, &spec).unwrap().0, traj);
    }
}

fn simplified(traj: &Trajectory, eps: f64) -> Trajectory {
    match oracle_simplify(traj, eps).unwrap() {
        TaskOutput::TrajectoryOut(a) => a.traj,
        _ => unreachable!(),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    /// Douglas-Peucker keeps nested point sets as epsilon grows, and every
    /// dropped point lies within epsilon of the simplified polyline, so the
    /// mean SED is bounded by epsilon. (Mean SED itself is not monotone in
    /// epsilon: removing a vertex can bring some points closer.)
    #[test]
    fn simplify_nested_and_bounded(seed in 0u64..10_000) {
        let traj = synth_generate(2, 1, 80, bbox(), seed).remove(0);
        let mut prev: Option<Vec<bool>> = None;
        for eps in [0.0, 1.0, 5.0, 10.0, 25.0, 50.0, 100.0, 250.0, 1e9] {
            let mask = simplify_mask(&traj, eps).unwrap();
            if let Some(p) = &prev {
                prop_assert!(mask.iter().zip(p).all(|(now, before)| !now || *before));
            }
            let s = sed(&simplified(&traj, eps), &traj).unwrap();
            prop_assert!(eps == 0.0 && s == 0.0 || s < eps, "eps {} sed {}", eps, s);
            prev = Some(mask);
        }
    }
}

/// Corruptions an order of magnitude beyond the oracle thresholds are
/// recovered exactly.
#[test]
fn oracles_recover_strong_corruption() {
    for seed in 0..20u64 {
        let clean = synth_generate(4, 4, 100, bbox(), seed).remove((seed % 4) as usize);
        // Isolated noise at 10x the 50 m/s * 10 s step threshold.
        let spec = CorruptionSpec::new(CorruptionKind::Noise, 0.05, 5000.0, seed).unwrap();
        let (noisy, truth) = corrupt(&clean, &spec).unwrap();
        let keep = oracle_noise_filter(&noisy, 50.0).unwrap().keep;
        let proj = clean.projection();
        for i in 0..noisy.len() {
            let displaced = proj.distance(&clean.points[i], &noisy.points[i]);
            if truth.noise[i] && displaced > 2.0 * 500.0 + 2.0 * 230.0 {
                assert!(!keep[i], "seed {seed}: displaced noise point {i} kept");
            }
            if !truth.noise[i] {
                assert!(keep[i], "seed {seed}: clean point {i} dropped");
            }
        }

        // A dwell lasting 10x the time threshold, jitter far below the distance threshold.
        let spec = CorruptionSpec::new(CorruptionKind::StayInject, 0.31, 1.0, seed).unwrap();
        let (stayed, truth) = corrupt(&clean, &spec).unwrap();
        let runs = stay_runs(&stayed, 20.0, 30.0).unwrap();
        let (s, e) = truth.stays[0];
        assert!(
            runs.iter().any(|r| stayed.points[r.start].t <= s && stayed.points[r.end].t >= e),
            "seed {seed}: injected dwell not recovered"
        );
    }
}
