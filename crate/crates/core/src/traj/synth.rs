use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{BBox, LocalProjection, SpatioTemporalPoint, Trajectory};

/// Sampling interval of generated trajectories, in seconds.
pub const SAMPLE_INTERVAL_S: i64 = 10;
const BASE_EPOCH: i64 = 1_700_000_000;

/// Hidden generator state used to derive user-linking and travel-mode labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthMeta {
    pub user_index: usize,
    /// Nominal speed of the generating walk, m/s.
    pub nominal_speed: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthTrajectory {
    pub traj: Trajectory,
    pub meta: SynthMeta,
}

/// Per-user base speeds, one per travel mode (walk, bike, bus, car).
const MODE_SPEEDS: [f64; 4] = [1.3, 4.0, 10.0, 20.0];

/// Smooth bounded-speed random walks inside `bbox`, regularly sampled.
pub fn synth_generate(
    n_users: usize,
    n_trajs: usize,
    points_per_traj: usize,
    bbox: BBox,
    seed: u64,
) -> Vec<Trajectory> {
    synth_generate_with_meta(n_users, n_trajs, points_per_traj, bbox, seed)
        .into_iter()
        .map(|s| s.traj)
        .collect()
}

pub fn synth_generate_with_meta(
    n_users: usize,
    n_trajs: usize,
    points_per_traj: usize,
    bbox: BBox,
    seed: u64,
) -> Vec<SynthTrajectory> {
    if n_users == 0 || points_per_traj == 0 {
        return Vec::new();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centre_lat = 0.5 * (bbox.lat_min + bbox.lat_max);
    let proj = LocalProjection::new(bbox.lon_min, bbox.lat_min, centre_lat);
    let (width, height) = proj.to_xy(bbox.lon_max, bbox.lat_max);
    let margin = 0.02 * width.min(height);

    // Users: a home location and a preferred mode.
    let users: Vec<((f64, f64), usize)> = (0..n_users)
        .map(|u| {
            let home = (
                rng.random_range(0.2..0.8) * width,
                rng.random_range(0.2..0.8) * height,
            );
            (home, u % MODE_SPEEDS.len())
        })
        .collect();

    (0..n_trajs)
        .map(|k| {
            let user_index = k % n_users;
            let ((hx, hy), mode) = users[user_index];
            let speed = MODE_SPEEDS[mode] * rng.random_range(0.85..1.15);
            let mut x = (hx + rng.random_range(-0.1..0.1) * width).clamp(margin, width - margin);
            let mut y = (hy + rng.random_range(-0.1..0.1) * height).clamp(margin, height - margin);
            let mut heading: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let mut turn_rate = 0.0f64;
            let t0 = BASE_EPOCH + 3600 * k as i64 + rng.random_range(0..600);
            let step = speed * SAMPLE_INTERVAL_S as f64;
            let mut points = Vec::with_capacity(points_per_traj);
            for i in 0..points_per_traj {
                let (lon, lat) = proj.to_lonlat(x, y);
                points.push(SpatioTemporalPoint::new(
                    lon.clamp(bbox.lon_min, bbox.lon_max),
                    lat.clamp(bbox.lat_min, bbox.lat_max),
                    t0 + SAMPLE_INTERVAL_S * i as i64,
                ));
                turn_rate = 0.7 * turn_rate + rng.random_range(-0.12..0.12);
                heading += turn_rate;
                let mut nx = x + step * heading.cos();
                let mut ny = y + step * heading.sin();
                if nx < margin || nx > width - margin {
                    heading = std::f64::consts::PI - heading;
                    nx = x + step * heading.cos();
                }
                if ny < margin || ny > height - margin {
                    heading = -heading;
                    ny = y + step * heading.sin();
                }
                x = nx.clamp(0.0, width);
                y = ny.clamp(0.0, height);
            }
            SynthTrajectory {
                traj: Trajectory {
                    traj_id: format!("t{k:05}"),
                    user_id: format!("u{user_index:03}"),
                    points,
                },
                meta: SynthMeta { user_index, nominal_speed: speed },
            }
        })
        .collect()
}
