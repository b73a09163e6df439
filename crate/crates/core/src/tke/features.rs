use crate::tpa::Normalization;
use crate::traj::{synchronized_distance, LocalProjection, SpatioTemporalPoint};

pub const POINT_FEATURES: usize = 20;
const DWELL_RADIUS_M: f64 = 50.0;
const WINDOW: usize = 4;

/// One point seen through its owner's local sequence.
#[derive(Debug, Clone, Copy)]
pub struct PointView<'a> {
    pub points: &'a [SpatioTemporalPoint],
    pub index: usize,
    /// Whether the point's context reaches another client's region.
    pub cross: bool,
    /// Server-supplied context estimate for this point, when available.
    pub context: Option<SpatioTemporalPoint>,
    pub norm: &'a Normalization,
}

fn lg(metres: f64) -> f64 {
    (metres / 10.0).ln_1p()
}

/// Local kinematic and geometric descriptors of one point.
pub fn point_features(v: &PointView<'_>) -> [f64; POINT_FEATURES] {
    let pts = v.points;
    let i = v.index;
    let p = &pts[i];
    let n = pts.len();
    let proj = LocalProjection::new(p.lon, p.lat, p.lat);
    let dist = |a: &SpatioTemporalPoint, b: &SpatioTemporalPoint| proj.distance(a, b);
    let mut f = [0.0; POINT_FEATURES];

    let prev = i.checked_sub(1).map(|j| &pts[j]);
    let next = pts.get(i + 1);
    f[0] = f64::from(u8::from(prev.is_some()));
    f[1] = f64::from(u8::from(next.is_some()));
    f[2] = f64::from(u8::from(v.cross));
    f[3] = f64::from(u8::from(v.context.is_some()));
    if let Some(a) = prev {
        let d = dist(a, p);
        let dt = (p.t - a.t).max(1) as f64;
        f[4] = lg(d);
        f[7] = dt / 60.0;
        f[9] = (d / dt).ln_1p();
    }
    if let Some(b) = next {
        let d = dist(p, b);
        let dt = (b.t - p.t).max(1) as f64;
        f[5] = lg(d);
        f[8] = dt / 60.0;
        f[10] = (d / dt).ln_1p();
    }
    if let (Some(a), Some(b)) = (prev, next) {
        f[6] = lg(dist(a, b));
    }
    for (k, s) in [1usize, 2, 4].into_iter().enumerate() {
        if i >= s && i + s < n {
            f[11 + k] = lg(synchronized_distance(&proj, p, &pts[i - s], &pts[i + s]));
        }
    }
    let lo = i.saturating_sub(WINDOW);
    let hi = (i + WINDOW).min(n - 1);
    f[14] = lg(pts[lo..=hi].iter().map(|q| dist(p, q)).fold(0.0, f64::max));

    let (mut l, mut r) = (i, i);
    while l > 0 && dist(p, &pts[l - 1]) <= DWELL_RADIUS_M {
        l -= 1;
    }
    while r + 1 < n && dist(p, &pts[r + 1]) <= DWELL_RADIUS_M {
        r += 1;
    }
    f[15] = ((pts[r].t - pts[l].t) as f64 / 300.0).min(4.0);

    if let Some(c) = v.context {
        f[16] = lg(dist(p, &c));
    }
    let b = &v.norm.bbox;
    f[17] = (p.lon - b.lon_min) / (b.lon_max - b.lon_min);
    f[18] = (p.lat - b.lat_min) / (b.lat_max - b.lat_min);
    f[19] = if n > 1 { i as f64 / (n - 1) as f64 } else { 0.0 };
    f
}

/// Elementwise mean of point blocks (zeros for an empty set).
pub fn pooled_features(blocks: &[[f64; POINT_FEATURES]]) -> [f64; POINT_FEATURES] {
    let mut out = [0.0; POINT_FEATURES];
    if blocks.is_empty() {
        return out;
    }
    for b in blocks {
        for (o, v) in out.iter_mut().zip(b) {
            *o += v;
        }
    }
    let n = blocks.len() as f64;
    out.iter_mut().for_each(|o| *o /= n);
    out
}
