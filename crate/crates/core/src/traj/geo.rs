use super::SpatioTemporalPoint;

pub const EARTH_RADIUS_M: f64 = 6_371_008.8;

/// Equirectangular approximation around a reference point, scaled by the
/// cosine of a reference latitude. Accurate to well under a percent at city
/// scale.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalProjection {
    pub lon0: f64,
    pub lat0: f64,
    pub cos_lat: f64,
}

impl LocalProjection {
    pub fn new(lon0: f64, lat0: f64, ref_lat: f64) -> Self {
        Self { lon0, lat0, cos_lat: ref_lat.to_radians().cos() }
    }

    /// Anchored at the first point, scaled by the mean latitude.
    pub fn for_points(points: &[SpatioTemporalPoint]) -> Self {
        match points.first() {
            None => Self::new(0.0, 0.0, 0.0),
            Some(first) => {
                let mean_lat = points.iter().map(|p| p.lat).sum::<f64>() / points.len() as f64;
                Self::new(first.lon, first.lat, mean_lat)
            }
        }
    }

    pub fn to_xy(&self, lon: f64, lat: f64) -> (f64, f64) {
        let k = EARTH_RADIUS_M * std::f64::consts::PI / 180.0;
        ((lon - self.lon0) * k * self.cos_lat, (lat - self.lat0) * k)
    }

    pub fn point_xy(&self, p: &SpatioTemporalPoint) -> (f64, f64) {
        self.to_xy(p.lon, p.lat)
    }

    pub fn to_lonlat(&self, x: f64, y: f64) -> (f64, f64) {
        let k = EARTH_RADIUS_M * std::f64::consts::PI / 180.0;
        (self.lon0 + x / (k * self.cos_lat), self.lat0 + y / k)
    }

    pub fn distance(&self, a: &SpatioTemporalPoint, b: &SpatioTemporalPoint) -> f64 {
        let (ax, ay) = self.point_xy(a);
        let (bx, by) = self.point_xy(b);
        (ax - bx).hypot(ay - by)
    }
}

/// Position on segment a→b at time t, linear in time. Clamps outside [a.t, b.t].
pub(crate) fn lerp_at(a: &SpatioTemporalPoint, b: &SpatioTemporalPoint, t: i64) -> (f64, f64) {
    if b.t == a.t {
        return (a.lon, a.lat);
    }
    let f = ((t - a.t) as f64 / (b.t - a.t) as f64).clamp(0.0, 1.0);
    (a.lon + f * (b.lon - a.lon), a.lat + f * (b.lat - a.lat))
}

/// Distance from `p` to the position synchronised in time on segment a→b.
pub(crate) fn synchronized_distance(
    proj: &LocalProjection,
    p: &SpatioTemporalPoint,
    a: &SpatioTemporalPoint,
    b: &SpatioTemporalPoint,
) -> f64 {
    let (lon, lat) = lerp_at(a, b, p.t);
    let (px, py) = proj.point_xy(p);
    let (qx, qy) = proj.to_xy(lon, lat);
    (px - qx).hypot(py - qy)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_degree_of_latitude() {
        let proj = LocalProjection::new(0.0, 0.0, 0.0);
        let (_, y) = proj.to_xy(0.0, 1.0);
        assert!((y - 111_195.08).abs() < 1.0);
    }

    #[test]
    fn round_trip_xy() {
        let proj = LocalProjection::new(116.3, 39.9, 39.95);
        let (x, y) = proj.to_xy(116.41, 39.97);
        let (lon, lat) = proj.to_lonlat(x, y);
        assert!((lon - 116.41).abs() < 1e-12 && (lat - 39.97).abs() < 1e-12);
    }

    #[test]
    fn lerp_midpoint() {
        let a = SpatioTemporalPoint::new(0.0, 0.0, 0);
        let b = SpatioTemporalPoint::new(2.0, 2.0, 10);
        assert_eq!(lerp_at(&a, &b, 5), (1.0, 1.0));
    }
}
