//! Great-circle distance on a spherical Earth.

use serde::{Deserialize, Serialize};

pub const EARTH_RADIUS_METERS: f64 = 6_371_000.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    pub latitude: f64,
    pub longitude: f64,
}

impl GeoPoint {
    pub fn new(latitude: f64, longitude: f64) -> Self {
        Self {
            latitude,
            longitude,
        }
    }

    pub fn is_valid(&self) -> bool {
        (-90.0..=90.0).contains(&self.latitude) && (-180.0..=180.0).contains(&self.longitude)
    }
}

/// Haversine distance in meters.
///
/// The two endpoint terms are combined symmetrically so `d(a, b) == d(b, a)`
/// holds bit-for-bit.
pub fn haversine_distance(a: GeoPoint, b: GeoPoint) -> f64 {
    let (p1, p2) = (a.latitude.to_radians(), b.latitude.to_radians());
    let dphi = p2 - p1;
    let dlambda = (b.longitude - a.longitude).to_radians();
    let s1 = (dphi / 2.0).sin();
    let s2 = (dlambda / 2.0).sin();
    let h = s1 * s1 + p1.cos() * p2.cos() * s2 * s2;
    2.0 * EARTH_RADIUS_METERS * h.clamp(0.0, 1.0).sqrt().asin()
}

/// A lower bound on the distance between points at the two latitudes.
pub fn latitude_bound(lat_a: f64, lat_b: f64) -> f64 {
    EARTH_RADIUS_METERS * (lat_a - lat_b).to_radians().abs()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b
    }

    #[test]
    fn fixtures() {
        let o = GeoPoint::new(0.0, 0.0);
        assert_eq!(haversine_distance(o, o), 0.0);
        let one_degree = 2.0 * std::f64::consts::PI * EARTH_RADIUS_METERS / 360.0;
        assert!(rel(haversine_distance(o, GeoPoint::new(0.0, 1.0)), one_degree) < 1e-9);
        assert!(rel(haversine_distance(o, GeoPoint::new(0.0, 1.0)), 111_195.0) < 1e-3);
        let antipode = haversine_distance(o, GeoPoint::new(0.0, 180.0));
        assert!(rel(antipode, std::f64::consts::PI * EARTH_RADIUS_METERS) < 1e-9);
        assert!(rel(antipode, 20_015_087.0) < 1e-3);
    }

    fn point() -> impl Strategy<Value = GeoPoint> {
        (-90.0f64..=90.0, -180.0f64..=180.0).prop_map(|(a, b)| GeoPoint::new(a, b))
    }

    proptest! {
        #[test]
        fn symmetric_and_non_negative(a in point(), b in point()) {
            let d = haversine_distance(a, b);
            prop_assert!(d >= 0.0);
            prop_assert_eq!(d, haversine_distance(b, a));
        }

        #[test]
        fn triangle_inequality(a in point(), b in point(), c in point()) {
            let ab = haversine_distance(a, b);
            let bc = haversine_distance(b, c);
            let ac = haversine_distance(a, c);
            prop_assert!(ac <= (ab + bc) * (1.0 + 1e-6) + 1e-6);
        }

        #[test]
        fn latitude_bound_is_a_lower_bound(a in point(), b in point()) {
            prop_assert!(latitude_bound(a.latitude, b.latitude) <= haversine_distance(a, b) * (1.0 + 1e-12) + 1e-9);
        }
    }
}
