//! Geodesic geometry on a spherical Earth: Haversine distances, per-anchor
//! distance ranks and the proximity mask.

use std::f64::consts::{FRAC_PI_2, PI};

use thiserror::Error;

use crate::softrank::{hard_rank, Direction};

/// Mean Earth radius in kilometers.
pub const EARTH_RADIUS_KM: f64 = 6371.0088;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeoError {
    #[error("coordinate out of range or non-finite: lon={lon}, lat={lat}")]
    InvalidCoordinate { lon: f64, lat: f64 },
    #[error("need at least 2 coordinates, got {0}")]
    TooFew(usize),
    #[error("d_max must be positive and finite, got {0}")]
    InvalidDmax(f64),
    #[error("radius must be positive and finite, got {0}")]
    InvalidRadius(f64),
    #[error("anchor {anchor} out of range for batch of {k}")]
    Anchor { anchor: usize, k: usize },
}

/// Longitude/latitude pair in radians.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeoCoordinate {
    lon: f64,
    lat: f64,
}

impl GeoCoordinate {
    pub fn new(lon: f64, lat: f64) -> Result<Self, GeoError> {
        let ok = lon.is_finite()
            && lat.is_finite()
            && (-PI..=PI).contains(&lon)
            && (-FRAC_PI_2..=FRAC_PI_2).contains(&lat);
        if ok {
            Ok(Self { lon, lat })
        } else {
            Err(GeoError::InvalidCoordinate { lon, lat })
        }
    }

    pub fn from_degrees(lon: f64, lat: f64) -> Result<Self, GeoError> {
        Self::new(lon.to_radians(), lat.to_radians())
    }

    pub fn lon(&self) -> f64 {
        self.lon
    }

    pub fn lat(&self) -> f64 {
        self.lat
    }

    /// Position on the unit sphere.
    pub fn unit_vector(&self) -> [f64; 3] {
        let (sl, cl) = self.lat.sin_cos();
        let (so, co) = self.lon.sin_cos();
        [cl * co, cl * so, sl]
    }
}

/// Great-circle distance in kilometers on the mean-radius sphere.
pub fn haversine(a: GeoCoordinate, b: GeoCoordinate) -> f64 {
    haversine_with_radius(a, b, EARTH_RADIUS_KM)
}

/// Great-circle distance on a sphere of the given radius.
///
/// The haversine `h` and its complement `1 - h` are both evaluated as sums
/// of squares, so the result stays accurate near coincident and antipodal
/// points alike. Symmetric bit-for-bit: every term is an even function of
/// the coordinate differences or a commutative sum or product.
pub fn haversine_with_radius(a: GeoCoordinate, b: GeoCoordinate, radius: f64) -> f64 {
    let (s_dlat, c_dlat) = ((b.lat - a.lat) * 0.5).sin_cos();
    let (s_dlon, c_dlon) = ((b.lon - a.lon) * 0.5).sin_cos();
    let s_mid = ((a.lat + b.lat) * 0.5).sin();
    let h = s_dlat * s_dlat + a.lat.cos() * b.lat.cos() * s_dlon * s_dlon;
    let rest = c_dlat * c_dlat * c_dlon * c_dlon + s_mid * s_mid * s_dlon * s_dlon;
    2.0 * radius * h.sqrt().atan2(rest.sqrt())
}

/// Pairwise distances and the inclusive `d <= d_max` mask for one batch.
#[derive(Debug, Clone)]
pub struct GeoBatch {
    coords: Vec<GeoCoordinate>,
    dist: Vec<f64>,
    mask: Vec<bool>,
    d_max: f64,
    radius: f64,
}

pub fn pairwise_geo(coords: &[GeoCoordinate], d_max: f64) -> Result<GeoBatch, GeoError> {
    pairwise_geo_with_radius(coords, d_max, EARTH_RADIUS_KM)
}

pub fn pairwise_geo_with_radius(
    coords: &[GeoCoordinate],
    d_max: f64,
    radius: f64,
) -> Result<GeoBatch, GeoError> {
    let k = coords.len();
    if k < 2 {
        return Err(GeoError::TooFew(k));
    }
    if !(d_max > 0.0 && d_max.is_finite()) {
        return Err(GeoError::InvalidDmax(d_max));
    }
    if !(radius > 0.0 && radius.is_finite()) {
        return Err(GeoError::InvalidRadius(radius));
    }
    let mut dist = vec![0.0; k * k];
    for i in 0..k {
        for j in i + 1..k {
            let d = haversine_with_radius(coords[i], coords[j], radius);
            dist[i * k + j] = d;
            dist[j * k + i] = d;
        }
    }
    let mask = dist.iter().map(|&d| d <= d_max).collect();
    Ok(GeoBatch {
        coords: coords.to_vec(),
        dist,
        mask,
        d_max,
        radius,
    })
}

impl GeoBatch {
    /// Builds a batch from a precomputed symmetric distance matrix. Used to
    /// study rank-only consumers under transformed distances.
    pub fn from_distances(
        coords: Vec<GeoCoordinate>,
        dist: Vec<f64>,
        d_max: f64,
        radius: f64,
    ) -> Result<Self, GeoError> {
        let k = coords.len();
        if k < 2 {
            return Err(GeoError::TooFew(k));
        }
        assert_eq!(dist.len(), k * k, "distance matrix must be K x K");
        let mask = dist.iter().map(|&d| d <= d_max).collect();
        Ok(Self {
            coords,
            dist,
            mask,
            d_max,
            radius,
        })
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn coords(&self) -> &[GeoCoordinate] {
        &self.coords
    }

    pub fn d_max(&self) -> f64 {
        self.d_max
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    /// Row-major `K x K` distances in kilometers.
    pub fn distances(&self) -> &[f64] {
        &self.dist
    }

    pub fn dist(&self, i: usize, j: usize) -> f64 {
        self.dist[i * self.len() + j]
    }

    pub fn within(&self, i: usize, j: usize) -> bool {
        self.mask[i * self.len() + j]
    }

    /// Distances from `anchor` to every other sample, in ascending index order.
    pub fn neighbor_distances(&self, anchor: usize) -> Vec<f64> {
        let k = self.len();
        (0..k)
            .filter(|&j| j != anchor)
            .map(|j| self.dist[anchor * k + j])
            .collect()
    }

    pub fn neighbor_mask(&self, anchor: usize) -> Vec<bool> {
        let k = self.len();
        (0..k)
            .filter(|&j| j != anchor)
            .map(|j| self.mask[anchor * k + j])
            .collect()
    }
}

/// 1-based ascending ranks of the anchor's `K-1` neighbor distances (closest
/// gets 1, ties broken by ascending neighbor index).
pub fn geo_rank(anchor: usize, batch: &GeoBatch) -> Result<Vec<usize>, GeoError> {
    if anchor >= batch.len() {
        return Err(GeoError::Anchor {
            anchor,
            k: batch.len(),
        });
    }
    Ok(hard_rank(
        &batch.neighbor_distances(anchor),
        Direction::Ascending,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn c(lon: f64, lat: f64) -> GeoCoordinate {
        GeoCoordinate::new(lon, lat).unwrap()
    }

    #[test]
    fn reference_distances() {
        assert_eq!(haversine(c(0.0, 0.0), c(0.0, 0.0)), 0.0);
        let anti = haversine(c(0.0, 0.0), c(PI, 0.0));
        assert!((anti - PI * EARTH_RADIUS_KM).abs() < 1e-6);
        let quarter = haversine(c(0.0, 0.0), c(FRAC_PI_2, 0.0));
        assert!((quarter - FRAC_PI_2 * EARTH_RADIUS_KM).abs() < 1e-6);
        // the same figures on a 6371 km sphere
        let r = 6371.0;
        assert!((haversine_with_radius(c(0.0, 0.0), c(PI, 0.0), r) - 20015.087).abs() < 1e-3);
        assert!(
            (haversine_with_radius(c(0.0, 0.0), c(FRAC_PI_2, 0.0), r) - 10007.543).abs() < 1e-3
        );
    }

    #[test]
    fn antipodes_are_accurate() {
        for (lon, lat) in [
            (0.3, 0.7),
            (-2.9, -1.2),
            (1.0, std::f64::consts::FRAC_PI_2 - 1e-4),
            (0.0, 0.0),
        ] {
            let far = c(if lon > 0.0 { lon - PI } else { lon + PI }, -lat);
            assert!((haversine(c(lon, lat), far) - PI * EARTH_RADIUS_KM).abs() < 1e-9);
        }
    }

    #[test]
    fn rejects_invalid_coordinates() {
        assert!(GeoCoordinate::new(4.0, 0.0).is_err());
        assert!(GeoCoordinate::new(0.0, 1.6).is_err());
        assert!(GeoCoordinate::new(f64::NAN, 0.0).is_err());
    }

    /// Point on the equator at a given arc length (km) east of the origin.
    fn east_of_origin(km: f64) -> GeoCoordinate {
        c(km / EARTH_RADIUS_KM, 0.0)
    }

    #[test]
    fn mask_is_inclusive() {
        let coincident = pairwise_geo(&[c(0.1, 0.2), c(0.1, 0.2)], 2500.0).unwrap();
        assert_eq!(coincident.distances(), &[0.0; 4]);
        assert!(coincident.within(0, 1) && coincident.within(1, 0));

        let origin = c(0.0, 0.0);
        let b = east_of_origin(2500.0);
        let d = haversine(origin, b);
        // exact-threshold pair: use the computed distance as d_max
        let at = pairwise_geo(&[origin, b], d).unwrap();
        assert!(at.within(0, 1));
        assert!((d - 2500.0).abs() < 1e-9);

        let far = pairwise_geo(&[origin, east_of_origin(3000.0)], 2500.0).unwrap();
        assert!(!far.within(0, 1));
    }

    #[test]
    fn pairwise_requires_two_points() {
        assert_eq!(
            pairwise_geo(&[c(0.0, 0.0)], 10.0).unwrap_err(),
            GeoError::TooFew(1)
        );
        assert!(pairwise_geo(&[c(0.0, 0.0), c(0.1, 0.0)], 0.0).is_err());
    }

    fn batch_from_anchor_distances(ds: &[f64]) -> GeoBatch {
        let mut coords = vec![c(0.0, 0.0)];
        coords.extend(ds.iter().map(|&d| east_of_origin(d)));
        pairwise_geo(&coords, 1e9).unwrap()
    }

    #[test]
    fn ranks_of_anchor_neighbors() {
        let b = batch_from_anchor_distances(&[10.0, 20.0, 30.0]);
        assert_eq!(geo_rank(0, &b).unwrap(), vec![1, 2, 3]);
        let b = batch_from_anchor_distances(&[30.0, 10.0, 20.0]);
        assert_eq!(geo_rank(0, &b).unwrap(), vec![3, 1, 2]);
        let b = batch_from_anchor_distances(&[5.0, 5.0, 9.0]);
        assert_eq!(geo_rank(0, &b).unwrap(), vec![1, 2, 3]);
        assert!(geo_rank(4, &b).is_err());
    }

    fn arb_coord() -> impl Strategy<Value = GeoCoordinate> {
        (-PI..=PI, -FRAC_PI_2..=FRAC_PI_2).prop_map(|(lon, lat)| c(lon, lat))
    }

    proptest! {
        #[test]
        fn symmetric_and_bounded(a in arb_coord(), b in arb_coord()) {
            let d = haversine(a, b);
            prop_assert_eq!(d, haversine(b, a));
            prop_assert!((0.0..=PI * EARTH_RADIUS_KM + 1e-9).contains(&d));
        }

        #[test]
        fn geo_rank_is_a_permutation(coords in prop::collection::vec(arb_coord(), 2..20), a in 0usize..20) {
            let batch = pairwise_geo(&coords, 2500.0).unwrap();
            let anchor = a % coords.len();
            let mut r = geo_rank(anchor, &batch).unwrap();
            r.sort_unstable();
            prop_assert_eq!(r, (1..coords.len()).collect::<Vec<_>>());
        }

        #[test]
        fn geo_rank_ignores_monotone_transforms(coords in prop::collection::vec(arb_coord(), 3..12)) {
            let batch = pairwise_geo(&coords, 2500.0).unwrap();
            let warped: Vec<f64> = batch.distances().iter().map(|d| (d / 100.0).powi(3) + 7.0).collect();
            let other = GeoBatch::from_distances(coords.clone(), warped, 1e12, EARTH_RADIUS_KM).unwrap();
            for i in 0..coords.len() {
                prop_assert_eq!(geo_rank(i, &batch).unwrap(), geo_rank(i, &other).unwrap());
            }
        }
    }
}
