use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Mean Earth radius used for every great-circle computation, in meters.
pub const EARTH_RADIUS_M: f64 = 6_371_000.0;

/// A position in decimal degrees.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LatLon<T> {
    pub lat: T,
    pub lon: T,
}

impl<T: Scalar> LatLon<T> {
    pub fn new(lat: T, lon: T) -> Self {
        LatLon { lat, lon }
    }

    /// Builds a point, rejecting coordinates outside [-90, 90] x [-180, 180]
    /// or non-finite values.
    pub fn checked(lat: T, lon: T) -> Result<Self> {
        let p = LatLon { lat, lon };
        if p.is_valid() {
            Ok(p)
        } else {
            Err(Error::data(
                "coordinates",
                format!("({lat}, {lon}) is not a valid latitude/longitude"),
            ))
        }
    }

    pub fn is_valid(&self) -> bool {
        self.lat.is_finite()
            && self.lon.is_finite()
            && self.lat.abs() <= T::lit(90.0)
            && self.lon.abs() <= T::lit(180.0)
    }
}

/// Great-circle distance in meters (haversine, R = 6,371,000 m).
pub fn haversine_distance<T: Scalar>(a: LatLon<T>, b: LatLon<T>) -> T {
    if a == b {
        return T::zero();
    }
    let rad = T::lit(std::f64::consts::PI / 180.0);
    let half = T::lit(0.5);
    let phi1 = a.lat * rad;
    let phi2 = b.lat * rad;
    let dphi = (b.lat - a.lat) * rad;
    let dlambda = (b.lon - a.lon) * rad;

    let s_phi = (dphi * half).sin();
    let s_lambda = (dlambda * half).sin();
    let h = s_phi * s_phi + phi1.cos() * phi2.cos() * s_lambda * s_lambda;
    // Rounding can push h a hair above 1 for antipodal points.
    let h = h.min(T::one()).max(T::zero());
    T::lit(2.0 * EARTH_RADIUS_M) * h.sqrt().asin()
}

/// Axis-aligned latitude/longitude box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds<T> {
    pub min_lat: T,
    pub max_lat: T,
    pub min_lon: T,
    pub max_lon: T,
}

impl<T: Scalar> Bounds<T> {
    pub fn new(min_lat: T, max_lat: T, min_lon: T, max_lon: T) -> Result<Self> {
        let b = Bounds {
            min_lat,
            max_lat,
            min_lon,
            max_lon,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let ninety = T::lit(90.0);
        let one_eighty = T::lit(180.0);
        let finite = [self.min_lat, self.max_lat, self.min_lon, self.max_lon]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::config("bounding box has non-finite values"));
        }
        if !(self.min_lat < self.max_lat && self.min_lon < self.max_lon) {
            return Err(Error::config(format!(
                "bounding box needs min < max on both axes (lat {}..{}, lon {}..{})",
                self.min_lat, self.max_lat, self.min_lon, self.max_lon
            )));
        }
        if self.min_lat < -ninety
            || self.max_lat > ninety
            || self.min_lon < -one_eighty
            || self.max_lon > one_eighty
        {
            return Err(Error::config("bounding box exceeds the valid coordinate range"));
        }
        Ok(())
    }

    /// Inclusive containment test.
    pub fn contains(&self, p: LatLon<T>) -> bool {
        p.lat >= self.min_lat && p.lat <= self.max_lat && p.lon >= self.min_lon && p.lon <= self.max_lon
    }
}
