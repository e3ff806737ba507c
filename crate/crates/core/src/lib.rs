//! Bus fleet greenhouse-gas estimation from low-resolution GPS records.
//!
//! Straight-line distances between consecutive pings are corrected by a
//! fleet-wide sinuosity factor estimated from a small sample of shortest-path
//! reconstructions, then converted to fuel through a speed-band curve and to
//! CO2e through a dated fuel table. Missing transmission is bounded per day and
//! the results roll up into spatial, temporal and per-line products.
//!
//! Numeric kernels are generic over [`Scalar`] (`f32` or `f64`); the pipeline
//! itself runs in `f64` through the aliases below.

pub mod aggregate;
pub mod analytics;
pub mod calendar;
pub mod config;
pub mod emissions;
pub mod error;
pub mod gapfill;
pub mod geo;
pub mod ingest;
pub mod pairing;
pub mod pipeline;
pub mod scalar;
pub mod sinuosity;
pub mod synthgen;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type GeoPoint = geo::LatLon<f64>;
pub type BoundingBox = geo::Bounds<f64>;
pub type ConsumptionCurve = emissions::SpeedCurve<f64>;
pub type FuelSpec = emissions::Fuel<f64>;
pub type FuelTableF64 = emissions::FuelTable<f64>;

pub type GeoPoint32 = geo::LatLon<f32>;
pub type BoundingBox32 = geo::Bounds<f32>;
pub type ConsumptionCurve32 = emissions::SpeedCurve<f32>;
pub type FuelTable32 = emissions::FuelTable<f32>;
