//! Geospatial primitives: great-circle distance, bounding boxes and the street
//! graph used to reconstruct sampled trips.

mod graph;
mod point;

pub use graph::{Edge, NodeId, PathResult, StreetGraph};
pub use point::{haversine_distance, Bounds, LatLon, EARTH_RADIUS_M};
