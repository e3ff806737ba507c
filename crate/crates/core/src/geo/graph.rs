use std::cmp::{Ordering, Reverse};
use std::collections::{BinaryHeap, HashMap};
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::point::{haversine_distance, LatLon};
use crate::error::{Error, Result};
use crate::GeoPoint;

pub type NodeId = u64;

/// Edge lengths may undercut the great-circle distance of their endpoints by
/// at most this factor before the graph is rejected.
const MIN_LENGTH_RATIO: f64 = 0.99;

/// Side of a spatial-index bucket in degrees (roughly 550 m of latitude).
const BUCKET_DEG: f64 = 0.005;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub a: NodeId,
    pub b: NodeId,
    pub length_m: f64,
    /// When set, the edge can only be traversed from `a` to `b`.
    pub oneway: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PathResult {
    pub origin: NodeId,
    pub destination: NodeId,
    /// Meters. Zero when unreachable.
    pub distance: f64,
    pub reachable: bool,
}

/// Immutable street network with a bucketed spatial index over its nodes.
#[derive(Debug, Clone)]
pub struct StreetGraph {
    ids: Vec<NodeId>,
    index_of: HashMap<NodeId, usize>,
    points: Vec<GeoPoint>,
    edges: Vec<Edge>,
    arcs: Vec<Vec<(usize, f64)>>,
    buckets: HashMap<(i64, i64), Vec<usize>>,
}

#[derive(Deserialize)]
struct NodeRow {
    node_id: NodeId,
    lat: f64,
    lon: f64,
}

#[derive(Deserialize)]
struct EdgeRow {
    node_a: NodeId,
    node_b: NodeId,
    length_m: f64,
    oneway: u8,
}

fn bucket_of(p: GeoPoint) -> (i64, i64) {
    (
        (p.lat / BUCKET_DEG).floor() as i64,
        (p.lon / BUCKET_DEG).floor() as i64,
    )
}

impl StreetGraph {
    pub fn new(nodes: Vec<(NodeId, GeoPoint)>, edges: Vec<Edge>) -> Result<Self> {
        let mut ids = Vec::with_capacity(nodes.len());
        let mut points = Vec::with_capacity(nodes.len());
        let mut index_of = HashMap::with_capacity(nodes.len());
        for (id, p) in nodes {
            if !p.is_valid() {
                return Err(Error::data("graph nodes", format!("node {id} has invalid coordinates")));
            }
            if index_of.insert(id, ids.len()).is_some() {
                return Err(Error::data("graph nodes", format!("duplicate node id {id}")));
            }
            ids.push(id);
            points.push(p);
        }

        let mut arcs = vec![Vec::new(); ids.len()];
        for e in &edges {
            let ia = *index_of
                .get(&e.a)
                .ok_or_else(|| Error::data("graph edges", format!("edge endpoint {} is not a node", e.a)))?;
            let ib = *index_of
                .get(&e.b)
                .ok_or_else(|| Error::data("graph edges", format!("edge endpoint {} is not a node", e.b)))?;
            if !(e.length_m.is_finite() && e.length_m > 0.0) {
                return Err(Error::data(
                    "graph edges",
                    format!("edge {}-{} has non-positive length {}", e.a, e.b, e.length_m),
                ));
            }
            let crow = haversine_distance(points[ia], points[ib]);
            if e.length_m < MIN_LENGTH_RATIO * crow {
                return Err(Error::data(
                    "graph edges",
                    format!(
                        "edge {}-{} length {} m is shorter than its endpoints' great-circle distance {crow:.3} m",
                        e.a, e.b, e.length_m
                    ),
                ));
            }
            arcs[ia].push((ib, e.length_m));
            if !e.oneway {
                arcs[ib].push((ia, e.length_m));
            }
        }

        let mut buckets: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
        for (i, p) in points.iter().enumerate() {
            buckets.entry(bucket_of(*p)).or_default().push(i);
        }

        Ok(StreetGraph {
            ids,
            index_of,
            points,
            edges,
            arcs,
            buckets,
        })
    }

    /// Loads `nodes.csv` (node_id, lat, lon) and `edges.csv`
    /// (node_a, node_b, length_m, oneway), both with headers.
    pub fn from_csv_files(nodes: &Path, edges: &Path) -> Result<Self> {
        let nf = std::fs::File::open(nodes).map_err(|e| Error::io(nodes, e))?;
        let ef = std::fs::File::open(edges).map_err(|e| Error::io(edges, e))?;
        Self::from_csv_readers(nf, ef)
    }

    pub fn from_csv_readers(nodes: impl Read, edges: impl Read) -> Result<Self> {
        let mut node_list = Vec::new();
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(nodes);
        for row in rdr.deserialize::<NodeRow>() {
            let row = row.map_err(|e| Error::data("nodes.csv", e.to_string()))?;
            node_list.push((row.node_id, LatLon::new(row.lat, row.lon)));
        }
        let mut edge_list = Vec::new();
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(edges);
        for row in rdr.deserialize::<EdgeRow>() {
            let row = row.map_err(|e| Error::data("edges.csv", e.to_string()))?;
            if row.oneway > 1 {
                return Err(Error::data("edges.csv", format!("oneway must be 0 or 1, got {}", row.oneway)));
            }
            edge_list.push(Edge {
                a: row.node_a,
                b: row.node_b,
                length_m: row.length_m,
                oneway: row.oneway == 1,
            });
        }
        Self::new(node_list, edge_list)
    }

    /// Writes the two files read by [`StreetGraph::from_csv_readers`].
    pub fn write_csv(&self, nodes: impl Write, edges: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(nodes);
        w.write_record(["node_id", "lat", "lon"])?;
        for (id, p) in self.ids.iter().zip(&self.points) {
            w.write_record([id.to_string(), p.lat.to_string(), p.lon.to_string()])?;
        }
        w.flush().map_err(|e| Error::data("nodes.csv", e.to_string()))?;
        let mut w = csv::Writer::from_writer(edges);
        w.write_record(["node_a", "node_b", "length_m", "oneway"])?;
        for e in &self.edges {
            w.write_record([e.a.to_string(), e.b.to_string(), e.length_m.to_string(), u8::from(e.oneway).to_string()])?;
        }
        w.flush().map_err(|e| Error::data("edges.csv", e.to_string()))?;
        Ok(())
    }

    /// Loads a GeoJSON FeatureCollection of LineStrings. Each feature becomes
    /// one edge between its first and last coordinate; the length is the sum
    /// of haversine distances over consecutive coordinates. Endpoints with
    /// bit-identical coordinates share a node; node ids are assigned from 0 in
    /// order of first appearance. A truthy `oneway` property marks the edge
    /// one-directional.
    pub fn from_geojson(text: &str) -> Result<Self> {
        let doc: serde_json::Value = serde_json::from_str(text)?;
        let features = doc
            .get("features")
            .and_then(|f| f.as_array())
            .ok_or_else(|| Error::data("geojson", "expected a FeatureCollection"))?;

        let mut node_ids: HashMap<(u64, u64), NodeId> = HashMap::new();
        let mut nodes = Vec::new();
        let mut edges = Vec::new();
        let mut node_for = |p: GeoPoint| -> NodeId {
            let key = (p.lat.to_bits(), p.lon.to_bits());
            *node_ids.entry(key).or_insert_with(|| {
                let id = nodes.len() as NodeId;
                nodes.push((id, p));
                id
            })
        };

        for (fi, feature) in features.iter().enumerate() {
            let geometry = feature
                .get("geometry")
                .ok_or_else(|| Error::data("geojson", format!("feature {fi} has no geometry")))?;
            if geometry.get("type").and_then(|t| t.as_str()) != Some("LineString") {
                return Err(Error::data("geojson", format!("feature {fi} is not a LineString")));
            }
            let coords = geometry
                .get("coordinates")
                .and_then(|c| c.as_array())
                .ok_or_else(|| Error::data("geojson", format!("feature {fi} has no coordinates")))?;
            let mut pts = Vec::with_capacity(coords.len());
            for c in coords {
                let pair = c.as_array().filter(|a| a.len() >= 2);
                let (lon, lat) = match pair.map(|a| (a[0].as_f64(), a[1].as_f64())) {
                    Some((Some(lon), Some(lat))) => (lon, lat),
                    _ => return Err(Error::data("geojson", format!("feature {fi} has a malformed coordinate"))),
                };
                pts.push(LatLon::new(lat, lon));
            }
            if pts.len() < 2 {
                return Err(Error::data("geojson", format!("feature {fi} needs at least two coordinates")));
            }
            let length_m: f64 = pts.windows(2).map(|w| haversine_distance(w[0], w[1])).sum();
            let oneway = feature
                .get("properties")
                .and_then(|p| p.get("oneway"))
                .map(|v| v.as_bool().unwrap_or(false) || v.as_i64() == Some(1))
                .unwrap_or(false);
            let a = node_for(pts[0]);
            let b = node_for(*pts.last().unwrap());
            edges.push(Edge { a, b, length_m, oneway });
        }
        Self::new(nodes, edges)
    }

    pub fn node_count(&self) -> usize {
        self.ids.len()
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn node_ids(&self) -> &[NodeId] {
        &self.ids
    }

    pub fn position(&self, id: NodeId) -> Option<GeoPoint> {
        self.index_of.get(&id).map(|&i| self.points[i])
    }

    /// Nearest node to `p` within `max_radius` meters, ties broken by the
    /// smallest node id.
    pub fn snap_to_node(&self, p: GeoPoint, max_radius: f64) -> Option<NodeId> {
        if self.ids.is_empty() || !p.is_valid() {
            return None;
        }
        let dlat = (max_radius / super::EARTH_RADIUS_M).to_degrees() * 1.01;
        let worst_lat = (p.lat.abs() + dlat).min(89.9).to_radians();
        let dlon = dlat / worst_lat.cos();

        let lo = bucket_of(LatLon::new(p.lat - dlat, p.lon - dlon));
        let hi = bucket_of(LatLon::new(p.lat + dlat, p.lon + dlon));
        let cells = (hi.0 - lo.0 + 1).saturating_mul(hi.1 - lo.1 + 1);

        let mut best: Option<(f64, NodeId)> = None;
        let mut consider = |i: usize| {
            let d = haversine_distance(p, self.points[i]);
            let cand = (d, self.ids[i]);
            let better = match best {
                None => true,
                Some(b) => match cand.0.total_cmp(&b.0) {
                    Ordering::Less => true,
                    Ordering::Equal => cand.1 < b.1,
                    Ordering::Greater => false,
                },
            };
            if better {
                best = Some(cand);
            }
        };

        if cells as usize > self.buckets.len() {
            (0..self.points.len()).for_each(&mut consider);
        } else {
            for r in lo.0..=hi.0 {
                for c in lo.1..=hi.1 {
                    if let Some(members) = self.buckets.get(&(r, c)) {
                        members.iter().copied().for_each(&mut consider);
                    }
                }
            }
        }
        best.filter(|(d, _)| *d <= max_radius).map(|(_, id)| id)
    }

    /// Minimum total edge length from `origin` to `destination`.
    pub fn shortest_path_distance(&self, origin: NodeId, destination: NodeId) -> Result<PathResult> {
        let src = *self.index_of.get(&origin).ok_or(Error::UnknownNode(origin))?;
        let dst = *self.index_of.get(&destination).ok_or(Error::UnknownNode(destination))?;
        let unreachable = PathResult {
            origin,
            destination,
            distance: 0.0,
            reachable: false,
        };
        if src == dst {
            return Ok(PathResult {
                reachable: true,
                ..unreachable
            });
        }

        let mut dist = vec![f64::INFINITY; self.ids.len()];
        let mut heap = BinaryHeap::new();
        dist[src] = 0.0;
        heap.push(Reverse(Frontier(0.0, src)));
        while let Some(Reverse(Frontier(d, u))) = heap.pop() {
            if u == dst {
                return Ok(PathResult {
                    distance: d,
                    reachable: true,
                    ..unreachable
                });
            }
            if d > dist[u] {
                continue;
            }
            for &(v, w) in &self.arcs[u] {
                let nd = d + w;
                if nd < dist[v] {
                    dist[v] = nd;
                    heap.push(Reverse(Frontier(nd, v)));
                }
            }
        }
        Ok(unreachable)
    }
}

/// Heap entry ordered by distance, then dense node index.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Frontier(f64, usize);

impl Eq for Frontier {}

impl PartialOrd for Frontier {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Frontier {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0).then(self.1.cmp(&other.1))
    }
}
