//! Synthetic grid cities with known ground truth.
//!
//! Buses drive along routes on a rectangular street grid and are pinged on a
//! fixed clock. Every interval between two pings is one drive-log piece whose
//! true distance is the length travelled along the route; the ledger sums fuel
//! and CO2e over those pieces with the same curve and fuel table the pipeline
//! uses. Records are then dropped per day to emulate transmission loss.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Duration, FixedOffset, NaiveDate, SecondsFormat, TimeZone};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::analytics::{write_reference, ReferenceMonth};
use crate::calendar::YearMonth;
use crate::config::{Inputs, RunConfig};
use crate::emissions::{co2e_emissions, fuel_consumption, Fuel, FuelTable, SpeedBand, SpeedCurve};
use crate::error::{Error, Result};
use crate::geo::{Edge, NodeId, StreetGraph, EARTH_RADIUS_M};
use crate::pairing::segment_speed;
use crate::{BoundingBox, GeoPoint};

const M_PER_DEG: f64 = EARTH_RADIUS_M * std::f64::consts::PI / 180.0;
const DAY_S: i64 = 86_400;
/// Arrival slack for accumulated float error along a route (m).
const ARRIVAL_EPS_M: f64 = 1e-6;

/// `[row, col]` of a grid node; row 0 is the southern edge.
pub type Cell = [usize; 2];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub rows: usize,
    pub cols: usize,
    pub edge_m: f64,
    /// South-west corner.
    pub origin: GeoPoint,
    /// Street blocks that do not exist, as pairs of adjacent nodes.
    #[serde(default)]
    pub missing_edges: Vec<[Cell; 2]>,
}

impl GridSpec {
    pub fn node_id(&self, c: Cell) -> NodeId {
        (c[0] * self.cols + c[1]) as NodeId
    }

    pub fn position(&self, c: Cell) -> GeoPoint {
        let cos = self.origin.lat.to_radians().cos();
        GeoPoint::new(
            self.origin.lat + c[0] as f64 * self.edge_m / M_PER_DEG,
            self.origin.lon + c[1] as f64 * self.edge_m / (M_PER_DEG * cos),
        )
    }

    fn contains(&self, c: Cell) -> bool {
        c[0] < self.rows && c[1] < self.cols
    }

    /// Node and edge lists. Every edge is stored with the nominal block length.
    pub fn build(&self) -> Result<StreetGraph> {
        if self.rows < 2 || self.cols < 2 || !(self.edge_m > 0.0) {
            return Err(Error::config("grid needs at least 2x2 nodes and a positive edge length"));
        }
        let missing: BTreeSet<(NodeId, NodeId)> = self
            .missing_edges
            .iter()
            .map(|[a, b]| {
                let (a, b) = (self.node_id(*a), self.node_id(*b));
                (a.min(b), a.max(b))
            })
            .collect();
        let mut nodes = Vec::with_capacity(self.rows * self.cols);
        let mut edges = Vec::new();
        for r in 0..self.rows {
            for c in 0..self.cols {
                nodes.push((self.node_id([r, c]), self.position([r, c])));
                for n in [[r, c + 1], [r + 1, c]] {
                    if self.contains(n) {
                        let (a, b) = (self.node_id([r, c]), self.node_id(n));
                        if !missing.contains(&(a, b)) {
                            edges.push(Edge { a, b, length_m: self.edge_m, oneway: false });
                        }
                    }
                }
            }
        }
        StreetGraph::new(nodes, edges)
    }

    /// Grid extent widened by `margin_m` on every side.
    pub fn bounds(&self, margin_m: f64) -> Result<BoundingBox> {
        let sw = self.position([0, 0]);
        let ne = self.position([self.rows - 1, self.cols - 1]);
        let cos = self.origin.lat.to_radians().cos();
        let (dlat, dlon) = (margin_m / M_PER_DEG, margin_m / (M_PER_DEG * cos));
        BoundingBox::new(sw.lat - dlat, ne.lat + dlat, sw.lon - dlon, ne.lon + dlon)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum RouteSpec {
    /// Straight axis-aligned legs between consecutive points.
    Waypoints { points: Vec<Cell> },
    /// Alternating column and row steps of `step` blocks from `from` toward
    /// `to`; the longer axis finishes in a straight run.
    Staircase {
        from: Cell,
        to: Cell,
        #[serde(default = "one")]
        step: usize,
    },
}

fn one() -> usize {
    1
}

fn toward(a: usize, b: usize) -> usize {
    if b > a {
        a + 1
    } else {
        a - 1
    }
}

impl RouteSpec {
    /// Node sequence of the route.
    pub fn cells(&self) -> Result<Vec<Cell>> {
        let mut out = Vec::new();
        match self {
            RouteSpec::Waypoints { points } => {
                let first = *points.first().ok_or_else(|| Error::config("route has no points"))?;
                out.push(first);
                for w in points.windows(2) {
                    let (a, b) = (w[0], w[1]);
                    if a[0] != b[0] && a[1] != b[1] {
                        return Err(Error::config(format!("route leg {a:?} -> {b:?} is not axis-aligned")));
                    }
                    let mut cur = a;
                    while cur != b {
                        cur = if cur[0] != b[0] { [toward(cur[0], b[0]), cur[1]] } else { [cur[0], toward(cur[1], b[1])] };
                        out.push(cur);
                    }
                }
            }
            RouteSpec::Staircase { from, to, step } => {
                if *step == 0 {
                    return Err(Error::config("staircase step must be positive"));
                }
                let mut cur = *from;
                out.push(cur);
                let mut along_col = true;
                while cur != *to {
                    let axis = match (cur[0] == to[0], cur[1] == to[1]) {
                        (true, _) => 1,
                        (_, true) => 0,
                        _ if along_col => 1,
                        _ => 0,
                    };
                    for _ in 0..*step {
                        if cur[axis] == to[axis] {
                            break;
                        }
                        cur[axis] = toward(cur[axis], to[axis]);
                        out.push(cur);
                    }
                    along_col = !along_col;
                }
            }
        }
        if out.len() < 2 {
            return Err(Error::config("route must span at least one block"));
        }
        Ok(out)
    }
}

/// Speed inside `[from_hour, to_hour)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpeedWindow {
    pub from_hour: u32,
    pub to_hour: u32,
    pub kmh: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LineSpec {
    pub id: String,
    /// Free-form class carried into lines.csv, e.g. "congested".
    #[serde(default)]
    pub label: String,
    #[serde(default = "one_u32")]
    pub buses: u32,
    /// Start offset between consecutive buses of the line.
    #[serde(default)]
    pub headway_s: u32,
    pub service_start_h: f64,
    pub service_end_h: f64,
    pub speed_kmh: f64,
    #[serde(default)]
    pub speed_windows: Vec<SpeedWindow>,
    pub route: RouteSpec,
    /// Stationary intervals at each terminal.
    #[serde(default = "one_u32")]
    pub dwell_intervals: u32,
    /// Stop after this many terminal arrivals per day.
    #[serde(default)]
    pub max_trips: Option<u32>,
}

fn one_u32() -> u32 {
    1
}

impl LineSpec {
    pub fn speed_at(&self, hour: u32) -> f64 {
        self.speed_windows
            .iter()
            .find(|w| (w.from_hour..w.to_hour).contains(&hour))
            .map_or(self.speed_kmh, |w| w.kmh)
    }

    pub fn vehicle_id(&self, bus: u32) -> String {
        format!("{}-{:02}", self.id, bus)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DegradedDay {
    pub date: NaiveDate,
    pub retention: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DegradationPlan {
    pub days: Vec<DegradedDay>,
    /// Share of the remaining days degraded at random.
    pub fraction: f64,
    /// Retention drawn uniformly from this range for random picks.
    pub retention: [f64; 2],
}

impl Default for DegradationPlan {
    fn default() -> Self {
        DegradationPlan { days: Vec::new(), fraction: 0.0, retention: [0.1, 0.5] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default)]
    pub seed: u64,
    pub start_date: NaiveDate,
    #[serde(default = "one_u32")]
    pub days: u32,
    #[serde(default = "default_offset")]
    pub utc_offset: String,
    #[serde(default = "default_interval")]
    pub sampling_interval_s: u32,
    /// Standard deviation of Gaussian position noise (m).
    #[serde(default)]
    pub jitter_m: f64,
    /// Daily service length is scaled by a factor drawn from `1 ± variation`.
    #[serde(default)]
    pub activity_variation: f64,
    /// Retention range for days that are not degraded.
    #[serde(default = "full_retention")]
    pub good_day_retention: [f64; 2],
    pub grid: GridSpec,
    pub lines: Vec<LineSpec>,
    #[serde(default)]
    pub degradation: DegradationPlan,
    /// Illustrative urban bus curve when absent.
    #[serde(default)]
    pub curve: Option<Vec<SpeedBand<f64>>>,
    /// B6 over the whole period when absent.
    #[serde(default)]
    pub fuels: Option<Vec<Fuel<f64>>>,
}

fn default_offset() -> String {
    "-03:00".into()
}

fn default_interval() -> u32 {
    120
}

fn full_retention() -> [f64; 2] {
    [1.0, 1.0]
}

fn check_retention(name: &str, r: [f64; 2]) -> Result<()> {
    if !(0.0 <= r[0] && r[0] <= r[1] && r[1] <= 1.0) {
        return Err(Error::config(format!("{name} must satisfy 0 <= low <= high <= 1, got {r:?}")));
    }
    Ok(())
}

impl Scenario {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config(format!("scenario: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Internal(e.to_string()))
    }

    pub fn end_date(&self) -> NaiveDate {
        self.start_date + Duration::days(i64::from(self.days.max(1)) - 1)
    }

    pub fn offset(&self) -> Result<FixedOffset> {
        self.utc_offset
            .parse()
            .map_err(|_| Error::config(format!("utc_offset `{}` is not of the form +HH:MM", self.utc_offset)))
    }

    pub fn curve(&self) -> Result<SpeedCurve<f64>> {
        match &self.curve {
            Some(b) => SpeedCurve::new(b.clone()),
            None => Ok(SpeedCurve::illustrative_urban_bus()),
        }
    }

    pub fn fuels(&self) -> Result<FuelTable<f64>> {
        let t = match &self.fuels {
            Some(f) => FuelTable::new(f.clone())?,
            None => FuelTable::new(vec![Fuel::b6(self.start_date, self.end_date())])?,
        };
        t.check_covers(self.start_date, self.end_date())?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if self.days == 0 {
            return Err(Error::config("scenario needs at least one day"));
        }
        if self.sampling_interval_s == 0 {
            return Err(Error::config("sampling_interval_s must be positive"));
        }
        if !(self.jitter_m >= 0.0 && self.jitter_m.is_finite()) {
            return Err(Error::config("jitter_m must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.activity_variation) {
            return Err(Error::config("activity_variation must be in [0, 1)"));
        }
        check_retention("good_day_retention", self.good_day_retention)?;
        check_retention("degradation.retention", self.degradation.retention)?;
        if !(0.0..=1.0).contains(&self.degradation.fraction) {
            return Err(Error::config("degradation.fraction must be in [0, 1]"));
        }
        for d in &self.degradation.days {
            if !(0.0..=1.0).contains(&d.retention) {
                return Err(Error::config(format!("retention for {} must be in [0, 1]", d.date)));
            }
        }
        self.offset()?;
        if self.lines.is_empty() {
            return Err(Error::config("scenario has no lines"));
        }
        let mut ids = BTreeSet::new();
        for l in &self.lines {
            if !ids.insert(&l.id) {
                return Err(Error::config(format!("duplicate line id {}", l.id)));
            }
            if !(0.0 <= l.service_start_h && l.service_start_h < l.service_end_h && l.service_end_h <= 24.0) {
                return Err(Error::config(format!("line {}: service hours must satisfy 0 <= start < end <= 24", l.id)));
            }
            let speeds = std::iter::once(l.speed_kmh).chain(l.speed_windows.iter().map(|w| w.kmh));
            for v in speeds {
                if !(v.is_finite() && v > 0.0) {
                    return Err(Error::config(format!("line {}: speeds must be positive", l.id)));
                }
            }
        }
        Ok(())
    }
}

/// A route laid out on the graph.
#[derive(Debug, Clone)]
struct Track {
    points: Vec<GeoPoint>,
    /// Cumulative distance at each node.
    cum: Vec<f64>,
}

impl Track {
    fn new(grid: &GridSpec, graph: &StreetGraph, line: &LineSpec) -> Result<Self> {
        let cells = line.route.cells()?;
        let mut lengths: BTreeMap<(NodeId, NodeId), f64> = BTreeMap::new();
        for e in graph.edges() {
            lengths.insert((e.a, e.b), e.length_m);
            lengths.insert((e.b, e.a), e.length_m);
        }
        let mut cum = vec![0.0];
        for (i, w) in cells.windows(2).enumerate() {
            if !grid.contains(w[0]) || !grid.contains(w[1]) {
                return Err(Error::config(format!("line {}: route leaves the grid at {:?}", line.id, w[1])));
            }
            let len = lengths.get(&(grid.node_id(w[0]), grid.node_id(w[1]))).ok_or_else(|| {
                Error::config(format!("line {}: disconnected route, no street between {:?} and {:?}", line.id, w[0], w[1]))
            })?;
            cum.push(cum[i] + len);
        }
        Ok(Track { points: cells.iter().map(|c| grid.position(*c)).collect(), cum })
    }

    fn length(&self) -> f64 {
        *self.cum.last().unwrap_or(&0.0)
    }

    fn at(&self, s: f64) -> GeoPoint {
        let s = s.clamp(0.0, self.length());
        let i = self.cum.partition_point(|c| *c <= s).clamp(1, self.cum.len() - 1) - 1;
        let f = (s - self.cum[i]) / (self.cum[i + 1] - self.cum[i]);
        let (a, b) = (self.points[i], self.points[i + 1]);
        GeoPoint::new(a.lat + f * (b.lat - a.lat), a.lon + f * (b.lon - a.lon))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Vehicle {
    pub id: String,
    pub line: String,
    pub label: String,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GpsPing {
    /// Index into [`SyntheticCorpus::vehicles`].
    pub vehicle: u32,
    pub timestamp: DateTime<FixedOffset>,
    pub position: GeoPoint,
    pub speed_kmh: f64,
}

/// Ground-truth movement between two consecutive pings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DrivePiece {
    pub vehicle: u32,
    pub t_start: DateTime<FixedOffset>,
    pub start: GeoPoint,
    pub dist_m: f64,
    pub dt_s: f64,
    pub fuel_l: f64,
    pub co2e_kg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LedgerRow {
    pub vehicle: String,
    pub line: String,
    pub date: NaiveDate,
    pub dist_m: f64,
    pub fuel_l: f64,
    pub co2e_kg: f64,
    pub pings: u64,
    pub pings_kept: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct LedgerTotals {
    pub dist_m: f64,
    pub fuel_l: f64,
    pub co2e_kg: f64,
}

impl LedgerTotals {
    fn add(&mut self, r: &LedgerRow) {
        self.dist_m += r.dist_m;
        self.fuel_l += r.fuel_l;
        self.co2e_kg += r.co2e_kg;
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub graph: StreetGraph,
    pub bounds: BoundingBox,
    pub curve: SpeedCurve<f64>,
    pub fuels: FuelTable<f64>,
    pub vehicles: Vec<Vehicle>,
    /// Pings that survived degradation, by day, vehicle and time.
    pub pings: Vec<GpsPing>,
    /// Every interval driven, before degradation.
    pub drive_log: Vec<DrivePiece>,
    /// Sorted by date then vehicle.
    pub ledger: Vec<LedgerRow>,
    /// Retention applied to each day.
    pub retention: BTreeMap<NaiveDate, f64>,
    pub degraded: BTreeSet<NaiveDate>,
}

impl SyntheticCorpus {
    /// Month rollups, each the plain sum of its ledger days.
    pub fn monthly(&self) -> BTreeMap<YearMonth, LedgerTotals> {
        let mut out: BTreeMap<YearMonth, LedgerTotals> = BTreeMap::new();
        for r in &self.ledger {
            out.entry(YearMonth::of(r.date)).or_default().add(r);
        }
        out
    }

    pub fn total(&self) -> LedgerTotals {
        let mut t = LedgerTotals::default();
        for r in &self.ledger {
            t.add(r);
        }
        t
    }

    /// Ledger months in the shape of a top-down reference file.
    pub fn reference(&self) -> Vec<ReferenceMonth> {
        self.monthly()
            .into_iter()
            .map(|(month, t)| ReferenceMonth {
                month,
                km: t.dist_m / 1000.0,
                diesel_m3: t.fuel_l / 1000.0,
                co2e_t: t.co2e_kg / 1000.0,
            })
            .collect()
    }

    pub fn line_labels(&self) -> BTreeMap<String, String> {
        self.vehicles.iter().map(|v| (v.line.clone(), v.label.clone())).collect()
    }
}

struct DayPlan {
    date: NaiveDate,
    activity: f64,
    retention: f64,
}

fn uniform(rng: &mut ChaCha8Rng, r: [f64; 2]) -> f64 {
    let u: f64 = rng.random();
    r[0] + u * (r[1] - r[0])
}

fn plan_days(sc: &Scenario) -> (Vec<DayPlan>, BTreeSet<NaiveDate>) {
    let mut rng = ChaCha8Rng::seed_from_u64(sc.seed);
    rng.set_stream(1);
    let dates: Vec<NaiveDate> = (0..sc.days).map(|i| sc.start_date + Duration::days(i64::from(i))).collect();
    let explicit: BTreeMap<NaiveDate, f64> = sc.degradation.days.iter().map(|d| (d.date, d.retention)).collect();
    let candidates: Vec<NaiveDate> = dates.iter().copied().filter(|d| !explicit.contains_key(d)).collect();
    let k = ((candidates.len() as f64) * sc.degradation.fraction).round() as usize;
    let picked: BTreeSet<NaiveDate> = rand::seq::index::sample(&mut rng, candidates.len(), k.min(candidates.len()))
        .into_iter()
        .map(|i| candidates[i])
        .collect();

    let mut degraded = picked.clone();
    degraded.extend(explicit.keys().filter(|d| explicit[d] < 1.0));
    let v = sc.activity_variation;
    let plans = dates
        .into_iter()
        .map(|date| {
            // Both draws happen every day so the stream does not depend on the plan.
            let activity = uniform(&mut rng, [1.0 - v, 1.0 + v]);
            let good = uniform(&mut rng, sc.good_day_retention);
            let bad = uniform(&mut rng, sc.degradation.retention);
            let retention = match explicit.get(&date) {
                Some(r) => *r,
                None if picked.contains(&date) => bad,
                None => good,
            };
            DayPlan { date, activity, retention }
        })
        .collect();
    (plans, degraded)
}

/// Runs the scenario. Deterministic for a given scenario value.
pub fn generate(sc: &Scenario) -> Result<SyntheticCorpus> {
    sc.validate()?;
    let offset = sc.offset()?;
    let curve = sc.curve()?;
    let fuels = sc.fuels()?;
    let graph = sc.grid.build()?;
    let tracks = sc
        .lines
        .iter()
        .map(|l| Track::new(&sc.grid, &graph, l))
        .collect::<Result<Vec<_>>>()?;

    let mut vehicles = Vec::new();
    let mut fleet = Vec::new();
    for (li, l) in sc.lines.iter().enumerate() {
        for b in 0..l.buses {
            fleet.push((li, b, vehicles.len() as u32));
            vehicles.push(Vehicle { id: l.vehicle_id(b), line: l.id.clone(), label: l.label.clone() });
        }
    }

    let (plans, degraded) = plan_days(sc);
    let mut drop_rng = ChaCha8Rng::seed_from_u64(sc.seed);
    drop_rng.set_stream(2);
    let mut jitter_rng = ChaCha8Rng::seed_from_u64(sc.seed);
    jitter_rng.set_stream(3);
    let noise = (sc.jitter_m > 0.0)
        .then(|| Normal::new(0.0, sc.jitter_m).map_err(|e| Error::config(e.to_string())))
        .transpose()?;
    let cos = sc.grid.origin.lat.to_radians().cos();

    let iv = i64::from(sc.sampling_interval_s);
    let mut pings = Vec::new();
    let mut drive_log = Vec::new();
    let mut ledger = Vec::new();
    let mut retention = BTreeMap::new();

    for plan in &plans {
        retention.insert(plan.date, plan.retention);
        let midnight = offset
            .from_local_datetime(&plan.date.and_hms_opt(0, 0, 0).expect("valid midnight"))
            .single()
            .ok_or_else(|| Error::Internal("ambiguous local midnight".into()))?;
        let mut day_rows: BTreeMap<String, LedgerRow> = BTreeMap::new();

        for &(li, bus, vidx) in &fleet {
            let line = &sc.lines[li];
            let track = &tracks[li];
            let start = (line.service_start_h * 3600.0).round() as i64 + i64::from(bus) * i64::from(line.headway_s);
            let span = (line.service_end_h - line.service_start_h) * 3600.0 * plan.activity;
            let end = ((line.service_start_h * 3600.0 + span).round() as i64).min(DAY_S - 1);

            let row = day_rows.entry(vehicles[vidx as usize].id.clone()).or_insert_with(|| LedgerRow {
                vehicle: vehicles[vidx as usize].id.clone(),
                line: line.id.clone(),
                date: plan.date,
                dist_m: 0.0,
                fuel_l: 0.0,
                co2e_kg: 0.0,
                pings: 0,
                pings_kept: 0,
            });

            let mut emit = |t: i64, s: f64, speed: f64, row: &mut LedgerRow| {
                row.pings += 1;
                let keep = drop_rng.random::<f64>() < plan.retention;
                let mut p = track.at(s);
                if let Some(n) = &noise {
                    let (dn, de): (f64, f64) = (n.sample(&mut jitter_rng), n.sample(&mut jitter_rng));
                    p = GeoPoint::new(p.lat + dn / M_PER_DEG, p.lon + de / (M_PER_DEG * cos));
                }
                if keep {
                    row.pings_kept += 1;
                    pings.push(GpsPing {
                        vehicle: vidx,
                        timestamp: midnight + Duration::seconds(t),
                        position: p,
                        speed_kmh: speed,
                    });
                }
            };

            if start + iv > end {
                continue;
            }
            let len = track.length();
            // Distance from the current origin terminal, and travel direction.
            let (mut along, mut forward, mut dwell, mut trips) = (0.0_f64, true, 0_u32, 0_u32);
            let abs = |along: f64, forward: bool| if forward { along } else { len - along };
            let mut t = start;
            emit(t, abs(along, forward), 0.0, row);
            while t + iv <= end && line.max_trips.is_none_or(|m| trips < m) {
                let from = track.at(abs(along, forward));
                let (dist, speed) = if dwell > 0 {
                    dwell -= 1;
                    (0.0, 0.0)
                } else {
                    let v = line.speed_at((t / 3600) as u32);
                    let step = v * iv as f64 / 3.6;
                    let remaining = len - along;
                    if step >= remaining - ARRIVAL_EPS_M {
                        along = 0.0;
                        forward = !forward;
                        trips += 1;
                        dwell = line.dwell_intervals;
                        (remaining, v)
                    } else {
                        along += step;
                        (step, v)
                    }
                };
                let dt = iv as f64;
                let fuel_l = fuel_consumption(dist, segment_speed(dist, dt), &curve);
                let co2e_kg = co2e_emissions(fuel_l, plan.date, &fuels)?;
                drive_log.push(DrivePiece {
                    vehicle: vidx,
                    t_start: midnight + Duration::seconds(t),
                    start: from,
                    dist_m: dist,
                    dt_s: dt,
                    fuel_l,
                    co2e_kg,
                });
                row.dist_m += dist;
                row.fuel_l += fuel_l;
                row.co2e_kg += co2e_kg;
                t += iv;
                emit(t, abs(along, forward), if dwell > 0 { 0.0 } else { speed }, row);
            }
        }
        ledger.extend(day_rows.into_values());
    }

    let bounds = sc.grid.bounds(500.0)?;
    Ok(SyntheticCorpus { graph, bounds, curve, fuels, vehicles, pings, drive_log, ledger, retention, degraded })
}

pub const GPS_HEADER: [&str; 6] = ["vehicle", "line", "lat", "lon", "timestamp", "speed"];

pub fn write_gps<W: Write>(w: W, corpus: &SyntheticCorpus) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(GPS_HEADER)?;
    for p in &corpus.pings {
        let v = &corpus.vehicles[p.vehicle as usize];
        wtr.write_record([
            v.id.as_str(),
            v.line.as_str(),
            &p.position.lat.to_string(),
            &p.position.lon.to_string(),
            &p.timestamp.to_rfc3339_opts(SecondsFormat::Secs, true),
            &p.speed_kmh.to_string(),
        ])?;
    }
    wtr.flush().map_err(|e| Error::data("gps.csv", e.to_string()))?;
    Ok(())
}

pub fn write_ledger<W: Write>(w: W, ledger: &[LedgerRow]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["vehicle", "line", "date", "dist_m", "fuel_l", "co2e_kg", "pings", "pings_kept"])?;
    for r in ledger {
        wtr.write_record([
            r.vehicle.clone(),
            r.line.clone(),
            r.date.to_string(),
            r.dist_m.to_string(),
            r.fuel_l.to_string(),
            r.co2e_kg.to_string(),
            r.pings.to_string(),
            r.pings_kept.to_string(),
        ])?;
    }
    wtr.flush().map_err(|e| Error::data("ledger.csv", e.to_string()))?;
    Ok(())
}

fn create(dir: &Path, name: &str) -> Result<std::io::BufWriter<std::fs::File>> {
    let p = dir.join(name);
    let f = std::fs::File::create(&p).map_err(|e| Error::io(&p, e))?;
    Ok(std::io::BufWriter::new(f))
}

/// Run configuration pointing at the files written by [`write_corpus`].
pub fn fixture_config(sc: &Scenario, corpus: &SyntheticCorpus) -> RunConfig {
    let mut cfg = RunConfig {
        inputs: Inputs {
            gps: "gps.csv".into(),
            nodes: Some("nodes.csv".into()),
            edges: Some("edges.csv".into()),
            graph_geojson: None,
            curve: Some("curve.csv".into()),
            fuels: "fuels.csv".into(),
            reference: Some("reference_monthly.csv".into()),
        },
        bounds: Some(corpus.bounds),
        utc_offset: sc.utc_offset.clone(),
        output_dir: PathBuf::from("out"),
        ..RunConfig::default()
    };
    cfg.gapfill.from = Some(sc.start_date);
    cfg.gapfill.to = Some(sc.end_date());
    cfg
}

/// Writes gps.csv, ledger.csv, reference_monthly.csv, lines.csv, nodes.csv,
/// edges.csv, curve.csv, fuels.csv, scenario.toml and config.toml.
pub fn write_corpus(dir: &Path, sc: &Scenario, corpus: &SyntheticCorpus) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_gps(create(dir, "gps.csv")?, corpus)?;
    write_ledger(create(dir, "ledger.csv")?, &corpus.ledger)?;
    write_reference(create(dir, "reference_monthly.csv")?, &corpus.reference())?;
    corpus.graph.write_csv(create(dir, "nodes.csv")?, create(dir, "edges.csv")?)?;
    corpus.curve.write_csv(create(dir, "curve.csv")?)?;
    corpus.fuels.write_csv(create(dir, "fuels.csv")?)?;

    let mut wtr = csv::Writer::from_writer(create(dir, "lines.csv")?);
    wtr.write_record(["line", "label", "buses"])?;
    for l in &sc.lines {
        wtr.write_record([l.id.clone(), l.label.clone(), l.buses.to_string()])?;
    }
    wtr.flush().map_err(|e| Error::data("lines.csv", e.to_string()))?;

    let mut f = create(dir, "scenario.toml")?;
    f.write_all(sc.to_toml()?.as_bytes()).map_err(|e| Error::io(dir.join("scenario.toml"), e))?;
    let mut f = create(dir, "config.toml")?;
    f.write_all(fixture_config(sc, corpus).to_toml()?.as_bytes())
        .map_err(|e| Error::io(dir.join("config.toml"), e))?;
    f.flush().map_err(|e| Error::io(dir.join("config.toml"), e))?;
    Ok(())
}
