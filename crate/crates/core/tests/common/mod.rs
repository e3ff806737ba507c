#![allow(dead_code)]

use std::path::{Path, PathBuf};

use busemit::config::RunConfig;
use busemit::emissions::SpeedBand;
use busemit::synthgen::{
    generate, write_corpus, DegradationPlan, GridSpec, LineSpec, RouteSpec, Scenario, SpeedWindow, SyntheticCorpus,
};
use busemit::GeoPoint;
use chrono::NaiveDate;

pub const ORIGIN: GeoPoint = GeoPoint { lat: -22.95, lon: -43.35 };

/// Great-circle distance, written out independently of the library.
pub fn oracle_haversine(a: GeoPoint, b: GeoPoint) -> f64 {
    let r = 6_371_000.0_f64;
    let (p1, p2) = (a.lat.to_radians(), b.lat.to_radians());
    let dp = p2 - p1;
    let dl = (b.lon - a.lon).to_radians();
    let h = (dp / 2.0).sin().powi(2) + p1.cos() * p2.cos() * (dl / 2.0).sin().powi(2);
    2.0 * r * h.sqrt().min(1.0).asin()
}

/// Grid node nearest to `p` for a grid laid out like the generator's.
pub fn oracle_cell(grid: &GridSpec, p: GeoPoint) -> (i64, i64) {
    let m_per_deg = 6_371_000.0 * std::f64::consts::PI / 180.0;
    let row = (p.lat - grid.origin.lat) * m_per_deg / grid.edge_m;
    let col = (p.lon - grid.origin.lon) * m_per_deg * grid.origin.lat.to_radians().cos() / grid.edge_m;
    (row.round() as i64, col.round() as i64)
}

/// Shortest street distance between two pings on a complete grid.
pub fn oracle_manhattan(grid: &GridSpec, a: GeoPoint, b: GeoPoint) -> f64 {
    let (ra, ca) = oracle_cell(grid, a);
    let (rb, cb) = oracle_cell(grid, b);
    ((ra - rb).abs() + (ca - cb).abs()) as f64 * grid.edge_m
}

pub fn rel_err(got: f64, want: f64) -> f64 {
    ((got - want) / want).abs()
}

fn day(s: &str) -> NaiveDate {
    s.parse().unwrap()
}

fn grid(rows: usize, cols: usize, edge_m: f64) -> GridSpec {
    GridSpec { rows, cols, edge_m, origin: ORIGIN, missing_edges: vec![] }
}

fn line(id: &str, route: RouteSpec, kmh: f64) -> LineSpec {
    LineSpec {
        id: id.into(),
        label: String::new(),
        buses: 1,
        headway_s: 600,
        service_start_h: 5.0,
        service_end_h: 21.0,
        speed_kmh: kmh,
        speed_windows: vec![],
        route,
        dwell_intervals: 1,
        max_trips: None,
    }
}

fn base(seed: u64, start: &str, days: u32, g: GridSpec, lines: Vec<LineSpec>) -> Scenario {
    Scenario {
        seed,
        start_date: day(start),
        days,
        utc_offset: "-03:00".into(),
        sampling_interval_s: 120,
        jitter_m: 0.0,
        activity_variation: 0.0,
        good_day_retention: [1.0, 1.0],
        grid: g,
        lines,
        degradation: DegradationPlan::default(),
        curve: None,
        fuels: None,
    }
}

fn stair(from: [usize; 2], to: [usize; 2], step: usize) -> RouteSpec {
    RouteSpec::Staircase { from, to, step }
}

fn way(points: &[[usize; 2]]) -> RouteSpec {
    RouteSpec::Waypoints { points: points.to_vec() }
}

/// 20x20 grid city with a mix of staircase and straight or L-shaped lines.
/// Per-interval distances are whole blocks so every ping sits on a node.
pub fn city(buses: u32, days: u32) -> Scenario {
    let rush = vec![
        SpeedWindow { from_hour: 7, to_hour: 10, kmh: 12.0 },
        SpeedWindow { from_hour: 17, to_hour: 19, kmh: 12.0 },
    ];
    let mut lines = vec![
        LineSpec { speed_windows: rush.clone(), ..line("S1", stair([0, 0], [19, 19], 1), 24.0) },
        line("S2", stair([19, 0], [0, 19], 2), 24.0),
        line("S3", stair([0, 4], [15, 19], 3), 12.0),
        line("W1", way(&[[0, 10], [19, 10]]), 24.0),
        LineSpec { speed_windows: rush, ..line("W2", way(&[[2, 0], [2, 8], [12, 8], [12, 19]]), 24.0) },
        line("W3", way(&[[18, 0], [10, 0], [10, 5], [4, 5], [4, 16]]), 12.0),
    ];
    for l in &mut lines {
        l.buses = buses;
    }
    base(11, "2015-03-02", days, grid(20, 20, 200.0), lines)
}

/// A year on staircase lines with daily activity swings, mild loss on good
/// days and 30% of days degraded to 10-50% retention.
pub fn degraded_year() -> Scenario {
    let mut lines = vec![
        line("Y1", stair([0, 0], [15, 15], 1), 24.0),
        line("Y2", stair([15, 0], [0, 15], 1), 24.0),
        line("Y3", stair([0, 3], [12, 15], 1), 12.0),
    ];
    for l in &mut lines {
        l.buses = 2;
        l.service_start_h = 6.0;
        l.service_end_h = 18.0;
    }
    let mut sc = base(2015, "2015-01-01", 365, grid(16, 16, 200.0), lines);
    sc.activity_variation = 0.05;
    sc.good_day_retention = [0.9, 1.0];
    sc.degradation = DegradationPlan { days: vec![], fraction: 0.3, retention: [0.1, 0.5] };
    sc
}

/// Curve whose slow band costs 1.5 times the free-flow band.
pub fn penalty_curve() -> Vec<SpeedBand<f64>> {
    vec![
        SpeedBand { low_kmh: 0.0, high_kmh: 10.0, liters_per_km: 0.9 },
        SpeedBand { low_kmh: 10.0, high_kmh: 20.0, liters_per_km: 0.72 },
        SpeedBand { low_kmh: 20.0, high_kmh: f64::INFINITY, liters_per_km: 0.6 },
    ]
}

/// Twenty straight 3 km lines running round the clock at 30 km/h. Between 8h
/// and 12h two "congested" lines drop to 9 km/h, sixteen "mild" ones to
/// 15 km/h and two "uncongested" ones keep their speed.
pub fn freeflow(congestion: bool) -> Scenario {
    let lines = (0..20)
        .map(|i| {
            let (label, peak) = match i {
                0 | 1 => ("congested", 9.0),
                18 | 19 => ("uncongested", 30.0),
                _ => ("mild", 15.0),
            };
            let mut l = line(&format!("F{i:02}"), way(&[[i, 0], [i, 30]]), 30.0);
            l.label = label.into();
            l.service_start_h = 0.0;
            l.service_end_h = 24.0;
            l.headway_s = 0;
            if congestion {
                l.speed_windows = vec![SpeedWindow { from_hour: 8, to_hour: 12, kmh: peak }];
            }
            l
        })
        .collect();
    let mut sc = base(5, "2015-06-01", 7, grid(20, 31, 100.0), lines);
    sc.curve = Some(penalty_curve());
    sc
}

/// Ten lines; the two busiest carry 80% of the service hours.
pub fn pareto() -> Scenario {
    let lines = (0..10)
        .map(|i| {
            let mut l = line(&format!("P{i}"), stair([0, 2 * i], [9, 2 * i + 9], 1), 24.0);
            if i < 2 {
                l.label = "heavy".into();
                l.buses = 4;
                (l.service_start_h, l.service_end_h) = (5.0, 21.0);
            } else {
                l.label = "light".into();
                (l.service_start_h, l.service_end_h) = (7.0, 11.0);
            }
            l
        })
        .collect();
    base(8, "2015-04-06", 7, grid(10, 30, 200.0), lines)
}

/// About a million pings: the city layout with more buses over three weeks.
pub fn million() -> Scenario {
    let mut sc = city(5, 21);
    for (i, l) in sc.lines.clone().iter().enumerate() {
        let mut twin = l.clone();
        twin.id = format!("{}b", l.id);
        twin.headway_s = 300 + 60 * i as u32;
        sc.lines.push(twin);
    }
    for l in &mut sc.lines {
        l.buses = 9;
    }
    sc
}

pub struct Fixture {
    pub dir: tempfile::TempDir,
    pub scenario: Scenario,
    pub corpus: SyntheticCorpus,
}

impl Fixture {
    pub fn new(sc: Scenario) -> Self {
        let corpus = generate(&sc).expect("scenario generates");
        let dir = tempfile::tempdir().expect("tempdir");
        write_corpus(dir.path(), &sc, &corpus).expect("corpus written");
        Fixture { dir, scenario: sc, corpus }
    }

    pub fn path(&self) -> &Path {
        self.dir.path()
    }

    /// The generated config with its output redirected to `out`.
    pub fn config(&self, out: &str) -> RunConfig {
        let mut cfg = RunConfig::load(&self.path().join("config.toml")).expect("config loads");
        cfg.output_dir = PathBuf::from(out);
        cfg
    }
}
