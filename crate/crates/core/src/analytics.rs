//! Policy products built from per-segment emissions: a spatial lattice,
//! weekday and hourly profiles, per-line ranking, the dawn/peak free-flow
//! comparison, and the monthly comparison against top-down totals.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};

use chrono::{NaiveDate, Timelike, Weekday};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::aggregate::{reduce_by, EmissionAggregate};
use crate::calendar::{weekday_index, weekday_name, YearMonth, WEEKDAYS};
use crate::emissions::SegmentEmission;
use crate::error::{Error, Result};
use crate::gapfill::MonthlyBand;
use crate::geo::EARTH_RADIUS_M;
use crate::pairing::{check_header, field};
use crate::{BoundingBox, GeoPoint};

const M_PER_DEG: f64 = EARTH_RADIUS_M * std::f64::consts::PI / 180.0;

/// Square cells laid out from a south-west origin. Cell edges are measured in
/// a local equirectangular frame scaled by the cosine of the origin latitude.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatticeSpec {
    pub origin: GeoPoint,
    pub cell_size_m: f64,
    pub rows: usize,
    pub cols: usize,
}

impl LatticeSpec {
    /// Smallest lattice with the given cell size covering `bounds`.
    pub fn covering(bounds: &BoundingBox, cell_size_m: f64) -> Result<Self> {
        if !(cell_size_m.is_finite() && cell_size_m > 0.0) {
            return Err(Error::config(format!("lattice cell size must be positive, got {cell_size_m}")));
        }
        let origin = GeoPoint::new(bounds.min_lat, bounds.min_lon);
        let spec = LatticeSpec { origin, cell_size_m, rows: 1, cols: 1 };
        let (x, y) = spec.local_xy(GeoPoint::new(bounds.max_lat, bounds.max_lon));
        Ok(LatticeSpec {
            rows: ((y / cell_size_m).floor() as usize + 1).max(1),
            cols: ((x / cell_size_m).floor() as usize + 1).max(1),
            ..spec
        })
    }

    fn cos_ref(&self) -> f64 {
        self.origin.lat.to_radians().cos()
    }

    /// Meters east and north of the origin.
    pub fn local_xy(&self, p: GeoPoint) -> (f64, f64) {
        (
            (p.lon - self.origin.lon) * M_PER_DEG * self.cos_ref(),
            (p.lat - self.origin.lat) * M_PER_DEG,
        )
    }

    fn from_local(&self, x: f64, y: f64) -> GeoPoint {
        GeoPoint::new(
            self.origin.lat + y / M_PER_DEG,
            self.origin.lon + x / (M_PER_DEG * self.cos_ref()),
        )
    }

    /// (row, col) of the cell containing `p`, if inside the lattice.
    pub fn cell_of(&self, p: GeoPoint) -> Option<(usize, usize)> {
        let (x, y) = self.local_xy(p);
        if !(x >= 0.0 && y >= 0.0) {
            return None;
        }
        let (r, c) = ((y / self.cell_size_m) as usize, (x / self.cell_size_m) as usize);
        (r < self.rows && c < self.cols).then_some((r, c))
    }

    pub fn covers(&self, bounds: &BoundingBox) -> bool {
        let (x, y) = self.local_xy(GeoPoint::new(bounds.max_lat, bounds.max_lon));
        self.origin.lat <= bounds.min_lat
            && self.origin.lon <= bounds.min_lon
            && x < self.cols as f64 * self.cell_size_m
            && y < self.rows as f64 * self.cell_size_m
    }

    /// Closed ring of [lon, lat] corners.
    pub fn cell_polygon(&self, row: usize, col: usize) -> Vec<[f64; 2]> {
        let s = self.cell_size_m;
        let (x0, y0) = (col as f64 * s, row as f64 * s);
        [(x0, y0), (x0 + s, y0), (x0 + s, y0 + s), (x0, y0 + s), (x0, y0)]
            .iter()
            .map(|&(x, y)| {
                let p = self.from_local(x, y);
                [p.lon, p.lat]
            })
            .collect()
    }
}

/// Restricts which days enter an aggregation.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DayFilter {
    /// `None` keeps every weekday.
    pub weekdays: Option<Vec<Weekday>>,
    /// `None` keeps every date.
    pub dates: Option<BTreeSet<NaiveDate>>,
}

impl DayFilter {
    pub fn all() -> Self {
        DayFilter::default()
    }

    pub fn accepts(&self, day: NaiveDate) -> bool {
        use chrono::Datelike;
        self.weekdays.as_ref().is_none_or(|w| w.contains(&day.weekday()))
            && self.dates.as_ref().is_none_or(|d| d.contains(&day))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatticeGrid {
    pub spec: LatticeSpec,
    /// Row-major, `rows * cols` cells.
    pub cells: Vec<EmissionAggregate>,
    /// Segments whose start point lies outside the lattice.
    pub overflow: EmissionAggregate,
    /// co2e / max(co2e) per cell; all zero when nothing was emitted.
    pub normalized: Vec<f64>,
    /// Distinct dates that passed the filter.
    pub days: usize,
}

pub fn aggregate_lattice(rows: &[SegmentEmission], spec: &LatticeSpec, filter: &DayFilter) -> LatticeGrid {
    // Key: Some(cell index) or None for overflow, wrapped so filtered-out rows drop.
    let by_cell = reduce_by(rows, |e| {
        filter
            .accepts(e.day())
            .then(|| spec.cell_of(e.start).map(|(r, c)| r * spec.cols + c))
    });
    let mut cells = vec![EmissionAggregate::default(); spec.rows * spec.cols];
    let mut overflow = EmissionAggregate::default();
    for (k, v) in by_cell {
        match k {
            Some(i) => cells[i] = v,
            None => overflow = v,
        }
    }
    let max = cells.iter().map(|c| c.co2e_kg).fold(0.0, f64::max);
    let normalized = cells
        .iter()
        .map(|c| if max > 0.0 { c.co2e_kg / max } else { 0.0 })
        .collect();
    let days = rows
        .iter()
        .map(|e| e.day())
        .filter(|d| filter.accepts(*d))
        .collect::<BTreeSet<_>>()
        .len();
    LatticeGrid { spec: *spec, cells, overflow, normalized, days }
}

pub fn write_lattice_geojson<W: Write>(w: W, grid: &LatticeGrid) -> Result<()> {
    let mut features = Vec::new();
    for r in 0..grid.spec.rows {
        for c in 0..grid.spec.cols {
            let i = r * grid.spec.cols + c;
            let cell = &grid.cells[i];
            if cell.segment_count == 0 {
                continue;
            }
            let per_day = if grid.days > 0 { cell.co2e_kg / grid.days as f64 } else { 0.0 };
            features.push(json!({
                "type": "Feature",
                "properties": {
                    "row": r,
                    "col": c,
                    "co2e_kg": cell.co2e_kg,
                    "co2e_kg_per_day": per_day,
                    "normalized": grid.normalized[i],
                    "segment_count": cell.segment_count,
                },
                "geometry": { "type": "Polygon", "coordinates": [grid.spec.cell_polygon(r, c)] },
            }));
        }
    }
    let doc = json!({
        "type": "FeatureCollection",
        "features": features,
        "properties": {
            "cell_size_m": grid.spec.cell_size_m,
            "rows": grid.spec.rows,
            "cols": grid.spec.cols,
            "days": grid.days,
            "overflow_co2e_kg": grid.overflow.co2e_kg,
            "overflow_segment_count": grid.overflow.segment_count,
        },
    });
    serde_json::to_writer(w, &doc)?;
    Ok(())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct ProfileEntry {
    pub total: EmissionAggregate,
    /// Distinct dates contributing to the average.
    pub days: usize,
    pub mean_co2e_kg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TemporalProfile {
    /// Monday first. Average per occurrence of that weekday.
    pub weekday: [ProfileEntry; 7],
    /// Average per included day, by segment start hour.
    pub hourly: [ProfileEntry; 24],
}

pub fn temporal_profile(rows: &[SegmentEmission], filter: &DayFilter) -> TemporalProfile {
    let by_day = reduce_by(rows, |e| filter.accepts(e.day()).then(|| e.day()));
    let by_hour = reduce_by(rows, |e| filter.accepts(e.day()).then(|| e.t_start.hour() as usize));

    let mut weekday = [ProfileEntry::default(); 7];
    for (day, agg) in &by_day {
        use chrono::Datelike;
        let w = &mut weekday[weekday_index(day.weekday())];
        w.total += *agg;
        w.days += 1;
    }
    for w in &mut weekday {
        if w.days > 0 {
            w.mean_co2e_kg = w.total.co2e_kg / w.days as f64;
        }
    }

    let n_days = by_day.len();
    let mut hourly = [ProfileEntry::default(); 24];
    for (h, agg) in by_hour {
        hourly[h].total = agg;
    }
    for h in &mut hourly {
        h.days = n_days;
        if n_days > 0 {
            h.mean_co2e_kg = h.total.co2e_kg / n_days as f64;
        }
    }
    TemporalProfile { weekday, hourly }
}

pub fn write_temporal<W: Write>(w: W, p: &TemporalProfile) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["kind", "key", "segments", "dist_km", "fuel_l", "co2e_kg", "days", "mean_co2e_kg"])?;
    let mut row = |kind: &str, key: String, e: &ProfileEntry| {
        wtr.write_record([
            kind.to_string(),
            key,
            e.total.segment_count.to_string(),
            e.total.dist_km.to_string(),
            e.total.fuel_l.to_string(),
            e.total.co2e_kg.to_string(),
            e.days.to_string(),
            e.mean_co2e_kg.to_string(),
        ])
    };
    for (i, e) in p.weekday.iter().enumerate() {
        row("weekday", weekday_name(WEEKDAYS[i]).to_string(), e)?;
    }
    for (h, e) in p.hourly.iter().enumerate() {
        row("hour", h.to_string(), e)?;
    }
    wtr.flush().map_err(|e| Error::data("temporal", e.to_string()))?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LineShare {
    pub line_id: String,
    pub total: EmissionAggregate,
    pub share: f64,
    pub cumulative_share: f64,
}

/// Lines by descending CO2e (ties by line id) with cumulative share.
pub fn line_distribution(rows: &[SegmentEmission]) -> Vec<LineShare> {
    let by_line = reduce_by(rows, |e| Some(e.line_id.clone()));
    let mut lines: Vec<(String, EmissionAggregate)> = by_line.into_iter().collect();
    lines.sort_by(|a, b| b.1.co2e_kg.total_cmp(&a.1.co2e_kg).then_with(|| a.0.cmp(&b.0)));
    let total: f64 = lines.iter().map(|l| l.1.co2e_kg).sum();
    let mut running = 0.0;
    let n = lines.len();
    lines
        .into_iter()
        .enumerate()
        .map(|(i, (line_id, agg))| {
            running += agg.co2e_kg;
            let (share, cumulative_share) = if total > 0.0 {
                (agg.co2e_kg / total, if i + 1 == n { 1.0 } else { running / total })
            } else {
                (0.0, if i + 1 == n { 1.0 } else { 0.0 })
            };
            LineShare { line_id, total: agg, share, cumulative_share }
        })
        .collect()
}

/// Cumulative share of the top `fraction` of lines (rounded up to whole lines).
pub fn top_share(dist: &[LineShare], fraction: f64) -> f64 {
    if dist.is_empty() {
        return 0.0;
    }
    let k = ((dist.len() as f64 * fraction).ceil() as usize).clamp(1, dist.len());
    dist[k - 1].cumulative_share
}

pub fn write_lines<W: Write>(w: W, dist: &[LineShare]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["rank", "line", "segments", "dist_km", "fuel_l", "co2e_kg", "share", "cumulative_share"])?;
    for (i, l) in dist.iter().enumerate() {
        wtr.write_record([
            (i + 1).to_string(),
            l.line_id.clone(),
            l.total.segment_count.to_string(),
            l.total.dist_km.to_string(),
            l.total.fuel_l.to_string(),
            l.total.co2e_kg.to_string(),
            l.share.to_string(),
            l.cumulative_share.to_string(),
        ])?;
    }
    wtr.flush().map_err(|e| Error::data("lines", e.to_string()))?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FreeFlowParams {
    /// Half-open hour window `[start, end)`.
    pub dawn: [u32; 2],
    pub peak: [u32; 2],
    pub min_samples: u64,
    /// Share of lines tagged as most and least impacted.
    pub tag_fraction: f64,
}

impl Default for FreeFlowParams {
    fn default() -> Self {
        FreeFlowParams {
            dawn: [0, 3],
            peak: [8, 12],
            min_samples: 30,
            tag_fraction: 0.1,
        }
    }
}

impl FreeFlowParams {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [("dawn", self.dawn), ("peak", self.peak)] {
            if !(w[0] < w[1] && w[1] <= 24) {
                return Err(Error::config(format!("freeflow.{name} must satisfy start < end <= 24, got {w:?}")));
            }
        }
        if self.dawn[0] < self.peak[1] && self.peak[0] < self.dawn[1] {
            return Err(Error::config("freeflow dawn and peak windows overlap"));
        }
        if !(self.tag_fraction > 0.0 && self.tag_fraction <= 0.5) {
            return Err(Error::config("freeflow.tag_fraction must be in (0, 0.5]"));
        }
        Ok(())
    }

    fn window_of(&self, hour: u32) -> Option<Window> {
        if (self.dawn[0]..self.dawn[1]).contains(&hour) {
            Some(Window::Dawn)
        } else if (self.peak[0]..self.peak[1]).contains(&hour) {
            Some(Window::Peak)
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Window {
    Dawn,
    Peak,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ImpactTag {
    MostImpacted,
    LeastImpacted,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FreeFlowResult {
    pub line_id: String,
    pub dawn_speed_kmh: f64,
    pub peak_speed_kmh: f64,
    /// kg CO2e per km.
    pub dawn_rate: f64,
    pub peak_rate: f64,
    /// peak_rate / dawn_rate
    pub impact: f64,
    pub dawn_sample: u64,
    pub peak_sample: u64,
    pub tag: Option<ImpactTag>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FreeFlowReport {
    /// Sorted by descending impact, ties by line id.
    pub results: Vec<FreeFlowResult>,
    pub excluded: Vec<(String, String)>,
}

impl FreeFlowReport {
    pub fn tagged(&self, tag: ImpactTag) -> BTreeSet<String> {
        self.results
            .iter()
            .filter(|r| r.tag == Some(tag))
            .map(|r| r.line_id.clone())
            .collect()
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct WindowTotals {
    agg: EmissionAggregate,
    seconds: f64,
}

pub fn freeflow_analysis(rows: &[SegmentEmission], params: &FreeFlowParams) -> Result<FreeFlowReport> {
    params.validate()?;
    let per_window = reduce_by(rows, |e| {
        params
            .window_of(e.t_start.hour())
            .map(|w| (e.line_id.clone(), w))
    });
    // Elapsed time per (line, window), summed in the same fixed order.
    let mut seconds: BTreeMap<(String, Window), f64> = BTreeMap::new();
    for chunk in rows.chunks(crate::aggregate::REDUCE_CHUNK) {
        let mut part: BTreeMap<(String, Window), f64> = BTreeMap::new();
        for e in chunk {
            if let Some(w) = params.window_of(e.t_start.hour()) {
                *part.entry((e.line_id.clone(), w)).or_default() += e.dt_s;
            }
        }
        for (k, v) in part {
            *seconds.entry(k).or_default() += v;
        }
    }

    let mut lines: BTreeMap<String, [WindowTotals; 2]> = BTreeMap::new();
    for ((line, w), agg) in per_window {
        let slot = &mut lines.entry(line.clone()).or_default()[w as usize];
        slot.agg = agg;
        slot.seconds = seconds.get(&(line, w)).copied().unwrap_or(0.0);
    }

    let mut results = Vec::new();
    let mut excluded = Vec::new();
    for (line, [dawn, peak]) in lines {
        let reason = if dawn.agg.segment_count < params.min_samples {
            Some(format!("dawn window has {} segments (< {})", dawn.agg.segment_count, params.min_samples))
        } else if peak.agg.segment_count < params.min_samples {
            Some(format!("peak window has {} segments (< {})", peak.agg.segment_count, params.min_samples))
        } else if !(dawn.agg.dist_km > 0.0 && peak.agg.dist_km > 0.0) {
            Some("no distance travelled in one window".to_string())
        } else if !(dawn.agg.co2e_kg > 0.0) {
            Some("no dawn emissions".to_string())
        } else {
            None
        };
        if let Some(r) = reason {
            excluded.push((line, r));
            continue;
        }
        let dawn_rate = dawn.agg.co2e_kg / dawn.agg.dist_km;
        let peak_rate = peak.agg.co2e_kg / peak.agg.dist_km;
        results.push(FreeFlowResult {
            line_id: line,
            dawn_speed_kmh: dawn.agg.dist_km / (dawn.seconds / 3600.0),
            peak_speed_kmh: peak.agg.dist_km / (peak.seconds / 3600.0),
            dawn_rate,
            peak_rate,
            impact: peak_rate / dawn_rate,
            dawn_sample: dawn.agg.segment_count,
            peak_sample: peak.agg.segment_count,
            tag: None,
        });
    }

    results.sort_by(|a, b| b.impact.total_cmp(&a.impact).then_with(|| a.line_id.cmp(&b.line_id)));
    let n = results.len();
    if n > 0 {
        let k = ((n as f64 * params.tag_fraction).round() as usize).max(1);
        for (i, r) in results.iter_mut().enumerate() {
            if i < k {
                r.tag = Some(ImpactTag::MostImpacted);
            } else if i >= n.saturating_sub(k) {
                r.tag = Some(ImpactTag::LeastImpacted);
            }
        }
    }
    Ok(FreeFlowReport { results, excluded })
}

pub fn write_freeflow<W: Write>(w: W, report: &FreeFlowReport) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record([
        "line", "dawn_speed_kmh", "peak_speed_kmh", "dawn_kg_per_km", "peak_kg_per_km", "impact", "dawn_segments",
        "peak_segments", "tag", "excluded_reason",
    ])?;
    for r in &report.results {
        let tag = match r.tag {
            Some(ImpactTag::MostImpacted) => "most_impacted",
            Some(ImpactTag::LeastImpacted) => "least_impacted",
            None => "",
        };
        wtr.write_record([
            r.line_id.clone(),
            r.dawn_speed_kmh.to_string(),
            r.peak_speed_kmh.to_string(),
            r.dawn_rate.to_string(),
            r.peak_rate.to_string(),
            r.impact.to_string(),
            r.dawn_sample.to_string(),
            r.peak_sample.to_string(),
            tag.to_string(),
            String::new(),
        ])?;
    }
    for (line, reason) in &report.excluded {
        let mut rec = vec![line.clone()];
        rec.extend(std::iter::repeat_n(String::new(), 8));
        rec.push(reason.clone());
        wtr.write_record(rec)?;
    }
    wtr.flush().map_err(|e| Error::data("freeflow", e.to_string()))?;
    Ok(())
}

/// One month of the top-down reference file.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReferenceMonth {
    pub month: YearMonth,
    pub km: f64,
    pub diesel_m3: f64,
    pub co2e_t: f64,
}

pub const REFERENCE_HEADER: [&str; 4] = ["month", "km", "diesel_m3", "co2e_t"];

pub fn read_reference<R: Read>(r: R) -> Result<Vec<ReferenceMonth>> {
    const CTX: &str = "reference.csv";
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(r);
    check_header(CTX, rdr.headers()?, &REFERENCE_HEADER)?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        out.push(ReferenceMonth {
            month: rec[0].parse()?,
            km: field(&rec, 1, CTX)?,
            diesel_m3: field(&rec, 2, CTX)?,
            co2e_t: field(&rec, 3, CTX)?,
        });
    }
    Ok(out)
}

pub fn write_reference<W: Write>(w: W, rows: &[ReferenceMonth]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(REFERENCE_HEADER)?;
    for r in rows {
        wtr.write_record([r.month.to_string(), r.km.to_string(), r.diesel_m3.to_string(), r.co2e_t.to_string()])?;
    }
    wtr.flush().map_err(|e| Error::data("reference", e.to_string()))?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Km,
    DieselM3,
    Co2eT,
}

impl Metric {
    pub fn as_str(&self) -> &'static str {
        match self {
            Metric::Km => "km",
            Metric::DieselM3 => "diesel_m3",
            Metric::Co2eT => "co2e_t",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub month: YearMonth,
    pub metric: Metric,
    pub raw: f64,
    pub low: f64,
    pub high: f64,
    pub reference: Option<f64>,
    pub inside: Option<bool>,
    /// Relative distance from the reference to the nearest band edge; zero
    /// inside the band, positive above, negative below.
    pub gap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Comparison {
    pub rows: Vec<ComparisonRow>,
    pub missing_reference: Vec<YearMonth>,
    pub unmatched_reference: Vec<YearMonth>,
}

impl Comparison {
    pub fn inside_fraction(&self, metric: Metric) -> Option<f64> {
        let flags: Vec<bool> = self.rows.iter().filter(|r| r.metric == metric).filter_map(|r| r.inside).collect();
        (!flags.is_empty()).then(|| flags.iter().filter(|b| **b).count() as f64 / flags.len() as f64)
    }
}

pub fn band_gap(low: f64, high: f64, reference: f64) -> f64 {
    if reference > high {
        (reference - high) / high
    } else if reference < low {
        (reference - low) / low
    } else {
        0.0
    }
}

pub fn topdown_compare(bands: &[MonthlyBand], reference: &[ReferenceMonth]) -> Comparison {
    let refs: BTreeMap<YearMonth, &ReferenceMonth> = reference.iter().map(|r| (r.month, r)).collect();
    let mut rows = Vec::new();
    let mut missing_reference = Vec::new();
    for b in bands {
        let r = refs.get(&b.month);
        if r.is_none() {
            missing_reference.push(b.month);
        }
        let metrics = [
            (Metric::Km, b.raw.dist_km, b.low.dist_km, b.high.dist_km, r.map(|r| r.km)),
            (Metric::DieselM3, b.raw.fuel_l / 1000.0, b.low.fuel_l / 1000.0, b.high.fuel_l / 1000.0, r.map(|r| r.diesel_m3)),
            (Metric::Co2eT, b.raw.co2e_kg / 1000.0, b.low.co2e_kg / 1000.0, b.high.co2e_kg / 1000.0, r.map(|r| r.co2e_t)),
        ];
        for (metric, raw, low, high, reference) in metrics {
            rows.push(ComparisonRow {
                month: b.month,
                metric,
                raw,
                low,
                high,
                reference,
                inside: reference.map(|v| v >= low && v <= high),
                gap: reference.map(|v| band_gap(low, high, v)),
            });
        }
    }
    let computed: BTreeSet<YearMonth> = bands.iter().map(|b| b.month).collect();
    let unmatched_reference = refs.keys().filter(|m| !computed.contains(m)).copied().collect();
    Comparison { rows, missing_reference, unmatched_reference }
}

pub fn write_validation<W: Write>(w: W, cmp: &Comparison) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["month", "metric", "raw", "low", "high", "reference", "inside_band", "gap"])?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in &cmp.rows {
        wtr.write_record([
            r.month.to_string(),
            r.metric.as_str().to_string(),
            r.raw.to_string(),
            r.low.to_string(),
            r.high.to_string(),
            opt(r.reference),
            r.inside.map(|b| b.to_string()).unwrap_or_default(),
            opt(r.gap),
        ])?;
    }
    wtr.flush().map_err(|e| Error::data("validation", e.to_string()))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gapfill::Totals;
    use chrono::DateTime;

    fn row(line: &str, ts: &str, lat: f64, lon: f64, km: f64, kg: f64) -> SegmentEmission {
        SegmentEmission {
            vehicle_id: "v".into(),
            line_id: line.into(),
            t_start: DateTime::parse_from_rfc3339(ts).unwrap(),
            start: GeoPoint::new(lat, lon),
            dt_s: 120.0,
            euclid_m: km * 1000.0,
            corrected_m: km * 1000.0,
            speed_kmh: km * 30.0,
            fuel_l: kg / 2.51,
            co2e_kg: kg,
        }
    }

    fn spec() -> LatticeSpec {
        let b = BoundingBox::new(-23.0, -22.9, -43.3, -43.2).unwrap();
        LatticeSpec::covering(&b, 500.0).unwrap()
    }

    #[test]
    fn covering_lattice_covers() {
        let b = BoundingBox::new(-23.10, -22.70, -43.80, -43.10).unwrap();
        let s = LatticeSpec::covering(&b, 500.0).unwrap();
        assert!(s.covers(&b));
        assert_eq!(s.cell_of(GeoPoint::new(-23.10, -43.80)), Some((0, 0)));
        assert!(s.cell_of(GeoPoint::new(-23.2, -43.5)).is_none());
    }

    #[test]
    fn single_cell_sums_and_normalizes() {
        let rows = vec![
            row("A", "2015-03-03T10:00:00-03:00", -22.999, -43.299, 1.0, 1.0),
            row("A", "2015-03-03T10:02:00-03:00", -22.999, -43.2991, 1.0, 1.0),
        ];
        let g = aggregate_lattice(&rows, &spec(), &DayFilter::all());
        let hot: Vec<_> = g.cells.iter().enumerate().filter(|(_, c)| c.segment_count > 0).collect();
        assert_eq!(hot.len(), 1);
        assert_eq!(hot[0].1.co2e_kg, 2.0);
        assert_eq!(g.normalized[hot[0].0], 1.0);
    }

    #[test]
    fn normalization_against_the_max_cell() {
        let rows = vec![
            row("A", "2015-03-03T10:00:00-03:00", -22.999, -43.299, 1.0, 2.0),
            row("A", "2015-03-03T10:02:00-03:00", -22.95, -43.25, 1.0, 1.0),
        ];
        let g = aggregate_lattice(&rows, &spec(), &DayFilter::all());
        let mut vals: Vec<f64> = g.normalized.iter().copied().filter(|v| *v > 0.0).collect();
        vals.sort_by(f64::total_cmp);
        assert_eq!(vals, vec![0.5, 1.0]);
    }

    #[test]
    fn empty_lattice_is_zero() {
        let g = aggregate_lattice(&[], &spec(), &DayFilter::all());
        assert!(g.normalized.iter().all(|v| *v == 0.0));
        assert_eq!(g.overflow.segment_count, 0);
    }

    #[test]
    fn outside_points_go_to_overflow() {
        let rows = vec![row("A", "2015-03-03T10:00:00-03:00", 0.0, 0.0, 1.0, 3.0)];
        let g = aggregate_lattice(&rows, &spec(), &DayFilter::all());
        assert_eq!(g.overflow.co2e_kg, 3.0);
    }

    #[test]
    fn day_filter_restricts_weekdays() {
        let rows = vec![
            row("A", "2015-03-03T10:00:00-03:00", -22.999, -43.299, 1.0, 2.0), // Tue
            row("A", "2015-03-04T10:00:00-03:00", -22.999, -43.299, 1.0, 5.0), // Wed
        ];
        let f = DayFilter { weekdays: Some(vec![Weekday::Tue]), dates: None };
        let g = aggregate_lattice(&rows, &spec(), &f);
        let total: f64 = g.cells.iter().map(|c| c.co2e_kg).sum();
        assert_eq!(total, 2.0);
        assert_eq!(g.days, 1);
    }

    #[test]
    fn weekday_and_hour_profiles() {
        let rows = vec![
            row("A", "2015-03-02T10:00:00-03:00", 0.0, 0.0, 1.0, 4.0), // Mon
            row("A", "2015-03-03T10:00:00-03:00", 0.0, 0.0, 1.0, 10.0), // Tue
            row("A", "2015-03-10T11:00:00-03:00", 0.0, 0.0, 1.0, 20.0), // Tue
        ];
        let p = temporal_profile(&rows, &DayFilter::all());
        assert_eq!(p.weekday[1].mean_co2e_kg, 15.0);
        assert_eq!(p.weekday[0].mean_co2e_kg, 4.0);
        assert!(p.weekday[2..].iter().all(|w| w.total.co2e_kg == 0.0));
        assert_eq!(p.hourly[10].total.co2e_kg, 14.0);
        assert_eq!(p.hourly[11].total.co2e_kg, 20.0);

        let mondays = vec![rows[0].clone()];
        let p = temporal_profile(&mondays, &DayFilter::all());
        assert_eq!(p.weekday.iter().filter(|w| w.total.co2e_kg == 0.0).count(), 6);
    }

    #[test]
    fn line_ranking() {
        let rows = vec![
            row("B", "2015-03-02T10:00:00-03:00", 0.0, 0.0, 1.0, 1.0),
            row("A", "2015-03-02T10:00:00-03:00", 0.0, 0.0, 1.0, 3.0),
        ];
        let d = line_distribution(&rows);
        assert_eq!(d[0].line_id, "A");
        assert_eq!(d[0].cumulative_share, 0.75);
        assert_eq!(d[1].cumulative_share, 1.0);
        assert_eq!(top_share(&d, 0.5), 0.75);

        let single = line_distribution(&rows[..1]);
        assert_eq!(single[0].share, 1.0);
        assert_eq!(single[0].cumulative_share, 1.0);
    }

    #[test]
    fn freeflow_identity_and_ratio() {
        let mut rows = Vec::new();
        for i in 0..40 {
            let m = i % 60;
            rows.push(row("same", &format!("2015-03-03T01:{m:02}:00-03:00"), 0.0, 0.0, 1.0, 2.0));
            rows.push(row("same", &format!("2015-03-03T09:{m:02}:00-03:00"), 0.0, 0.0, 1.0, 2.0));
            rows.push(row("slow", &format!("2015-03-03T01:{m:02}:00-03:00"), 0.0, 0.0, 1.0, 2.0));
            rows.push(row("slow", &format!("2015-03-03T09:{m:02}:00-03:00"), 0.0, 0.0, 1.0, 3.0));
        }
        rows.push(row("sparse", "2015-03-03T01:00:00-03:00", 0.0, 0.0, 1.0, 2.0));
        let params = FreeFlowParams { tag_fraction: 0.5, ..Default::default() };
        let r = freeflow_analysis(&rows, &params).unwrap();
        assert_eq!(r.results.len(), 2);
        assert_eq!(r.results[0].line_id, "slow");
        assert!((r.results[0].impact - 1.5).abs() < 1e-12);
        assert_eq!(r.results[1].impact, 1.0);
        assert_eq!(r.results[0].tag, Some(ImpactTag::MostImpacted));
        assert_eq!(r.results[1].tag, Some(ImpactTag::LeastImpacted));
        assert_eq!(r.excluded.len(), 1);
        assert_eq!(r.excluded[0].0, "sparse");
    }

    #[test]
    fn overlapping_windows_are_rejected() {
        let p = FreeFlowParams { dawn: [0, 9], ..Default::default() };
        assert!(freeflow_analysis(&[], &p).is_err());
    }

    fn band(month: &str, low: f64, high: f64) -> MonthlyBand {
        let t = |kg: f64| Totals { co2e_kg: kg * 1000.0, fuel_l: kg * 1000.0 / 2.51, dist_km: kg };
        MonthlyBand { month: month.parse().unwrap(), raw: t(low * 0.8), low: t(low), high: t(high), filled_days: 1 }
    }

    #[test]
    fn topdown_gaps() {
        let bands = vec![band("2015-01", 100.0, 120.0), band("2015-02", 100.0, 120.0), band("2015-03", 1.0, 2.0)];
        let refs = vec![
            ReferenceMonth { month: "2015-01".parse().unwrap(), km: 110.0, diesel_m3: 0.0, co2e_t: 110.0 },
            ReferenceMonth { month: "2015-02".parse().unwrap(), km: 132.0, diesel_m3: 0.0, co2e_t: 132.0 },
            ReferenceMonth { month: "2015-05".parse().unwrap(), km: 1.0, diesel_m3: 1.0, co2e_t: 1.0 },
        ];
        let c = topdown_compare(&bands, &refs);
        let co2 = |m: &str| *c.rows.iter().find(|r| r.metric == Metric::Co2eT && r.month.to_string() == m).unwrap();
        assert_eq!(co2("2015-01").inside, Some(true));
        assert_eq!(co2("2015-01").gap, Some(0.0));
        assert_eq!(co2("2015-02").inside, Some(false));
        assert!((co2("2015-02").gap.unwrap() - 0.10).abs() < 1e-12);
        assert_eq!(co2("2015-03").reference, None);
        assert_eq!(c.missing_reference, vec!["2015-03".parse().unwrap()]);
        assert_eq!(c.unmatched_reference, vec!["2015-05".parse().unwrap()]);
        assert_eq!(band_gap(100.0, 120.0, 90.0), -0.1);
    }
}
