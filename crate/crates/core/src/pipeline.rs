//! Stage orchestration, intermediate files and the run manifest.
//!
//! Each stage is a plain function over in-memory values plus a writer for its
//! files. [`run_pipeline`] chains them in memory; the `run_*_stage` functions
//! start from the previous stage's files, so a chain of partial reruns writes
//! the same bytes as one full run.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::analytics::{
    aggregate_lattice, freeflow_analysis, line_distribution, read_reference, temporal_profile, topdown_compare,
    write_freeflow, write_lattice_geojson, write_lines, write_temporal, write_validation, Comparison, DayFilter,
    FreeFlowReport, LatticeGrid, LatticeSpec, LineShare, ReferenceMonth, TemporalProfile,
};
use crate::config::RunConfig;
use crate::emissions::{compute_emissions, read_emissions, write_emissions, FuelTable, SegmentEmission, SpeedCurve};
use crate::error::{Error, Result};
use crate::gapfill::{
    compute_expected_ranges, daily_counts, fill_missing_days, monthly_band, write_daily, write_monthly,
    write_ranges, DailyCount, ExpectedRanges, FillKind, FilledDay, MonthlyBand,
};
use crate::geo::StreetGraph;
use crate::ingest::{
    clean_records, dump_partitions, parse_records_named, partition_by_vehicle_day, IngestStats, ParseDiagnostic,
};
use crate::pairing::{build_all_segments, read_segments, write_segments, PairingStats, TravelSegment};
use crate::sinuosity::{estimate_from_segments, write_report, write_samples, SinuosityEstimate, SinuositySample};

pub const SEGMENTS_FILE: &str = "segments.csv";
pub const REJECTED_FILE: &str = "rejected_rows.csv";
pub const SINUOSITY_REPORT_FILE: &str = "sinuosity_report.csv";
pub const SINUOSITY_SUMMARY_FILE: &str = "sinuosity_summary.json";
pub const SINUOSITY_SAMPLES_FILE: &str = "sinuosity_samples.csv";
pub const EMISSIONS_FILE: &str = "segment_emissions.csv";
pub const DAILY_FILE: &str = "daily.csv";
pub const RANGES_FILE: &str = "expected_ranges.csv";
pub const MONTHLY_FILE: &str = "monthly_totals.csv";
pub const LATTICE_FILE: &str = "lattice.geojson";
pub const TEMPORAL_FILE: &str = "temporal.csv";
pub const LINES_FILE: &str = "lines.csv";
pub const FREEFLOW_FILE: &str = "freeflow.csv";
pub const VALIDATION_FILE: &str = "validation.csv";
pub const MANIFEST_FILE: &str = "manifest.json";
/// Worker count, output location and timings: everything that may differ
/// between runs producing identical results.
pub const RUN_INFO_FILE: &str = "run_info.json";

const STAGES: [&str; 6] = ["ingest", "pairing", "sinuosity", "emissions", "gapfill", "analytics"];

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub config: Value,
    pub seed: u64,
    /// Per-stage counts and warnings, keyed by stage name.
    pub stages: BTreeMap<String, Value>,
    pub mean_s: Option<f64>,
    /// "estimated" or "override".
    pub mean_s_source: Option<String>,
    pub warnings: Vec<String>,
}

impl Manifest {
    fn new(cfg: &RunConfig) -> Self {
        Manifest {
            tool: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            config: cfg.snapshot(),
            seed: cfg.sinuosity.seed,
            ..Default::default()
        }
    }

    fn set_stage(&mut self, name: &str, counts: Value, warnings: Vec<String>) {
        let mut v = counts;
        if let Some(m) = v.as_object_mut() {
            m.insert("warnings".into(), json!(warnings));
        }
        self.stages.insert(name.to_string(), v);
        // Stage order, not key order, so warnings read as the run went.
        self.warnings = STAGES
            .iter()
            .filter_map(|s| self.stages.get(*s))
            .filter_map(|v| v.get("warnings").and_then(Value::as_array))
            .flatten()
            .filter_map(|w| w.as_str().map(String::from))
            .collect();
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunInfo {
    pub workers: usize,
    pub output_dir: PathBuf,
    pub timings_ms: BTreeMap<String, f64>,
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?))
}

fn write_file(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> Result<()>) -> Result<()> {
    let mut w = create(path)?;
    f(&mut w)?;
    w.flush().map_err(|e| Error::io(path, e))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?))
}

/// Write to a sibling temp file, then rename over the target.
fn write_json_atomic<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let tmp = path.with_extension("json.tmp");
    write_file(&tmp, |w| {
        serde_json::to_writer_pretty(&mut *w, value)?;
        w.write_all(b"\n").map_err(|e| Error::io(&tmp, e))
    })?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    serde_json::from_reader(open(path)?).map_err(|e| Error::data(path.display().to_string(), e.to_string()))
}

fn read_or_default<T: for<'de> Deserialize<'de> + Default>(path: &Path) -> Result<T> {
    if path.is_file() {
        read_json(path)
    } else {
        Ok(T::default())
    }
}

/// Runs `f` on a pool of `workers` threads (0: one per core).
pub fn with_workers<R: Send>(workers: usize, f: impl FnOnce() -> R + Send) -> Result<R> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Internal(e.to_string()))?;
    Ok(pool.install(f))
}

pub fn load_graph(cfg: &RunConfig) -> Result<StreetGraph> {
    match (&cfg.inputs.nodes, &cfg.inputs.edges, &cfg.inputs.graph_geojson) {
        (Some(n), Some(e), _) => StreetGraph::from_csv_files(&cfg.resolve(n), &cfg.resolve(e)),
        (_, _, Some(g)) => {
            let p = cfg.resolve(g);
            let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
            StreetGraph::from_geojson(&text).map_err(|e| Error::data(p.display().to_string(), e.to_string()))
        }
        _ => Err(Error::config("no street graph configured")),
    }
}

/// The configured curve, or the built-in one with a warning.
pub fn load_curve(cfg: &RunConfig) -> Result<(SpeedCurve<f64>, Option<String>)> {
    match &cfg.inputs.curve {
        Some(p) => Ok((SpeedCurve::from_csv_file(&cfg.resolve(p))?, None)),
        None => Ok((
            SpeedCurve::illustrative_urban_bus(),
            Some("no consumption curve configured; using the built-in illustrative curve".into()),
        )),
    }
}

pub fn load_fuels(cfg: &RunConfig) -> Result<FuelTable<f64>> {
    FuelTable::from_csv_file(&cfg.resolve(&cfg.inputs.fuels))
}

pub fn load_reference(cfg: &RunConfig) -> Result<Option<Vec<ReferenceMonth>>> {
    cfg.inputs
        .reference
        .as_ref()
        .map(|p| {
            let p = cfg.resolve(p);
            read_reference(open(&p)?).map_err(|e| Error::data(p.display().to_string(), e.to_string()))
        })
        .transpose()
}

#[derive(Debug, Clone, Default)]
pub struct IngestOutput {
    pub stats: IngestStats,
    pub pairing: PairingStats,
    pub partitions: usize,
    pub segments: Vec<TravelSegment>,
    pub diagnostics: Vec<ParseDiagnostic>,
}

impl IngestOutput {
    fn counts(&self) -> (Value, Value, Vec<String>) {
        let mut warnings = Vec::new();
        if self.stats.rows_rejected_parse > 0 {
            warnings.push(format!("{} rows could not be parsed (see {REJECTED_FILE})", self.stats.rows_rejected_parse));
        }
        if self.stats.rows_rejected_bounds > 0 {
            warnings.push(format!("{} rows fell outside the bounding box", self.stats.rows_rejected_bounds));
        }
        (
            json!({
                "rows_read": self.stats.rows_read,
                "rows_parsed": self.stats.rows_parsed,
                "rows_rejected_parse": self.stats.rows_rejected_parse,
                "rows_rejected_bounds": self.stats.rows_rejected_bounds,
                "rows_clean": self.stats.clean_count(),
                "partitions": self.partitions,
            }),
            json!({
                "pairs_considered": self.pairing.pairs_considered,
                "segments": self.pairing.segments,
                "gap_skipped": self.pairing.gap_skipped,
                "zero_dt": self.pairing.zero_dt,
                "speed_rejected": self.pairing.speed_rejected,
                "line_mismatch": self.pairing.line_mismatch,
            }),
            warnings,
        )
    }
}

/// Parse, clean, partition and pair the configured GPS file.
pub fn ingest(cfg: &RunConfig) -> Result<IngestOutput> {
    let path = cfg.resolve(&cfg.inputs.gps);
    let parsed = parse_records_named(open(&path)?, &cfg.gps_format, &path)?;
    let cleaned = clean_records(parsed, &cfg.bounds()?, cfg.offset()?);
    let parts = partition_by_vehicle_day(cleaned.records);
    if cfg.debug_dump {
        dump_partitions(&cfg.output_path("partitions"), &parts)?;
    }
    let batch = build_all_segments(&parts, &cfg.pairing);
    Ok(IngestOutput {
        stats: cleaned.stats,
        pairing: batch.stats,
        partitions: parts.len(),
        segments: batch.segments,
        diagnostics: cleaned.diagnostics,
    })
}

fn write_ingest(cfg: &RunConfig, out: &IngestOutput) -> Result<()> {
    write_file(&cfg.output_path(SEGMENTS_FILE), |w| write_segments(w, &out.segments))?;
    write_file(&cfg.output_path(REJECTED_FILE), |w| {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["row", "column", "message"])?;
        for d in &out.diagnostics {
            wtr.write_record([d.row.to_string(), d.column.unwrap_or("").to_string(), d.message.clone()])?;
        }
        wtr.flush().map_err(|e| Error::data(REJECTED_FILE, e.to_string()))
    })
}

pub fn sinuosity(
    cfg: &RunConfig,
    segments: &[TravelSegment],
    graph: &StreetGraph,
) -> Result<(SinuosityEstimate, Vec<SinuositySample>)> {
    estimate_from_segments(segments, graph, &cfg.pairing, &cfg.sinuosity)
}

fn sinuosity_counts(est: &SinuosityEstimate) -> (Value, Vec<String>) {
    let mut warnings = Vec::new();
    if est.sample_size < 30 {
        warnings.push(format!("sinuosity mean rests on only {} samples", est.sample_size));
    }
    let d = &est.dispositions;
    (
        json!({
            "mean_s": est.mean_s,
            "drawn": est.drawn,
            "used": est.sample_size,
            "fraction_sampled": est.fraction_sampled,
            "zero_path": d.zero_path,
            "speed_rejected": d.speed_rejected,
            "unsnappable": d.unsnappable,
            "unreachable": d.unreachable,
            "below_tolerance": d.below_tolerance,
        }),
        warnings,
    )
}

fn write_sinuosity(cfg: &RunConfig, est: &SinuosityEstimate, samples: &[SinuositySample]) -> Result<()> {
    write_file(&cfg.output_path(SINUOSITY_REPORT_FILE), |w| write_report(w, est))?;
    write_json_atomic(&cfg.output_path(SINUOSITY_SUMMARY_FILE), est)?;
    if cfg.debug_dump {
        write_file(&cfg.output_path(SINUOSITY_SAMPLES_FILE), |w| write_samples(w, samples))?;
    }
    Ok(())
}

pub fn emissions(
    cfg: &RunConfig,
    segments: &[TravelSegment],
    mean_s: f64,
    curve: &SpeedCurve<f64>,
    fuels: &FuelTable<f64>,
) -> Result<Vec<SegmentEmission>> {
    compute_emissions(segments, mean_s, curve, fuels, &cfg.pairing)
}

fn emissions_counts(rows: &[SegmentEmission], mean_s: f64, curve_warning: Option<String>) -> (Value, Vec<String>) {
    let total = crate::aggregate::grand_total(rows);
    (
        json!({
            "segments": rows.len(),
            "mean_s": mean_s,
            "dist_km": total.dist_km,
            "fuel_l": total.fuel_l,
            "co2e_kg": total.co2e_kg,
        }),
        curve_warning.into_iter().collect(),
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct GapfillOutput {
    pub days: Vec<DailyCount>,
    pub ranges: ExpectedRanges,
    pub filled: Vec<FilledDay>,
    pub bands: Vec<MonthlyBand>,
}

pub fn gapfill(cfg: &RunConfig, rows: &[SegmentEmission]) -> Result<GapfillOutput> {
    let days = daily_counts(rows, cfg.gapfill_period()?);
    let ranges = compute_expected_ranges(&days, cfg.gapfill.min_observations);
    let filled = fill_missing_days(&days, &ranges);
    let bands = monthly_band(&filled);
    Ok(GapfillOutput { days, ranges, filled, bands })
}

fn gapfill_counts(g: &GapfillOutput) -> (Value, Vec<String>) {
    let count = |k: FillKind| g.filled.iter().filter(|f| f.kind == k).count();
    let insufficient: Vec<String> = g
        .ranges
        .by_weekday
        .iter()
        .flatten()
        .filter(|r| !r.sufficient)
        .map(|r| format!("{} ({} days)", r.weekday, r.observations))
        .collect();
    let warnings = if insufficient.is_empty() {
        vec![]
    } else {
        vec![format!("expected ranges rest on few days for {}", insufficient.join(", "))]
    };
    (
        json!({
            "days": g.days.len(),
            "pass_through": count(FillKind::PassThrough),
            "scaled": count(FillKind::Scaled),
            "from_weekday_mean": count(FillKind::FromWeekdayMean),
            "months": g.bands.len(),
        }),
        warnings,
    )
}

fn write_gapfill(cfg: &RunConfig, g: &GapfillOutput) -> Result<()> {
    write_file(&cfg.output_path(DAILY_FILE), |w| write_daily(w, &g.filled))?;
    write_file(&cfg.output_path(RANGES_FILE), |w| write_ranges(w, &g.ranges))?;
    write_file(&cfg.output_path(MONTHLY_FILE), |w| write_monthly(w, &g.bands))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnalyticsOutput {
    pub lattice: LatticeGrid,
    pub temporal: TemporalProfile,
    pub lines: Vec<LineShare>,
    pub freeflow: FreeFlowReport,
    pub comparison: Option<Comparison>,
}

pub fn day_filter(cfg: &RunConfig, g: &GapfillOutput) -> DayFilter {
    DayFilter {
        weekdays: cfg.analysis.weekdays.clone(),
        dates: cfg
            .analysis
            .best_days_only
            .then(|| g.ranges.best_days(&g.days).into_iter().collect()),
    }
}

pub fn analytics(
    cfg: &RunConfig,
    rows: &[SegmentEmission],
    g: &GapfillOutput,
    reference: Option<&[ReferenceMonth]>,
) -> Result<AnalyticsOutput> {
    let spec = LatticeSpec::covering(&cfg.bounds()?, cfg.lattice.cell_size_m)?;
    let filter = day_filter(cfg, g);
    Ok(AnalyticsOutput {
        lattice: aggregate_lattice(rows, &spec, &filter),
        temporal: temporal_profile(rows, &DayFilter::all()),
        lines: line_distribution(rows),
        freeflow: freeflow_analysis(rows, &cfg.freeflow)?,
        comparison: reference.map(|r| topdown_compare(&g.bands, r)),
    })
}

fn analytics_counts(a: &AnalyticsOutput) -> (Value, Vec<String>) {
    let mut warnings = Vec::new();
    if a.lattice.overflow.segment_count > 0 {
        warnings.push(format!("{} segments start outside the lattice", a.lattice.overflow.segment_count));
    }
    if !a.freeflow.excluded.is_empty() {
        warnings.push(format!("{} lines excluded from the free-flow comparison", a.freeflow.excluded.len()));
    }
    if let Some(c) = &a.comparison {
        if !c.missing_reference.is_empty() {
            let m: Vec<String> = c.missing_reference.iter().map(|m| m.to_string()).collect();
            warnings.push(format!("no reference totals for {}", m.join(", ")));
        }
    }
    (
        json!({
            "lattice_cells": a.lattice.cells.len(),
            "lattice_overflow_segments": a.lattice.overflow.segment_count,
            "lattice_days": a.lattice.days,
            "lines": a.lines.len(),
            "freeflow_lines": a.freeflow.results.len(),
            "freeflow_excluded": a.freeflow.excluded.len(),
            "validation_rows": a.comparison.as_ref().map(|c| c.rows.len()),
        }),
        warnings,
    )
}

fn write_analytics(cfg: &RunConfig, a: &AnalyticsOutput) -> Result<()> {
    write_file(&cfg.output_path(LATTICE_FILE), |w| write_lattice_geojson(w, &a.lattice))?;
    write_file(&cfg.output_path(TEMPORAL_FILE), |w| write_temporal(w, &a.temporal))?;
    write_file(&cfg.output_path(LINES_FILE), |w| write_lines(w, &a.lines))?;
    write_file(&cfg.output_path(FREEFLOW_FILE), |w| write_freeflow(w, &a.freeflow))?;
    if let Some(c) = &a.comparison {
        write_file(&cfg.output_path(VALIDATION_FILE), |w| write_validation(w, c))?;
    }
    Ok(())
}

/// Tracks timings and the manifest across the stages of one invocation.
struct Run<'a> {
    cfg: &'a RunConfig,
    manifest: Manifest,
    info: RunInfo,
    timed: std::collections::BTreeSet<&'static str>,
}

impl<'a> Run<'a> {
    /// `resume` keeps stage entries written by earlier invocations.
    fn start(cfg: &'a RunConfig, resume: bool) -> Result<Self> {
        let dir = cfg.resolve(&cfg.output_dir);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let (mut manifest, mut info) = if resume {
            (
                read_or_default::<Manifest>(&dir.join(MANIFEST_FILE))?,
                read_or_default::<RunInfo>(&dir.join(RUN_INFO_FILE))?,
            )
        } else {
            Default::default()
        };
        let fresh = Manifest::new(cfg);
        manifest.tool = fresh.tool;
        manifest.version = fresh.version;
        manifest.config = fresh.config;
        manifest.seed = fresh.seed;
        info.workers = if cfg.workers == 0 { rayon::current_num_threads() } else { cfg.workers };
        info.output_dir = dir;
        Ok(Run { cfg, manifest, info, timed: Default::default() })
    }

    fn stage<T>(&mut self, name: &'static str, f: impl FnOnce(&RunConfig) -> Result<T>) -> Result<T> {
        let t0 = Instant::now();
        let out = f(self.cfg).map_err(|e| e.in_stage(name))?;
        let ms = t0.elapsed().as_secs_f64() * 1000.0;
        let slot = self.info.timings_ms.entry(name.to_string()).or_default();
        // Earlier invocations' timings are replaced, repeated entries within this one add up.
        if self.timed.insert(name) {
            *slot = 0.0;
        }
        *slot += ms;
        log::debug!("{name}: {ms:.1} ms");
        Ok(out)
    }

    fn record(&mut self, name: &str, counts: Value, warnings: Vec<String>) {
        for w in &warnings {
            log::warn!("{name}: {w}");
        }
        self.manifest.set_stage(name, counts, warnings);
    }

    fn set_mean_s(&mut self, mean_s: f64, source: &str) {
        self.manifest.mean_s = Some(mean_s);
        self.manifest.mean_s_source = Some(source.to_string());
    }

    fn finish(self) -> Result<(Manifest, RunInfo)> {
        write_json_atomic(&self.cfg.output_path(MANIFEST_FILE), &self.manifest)?;
        write_json_atomic(&self.cfg.output_path(RUN_INFO_FILE), &self.info)?;
        Ok((self.manifest, self.info))
    }
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub manifest: Manifest,
    pub info: RunInfo,
    pub mean_s: f64,
    pub emissions: Vec<SegmentEmission>,
    pub gapfill: GapfillOutput,
    pub analytics: AnalyticsOutput,
}

fn mean_s_for(cfg: &RunConfig, estimated: impl FnOnce() -> Result<f64>) -> Result<(f64, &'static str)> {
    match cfg.mean_s_override {
        Some(s) => Ok((s, "override")),
        None => Ok((estimated()?, "estimated")),
    }
}

/// ingest -> pairing -> sinuosity -> emissions -> gapfill -> analytics, all
/// outputs written under `cfg.output_dir`.
pub fn run_pipeline(cfg: &RunConfig) -> Result<RunSummary> {
    cfg.validate()?;
    with_workers(cfg.workers, || run_pipeline_inner(cfg))?
}

fn run_pipeline_inner(cfg: &RunConfig) -> Result<RunSummary> {
    let mut run = Run::start(cfg, false)?;
    let (curve, curve_warning) = run.stage("emissions", load_curve)?;
    let fuels = run.stage("emissions", load_fuels)?;
    let reference = run.stage("analytics", load_reference)?;
    let graph = run.stage("sinuosity", load_graph)?;

    let ing = run.stage("ingest", |c| {
        let out = ingest(c)?;
        write_ingest(c, &out)?;
        Ok(out)
    })?;
    let (ic, pc, iw) = ing.counts();
    run.record("ingest", ic, iw);
    run.record("pairing", pc, vec![]);

    let segments = &ing.segments;
    let est = run.stage("sinuosity", |c| {
        if let Some(s) = c.mean_s_override {
            return Ok(SinuosityEstimate::fixed(s));
        }
        let (est, samples) = sinuosity(c, segments, &graph)?;
        write_sinuosity(c, &est, &samples)?;
        Ok(est)
    })?;
    let (mean_s, source) = mean_s_for(cfg, || Ok(est.mean_s))?;
    if source == "estimated" {
        let (sc, sw) = sinuosity_counts(&est);
        run.record("sinuosity", sc, sw);
    }
    run.set_mean_s(mean_s, source);

    let rows = run.stage("emissions", |c| {
        let rows = emissions(c, segments, mean_s, &curve, &fuels)?;
        write_file(&c.output_path(EMISSIONS_FILE), |w| write_emissions(w, &rows))?;
        Ok(rows)
    })?;
    let (ec, ew) = emissions_counts(&rows, mean_s, curve_warning);
    run.record("emissions", ec, ew);

    let g = run.stage("gapfill", |c| {
        let g = gapfill(c, &rows)?;
        write_gapfill(c, &g)?;
        Ok(g)
    })?;
    let (gc, gw) = gapfill_counts(&g);
    run.record("gapfill", gc, gw);

    let a = run.stage("analytics", |c| {
        let a = analytics(c, &rows, &g, reference.as_deref())?;
        write_analytics(c, &a)?;
        Ok(a)
    })?;
    let (ac, aw) = analytics_counts(&a);
    run.record("analytics", ac, aw);

    let (manifest, info) = run.finish()?;
    Ok(RunSummary { manifest, info, mean_s, emissions: rows, gapfill: g, analytics: a })
}

/// `ingest`: GPS file to segments.csv.
pub fn run_ingest_stage(cfg: &RunConfig) -> Result<IngestOutput> {
    cfg.validate()?;
    with_workers(cfg.workers, || {
        let mut run = Run::start(cfg, true)?;
        let out = run.stage("ingest", |c| {
            let out = ingest(c)?;
            write_ingest(c, &out)?;
            Ok(out)
        })?;
        let (ic, pc, iw) = out.counts();
        run.record("ingest", ic, iw);
        run.record("pairing", pc, vec![]);
        run.finish()?;
        Ok(out)
    })?
}

/// `sinuosity`: segments file to sinuosity_report.csv and the summary.
pub fn run_sinuosity_stage(cfg: &RunConfig, segments_path: Option<&Path>) -> Result<SinuosityEstimate> {
    cfg.validate()?;
    with_workers(cfg.workers, || {
        let mut run = Run::start(cfg, true)?;
        let est = run.stage("sinuosity", |c| {
            let path = segments_path.map_or_else(|| c.output_path(SEGMENTS_FILE), Path::to_path_buf);
            let segments = read_segments(open(&path)?)?;
            let graph = load_graph(c)?;
            let (est, samples) = sinuosity(c, &segments, &graph)?;
            write_sinuosity(c, &est, &samples)?;
            Ok(est)
        })?;
        let (sc, sw) = sinuosity_counts(&est);
        run.record("sinuosity", sc, sw);
        run.set_mean_s(est.mean_s, "estimated");
        run.finish()?;
        Ok(est)
    })?
}

/// Mean sinuosity from the override or the saved summary.
fn saved_mean_s(cfg: &RunConfig) -> Result<(f64, &'static str)> {
    mean_s_for(cfg, || {
        let est: SinuosityEstimate = read_json(&cfg.output_path(SINUOSITY_SUMMARY_FILE))?;
        Ok(est.mean_s)
    })
}

fn emissions_from_saved(cfg: &RunConfig, mean_s: f64) -> Result<(Vec<SegmentEmission>, Option<String>)> {
    let segments = read_segments(open(&cfg.output_path(SEGMENTS_FILE))?)?;
    let (curve, warning) = load_curve(cfg)?;
    let fuels = load_fuels(cfg)?;
    Ok((emissions(cfg, &segments, mean_s, &curve, &fuels)?, warning))
}

/// `emissions`: segments and mean sinuosity to segment_emissions.csv.
pub fn run_emissions_stage(cfg: &RunConfig) -> Result<Vec<SegmentEmission>> {
    cfg.validate()?;
    with_workers(cfg.workers, || {
        let mut run = Run::start(cfg, true)?;
        let (mean_s, source) = run.stage("emissions", saved_mean_s)?;
        let (rows, warning) = run.stage("emissions", |c| {
            let out = emissions_from_saved(c, mean_s)?;
            write_file(&c.output_path(EMISSIONS_FILE), |w| write_emissions(w, &out.0))?;
            Ok(out)
        })?;
        run.set_mean_s(mean_s, source);
        let (ec, ew) = emissions_counts(&rows, mean_s, warning);
        run.record("emissions", ec, ew);
        run.finish()?;
        Ok(rows)
    })?
}

/// `gapfill`: segment emissions to daily, expected-range and monthly files.
pub fn run_gapfill_stage(cfg: &RunConfig) -> Result<GapfillOutput> {
    cfg.validate()?;
    with_workers(cfg.workers, || {
        let mut run = Run::start(cfg, true)?;
        let g = run.stage("gapfill", |c| {
            let rows = read_emissions(open(&c.output_path(EMISSIONS_FILE))?)?;
            let g = gapfill(c, &rows)?;
            write_gapfill(c, &g)?;
            Ok(g)
        })?;
        let (gc, gw) = gapfill_counts(&g);
        run.record("gapfill", gc, gw);
        run.finish()?;
        Ok(g)
    })?
}

/// `analyze`: policy products from segment_emissions.csv. With a mean
/// sinuosity override the emissions are first recomputed from segments.csv.
pub fn run_analyze_stage(cfg: &RunConfig) -> Result<AnalyticsOutput> {
    cfg.validate()?;
    with_workers(cfg.workers, || {
        let mut run = Run::start(cfg, true)?;
        let rows = match cfg.mean_s_override {
            Some(s) => {
                let (rows, _) = run.stage("analytics", |c| emissions_from_saved(c, s))?;
                run.set_mean_s(s, "override");
                rows
            }
            None => run.stage("analytics", |c| read_emissions(open(&c.output_path(EMISSIONS_FILE))?))?,
        };
        let reference = run.stage("analytics", load_reference)?;
        let a = run.stage("analytics", |c| {
            let g = gapfill(c, &rows)?;
            let a = analytics(c, &rows, &g, reference.as_deref())?;
            write_analytics(c, &a)?;
            Ok(a)
        })?;
        let (ac, aw) = analytics_counts(&a);
        run.record("analytics", ac, aw);
        run.finish()?;
        Ok(a)
    })?
}
