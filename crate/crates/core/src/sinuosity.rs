//! Fleet-wide sinuosity factor: a seeded random sample of segments is
//! reconstructed on the street graph, the mean ratio of path distance to
//! straight-line distance is taken, and that single factor then corrects
//! every segment's straight-line distance.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::{NodeId, StreetGraph};
use crate::pairing::{segment_speed, PairingConfig, TravelSegment};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SinuosityConfig {
    pub fraction: f64,
    pub seed: u64,
    /// Pings farther than this from every graph node are left out of the sample (m).
    pub snap_radius_m: f64,
    /// Used ratios may fall this far below 1 before being set aside.
    pub tolerance: f64,
    pub bin_width: f64,
    pub bin_max: f64,
}

impl Default for SinuosityConfig {
    fn default() -> Self {
        SinuosityConfig {
            fraction: 0.01,
            seed: 42,
            snap_radius_m: 100.0,
            tolerance: 0.05,
            bin_width: 0.05,
            bin_max: 3.0,
        }
    }
}

impl SinuosityConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.fraction > 0.0 && self.fraction <= 1.0) {
            return Err(Error::config(format!("sinuosity.fraction must be in (0, 1], got {}", self.fraction)));
        }
        if !(self.snap_radius_m > 0.0) {
            return Err(Error::config("sinuosity.snap_radius_m must be positive"));
        }
        if !(0.0..1.0).contains(&self.tolerance) {
            return Err(Error::config("sinuosity.tolerance must be in [0, 1)"));
        }
        if !(self.bin_width > 0.0 && self.bin_max > 1.0) {
            return Err(Error::config("sinuosity histogram needs bin_width > 0 and bin_max > 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Disposition {
    Used,
    /// Both pings snapped to the same corner; the path distance falls back to
    /// the straight-line distance.
    ZeroPath,
    SpeedRejected,
    Unsnappable,
    Unreachable,
    /// Ratio below `1 - tolerance`: snapping shortened the path more than
    /// corner rounding can explain.
    BelowTolerance,
}

impl Disposition {
    pub fn as_str(&self) -> &'static str {
        match self {
            Disposition::Used => "used",
            Disposition::ZeroPath => "zero_path",
            Disposition::SpeedRejected => "speed_rejected",
            Disposition::Unsnappable => "unsnappable",
            Disposition::Unreachable => "unreachable",
            Disposition::BelowTolerance => "below_tolerance",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SinuositySample {
    /// Index of the segment in the full segment list.
    pub segment: usize,
    pub origin_node: Option<NodeId>,
    pub dest_node: Option<NodeId>,
    /// Reconstructed path distance (m).
    pub real_m: f64,
    pub euclid_m: f64,
    pub sinuosity: f64,
    pub disposition: Disposition,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DispositionCounts {
    pub used: u64,
    pub zero_path: u64,
    pub speed_rejected: u64,
    pub unsnappable: u64,
    pub unreachable: u64,
    pub below_tolerance: u64,
}

impl DispositionCounts {
    pub fn tally(samples: &[SinuositySample]) -> Self {
        let mut c = DispositionCounts::default();
        for s in samples {
            *match s.disposition {
                Disposition::Used => &mut c.used,
                Disposition::ZeroPath => &mut c.zero_path,
                Disposition::SpeedRejected => &mut c.speed_rejected,
                Disposition::Unsnappable => &mut c.unsnappable,
                Disposition::Unreachable => &mut c.unreachable,
                Disposition::BelowTolerance => &mut c.below_tolerance,
            } += 1;
        }
        c
    }

    pub fn total(&self) -> u64 {
        self.used + self.zero_path + self.speed_rejected + self.unsnappable + self.unreachable + self.below_tolerance
    }
}

impl std::fmt::Display for DispositionCounts {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "used={} zero_path={} speed_rejected={} unsnappable={} unreachable={} below_tolerance={}",
            self.used, self.zero_path, self.speed_rejected, self.unsnappable, self.unreachable, self.below_tolerance
        )
    }
}

/// Fixed-width bins from 1.0 up to `max`, plus an overflow bin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub width: f64,
    pub max: f64,
    pub counts: Vec<u64>,
    pub overflow: u64,
}

impl Histogram {
    pub fn new(width: f64, max: f64) -> Self {
        let bins = ((max - 1.0) / width).round().max(1.0) as usize;
        Histogram {
            width,
            max,
            counts: vec![0; bins],
            overflow: 0,
        }
    }

    pub fn add(&mut self, value: f64) {
        let idx = ((value - 1.0) / self.width).floor();
        if value >= self.max || idx as usize >= self.counts.len() {
            self.overflow += 1;
        } else {
            self.counts[idx.max(0.0) as usize] += 1;
        }
    }

    pub fn mass(&self) -> u64 {
        self.counts.iter().sum::<u64>() + self.overflow
    }

    pub fn bin_edges(&self, i: usize) -> (f64, f64) {
        let lo = 1.0 + i as f64 * self.width;
        (lo, (1.0 + (i + 1) as f64 * self.width).min(self.max))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SinuosityEstimate {
    pub mean_s: f64,
    /// Samples that entered the mean.
    pub sample_size: u64,
    /// Segments drawn into the sample, whatever their disposition.
    pub drawn: u64,
    /// drawn / total segments.
    pub fraction_sampled: f64,
    pub histogram: Histogram,
    pub dispositions: DispositionCounts,
}

impl SinuosityEstimate {
    /// An estimate carrying only a factor, as used for `--mean-s` overrides.
    pub fn fixed(mean_s: f64) -> Self {
        SinuosityEstimate {
            mean_s,
            sample_size: 0,
            drawn: 0,
            fraction_sampled: 0.0,
            histogram: Histogram::new(0.05, 3.0),
            dispositions: DispositionCounts::default(),
        }
    }
}

/// Bernoulli sample of segment indices, each kept with probability
/// `fraction`, driven by a ChaCha8 stream seeded with `seed`.
pub fn sample_segments(segments: &[TravelSegment], fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::config(format!("sample fraction must be in (0, 1], got {fraction}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..segments.len())
        .filter(|_| rng.random::<f64>() < fraction)
        .collect())
}

fn reconstruct_one(
    index: usize,
    seg: &TravelSegment,
    graph: &StreetGraph,
    cfg: &PairingConfig,
    scfg: &SinuosityConfig,
) -> SinuositySample {
    let mut out = SinuositySample {
        segment: index,
        origin_node: graph.snap_to_node(seg.start.position, scfg.snap_radius_m),
        dest_node: graph.snap_to_node(seg.end.position, scfg.snap_radius_m),
        real_m: 0.0,
        euclid_m: seg.euclid_m,
        sinuosity: 0.0,
        disposition: Disposition::Unsnappable,
    };
    let (Some(o), Some(d)) = (out.origin_node, out.dest_node) else {
        return out;
    };
    let path = match graph.shortest_path_distance(o, d) {
        Ok(p) => p,
        // Snapped ids always exist in the graph.
        Err(_) => return out,
    };
    if !path.reachable {
        out.disposition = Disposition::Unreachable;
        return out;
    }
    out.real_m = path.distance;
    if segment_speed(path.distance, seg.dt_s) > cfg.max_speed_kmh {
        out.disposition = Disposition::SpeedRejected;
        return out;
    }
    if path.distance == 0.0 {
        out.real_m = seg.euclid_m;
        out.sinuosity = 1.0;
        out.disposition = Disposition::ZeroPath;
        return out;
    }
    out.sinuosity = path.distance / seg.euclid_m;
    out.disposition = if out.sinuosity < 1.0 - scfg.tolerance {
        Disposition::BelowTolerance
    } else {
        Disposition::Used
    };
    out
}

/// Snaps, routes and classifies each sampled segment. Runs in parallel over
/// the sample; output order follows `sample`.
pub fn reconstruct_sample(
    segments: &[TravelSegment],
    sample: &[usize],
    graph: &StreetGraph,
    cfg: &PairingConfig,
    scfg: &SinuosityConfig,
) -> Vec<SinuositySample> {
    sample
        .par_iter()
        .map(|&i| reconstruct_one(i, &segments[i], graph, cfg, scfg))
        .collect()
}

/// Arithmetic mean of the used ratios, each floored at 1.0.
pub fn estimate_sinuosity(samples: &[SinuositySample], scfg: &SinuosityConfig) -> Result<SinuosityEstimate> {
    let dispositions = DispositionCounts::tally(samples);
    if dispositions.used == 0 {
        return Err(Error::NoUsableSamples(dispositions.to_string()));
    }
    let mut used: Vec<f64> = samples
        .iter()
        .filter(|s| s.disposition == Disposition::Used)
        .map(|s| s.sinuosity.max(1.0))
        .collect();
    // Summing in sorted order makes the mean independent of sample order.
    used.sort_by(f64::total_cmp);
    let mut histogram = Histogram::new(scfg.bin_width, scfg.bin_max);
    used.iter().for_each(|&s| histogram.add(s));
    let mean_s = used.iter().sum::<f64>() / used.len() as f64;
    Ok(SinuosityEstimate {
        mean_s,
        sample_size: used.len() as u64,
        drawn: samples.len() as u64,
        fraction_sampled: 0.0,
        histogram,
        dispositions,
    })
}

/// Sample, reconstruct and estimate in one call.
pub fn estimate_from_segments(
    segments: &[TravelSegment],
    graph: &StreetGraph,
    cfg: &PairingConfig,
    scfg: &SinuosityConfig,
) -> Result<(SinuosityEstimate, Vec<SinuositySample>)> {
    let sample = sample_segments(segments, scfg.fraction, scfg.seed)?;
    let samples = reconstruct_sample(segments, &sample, graph, cfg, scfg);
    let mut est = estimate_sinuosity(&samples, scfg)?;
    est.fraction_sampled = if segments.is_empty() {
        0.0
    } else {
        sample.len() as f64 / segments.len() as f64
    };
    Ok((est, samples))
}

/// Straight-line distance scaled by the factor, except below the near
/// threshold where the straight-line distance stands.
#[inline]
pub fn corrected_distance<T: Scalar>(euclid: T, mean_s: T, near_threshold: T) -> T {
    if euclid < near_threshold {
        euclid
    } else {
        euclid * mean_s
    }
}

pub fn write_report<W: Write>(w: W, est: &SinuosityEstimate) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["bin_low", "bin_high", "count"])?;
    let h = &est.histogram;
    for (i, c) in h.counts.iter().enumerate() {
        let (lo, hi) = h.bin_edges(i);
        wtr.write_record([format!("{lo:.4}"), format!("{hi:.4}"), c.to_string()])?;
    }
    wtr.write_record([format!("{:.4}", h.max), "inf".to_string(), h.overflow.to_string()])?;
    wtr.flush().map_err(|e| Error::data("sinuosity report", e.to_string()))?;
    Ok(())
}

pub fn write_samples<W: Write>(w: W, samples: &[SinuositySample]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["segment", "origin_node", "dest_node", "real_m", "euclid_m", "sinuosity", "disposition"])?;
    let node = |n: Option<NodeId>| n.map(|v| v.to_string()).unwrap_or_default();
    for s in samples {
        wtr.write_record([
            s.segment.to_string(),
            node(s.origin_node),
            node(s.dest_node),
            s.real_m.to_string(),
            s.euclid_m.to_string(),
            s.sinuosity.to_string(),
            s.disposition.as_str().to_string(),
        ])?;
    }
    wtr.flush().map_err(|e| Error::data("sinuosity samples", e.to_string()))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::{Edge, LatLon};
    use crate::pairing::SegmentEnd;
    use chrono::DateTime;

    fn used(s: f64) -> SinuositySample {
        SinuositySample {
            segment: 0,
            origin_node: Some(1),
            dest_node: Some(2),
            real_m: s * 100.0,
            euclid_m: 100.0,
            sinuosity: s,
            disposition: Disposition::Used,
        }
    }

    fn seg(a: (f64, f64), b: (f64, f64), dt: f64) -> TravelSegment {
        let t = DateTime::parse_from_rfc3339("2015-03-03T10:00:00-03:00").unwrap();
        let pa = LatLon::new(a.0, a.1);
        let pb = LatLon::new(b.0, b.1);
        TravelSegment {
            vehicle_id: "v".into(),
            line_id: "l".into(),
            start: SegmentEnd { timestamp: t, position: pa, source_row: 1 },
            end: SegmentEnd {
                timestamp: t + chrono::Duration::milliseconds((dt * 1000.0) as i64),
                position: pb,
                source_row: 2,
            },
            dt_s: dt,
            euclid_m: crate::geo::haversine_distance(pa, pb),
        }
    }

    #[test]
    fn mean_of_used_values() {
        let est = estimate_sinuosity(&[used(1.0), used(1.4)], &SinuosityConfig::default()).unwrap();
        assert!((est.mean_s - 1.2).abs() < 1e-15);
        assert_eq!(est.histogram.mass(), 2);
    }

    #[test]
    fn slightly_short_paths_count_as_one() {
        let est = estimate_sinuosity(&[used(0.97), used(1.03)], &SinuosityConfig::default()).unwrap();
        assert!((est.mean_s - 1.015).abs() < 1e-15);
    }

    #[test]
    fn all_zero_path_is_an_error() {
        let mut s = used(1.0);
        s.disposition = Disposition::ZeroPath;
        assert!(matches!(
            estimate_sinuosity(&[s, s], &SinuosityConfig::default()),
            Err(Error::NoUsableSamples(_))
        ));
    }

    #[test]
    fn correction_rules() {
        assert_eq!(corrected_distance(1000.0, 1.2, 50.0), 1200.0);
        assert_eq!(corrected_distance(40.0, 1.2, 50.0), 40.0);
        assert_eq!(corrected_distance(0.0, 1.2, 50.0), 0.0);
        assert_eq!(corrected_distance(1000.0f32, 1.2, 50.0), 1200.0);
    }

    #[test]
    fn full_fraction_keeps_everything() {
        let segs = vec![seg((0.0, 0.0), (0.001, 0.0), 60.0); 50];
        assert_eq!(sample_segments(&segs, 1.0, 7).unwrap(), (0..50).collect::<Vec<_>>());
        assert!(sample_segments(&segs, 0.0, 7).is_err());
        assert!(sample_segments(&segs, 1.5, 7).is_err());
    }

    #[test]
    fn histogram_binning() {
        let mut h = Histogram::new(0.05, 3.0);
        assert_eq!(h.counts.len(), 40);
        h.add(1.0);
        h.add(1.07);
        h.add(3.0);
        h.add(7.5);
        assert_eq!(h.counts[0], 1);
        assert_eq!(h.counts[1], 1);
        assert_eq!(h.overflow, 2);
    }

    fn line_graph() -> StreetGraph {
        // Four corners 0.001 deg of latitude apart (~111 m) plus a detour node.
        let nodes = vec![
            (1, LatLon::new(0.000, 0.0)),
            (2, LatLon::new(0.001, 0.0)),
            (3, LatLon::new(0.002, 0.0)),
            (4, LatLon::new(0.000, 0.002)),
            (9, LatLon::new(0.5, 0.5)),
        ];
        let edges = vec![
            Edge { a: 1, b: 2, length_m: 120.0, oneway: false },
            Edge { a: 2, b: 3, length_m: 120.0, oneway: false },
            Edge { a: 1, b: 4, length_m: 30_000.0, oneway: false },
        ];
        StreetGraph::new(nodes, edges).unwrap()
    }

    #[test]
    fn dispositions() {
        let g = line_graph();
        let cfg = PairingConfig::default();
        let scfg = SinuosityConfig::default();
        let segs = vec![
            seg((0.0, 0.0), (0.00001, 0.0), 60.0),
            seg((0.0, 0.0), (0.002, 0.0), 60.0),
            seg((0.0, 0.0), (0.0, 0.002), 120.0),
            seg((0.0, 0.0), (0.1, 0.1), 170.0),
            seg((0.002, 0.0), (0.5, 0.5), 170.0),
        ];
        let out = reconstruct_sample(&segs, &[0, 1, 2, 3, 4], &g, &cfg, &scfg);
        assert_eq!(out[0].disposition, Disposition::ZeroPath);
        assert_eq!(out[0].real_m, segs[0].euclid_m);
        assert_eq!(out[1].disposition, Disposition::Used);
        assert!((out[1].sinuosity - 240.0 / segs[1].euclid_m).abs() < 1e-12);
        // 30 km in two minutes.
        assert_eq!(out[2].disposition, Disposition::SpeedRejected);
        assert_eq!(out[3].disposition, Disposition::Unsnappable);
        assert_eq!(out[4].disposition, Disposition::Unreachable);
    }

    #[test]
    fn strongly_shortened_paths_are_set_aside() {
        let g = line_graph();
        // Pings 40 m outside each end of the 1-3 span: ED ~ 302 m, RD 240 m.
        let s = seg((-0.00036, 0.0), (0.00236, 0.0), 60.0);
        let out = reconstruct_sample(&[s], &[0], &g, &PairingConfig::default(), &SinuosityConfig::default());
        assert_eq!(out[0].disposition, Disposition::BelowTolerance);
    }
}
