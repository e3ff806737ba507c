//! Sequential GPS pairs: consecutive pings of one vehicle turned into travel
//! segments with straight-line distance and elapsed time.

use std::io::{Read, Write};
use std::ops::AddAssign;

use chrono::{DateTime, Datelike, FixedOffset, NaiveDate, Timelike, Weekday};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::haversine_distance;
use crate::ingest::{CleanRecord, Partitions};
use crate::scalar::Scalar;
use crate::GeoPoint;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PairingConfig {
    /// Pairs must be strictly closer in time than this many seconds.
    pub max_gap_s: f64,
    /// Derived speeds strictly above this are rejected (km/h).
    pub max_speed_kmh: f64,
    /// Below this straight-line distance the correction factor is not applied (m).
    pub near_threshold_m: f64,
}

impl Default for PairingConfig {
    fn default() -> Self {
        PairingConfig {
            max_gap_s: 180.0,
            max_speed_kmh: 120.0,
            near_threshold_m: 50.0,
        }
    }
}

impl PairingConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("max_gap_s", self.max_gap_s),
            ("max_speed_kmh", self.max_speed_kmh),
            ("near_threshold_m", self.near_threshold_m),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::config(format!("pairing.{name} must be positive, got {v}")));
            }
        }
        let reach = self.max_speed_kmh / 3.6 * self.max_gap_s;
        if self.near_threshold_m >= reach {
            return Err(Error::config(format!(
                "pairing.near_threshold_m ({}) must be below the distance reachable within one gap ({reach} m)",
                self.near_threshold_m
            )));
        }
        Ok(())
    }
}

/// Mean speed in km/h for `dist` meters covered in `dt` seconds.
#[inline]
pub fn segment_speed<T: Scalar>(dist: T, dt: T) -> T {
    dist * T::lit(3.6) / dt
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegmentEnd {
    pub timestamp: DateTime<FixedOffset>,
    pub position: GeoPoint,
    pub source_row: u64,
}

impl From<&CleanRecord> for SegmentEnd {
    fn from(r: &CleanRecord) -> Self {
        SegmentEnd {
            timestamp: r.timestamp,
            position: r.position,
            source_row: r.source_row,
        }
    }
}

/// Two consecutive pings of one vehicle. Calendar fields are read from the
/// start timestamp, which is already in the analysis time zone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TravelSegment {
    pub vehicle_id: String,
    pub line_id: String,
    pub start: SegmentEnd,
    pub end: SegmentEnd,
    pub dt_s: f64,
    pub euclid_m: f64,
}

impl TravelSegment {
    pub fn start_hour(&self) -> u32 {
        self.start.timestamp.hour()
    }

    pub fn weekday(&self) -> Weekday {
        self.start.timestamp.weekday()
    }

    pub fn day(&self) -> NaiveDate {
        self.start.timestamp.date_naive()
    }

    /// (year, month)
    pub fn month(&self) -> (i32, u32) {
        let d = self.day();
        (d.year(), d.month())
    }

    pub fn speed_for(&self, dist_m: f64) -> f64 {
        segment_speed(dist_m, self.dt_s)
    }

    pub fn euclid_speed(&self) -> f64 {
        self.speed_for(self.euclid_m)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairingStats {
    pub pairs_considered: u64,
    pub segments: u64,
    pub gap_skipped: u64,
    pub zero_dt: u64,
    pub speed_rejected: u64,
    /// Emitted segments whose two pings disagree on the line id.
    pub line_mismatch: u64,
}

impl AddAssign for PairingStats {
    fn add_assign(&mut self, o: Self) {
        self.pairs_considered += o.pairs_considered;
        self.segments += o.segments;
        self.gap_skipped += o.gap_skipped;
        self.zero_dt += o.zero_dt;
        self.speed_rejected += o.speed_rejected;
        self.line_mismatch += o.line_mismatch;
    }
}

#[derive(Debug, Clone, Default)]
pub struct SegmentBatch {
    pub segments: Vec<TravelSegment>,
    pub stats: PairingStats,
}

fn seconds_between(a: &DateTime<FixedOffset>, b: &DateTime<FixedOffset>) -> f64 {
    (*b - *a).num_milliseconds() as f64 / 1000.0
}

/// Builds segments from one time-sorted, single-vehicle partition.
pub fn build_segments(partition: &[CleanRecord], cfg: &PairingConfig) -> SegmentBatch {
    debug_assert!(
        partition.windows(2).all(|w| w[0].timestamp <= w[1].timestamp && w[0].vehicle_id == w[1].vehicle_id),
        "partition must be time-sorted and single-vehicle"
    );
    let mut out = SegmentBatch::default();
    for w in partition.windows(2) {
        let (a, b) = (&w[0], &w[1]);
        out.stats.pairs_considered += 1;
        let dt = seconds_between(&a.timestamp, &b.timestamp);
        if dt <= 0.0 {
            out.stats.zero_dt += 1;
            continue;
        }
        if dt >= cfg.max_gap_s {
            out.stats.gap_skipped += 1;
            continue;
        }
        let euclid = haversine_distance(a.position, b.position);
        if segment_speed(euclid, dt) > cfg.max_speed_kmh {
            out.stats.speed_rejected += 1;
            continue;
        }
        if a.line_id != b.line_id {
            out.stats.line_mismatch += 1;
        }
        out.stats.segments += 1;
        out.segments.push(TravelSegment {
            vehicle_id: a.vehicle_id.clone(),
            line_id: a.line_id.clone(),
            start: a.into(),
            end: b.into(),
            dt_s: dt,
            euclid_m: euclid,
        });
    }
    out
}

/// Runs [`build_segments`] over all partitions in parallel. Output is ordered
/// by (vehicle, start time).
pub fn build_all_segments(parts: &Partitions, cfg: &PairingConfig) -> SegmentBatch {
    let groups: Vec<&Vec<CleanRecord>> = parts.values().collect();
    let batches: Vec<SegmentBatch> = groups.par_iter().map(|g| build_segments(g, cfg)).collect();
    let mut out = SegmentBatch {
        segments: Vec::with_capacity(batches.iter().map(|b| b.segments.len()).sum()),
        stats: PairingStats::default(),
    };
    for b in batches {
        out.stats += b.stats;
        out.segments.extend(b.segments);
    }
    out
}

pub const SEGMENTS_HEADER: [&str; 13] = [
    "vehicle", "line", "t_start", "t_end", "start_row", "end_row", "start_lat", "start_lon", "end_lat",
    "end_lon", "dt_s", "euclid_m", "speed_kmh",
];

/// Writes the segments table. Floats use shortest round-trip formatting so
/// that reading the file back reproduces every value bit-for-bit.
pub fn write_segments<W: Write>(w: W, segments: &[TravelSegment]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(SEGMENTS_HEADER)?;
    for s in segments {
        wtr.write_record([
            s.vehicle_id.clone(),
            s.line_id.clone(),
            s.start.timestamp.to_rfc3339(),
            s.end.timestamp.to_rfc3339(),
            s.start.source_row.to_string(),
            s.end.source_row.to_string(),
            s.start.position.lat.to_string(),
            s.start.position.lon.to_string(),
            s.end.position.lat.to_string(),
            s.end.position.lon.to_string(),
            s.dt_s.to_string(),
            s.euclid_m.to_string(),
            s.euclid_speed().to_string(),
        ])?;
    }
    wtr.flush().map_err(|e| Error::data("segments", e.to_string()))?;
    Ok(())
}

pub(crate) fn check_header(context: &str, got: &csv::StringRecord, want: &[&str]) -> Result<()> {
    if got.iter().ne(want.iter().copied()) {
        return Err(Error::data(
            context,
            format!(
                "schema mismatch: expected columns [{}], found [{}]",
                want.join(","),
                got.iter().collect::<Vec<_>>().join(",")
            ),
        ));
    }
    Ok(())
}

pub(crate) fn field<T: std::str::FromStr>(rec: &csv::StringRecord, i: usize, context: &str) -> Result<T> {
    let raw = rec.get(i).unwrap_or("");
    raw.parse::<T>().map_err(|_| {
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        Error::data(context, format!("line {line}: cannot parse column {i} value `{raw}`"))
    })
}

pub(crate) fn timestamp_field(rec: &csv::StringRecord, i: usize, context: &str) -> Result<DateTime<FixedOffset>> {
    let raw = rec.get(i).unwrap_or("");
    DateTime::parse_from_rfc3339(raw).map_err(|e| Error::data(context, format!("bad timestamp `{raw}`: {e}")))
}

pub fn read_segments<R: Read>(r: R) -> Result<Vec<TravelSegment>> {
    const CTX: &str = "segments.csv";
    let mut rdr = csv::Reader::from_reader(r);
    check_header(CTX, rdr.headers()?, &SEGMENTS_HEADER)?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        out.push(TravelSegment {
            vehicle_id: rec[0].to_string(),
            line_id: rec[1].to_string(),
            start: SegmentEnd {
                timestamp: timestamp_field(&rec, 2, CTX)?,
                source_row: field(&rec, 4, CTX)?,
                position: GeoPoint::new(field(&rec, 6, CTX)?, field(&rec, 7, CTX)?),
            },
            end: SegmentEnd {
                timestamp: timestamp_field(&rec, 3, CTX)?,
                source_row: field(&rec, 5, CTX)?,
                position: GeoPoint::new(field(&rec, 8, CTX)?, field(&rec, 9, CTX)?),
            },
            dt_s: field(&rec, 10, CTX)?,
            euclid_m: field(&rec, 11, CTX)?,
        });
    }
    Ok(out)
}
