//! GPS record ingestion: parsing, bounds cleaning and vehicle-day partitioning.
//!
//! Every input line produces exactly one record or one diagnostic. Malformed
//! lines are reported and skipped; only an unreadable stream aborts.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

use chrono::{DateTime, FixedOffset, NaiveDate};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::{BoundingBox, GeoPoint};

/// A column given either by zero-based position or by header name.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ColumnRef {
    Index(usize),
    Name(String),
}

/// Declared layout of the GPS input file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GpsSchema {
    pub delimiter: char,
    pub has_header: bool,
    pub vehicle: ColumnRef,
    pub line: ColumnRef,
    pub latitude: ColumnRef,
    pub longitude: ColumnRef,
    pub timestamp: ColumnRef,
    pub speed: Option<ColumnRef>,
}

impl Default for GpsSchema {
    /// `vehicle,line,lat,lon,timestamp,speed` with a header row.
    fn default() -> Self {
        GpsSchema {
            delimiter: ',',
            has_header: true,
            vehicle: ColumnRef::Index(0),
            line: ColumnRef::Index(1),
            latitude: ColumnRef::Index(2),
            longitude: ColumnRef::Index(3),
            timestamp: ColumnRef::Index(4),
            speed: Some(ColumnRef::Index(5)),
        }
    }
}

/// Column positions resolved against the header, if any.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ColumnMapping {
    pub vehicle: usize,
    pub line: usize,
    pub latitude: usize,
    pub longitude: usize,
    pub timestamp: usize,
    pub speed: Option<usize>,
}

impl GpsSchema {
    pub fn resolve(&self, header: Option<&[&str]>) -> Result<ColumnMapping> {
        if !self.delimiter.is_ascii() {
            return Err(Error::config("GPS delimiter must be a single ASCII character"));
        }
        let find = |what: &str, c: &ColumnRef| -> Result<usize> {
            match c {
                ColumnRef::Index(i) => Ok(*i),
                ColumnRef::Name(name) => {
                    let header = header.ok_or_else(|| {
                        Error::config(format!("column `{what}` is named `{name}` but the input has no header"))
                    })?;
                    header
                        .iter()
                        .position(|h| h.trim() == name)
                        .ok_or_else(|| Error::config(format!("header has no column named `{name}` (for {what})")))
                }
            }
        };
        Ok(ColumnMapping {
            vehicle: find("vehicle", &self.vehicle)?,
            line: find("line", &self.line)?,
            latitude: find("latitude", &self.latitude)?,
            longitude: find("longitude", &self.longitude)?,
            timestamp: find("timestamp", &self.timestamp)?,
            speed: self.speed.as_ref().map(|c| find("speed", c)).transpose()?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RawRecord {
    pub vehicle_id: String,
    pub line_id: String,
    pub timestamp: DateTime<FixedOffset>,
    pub position: GeoPoint,
    /// km/h as reported by the device; never used downstream.
    pub reported_speed: Option<f64>,
    /// 1-based line number in the source file.
    pub source_row: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ParseDiagnostic {
    pub row: u64,
    pub column: Option<&'static str>,
    pub message: String,
}

impl fmt::Display for ParseDiagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.column {
            Some(c) => write!(f, "row {}: column `{}`: {}", self.row, c, self.message),
            None => write!(f, "row {}: {}", self.row, self.message),
        }
    }
}

pub type ParseOutcome = std::result::Result<RawRecord, ParseDiagnostic>;

/// A validated, in-bounds ping with its timestamp expressed in the analysis
/// time zone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CleanRecord {
    pub vehicle_id: String,
    pub line_id: String,
    pub timestamp: DateTime<FixedOffset>,
    pub position: GeoPoint,
    pub source_row: u64,
}

impl From<CleanRecord> for RawRecord {
    fn from(r: CleanRecord) -> Self {
        RawRecord {
            vehicle_id: r.vehicle_id,
            line_id: r.line_id,
            timestamp: r.timestamp,
            position: r.position,
            reported_speed: None,
            source_row: r.source_row,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestStats {
    pub rows_read: u64,
    pub rows_parsed: u64,
    pub rows_rejected_parse: u64,
    pub rows_rejected_bounds: u64,
}

impl IngestStats {
    pub fn clean_count(&self) -> u64 {
        self.rows_parsed - self.rows_rejected_bounds
    }
}

fn is_null(field: &str) -> bool {
    matches!(field, "" | "NA" | "na" | "null" | "NULL" | "None")
}

fn parse_line(line: &str, row: u64, delimiter: char, cols: &ColumnMapping) -> ParseOutcome {
    let diag = |column: Option<&'static str>, message: String| ParseDiagnostic { row, column, message };
    let line = line.strip_suffix('\r').unwrap_or(line);
    if line.trim().is_empty() {
        return Err(diag(None, "empty line".into()));
    }
    let fields: Vec<&str> = line.split(delimiter).map(str::trim).collect();
    let get = |idx: usize, name: &'static str| -> std::result::Result<&str, ParseDiagnostic> {
        fields
            .get(idx)
            .copied()
            .ok_or_else(|| diag(Some(name), format!("missing (line has {} fields)", fields.len())))
    };
    let coord = |idx: usize, name: &'static str| -> std::result::Result<f64, ParseDiagnostic> {
        let raw = get(idx, name)?;
        raw.parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| diag(Some(name), format!("`{raw}` is not a number")))
    };

    let vehicle_id = get(cols.vehicle, "vehicle")?;
    if vehicle_id.is_empty() {
        return Err(diag(Some("vehicle"), "empty vehicle id".into()));
    }
    let line_id = get(cols.line, "line")?;
    let lat = coord(cols.latitude, "latitude")?;
    let lon = coord(cols.longitude, "longitude")?;
    let position = GeoPoint::checked(lat, lon).map_err(|_| {
        diag(Some("latitude"), format!("({lat}, {lon}) is outside valid coordinate ranges"))
    })?;
    let ts_raw = get(cols.timestamp, "timestamp")?;
    let timestamp = DateTime::parse_from_rfc3339(ts_raw)
        .map_err(|e| diag(Some("timestamp"), format!("`{ts_raw}`: {e}")))?;
    let reported_speed = match cols.speed {
        None => None,
        Some(i) => match fields.get(i).copied() {
            None => None,
            Some(s) if is_null(s) => None,
            Some(s) => Some(
                s.parse::<f64>()
                    .map_err(|_| diag(Some("speed"), format!("`{s}` is not a number")))?,
            ),
        },
    };

    Ok(RawRecord {
        vehicle_id: vehicle_id.to_string(),
        line_id: line_id.to_string(),
        timestamp,
        position,
        reported_speed,
        source_row: row,
    })
}

/// Parses a line-delimited GPS stream. The output has one entry per data
/// line, in input order. Fields are split on the delimiter without quote
/// handling.
pub fn parse_records<R: BufRead>(input: R, schema: &GpsSchema) -> Result<Vec<ParseOutcome>> {
    parse_records_named(input, schema, Path::new("<input>"))
}

pub(crate) fn parse_records_named<R: BufRead>(
    input: R,
    schema: &GpsSchema,
    name: &Path,
) -> Result<Vec<ParseOutcome>> {
    let mut lines = Vec::new();
    for (i, line) in input.split(b'\n').enumerate() {
        let bytes = line.map_err(|e| Error::io(name, e))?;
        lines.push((i as u64 + 1, bytes));
    }
    let mut body = &lines[..];
    let header_fields;
    let header = if schema.has_header {
        match body.split_first() {
            Some(((_, first), rest)) => {
                body = rest;
                header_fields = String::from_utf8_lossy(first).trim_end_matches('\r').to_string();
                Some(header_fields.split(schema.delimiter).collect::<Vec<_>>())
            }
            None => None,
        }
    } else {
        None
    };
    let mapping = if schema.has_header && header.is_none() {
        // Empty file with a declared header: nothing to resolve names against.
        return Ok(Vec::new());
    } else {
        schema.resolve(header.as_deref())?
    };

    let delimiter = schema.delimiter;
    Ok(body
        .par_iter()
        .map(|(row, bytes)| match std::str::from_utf8(bytes) {
            Ok(line) => parse_line(line, *row, delimiter, &mapping),
            Err(_) => Err(ParseDiagnostic {
                row: *row,
                column: None,
                message: "line is not valid UTF-8".into(),
            }),
        })
        .collect())
}

/// Result of [`clean_records`].
#[derive(Debug, Clone, Default)]
pub struct Cleaned {
    pub records: Vec<CleanRecord>,
    pub stats: IngestStats,
    pub diagnostics: Vec<ParseDiagnostic>,
}

/// Keeps in-bounds records, drops the reported speed and expresses every
/// timestamp in `local_offset`.
pub fn clean_records<I>(records: I, bounds: &BoundingBox, local_offset: FixedOffset) -> Cleaned
where
    I: IntoIterator<Item = ParseOutcome>,
{
    let mut out = Cleaned::default();
    for item in records {
        out.stats.rows_read += 1;
        match item {
            Err(d) => {
                out.stats.rows_rejected_parse += 1;
                out.diagnostics.push(d);
            }
            Ok(r) => {
                out.stats.rows_parsed += 1;
                if !bounds.contains(r.position) {
                    out.stats.rows_rejected_bounds += 1;
                    continue;
                }
                out.records.push(CleanRecord {
                    vehicle_id: r.vehicle_id,
                    line_id: r.line_id,
                    timestamp: r.timestamp.with_timezone(&local_offset),
                    position: r.position,
                    source_row: r.source_row,
                });
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct PartitionKey {
    pub vehicle_id: String,
    pub day: NaiveDate,
}

pub type Partitions = BTreeMap<PartitionKey, Vec<CleanRecord>>;

/// Groups records by (vehicle, local calendar day), each group sorted by
/// timestamp with ties in source-row order.
pub fn partition_by_vehicle_day(records: Vec<CleanRecord>) -> Partitions {
    let mut parts: Partitions = BTreeMap::new();
    for r in records {
        let key = PartitionKey {
            vehicle_id: r.vehicle_id.clone(),
            day: r.timestamp.date_naive(),
        };
        parts.entry(key).or_default().push(r);
    }
    for group in parts.values_mut() {
        group.sort_by(|a, b| a.timestamp.cmp(&b.timestamp).then(a.source_row.cmp(&b.source_row)));
    }
    parts
}

fn file_safe(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

/// Debug dump: one CSV per (vehicle, day) under `dir`.
pub fn dump_partitions(dir: &Path, parts: &Partitions) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (key, recs) in parts {
        let path = dir.join(format!("{}_{}.csv", file_safe(&key.vehicle_id), key.day));
        let file = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut w = std::io::BufWriter::new(file);
        let io = |e| Error::io(&path, e);
        writeln!(w, "source_row,vehicle,line,timestamp,lat,lon").map_err(io)?;
        for r in recs {
            writeln!(
                w,
                "{},{},{},{},{},{}",
                r.source_row,
                r.vehicle_id,
                r.line_id,
                r.timestamp.to_rfc3339(),
                r.position.lat,
                r.position.lon
            )
            .map_err(io)?;
        }
        w.flush().map_err(io)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rio() -> BoundingBox {
        BoundingBox::new(-23.10, -22.70, -43.80, -43.10).unwrap()
    }

    fn no_header() -> GpsSchema {
        GpsSchema {
            has_header: false,
            ..GpsSchema::default()
        }
    }

    fn brt() -> FixedOffset {
        FixedOffset::west_opt(3 * 3600).unwrap()
    }

    #[test]
    fn parses_a_well_formed_line() {
        let input = "B123,409,-22.90,-43.20,2015-03-01T10:00:00-03:00,35\n";
        let out = parse_records(input.as_bytes(), &no_header()).unwrap();
        assert_eq!(out.len(), 1);
        let r = out[0].as_ref().unwrap();
        assert_eq!(r.vehicle_id, "B123");
        assert_eq!(r.line_id, "409");
        assert_eq!(r.position, GeoPoint::new(-22.90, -43.20));
        assert_eq!(r.reported_speed, Some(35.0));
        assert_eq!(r.source_row, 1);
    }

    #[test]
    fn empty_line_yields_a_diagnostic() {
        let input = "B1,409,-22.9,-43.2,2015-03-01T10:00:00-03:00,1\n\nB1,409,-22.9,-43.2,2015-03-01T10:02:00-03:00,1\n";
        let out = parse_records(input.as_bytes(), &no_header()).unwrap();
        assert_eq!(out.len(), 3);
        let d = out[1].as_ref().unwrap_err();
        assert_eq!(d.row, 2);
        assert_eq!(d.message, "empty line");
    }

    #[test]
    fn bad_latitude_names_the_column() {
        let input = "B1,409,abc,-43.2,2015-03-01T10:00:00-03:00,1\n";
        let out = parse_records(input.as_bytes(), &no_header()).unwrap();
        assert_eq!(out[0].as_ref().unwrap_err().column, Some("latitude"));
    }

    #[test]
    fn bad_timestamp_is_a_diagnostic() {
        let input = "B1,409,-22.9,-43.2,2015-03-01 10:00,1\n";
        let out = parse_records(input.as_bytes(), &no_header()).unwrap();
        assert_eq!(out[0].as_ref().unwrap_err().column, Some("timestamp"));
    }

    #[test]
    fn null_speed_is_accepted() {
        let input = "B1,409,-22.9,-43.2,2015-03-01T10:00:00-03:00,\nB1,409,-22.9,-43.2,2015-03-01T10:00:00-03:00\n";
        let out = parse_records(input.as_bytes(), &no_header()).unwrap();
        assert!(out.iter().all(|r| r.as_ref().unwrap().reported_speed.is_none()));
    }

    #[test]
    fn header_names_resolve_columns() {
        let schema = GpsSchema {
            delimiter: ';',
            has_header: true,
            vehicle: ColumnRef::Name("ordem".into()),
            line: ColumnRef::Name("linha".into()),
            latitude: ColumnRef::Name("latitude".into()),
            longitude: ColumnRef::Name("longitude".into()),
            timestamp: ColumnRef::Name("datahora".into()),
            speed: None,
        };
        let input = "datahora;ordem;linha;latitude;longitude\n2015-03-01T10:00:00-03:00;A1;232;-22.9;-43.2\n";
        let out = parse_records(input.as_bytes(), &schema).unwrap();
        let r = out[0].as_ref().unwrap();
        assert_eq!((r.vehicle_id.as_str(), r.line_id.as_str()), ("A1", "232"));
        assert_eq!(r.source_row, 2);

        let missing = GpsSchema {
            vehicle: ColumnRef::Name("bus".into()),
            ..schema
        };
        assert!(matches!(parse_records(input.as_bytes(), &missing), Err(Error::Config(_))));
    }

    #[test]
    fn cleaning_applies_bounds_and_reconciles() {
        let input = "B1,409,-22.90,-43.20,2015-03-01T10:00:00-03:00,35\n\
                     B1,409,0,0,2015-03-01T10:02:00-03:00,35\n\
                     B1,409,zz,0,2015-03-01T10:04:00-03:00,35\n";
        let parsed = parse_records(input.as_bytes(), &no_header()).unwrap();
        let c = clean_records(parsed, &rio(), brt());
        assert_eq!(c.records.len(), 1);
        assert_eq!(
            c.stats,
            IngestStats {
                rows_read: 3,
                rows_parsed: 2,
                rows_rejected_parse: 1,
                rows_rejected_bounds: 1
            }
        );
        assert_eq!(c.stats.clean_count(), 1);
    }

    #[test]
    fn cleaning_empty_stream() {
        let c = clean_records(Vec::new(), &rio(), brt());
        assert!(c.records.is_empty());
        assert_eq!(c.stats, IngestStats::default());
    }

    #[test]
    fn timestamps_are_converted_to_the_local_offset() {
        let input = "B1,409,-22.90,-43.20,2015-03-01T02:00:00Z,\n";
        let parsed = parse_records(input.as_bytes(), &no_header()).unwrap();
        let c = clean_records(parsed, &rio(), brt());
        let ts = c.records[0].timestamp;
        assert_eq!(ts.to_rfc3339(), "2015-02-28T23:00:00-03:00");
    }

    fn rec(vehicle: &str, ts: &str, row: u64) -> CleanRecord {
        CleanRecord {
            vehicle_id: vehicle.into(),
            line_id: "1".into(),
            timestamp: DateTime::parse_from_rfc3339(ts).unwrap(),
            position: GeoPoint::new(-22.9, -43.2),
            source_row: row,
        }
    }

    #[test]
    fn partitions_split_by_vehicle_and_day() {
        let parts = partition_by_vehicle_day(vec![
            rec("A", "2015-03-01T10:00:00-03:00", 1),
            rec("B", "2015-03-01T10:00:00-03:00", 2),
        ]);
        assert_eq!(parts.len(), 2);

        let parts = partition_by_vehicle_day(vec![
            rec("A", "2015-03-02T00:01:00-03:00", 2),
            rec("A", "2015-03-01T23:59:00-03:00", 1),
        ]);
        assert_eq!(parts.len(), 2);
    }

    #[test]
    fn duplicate_timestamps_keep_source_order() {
        let parts = partition_by_vehicle_day(vec![
            rec("A", "2015-03-01T10:00:00-03:00", 9),
            rec("A", "2015-03-01T10:00:00-03:00", 4),
            rec("A", "2015-03-01T09:00:00-03:00", 12),
        ]);
        let rows: Vec<u64> = parts.values().next().unwrap().iter().map(|r| r.source_row).collect();
        assert_eq!(rows, vec![12, 4, 9]);
    }
}
