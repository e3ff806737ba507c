//! Whole-day gap filling against per-weekday expected record counts.
//!
//! For each weekday the expected range is the top decile of the daily
//! segment-count distribution: `[P90, max]` with nearest-rank percentiles.
//! Days below `P90` are scaled up to the range; days with no data at all are
//! rebuilt from the weekday's mean emission per segment.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use chrono::{Datelike, NaiveDate, Weekday};
use serde::{Deserialize, Serialize};

use crate::aggregate::{reduce_by, EmissionAggregate};
use crate::calendar::{days_between, weekday_index, weekday_name, YearMonth, WEEKDAYS};
use crate::emissions::SegmentEmission;
use crate::error::{Error, Result};
use crate::pairing::{check_header, field};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DailyCount {
    pub date: NaiveDate,
    pub segment_count: u64,
    pub co2e_kg: f64,
    pub fuel_l: f64,
    pub dist_km: f64,
}

impl DailyCount {
    pub fn weekday(&self) -> Weekday {
        self.date.weekday()
    }

    pub fn totals(&self) -> Totals {
        Totals {
            co2e_kg: self.co2e_kg,
            fuel_l: self.fuel_l,
            dist_km: self.dist_km,
        }
    }
}

/// Daily totals over every date of `period` (inclusive), or over the span of
/// dates present in `rows` when no period is given. Dates without rows get a
/// zero count.
pub fn daily_counts(rows: &[SegmentEmission], period: Option<(NaiveDate, NaiveDate)>) -> Vec<DailyCount> {
    let by_day = reduce_by(rows, |e| Some(e.day()));
    let span = period.or_else(|| Some((*by_day.keys().next()?, *by_day.keys().next_back()?)));
    let Some((from, to)) = span else {
        return Vec::new();
    };
    days_between(from, to)
        .map(|date| {
            let agg = by_day.get(&date).copied().unwrap_or_default();
            DailyCount {
                date,
                segment_count: agg.segment_count,
                co2e_kg: agg.co2e_kg,
                fuel_l: agg.fuel_l,
                dist_km: agg.dist_km,
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpectedRange {
    pub weekday: Weekday,
    pub low: u64,
    pub high: u64,
    pub observations: usize,
    /// False when fewer than the configured minimum number of days were seen.
    pub sufficient: bool,
}

/// Nearest-rank percentile of an ascending slice, `pct` in (0, 100].
pub fn nearest_rank(sorted: &[u64], pct: u32) -> u64 {
    let n = sorted.len() as u64;
    let rank = (pct as u64 * n).div_ceil(100).max(1);
    sorted[(rank - 1) as usize]
}

/// Expected ranges indexed by weekday (Monday = 0). Weekdays with no
/// observed day are `None`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExpectedRanges {
    pub by_weekday: [Option<ExpectedRange>; 7],
}

impl ExpectedRanges {
    pub fn get(&self, w: Weekday) -> Option<&ExpectedRange> {
        self.by_weekday[weekday_index(w)].as_ref()
    }

    /// Dates whose count reaches their weekday's expected range: the
    /// best-recorded days.
    pub fn best_days(&self, days: &[DailyCount]) -> Vec<NaiveDate> {
        days.iter()
            .filter(|d| self.get(d.weekday()).is_some_and(|r| d.segment_count >= r.low && d.segment_count > 0))
            .map(|d| d.date)
            .collect()
    }
}

pub fn compute_expected_ranges(days: &[DailyCount], min_observations: usize) -> ExpectedRanges {
    let mut counts: [Vec<u64>; 7] = Default::default();
    for d in days {
        counts[weekday_index(d.weekday())].push(d.segment_count);
    }
    let mut out = ExpectedRanges::default();
    for (i, mut c) in counts.into_iter().enumerate() {
        if c.is_empty() {
            continue;
        }
        c.sort_unstable();
        out.by_weekday[i] = Some(ExpectedRange {
            weekday: WEEKDAYS[i],
            low: nearest_rank(&c, 90),
            high: *c.last().unwrap(),
            observations: c.len(),
            sufficient: c.len() >= min_observations,
        });
    }
    out
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Totals {
    pub co2e_kg: f64,
    pub fuel_l: f64,
    pub dist_km: f64,
}

impl Totals {
    fn scaled(&self, k: f64) -> Totals {
        Totals {
            co2e_kg: self.co2e_kg * k,
            fuel_l: self.fuel_l * k,
            dist_km: self.dist_km * k,
        }
    }

    fn add(&mut self, o: &Totals) {
        self.co2e_kg += o.co2e_kg;
        self.fuel_l += o.fuel_l;
        self.dist_km += o.dist_km;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FillKind {
    PassThrough,
    /// Observed totals multiplied by `low/count` and `high/count`.
    Scaled,
    /// No observed segment: weekday mean per segment times `low` and `high`.
    FromWeekdayMean,
}

impl FillKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            FillKind::PassThrough => "pass_through",
            FillKind::Scaled => "scaled",
            FillKind::FromWeekdayMean => "from_weekday_mean",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilledDay {
    pub date: NaiveDate,
    pub observed: DailyCount,
    pub kind: FillKind,
    /// Multipliers applied to the observed totals. For `FromWeekdayMean` days
    /// these are the segment counts applied to the per-segment mean.
    pub scale_low: f64,
    pub scale_high: f64,
    pub low: Totals,
    pub high: Totals,
}

pub fn fill_missing_days(days: &[DailyCount], ranges: &ExpectedRanges) -> Vec<FilledDay> {
    // Mean emission per segment for each weekday, over that weekday's days.
    let mut sums: [(Totals, u64); 7] = Default::default();
    for d in days {
        let s = &mut sums[weekday_index(d.weekday())];
        s.0.add(&d.totals());
        s.1 += d.segment_count;
    }

    days.iter()
        .map(|d| {
            let observed = d.totals();
            let pass = FilledDay {
                date: d.date,
                observed: *d,
                kind: FillKind::PassThrough,
                scale_low: 1.0,
                scale_high: 1.0,
                low: observed,
                high: observed,
            };
            let Some(range) = ranges.get(d.weekday()) else {
                return pass;
            };
            if d.segment_count >= range.low {
                return pass;
            }
            if d.segment_count > 0 {
                let scale_low = range.low as f64 / d.segment_count as f64;
                let scale_high = range.high as f64 / d.segment_count as f64;
                return FilledDay {
                    kind: FillKind::Scaled,
                    scale_low,
                    scale_high,
                    low: observed.scaled(scale_low),
                    high: observed.scaled(scale_high),
                    ..pass
                };
            }
            let (sum, n) = sums[weekday_index(d.weekday())];
            if n == 0 {
                return pass;
            }
            let per_segment = sum.scaled(1.0 / n as f64);
            FilledDay {
                kind: FillKind::FromWeekdayMean,
                scale_low: range.low as f64,
                scale_high: range.high as f64,
                low: per_segment.scaled(range.low as f64),
                high: per_segment.scaled(range.high as f64),
                ..pass
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MonthlyBand {
    pub month: YearMonth,
    pub raw: Totals,
    pub low: Totals,
    pub high: Totals,
    pub filled_days: u32,
}

pub fn monthly_band(filled: &[FilledDay]) -> Vec<MonthlyBand> {
    let mut months: BTreeMap<YearMonth, MonthlyBand> = BTreeMap::new();
    for f in filled {
        let month = YearMonth::of(f.date);
        let m = months.entry(month).or_insert(MonthlyBand {
            month,
            raw: Totals::default(),
            low: Totals::default(),
            high: Totals::default(),
            filled_days: 0,
        });
        m.raw.add(&f.observed.totals());
        m.low.add(&f.low);
        m.high.add(&f.high);
        if f.kind != FillKind::PassThrough {
            m.filled_days += 1;
        }
    }
    months.into_values().collect()
}

/// Totals per calendar month straight from segment rows.
pub fn monthly_aggregates(rows: &[SegmentEmission]) -> BTreeMap<YearMonth, EmissionAggregate> {
    reduce_by(rows, |e| Some(YearMonth::of(e.day())))
}

pub const MONTHLY_HEADER: [&str; 10] = [
    "month", "km_raw", "km_low", "km_high", "fuel_raw_m3", "fuel_low", "fuel_high", "co2e_raw_t", "co2e_low",
    "co2e_high",
];

pub fn write_monthly<W: Write>(w: W, bands: &[MonthlyBand]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(MONTHLY_HEADER)?;
    for b in bands {
        wtr.write_record([
            b.month.to_string(),
            b.raw.dist_km.to_string(),
            b.low.dist_km.to_string(),
            b.high.dist_km.to_string(),
            (b.raw.fuel_l / 1000.0).to_string(),
            (b.low.fuel_l / 1000.0).to_string(),
            (b.high.fuel_l / 1000.0).to_string(),
            (b.raw.co2e_kg / 1000.0).to_string(),
            (b.low.co2e_kg / 1000.0).to_string(),
            (b.high.co2e_kg / 1000.0).to_string(),
        ])?;
    }
    wtr.flush().map_err(|e| Error::data("monthly totals", e.to_string()))?;
    Ok(())
}

/// Reads `monthly_totals.csv` back (km, m3, t units).
pub fn read_monthly<R: Read>(r: R) -> Result<Vec<MonthlyBand>> {
    const CTX: &str = "monthly_totals.csv";
    let mut rdr = csv::Reader::from_reader(r);
    check_header(CTX, rdr.headers()?, &MONTHLY_HEADER)?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let f = |i| field::<f64>(&rec, i, CTX);
        let t = |km: f64, m3: f64, t: f64| Totals {
            dist_km: km,
            fuel_l: m3 * 1000.0,
            co2e_kg: t * 1000.0,
        };
        out.push(MonthlyBand {
            month: rec[0].parse()?,
            raw: t(f(1)?, f(4)?, f(7)?),
            low: t(f(2)?, f(5)?, f(8)?),
            high: t(f(3)?, f(6)?, f(9)?),
            filled_days: 0,
        });
    }
    Ok(out)
}

pub fn write_daily<W: Write>(w: W, filled: &[FilledDay]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record([
        "date", "weekday", "segment_count", "dist_km", "fuel_l", "co2e_kg", "fill", "scale_low", "scale_high",
        "co2e_low_kg", "co2e_high_kg",
    ])?;
    for f in filled {
        let o = &f.observed;
        wtr.write_record([
            f.date.to_string(),
            weekday_name(o.weekday()).to_string(),
            o.segment_count.to_string(),
            o.dist_km.to_string(),
            o.fuel_l.to_string(),
            o.co2e_kg.to_string(),
            f.kind.as_str().to_string(),
            f.scale_low.to_string(),
            f.scale_high.to_string(),
            f.low.co2e_kg.to_string(),
            f.high.co2e_kg.to_string(),
        ])?;
    }
    wtr.flush().map_err(|e| Error::data("daily totals", e.to_string()))?;
    Ok(())
}

/// Reads the observed part of `daily.csv`.
pub fn read_daily<R: Read>(r: R) -> Result<Vec<DailyCount>> {
    const CTX: &str = "daily.csv";
    let mut rdr = csv::Reader::from_reader(r);
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        out.push(DailyCount {
            date: field(&rec, 0, CTX)?,
            segment_count: field(&rec, 2, CTX)?,
            dist_km: field(&rec, 3, CTX)?,
            fuel_l: field(&rec, 4, CTX)?,
            co2e_kg: field(&rec, 5, CTX)?,
        });
    }
    Ok(out)
}

pub fn write_ranges<W: Write>(w: W, ranges: &ExpectedRanges) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["weekday", "low", "high", "observations", "sufficient"])?;
    for r in ranges.by_weekday.iter().flatten() {
        wtr.write_record([
            weekday_name(r.weekday).to_string(),
            r.low.to_string(),
            r.high.to_string(),
            r.observations.to_string(),
            r.sufficient.to_string(),
        ])?;
    }
    wtr.flush().map_err(|e| Error::data("expected ranges", e.to_string()))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn day(date: &str, count: u64, co2e: f64) -> DailyCount {
        DailyCount {
            date: date.parse().unwrap(),
            segment_count: count,
            co2e_kg: co2e,
            fuel_l: co2e / 2.51,
            dist_km: co2e * 2.0,
        }
    }

    /// Ten consecutive Tuesdays from 2015-03-03 with the given counts.
    fn tuesdays(counts: &[u64]) -> Vec<DailyCount> {
        let first: NaiveDate = "2015-03-03".parse().unwrap();
        counts
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let d = first + chrono::Duration::weeks(i as i64);
                day(&d.to_string(), c, c as f64 * 10.0)
            })
            .collect()
    }

    #[test]
    fn nearest_rank_percentiles() {
        let v: Vec<u64> = (1..=10).map(|i| i * 10).collect();
        assert_eq!(nearest_rank(&v, 90), 90);
        assert_eq!(nearest_rank(&v, 100), 100);
        assert_eq!(nearest_rank(&[7], 90), 7);
        // 20 values: rank ceil(18) = 18.
        let v: Vec<u64> = (1..=20).collect();
        assert_eq!(nearest_rank(&v, 90), 18);
    }

    #[test]
    fn top_decile_range() {
        let days = tuesdays(&[10, 20, 30, 40, 50, 60, 70, 80, 90, 100]);
        let r = compute_expected_ranges(&days, 10);
        let t = r.get(Weekday::Tue).unwrap();
        assert_eq!((t.low, t.high, t.sufficient), (90, 100, true));
        assert!(r.get(Weekday::Mon).is_none());
    }

    #[test]
    fn degenerate_and_insufficient_ranges() {
        let r = compute_expected_ranges(&tuesdays(&[42; 12]), 10);
        let t = r.get(Weekday::Tue).unwrap();
        assert_eq!((t.low, t.high), (42, 42));

        let monday = vec![day("2015-03-02", 17, 1.0)];
        let r = compute_expected_ranges(&monday, 10);
        let m = r.get(Weekday::Mon).unwrap();
        assert_eq!((m.low, m.high, m.sufficient), (17, 17, false));
    }

    #[test]
    fn deficient_day_is_scaled_into_the_range() {
        let mut days = tuesdays(&[100, 90, 100, 95, 100, 92, 98, 97, 99, 45]);
        days[9].co2e_kg = 500.0;
        let ranges = compute_expected_ranges(&days, 10);
        let t = ranges.get(Weekday::Tue).unwrap();
        assert_eq!((t.low, t.high), (100, 100));

        // Force the documented [90, 100] range.
        let mut custom = ranges.clone();
        custom.by_weekday[1] = Some(ExpectedRange { low: 90, high: 100, ..*t });
        let filled = fill_missing_days(&days, &custom);
        let f = &filled[9];
        assert_eq!(f.kind, FillKind::Scaled);
        assert!((f.low.co2e_kg - 1000.0).abs() < 1e-9);
        assert!((f.high.co2e_kg - 500.0 * 100.0 / 45.0).abs() < 1e-9);
        assert!((f.high.co2e_kg - 1111.111).abs() < 1e-3);
        assert!(f.scale_low >= 1.0);
    }

    #[test]
    fn in_range_days_pass_through() {
        let days = tuesdays(&[100; 10]);
        let filled = fill_missing_days(&days, &compute_expected_ranges(&days, 10));
        for (f, d) in filled.iter().zip(&days) {
            assert_eq!(f.kind, FillKind::PassThrough);
            assert_eq!(f.low, d.totals());
            assert_eq!(f.high, d.totals());
            assert_eq!(f.scale_low, 1.0);
        }
    }

    #[test]
    fn empty_day_uses_the_weekday_mean() {
        // Nine days of 100 segments at 10 kg each, plus one blank day.
        let days = tuesdays(&[100, 100, 100, 100, 100, 100, 100, 100, 100, 0]);
        let ranges = compute_expected_ranges(&days, 10);
        let filled = fill_missing_days(&days, &ranges);
        let f = &filled[9];
        assert_eq!(f.kind, FillKind::FromWeekdayMean);
        assert!((f.low.co2e_kg - 1000.0).abs() < 1e-9);
        assert!((f.high.co2e_kg - 1000.0).abs() < 1e-9);
    }

    #[test]
    fn monthly_band_sums() {
        let days = tuesdays(&[100, 100, 100, 100, 100, 100, 100, 100, 100, 100]);
        let filled = fill_missing_days(&days, &compute_expected_ranges(&days, 10));
        let bands = monthly_band(&filled);
        assert_eq!(bands.len(), 3);
        for b in &bands {
            assert_eq!(b.raw, b.low);
            assert_eq!(b.low, b.high);
        }
    }

    #[test]
    fn filled_band_widths_add() {
        let mut days = tuesdays(&[80, 100, 90, 100, 100, 100, 100, 100, 100, 100]);
        // Keep everything in March-April-May; two deficient days.
        days.truncate(10);
        let mut ranges = compute_expected_ranges(&days, 10);
        ranges.by_weekday[1] = Some(ExpectedRange { low: 95, high: 100, ..ranges.by_weekday[1].unwrap() });
        let filled = fill_missing_days(&days, &ranges);
        let widths: f64 = filled.iter().map(|f| f.high.co2e_kg - f.low.co2e_kg).sum();
        let bands = monthly_band(&filled);
        let band_widths: f64 = bands.iter().map(|b| b.high.co2e_kg - b.low.co2e_kg).sum();
        assert_eq!(filled.iter().filter(|f| f.kind == FillKind::Scaled).count(), 2);
        assert!((widths - band_widths).abs() < 1e-9);
        assert!(widths > 0.0);
    }

    #[test]
    fn monthly_csv_round_trip() {
        let days = tuesdays(&[80, 100, 90, 100, 100, 100, 100, 100, 100, 100]);
        let bands = monthly_band(&fill_missing_days(&days, &compute_expected_ranges(&days, 10)));
        let mut buf = Vec::new();
        write_monthly(&mut buf, &bands).unwrap();
        let back = read_monthly(buf.as_slice()).unwrap();
        assert_eq!(back.len(), bands.len());
        for (a, b) in back.iter().zip(&bands) {
            assert_eq!(a.month, b.month);
            assert!((a.high.co2e_kg - b.high.co2e_kg).abs() <= 1e-9 * b.high.co2e_kg);
        }
    }
}
