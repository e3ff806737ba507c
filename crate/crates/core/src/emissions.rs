//! Speed-band fuel consumption and CO2e conversion.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use chrono::{DateTime, FixedOffset, NaiveDate};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pairing::{check_header, field, segment_speed, timestamp_field, PairingConfig, TravelSegment};
use crate::scalar::Scalar;
use crate::sinuosity::corrected_distance;
use crate::GeoPoint;

/// Fuel rate for speeds in `[low, high)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpeedBand<T> {
    pub low_kmh: T,
    pub high_kmh: T,
    pub liters_per_km: T,
}

/// Piecewise-constant consumption curve. Speeds below the first band or
/// above the last one take the nearest band's rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeedCurve<T> {
    bands: Vec<SpeedBand<T>>,
}

impl<T: Scalar> SpeedCurve<T> {
    /// Bands must start at 0, be contiguous and carry positive rates.
    pub fn new(bands: Vec<SpeedBand<T>>) -> Result<Self> {
        let first = bands.first().ok_or_else(|| Error::config("consumption curve has no bands"))?;
        if first.low_kmh != T::zero() {
            return Err(Error::config(format!("consumption curve must start at 0 km/h, starts at {}", first.low_kmh)));
        }
        for (i, b) in bands.iter().enumerate() {
            if !(b.low_kmh < b.high_kmh) {
                return Err(Error::config(format!("band {i} has low {} >= high {}", b.low_kmh, b.high_kmh)));
            }
            if !(b.liters_per_km.is_finite() && b.liters_per_km > T::zero()) {
                return Err(Error::config(format!("band {i} has non-positive rate {}", b.liters_per_km)));
            }
            if let Some(next) = bands.get(i + 1) {
                if next.low_kmh != b.high_kmh {
                    return Err(Error::config(format!(
                        "bands {i} and {} are not contiguous ({} vs {})",
                        i + 1,
                        b.high_kmh,
                        next.low_kmh
                    )));
                }
            }
        }
        Ok(SpeedCurve { bands })
    }

    /// One rate for every speed.
    pub fn flat(liters_per_km: T) -> Result<Self> {
        Self::new(vec![SpeedBand {
            low_kmh: T::zero(),
            high_kmh: T::infinity(),
            liters_per_km,
        }])
    }

    pub fn bands(&self) -> &[SpeedBand<T>] {
        &self.bands
    }

    pub fn rate(&self, speed_kmh: T) -> T {
        let i = self.bands.partition_point(|b| b.high_kmh <= speed_kmh);
        self.bands[i.min(self.bands.len() - 1)].liters_per_km
    }
}

impl SpeedCurve<f64> {
    /// Illustrative urban diesel bus curve shaped after published average-speed
    /// consumption functions. Replace it with jurisdiction data for real
    /// inventories.
    pub fn illustrative_urban_bus() -> Self {
        let rows = [
            (0.0, 10.0, 0.80),
            (10.0, 20.0, 0.60),
            (20.0, 30.0, 0.48),
            (30.0, 40.0, 0.42),
            (40.0, 50.0, 0.39),
            (50.0, 60.0, 0.37),
            (60.0, f64::INFINITY, 0.36),
        ];
        let bands = rows
            .iter()
            .map(|&(low_kmh, high_kmh, liters_per_km)| SpeedBand { low_kmh, high_kmh, liters_per_km })
            .collect();
        SpeedCurve::new(bands).expect("built-in curve is valid")
    }

    /// CSV with columns speed_low_kmh, speed_high_kmh, liters_per_km.
    pub fn from_csv_reader<R: Read>(r: R) -> Result<Self> {
        const CTX: &str = "curve.csv";
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(r);
        check_header(CTX, rdr.headers()?, &["speed_low_kmh", "speed_high_kmh", "liters_per_km"])
            .map_err(|e| Error::config(e.to_string()))?;
        let mut bands = Vec::new();
        for rec in rdr.records() {
            let rec = rec.map_err(|e| Error::config(format!("{CTX}: {e}")))?;
            let get = |i| field::<f64>(&rec, i, CTX).map_err(|e| Error::config(e.to_string()));
            bands.push(SpeedBand {
                low_kmh: get(0)?,
                high_kmh: get(1)?,
                liters_per_km: get(2)?,
            });
        }
        SpeedCurve::new(bands)
    }

    pub fn from_csv_file(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv_reader(f).map_err(|e| Error::config(format!("{}: {e}", path.display())))
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["speed_low_kmh", "speed_high_kmh", "liters_per_km"])?;
        for b in &self.bands {
            wtr.write_record([b.low_kmh.to_string(), b.high_kmh.to_string(), b.liters_per_km.to_string()])?;
        }
        wtr.flush().map_err(|e| Error::data("curve", e.to_string()))?;
        Ok(())
    }
}

/// Liters burned over `dist_m` meters at a mean speed of `speed_kmh`.
#[inline]
pub fn fuel_consumption<T: Scalar>(dist_m: T, speed_kmh: T, curve: &SpeedCurve<T>) -> T {
    dist_m / T::lit(1000.0) * curve.rate(speed_kmh)
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FuelKind {
    B6,
    B7,
    Custom(String),
}

impl fmt::Display for FuelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FuelKind::B6 => f.write_str("B6"),
            FuelKind::B7 => f.write_str("B7"),
            FuelKind::Custom(s) => f.write_str(s),
        }
    }
}

impl FromStr for FuelKind {
    type Err = std::convert::Infallible;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Ok(match s {
            "B6" | "b6" => FuelKind::B6,
            "B7" | "b7" => FuelKind::B7,
            other => FuelKind::Custom(other.to_string()),
        })
    }
}

/// B6 diesel, tCO2e per m3.
pub const B6_TCO2E_PER_M3: f64 = 2.51;
/// B7 diesel, tCO2e per m3.
pub const B7_TCO2E_PER_M3: f64 = 2.49;

/// A fuel blend and the dates (inclusive) it was sold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fuel<T> {
    pub kind: FuelKind,
    pub tco2e_per_m3: T,
    pub from: NaiveDate,
    pub to: NaiveDate,
}

impl<T: Scalar> Fuel<T> {
    pub fn b6(from: NaiveDate, to: NaiveDate) -> Self {
        Fuel { kind: FuelKind::B6, tco2e_per_m3: T::lit(B6_TCO2E_PER_M3), from, to }
    }

    pub fn b7(from: NaiveDate, to: NaiveDate) -> Self {
        Fuel { kind: FuelKind::B7, tco2e_per_m3: T::lit(B7_TCO2E_PER_M3), from, to }
    }
}

/// Non-overlapping fuel periods sorted by start date.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FuelTable<T> {
    fuels: Vec<Fuel<T>>,
}

impl<T: Scalar> FuelTable<T> {
    pub fn new(mut fuels: Vec<Fuel<T>>) -> Result<Self> {
        if fuels.is_empty() {
            return Err(Error::config("fuel table is empty"));
        }
        fuels.sort_by_key(|f| f.from);
        for f in &fuels {
            if !(f.tco2e_per_m3.is_finite() && f.tco2e_per_m3 > T::zero()) {
                return Err(Error::config(format!("fuel {} has non-positive factor", f.kind)));
            }
            if f.from > f.to {
                return Err(Error::config(format!("fuel {} period ends before it starts", f.kind)));
            }
        }
        for w in fuels.windows(2) {
            if w[1].from <= w[0].to {
                return Err(Error::config(format!(
                    "fuel periods overlap: {} ({}..{}) and {} ({}..{})",
                    w[0].kind, w[0].from, w[0].to, w[1].kind, w[1].from, w[1].to
                )));
            }
        }
        Ok(FuelTable { fuels })
    }

    pub fn fuels(&self) -> &[Fuel<T>] {
        &self.fuels
    }

    pub fn lookup(&self, date: NaiveDate) -> Result<&Fuel<T>> {
        let i = self.fuels.partition_point(|f| f.to < date);
        match self.fuels.get(i) {
            Some(f) if f.from <= date => Ok(f),
            _ => Err(Error::UncoveredDate(date)),
        }
    }

    /// Checks that every day of `[from, to]` has a fuel.
    pub fn check_covers(&self, from: NaiveDate, to: NaiveDate) -> Result<()> {
        let mut day = from;
        while day <= to {
            let f = self.lookup(day)?;
            day = match f.to.succ_opt() {
                Some(d) => d,
                None => break,
            };
        }
        Ok(())
    }
}

impl FuelTable<f64> {
    /// CSV with columns name, factor_tco2e_per_m3, from_date, to_date.
    pub fn from_csv_reader<R: Read>(r: R) -> Result<Self> {
        const CTX: &str = "fuels.csv";
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(r);
        check_header(CTX, rdr.headers()?, &["name", "factor_tco2e_per_m3", "from_date", "to_date"])
            .map_err(|e| Error::config(e.to_string()))?;
        let mut fuels = Vec::new();
        for rec in rdr.records() {
            let rec = rec.map_err(|e| Error::config(format!("{CTX}: {e}")))?;
            let cfg_err = |e: Error| Error::config(e.to_string());
            fuels.push(Fuel {
                kind: rec[0].parse().unwrap_or(FuelKind::Custom(String::new())),
                tco2e_per_m3: field(&rec, 1, CTX).map_err(cfg_err)?,
                from: field(&rec, 2, CTX).map_err(cfg_err)?,
                to: field(&rec, 3, CTX).map_err(cfg_err)?,
            });
        }
        FuelTable::new(fuels)
    }

    pub fn from_csv_file(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv_reader(f).map_err(|e| Error::config(format!("{}: {e}", path.display())))
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["name", "factor_tco2e_per_m3", "from_date", "to_date"])?;
        for f in &self.fuels {
            wtr.write_record([f.kind.to_string(), f.tco2e_per_m3.to_string(), f.from.to_string(), f.to.to_string()])?;
        }
        wtr.flush().map_err(|e| Error::data("fuels", e.to_string()))?;
        Ok(())
    }
}

/// kg CO2e for `fuel_l` liters burned on `date`.
///
/// L * 1e-3 m3/L * factor t/m3 * 1e3 kg/t reduces to L * factor; the scale
/// factors cancel and are not applied.
pub fn co2e_emissions<T: Scalar>(fuel_l: T, date: NaiveDate, fuels: &FuelTable<T>) -> Result<T> {
    Ok(fuel_l * fuels.lookup(date)?.tco2e_per_m3)
}

/// Emission attributed to one travel segment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentEmission {
    pub vehicle_id: String,
    pub line_id: String,
    pub t_start: DateTime<FixedOffset>,
    pub start: GeoPoint,
    pub dt_s: f64,
    pub euclid_m: f64,
    pub corrected_m: f64,
    pub speed_kmh: f64,
    pub fuel_l: f64,
    pub co2e_kg: f64,
}

impl SegmentEmission {
    pub fn day(&self) -> NaiveDate {
        self.t_start.date_naive()
    }
}

/// Corrects the distance, derives the mean speed from the corrected
/// distance, then applies the curve and the fuel factor of the start date.
pub fn emissions_for_segment(
    seg: &TravelSegment,
    mean_s: f64,
    curve: &SpeedCurve<f64>,
    fuels: &FuelTable<f64>,
    cfg: &PairingConfig,
) -> Result<SegmentEmission> {
    let corrected_m = corrected_distance(seg.euclid_m, mean_s, cfg.near_threshold_m);
    let speed_kmh = segment_speed(corrected_m, seg.dt_s);
    let fuel_l = fuel_consumption(corrected_m, speed_kmh, curve);
    let co2e_kg = co2e_emissions(fuel_l, seg.day(), fuels)?;
    Ok(SegmentEmission {
        vehicle_id: seg.vehicle_id.clone(),
        line_id: seg.line_id.clone(),
        t_start: seg.start.timestamp,
        start: seg.start.position,
        dt_s: seg.dt_s,
        euclid_m: seg.euclid_m,
        corrected_m,
        speed_kmh,
        fuel_l,
        co2e_kg,
    })
}

pub fn compute_emissions(
    segments: &[TravelSegment],
    mean_s: f64,
    curve: &SpeedCurve<f64>,
    fuels: &FuelTable<f64>,
    cfg: &PairingConfig,
) -> Result<Vec<SegmentEmission>> {
    segments
        .par_iter()
        .map(|s| emissions_for_segment(s, mean_s, curve, fuels, cfg))
        .collect()
}

pub const EMISSIONS_HEADER: [&str; 11] = [
    "vehicle", "line", "t_start", "start_lat", "start_lon", "dt_s", "euclid_m", "corrected_m", "speed_kmh",
    "fuel_l", "co2e_kg",
];

pub fn write_emissions<W: Write>(w: W, rows: &[SegmentEmission]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(EMISSIONS_HEADER)?;
    for e in rows {
        wtr.write_record([
            e.vehicle_id.clone(),
            e.line_id.clone(),
            e.t_start.to_rfc3339(),
            e.start.lat.to_string(),
            e.start.lon.to_string(),
            e.dt_s.to_string(),
            e.euclid_m.to_string(),
            e.corrected_m.to_string(),
            e.speed_kmh.to_string(),
            e.fuel_l.to_string(),
            e.co2e_kg.to_string(),
        ])?;
    }
    wtr.flush().map_err(|e| Error::data("segment emissions", e.to_string()))?;
    Ok(())
}

pub fn read_emissions<R: Read>(r: R) -> Result<Vec<SegmentEmission>> {
    const CTX: &str = "segment_emissions.csv";
    let mut rdr = csv::Reader::from_reader(r);
    check_header(CTX, rdr.headers()?, &EMISSIONS_HEADER)?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        out.push(SegmentEmission {
            vehicle_id: rec[0].to_string(),
            line_id: rec[1].to_string(),
            t_start: timestamp_field(&rec, 2, CTX)?,
            start: GeoPoint::new(field(&rec, 3, CTX)?, field(&rec, 4, CTX)?),
            dt_s: field(&rec, 5, CTX)?,
            euclid_m: field(&rec, 6, CTX)?,
            corrected_m: field(&rec, 7, CTX)?,
            speed_kmh: field(&rec, 8, CTX)?,
            fuel_l: field(&rec, 9, CTX)?,
            co2e_kg: field(&rec, 10, CTX)?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pairing::SegmentEnd;

    fn d(s: &str) -> NaiveDate {
        s.parse().unwrap()
    }

    fn three_bands() -> SpeedCurve<f64> {
        SpeedCurve::new(vec![
            SpeedBand { low_kmh: 0.0, high_kmh: 20.0, liters_per_km: 0.6 },
            SpeedBand { low_kmh: 20.0, high_kmh: 40.0, liters_per_km: 0.5 },
            SpeedBand { low_kmh: 40.0, high_kmh: f64::INFINITY, liters_per_km: 0.45 },
        ])
        .unwrap()
    }

    fn fuels() -> FuelTable<f64> {
        FuelTable::new(vec![Fuel::b6(d("2015-01-01"), d("2015-06-30")), Fuel::b7(d("2015-07-01"), d("2015-12-31"))])
            .unwrap()
    }

    #[test]
    fn flat_curve_is_linear_in_distance() {
        let c = SpeedCurve::<f64>::flat(0.4).unwrap();
        assert!((fuel_consumption(10_000.0, 25.0, &c) - 4.0).abs() < 1e-12);
    }

    #[test]
    fn band_lookup() {
        let c = three_bands();
        assert_eq!(fuel_consumption(6000.0, 30.0, &c), 3.0);
        assert_eq!(c.rate(0.0), 0.6);
        assert_eq!(c.rate(20.0), 0.5);
        assert_eq!(c.rate(39.999), 0.5);
        assert_eq!(c.rate(500.0), 0.45);
        assert_eq!(fuel_consumption(0.0, 33.0, &c), 0.0);
    }

    #[test]
    fn clamps_above_a_finite_top_band() {
        let c = SpeedCurve::new(vec![
            SpeedBand { low_kmh: 0.0, high_kmh: 20.0, liters_per_km: 0.6 },
            SpeedBand { low_kmh: 20.0, high_kmh: 60.0, liters_per_km: 0.4 },
        ])
        .unwrap();
        assert_eq!(c.rate(90.0), 0.4);
    }

    #[test]
    fn curve_validation() {
        let gap = vec![
            SpeedBand { low_kmh: 0.0, high_kmh: 20.0, liters_per_km: 0.6 },
            SpeedBand { low_kmh: 25.0, high_kmh: 60.0, liters_per_km: 0.4 },
        ];
        assert!(SpeedCurve::new(gap).is_err());
        let late_start = vec![SpeedBand { low_kmh: 5.0, high_kmh: 20.0, liters_per_km: 0.6 }];
        assert!(SpeedCurve::new(late_start).is_err());
        let zero_rate = vec![SpeedBand { low_kmh: 0.0, high_kmh: 20.0, liters_per_km: 0.0 }];
        assert!(SpeedCurve::new(zero_rate).is_err());
        assert!(SpeedCurve::<f64>::new(vec![]).is_err());
    }

    #[test]
    fn diesel_factors() {
        let f = fuels();
        assert_eq!(co2e_emissions(1000.0, d("2015-03-01"), &f).unwrap(), 2510.0);
        assert_eq!(co2e_emissions(1000.0, d("2015-09-01"), &f).unwrap(), 2490.0);
        assert_eq!(co2e_emissions(0.0, d("2015-09-01"), &f).unwrap(), 0.0);
    }

    #[test]
    fn uncovered_date_names_the_gap() {
        let err = co2e_emissions(1.0, d("2016-01-01"), &fuels()).unwrap_err();
        assert!(matches!(err, Error::UncoveredDate(day) if day == d("2016-01-01")));
        assert!(fuels().check_covers(d("2015-01-01"), d("2015-12-31")).is_ok());
        assert!(fuels().check_covers(d("2014-12-31"), d("2015-02-01")).is_err());
    }

    #[test]
    fn overlapping_fuels_are_rejected() {
        let r = FuelTable::new(vec![Fuel::<f64>::b6(d("2015-01-01"), d("2015-07-01")), Fuel::b7(d("2015-07-01"), d("2015-12-31"))]);
        assert!(r.is_err());
    }

    fn seg(euclid_m: f64, dt_s: f64) -> TravelSegment {
        let t = DateTime::parse_from_rfc3339("2015-03-03T10:00:00-03:00").unwrap();
        let end = SegmentEnd { timestamp: t, position: GeoPoint::new(0.0, 0.0), source_row: 2 };
        TravelSegment {
            vehicle_id: "v".into(),
            line_id: "l".into(),
            start: SegmentEnd { source_row: 1, ..end },
            end,
            dt_s,
            euclid_m,
        }
    }

    #[test]
    fn segment_composition() {
        let flat = SpeedCurve::flat(0.4).unwrap();
        let cfg = PairingConfig::default();
        let e = emissions_for_segment(&seg(1000.0, 120.0), 1.2, &flat, &fuels(), &cfg).unwrap();
        assert_eq!(e.corrected_m, 1200.0);
        assert!((e.speed_kmh - 36.0).abs() < 1e-12);
        assert!((e.fuel_l - 0.48).abs() < 1e-12);
        assert!((e.co2e_kg - 1.2048).abs() < 1e-12);

        let zero = emissions_for_segment(&seg(0.0, 120.0), 1.2, &flat, &fuels(), &cfg).unwrap();
        assert_eq!((zero.corrected_m, zero.speed_kmh, zero.fuel_l, zero.co2e_kg), (0.0, 0.0, 0.0, 0.0));

        let near = emissions_for_segment(&seg(40.0, 120.0), 1.2, &flat, &fuels(), &cfg).unwrap();
        assert_eq!(near.corrected_m, 40.0);
    }

    #[test]
    fn curve_and_fuel_csv_round_trip() {
        let mut buf = Vec::new();
        three_bands().write_csv(&mut buf).unwrap();
        assert_eq!(SpeedCurve::from_csv_reader(buf.as_slice()).unwrap(), three_bands());
        let mut buf = Vec::new();
        fuels().write_csv(&mut buf).unwrap();
        assert_eq!(FuelTable::from_csv_reader(buf.as_slice()).unwrap(), fuels());
    }

    #[test]
    fn f32_kernels() {
        let c = SpeedCurve::<f32>::flat(0.5).unwrap();
        assert_eq!(fuel_consumption(2000.0f32, 20.0, &c), 1.0);
        let table = FuelTable::new(vec![Fuel::<f32>::b6(d("2015-01-01"), d("2015-12-31"))]).unwrap();
        assert!((co2e_emissions(1.0f32, d("2015-05-05"), &table).unwrap() - 2.51).abs() < 1e-6);
    }
}
