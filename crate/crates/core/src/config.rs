//! Run configuration. One TOML file; relative paths resolve against the
//! file's directory. Every field has a default except the GPS input, the graph
//! and the bounding box.

use std::path::{Path, PathBuf};

use chrono::{FixedOffset, NaiveDate, Weekday};
use serde::{Deserialize, Serialize};

use crate::analytics::FreeFlowParams;
use crate::error::{Error, Result};
use crate::ingest::GpsSchema;
use crate::pairing::PairingConfig;
use crate::sinuosity::SinuosityConfig;
use crate::BoundingBox;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Inputs {
    pub gps: PathBuf,
    /// Graph as nodes.csv + edges.csv ...
    pub nodes: Option<PathBuf>,
    pub edges: Option<PathBuf>,
    /// ... or as GeoJSON LineStrings.
    pub graph_geojson: Option<PathBuf>,
    /// Built-in illustrative curve when absent.
    pub curve: Option<PathBuf>,
    pub fuels: PathBuf,
    /// Monthly top-down totals; validation is skipped when absent.
    pub reference: Option<PathBuf>,
}

impl Default for Inputs {
    fn default() -> Self {
        Inputs {
            gps: "gps.csv".into(),
            nodes: None,
            edges: None,
            graph_geojson: None,
            curve: None,
            fuels: "fuels.csv".into(),
            reference: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LatticeConfig {
    pub cell_size_m: f64,
}

impl Default for LatticeConfig {
    fn default() -> Self {
        LatticeConfig { cell_size_m: 500.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GapfillConfig {
    /// Weekdays with fewer observed days are flagged insufficient.
    pub min_observations: usize,
    /// Calendar to fill, inclusive. Defaults to the observed date span.
    pub from: Option<NaiveDate>,
    pub to: Option<NaiveDate>,
}

impl Default for GapfillConfig {
    fn default() -> Self {
        GapfillConfig { min_observations: 10, from: None, to: None }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    /// Weekdays kept in the lattice map; all when absent.
    pub weekdays: Option<Vec<Weekday>>,
    /// Keep only days at or above the weekday's expected low count.
    pub best_days_only: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub inputs: Inputs,
    pub gps_format: GpsSchema,
    pub bounds: Option<BoundingBox>,
    /// Offset used to assign records to local days and hours.
    pub utc_offset: String,
    pub pairing: PairingConfig,
    pub sinuosity: SinuosityConfig,
    /// Skip estimation and use this factor.
    pub mean_s_override: Option<f64>,
    pub lattice: LatticeConfig,
    pub gapfill: GapfillConfig,
    pub freeflow: FreeFlowParams,
    pub analysis: AnalysisConfig,
    pub output_dir: PathBuf,
    /// Worker threads; 0 uses every core.
    pub workers: usize,
    /// Also write per-partition records and per-sample reconstructions.
    pub debug_dump: bool,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            inputs: Inputs::default(),
            gps_format: GpsSchema::default(),
            bounds: None,
            utc_offset: "-03:00".into(),
            pairing: PairingConfig::default(),
            sinuosity: SinuosityConfig::default(),
            mean_s_override: None,
            lattice: LatticeConfig::default(),
            gapfill: GapfillConfig::default(),
            freeflow: FreeFlowParams::default(),
            analysis: AnalysisConfig::default(),
            output_dir: "out".into(),
            workers: 0,
            debug_dump: false,
            base_dir: PathBuf::from("."),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.base_dir = base_dir.into();
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_toml_str(&text, base).map_err(|e| Error::config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Internal(e.to_string()))
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn output_path(&self, name: &str) -> PathBuf {
        self.resolve(&self.output_dir).join(name)
    }

    pub fn offset(&self) -> Result<FixedOffset> {
        self.utc_offset
            .parse()
            .map_err(|_| Error::config(format!("utc_offset `{}` is not of the form +HH:MM", self.utc_offset)))
    }

    pub fn bounds(&self) -> Result<BoundingBox> {
        let b = self.bounds.ok_or_else(|| Error::config("bounds is required"))?;
        b.validate()?;
        Ok(b)
    }

    pub fn gapfill_period(&self) -> Result<Option<(NaiveDate, NaiveDate)>> {
        match (self.gapfill.from, self.gapfill.to) {
            (None, None) => Ok(None),
            (Some(a), Some(b)) if a <= b => Ok(Some((a, b))),
            (Some(_), Some(_)) => Err(Error::config("gapfill.from is after gapfill.to")),
            _ => Err(Error::config("gapfill.from and gapfill.to must be given together")),
        }
    }

    /// Checks values and that every referenced file exists.
    pub fn validate(&self) -> Result<()> {
        self.bounds()?;
        self.offset()?;
        self.pairing.validate()?;
        self.sinuosity.validate()?;
        self.freeflow.validate()?;
        self.gapfill_period()?;
        if !(self.lattice.cell_size_m.is_finite() && self.lattice.cell_size_m > 0.0) {
            return Err(Error::config("lattice.cell_size_m must be positive"));
        }
        if let Some(s) = self.mean_s_override {
            if !(s.is_finite() && s >= 1.0) {
                return Err(Error::config(format!("mean_s_override must be >= 1, got {s}")));
            }
        }
        match (&self.inputs.nodes, &self.inputs.edges, &self.inputs.graph_geojson) {
            (Some(_), Some(_), None) | (None, None, Some(_)) => {}
            _ => {
                return Err(Error::config(
                    "give the graph either as inputs.nodes + inputs.edges or as inputs.graph_geojson",
                ))
            }
        }
        let mut files = vec![&self.inputs.gps, &self.inputs.fuels];
        files.extend(self.inputs.nodes.iter());
        files.extend(self.inputs.edges.iter());
        files.extend(self.inputs.graph_geojson.iter());
        files.extend(self.inputs.curve.iter());
        files.extend(self.inputs.reference.iter());
        for f in files {
            let p = self.resolve(f);
            if !p.is_file() {
                return Err(Error::config(format!("input file {} does not exist", p.display())));
            }
        }
        Ok(())
    }

    /// Serialized form with the fields that cannot change results removed.
    pub fn snapshot(&self) -> serde_json::Value {
        let mut v = serde_json::to_value(self).unwrap_or_default();
        if let Some(m) = v.as_object_mut() {
            m.remove("workers");
            m.remove("output_dir");
            m.remove("debug_dump");
        }
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_fill_an_almost_empty_file() {
        let cfg = RunConfig::from_toml_str(
            "bounds = { min_lat = -23.1, max_lat = -22.7, min_lon = -43.8, max_lon = -43.1 }\n",
            ".",
        )
        .unwrap();
        assert_eq!(cfg.pairing.max_gap_s, 180.0);
        assert_eq!(cfg.sinuosity.fraction, 0.01);
        assert_eq!(cfg.lattice.cell_size_m, 500.0);
        assert_eq!(cfg.offset().unwrap(), FixedOffset::west_opt(3 * 3600).unwrap());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_toml_str("bogus = 1\n", ".").is_err());
        assert!(RunConfig::from_toml_str("[pairing]\nmax_gap = 1\n", ".").is_err());
    }

    #[test]
    fn missing_file_names_the_path() {
        let cfg = RunConfig::from_toml_str(
            r#"
bounds = { min_lat = -23.1, max_lat = -22.7, min_lon = -43.8, max_lon = -43.1 }
[inputs]
gps = "nowhere/gps.csv"
nodes = "n.csv"
edges = "e.csv"
"#,
            "/tmp",
        )
        .unwrap();
        let e = cfg.validate().unwrap_err();
        assert!(e.to_string().contains("nowhere/gps.csv"), "{e}");
        assert_eq!(e.exit_code(), 1);
    }

    #[test]
    fn toml_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.bounds = Some(BoundingBox::new(-1.0, 1.0, -1.0, 1.0).unwrap());
        cfg.analysis.weekdays = Some(vec![Weekday::Tue]);
        let text = cfg.to_toml().unwrap();
        let back = RunConfig::from_toml_str(&text, ".").unwrap();
        assert_eq!(back, cfg);
    }
}
