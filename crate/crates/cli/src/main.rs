use std::path::{Path, PathBuf};
use std::process::ExitCode;

use busemit::config::RunConfig;
use busemit::pipeline;
use busemit::synthgen::{generate, write_corpus, Scenario};
use busemit::{Error, Result};
use clap::{Args, Parser, Subcommand};

/// Bus fleet CO2e estimation from low-resolution GPS.
///
/// Log verbosity follows RUST_LOG (default: info).
#[derive(Parser, Debug)]
#[command(name = "busemit", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Full pipeline: ingest, pairing, sinuosity, emissions, gapfill, analytics.
    Run(Common),
    /// GPS file to segments.csv.
    Ingest(Common),
    /// segments.csv to sinuosity_report.csv and sinuosity_summary.json.
    Sinuosity {
        #[command(flatten)]
        common: Common,
        /// Segments file; defaults to segments.csv in the output directory.
        #[arg(long)]
        segments: Option<PathBuf>,
    },
    /// segments.csv and the sinuosity summary to segment_emissions.csv.
    Emissions(Common),
    /// segment_emissions.csv to daily.csv, expected_ranges.csv, monthly_totals.csv.
    Gapfill(Common),
    /// segment_emissions.csv to lattice, temporal, line, free-flow and validation outputs.
    Analyze(Common),
    /// Generate a synthetic corpus with ground truth from a scenario file.
    Synth {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Replace the scenario seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Print a configuration file holding every default.
    Defaults,
}

/// Flags shared by the pipeline commands. Each one overrides the file.
#[derive(Args, Debug)]
struct Common {
    #[arg(long, short)]
    config: PathBuf,
    #[arg(long)]
    output: Option<PathBuf>,
    /// Worker threads; 0 uses every core.
    #[arg(long)]
    workers: Option<usize>,
    /// Sinuosity sampling seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Sinuosity sampling fraction.
    #[arg(long)]
    fraction: Option<f64>,
    /// Use this mean sinuosity instead of estimating it.
    #[arg(long = "mean-s")]
    mean_s: Option<f64>,
    #[arg(long)]
    debug_dump: bool,
}

impl Common {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::load(&self.config)?;
        if let Some(o) = &self.output {
            cfg.output_dir = absolute(o)?;
        }
        if let Some(w) = self.workers {
            cfg.workers = w;
        }
        if let Some(s) = self.seed {
            cfg.sinuosity.seed = s;
        }
        if let Some(f) = self.fraction {
            cfg.sinuosity.fraction = f;
        }
        if self.mean_s.is_some() {
            cfg.mean_s_override = self.mean_s;
        }
        cfg.debug_dump |= self.debug_dump;
        Ok(cfg)
    }
}

fn absolute(p: &Path) -> Result<PathBuf> {
    if p.is_absolute() {
        return Ok(p.to_path_buf());
    }
    let cwd = std::env::current_dir().map_err(|e| Error::io(".", e))?;
    Ok(cwd.join(p))
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run(c) => {
            let cfg = c.load()?;
            let s = pipeline::run_pipeline(&cfg)?;
            let total = busemit::aggregate::grand_total(&s.emissions);
            println!("mean sinuosity {:.6}", s.mean_s);
            println!("segments {}", total.segment_count);
            println!("distance {:.3} km", total.dist_km);
            println!("fuel {:.3} L", total.fuel_l);
            println!("co2e {:.3} kg", total.co2e_kg);
            println!("outputs in {}", s.info.output_dir.display());
        }
        Command::Ingest(c) => {
            let out = pipeline::run_ingest_stage(&c.load()?)?;
            println!("rows read {}, clean {}, segments {}", out.stats.rows_read, out.stats.clean_count(), out.segments.len());
        }
        Command::Sinuosity { common, segments } => {
            let seg = segments.as_deref().map(absolute).transpose()?;
            let est = pipeline::run_sinuosity_stage(&common.load()?, seg.as_deref())?;
            println!("mean sinuosity {:.6} from {} of {} drawn samples", est.mean_s, est.sample_size, est.drawn);
        }
        Command::Emissions(c) => {
            let rows = pipeline::run_emissions_stage(&c.load()?)?;
            println!("co2e {:.3} kg over {} segments", busemit::aggregate::grand_total(&rows).co2e_kg, rows.len());
        }
        Command::Gapfill(c) => {
            let g = pipeline::run_gapfill_stage(&c.load()?)?;
            println!("{} days, {} months", g.days.len(), g.bands.len());
        }
        Command::Analyze(c) => {
            let a = pipeline::run_analyze_stage(&c.load()?)?;
            println!("{} lines ranked, {} in the free-flow comparison", a.lines.len(), a.freeflow.results.len());
        }
        Command::Synth { scenario, out, seed } => {
            let mut sc = Scenario::load(&scenario)?;
            if let Some(s) = seed {
                sc.seed = s;
            }
            let corpus = generate(&sc)?;
            write_corpus(&out, &sc, &corpus)?;
            println!("{} pings, {} ledger rows written to {}", corpus.pings.len(), corpus.ledger.len(), out.display());
        }
        Command::Defaults => {
            println!("# Also required before a run:");
            println!("# bounds = {{ min_lat = -23.1, max_lat = -22.7, min_lon = -43.8, max_lon = -43.1 }}");
            println!("# and under [inputs] either nodes + edges or graph_geojson.");
            println!("# Optional under [inputs]: curve (built-in illustrative curve otherwise), reference.");
            println!("# Optional: mean_s_override, gapfill.from, gapfill.to, analysis.weekdays.");
            println!();
            print!("{}", RunConfig::default().to_toml()?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            let mut src = std::error::Error::source(&e);
            while let Some(s) = src {
                log::error!("  caused by: {s}");
                src = s.source();
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
