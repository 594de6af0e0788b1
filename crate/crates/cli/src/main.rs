use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use gtpro::harness::{pareto_sweep, run_closed_loop, validate_trace, RunSummary, SweepGrid, TraceLog};
use gtpro::uncertainty::{fit_bins, fit_variance_curve, ingest_tracks, CurveFitOptions, IngestOptions, TrackSchema};
use gtpro::{Metrics, OvMode, ScenarioConfig};

#[derive(Parser)]
#[command(
    name = "gtpro",
    version,
    about = "Game-theoretic overtaking controller: closed-loop runs, metrics and model fitting"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Subcommand)]
enum Command {
    /// Run one closed-loop scenario and store its trace.
    Run {
        /// Scenario file (TOML). Without it a built-in scenario is used.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Built-in scenario when no file is given.
        #[arg(long, default_value = "polite", conflicts_with = "config")]
        scenario: OvMode,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum, default_value = "csv")]
        format: Format,
    },
    /// Recompute metrics from a stored trace.
    Metrics {
        /// Run directory or `trace.csv` file.
        #[arg(long)]
        trace: PathBuf,
    },
    /// Run a grid of weight overrides in parallel.
    Sweep {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        jobs: Option<usize>,
        /// Write the table as JSON here as well.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fit the headway-dependent variance curve from a track table.
    FitVariance {
        #[arg(long)]
        tracks: PathBuf,
        #[arg(long, default_value = "curve.json")]
        out: PathBuf,
        #[arg(long, default_value_t = 0.1)]
        bin_width: f64,
        #[arg(long, default_value_t = 30)]
        min_count: usize,
    },
    /// Check the loop invariants on a stored trace.
    Validate {
        #[arg(long)]
        trace: PathBuf,
    },
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Run { config, scenario, out, seed, format } => run(config, scenario, &out, seed, format),
        Command::Metrics { trace } => {
            let (log, _) = load_trace(&trace)?;
            print_metrics(&log.metrics()?);
            Ok(())
        }
        Command::Sweep { config, grid, jobs, out } => sweep(config, &grid, jobs, out),
        Command::FitVariance { tracks, out, bin_width, min_count } => fit(&tracks, &out, bin_width, min_count),
        Command::Validate { trace } => validate(&trace),
    }
}

fn scenario(config: Option<PathBuf>, mode: OvMode) -> Result<ScenarioConfig> {
    match config {
        Some(path) => ScenarioConfig::load(&path).with_context(|| format!("loading {}", path.display())),
        None => Ok(ScenarioConfig::with_mode(mode)),
    }
}

fn run(config: Option<PathBuf>, mode: OvMode, out: &Path, seed: Option<u64>, format: Format) -> Result<()> {
    let mut cfg = scenario(config, mode)?;
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    let log = run_closed_loop(&cfg)?;
    let summary = match format {
        Format::Csv => log.save(out)?,
        Format::Json => {
            fs::create_dir_all(out)?;
            let summary = log.summary()?;
            let doc = serde_json::json!({ "summary": summary, "records": log.records });
            fs::write(out.join("trace.json"), serde_json::to_string_pretty(&doc)?)?;
            summary
        }
    };
    println!("scenario {}: {} steps written to {}", cfg.name, log.records.len(), out.display());
    if let Some(reason) = &log.aborted {
        println!("aborted: {reason}");
    }
    print_metrics(&summary.metrics);
    Ok(())
}

/// Accepts a run directory or a CSV file; the summary next to it supplies the scenario.
fn load_trace(path: &Path) -> Result<(TraceLog, Option<RunSummary>)> {
    if path.is_dir() {
        let (log, summary) =
            TraceLog::load(path).with_context(|| format!("loading run directory {}", path.display()))?;
        return Ok((log, Some(summary)));
    }
    let summary_path = path.with_file_name("summary.json");
    let summary: Option<RunSummary> = match fs::read_to_string(&summary_path) {
        Ok(text) => Some(serde_json::from_str(&text)?),
        Err(_) => None,
    };
    let config = summary.as_ref().map(|s| s.config.clone()).unwrap_or_default();
    let file = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut log = TraceLog::read_csv(std::io::BufReader::new(file), config)?;
    if let Some(s) = &summary {
        log.final_state = s.final_state;
        log.aborted = s.aborted.clone();
    }
    Ok((log, summary))
}

fn opt(v: Option<f64>, unit: &str) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.4} {unit}"))
}

fn print_metrics(m: &Metrics) {
    println!("collision              {}", if m.collision { "yes" } else { "no" });
    println!("min headway time       {}", opt(m.min_headway_time, "s"));
    println!("min lateral distance   {}", opt(m.min_lateral_distance, "m"));
    println!("lane occupancy         {:.1} s", m.lane_occupancy_time);
    println!("rms heading (cut-in)   {}", opt(m.rms_heading_deg, "deg"));
    println!("rms lateral accel      {}", opt(m.rms_lateral_accel, "m/s^2"));
    println!("wall time mean / max   {:.4} / {:.4} s", m.mean_wall_time, m.max_wall_time);
    println!("median MPEC nodes      {}", m.median_nodes);
    println!("follower audit         max {:.2e}, {} violations", m.max_audit_error, m.audit_violations);
}

fn sweep(config: Option<PathBuf>, grid: &Path, jobs: Option<usize>, out: Option<PathBuf>) -> Result<()> {
    let base = scenario(config, OvMode::Polite)?;
    let grid = SweepGrid::load(grid).with_context(|| format!("loading grid {}", grid.display()))?;
    let points = pareto_sweep(&base, &grid, jobs)?;
    println!("{:<24} {:>12} {:>12} {:>9}  error", "point", "headway [s]", "lateral [m]", "critical");
    for p in &points {
        println!(
            "{:<24} {:>12} {:>12} {:>9}  {}",
            p.label,
            p.min_headway_time.map_or("-".into(), |h| format!("{h:.3}")),
            p.min_lateral_distance.map_or("-".into(), |d| format!("{d:.3}")),
            if p.critical { "yes" } else { "no" },
            p.error.as_deref().unwrap_or(""),
        );
    }
    if let Some(path) = out {
        fs::write(&path, serde_json::to_string_pretty(&points)?)?;
    }
    Ok(())
}

fn fit(tracks: &Path, out: &Path, bin_width: f64, min_count: usize) -> Result<()> {
    let data = ingest_tracks(tracks, &TrackSchema::default(), &IngestOptions::default())?;
    let bins = fit_bins(&data.samples, bin_width, min_count)?;
    let curve = fit_variance_curve(&bins, &CurveFitOptions::default())?;
    curve.save(out)?;
    println!("{} overtaking pairs, {} samples, {} skipped rows", data.pairs, data.samples.len(), data.skipped_rows);
    if let Some(report) = &curve.fit {
        println!(
            "R^2 rising branch {:.4}, decaying branch {:.4}",
            report.spline_r_squared, report.exponential_r_squared
        );
    }
    println!("curve written to {}", out.display());
    Ok(())
}

fn validate(path: &Path) -> Result<()> {
    let (log, summary) = load_trace(path)?;
    let report = validate_trace(&log, summary.as_ref().map(|s| &s.metrics))?;
    for c in &report.checks {
        println!("{:<20} {}  {}", c.name, if c.passed { "ok" } else { "FAILED" }, c.detail);
    }
    if !report.passed() {
        bail!("trace violates {} invariant(s)", report.checks.iter().filter(|c| !c.passed).count());
    }
    Ok(())
}
