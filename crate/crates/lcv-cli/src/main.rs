//! `lcv` — closed-loop conveyor sorting from the command line: run single
//! simulations, paired controller experiments, offline estimation replays,
//! and aggregate reports over previously written runs.
//!
//! Exit codes: 0 on success, 2 for input/configuration problems, 3 for
//! runtime failures.

mod output;

use std::fmt;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use lcv::{
    generate_infeed, paired_experiment, run_closed_loop, run_filter, Accounting, Config,
    ConfigError, ControlError, Controller, EstimateError, FilterState, SimError,
};
use output::{
    ensure_writable, prepare_out_dir, read_controls, read_detections_jsonl, read_run_csv,
    run_csv_path, write_controls, write_detections_jsonl, write_estimate_csv, write_report_csv,
    write_run_csv, write_summary_csv, ControllerStats, ParsedRun,
};

/// Failure classified by exit code: input problems exit 2, runtime ones 3.
#[derive(Debug)]
pub enum AppError {
    Input(String),
    Runtime(String),
}

impl AppError {
    fn code(&self) -> i32 {
        match self {
            AppError::Input(_) => 2,
            AppError::Runtime(_) => 3,
        }
    }
}

impl fmt::Display for AppError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AppError::Input(msg) | AppError::Runtime(msg) => write!(f, "{msg}"),
        }
    }
}

impl From<ConfigError> for AppError {
    fn from(e: ConfigError) -> AppError {
        AppError::Input(e.to_string())
    }
}

impl From<SimError> for AppError {
    fn from(e: SimError) -> AppError {
        match e {
            SimError::Config(c) => AppError::Input(c.to_string()),
            SimError::InfeedShape { .. } => AppError::Input(e.to_string()),
            SimError::Control(ControlError::Config(c)) => AppError::Input(c.to_string()),
            other => AppError::Runtime(other.to_string()),
        }
    }
}

fn estimate_error(e: EstimateError) -> AppError {
    match e {
        EstimateError::Model(_) | EstimateError::SingularInnovation => {
            AppError::Runtime(e.to_string())
        }
        other => AppError::Input(other.to_string()),
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum ControllerArg {
    /// Receding-horizon speed optimization on the filtered state.
    Mpc,
    /// Hold a fixed target speed.
    Constant,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum AccountingArg {
    /// Reward picked mass at full price and exited mass at price minus the
    /// mixed-bale floor.
    Prose,
    /// Score the post-step state with the value/opportunity-cost weights.
    Literal,
}

impl AccountingArg {
    fn into_lib(self) -> Accounting {
        match self {
            AccountingArg::Prose => Accounting::Prose,
            AccountingArg::Literal => Accounting::Literal,
        }
    }
}

#[derive(Parser)]
#[command(
    name = "lcv",
    version,
    about = "Closed-loop conveyor sorting: simulate, experiment, estimate, report"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one closed-loop simulation and dump its timeseries, detections,
    /// and applied controls.
    Simulate {
        /// Configuration file (JSON).
        #[arg(long)]
        config: PathBuf,
        /// RNG seed for the plant, detector, and infeed streams.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Which controller drives the belt.
        #[arg(long, value_enum, default_value_t = ControllerArg::Mpc)]
        controller: ControllerArg,
        /// Target speed for the constant controller (defaults to the
        /// configured initial speed).
        #[arg(long)]
        speed: Option<f64>,
        /// Override the configured stage-reward accounting.
        #[arg(long, value_enum)]
        accounting: Option<AccountingArg>,
        /// Output directory.
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Overwrite existing output files.
        #[arg(long)]
        force: bool,
    },
    /// Run the paired experiment: per seed, an MPC run and a constant-speed
    /// rerun at the MPC run's average speed over the identical infeed.
    Experiment {
        /// Configuration file (JSON).
        #[arg(long)]
        config: PathBuf,
        /// Seeds as an inclusive range `A..B` or a single seed `N`.
        #[arg(long, default_value = "0..29")]
        seeds: String,
        /// Override the configured stage-reward accounting.
        #[arg(long, value_enum)]
        accounting: Option<AccountingArg>,
        /// Output directory.
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Overwrite existing output files.
        #[arg(long)]
        force: bool,
    },
    /// Replay a detection stream and control log through the filter,
    /// writing per-step estimated belt totals.
    Estimate {
        /// Configuration file (JSON).
        #[arg(long)]
        config: PathBuf,
        /// Detection stream (JSONL, one object per line).
        #[arg(long)]
        detections: PathBuf,
        /// Applied controls, one per line.
        #[arg(long)]
        controls: PathBuf,
        /// Output directory.
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Overwrite existing output files.
        #[arg(long)]
        force: bool,
    },
    /// Aggregate previously written run CSVs: profit rate mean/variance per
    /// controller and paired improvements.
    Report {
        /// Directory holding run_*.csv files.
        #[arg(long)]
        dir: PathBuf,
        /// Output directory for report.csv (defaults to --dir).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overwrite existing output files.
        #[arg(long)]
        force: bool,
    },
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate {
            config,
            seed,
            controller,
            speed,
            accounting,
            out,
            force,
        } => cmd_simulate(&config, seed, controller, speed, accounting, &out, force),
        Command::Experiment {
            config,
            seeds,
            accounting,
            out,
            force,
        } => cmd_experiment(&config, &seeds, accounting, &out, force),
        Command::Estimate {
            config,
            detections,
            controls,
            out,
            force,
        } => cmd_estimate(&config, &detections, &controls, &out, force),
        Command::Report { dir, out, force } => cmd_report(&dir, out.as_deref(), force),
    };
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(e.code());
    }
}

/// Loads a configuration and applies the command-line accounting override.
/// The override changes behavior, so it lands before hashing.
fn load_config(path: &Path, accounting: Option<AccountingArg>) -> Result<Config, AppError> {
    let mut config = Config::load(path)?;
    if let Some(acc) = accounting {
        config.mpc.accounting = acc.into_lib();
    }
    Ok(config)
}

/// Parses `--seeds`: either `A..B` (inclusive) or a single seed.
fn parse_seeds(text: &str) -> Result<Vec<u64>, AppError> {
    let bad = |detail: &str| {
        AppError::Input(format!(
            "--seeds {text}: {detail} (expected `A..B` inclusive or a single seed)"
        ))
    };
    if let Some((a, b)) = text.split_once("..") {
        let first: u64 = a.trim().parse().map_err(|_| bad("bad range start"))?;
        let last: u64 = b.trim().parse().map_err(|_| bad("bad range end"))?;
        if first > last {
            return Err(bad("range start exceeds end"));
        }
        Ok((first..=last).collect())
    } else {
        Ok(vec![text.trim().parse().map_err(|_| bad("bad seed"))?])
    }
}

/// Writes `manifest.json` describing one run-producing invocation.
fn write_manifest(
    dir: &Path,
    command: &str,
    config_path: &Path,
    hash: &str,
    seeds: &[u64],
    force: bool,
) -> Result<(), AppError> {
    let path = dir.join("manifest.json");
    ensure_writable(&path, force)?;
    let manifest = serde_json::json!({
        "command": command,
        "config": config_path.display().to_string(),
        "config_hash": hash,
        "seeds": seeds,
        "out": dir.display().to_string(),
    });
    let text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| AppError::Runtime(format!("cannot encode manifest: {e}")))?;
    std::fs::write(&path, text + "\n")
        .map_err(|e| AppError::Runtime(format!("cannot write {}: {e}", path.display())))
}

fn cmd_simulate(
    config_path: &Path,
    seed: u64,
    controller_arg: ControllerArg,
    speed: Option<f64>,
    accounting: Option<AccountingArg>,
    out: &Path,
    force: bool,
) -> Result<(), AppError> {
    let config = load_config(config_path, accounting)?;
    let hash = config.hash();
    let controller = match controller_arg {
        ControllerArg::Mpc => {
            if speed.is_some() {
                return Err(AppError::Input(
                    "--speed only applies to --controller constant".into(),
                ));
            }
            Controller::Mpc
        }
        ControllerArg::Constant => {
            let target = speed.unwrap_or(config.initial_speed);
            let (lo, hi) = (config.system.r_min, config.system.r_max);
            if !target.is_finite() || target < lo || target > hi {
                return Err(AppError::Input(format!(
                    "--speed {target} outside the belt's speed envelope [{lo}, {hi}]"
                )));
            }
            Controller::Constant { target }
        }
    };

    prepare_out_dir(out)?;
    let run_path = run_csv_path(out, seed, controller.label());
    let det_path = out.join(format!("detections_{seed}_{}.jsonl", controller.label()));
    let ctl_path = out.join(format!("controls_{seed}_{}.txt", controller.label()));
    for path in [&run_path, &det_path, &ctl_path] {
        ensure_writable(path, force)?;
    }

    let record = run_closed_loop(&config, &controller, seed)?;
    debug_assert_eq!(record.meta.config_hash, hash);
    write_run_csv(&run_path, &record, config.system.n())?;
    write_detections_jsonl(&det_path, &record.detections)?;
    write_controls(&ctl_path, &record.controls)?;
    write_manifest(out, "simulate", config_path, &hash, &[seed], force)?;

    println!(
        "seed {} controller {}: total_value={} avg_speed={} profit_rate={} steps={}",
        seed,
        record.meta.controller,
        record.total_value,
        record.avg_speed,
        record.profit_rate(),
        record.rows.len()
    );
    Ok(())
}

fn cmd_experiment(
    config_path: &Path,
    seeds_text: &str,
    accounting: Option<AccountingArg>,
    out: &Path,
    force: bool,
) -> Result<(), AppError> {
    let config = load_config(config_path, accounting)?;
    let hash = config.hash();
    let seeds = parse_seeds(seeds_text)?;

    prepare_out_dir(out)?;
    let summary_path = out.join("summary.csv");
    ensure_writable(&summary_path, force)?;
    for &seed in &seeds {
        ensure_writable(&run_csv_path(out, seed, "mpc"), force)?;
        ensure_writable(&run_csv_path(out, seed, "constant"), force)?;
    }

    let n = config.system.n();
    let mut sink_error: Option<AppError> = None;
    let summary = paired_experiment(&config, &seeds, |record| {
        if sink_error.is_some() {
            return;
        }
        let path = run_csv_path(out, record.meta.seed, &record.meta.controller);
        eprintln!(
            "ran seed={} controller={} total_value={}",
            record.meta.seed, record.meta.controller, record.total_value
        );
        if let Err(e) = write_run_csv(&path, record, n) {
            sink_error = Some(e);
        }
    })?;
    if let Some(e) = sink_error {
        return Err(e);
    }

    write_summary_csv(&summary_path, &summary, &hash)?;
    write_manifest(out, "experiment", config_path, &hash, &seeds, force)?;

    for o in &summary.per_seed {
        println!(
            "seed {}: mpc={} constant={} improvement={}%",
            o.seed, o.mpc_total_value, o.baseline_total_value, o.improvement_pct
        );
    }
    println!(
        "mean_improvement_pct={} mpc_profit_rate_variance={} baseline_profit_rate_variance={}",
        summary.mean_improvement_pct,
        summary.mpc_profit_rate_variance,
        summary.baseline_profit_rate_variance
    );
    println!("median_improvement_pct={}", summary.median_improvement_pct);
    Ok(())
}

fn cmd_estimate(
    config_path: &Path,
    detections_path: &Path,
    controls_path: &Path,
    out: &Path,
    force: bool,
) -> Result<(), AppError> {
    let config = load_config(config_path, None)?;
    let hash = config.hash();
    let detections = read_detections_jsonl(detections_path)?;
    let controls = read_controls(controls_path)?;

    let system = &config.system;
    let start_speed = config.initial_speed.clamp(system.r_min, system.r_max);
    let initial = FilterState::initial(system, start_speed)
        .map_err(|e| AppError::Runtime(e.to_string()))?;
    // Mirror the closed loop's infeed knowledge: the scripted schedule when
    // one is configured, zero otherwise.
    let schedule = config
        .infeed
        .scripted
        .is_some()
        .then(|| generate_infeed(&config.infeed, controls.len()));
    let states = run_filter(
        &initial,
        &detections,
        &controls,
        schedule.as_deref(),
        &config.camera,
        system,
        &config.noise,
    )
    .map_err(estimate_error)?;

    prepare_out_dir(out)?;
    let est_path = out.join("estimate.csv");
    ensure_writable(&est_path, force)?;
    write_estimate_csv(&est_path, &states, system.n(), system.m, &hash)?;

    match states.last() {
        Some(last) => {
            let total: f64 = last.mean.as_slice()[..system.state_len() - 1].iter().sum();
            println!(
                "replayed {} steps, {} detections: final est_total={} trace_p={}",
                states.len(),
                detections.len(),
                total,
                last.cov.trace()
            );
        }
        None => println!("replayed 0 steps"),
    }
    Ok(())
}

fn cmd_report(dir: &Path, out: Option<&Path>, force: bool) -> Result<(), AppError> {
    let entries = std::fs::read_dir(dir)
        .map_err(|e| AppError::Input(format!("cannot read {}: {e}", dir.display())))?;
    let mut run_paths: Vec<PathBuf> = entries
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|path| {
            path.file_name()
                .and_then(|name| name.to_str())
                .is_some_and(|name| name.starts_with("run_") && name.ends_with(".csv"))
        })
        .collect();
    run_paths.sort();
    if run_paths.is_empty() {
        return Err(AppError::Input(format!(
            "{}: no run_*.csv files to report on",
            dir.display()
        )));
    }

    let mut runs: Vec<ParsedRun> = Vec::with_capacity(run_paths.len());
    for path in &run_paths {
        runs.push(read_run_csv(path)?);
    }
    let hash = runs[0].config_hash.clone();
    if let Some(other) = runs.iter().find(|r| r.config_hash != hash) {
        return Err(AppError::Input(format!(
            "mixed config hashes in {}: {} vs {}",
            dir.display(),
            hash,
            other.config_hash
        )));
    }

    let mut kinds: Vec<String> = runs.iter().map(|r| r.controller.clone()).collect();
    kinds.sort();
    kinds.dedup();
    let stats: Vec<ControllerStats> = kinds
        .iter()
        .map(|kind| {
            let rates: Vec<f64> = runs
                .iter()
                .filter(|r| &r.controller == kind)
                .map(ParsedRun::profit_rate)
                .collect();
            ControllerStats {
                controller: kind.clone(),
                runs: rates.len(),
                mean_profit_rate: mean(&rates),
                profit_rate_variance: sample_variance(&rates),
            }
        })
        .collect();

    // Pair runs by seed; the improvement convention matches the experiment
    // aggregation (0 when the baseline total is 0).
    let mut improvements: Vec<f64> = Vec::new();
    let mut seeds: Vec<u64> = runs.iter().map(|r| r.seed).collect();
    seeds.sort_unstable();
    seeds.dedup();
    for &seed in &seeds {
        let find = |kind: &str| {
            runs.iter()
                .find(|r| r.seed == seed && r.controller == kind)
        };
        if let (Some(mpc), Some(base)) = (find("mpc"), find("constant")) {
            let improvement = if base.total_value == 0.0 {
                0.0
            } else {
                100.0 * (mpc.total_value - base.total_value) / base.total_value.abs()
            };
            improvements.push(improvement);
        }
    }

    let out_dir = out.unwrap_or(dir);
    prepare_out_dir(out_dir)?;
    let report_path = out_dir.join("report.csv");
    ensure_writable(&report_path, force)?;
    write_report_csv(&report_path, &stats, &hash)?;

    for s in &stats {
        println!(
            "controller {}: runs={} mean_profit_rate={} profit_rate_variance={}",
            s.controller, s.runs, s.mean_profit_rate, s.profit_rate_variance
        );
    }
    if !improvements.is_empty() {
        println!("paired_seeds={}", improvements.len());
        println!("mean_improvement_pct={}", mean(&improvements));
        println!("median_improvement_pct={}", median(&improvements));
    }
    Ok(())
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

fn median(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let mut sorted = xs.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("comparable improvements"));
    let mid = sorted.len() / 2;
    if sorted.len() % 2 == 1 {
        sorted[mid]
    } else {
        0.5 * (sorted[mid - 1] + sorted[mid])
    }
}

fn sample_variance(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let mu = mean(xs);
    xs.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / (xs.len() - 1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_ranges_are_inclusive() {
        assert_eq!(parse_seeds("3..5").unwrap(), vec![3, 4, 5]);
        assert_eq!(parse_seeds("7").unwrap(), vec![7]);
        assert_eq!(parse_seeds("4..4").unwrap(), vec![4]);
        assert!(parse_seeds("5..3").is_err());
        assert!(parse_seeds("a..b").is_err());
    }

    #[test]
    fn error_codes_split_input_from_runtime() {
        assert_eq!(AppError::Input("x".into()).code(), 2);
        assert_eq!(AppError::Runtime("x".into()).code(), 3);
    }
}
