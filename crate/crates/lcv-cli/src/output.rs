//! File formats: run/summary/estimate/report CSVs, detection JSONL, and
//! control streams. Every CSV starts with a `# config_hash=…` comment so
//! downstream tools can refuse to mix incompatible runs. Floats are written
//! with Rust's shortest round-trip formatting, which keeps repeated runs
//! byte-identical.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use lcv::{Detection, FilterState, PairedSummary, RunRecord};

use crate::AppError;

/// Creates the output directory and fails early when a target file already
/// exists and `--force` was not given.
pub fn prepare_out_dir(dir: &Path) -> Result<(), AppError> {
    fs::create_dir_all(dir)
        .map_err(|e| AppError::Runtime(format!("cannot create {}: {e}", dir.display())))
}

/// Refuses to clobber `path` unless `force` is set.
pub fn ensure_writable(path: &Path, force: bool) -> Result<(), AppError> {
    if path.exists() && !force {
        return Err(AppError::Input(format!(
            "refusing to overwrite {} (pass --force)",
            path.display()
        )));
    }
    Ok(())
}

fn open(path: &Path) -> Result<BufWriter<fs::File>, AppError> {
    let file = fs::File::create(path)
        .map_err(|e| AppError::Runtime(format!("cannot write {}: {e}", path.display())))?;
    Ok(BufWriter::new(file))
}

fn finish(mut w: BufWriter<fs::File>, path: &Path) -> Result<(), AppError> {
    w.flush()
        .map_err(|e| AppError::Runtime(format!("cannot write {}: {e}", path.display())))
}

/// `run_<seed>_<controller>.csv` within `dir`.
pub fn run_csv_path(dir: &Path, seed: u64, controller: &str) -> PathBuf {
    dir.join(format!("run_{seed}_{controller}.csv"))
}

/// Writes one closed-loop run as a per-step CSV. Solver columns stay empty
/// on rows where no solver ran (constant-speed runs).
pub fn write_run_csv(path: &Path, record: &RunRecord, n: usize) -> Result<(), AppError> {
    let mut w = open(path)?;
    let meta = &record.meta;
    let mut text = format!(
        "# config_hash={} seed={} controller={}\n",
        meta.config_hash, meta.seed, meta.controller
    );
    text.push_str("step,speed");
    for group in ["station_mass", "picked", "exited"] {
        for i in 0..n {
            let _ = write!(text, ",{group}_{i}");
        }
    }
    text.push_str(
        ",stage_reward,cumulative_value,est_total,trace_p,\
         solver_iters,solver_objective,solver_grad_norm,solver_backtracks,solver_reason\n",
    );
    for row in &record.rows {
        let _ = write!(text, "{},{}", row.step, row.speed);
        for group in [&row.station_mass, &row.picked, &row.exited] {
            for v in group {
                let _ = write!(text, ",{v}");
            }
        }
        let _ = write!(
            text,
            ",{},{},{},{}",
            row.stage_reward, row.cumulative_value, row.est_total, row.trace_p
        );
        match &row.solver {
            Some(s) => {
                let _ = write!(
                    text,
                    ",{},{},{},{},{}",
                    s.iterations, s.objective, s.grad_norm, s.backtracks_total, s.reason
                );
            }
            None => text.push_str(",,,,"),
        }
        text.push('\n');
    }
    w.write_all(text.as_bytes())
        .map_err(|e| AppError::Runtime(format!("cannot write {}: {e}", path.display())))?;
    finish(w, path)
}

/// Writes the per-seed paired outcomes.
pub fn write_summary_csv(
    path: &Path,
    summary: &PairedSummary,
    hash: &str,
) -> Result<(), AppError> {
    let mut w = open(path)?;
    let mut text = format!("# config_hash={hash} command=experiment\n");
    text.push_str("seed,mpc_total_value,avg_mpc_speed,baseline_total_value,improvement_pct\n");
    for o in &summary.per_seed {
        let _ = writeln!(
            text,
            "{},{},{},{},{}",
            o.seed, o.mpc_total_value, o.avg_mpc_speed, o.baseline_total_value, o.improvement_pct
        );
    }
    w.write_all(text.as_bytes())
        .map_err(|e| AppError::Runtime(format!("cannot write {}: {e}", path.display())))?;
    finish(w, path)
}

/// Writes a detection stream, one JSON object per line.
pub fn write_detections_jsonl(path: &Path, detections: &[Detection]) -> Result<(), AppError> {
    let mut w = open(path)?;
    for det in detections {
        let line = serde_json::to_string(det)
            .map_err(|e| AppError::Runtime(format!("cannot encode detection: {e}")))?;
        writeln!(w, "{line}")
            .map_err(|e| AppError::Runtime(format!("cannot write {}: {e}", path.display())))?;
    }
    finish(w, path)
}

/// Writes the applied speed changes, one per line.
pub fn write_controls(path: &Path, controls: &[f64]) -> Result<(), AppError> {
    let mut w = open(path)?;
    for u in controls {
        writeln!(w, "{u}")
            .map_err(|e| AppError::Runtime(format!("cannot write {}: {e}", path.display())))?;
    }
    finish(w, path)
}

/// Writes the replayed estimates: per-material belt totals, the combined
/// total, and the covariance trace after every control step.
pub fn write_estimate_csv(
    path: &Path,
    states: &[FilterState],
    n: usize,
    m: usize,
    hash: &str,
) -> Result<(), AppError> {
    let mut w = open(path)?;
    let mut text = format!("# config_hash={hash} command=estimate\n");
    text.push_str("step");
    for i in 0..n {
        let _ = write!(text, ",est_total_{i}");
    }
    text.push_str(",est_total,trace_p\n");
    for (t, state) in states.iter().enumerate() {
        let slice = state.mean.as_slice();
        let _ = write!(text, "{}", t + 1);
        for i in 0..n {
            let material: f64 = slice[i * m..(i + 1) * m].iter().sum();
            let _ = write!(text, ",{material}");
        }
        let combined: f64 = slice[..n * m].iter().sum();
        let _ = writeln!(text, ",{combined},{}", state.cov.trace());
    }
    w.write_all(text.as_bytes())
        .map_err(|e| AppError::Runtime(format!("cannot write {}: {e}", path.display())))?;
    finish(w, path)
}

/// Parses a detection JSONL file, reporting the 1-based line of the first
/// malformed record.
pub fn read_detections_jsonl(path: &Path) -> Result<Vec<Detection>, AppError> {
    let text = fs::read_to_string(path)
        .map_err(|e| AppError::Input(format!("cannot read {}: {e}", path.display())))?;
    let mut detections = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let det: Detection = serde_json::from_str(line).map_err(|e| {
            AppError::Input(format!("{}: line {}: {e}", path.display(), idx + 1))
        })?;
        detections.push(det);
    }
    Ok(detections)
}

/// Parses a control stream, one float per line.
pub fn read_controls(path: &Path) -> Result<Vec<f64>, AppError> {
    let text = fs::read_to_string(path)
        .map_err(|e| AppError::Input(format!("cannot read {}: {e}", path.display())))?;
    let mut controls = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let u: f64 = trimmed.parse().map_err(|e| {
            AppError::Input(format!("{}: line {}: {e}", path.display(), idx + 1))
        })?;
        controls.push(u);
    }
    Ok(controls)
}

/// The facts `report` needs from one run CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct ParsedRun {
    pub seed: u64,
    pub controller: String,
    pub config_hash: String,
    pub steps: usize,
    pub total_value: f64,
}

impl ParsedRun {
    /// Value accumulated per step; 0 for an empty run.
    pub fn profit_rate(&self) -> f64 {
        if self.steps == 0 {
            0.0
        } else {
            self.total_value / self.steps as f64
        }
    }
}

fn header_field(header: &str, key: &str, path: &Path) -> Result<String, AppError> {
    header
        .split_whitespace()
        .find_map(|tok| tok.strip_prefix(&format!("{key}=")))
        .map(str::to_owned)
        .ok_or_else(|| {
            AppError::Input(format!("{}: header is missing {key}=", path.display()))
        })
}

/// Parses a run CSV back into its aggregate facts. Columns are located by
/// name, so reordered files still parse; files missing a required column
/// are rejected as input errors.
pub fn read_run_csv(path: &Path) -> Result<ParsedRun, AppError> {
    let text = fs::read_to_string(path)
        .map_err(|e| AppError::Input(format!("cannot read {}: {e}", path.display())))?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .filter(|l| l.starts_with('#'))
        .ok_or_else(|| {
            AppError::Input(format!("{}: missing # config_hash header", path.display()))
        })?;
    let config_hash = header_field(header, "config_hash", path)?;
    let seed: u64 = header_field(header, "seed", path)?
        .parse()
        .map_err(|e| AppError::Input(format!("{}: bad seed in header: {e}", path.display())))?;
    let controller = header_field(header, "controller", path)?;

    let columns = lines
        .next()
        .ok_or_else(|| AppError::Input(format!("{}: missing column row", path.display())))?;
    let names: Vec<&str> = columns.split(',').collect();
    let col = |name: &str| -> Result<usize, AppError> {
        names.iter().position(|&c| c == name).ok_or_else(|| {
            AppError::Input(format!("{}: missing required column {name}", path.display()))
        })
    };
    let value_col = col("cumulative_value")?;
    col("step")?;
    col("speed")?;
    col("stage_reward")?;

    let mut steps = 0usize;
    let mut total_value = 0.0;
    for (idx, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        total_value = fields
            .get(value_col)
            .ok_or_else(|| {
                AppError::Input(format!(
                    "{}: line {}: missing column cumulative_value",
                    path.display(),
                    idx + 3
                ))
            })?
            .parse()
            .map_err(|e| {
                AppError::Input(format!("{}: line {}: {e}", path.display(), idx + 3))
            })?;
        steps += 1;
    }
    Ok(ParsedRun {
        seed,
        controller,
        config_hash,
        steps,
        total_value,
    })
}

/// Per-controller aggregate row of a report.
#[derive(Debug, Clone, PartialEq)]
pub struct ControllerStats {
    pub controller: String,
    pub runs: usize,
    pub mean_profit_rate: f64,
    pub profit_rate_variance: f64,
}

/// Writes the report CSV: one aggregate row per controller kind.
pub fn write_report_csv(
    path: &Path,
    stats: &[ControllerStats],
    hash: &str,
) -> Result<(), AppError> {
    let mut w = open(path)?;
    let mut text = format!("# config_hash={hash} command=report\n");
    text.push_str("controller,runs,mean_profit_rate,profit_rate_variance\n");
    for s in stats {
        let _ = writeln!(
            text,
            "{},{},{},{}",
            s.controller, s.runs, s.mean_profit_rate, s.profit_rate_variance
        );
    }
    w.write_all(text.as_bytes())
        .map_err(|e| AppError::Runtime(format!("cannot write {}: {e}", path.display())))?;
    finish(w, path)
}
