//! Black-box tests of the `lcv` binary: flag surface, exit codes, error
//! wording, and the cross-command contracts between the file formats.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_lcv")
}

fn run<I, S>(args: I) -> Output
where
    I: IntoIterator<Item = S>,
    S: AsRef<std::ffi::OsStr>,
{
    Command::new(bin()).args(args).output().expect("binary runs")
}

fn stderr_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn stdout_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

/// A small, fast, fully stochastic configuration exercising every subsystem.
fn fixture_config(dir: &Path) -> PathBuf {
    let doc = serde_json::json!({
        "system": {
            "m": 12,
            "r_min": 1.0,
            "r_max": 3.0,
            "u_min": -0.5,
            "u_max": 0.5,
            "steps": 60,
            "initial_speed": 2.0
        },
        "materials": [
            {"name": "copper", "price": 8.0},
            {"name": "filler", "price": 1.0}
        ],
        "stations": [
            {"material": 0, "span": [4, 7], "pick_cap": 1.0},
            {"material": 1, "span": [9, 11], "pick_cap": 1.2}
        ],
        "camera": {
            "first_volume": 0,
            "lambda": 5,
            "image_width": 640.0,
            "image_height": 480.0,
            "mass_per_object": 1.0
        },
        "noise": {
            "q_mass": 0.5,
            "q_speed": 1e-6,
            "r_meas": 0.25,
            "slip_prob": 0.02,
            "pick_noise": 0.05,
            "detector_miss_rate": 0.05,
            "bbox_jitter_px": 2.0
        },
        "mpc": {
            "accounting": "prose",
            "mixed_price": 0.0,
            "max_iters": 3,
            "grad_tol": 0.005,
            "fd_epsilon": 0.001
        },
        "infeed": {
            "materials": [
                {"mean_rate": 0.8, "rate_dispersion": 1.0, "regime_mean_duration": 10},
                {"mean_rate": 0.5, "rate_dispersion": 1.0, "regime_mean_duration": 10}
            ]
        }
    });
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(&doc).unwrap()).unwrap();
    path
}

/// Parses a CSV written by the binary: `#` header line, column names, rows.
fn parse_csv(text: &str) -> (HashMap<String, usize>, Vec<Vec<String>>) {
    let mut lines = text.lines();
    let first = lines.next().expect("file not empty");
    assert!(first.starts_with('#'), "expected a # header, got {first:?}");
    let columns: HashMap<String, usize> = lines
        .next()
        .expect("column row")
        .split(',')
        .enumerate()
        .map(|(idx, name)| (name.to_string(), idx))
        .collect();
    let rows = lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect();
    (columns, rows)
}

fn cell(columns: &HashMap<String, usize>, row: &[String], name: &str) -> f64 {
    row[columns[name]].parse().unwrap_or_else(|e| panic!("column {name}: {e}"))
}

#[test]
fn help_lists_every_flag() {
    let top = run(["--help"]);
    assert!(top.status.success());
    let text = stdout_of(&top);
    for sub in ["simulate", "experiment", "estimate", "report"] {
        assert!(text.contains(sub), "top-level help misses {sub}");
    }

    let expected: [(&str, &[&str]); 4] = [
        ("simulate", &["--config", "--seed", "--controller", "--speed", "--accounting", "--out", "--force"]),
        ("experiment", &["--config", "--seeds", "--accounting", "--out", "--force"]),
        ("estimate", &["--config", "--detections", "--controls", "--out", "--force"]),
        ("report", &["--dir", "--out", "--force"]),
    ];
    for (sub, flags) in expected {
        let out = run([sub, "--help"]);
        assert!(out.status.success(), "{sub} --help failed");
        let text = stdout_of(&out);
        for flag in flags {
            assert!(text.contains(flag), "{sub} --help misses {flag}");
        }
    }
}

#[test]
fn rejects_reversed_station_span_by_json_path() {
    let work = tempfile::tempdir().unwrap();
    let path = fixture_config(work.path());
    let mut doc: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    doc["stations"][0]["span"] = serde_json::json!([7, 4]);
    std::fs::write(&path, serde_json::to_string_pretty(&doc).unwrap()).unwrap();

    let out = run([
        "simulate".as_ref(),
        "--config".as_ref(),
        path.as_os_str(),
    ]);
    assert_eq!(out.status.code(), Some(2), "stderr: {}", stderr_of(&out));
    assert!(
        stderr_of(&out).contains("stations[0].span"),
        "error does not name the offending key: {}",
        stderr_of(&out)
    );
}

#[test]
fn rejects_missing_config_file() {
    let out = run(["simulate", "--config", "/nonexistent/config.json"]);
    assert_eq!(out.status.code(), Some(2), "stderr: {}", stderr_of(&out));
}

#[test]
fn rejects_speed_flag_for_the_optimizing_controller() {
    let work = tempfile::tempdir().unwrap();
    let path = fixture_config(work.path());
    let out = run([
        "simulate".as_ref(),
        "--config".as_ref(),
        path.as_os_str(),
        "--controller".as_ref(),
        "mpc".as_ref(),
        "--speed".as_ref(),
        "2.0".as_ref(),
    ]);
    assert_eq!(out.status.code(), Some(2), "stderr: {}", stderr_of(&out));
    assert!(stderr_of(&out).contains("--speed"), "stderr: {}", stderr_of(&out));
}

#[test]
fn rejects_backward_seed_range() {
    let work = tempfile::tempdir().unwrap();
    let path = fixture_config(work.path());
    let out = run([
        "experiment".as_ref(),
        "--config".as_ref(),
        path.as_os_str(),
        "--seeds".as_ref(),
        "5..3".as_ref(),
        "--out".as_ref(),
        work.path().join("out").as_os_str(),
    ]);
    assert_eq!(out.status.code(), Some(2), "stderr: {}", stderr_of(&out));
}

#[test]
fn names_the_malformed_detection_line() {
    let work = tempfile::tempdir().unwrap();
    let config = fixture_config(work.path());
    let detections = work.path().join("detections.jsonl");
    std::fs::write(
        &detections,
        "{\"step\":1,\"material\":0,\"bbox\":[0.0,0.0,10.0,10.0]}\n\
         {\"step\":2,\"material\":1,\"bbox\":[5.0,5.0,20.0,20.0]}\n\
         { this is not json\n",
    )
    .unwrap();
    let controls = work.path().join("controls.txt");
    std::fs::write(&controls, "0.1\n-0.1\n0.0\n").unwrap();

    let out = run([
        "estimate".as_ref(),
        "--config".as_ref(),
        config.as_os_str(),
        "--detections".as_ref(),
        detections.as_os_str(),
        "--controls".as_ref(),
        controls.as_os_str(),
        "--out".as_ref(),
        work.path().join("est").as_os_str(),
    ]);
    assert_eq!(out.status.code(), Some(2), "stderr: {}", stderr_of(&out));
    assert!(stderr_of(&out).contains("line 3"), "stderr: {}", stderr_of(&out));
}

#[test]
fn refuses_to_overwrite_without_force() {
    let work = tempfile::tempdir().unwrap();
    let config = fixture_config(work.path());
    let out_dir = work.path().join("out");
    let simulate = |extra: &[&str]| {
        let mut args: Vec<std::ffi::OsString> = vec![
            "simulate".into(),
            "--config".into(),
            config.clone().into(),
            "--controller".into(),
            "constant".into(),
            "--seed".into(),
            "7".into(),
            "--out".into(),
            out_dir.clone().into(),
        ];
        args.extend(extra.iter().map(std::ffi::OsString::from));
        run(args)
    };

    let first = simulate(&[]);
    assert!(first.status.success(), "stderr: {}", stderr_of(&first));
    let second = simulate(&[]);
    assert_eq!(second.status.code(), Some(2));
    assert!(
        stderr_of(&second).contains("refusing to overwrite"),
        "stderr: {}",
        stderr_of(&second)
    );
    let third = simulate(&["--force"]);
    assert!(third.status.success(), "stderr: {}", stderr_of(&third));
}

#[test]
fn estimate_replay_matches_the_run_estimates() {
    let work = tempfile::tempdir().unwrap();
    let config = fixture_config(work.path());
    let out_dir = work.path().join("run");
    let out = run([
        "simulate".as_ref(),
        "--config".as_ref(),
        config.as_os_str(),
        "--controller".as_ref(),
        "constant".as_ref(),
        "--seed".as_ref(),
        "3".as_ref(),
        "--out".as_ref(),
        out_dir.as_os_str(),
    ]);
    assert!(out.status.success(), "stderr: {}", stderr_of(&out));

    let est_dir = work.path().join("est");
    let out = run([
        "estimate".as_ref(),
        "--config".as_ref(),
        config.as_os_str(),
        "--detections".as_ref(),
        out_dir.join("detections_3_constant.jsonl").as_os_str(),
        "--controls".as_ref(),
        out_dir.join("controls_3_constant.txt").as_os_str(),
        "--out".as_ref(),
        est_dir.as_os_str(),
    ]);
    assert!(out.status.success(), "stderr: {}", stderr_of(&out));

    let run_text = std::fs::read_to_string(out_dir.join("run_3_constant.csv")).unwrap();
    let est_text = std::fs::read_to_string(est_dir.join("estimate.csv")).unwrap();
    let (run_cols, run_rows) = parse_csv(&run_text);
    let (est_cols, est_rows) = parse_csv(&est_text);
    assert_eq!(run_rows.len(), 60, "one row per simulated step");
    assert_eq!(est_rows.len(), 60, "one estimate per applied control");

    for (run_row, est_row) in run_rows.iter().zip(&est_rows) {
        assert_eq!(run_row[run_cols["step"]], est_row[est_cols["step"]]);
        for name in ["est_total", "trace_p"] {
            let from_run = cell(&run_cols, run_row, name);
            let from_replay = cell(&est_cols, est_row, name);
            assert!(
                (from_run - from_replay).abs() <= 1e-9,
                "step {}: {name} diverged: run {from_run} vs replay {from_replay}",
                run_row[run_cols["step"]]
            );
        }
    }
}

#[test]
fn report_recomputes_the_experiment_aggregates() {
    let work = tempfile::tempdir().unwrap();
    let config = fixture_config(work.path());
    let out_dir = work.path().join("exp");
    let out = run([
        "experiment".as_ref(),
        "--config".as_ref(),
        config.as_os_str(),
        "--seeds".as_ref(),
        "0..2".as_ref(),
        "--out".as_ref(),
        out_dir.as_os_str(),
    ]);
    assert!(out.status.success(), "stderr: {}", stderr_of(&out));
    let stdout = stdout_of(&out);
    let last = stdout.lines().last().unwrap_or_default();
    assert!(
        last.starts_with("median_improvement_pct="),
        "final stdout line was {last:?}"
    );

    // Recompute profit rates straight from the run CSVs.
    let mut rates: HashMap<String, Vec<f64>> = HashMap::new();
    for seed in 0..3u64 {
        for controller in ["mpc", "constant"] {
            let path = out_dir.join(format!("run_{seed}_{controller}.csv"));
            let text = std::fs::read_to_string(&path).unwrap();
            let (cols, rows) = parse_csv(&text);
            let total = cell(&cols, rows.last().expect("rows"), "cumulative_value");
            rates
                .entry(controller.to_string())
                .or_default()
                .push(total / rows.len() as f64);
        }
    }
    let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
    let variance = |xs: &[f64]| {
        let mu = mean(xs);
        xs.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / (xs.len() - 1) as f64
    };

    let out = run([
        "report".as_ref(),
        "--dir".as_ref(),
        out_dir.as_os_str(),
    ]);
    assert!(out.status.success(), "stderr: {}", stderr_of(&out));
    let text = std::fs::read_to_string(out_dir.join("report.csv")).unwrap();
    let (cols, rows) = parse_csv(&text);
    assert_eq!(rows.len(), 2, "one aggregate row per controller");
    for row in &rows {
        let controller = &row[cols["controller"]];
        let expected = &rates[controller.as_str()];
        assert_eq!(cell(&cols, row, "runs") as usize, expected.len());
        assert!(
            (cell(&cols, row, "mean_profit_rate") - mean(expected)).abs() <= 1e-9,
            "{controller}: mean mismatch"
        );
        assert!(
            (cell(&cols, row, "profit_rate_variance") - variance(expected)).abs() <= 1e-9,
            "{controller}: variance mismatch"
        );
    }
}

#[test]
fn report_names_a_missing_required_column() {
    let work = tempfile::tempdir().unwrap();
    let dir = work.path().join("runs");
    std::fs::create_dir_all(&dir).unwrap();
    std::fs::write(
        dir.join("run_0_mpc.csv"),
        "# config_hash=deadbeefdeadbeef seed=0 controller=mpc\n\
         step,speed,stage_reward,total\n\
         1,2.0,0.5,0.5\n",
    )
    .unwrap();

    let out = run([
        "report".as_ref(),
        "--dir".as_ref(),
        dir.as_os_str(),
    ]);
    assert_eq!(out.status.code(), Some(2), "stderr: {}", stderr_of(&out));
    assert!(
        stderr_of(&out).contains("cumulative_value"),
        "stderr: {}",
        stderr_of(&out)
    );
}
