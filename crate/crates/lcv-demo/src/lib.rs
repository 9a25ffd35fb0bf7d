//! WebAssembly bindings for the browser demo. Three operations, all JSON
//! strings in and out so the static page needs no generated glue beyond
//! `wasm-bindgen`'s: fetch a preset configuration, roll a full closed-loop
//! timeline (per-step belt contents included, for the heatmap), and run a
//! small paired comparison against the constant-speed baseline.

use lcv::{
    generate_infeed, paired_experiment, plant_step, run_closed_loop, Config, Controller,
    SimRng, StateVector,
};
use serde::Serialize;
use wasm_bindgen::prelude::*;

const PULSE: &str = include_str!("../presets/pulse.json");
const MIXED: &str = include_str!("../presets/mixed.json");

/// Built-in demo configuration by name: `pulse` (deterministic avalanche
/// showcase) or `mixed` (stochastic two-material line).
pub fn preset(name: &str) -> Result<&'static str, String> {
    match name {
        "pulse" => Ok(PULSE),
        "mixed" => Ok(MIXED),
        other => Err(format!("unknown preset {other:?} (try \"pulse\" or \"mixed\")")),
    }
}

#[derive(Serialize)]
struct MaterialOut {
    name: String,
    price: f64,
}

#[derive(Serialize)]
struct StationOut {
    material: usize,
    first: usize,
    last: usize,
    pick_cap: f64,
}

#[derive(Serialize)]
struct MetaOut {
    m: usize,
    n: usize,
    r_min: f64,
    r_max: f64,
    steps: usize,
    lambda: usize,
    first_volume: usize,
    controller: String,
    seed: u64,
    materials: Vec<MaterialOut>,
    stations: Vec<StationOut>,
    total_value: f64,
    avg_speed: f64,
    config_hash: String,
}

#[derive(Serialize)]
struct FrameOut {
    step: usize,
    speed: f64,
    /// Per material: the belt's per-volume masses after this step.
    belt: Vec<Vec<f64>>,
    infeed: Vec<f64>,
    picked: Vec<f64>,
    exited: Vec<f64>,
    stage_reward: f64,
    cumulative_value: f64,
    est_total: f64,
}

#[derive(Serialize)]
struct TimelineOut {
    meta: MetaOut,
    frames: Vec<FrameOut>,
}

fn parse_controller(spec: &str, config: &Config) -> Result<Controller, String> {
    if spec == "mpc" {
        return Ok(Controller::Mpc);
    }
    let target = match spec.strip_prefix("constant") {
        Some("") => config.initial_speed,
        Some(rest) => rest
            .strip_prefix('=')
            .ok_or_else(|| format!("bad controller {spec:?}"))?
            .parse::<f64>()
            .map_err(|e| format!("bad constant speed in {spec:?}: {e}"))?,
        None => return Err(format!("unknown controller {spec:?} (mpc | constant[=SPEED])")),
    };
    let (lo, hi) = (config.system.r_min, config.system.r_max);
    if !target.is_finite() || target < lo || target > hi {
        return Err(format!("constant speed {target} outside [{lo}, {hi}]"));
    }
    Ok(Controller::Constant { target })
}

/// Runs one closed loop and serializes it, replaying the plant with the
/// recorded controls to recover the per-step belt contents the run record
/// does not keep.
pub fn timeline_json(config_json: &str, controller: &str, seed: u64) -> Result<String, String> {
    let config = Config::from_json_str(config_json).map_err(|e| e.to_string())?;
    let controller = parse_controller(controller, &config)?;
    let record = run_closed_loop(&config, &controller, seed).map_err(|e| e.to_string())?;

    let system = &config.system;
    let n = system.n();
    let schedule = generate_infeed(&config.infeed.with_seed(seed), config.steps);
    let mut rng = SimRng::new(seed);
    let mut truth = {
        let mut data = nalgebra_vector(system.state_len());
        data[system.state_len() - 1] = config.initial_speed.clamp(system.r_min, system.r_max);
        StateVector::from_raw(data, system).map_err(|e| e.to_string())?
    };

    let mut frames = Vec::with_capacity(record.rows.len());
    for (t, row) in record.rows.iter().enumerate() {
        let (next, _outcome, _dets) = plant_step(
            &truth,
            record.controls[t],
            &schedule[t],
            &config,
            &config.plant,
            &mut rng,
            t + 1,
        )
        .map_err(|e| e.to_string())?;
        if (next.speed() - row.speed).abs() > 1e-9 {
            return Err(format!(
                "internal replay diverged from the run at step {} (speed {} vs {})",
                row.step,
                next.speed(),
                row.speed
            ));
        }
        frames.push(FrameOut {
            step: row.step,
            speed: row.speed,
            belt: (0..n).map(|i| next.block(i).to_vec()).collect(),
            infeed: schedule[t].clone(),
            picked: row.picked.clone(),
            exited: row.exited.clone(),
            stage_reward: row.stage_reward,
            cumulative_value: row.cumulative_value,
            est_total: row.est_total,
        });
        truth = next;
    }

    let out = TimelineOut {
        meta: MetaOut {
            m: system.m,
            n,
            r_min: system.r_min,
            r_max: system.r_max,
            steps: config.steps,
            lambda: config.camera.lambda,
            first_volume: config.camera.first_volume,
            controller: record.meta.controller.clone(),
            seed,
            materials: system
                .materials
                .iter()
                .map(|m| MaterialOut { name: m.name.clone(), price: m.price })
                .collect(),
            stations: system
                .stations
                .iter()
                .map(|s| StationOut {
                    material: s.material,
                    first: s.span.first,
                    last: s.span.last,
                    pick_cap: s.pick_cap,
                })
                .collect(),
            total_value: record.total_value,
            avg_speed: record.avg_speed,
            config_hash: record.meta.config_hash.clone(),
        },
        frames,
    };
    serde_json::to_string(&out).map_err(|e| e.to_string())
}

fn nalgebra_vector(len: usize) -> nalgebra::DVector<f64> {
    nalgebra::DVector::zeros(len)
}

#[derive(Serialize)]
struct SeedOut {
    seed: u64,
    mpc_total_value: f64,
    avg_mpc_speed: f64,
    baseline_total_value: f64,
    improvement_pct: f64,
}

#[derive(Serialize)]
struct CompareOut {
    per_seed: Vec<SeedOut>,
    mean_improvement_pct: f64,
    median_improvement_pct: f64,
}

/// Runs the paired protocol over seeds `0..seed_count` and serializes the
/// per-seed outcomes.
pub fn compare_json(config_json: &str, seed_count: u32) -> Result<String, String> {
    if seed_count == 0 {
        return Err("seed_count must be at least 1".into());
    }
    if seed_count > 16 {
        return Err("seed_count is capped at 16 for the demo".into());
    }
    let config = Config::from_json_str(config_json).map_err(|e| e.to_string())?;
    let seeds: Vec<u64> = (0..u64::from(seed_count)).collect();
    let summary = paired_experiment(&config, &seeds, |_| {}).map_err(|e| e.to_string())?;
    let out = CompareOut {
        per_seed: summary
            .per_seed
            .iter()
            .map(|o| SeedOut {
                seed: o.seed,
                mpc_total_value: o.mpc_total_value,
                avg_mpc_speed: o.avg_mpc_speed,
                baseline_total_value: o.baseline_total_value,
                improvement_pct: o.improvement_pct,
            })
            .collect(),
        mean_improvement_pct: summary.mean_improvement_pct,
        median_improvement_pct: summary.median_improvement_pct,
    };
    serde_json::to_string(&out).map_err(|e| e.to_string())
}

fn js_err(e: String) -> JsValue {
    JsValue::from_str(&e)
}

/// JS: `demo_preset("pulse" | "mixed") -> string` (a config JSON document).
#[wasm_bindgen]
pub fn demo_preset(name: &str) -> Result<String, JsValue> {
    preset(name).map(str::to_owned).map_err(js_err)
}

/// JS: `demo_timeline(configJson, "mpc" | "constant" | "constant=3.0", seed)
/// -> string` (JSON `{meta, frames}`).
#[wasm_bindgen]
pub fn demo_timeline(config_json: &str, controller: &str, seed: u64) -> Result<String, JsValue> {
    timeline_json(config_json, controller, seed).map_err(js_err)
}

/// JS: `demo_compare(configJson, seedCount) -> string` (JSON per-seed paired
/// outcomes with mean/median improvement).
#[wasm_bindgen]
pub fn demo_compare(config_json: &str, seed_count: u32) -> Result<String, JsValue> {
    compare_json(config_json, seed_count).map_err(js_err)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::Value;

    #[test]
    fn presets_parse_and_validate() {
        for name in ["pulse", "mixed"] {
            let doc = preset(name).unwrap();
            let config = Config::from_json_str(doc).unwrap();
            assert_eq!(config.system.m, 20, "{name}: demo belts stay small");
            assert!(config.steps <= 400, "{name}: demo runs stay short");
        }
        assert!(preset("nope").is_err());
    }

    #[test]
    fn pulse_timeline_slows_for_the_avalanche() {
        let text = timeline_json(PULSE, "mpc", 1).unwrap();
        let doc: Value = serde_json::from_str(&text).unwrap();
        let frames = doc["frames"].as_array().unwrap();
        assert_eq!(frames.len(), 240);

        let onset = frames
            .iter()
            .position(|f| f["infeed"][0].as_f64().unwrap() > 0.0)
            .expect("the script contains a copper pulse");
        let pre = frames[onset - 1]["speed"].as_f64().unwrap();
        let min_during = frames[onset..(onset + 60).min(frames.len())]
            .iter()
            .map(|f| f["speed"].as_f64().unwrap())
            .fold(f64::INFINITY, f64::min);
        assert!(
            min_during < pre - 0.5,
            "speed should dip for the pulse: pre {pre}, min during {min_during}"
        );

        let meta = &doc["meta"];
        assert_eq!(meta["m"].as_u64().unwrap(), 20);
        assert_eq!(meta["n"].as_u64().unwrap(), 2);
        let belt = frames[onset]["belt"].as_array().unwrap();
        assert_eq!(belt.len(), 2);
        assert_eq!(belt[0].as_array().unwrap().len(), 20);
    }

    #[test]
    fn stochastic_timeline_replays_cleanly() {
        let text = timeline_json(MIXED, "mpc", 2).unwrap();
        let doc: Value = serde_json::from_str(&text).unwrap();
        let frames = doc["frames"].as_array().unwrap();
        assert_eq!(frames.len(), 400);
        for frame in frames {
            for block in frame["belt"].as_array().unwrap() {
                for mass in block.as_array().unwrap() {
                    assert!(mass.as_f64().unwrap() >= 0.0);
                }
            }
        }
        assert!(doc["meta"]["total_value"].as_f64().unwrap() > 0.0);
    }

    #[test]
    fn paired_comparison_favors_the_optimizer() {
        let text = compare_json(MIXED, 3).unwrap();
        let doc: Value = serde_json::from_str(&text).unwrap();
        assert_eq!(doc["per_seed"].as_array().unwrap().len(), 3);
        assert!(
            doc["median_improvement_pct"].as_f64().unwrap() > 0.0,
            "demo preset should show an improvement: {doc}"
        );
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(timeline_json("{}", "mpc", 0).is_err());
        assert!(timeline_json(PULSE, "pid", 0).is_err());
        assert!(timeline_json(PULSE, "constant=99", 0).is_err());
        assert!(compare_json(MIXED, 0).is_err());
        assert!(compare_json(MIXED, 17).is_err());
    }
}
