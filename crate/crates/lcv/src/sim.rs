//! Closed-loop plant simulation and the paired speed-control experiment.
//!
//! The simulator wraps the ideal belt model with the imperfections a real
//! line would show — conveyor slip, under-performing pick stations, missed
//! and jittered detections — and generates stochastic infeed as
//! piecewise-constant regimes (geometric durations, gamma rates). A closed
//! loop wires plant → synthetic camera → filter → controller and records a
//! per-step timeseries. The paired experiment runs the optimizing controller
//! on a seed, reruns the identical seed at the constant speed equal to the
//! controller's time-average, and aggregates the per-seed improvement.
//!
//! Randomness is split into fixed named streams (infeed per material, plant,
//! detector) so that a `(seed, config)` pair fully determines every run and
//! the constant-speed rerun consumes the identical infeed schedule as its
//! optimized partner.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Geometric, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{Config, ConfigError};
use crate::control::{mpc_step, stage_reward, ControlError, ControlSequence, SolverReport};
use crate::dynamics::{shift_weights, step, ModelError};
use crate::estimate::{
    measured_indices, measurement_from_detections, predict, update, CameraModel, Detection,
    EstimateError, FilterState, MeasurementVector,
};
use crate::state::{StateVector, StepOutcome};

/// Stochastic infeed parameters for one material.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaterialInfeed {
    /// Long-run mean arrival mass per step.
    pub mean_rate: f64,
    /// Gamma shape of the per-regime rate; smaller is spikier.
    pub rate_dispersion: f64,
    /// Mean regime length in steps.
    pub regime_mean_duration: f64,
}

impl Default for MaterialInfeed {
    fn default() -> Self {
        Self {
            mean_rate: 0.0,
            rate_dispersion: 1.0,
            regime_mean_duration: 1.0,
        }
    }
}

/// Infeed generator: per-material regime parameters, an optional scripted
/// schedule overriding them, and the seed that fixes the realization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct InfeedModel {
    pub seed: u64,
    pub materials: Vec<MaterialInfeed>,
    /// Explicit per-step per-material masses; steps beyond the script get
    /// zero infeed.
    pub scripted: Option<Vec<Vec<f64>>>,
}

impl InfeedModel {
    /// The same model re-keyed to another seed (runs inject their own).
    pub fn with_seed(&self, seed: u64) -> InfeedModel {
        InfeedModel {
            seed,
            ..self.clone()
        }
    }
}

/// Plant imperfections layered over the ideal model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct PlantNoise {
    /// Fraction of each volume's mass that fails to advance during motion.
    pub slip_prob: f64,
    /// Relative standard deviation of the realized station pick.
    pub pick_noise: f64,
    /// Probability that an object in the viewport produces no detection.
    pub detector_miss_rate: f64,
    /// Standard deviation, in pixels, of bbox corner jitter.
    pub bbox_jitter_px: f64,
}

impl PlantNoise {
    /// True when the material trajectory is exactly the ideal model's
    /// (detector imperfections never touch the truth state).
    fn truth_is_exact(&self) -> bool {
        self.slip_prob == 0.0 && self.pick_noise == 0.0
    }
}

/// The named random streams of one simulation run.
pub struct SimRng {
    pub plant: ChaCha8Rng,
    pub detector: ChaCha8Rng,
}

const STREAM_PLANT: u64 = 1;
const STREAM_DETECTOR: u64 = 2;
const STREAM_INFEED_BASE: u64 = 0x100;

/// A fixed, documented mapping from (seed, stream id) to an RNG, so each
/// subsystem draws from its own reproducible sequence.
pub(crate) fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(stream))
}

impl SimRng {
    pub fn new(seed: u64) -> Self {
        Self {
            plant: stream_rng(seed, STREAM_PLANT),
            detector: stream_rng(seed, STREAM_DETECTOR),
        }
    }
}

/// Which speed controller drives a closed-loop run.
#[derive(Debug, Clone, PartialEq)]
pub enum Controller {
    /// Receding-horizon optimization of the belt speed.
    Mpc,
    /// Speed changes that steer the belt to a fixed target speed.
    Constant { target: f64 },
}

impl Controller {
    pub fn label(&self) -> &'static str {
        match self {
            Controller::Mpc => "mpc",
            Controller::Constant { .. } => "constant",
        }
    }
}

/// Identity of one run: seed, controller kind, and the configuration hash
/// the outputs are keyed by.
#[derive(Debug, Clone, PartialEq)]
pub struct RunMeta {
    pub seed: u64,
    pub controller: String,
    pub target_speed: Option<f64>,
    pub config_hash: String,
}

/// One recorded step of a closed-loop run. `step` is 1-based: row `t`
/// describes the state after the `t`-th plant step.
#[derive(Debug, Clone, PartialEq)]
pub struct RunRow {
    pub step: usize,
    /// Belt speed after the step (the speed the next motion will use).
    pub speed: f64,
    /// Per material: mass sitting on its station's span (0 when unstationed).
    pub station_mass: Vec<f64>,
    pub picked: Vec<f64>,
    pub exited: Vec<f64>,
    pub stage_reward: f64,
    pub cumulative_value: f64,
    /// Total estimated mass on the belt (filter mean).
    pub est_total: f64,
    /// Trace of the filter covariance.
    pub trace_p: f64,
    pub solver: Option<SolverReport>,
}

/// Full record of one closed-loop run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub meta: RunMeta,
    pub rows: Vec<RunRow>,
    pub total_value: f64,
    /// Time-average of the speeds the motions actually ran at.
    pub avg_speed: f64,
    pub detections: Vec<Detection>,
    /// The applied speed change of every step.
    pub controls: Vec<f64>,
}

impl RunRecord {
    /// Value accumulated per step.
    pub fn profit_rate(&self) -> f64 {
        if self.rows.is_empty() {
            0.0
        } else {
            self.total_value / self.rows.len() as f64
        }
    }
}

/// One seed's paired outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct SeedOutcome {
    pub seed: u64,
    pub mpc_total_value: f64,
    pub avg_mpc_speed: f64,
    pub baseline_total_value: f64,
    /// `100·(mpc − baseline)/|baseline|`; 0 when the baseline total is 0.
    pub improvement_pct: f64,
}

/// Aggregate of the paired experiment across seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedSummary {
    pub per_seed: Vec<SeedOutcome>,
    pub mean_improvement_pct: f64,
    pub median_improvement_pct: f64,
    /// Sample variance of per-step value across seeds, per controller.
    pub mpc_profit_rate_variance: f64,
    pub baseline_profit_rate_variance: f64,
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Estimate(#[from] EstimateError),
    #[error(transparent)]
    Control(#[from] ControlError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("scripted infeed row {row}: expected {expected} entries, got {got}")]
    InfeedShape {
        row: usize,
        expected: usize,
        got: usize,
    },
}

/// Draws a per-step per-material infeed schedule.
///
/// Scripted schedules are copied verbatim (zero-padded past their end).
/// Otherwise each material independently samples piecewise-constant regimes:
/// duration `1 + Geometric(1/regime_mean_duration)`, rate
/// `Gamma(shape = rate_dispersion, mean = mean_rate)`, from its own seed
/// stream — the realization depends only on `(model.seed, material index)`.
pub fn generate_infeed(model: &InfeedModel, steps: usize) -> Vec<Vec<f64>> {
    let n = model.materials.len();
    let mut schedule = vec![vec![0.0; n]; steps];
    if let Some(script) = &model.scripted {
        for (t, row) in schedule.iter_mut().enumerate() {
            if let Some(src) = script.get(t) {
                for i in 0..n {
                    row[i] = src.get(i).copied().unwrap_or(0.0).max(0.0);
                }
            }
        }
        return schedule;
    }
    for (i, mat) in model.materials.iter().enumerate() {
        if mat.mean_rate <= 0.0 {
            continue; // deterministic zero lane, no draws consumed
        }
        let mut rng = stream_rng(model.seed, STREAM_INFEED_BASE + i as u64);
        let p = (1.0 / mat.regime_mean_duration.max(1.0)).min(1.0);
        let durations = Geometric::new(p).expect("p in (0,1]");
        let shape = mat.rate_dispersion.max(f64::MIN_POSITIVE);
        let rates = Gamma::new(shape, mat.mean_rate / shape).expect("positive shape and scale");
        let mut t = 0;
        while t < steps {
            let len = 1 + durations.sample(&mut rng) as usize;
            let rate = rates.sample(&mut rng);
            for _ in 0..len {
                if t >= steps {
                    break;
                }
                schedule[t][i] = rate;
                t += 1;
            }
        }
    }
    schedule
}

/// Emits one detection per `mass_per_object` quantum sitting in the
/// viewport, on a deterministic grid per band (the fractional quantum
/// becomes one extra object with matching probability), then applies
/// detector imperfections: each object is dropped with `detector_miss_rate`
/// and surviving bbox corners are jittered by `bbox_jitter_px`.
fn synthesize_detections(
    truth: &StateVector,
    camera: &CameraModel,
    noise: &PlantNoise,
    rng: &mut ChaCha8Rng,
    step: usize,
) -> Vec<Detection> {
    let mut detections = Vec::new();
    let band_w = camera.band_width();
    let last = (camera.first_volume + camera.lambda).min(truth.volumes());
    let obj_h = 0.1 * camera.image_height;
    let y_mid = 0.5 * camera.image_height;
    let jitter = (noise.bbox_jitter_px > 0.0)
        .then(|| Normal::new(0.0, noise.bbox_jitter_px).expect("positive std"));
    for i in 0..truth.material_count() {
        for v in camera.first_volume..last {
            let mass = truth.mass(i, v);
            if mass <= 0.0 {
                continue;
            }
            let quanta = mass / camera.mass_per_object;
            let mut count = quanta.floor() as usize;
            let frac = quanta - quanta.floor();
            if frac > 0.0 && rng.random_bool(frac.min(1.0)) {
                count += 1;
            }
            if count == 0 {
                continue;
            }
            let band_lo = (v - camera.first_volume) as f64 * band_w;
            let obj_w = (band_w / count as f64).min(0.5 * band_w);
            for k in 0..count {
                if noise.detector_miss_rate > 0.0
                    && rng.random_bool(noise.detector_miss_rate.clamp(0.0, 1.0))
                {
                    continue;
                }
                let x_mid = band_lo + (k as f64 + 0.5) * band_w / count as f64;
                let mut bbox = [
                    x_mid - 0.5 * obj_w,
                    y_mid - 0.5 * obj_h,
                    x_mid + 0.5 * obj_w,
                    y_mid + 0.5 * obj_h,
                ];
                if let Some(normal) = &jitter {
                    for corner in &mut bbox {
                        *corner += normal.sample(rng);
                    }
                    if bbox[0] > bbox[2] {
                        bbox.swap(0, 2);
                    }
                    if bbox[1] > bbox[3] {
                        bbox.swap(1, 3);
                    }
                }
                detections.push(Detection {
                    step,
                    material: i,
                    bbox,
                });
            }
        }
    }
    detections
}

/// Advances the true plant one step and synthesizes that step's detections.
///
/// With quiet slip/pick noise the trajectory is exactly the ideal model's.
/// Otherwise motion holds a `slip_prob` fraction of every volume's mass in
/// place, and each station's pick is rescaled by `1+ε`, `ε ~ N(0,
/// pick_noise)`, clamped to what the ideal pick could take. Mass is
/// conserved either way. `step` tags the returned detections.
pub fn plant_step(
    truth: &StateVector,
    u: f64,
    infeed: &[f64],
    config: &Config,
    noise: &PlantNoise,
    rng: &mut SimRng,
    step_tag: usize,
) -> Result<(StateVector, StepOutcome, Vec<Detection>), SimError> {
    let outcome = if noise.truth_is_exact() {
        step(truth, u, &config.system, infeed)?
    } else {
        noisy_step(truth, u, infeed, config, noise, &mut rng.plant)?
    };
    let detections =
        synthesize_detections(&outcome.next, &config.camera, noise, &mut rng.detector, step_tag);
    let next = outcome.next.clone();
    Ok((next, outcome, detections))
}

fn noisy_step(
    truth: &StateVector,
    u: f64,
    infeed: &[f64],
    config: &Config,
    noise: &PlantNoise,
    rng: &mut ChaCha8Rng,
) -> Result<StepOutcome, SimError> {
    let system = &config.system;
    let m = system.m;
    let n = system.n();
    if infeed.len() != n {
        return Err(ModelError::DimensionMismatch {
            what: "infeed entries",
            expected: n,
            got: infeed.len(),
        }
        .into());
    }
    if u < system.u_min || u > system.u_max {
        return Err(ModelError::ControlOutOfBounds {
            u,
            lo: system.u_min,
            hi: system.u_max,
        }
        .into());
    }
    let speed = truth.speed();
    let (lo, hi, w_lo, w_hi) = shift_weights(speed, m)?;
    let slip = noise.slip_prob.clamp(0.0, 1.0);
    let mut data = vec![0.0; system.state_len()];
    let mut picked = vec![0.0; n];
    let mut exited = vec![0.0; n];

    for i in 0..n {
        let block = truth.block(i);
        let out = &mut data[i * m..(i + 1) * m];
        let mut gone = 0.0;
        for (j, &x) in block.iter().enumerate() {
            if x == 0.0 {
                continue;
            }
            let held = slip * x;
            let moved = x - held;
            out[j] += held;
            for (shift, w) in [(lo, w_lo), (hi, w_hi)] {
                if w == 0.0 {
                    continue;
                }
                let dest = j + shift;
                let amount = moved * w;
                if dest < m {
                    out[dest] += amount;
                } else {
                    gone += amount;
                }
            }
        }
        exited[i] = gone;
    }

    let pick_sigma = noise.pick_noise.max(0.0);
    let pick_dist = (pick_sigma > 0.0).then(|| Normal::new(0.0, pick_sigma).expect("positive std"));
    for station in &system.stations {
        let block = &mut data[station.material * m..(station.material + 1) * m];
        let total: f64 = station.span.range().map(|j| block[j]).sum();
        if total <= 0.0 {
            continue;
        }
        let nominal = station.pick_cap.min(total);
        let realized = match &pick_dist {
            Some(normal) if nominal > 0.0 => {
                let eps = normal.sample(rng);
                (nominal * (1.0 + eps)).clamp(0.0, nominal)
            }
            _ => nominal,
        };
        if realized > 0.0 {
            let keep = 1.0 - realized / total;
            for j in station.span.range() {
                block[j] *= keep;
            }
            picked[station.material] += realized;
        }
    }

    let speed_idx = system.state_len() - 1;
    data[speed_idx] = (speed + u).clamp(system.r_min, system.r_max);
    for (i, &add) in infeed.iter().enumerate() {
        data[i * m] += add;
    }
    let next = StateVector::from_parts(m, n, nalgebra::DVector::from_vec(data));
    Ok(StepOutcome {
        next,
        picked,
        exited,
    })
}

/// Mass on each material's station span (0 for unstationed materials).
fn station_masses(state: &StateVector, config: &Config) -> Vec<f64> {
    (0..state.material_count())
        .map(|i| match config.system.station_for(i) {
            Some(station) => station.span.range().map(|j| state.mass(i, j)).sum(),
            None => 0.0,
        })
        .collect()
}

/// Runs one closed loop: per step, the controller acts on the filter's
/// estimate, the plant advances under that control and the seeded infeed,
/// the synthetic camera reports detections, and the filter predicts and
/// (when measurements arrive) updates. Everything is determined by
/// `(config, seed)`.
pub fn run_closed_loop(
    config: &Config,
    controller: &Controller,
    seed: u64,
) -> Result<RunRecord, SimError> {
    let system = &config.system;
    let n = system.n();
    let steps = config.steps;
    let schedule = generate_infeed(&config.infeed.with_seed(seed), steps);
    let scripted = config.infeed.scripted.is_some();
    let zero_infeed = vec![0.0; n];

    let mut rng = SimRng::new(seed);
    let mut truth = StateVector::empty(system);
    truth.set_speed(config.initial_speed.clamp(system.r_min, system.r_max));
    let mut filter = FilterState::initial(system, truth.speed()).map_err(EstimateError::from)?;
    let mut previous: Option<ControlSequence> = None;

    let mut rows = Vec::with_capacity(steps);
    let mut detections_log = Vec::new();
    let mut controls = Vec::with_capacity(steps);
    let mut cumulative = 0.0;
    let mut speed_sum = 0.0;

    for t in 0..steps {
        speed_sum += truth.speed();
        let estimate = filter.mean.clone();
        let forecast: &[Vec<f64>] = if scripted { &schedule[t..] } else { &[] };
        let (u, solver) = match controller {
            Controller::Mpc => {
                let (u, seq, report) =
                    mpc_step(&estimate, previous.as_ref(), forecast, system, &config.mpc)?;
                previous = Some(seq);
                (u, Some(report))
            }
            Controller::Constant { target } => {
                let u = (target - estimate.speed()).clamp(system.u_min, system.u_max);
                (u, None)
            }
        };
        controls.push(u);

        let (next, outcome, dets) =
            plant_step(&truth, u, &schedule[t], config, &config.plant, &mut rng, t + 1)?;

        let infeed_estimate: &[f64] = if scripted { &schedule[t] } else { &zero_infeed };
        filter = predict(&filter, u, infeed_estimate, system, &config.noise)?;
        if config.perfect_vision {
            let indices = measured_indices(&config.camera, system);
            let z = MeasurementVector {
                z: nalgebra::DVector::from_iterator(
                    indices.len(),
                    indices.iter().map(|&k| next.as_slice()[k]),
                ),
            };
            filter = update(&filter, &z, &config.camera, system, &config.noise)?;
        } else if !dets.is_empty() {
            let z = measurement_from_detections(&dets, &config.camera, system)?;
            filter = update(&filter, &z, &config.camera, system, &config.noise)?;
        }

        let reward = stage_reward(&outcome, &truth, system, &config.mpc);
        cumulative += reward;
        let nm = n * system.m;
        rows.push(RunRow {
            step: t + 1,
            speed: next.speed(),
            station_mass: station_masses(&next, config),
            picked: outcome.picked.clone(),
            exited: outcome.exited.clone(),
            stage_reward: reward,
            cumulative_value: cumulative,
            est_total: filter.mean.as_slice()[..nm].iter().sum(),
            trace_p: filter.cov.trace(),
            solver,
        });
        detections_log.extend(dets);
        truth = next;
    }

    let avg_speed = if steps == 0 {
        truth.speed()
    } else {
        speed_sum / steps as f64
    };
    Ok(RunRecord {
        meta: RunMeta {
            seed,
            controller: controller.label().to_string(),
            target_speed: match controller {
                Controller::Constant { target } => Some(*target),
                Controller::Mpc => None,
            },
            config_hash: config.hash(),
        },
        rows,
        total_value: cumulative,
        avg_speed,
        detections: detections_log,
        controls,
    })
}

/// Runs the paired protocol over the seeds (processed in sorted order):
/// optimize each seed, take the run's time-average belt speed, rerun the
/// identical seed holding that speed constant, and aggregate improvements.
/// Each finished record is handed to `sink` (both runs per seed) so callers
/// can stream them to disk instead of holding them all.
pub fn paired_experiment(
    config: &Config,
    seeds: &[u64],
    mut sink: impl FnMut(&RunRecord),
) -> Result<PairedSummary, SimError> {
    let mut order = seeds.to_vec();
    order.sort_unstable();

    let mut per_seed = Vec::with_capacity(order.len());
    let mut mpc_rates = Vec::with_capacity(order.len());
    let mut base_rates = Vec::with_capacity(order.len());
    for seed in order {
        let mpc_record = run_closed_loop(config, &Controller::Mpc, seed)?;
        let target = mpc_record
            .avg_speed
            .clamp(config.system.r_min, config.system.r_max);
        let base_record =
            run_closed_loop(config, &Controller::Constant { target }, seed)?;
        let improvement_pct = if base_record.total_value == 0.0 {
            0.0
        } else {
            100.0 * (mpc_record.total_value - base_record.total_value)
                / base_record.total_value.abs()
        };
        mpc_rates.push(mpc_record.profit_rate());
        base_rates.push(base_record.profit_rate());
        per_seed.push(SeedOutcome {
            seed,
            mpc_total_value: mpc_record.total_value,
            avg_mpc_speed: mpc_record.avg_speed,
            baseline_total_value: base_record.total_value,
            improvement_pct,
        });
        sink(&mpc_record);
        sink(&base_record);
    }

    let improvements: Vec<f64> = per_seed.iter().map(|s| s.improvement_pct).collect();
    Ok(PairedSummary {
        mean_improvement_pct: mean(&improvements),
        median_improvement_pct: median(&improvements),
        mpc_profit_rate_variance: sample_variance(&mpc_rates),
        baseline_profit_rate_variance: sample_variance(&base_rates),
        per_seed,
    })
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
    xs.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / (xs.len() - 1) as f64
}
