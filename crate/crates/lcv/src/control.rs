//! Receding-horizon speed optimization.
//!
//! Every timestep the controller solves, from the current state estimate, a
//! finite-horizon problem over the next `T−1` speed changes: forward-
//! simulate the belt, score each stage, and maximize the summed score with a
//! quasi-Newton ascent (finite-difference gradients, BFGS inverse-Hessian
//! updates, Armijo backtracking, box constraints by projection). Only the
//! first control of the solution is applied; the rest seed the next solve as
//! a warm start.
//!
//! Two stage accountings are provided. `prose` (the default) scores realized
//! cash flow: picked mass earns its material price, mass exiting unsorted
//! forfeits the difference between its price and the mixed-salvage price.
//! `literal` scores `[V−O]·X` with the value/opportunity weights
//! `V = ρ·p`, `O = ρ·(1−p)` built from the separation parameters at the
//! stage state — the printed form of the objective this controller descends
//! from, kept selectable for comparison even though its weighting of
//! *remaining* (rather than removed) mass is arguably inverted.

use std::cell::RefCell;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{ConfigError, SystemConfig};
use crate::dynamics::{separation_params, step_in_place, ModelError};
use crate::state::{StateVector, StepOutcome};

/// Which stage score the horizon objective sums.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Accounting {
    /// Reward picked mass, penalize unsorted exits at `price − mixed_price`.
    Prose,
    /// The printed `[V−O]·X` form on each stage state.
    Literal,
}

/// Horizon length, stage accounting, and solver tuning for the controller.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MpcConfig {
    /// Horizon `T` in steps; `None` means the full-transit default
    /// `⌈m / r_min⌉`.
    pub horizon: Option<usize>,
    pub accounting: Accounting,
    /// Salvage value per unit of unsorted exited mass.
    pub mixed_price: f64,
    pub fd_epsilon: f64,
    pub armijo_c1: f64,
    pub backtrack_factor: f64,
    pub max_iters: usize,
    pub max_backtracks: usize,
    /// Convergence threshold on the gradient infinity-norm.
    pub grad_tol: f64,
}

impl Default for MpcConfig {
    fn default() -> Self {
        Self {
            horizon: None,
            accounting: Accounting::Prose,
            mixed_price: 0.0,
            fd_epsilon: 1e-3,
            armijo_c1: 1e-4,
            backtrack_factor: 0.5,
            max_iters: 100,
            max_backtracks: 30,
            grad_tol: 1e-6,
        }
    }
}

impl MpcConfig {
    /// The effective horizon: the configured value, or the time material
    /// needs to transit the whole belt at minimum speed.
    pub fn resolve_horizon(&self, config: &SystemConfig) -> Result<usize, ConfigError> {
        let t = match self.horizon {
            Some(t) => t,
            None => {
                if config.r_min <= 0.0 {
                    return Err(ConfigError::invalid(
                        "mpc.horizon",
                        "default horizon ⌈m/r_min⌉ is undefined for r_min = 0; set an \
                         explicit horizon or a positive r_min",
                    ));
                }
                (config.m as f64 / config.r_min).ceil() as usize
            }
        };
        if t < 2 {
            return Err(ConfigError::invalid(
                "mpc.horizon",
                format!("horizon must be at least 2, got {t}"),
            ));
        }
        Ok(t)
    }
}

/// A sequence of `T−1` per-step speed changes.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlSequence {
    pub u: Vec<f64>,
}

impl ControlSequence {
    pub fn zeros(len: usize) -> Self {
        Self { u: vec![0.0; len] }
    }

    pub fn len(&self) -> usize {
        self.u.len()
    }

    pub fn is_empty(&self) -> bool {
        self.u.is_empty()
    }

    /// The receding-horizon warm start: everything shifted left one step,
    /// the final entry repeated, resized to `len` (zeros when empty).
    pub fn warm_shift(&self, len: usize) -> ControlSequence {
        let Some(&last) = self.u.last() else {
            return ControlSequence::zeros(len);
        };
        let u = (0..len)
            .map(|k| *self.u.get(k + 1).unwrap_or(&last))
            .collect();
        ControlSequence { u }
    }
}

/// Why the solver stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    /// Gradient infinity-norm fell below `grad_tol`.
    GradTol,
    /// Iteration cap reached.
    MaxIters,
    /// A line search exhausted its backtracks (or the objective went
    /// non-finite); the best iterate so far is returned.
    NoProgress,
}

impl std::fmt::Display for StopReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            StopReason::GradTol => "grad_tol",
            StopReason::MaxIters => "max_iters",
            StopReason::NoProgress => "no_progress",
        })
    }
}

/// Solve statistics for one receding-horizon step.
#[derive(Debug, Clone, PartialEq)]
pub struct SolverReport {
    pub iterations: usize,
    pub objective: f64,
    pub grad_norm: f64,
    pub backtracks_total: usize,
    pub reason: StopReason,
}

impl SolverReport {
    pub fn converged(&self) -> bool {
        self.reason == StopReason::GradTol
    }
}

/// The value and opportunity-cost weight rows at a given state: per mass
/// element, `V = ρ·p` and `O = ρ·(1−p)`; both zero on the speed element.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueMatrices {
    pub v: DVector<f64>,
    pub o: DVector<f64>,
}

#[derive(Debug, Error)]
pub enum ControlError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("control {index} = {value} outside [{lo}, {hi}]")]
    BoundViolation {
        index: usize,
        value: f64,
        lo: f64,
        hi: f64,
    },
    #[error("infeed forecast row {row}: expected {expected} entries, got {got}")]
    ForecastShape {
        row: usize,
        expected: usize,
        got: usize,
    },
    #[error("objective not finite at the starting point")]
    NonFiniteObjective,
}

/// Evaluates `V` and `O` at a state.
pub fn value_matrices(state: &StateVector, config: &SystemConfig) -> ValueMatrices {
    let m = config.m;
    let dim = config.state_len();
    let mut v = DVector::zeros(dim);
    let o = DVector::zeros(dim);
    for (i, mat) in config.materials.iter().enumerate() {
        for j in 0..m {
            v[i * m + j] = mat.price; // p = 1 wherever no station acts
        }
    }
    let mut vm = ValueMatrices { v, o };
    for station in &config.stations {
        let (_, p) = separation_params(state, station);
        let price = config.materials[station.material].price;
        for (j, &pj) in p.iter().enumerate() {
            vm.v[station.material * m + j] = price * pj;
            vm.o[station.material * m + j] = price * (1.0 - pj);
        }
    }
    vm
}

fn prose_reward(picked: &[f64], exited: &[f64], config: &SystemConfig, mixed_price: f64) -> f64 {
    let mut reward = 0.0;
    for (i, mat) in config.materials.iter().enumerate() {
        reward += mat.price * picked[i] - (mat.price - mixed_price) * exited[i];
    }
    reward
}

/// `[V−O]·X` evaluated directly on a flat mass slice; algebraically equal to
/// the [`value_matrices`] dot product but without building the weight rows.
fn literal_stage_value(mass: &[f64], config: &SystemConfig) -> f64 {
    let m = config.m;
    let mut total = 0.0;
    for (i, mat) in config.materials.iter().enumerate() {
        let sum: f64 = mass[i * m..(i + 1) * m].iter().sum();
        total += mat.price * sum;
    }
    for station in &config.stations {
        let block = &mass[station.material * m..(station.material + 1) * m];
        let span_sum: f64 = station.span.range().map(|j| block[j]).sum();
        if span_sum > 0.0 {
            let keep = (1.0 - station.pick_cap / span_sum).max(0.0);
            total += config.materials[station.material].price * span_sum * (2.0 * keep - 2.0);
        }
    }
    total
}

/// The score one step contributes to the horizon objective.
///
/// The pre-step state is accepted alongside the outcome so accountings with
/// other reference points can slot in later; both shipped modes score the
/// step by its outcome — `prose` from the realized picked/exited masses,
/// `literal` from `[V−O]·X` at the post-step state.
pub fn stage_reward(
    outcome: &StepOutcome,
    _state_before: &StateVector,
    config: &SystemConfig,
    mpc: &MpcConfig,
) -> f64 {
    match mpc.accounting {
        Accounting::Prose => prose_reward(&outcome.picked, &outcome.exited, config, mpc.mixed_price),
        Accounting::Literal => {
            let nm = config.n() * config.m;
            literal_stage_value(&outcome.next.as_slice()[..nm], config)
        }
    }
}

/// Reusable buffers for horizon rollouts, so gradient evaluation does not
/// allocate per call.
struct RolloutScratch {
    data: Vec<f64>,
    motion: Vec<f64>,
    picked: Vec<f64>,
    exited: Vec<f64>,
    zeros: Vec<f64>,
}

impl RolloutScratch {
    fn new(config: &SystemConfig) -> Self {
        Self {
            data: vec![0.0; config.state_len()],
            motion: vec![0.0; config.m],
            picked: vec![0.0; config.n()],
            exited: vec![0.0; config.n()],
            zeros: vec![0.0; config.n()],
        }
    }
}

fn rollout_with(
    x0: &StateVector,
    u: &[f64],
    infeed_forecast: &[Vec<f64>],
    config: &SystemConfig,
    mpc: &MpcConfig,
    scratch: &mut RolloutScratch,
) -> Result<f64, ControlError> {
    let n = config.n();
    let nm = n * config.m;
    let RolloutScratch {
        data,
        motion,
        picked,
        exited,
        zeros,
    } = scratch;
    data.copy_from_slice(x0.as_slice());
    let mut objective = 0.0;
    for (l, &ul) in u.iter().enumerate() {
        if !(ul >= config.u_min && ul <= config.u_max) {
            return Err(ControlError::BoundViolation {
                index: l,
                value: ul,
                lo: config.u_min,
                hi: config.u_max,
            });
        }
        let infeed: &[f64] = match infeed_forecast.get(l) {
            Some(row) if row.len() != n => {
                return Err(ControlError::ForecastShape {
                    row: l,
                    expected: n,
                    got: row.len(),
                })
            }
            Some(row) => row,
            None => zeros,
        };
        step_in_place(data, ul, config, infeed, picked, exited, motion)?;
        objective += match mpc.accounting {
            Accounting::Prose => prose_reward(picked, exited, config, mpc.mixed_price),
            Accounting::Literal => literal_stage_value(&data[..nm], config),
        };
    }
    Ok(objective)
}

/// Forward-simulates the control sequence from `x0` (drawing infeed from the
/// forecast where provided, zero beyond it) and returns the summed stage
/// score. Deterministic: identical inputs give identical values.
pub fn rollout_objective(
    x0: &StateVector,
    u: &ControlSequence,
    infeed_forecast: &[Vec<f64>],
    config: &SystemConfig,
    mpc: &MpcConfig,
) -> Result<f64, ControlError> {
    let mut scratch = RolloutScratch::new(config);
    rollout_with(x0, &u.u, infeed_forecast, config, mpc, &mut scratch)
}

/// Central-difference gradient core; one-sided at the box faces. `base`
/// carries an already-computed `J(u)` so the one-sided branches do not
/// re-evaluate it.
fn fd_gradient_impl<E>(
    eval: &mut E,
    u: &[f64],
    lo: f64,
    hi: f64,
    eps: f64,
    base: Option<f64>,
) -> Result<Vec<f64>, ControlError>
where
    E: FnMut(&[f64]) -> Result<f64, ControlError>,
{
    let mut work = u.to_vec();
    let mut base = base;
    let mut g = vec![0.0; u.len()];
    for l in 0..u.len() {
        let ul = u[l];
        let up_ok = ul + eps <= hi;
        let down_ok = ul - eps >= lo;
        g[l] = if up_ok && down_ok {
            work[l] = ul + eps;
            let j_plus = eval(&work)?;
            work[l] = ul - eps;
            let j_minus = eval(&work)?;
            (j_plus - j_minus) / (2.0 * eps)
        } else if up_ok || down_ok {
            let j0 = match base {
                Some(b) => b,
                None => {
                    work[l] = ul;
                    let b = eval(&work)?;
                    base = Some(b);
                    b
                }
            };
            if up_ok {
                work[l] = ul + eps;
                (eval(&work)? - j0) / eps
            } else {
                work[l] = ul - eps;
                (j0 - eval(&work)?) / eps
            }
        } else {
            0.0 // box narrower than the step: no room to difference
        };
        work[l] = ul;
    }
    Ok(g)
}

/// Finite-difference gradient of the rollout objective with respect to each
/// control: central differences of width `fd_epsilon`, falling back to the
/// inward one-sided difference at an active bound.
pub fn gradient_fd(
    x0: &StateVector,
    u: &ControlSequence,
    infeed_forecast: &[Vec<f64>],
    config: &SystemConfig,
    mpc: &MpcConfig,
) -> Result<Vec<f64>, ControlError> {
    let mut scratch = RolloutScratch::new(config);
    let mut eval =
        |pt: &[f64]| rollout_with(x0, pt, infeed_forecast, config, mpc, &mut scratch);
    fd_gradient_impl(
        &mut eval,
        &u.u,
        config.u_min,
        config.u_max,
        mpc.fd_epsilon,
        None,
    )
}

/// Box-constrained BFGS ascent on an arbitrary objective.
///
/// Maximizes `objective` over `[lo, hi]^dim` from `start` (projected into
/// the box): search direction `H·g` from the BFGS inverse-Hessian estimate,
/// Armijo backtracking on projected trial points, curvature-guarded updates.
/// `gradient` receives the current point and its objective value, so
/// finite-difference implementations can reuse it for one-sided stencils. A
/// non-finite objective at `start` is an error; one appearing mid-search
/// ends the search with the best iterate so far (`no_progress`).
pub fn bfgs_box_max(
    objective: &mut dyn FnMut(&[f64]) -> f64,
    gradient: &mut dyn FnMut(&[f64], f64) -> Vec<f64>,
    lo: f64,
    hi: f64,
    start: &[f64],
    mpc: &MpcConfig,
) -> Result<(Vec<f64>, SolverReport), ControlError> {
    let dim = start.len();
    let mut u: Vec<f64> = start.iter().map(|x| x.clamp(lo, hi)).collect();
    let mut j = objective(&u);
    if !j.is_finite() {
        return Err(ControlError::NonFiniteObjective);
    }
    let inf_norm = |g: &[f64]| g.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
    let mut g = gradient(&u, j);
    let mut h = DMatrix::<f64>::identity(dim, dim);
    let mut iterations = 0;
    let mut backtracks_total = 0;

    let finish = |u: Vec<f64>, j: f64, gn: f64, iterations, backtracks_total, reason| {
        (
            u,
            SolverReport {
                iterations,
                objective: j,
                grad_norm: gn,
                backtracks_total,
                reason,
            },
        )
    };

    loop {
        let gn = inf_norm(&g);
        if gn <= mpc.grad_tol {
            return Ok(finish(u, j, gn, iterations, backtracks_total, StopReason::GradTol));
        }
        if iterations >= mpc.max_iters {
            return Ok(finish(u, j, gn, iterations, backtracks_total, StopReason::MaxIters));
        }
        let gv = DVector::from_column_slice(&g);
        let d = &h * &gv; // ascent direction

        let mut alpha = 1.0;
        let mut accepted: Option<(Vec<f64>, f64, f64)> = None;
        for _ in 0..mpc.max_backtracks {
            let trial: Vec<f64> = u
                .iter()
                .zip(d.iter())
                .map(|(&ui, &di)| (ui + alpha * di).clamp(lo, hi))
                .collect();
            // Directional increase along the *projected* displacement.
            let slope: f64 = trial.iter().zip(&u).zip(&g).map(|((&t, &ui), &gi)| (t - ui) * gi).sum();
            if slope > 0.0 {
                let jt = objective(&trial);
                if jt.is_finite() && jt >= j + mpc.armijo_c1 * slope {
                    accepted = Some((trial, jt, slope));
                    break;
                }
            }
            alpha *= mpc.backtrack_factor;
            backtracks_total += 1;
        }
        let Some((trial, jt, _)) = accepted else {
            return Ok(finish(u, j, gn, iterations, backtracks_total, StopReason::NoProgress));
        };
        let g_new = gradient(&trial, jt);
        // BFGS inverse update for the minimization of −J: s = Δu,
        // y = −Δg; skipped unless the curvature sᵀy is safely positive.
        let s = DVector::from_iterator(dim, trial.iter().zip(&u).map(|(&t, &ui)| t - ui));
        let y = DVector::from_iterator(dim, g.iter().zip(&g_new).map(|(&go, &gn)| go - gn));
        let sy = s.dot(&y);
        if sy > 1e-10 {
            let rho = 1.0 / sy;
            let hy = &h * &y;
            let yhy = y.dot(&hy);
            h.ger(-rho, &s, &hy, 1.0);
            h.ger(-rho, &hy, &s, 1.0);
            h.ger(rho * rho * yhy + rho, &s, &s, 1.0);
        }
        u = trial;
        j = jt;
        g = g_new;
        iterations += 1;
    }
}

/// Maximizes the rollout objective over the horizon's control sequence.
pub fn bfgs_solve(
    x0: &StateVector,
    u_init: &ControlSequence,
    infeed_forecast: &[Vec<f64>],
    config: &SystemConfig,
    mpc: &MpcConfig,
) -> Result<(ControlSequence, SolverReport), ControlError> {
    let n = config.n();
    for (row, infeed) in infeed_forecast.iter().enumerate() {
        if infeed.len() != n {
            return Err(ControlError::ForecastShape {
                row,
                expected: n,
                got: infeed.len(),
            });
        }
    }
    let scratch = RefCell::new(RolloutScratch::new(config));
    let first_err: RefCell<Option<ControlError>> = RefCell::new(None);
    // Errors inside the search surface as NaN (ending it) and are re-raised
    // afterward; the box keeps every trial point feasible, so none are
    // expected.
    let eval = |pt: &[f64]| -> f64 {
        match rollout_with(x0, pt, infeed_forecast, config, mpc, &mut scratch.borrow_mut()) {
            Ok(j) => j,
            Err(e) => {
                first_err.borrow_mut().get_or_insert(e);
                f64::NAN
            }
        }
    };
    let mut objective = |pt: &[f64]| eval(pt);
    let mut gradient = |pt: &[f64], at: f64| {
        let mut ev = |q: &[f64]| -> Result<f64, ControlError> { Ok(eval(q)) };
        fd_gradient_impl(&mut ev, pt, config.u_min, config.u_max, mpc.fd_epsilon, Some(at))
            .expect("infallible evaluator")
    };
    let solved = bfgs_box_max(
        &mut objective,
        &mut gradient,
        config.u_min,
        config.u_max,
        &u_init.u,
        mpc,
    );
    if let Some(err) = first_err.into_inner() {
        return Err(err);
    }
    let (u, report) = solved?;
    Ok((ControlSequence { u }, report))
}

/// One receding-horizon step: warm-start from the previous solution (shifted
/// left, last entry repeated; zeros when none), solve, and return the first
/// control of the solution as the action to apply, along with the full
/// solution for the next warm start and the solver report.
pub fn mpc_step(
    estimate: &StateVector,
    previous: Option<&ControlSequence>,
    infeed_forecast: &[Vec<f64>],
    config: &SystemConfig,
    mpc: &MpcConfig,
) -> Result<(f64, ControlSequence, SolverReport), ControlError> {
    let horizon = mpc.resolve_horizon(config)?;
    let dim = horizon - 1;
    let init = match previous {
        Some(prev) => prev.warm_shift(dim),
        None => ControlSequence::zeros(dim),
    };
    let (solution, report) = bfgs_solve(estimate, &init, infeed_forecast, config, mpc)?;
    Ok((solution.u[0], solution, report))
}
