//! Longitudinal control volume (LCV) modeling, estimation, and control for
//! conveyor sorting lines.
//!
//! A conveyor belt is discretized along its travel axis into `m` equal
//! control volumes. The system state tracks, for each of `n` material
//! classes, how much of that material sits in each volume, plus the current
//! belt speed (volumes advanced per timestep):
//!
//! ```text
//!   X = [ x⁰₀ … x⁰ₘ₋₁ | x¹₀ … x¹ₘ₋₁ | … | xⁿ⁻¹₀ … xⁿ⁻¹ₘ₋₁ | r ]
//! ```
//!
//! Material enters at volume 0, rides the belt through the viewport of an
//! object detector, passes fixed-position sorting stations that each pick a
//! bounded amount of one target material per step, and whatever is left
//! exits past the last volume as mixed residue.
//!
//! The crate is organized as a pipeline:
//!
//! * [`config`] — system geometry, materials, stations, and validation.
//! * [`state`] — the flat state vector and per-step mass accounting.
//! * [`dynamics`] — belt motion and sorting as structured linear operators,
//!   and the nonlinear one-step transition built from them.
//! * [`estimate`] — binning of sparse vision detections into per-volume
//!   measurements and a Kalman filter over the belt state.
//! * [`control`] — receding-horizon speed optimization (finite-difference
//!   gradients, BFGS with backtracking line search, box constraints).
//! * [`sim`] — procedural infeed, an imperfect plant, closed-loop rollout,
//!   and the paired controller-vs-constant-speed experiment protocol.
//!
//! All stochastic components draw from explicitly seeded generators; a whole
//! closed-loop experiment is a pure function of its configuration and seed.

pub mod config;
pub mod control;
pub mod dynamics;
pub mod estimate;
pub mod sim;
pub mod state;

pub use config::{Config, ConfigError, MaterialSpec, SortStation, SystemConfig, VolumeSpan};
pub use control::{
    bfgs_box_max, bfgs_solve, gradient_fd, mpc_step, rollout_objective, stage_reward,
    value_matrices, Accounting, ControlError, ControlSequence, MpcConfig, SolverReport,
    StopReason, ValueMatrices,
};
pub use dynamics::{
    integral_motion_matrix, motion_matrix, separation_params, sort_matrix, step, ModelError,
};
pub use estimate::{
    bin_detections, measurement_from_detections, observation_matrix, predict, run_filter, update,
    CameraModel, Detection, EstimateError, FilterState, MeasurementVector, NoiseConfig,
};
pub use sim::{
    generate_infeed, paired_experiment, plant_step, run_closed_loop, Controller, InfeedModel,
    MaterialInfeed, PairedSummary, PlantNoise, RunMeta, RunRecord, RunRow, SeedOutcome, SimError,
    SimRng,
};
pub use state::{StateVector, StepOutcome};
