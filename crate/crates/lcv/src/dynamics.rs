//! Belt motion and sorting as structured linear operators, and the one-step
//! state transition composed from them.
//!
//! One timestep applies, in order:
//!
//! 1. **motion** — every material block is advanced by the current belt
//!    speed. Integer speeds are a pure index shift; fractional speeds blend
//!    the two neighboring integer shifts linearly. Mass pushed past the last
//!    volume exits the system and is reported, not silently dropped.
//! 2. **sorting** — each station removes up to its pick cap from the volumes
//!    it spans, scaling the spanned masses by the separation parameter
//!    `p = max(0, 1 − γ/Σx)`.
//! 3. **speed update** — `r ← clamp(r + u, r_min, r_max)`.
//! 4. **infeed** — newly arrived mass lands in volume 0.
//!
//! The matrix constructors ([`integral_motion_matrix`], [`motion_matrix`],
//! [`sort_matrix`]) build the dense operators for inspection and testing;
//! [`step`] applies the same arithmetic directly on the flat state for the
//! hot paths (horizon rollouts, filtering, simulation).

use nalgebra::DMatrix;
use thiserror::Error;

use crate::config::{SortStation, SystemConfig};
use crate::state::{StateVector, StepOutcome};

#[derive(Debug, Clone, Error, PartialEq)]
pub enum ModelError {
    #[error("belt speed {speed} outside [0, {max}] (mass would overshoot the whole belt)")]
    InvalidSpeed { speed: f64, max: usize },
    #[error("control input {u} outside [{lo}, {hi}]")]
    ControlOutOfBounds { u: f64, lo: f64, hi: f64 },
    #[error("material index {material} out of range (n={n})")]
    MaterialOutOfRange { material: usize, n: usize },
    #[error("expected {expected} {what}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("mass entries must be non-negative")]
    NegativeMass,
}

/// Shift-by-`speed` weights for one material block: mass in volume `j` moves
/// to `j + lo` with weight `w_lo` and to `j + hi` with weight `w_hi`.
///
/// Integer speeds collapse to a single destination (`lo == hi`, `w_hi == 0`);
/// fractional speeds split between the neighboring integer shifts with the
/// linear-interpolation weights `(⌈r⌉−r, r−⌊r⌋)`.
pub(crate) fn shift_weights(speed: f64, m: usize) -> Result<(usize, usize, f64, f64), ModelError> {
    if !(speed >= 0.0 && speed <= m as f64) {
        return Err(ModelError::InvalidSpeed { speed, max: m });
    }
    if speed.fract() == 0.0 {
        let s = speed as usize;
        Ok((s, s, 1.0, 0.0))
    } else {
        let lo = speed.floor() as usize;
        Ok((lo, lo + 1, speed.ceil() - speed, speed - speed.floor()))
    }
}

/// The block-diagonal shift operator for a nonnegative integer speed.
///
/// Each of the `n` material blocks is the `m×m` matrix with `L[i][j] = 1`
/// exactly when `i = j + speed`; the final diagonal entry carries the speed
/// element through unchanged. Columns whose mass would land past volume
/// `m−1` are zero: that mass has no destination row and exits the belt.
pub fn integral_motion_matrix(
    speed: usize,
    config: &SystemConfig,
) -> Result<DMatrix<f64>, ModelError> {
    let m = config.m;
    if speed > m {
        return Err(ModelError::InvalidSpeed {
            speed: speed as f64,
            max: m,
        });
    }
    let dim = config.state_len();
    let mut out = DMatrix::zeros(dim, dim);
    for i in 0..config.n() {
        for j in 0..m.saturating_sub(speed) {
            out[(i * m + j + speed, i * m + j)] = 1.0;
        }
    }
    out[(dim - 1, dim - 1)] = 1.0;
    Ok(out)
}

/// The shift operator for a real-valued speed: the convex blend
/// `(⌈r⌉−r)·L(⌊r⌋) + (r−⌊r⌋)·L(⌈r⌉)`, which degenerates to the exact
/// integral matrix when `speed` is an integer.
pub fn motion_matrix(speed: f64, config: &SystemConfig) -> Result<DMatrix<f64>, ModelError> {
    let (lo, hi, w_lo, w_hi) = shift_weights(speed, config.m)?;
    if lo == hi {
        return integral_motion_matrix(lo, config);
    }
    let mut out = integral_motion_matrix(lo, config)?;
    out *= w_lo;
    out += integral_motion_matrix(hi, config)? * w_hi;
    // Blending doubles the speed diagonal; restore the exact 1.
    let last = config.state_len() - 1;
    out[(last, last)] = 1.0;
    Ok(out)
}

/// The pick ratio `eta = γ / Σ_{j∈span} x[j]` and the per-volume separation
/// parameters for one station: `p[j] = 1` off the span and
/// `p[j] = max(0, 1 − eta)` on it.
///
/// A zero-mass span yields `eta = +∞` and therefore `p = 0` on the span —
/// whatever arrives is picked immediately.
pub fn separation_params(state: &StateVector, station: &SortStation) -> (f64, Vec<f64>) {
    let block = state.block(station.material);
    let total: f64 = station.span.range().map(|j| block[j]).sum();
    let eta = if total > 0.0 {
        station.pick_cap / total
    } else {
        f64::INFINITY
    };
    let keep = (1.0 - eta).max(0.0);
    let mut p = vec![1.0; state.volumes()];
    for j in station.span.range() {
        p[j] = keep;
    }
    (eta, p)
}

/// The block-diagonal sorting operator at a given state: block `i` is
/// `diag(p^i)` from [`separation_params`] (identity for materials with no
/// station), with a final 1 for the speed element.
pub fn sort_matrix(state: &StateVector, config: &SystemConfig) -> DMatrix<f64> {
    let dim = config.state_len();
    let mut out = DMatrix::identity(dim, dim);
    for station in &config.stations {
        let (_, p) = separation_params(state, station);
        for (j, pj) in p.iter().enumerate() {
            out[(station.material * config.m + j, station.material * config.m + j)] = *pj;
        }
    }
    out
}

/// One full transition step on a flat state slice, writing removed and
/// exited mass per material into `picked`/`exited` and using `scratch`
/// (length `m`) as the motion buffer. Shared by [`step`], the filter
/// predict, and the horizon rollouts so every caller performs bitwise
/// identical arithmetic.
pub(crate) fn step_in_place(
    data: &mut [f64],
    u: f64,
    config: &SystemConfig,
    infeed: &[f64],
    picked: &mut [f64],
    exited: &mut [f64],
    scratch: &mut [f64],
) -> Result<(), ModelError> {
    let m = config.m;
    let n = config.n();
    debug_assert_eq!(data.len(), n * m + 1);
    debug_assert_eq!(scratch.len(), m);
    if infeed.len() != n {
        return Err(ModelError::DimensionMismatch {
            what: "infeed entries",
            expected: n,
            got: infeed.len(),
        });
    }
    if !(u >= config.u_min && u <= config.u_max) {
        return Err(ModelError::ControlOutOfBounds {
            u,
            lo: config.u_min,
            hi: config.u_max,
        });
    }
    let r = data[n * m];
    let (lo, hi, w_lo, w_hi) = shift_weights(r, m)?;

    // Motion at the current speed; mass past the last volume exits.
    for i in 0..n {
        let block = &mut data[i * m..(i + 1) * m];
        scratch.fill(0.0);
        let mut out = 0.0;
        for (j, &x) in block.iter().enumerate() {
            if x == 0.0 {
                continue;
            }
            let dest_lo = j + lo;
            if dest_lo < m {
                scratch[dest_lo] += w_lo * x;
            } else {
                out += w_lo * x;
            }
            if w_hi != 0.0 {
                let dest_hi = j + hi;
                if dest_hi < m {
                    scratch[dest_hi] += w_hi * x;
                } else {
                    out += w_hi * x;
                }
            }
        }
        block.copy_from_slice(scratch);
        exited[i] = out;
    }

    // Sorting on the post-motion masses.
    picked.fill(0.0);
    for station in &config.stations {
        let block = &mut data[station.material * m..(station.material + 1) * m];
        let total: f64 = station.span.range().map(|j| block[j]).sum();
        let pick = total.min(station.pick_cap);
        picked[station.material] = pick;
        if total > 0.0 && pick > 0.0 {
            let keep = 1.0 - pick / total;
            for j in station.span.range() {
                block[j] *= keep;
            }
        }
    }

    // Speed update, then infeed into volume 0.
    data[n * m] = (r + u).clamp(config.r_min, config.r_max);
    for (i, &arriving) in infeed.iter().enumerate() {
        debug_assert!(arriving >= 0.0, "infeed must be non-negative");
        data[i * m] += arriving;
    }
    Ok(())
}

/// Advances the state one timestep: motion at the current speed, sorting,
/// the speed update `r ← clamp(r + u, r_min, r_max)`, and finally `infeed`
/// (per-material mass) injected into volume 0.
pub fn step(
    state: &StateVector,
    u: f64,
    config: &SystemConfig,
    infeed: &[f64],
) -> Result<StepOutcome, ModelError> {
    let n = config.n();
    let mut data = state.as_vector().clone();
    let mut picked = vec![0.0; n];
    let mut exited = vec![0.0; n];
    let mut scratch = vec![0.0; config.m];
    step_in_place(
        data.as_mut_slice(),
        u,
        config,
        infeed,
        &mut picked,
        &mut exited,
        &mut scratch,
    )?;
    Ok(StepOutcome {
        next: StateVector::from_parts(config.m, n, data),
        picked,
        exited,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::test_support::{small_system, system_with_station};
    use crate::config::VolumeSpan;
    use approx::assert_abs_diff_eq;
    use nalgebra::DVector;

    fn state_of(config: &SystemConfig, masses: &[f64], speed: f64) -> StateVector {
        let mut data = DVector::zeros(config.state_len());
        for (k, &x) in masses.iter().enumerate() {
            data[k] = x;
        }
        data[config.state_len() - 1] = speed;
        StateVector::from_raw(data, config).unwrap()
    }

    #[test]
    fn zero_shift_is_identity() {
        let config = small_system(3, 1);
        let l = integral_motion_matrix(0, &config).unwrap();
        assert_eq!(l, DMatrix::identity(4, 4));
    }

    #[test]
    fn unit_shift_moves_mass_down_the_belt() {
        let config = small_system(3, 1);
        let l = integral_motion_matrix(1, &config).unwrap();
        let x = DVector::from_vec(vec![5.0, 2.0, 7.0, 1.0]);
        let moved = &l * &x;
        assert_eq!(moved.as_slice(), &[0.0, 5.0, 2.0, 1.0]);
        // The 7 units in the last volume have no destination row: they exit.
        let column_sums: Vec<f64> = (0..3).map(|j| l.column(j).sum()).collect();
        assert_eq!(column_sums, vec![1.0, 1.0, 0.0]);
    }

    #[test]
    fn two_material_blocks_share_the_shift() {
        let config = small_system(4, 2);
        let l = integral_motion_matrix(2, &config).unwrap();
        assert_eq!(l[(3, 1)], 1.0);
        assert_eq!(l[(4 + 3, 4 + 1)], 1.0);
        assert_eq!(l.view((0, 0), (4, 4)), l.view((4, 4), (4, 4)));
    }

    #[test]
    fn speed_above_belt_length_is_rejected() {
        let config = small_system(3, 1);
        assert!(integral_motion_matrix(4, &config).is_err());
        assert!(motion_matrix(3.5, &config).is_err());
        assert!(motion_matrix(-0.1, &config).is_err());
    }

    #[test]
    fn fractional_speed_blends_neighboring_shifts() {
        let config = small_system(3, 1);
        let blended = motion_matrix(1.5, &config).unwrap();
        let expect = integral_motion_matrix(1, &config).unwrap() * 0.5
            + integral_motion_matrix(2, &config).unwrap() * 0.5;
        // Mass sub-block matches the midpoint blend exactly.
        assert_eq!(blended.view((0, 0), (3, 3)), expect.view((0, 0), (3, 3)));
        assert_eq!(blended[(3, 3)], 1.0);
    }

    #[test]
    fn integer_speed_returns_the_integral_matrix_exactly() {
        let config = small_system(5, 2);
        for s in 0..=5 {
            assert_eq!(
                motion_matrix(s as f64, &config).unwrap(),
                integral_motion_matrix(s, &config).unwrap()
            );
        }
    }

    #[test]
    fn quarter_speed_splits_mass_three_to_one() {
        let config = small_system(3, 1);
        let l = motion_matrix(1.25, &config).unwrap();
        let x = DVector::from_vec(vec![4.0, 0.0, 0.0, 1.25]);
        let moved = &l * &x;
        assert_abs_diff_eq!(moved.as_slice()[..3], [0.0, 3.0, 1.0][..], epsilon = 1e-12);
    }

    #[test]
    fn separation_follows_pick_ratio() {
        let config = system_with_station(3, 1, VolumeSpan { first: 2, last: 2 }, 3.0);
        let state = state_of(&config, &[0.0, 0.0, 6.0], 1.0);
        let (eta, p) = separation_params(&state, &config.stations[0]);
        assert_eq!(eta, 0.5);
        assert_eq!(p, vec![1.0, 1.0, 0.5]);
    }

    #[test]
    fn undersubscribed_span_is_fully_picked() {
        let config = system_with_station(3, 1, VolumeSpan { first: 1, last: 2 }, 3.0);
        let state = state_of(&config, &[0.0, 1.5, 0.5], 1.0);
        let (eta, p) = separation_params(&state, &config.stations[0]);
        assert_eq!(eta, 1.5);
        assert_eq!(p, vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn empty_span_uses_infinite_eta_sentinel() {
        let config = system_with_station(3, 1, VolumeSpan { first: 2, last: 2 }, 3.0);
        let state = state_of(&config, &[1.0, 0.0, 0.0], 1.0);
        let (eta, p) = separation_params(&state, &config.stations[0]);
        assert!(eta.is_infinite());
        assert_eq!(p[2], 0.0);
    }

    #[test]
    fn sort_matrix_without_stations_is_identity() {
        let config = small_system(3, 2);
        let state = state_of(&config, &[1.0; 6], 1.0);
        assert_eq!(sort_matrix(&state, &config), DMatrix::identity(7, 7));
    }

    #[test]
    fn sort_matrix_scales_span_diagonal() {
        let config = system_with_station(3, 1, VolumeSpan { first: 2, last: 2 }, 3.0);
        let state = state_of(&config, &[0.0, 0.0, 6.0], 1.0);
        let f = sort_matrix(&state, &config);
        let diag: Vec<f64> = (0..4).map(|k| f[(k, k)]).collect();
        assert_eq!(diag, vec![1.0, 1.0, 0.5, 1.0]);
    }

    #[test]
    fn sort_matrix_leaves_unstationed_material_alone() {
        let mut config = system_with_station(3, 2, VolumeSpan { first: 0, last: 1 }, 1.0);
        config.stations[0].material = 0;
        let state = state_of(&config, &[2.0, 2.0, 0.0, 5.0, 5.0, 5.0], 1.0);
        let f = sort_matrix(&state, &config);
        for j in 0..3 {
            assert_eq!(f[(3 + j, 3 + j)], 1.0);
        }
    }

    #[test]
    fn step_is_pure_injection_on_an_empty_belt() {
        let config = small_system(3, 1);
        let state = StateVector::empty(&config);
        let outcome = step(&state, 0.0, &config, &[3.0]).unwrap();
        assert_eq!(outcome.next.block(0), &[3.0, 0.0, 0.0]);
        assert_eq!(outcome.picked, vec![0.0]);
        assert_eq!(outcome.exited, vec![0.0]);
    }

    #[test]
    fn step_moves_then_sorts() {
        let config = system_with_station(3, 1, VolumeSpan { first: 2, last: 2 }, 2.0);
        let state = state_of(&config, &[0.0, 4.0, 0.0], 1.0);
        let outcome = step(&state, 0.0, &config, &[0.0]).unwrap();
        // After motion [0,0,4]; eta = 2/4; station removes 2.
        assert_eq!(outcome.next.block(0), &[0.0, 0.0, 2.0]);
        assert_eq!(outcome.picked, vec![2.0]);
        assert_eq!(outcome.exited, vec![0.0]);
    }

    #[test]
    fn step_clamps_speed_at_the_bounds() {
        let config = small_system(3, 1);
        let state = state_of(&config, &[0.0; 3], config.r_max);
        let outcome = step(&state, config.u_max, &config, &[0.0]).unwrap();
        assert_eq!(outcome.next.speed(), config.r_max);
    }

    #[test]
    fn step_rejects_out_of_bounds_control() {
        let config = small_system(3, 1);
        let state = StateVector::empty(&config);
        let err = step(&state, config.u_max + 1.0, &config, &[0.0]).unwrap_err();
        assert!(matches!(err, ModelError::ControlOutOfBounds { .. }));
    }

    #[test]
    fn step_matches_the_matrix_composition() {
        // step() must be the same arithmetic as F(moved)·L(r)·x plus infeed.
        let config = system_with_station(5, 2, VolumeSpan { first: 3, last: 4 }, 1.5);
        let masses = [0.3, 2.0, 0.0, 1.2, 0.7, 4.0, 0.1, 0.0, 2.2, 0.5];
        let state = state_of(&config, &masses, 1.75);
        let l = motion_matrix(state.speed(), &config).unwrap();
        let moved_vec = &l * state.as_vector();
        let moved = StateVector::from_parts(config.m, config.n(), moved_vec.clone());
        let f = sort_matrix(&moved, &config);
        let mut expect = &f * &moved_vec;
        expect[0] += 0.4; // infeed, material 0
        expect[5] += 0.0;
        expect[10] = (1.75f64 + 0.25).clamp(config.r_min, config.r_max);

        let outcome = step(&state, 0.25, &config, &[0.4, 0.0]).unwrap();
        for k in 0..config.state_len() {
            assert_abs_diff_eq!(outcome.next.as_slice()[k], expect[k], epsilon = 1e-12);
        }
    }

    #[test]
    fn mass_balance_holds_with_fractional_speed_and_station() {
        let config = system_with_station(4, 1, VolumeSpan { first: 2, last: 3 }, 0.8);
        let state = state_of(&config, &[1.0, 2.0, 3.0, 4.0], 1.5);
        let before = state.total_material(0).unwrap();
        let outcome = step(&state, 0.0, &config, &[0.7]).unwrap();
        let after = outcome.next.total_material(0).unwrap();
        assert_abs_diff_eq!(
            after + outcome.picked[0] + outcome.exited[0],
            before + 0.7,
            epsilon = 1e-9
        );
    }
}
