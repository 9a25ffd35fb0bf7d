//! Vision-measurement binning and the Kalman filter over the belt state.
//!
//! An object detector watches `lambda` consecutive control volumes through a
//! fixed camera. Each detection's bounding box is converted into fractional
//! per-volume counts by area overlap ([`bin_detections`]); scaled by the
//! average mass per detected object, those become a sparse measurement of
//! the belt state. The filter alternates a model-based [`predict`] (the
//! one-step transition, with its state-dependent operator frozen at the
//! current mean) and a standard Kalman [`update`] in Joseph form.
//!
//! The transition operator `A = F(X̂)·L(r̂)` has at most two nonzero entries
//! per row (the two neighboring integer shifts scaled by the separation
//! parameter), so the covariance propagation `A·P·Aᵀ` is computed from that
//! structure directly instead of through dense matrix products.

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::SystemConfig;
use crate::dynamics::{separation_params, shift_weights, step, ModelError};
use crate::state::StateVector;

/// One object detection in image coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    /// Timestep the detection belongs to.
    pub step: usize,
    /// Material class reported by the detector.
    pub material: usize,
    /// Axis-aligned box `[x0, y0, x1, y1]` in pixels.
    pub bbox: [f64; 4],
}

/// Camera geometry: which volumes are visible and how image pixels map onto
/// them. The image x-axis spans exactly the `lambda` visible volumes
/// linearly; `mass_per_object` converts detection counts into mass units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub first_volume: usize,
    pub lambda: usize,
    pub image_width: f64,
    pub image_height: f64,
    pub mass_per_object: f64,
}

impl CameraModel {
    /// Pixel width of one control volume's band in the image.
    pub fn band_width(&self) -> f64 {
        self.image_width / self.lambda as f64
    }

    /// Pixel x-range of visible slot `v` (0-based within the viewport).
    pub fn band(&self, v: usize) -> (f64, f64) {
        let w = self.band_width();
        (v as f64 * w, (v + 1) as f64 * w)
    }
}

/// Fractional per-volume detection counts, material-major then volume:
/// entry `i·lambda + v` counts material `i` in the `v`-th visible volume.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementVector {
    pub z: DVector<f64>,
}

impl MeasurementVector {
    pub fn len(&self) -> usize {
        self.z.len()
    }

    pub fn is_empty(&self) -> bool {
        self.z.is_empty()
    }
}

/// Filter noise intensities: process noise per mass element and for the
/// speed element, and measurement variance per measurement element.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    pub q_mass: f64,
    pub q_speed: f64,
    pub r_meas: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            q_mass: 0.01,
            q_speed: 1e-6,
            r_meas: 0.25,
        }
    }
}

/// Mean and covariance of the belt-state estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterState {
    pub mean: StateVector,
    pub cov: DMatrix<f64>,
}

impl FilterState {
    /// Prior for a run that starts with an empty belt at a known speed:
    /// unit variance on every mass element, exact (zero-variance) speed.
    pub fn initial(config: &SystemConfig, speed: f64) -> Result<Self, ModelError> {
        let mut data = DVector::zeros(config.state_len());
        data[config.state_len() - 1] = speed;
        let mean = StateVector::from_raw(data, config)?;
        let mut cov = DMatrix::identity(config.state_len(), config.state_len());
        cov[(config.state_len() - 1, config.state_len() - 1)] = 0.0;
        Ok(Self { mean, cov })
    }
}

#[derive(Debug, Error)]
pub enum EstimateError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("detections span multiple timesteps ({first} and {other})")]
    MixedSteps { first: usize, other: usize },
    #[error("detection {index}: bbox corners must satisfy x0<x1 and y0<y1")]
    BadBbox { index: usize },
    #[error("detection {index}: material {material} out of range (n={n})")]
    BadMaterial {
        index: usize,
        material: usize,
        n: usize,
    },
    #[error("expected measurement of length {expected}, got {got}")]
    MeasurementLength { expected: usize, got: usize },
    #[error("{what}: expected {expected} entries, got {got}")]
    MisalignedStreams {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("detection at step {step} lies beyond the {steps}-step control stream")]
    DetectionBeyondRun { step: usize, steps: usize },
    #[error("innovation covariance not positive definite even after regularization")]
    SingularInnovation,
}

/// Bins one timestep's detections into fractional per-volume counts.
///
/// Each bounding box contributes, to every visible volume, the fraction of
/// its own area that overlaps that volume's pixel band — so a box fully
/// inside the viewport contributes a total of exactly 1.0, split across the
/// volumes it spans, and a box entirely outside contributes 0.
pub fn bin_detections(
    detections: &[Detection],
    camera: &CameraModel,
    config: &SystemConfig,
) -> Result<MeasurementVector, EstimateError> {
    let n = config.n();
    let mut z = DVector::zeros(n * camera.lambda);
    let mut step_seen: Option<usize> = None;
    for (index, det) in detections.iter().enumerate() {
        match step_seen {
            None => step_seen = Some(det.step),
            Some(first) if first != det.step => {
                return Err(EstimateError::MixedSteps {
                    first,
                    other: det.step,
                })
            }
            _ => {}
        }
        if det.material >= n {
            return Err(EstimateError::BadMaterial {
                index,
                material: det.material,
                n,
            });
        }
        let [x0, y0, x1, y1] = det.bbox;
        if !(x0 < x1 && y0 < y1) {
            return Err(EstimateError::BadBbox { index });
        }
        let area = (x1 - x0) * (y1 - y0);
        let overlap_y = (y1.min(camera.image_height) - y0.max(0.0)).max(0.0);
        if overlap_y == 0.0 {
            continue;
        }
        for v in 0..camera.lambda {
            let (bx0, bx1) = camera.band(v);
            let overlap_x = (x1.min(bx1) - x0.max(bx0)).max(0.0);
            if overlap_x > 0.0 {
                z[det.material * camera.lambda + v] += overlap_x * overlap_y / area;
            }
        }
    }
    Ok(MeasurementVector { z })
}

/// Bins detections and scales the counts by the camera's mass-per-object,
/// yielding a measurement in the state's mass units.
pub fn measurement_from_detections(
    detections: &[Detection],
    camera: &CameraModel,
    config: &SystemConfig,
) -> Result<MeasurementVector, EstimateError> {
    let mut meas = bin_detections(detections, camera, config)?;
    meas.z *= camera.mass_per_object;
    Ok(meas)
}

/// State indices selected by the camera: for each material, the visible
/// volumes `first_volume..first_volume+lambda`.
pub(crate) fn measured_indices(camera: &CameraModel, config: &SystemConfig) -> Vec<usize> {
    let mut idx = Vec::with_capacity(config.n() * camera.lambda);
    for i in 0..config.n() {
        for v in 0..camera.lambda {
            idx.push(i * config.m + camera.first_volume + v);
        }
    }
    idx
}

/// The one-hot selection matrix H of shape `(n·lambda) × (nm+1)`: row
/// `(i, v)` has a single 1 at state index `i·m + first_volume + v`. The
/// speed column is zero — the belt speed is never observed by the camera.
pub fn observation_matrix(camera: &CameraModel, config: &SystemConfig) -> DMatrix<f64> {
    let idx = measured_indices(camera, config);
    let mut h = DMatrix::zeros(idx.len(), config.state_len());
    for (row, &col) in idx.iter().enumerate() {
        h[(row, col)] = 1.0;
    }
    h
}

/// Sparse row structure of the frozen transition operator `A = F(X̂)·L(r̂)`:
/// at most two `(source, weight)` pairs per row, stored CSR-style.
struct TransitionRows {
    offsets: Vec<usize>,
    entries: Vec<(usize, f64)>,
}

fn transition_rows(mean: &StateVector, config: &SystemConfig) -> Result<TransitionRows, ModelError> {
    let m = config.m;
    let n = config.n();
    let dim = config.state_len();
    let (lo, hi, w_lo, w_hi) = shift_weights(mean.speed(), m)?;
    let mut p = vec![1.0; n * m];
    for station in &config.stations {
        let (_, pv) = separation_params(mean, station);
        let row = &mut p[station.material * m..(station.material + 1) * m];
        row.copy_from_slice(&pv);
    }
    let mut offsets = Vec::with_capacity(dim + 1);
    let mut entries = Vec::with_capacity(2 * dim);
    offsets.push(0);
    for i in 0..n {
        for j in 0..m {
            let pk = p[i * m + j];
            if pk != 0.0 {
                if j >= lo {
                    entries.push((i * m + j - lo, w_lo * pk));
                }
                if w_hi != 0.0 && j >= hi {
                    entries.push((i * m + j - hi, w_hi * pk));
                }
            }
            offsets.push(entries.len());
        }
    }
    entries.push((dim - 1, 1.0));
    offsets.push(entries.len());
    Ok(TransitionRows { offsets, entries })
}

/// Time update: the mean advances through the nonlinear one-step transition;
/// the covariance propagates through `A·P·Aᵀ + Q` with `A` frozen at the
/// pre-step mean and `Q = diag(q_mass…, q_speed)`.
pub fn predict(
    filter: &FilterState,
    u: f64,
    infeed_estimate: &[f64],
    config: &SystemConfig,
    noise: &NoiseConfig,
) -> Result<FilterState, EstimateError> {
    let dim = config.state_len();
    let rows = transition_rows(&filter.mean, config)?;
    let outcome = step(&filter.mean, u, config, infeed_estimate)?;

    // D = P·Aᵀ, built column by column: D[:,k] = Σ_src w·P[:,src].
    let mut d = DMatrix::zeros(dim, dim);
    for k in 0..dim {
        let mut col = d.column_mut(k);
        for &(src, w) in &rows.entries[rows.offsets[k]..rows.offsets[k + 1]] {
            col.axpy(w, &filter.cov.column(src), 1.0);
        }
    }
    // P' = A·D + Q, then symmetrized against floating-point drift.
    let mut next = DMatrix::zeros(dim, dim);
    for j in 0..dim {
        let dcol = d.column(j);
        for k in 0..dim {
            let mut acc = 0.0;
            for &(src, w) in &rows.entries[rows.offsets[k]..rows.offsets[k + 1]] {
                acc += w * dcol[src];
            }
            next[(k, j)] = acc;
        }
    }
    for k in 0..dim - 1 {
        next[(k, k)] += noise.q_mass;
    }
    next[(dim - 1, dim - 1)] += noise.q_speed;
    for j in 0..dim {
        for k in 0..j {
            let s = 0.5 * (next[(k, j)] + next[(j, k)]);
            next[(k, j)] = s;
            next[(j, k)] = s;
        }
    }
    Ok(FilterState {
        mean: outcome.next,
        cov: next,
    })
}

/// Measurement update in Joseph form with `R = r_meas·I`; negative mass
/// means are clamped to zero afterward. A zero-length measurement is a
/// no-op. A numerically singular innovation covariance is regularized once
/// by `+1e−9·I`.
pub fn update(
    filter: &FilterState,
    z: &MeasurementVector,
    camera: &CameraModel,
    config: &SystemConfig,
    noise: &NoiseConfig,
) -> Result<FilterState, EstimateError> {
    let idx = measured_indices(camera, config);
    let k = idx.len();
    if z.z.len() != k {
        return Err(EstimateError::MeasurementLength {
            expected: k,
            got: z.z.len(),
        });
    }
    if k == 0 {
        return Ok(filter.clone());
    }
    let dim = config.state_len();
    let p = &filter.cov;

    let mut p_meas = DMatrix::zeros(k, k); // P[idx, idx]
    for (a, &ia) in idx.iter().enumerate() {
        for (b, &ib) in idx.iter().enumerate() {
            p_meas[(a, b)] = p[(ia, ib)];
        }
    }
    let mut p_cols = DMatrix::zeros(dim, k); // P[:, idx]
    for (b, &ib) in idx.iter().enumerate() {
        p_cols.column_mut(b).copy_from(&p.column(ib));
    }

    let mut s = p_meas.clone();
    for a in 0..k {
        s[(a, a)] += noise.r_meas;
    }
    let chol = match Cholesky::new(s.clone()) {
        Some(c) => c,
        None => {
            for a in 0..k {
                s[(a, a)] += 1e-9;
            }
            Cholesky::new(s).ok_or(EstimateError::SingularInnovation)?
        }
    };
    // K = P[:,idx]·S⁻¹, computed as (S⁻¹·P[:,idx]ᵀ)ᵀ since S is symmetric.
    let k_gain = chol.solve(&p_cols.transpose()).transpose();

    let mut innovation = DVector::zeros(k);
    for (a, &ia) in idx.iter().enumerate() {
        innovation[a] = z.z[a] - filter.mean.as_slice()[ia];
    }
    let mut mean_data = filter.mean.as_vector() + &k_gain * &innovation;
    for x in mean_data.iter_mut().take(dim - 1) {
        if *x < 0.0 {
            *x = 0.0;
        }
    }

    // Joseph form: P' = (I−KH)·P·(I−KH)ᵀ + K·R·Kᵀ, using H's selection
    // structure: (I−KH)·P = P − K·P[idx,:].
    let t = p - &k_gain * p_cols.transpose();
    let t_cols = &p_cols - &k_gain * &p_meas; // T[:, idx]
    let mut next = t - t_cols * k_gain.transpose() + (&k_gain * k_gain.transpose()) * noise.r_meas;
    for j in 0..dim {
        for i in 0..j {
            let v = 0.5 * (next[(i, j)] + next[(j, i)]);
            next[(i, j)] = v;
            next[(j, i)] = v;
        }
    }
    Ok(FilterState {
        mean: StateVector::from_parts(config.m, config.n(), mean_data),
        cov: next,
    })
}

/// Replays a whole detection stream through the filter: one [`predict`] per
/// control, followed by an [`update`] whenever that step produced
/// detections. Detections tagged step `t` are fused after the `t`-th
/// predict; step-0 detections update the prior before any prediction.
/// Returns one [`FilterState`] per control, after that step's update.
pub fn run_filter(
    initial: &FilterState,
    detections: &[Detection],
    controls: &[f64],
    infeed_estimates: Option<&[Vec<f64>]>,
    camera: &CameraModel,
    config: &SystemConfig,
    noise: &NoiseConfig,
) -> Result<Vec<FilterState>, EstimateError> {
    let steps = controls.len();
    let n = config.n();
    if let Some(rows) = infeed_estimates {
        if rows.len() != steps {
            return Err(EstimateError::MisalignedStreams {
                what: "infeed estimates",
                expected: steps,
                got: rows.len(),
            });
        }
    }
    let mut buckets: Vec<Vec<Detection>> = vec![Vec::new(); steps + 1];
    for det in detections {
        if det.step > steps {
            return Err(EstimateError::DetectionBeyondRun {
                step: det.step,
                steps,
            });
        }
        buckets[det.step].push(det.clone());
    }
    let zeros = vec![0.0; n];
    let mut state = initial.clone();
    if !buckets[0].is_empty() {
        let z = measurement_from_detections(&buckets[0], camera, config)?;
        state = update(&state, &z, camera, config, noise)?;
    }
    let mut out = Vec::with_capacity(steps);
    for (t, &u) in controls.iter().enumerate() {
        let infeed = infeed_estimates.map_or(zeros.as_slice(), |rows| rows[t].as_slice());
        if infeed.len() != n {
            return Err(EstimateError::MisalignedStreams {
                what: "infeed estimate row",
                expected: n,
                got: infeed.len(),
            });
        }
        state = predict(&state, u, infeed, config, noise)?;
        if !buckets[t + 1].is_empty() {
            let z = measurement_from_detections(&buckets[t + 1], camera, config)?;
            state = update(&state, &z, camera, config, noise)?;
        }
        out.push(state.clone());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::test_support::{small_system, system_with_station};
    use crate::config::VolumeSpan;
    use crate::dynamics::{motion_matrix, sort_matrix};
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn camera(first: usize, lambda: usize) -> CameraModel {
        CameraModel {
            first_volume: first,
            lambda,
            image_width: 100.0,
            image_height: 50.0,
            mass_per_object: 1.0,
        }
    }

    fn det(material: usize, bbox: [f64; 4]) -> Detection {
        Detection {
            step: 1,
            material,
            bbox,
        }
    }

    #[test]
    fn fully_contained_box_contributes_one() {
        let config = small_system(4, 1);
        let cam = camera(0, 4); // bands of 25 px
        let z = bin_detections(&[det(0, [26.0, 10.0, 48.0, 20.0])], &cam, &config)
            .unwrap()
            .z;
        assert_abs_diff_eq!(z[1], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(z.sum(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn straddling_box_splits_by_area() {
        let config = small_system(2, 1);
        let cam = camera(0, 2); // bands [0,50) and [50,100)
        // 50 px wide box with 20 px in band 0 and 30 px in band 1.
        let z = bin_detections(&[det(0, [30.0, 0.0, 80.0, 50.0])], &cam, &config)
            .unwrap()
            .z;
        assert_abs_diff_eq!(z[0], 0.4, epsilon = 1e-12);
        assert_abs_diff_eq!(z[1], 0.6, epsilon = 1e-12);
    }

    #[test]
    fn detections_add_up_per_volume() {
        let config = small_system(4, 2);
        let cam = camera(0, 4);
        let z = bin_detections(
            &[det(0, [26.0, 5.0, 45.0, 15.0]), det(0, [30.0, 20.0, 49.0, 30.0])],
            &cam,
            &config,
        )
        .unwrap()
        .z;
        assert_abs_diff_eq!(z[1], 2.0, epsilon = 1e-12);
    }

    #[test]
    fn box_outside_viewport_contributes_nothing() {
        let config = small_system(2, 1);
        let cam = camera(0, 2);
        let z = bin_detections(&[det(0, [120.0, 0.0, 140.0, 10.0])], &cam, &config)
            .unwrap()
            .z;
        assert_eq!(z.sum(), 0.0);
    }

    #[test]
    fn mixed_step_stream_is_rejected() {
        let config = small_system(2, 1);
        let cam = camera(0, 2);
        let mut a = det(0, [0.0, 0.0, 10.0, 10.0]);
        a.step = 1;
        let mut b = a.clone();
        b.step = 2;
        assert!(matches!(
            bin_detections(&[a, b], &cam, &config),
            Err(EstimateError::MixedSteps { .. })
        ));
    }

    #[test]
    fn observation_matrix_selects_visible_masses() {
        let config = small_system(3, 1);
        let cam = camera(0, 3);
        let h = observation_matrix(&cam, &config);
        assert_eq!(h.nrows(), 3);
        // Identity on the mass entries, zero speed column.
        for row in 0..3 {
            for col in 0..4 {
                let expect = if row == col { 1.0 } else { 0.0 };
                assert_eq!(h[(row, col)], expect);
            }
        }

        let config2 = small_system(5, 2);
        let cam2 = camera(2, 1);
        let h2 = observation_matrix(&cam2, &config2);
        assert_eq!(h2.nrows(), 2);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = nalgebra::DVector::from_fn(config2.state_len(), |_, _| rng.random::<f64>());
        let zx = &h2 * &x;
        assert_eq!(zx[0], x[2]);
        assert_eq!(zx[1], x[5 + 2]);
    }

    #[test]
    fn scalar_update_matches_closed_form() {
        let config = small_system(1, 1);
        let cam = camera(0, 1);
        let noise = NoiseConfig {
            q_mass: 0.0,
            q_speed: 0.0,
            r_meas: 1.0,
        };
        let filter = FilterState {
            mean: StateVector::empty(&config),
            cov: DMatrix::identity(2, 2),
        };
        let z = MeasurementVector {
            z: DVector::from_vec(vec![4.0]),
        };
        let post = update(&filter, &z, &cam, &config, &noise).unwrap();
        // K = 1/(1+1) = 0.5: mean 2, Joseph variance 0.25 + 0.25 = 0.5.
        assert_abs_diff_eq!(post.mean.mass(0, 0), 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(post.cov[(0, 0)], 0.5, epsilon = 1e-12);
    }

    #[test]
    fn zero_innovation_keeps_mean_but_shrinks_covariance() {
        let config = small_system(3, 1);
        let cam = camera(0, 2);
        let noise = NoiseConfig::default();
        let mut filter = FilterState::initial(&config, 1.0).unwrap();
        filter.mean.set_mass(0, 0, 2.0);
        filter.mean.set_mass(0, 1, 1.0);
        let z = MeasurementVector {
            z: DVector::from_vec(vec![2.0, 1.0]),
        };
        let post = update(&filter, &z, &cam, &config, &noise).unwrap();
        assert_abs_diff_eq!(
            post.mean.as_vector().as_slice()[..],
            filter.mean.as_vector().as_slice()[..],
            epsilon = 1e-12
        );
        assert!(post.cov[(0, 0)] < filter.cov[(0, 0)]);
        assert!(post.cov[(1, 1)] < filter.cov[(1, 1)]);
    }

    #[test]
    fn uninformative_measurement_changes_nothing() {
        let config = small_system(3, 1);
        let cam = camera(0, 2);
        let noise = NoiseConfig {
            r_meas: 1e12,
            ..NoiseConfig::default()
        };
        let mut filter = FilterState::initial(&config, 1.0).unwrap();
        filter.mean.set_mass(0, 0, 2.0);
        let z = MeasurementVector {
            z: DVector::from_vec(vec![5.0, 5.0]),
        };
        let post = update(&filter, &z, &cam, &config, &noise).unwrap();
        assert_abs_diff_eq!(post.mean.mass(0, 0), 2.0, epsilon = 1e-6);
    }

    #[test]
    fn predict_of_empty_belt_grows_by_process_noise() {
        let config = small_system(3, 1);
        let noise = NoiseConfig {
            q_mass: 0.04,
            q_speed: 0.01,
            r_meas: 1.0,
        };
        let filter = FilterState {
            mean: StateVector::empty(&config),
            cov: DMatrix::zeros(4, 4),
        };
        let post = predict(&filter, 0.0, &[0.0], &config, &noise).unwrap();
        assert_eq!(post.mean.total_material(0).unwrap(), 0.0);
        for k in 0..3 {
            assert_abs_diff_eq!(post.cov[(k, k)], 0.04, epsilon = 1e-15);
        }
        assert_abs_diff_eq!(post.cov[(3, 3)], 0.01, epsilon = 1e-15);
    }

    #[test]
    fn predict_shifts_an_identity_covariance() {
        // With no stations and integer speed 1, A is the pure shift, so
        // A·I·Aᵀ has ones at (1,1) and (2,2) and an empty first row/column.
        let config = small_system(3, 1);
        let noise = NoiseConfig {
            q_mass: 0.0,
            q_speed: 0.0,
            r_meas: 1.0,
        };
        let mut data = DVector::zeros(4);
        data[3] = 1.0;
        let filter = FilterState {
            mean: StateVector::from_raw(data, &config).unwrap(),
            cov: DMatrix::identity(4, 4),
        };
        let post = predict(&filter, 0.0, &[0.0], &config, &noise).unwrap();
        let diag: Vec<f64> = (0..4).map(|k| post.cov[(k, k)]).collect();
        assert_eq!(diag, vec![0.0, 1.0, 1.0, 1.0]);
        assert_eq!(post.cov[(0, 1)], 0.0);
    }

    #[test]
    fn structured_propagation_matches_dense_operator_products() {
        let config = system_with_station(6, 2, VolumeSpan { first: 3, last: 4 }, 1.2);
        let noise = NoiseConfig {
            q_mass: 0.01,
            q_speed: 1e-4,
            r_meas: 1.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let dim = config.state_len();
        let mut data = DVector::from_fn(dim, |_, _| rng.random::<f64>() * 2.0);
        data[dim - 1] = 1.6;
        let mean = StateVector::from_raw(data, &config).unwrap();
        let half = DMatrix::from_fn(dim, dim, |_, _| rng.random::<f64>() - 0.5);
        let cov = &half * half.transpose();
        let filter = FilterState {
            mean: mean.clone(),
            cov: cov.clone(),
        };

        let post = predict(&filter, 0.1, &[0.0, 0.0], &config, &noise).unwrap();

        let a = sort_matrix(&mean, &config) * motion_matrix(mean.speed(), &config).unwrap();
        let mut expect = &a * cov * a.transpose();
        for k in 0..dim - 1 {
            expect[(k, k)] += noise.q_mass;
        }
        expect[(dim - 1, dim - 1)] += noise.q_speed;
        for i in 0..dim {
            for j in 0..dim {
                assert_abs_diff_eq!(post.cov[(i, j)], expect[(i, j)], epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn covariance_stays_symmetric_and_psd_through_updates() {
        let config = system_with_station(5, 1, VolumeSpan { first: 3, last: 4 }, 0.7);
        let cam = camera(0, 3);
        let noise = NoiseConfig::default();
        let mut filter = FilterState::initial(&config, 1.25).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for t in 0..30 {
            filter = predict(&filter, 0.0, &[rng.random::<f64>()], &config, &noise).unwrap();
            if t % 3 != 0 {
                let z = MeasurementVector {
                    z: DVector::from_fn(3, |_, _| rng.random::<f64>() * 3.0),
                };
                filter = update(&filter, &z, &cam, &config, &noise).unwrap();
            }
            let sym_err = (&filter.cov - filter.cov.transpose()).abs().max();
            assert!(sym_err <= 1e-9, "symmetry violated: {sym_err}");
            let eig = filter.cov.clone().symmetric_eigen();
            let min_eig = eig.eigenvalues.min();
            assert!(min_eig >= -1e-8, "covariance not PSD: {min_eig}");
        }
    }

    #[test]
    fn zero_noise_filter_converges_to_truth() {
        // Camera over the infeed volumes, a downstream station, wrong prior:
        // after m steps every volume is a deterministic image of measured
        // history and the estimate pins down the truth.
        let config = system_with_station(6, 1, VolumeSpan { first: 4, last: 5 }, 0.9);
        let cam = camera(0, 3);
        let noise = NoiseConfig {
            q_mass: 0.0,
            q_speed: 0.0,
            r_meas: 1e-12,
        };
        let mut truth = StateVector::from_raw(
            DVector::from_vec(vec![0.4, 1.8, 0.0, 2.5, 0.9, 1.1, 2.0]),
            &config,
        )
        .unwrap();
        // Prior: wrong masses, correct speed, unit variances.
        let mut filter = FilterState::initial(&config, 2.0).unwrap();
        filter.mean.set_mass(0, 2, 3.0);
        filter.mean.set_mass(0, 5, 1.0);

        let h = observation_matrix(&cam, &config);
        for t in 0..6 {
            let infeed = [0.5 + 0.25 * t as f64];
            truth = step(&truth, 0.0, &config, &infeed).unwrap().next;
            filter = predict(&filter, 0.0, &infeed, &config, &noise).unwrap();
            let z = MeasurementVector {
                z: &h * truth.as_vector(),
            };
            filter = update(&filter, &z, &cam, &config, &noise).unwrap();
        }
        let err = (filter.mean.as_vector() - truth.as_vector()).abs().max();
        assert!(err <= 1e-6, "estimate error too large: {err}");
    }

    #[test]
    fn run_filter_matches_manual_predict_update_sequence() {
        let config = small_system(4, 1);
        let cam = camera(0, 2);
        let noise = NoiseConfig::default();
        let initial = FilterState::initial(&config, 1.0).unwrap();
        let detections = vec![
            Detection {
                step: 1,
                material: 0,
                bbox: [10.0, 10.0, 30.0, 20.0],
            },
            Detection {
                step: 3,
                material: 0,
                bbox: [55.0, 10.0, 80.0, 20.0],
            },
        ];
        let controls = [0.0, 0.1, 0.0];
        let states =
            run_filter(&initial, &detections, &controls, None, &cam, &config, &noise).unwrap();
        assert_eq!(states.len(), 3);

        let mut manual = initial.clone();
        manual = predict(&manual, 0.0, &[0.0], &config, &noise).unwrap();
        let z1 = measurement_from_detections(&detections[0..1], &cam, &config).unwrap();
        manual = update(&manual, &z1, &cam, &config, &noise).unwrap();
        assert_eq!(states[0], manual);
        manual = predict(&manual, 0.1, &[0.0], &config, &noise).unwrap();
        assert_eq!(states[1], manual);
        manual = predict(&manual, 0.0, &[0.0], &config, &noise).unwrap();
        let z3 = measurement_from_detections(&detections[1..2], &cam, &config).unwrap();
        manual = update(&manual, &z3, &cam, &config, &noise).unwrap();
        assert_eq!(states[2], manual);
    }

    #[test]
    fn run_filter_rejects_misaligned_streams() {
        let config = small_system(4, 1);
        let cam = camera(0, 2);
        let noise = NoiseConfig::default();
        let initial = FilterState::initial(&config, 1.0).unwrap();
        let det_late = Detection {
            step: 5,
            material: 0,
            bbox: [0.0, 0.0, 10.0, 10.0],
        };
        assert!(matches!(
            run_filter(&initial, &[det_late], &[0.0], None, &cam, &config, &noise),
            Err(EstimateError::DetectionBeyondRun { .. })
        ));
        assert!(matches!(
            run_filter(&initial, &[], &[0.0, 0.0], Some(&[vec![0.0]]), &cam, &config, &noise),
            Err(EstimateError::MisalignedStreams { .. })
        ));
    }
}
