//! The flat belt-state vector and the per-step mass accounting that goes
//! with it.

use nalgebra::DVector;

use crate::config::SystemConfig;
use crate::dynamics::ModelError;

/// Full system state: for each material, a mass per control volume, plus the
/// belt speed as the final element.
///
/// Layout: element `i·m + j` holds the mass of material `i` in volume `j`
/// (volume 0 is the infeed end, volume `m−1` the discharge end); element
/// `n·m` is the belt speed in volumes per timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct StateVector {
    m: usize,
    n: usize,
    data: DVector<f64>,
}

impl StateVector {
    /// An empty belt at the slowest allowed speed.
    pub fn empty(config: &SystemConfig) -> Self {
        let mut data = DVector::zeros(config.state_len());
        data[config.state_len() - 1] = config.r_min;
        Self {
            m: config.m,
            n: config.n(),
            data,
        }
    }

    /// Builds a state from a raw flat vector, checking length, mass
    /// non-negativity, and the speed bounds.
    pub fn from_raw(data: DVector<f64>, config: &SystemConfig) -> Result<Self, ModelError> {
        if data.len() != config.state_len() {
            return Err(ModelError::DimensionMismatch {
                what: "state elements",
                expected: config.state_len(),
                got: data.len(),
            });
        }
        let nm = config.n() * config.m;
        if data.rows(0, nm).iter().any(|&x| !(x >= 0.0)) {
            return Err(ModelError::NegativeMass);
        }
        let r = data[nm];
        if !(r >= config.r_min && r <= config.r_max) {
            return Err(ModelError::InvalidSpeed {
                speed: r,
                max: config.m,
            });
        }
        Ok(Self {
            m: config.m,
            n: config.n(),
            data,
        })
    }

    /// Internal constructor for values whose invariants the caller upholds.
    pub(crate) fn from_parts(m: usize, n: usize, data: DVector<f64>) -> Self {
        debug_assert_eq!(data.len(), n * m + 1);
        Self { m, n, data }
    }

    pub fn volumes(&self) -> usize {
        self.m
    }

    pub fn material_count(&self) -> usize {
        self.n
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Mass of `material` in control volume `volume`.
    ///
    /// Panics when either index is out of range.
    pub fn mass(&self, material: usize, volume: usize) -> f64 {
        assert!(material < self.n && volume < self.m, "index out of range");
        self.data[material * self.m + volume]
    }

    /// Overwrites the mass of `material` in `volume`.
    ///
    /// Panics when an index is out of range or `mass` is negative.
    pub fn set_mass(&mut self, material: usize, volume: usize, mass: f64) {
        assert!(material < self.n && volume < self.m, "index out of range");
        assert!(mass >= 0.0, "mass must be non-negative");
        self.data[material * self.m + volume] = mass;
    }

    /// The per-volume masses of one material as a contiguous slice.
    pub fn block(&self, material: usize) -> &[f64] {
        &self.data.as_slice()[material * self.m..(material + 1) * self.m]
    }

    /// Current belt speed in volumes per timestep.
    pub fn speed(&self) -> f64 {
        self.data[self.n * self.m]
    }

    pub(crate) fn set_speed(&mut self, r: f64) {
        let idx = self.n * self.m;
        self.data[idx] = r;
    }

    /// Total mass of one material over the whole belt.
    pub fn total_material(&self, material: usize) -> Result<f64, ModelError> {
        if material >= self.n {
            return Err(ModelError::MaterialOutOfRange {
                material,
                n: self.n,
            });
        }
        Ok(self.block(material).iter().sum())
    }

    pub fn as_slice(&self) -> &[f64] {
        self.data.as_slice()
    }

    pub fn as_vector(&self) -> &DVector<f64> {
        &self.data
    }
}

/// What one transition step did to the system, with explicit accounting of
/// the mass each station removed (`picked`) and the mass that ran off the
/// discharge end unsorted (`exited`).
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub next: StateVector,
    /// Per material: mass removed by its sort station this step.
    pub picked: Vec<f64>,
    /// Per material: mass that left the last volume unsorted this step.
    pub exited: Vec<f64>,
}
