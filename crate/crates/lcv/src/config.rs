//! System description and run configuration.
//!
//! A single JSON document describes one sorting line and everything a run
//! needs: the `system` block (belt geometry, speed and control bounds),
//! `materials`, `stations`, and optional `camera`, `noise`, `mpc`, and
//! `infeed` blocks that fall back to documented defaults. Parsing reports
//! the JSON path of the offending key; validation cross-checks the blocks
//! against each other (spans on the belt, dense material ids, salvage price
//! below every material price, …).
//!
//! A parsed [`Config`] has every default materialized, so its canonical JSON
//! serialization — and the short [`Config::hash`] derived from it — depends
//! only on the effective configuration, not on formatting or key order of
//! the source document.

use std::fmt;
use std::ops::RangeInclusive;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::control::MpcConfig;
use crate::estimate::{CameraModel, NoiseConfig};
use crate::sim::{InfeedModel, MaterialInfeed, PlantNoise};

/// An inclusive run of volume indices, written `[first, last]` in JSON.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "(usize, usize)", into = "(usize, usize)")]
pub struct VolumeSpan {
    pub first: usize,
    pub last: usize,
}

impl VolumeSpan {
    pub fn range(&self) -> RangeInclusive<usize> {
        self.first..=self.last
    }

    /// Number of volumes covered (spans are never empty once validated).
    pub fn len(&self) -> usize {
        self.last.saturating_sub(self.first) + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

impl From<(usize, usize)> for VolumeSpan {
    fn from((first, last): (usize, usize)) -> Self {
        Self { first, last }
    }
}

impl From<VolumeSpan> for (usize, usize) {
    fn from(span: VolumeSpan) -> Self {
        (span.first, span.last)
    }
}

impl fmt::Display for VolumeSpan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {}]", self.first, self.last)
    }
}

/// One material class on the line.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MaterialSpec {
    /// Dense index, equal to the material's position in the list.
    pub id: usize,
    pub name: String,
    /// Value per unit mass when successfully sorted.
    pub price: f64,
}

/// A sorting station: robots picking one material over a span of volumes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SortStation {
    /// Index of the material this station picks.
    pub material: usize,
    pub span: VolumeSpan,
    /// Maximum mass the station can remove per step.
    pub pick_cap: f64,
}

/// The physical line: belt discretization, materials, stations, and the
/// speed/control envelope.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SystemConfig {
    /// Number of control volumes along the belt.
    pub m: usize,
    pub materials: Vec<MaterialSpec>,
    pub stations: Vec<SortStation>,
    /// Belt speed bounds, in volumes per step.
    pub r_min: f64,
    pub r_max: f64,
    /// Per-step speed change bounds.
    pub u_min: f64,
    pub u_max: f64,
    /// Step duration in seconds (bookkeeping only; dynamics are per step).
    pub dt: f64,
}

impl SystemConfig {
    /// Number of materials.
    pub fn n(&self) -> usize {
        self.materials.len()
    }

    /// Length of the flat state vector: `n·m` masses plus the speed.
    pub fn state_len(&self) -> usize {
        self.n() * self.m + 1
    }

    /// The station assigned to a material, if any.
    pub fn station_for(&self, material: usize) -> Option<&SortStation> {
        self.stations.iter().find(|s| s.material == material)
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    /// The document is not parseable JSON at all.
    #[error("{0}")]
    Parse(String),
    /// A specific key is missing, malformed, or inconsistent.
    #[error("{key}: {message}")]
    Invalid { key: String, message: String },
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl ConfigError {
    pub(crate) fn invalid(key: impl Into<String>, message: impl Into<String>) -> Self {
        ConfigError::Invalid {
            key: key.into(),
            message: message.into(),
        }
    }
}

/// Everything one run needs, with defaults materialized.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Config {
    pub system: SystemConfig,
    pub camera: CameraModel,
    pub noise: NoiseConfig,
    pub plant: PlantNoise,
    pub mpc: MpcConfig,
    pub infeed: InfeedModel,
    /// Steps per run.
    pub steps: usize,
    /// Belt speed at the start of a run.
    pub initial_speed: f64,
    /// Feed the filter the exact viewport masses instead of synthetic
    /// detections (an idealized camera, useful for controller studies).
    pub perfect_vision: bool,
}

fn default_lambda(m: usize) -> usize {
    m.min(5)
}

impl Config {
    /// A configuration with every non-system block at its defaults.
    pub fn new(system: SystemConfig) -> Config {
        let n = system.n();
        Config {
            camera: CameraModel {
                first_volume: 0,
                lambda: default_lambda(system.m),
                image_width: 640.0,
                image_height: 480.0,
                mass_per_object: 1.0,
            },
            noise: NoiseConfig::default(),
            plant: PlantNoise::default(),
            mpc: MpcConfig::default(),
            infeed: InfeedModel {
                seed: 0,
                materials: vec![MaterialInfeed::default(); n],
                scripted: None,
            },
            steps: 3600,
            initial_speed: system.r_min,
            perfect_vision: false,
            system,
        }
    }

    /// Parses and validates a configuration document.
    pub fn from_json_str(text: &str) -> Result<Config, ConfigError> {
        let mut deserializer = serde_json::Deserializer::from_str(text);
        let raw: RawDoc = serde_path_to_error::deserialize(&mut deserializer)
            .map_err(render_parse_error)?;
        let config = assemble(raw)?;
        config.validate()?;
        Ok(config)
    }

    /// Reads and parses a configuration file.
    pub fn load(path: &Path) -> Result<Config, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Config::from_json_str(&text)
    }

    /// The materialized configuration as deterministic JSON: fixed key
    /// order, no formatting freedom, defaults filled in.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    /// First 8 bytes of the SHA-256 of [`Config::canonical_json`], in hex —
    /// the identity stamped on every output this configuration produces.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.canonical_json().as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Cross-checks every block; errors name the offending JSON key.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let sys = &self.system;
        let n = sys.n();
        if sys.m == 0 {
            return Err(ConfigError::invalid("system.m", "at least one control volume is required"));
        }
        if n == 0 {
            return Err(ConfigError::invalid("materials", "at least one material is required"));
        }
        for (i, mat) in sys.materials.iter().enumerate() {
            if mat.id != i {
                return Err(ConfigError::invalid(
                    format!("materials[{i}].id"),
                    format!("ids must be dense and positional (expected {i}, got {})", mat.id),
                ));
            }
            if !mat.price.is_finite() || mat.price < 0.0 {
                return Err(ConfigError::invalid(
                    format!("materials[{i}].price"),
                    "price must be finite and non-negative",
                ));
            }
        }
        if !(sys.r_min >= 0.0) {
            return Err(ConfigError::invalid("system.r_min", "minimum speed must be ≥ 0"));
        }
        if !(sys.r_max >= sys.r_min) {
            return Err(ConfigError::invalid("system.r_max", "maximum speed must be ≥ r_min"));
        }
        if sys.r_max > sys.m as f64 {
            return Err(ConfigError::invalid(
                "system.r_max",
                format!(
                    "maximum speed {} exceeds the belt length {} (volumes per step)",
                    sys.r_max, sys.m
                ),
            ));
        }
        if !(sys.u_min <= 0.0 && sys.u_max >= 0.0) {
            return Err(ConfigError::invalid(
                "system.u_min",
                "the control interval must contain 0 (u_min ≤ 0 ≤ u_max)",
            ));
        }
        if !(sys.dt > 0.0) {
            return Err(ConfigError::invalid("system.dt", "step duration must be positive"));
        }
        if self.steps == 0 {
            return Err(ConfigError::invalid("system.steps", "a run needs at least one step"));
        }
        if self.initial_speed < sys.r_min || self.initial_speed > sys.r_max {
            return Err(ConfigError::invalid(
                "system.initial_speed",
                format!(
                    "initial speed {} outside [{}, {}]",
                    self.initial_speed, sys.r_min, sys.r_max
                ),
            ));
        }

        let mut stationed = vec![false; n];
        for (k, station) in sys.stations.iter().enumerate() {
            if station.material >= n {
                return Err(ConfigError::invalid(
                    format!("stations[{k}].material"),
                    format!("material index {} out of range (n = {n})", station.material),
                ));
            }
            if stationed[station.material] {
                return Err(ConfigError::invalid(
                    format!("stations[{k}].material"),
                    format!("material {} already has a station", station.material),
                ));
            }
            stationed[station.material] = true;
            if station.span.first > station.span.last || station.span.last >= sys.m {
                return Err(ConfigError::invalid(
                    format!("stations[{k}].span"),
                    format!(
                        "span {} must satisfy first ≤ last < m = {}",
                        station.span, sys.m
                    ),
                ));
            }
            if !(station.pick_cap >= 0.0) {
                return Err(ConfigError::invalid(
                    format!("stations[{k}].pick_cap"),
                    "pick capacity must be ≥ 0",
                ));
            }
        }

        let cam = &self.camera;
        if cam.first_volume + cam.lambda > sys.m {
            return Err(ConfigError::invalid(
                "camera.lambda",
                format!(
                    "viewport [{}, {}) extends past the last volume {}",
                    cam.first_volume,
                    cam.first_volume + cam.lambda,
                    sys.m
                ),
            ));
        }
        if !(cam.image_width > 0.0 && cam.image_height > 0.0) {
            return Err(ConfigError::invalid("camera.image_width", "image dimensions must be positive"));
        }
        if !(cam.mass_per_object > 0.0) {
            return Err(ConfigError::invalid(
                "camera.mass_per_object",
                "mass per detected object must be positive",
            ));
        }

        if !(self.noise.q_mass >= 0.0 && self.noise.q_speed >= 0.0) {
            return Err(ConfigError::invalid("noise.q_mass", "process noise must be ≥ 0"));
        }
        if !(self.noise.r_meas > 0.0) {
            return Err(ConfigError::invalid("noise.r_meas", "measurement noise must be positive"));
        }
        let plant = &self.plant;
        if !(0.0..=1.0).contains(&plant.slip_prob) {
            return Err(ConfigError::invalid("noise.slip_prob", "slip probability must be in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&plant.detector_miss_rate) {
            return Err(ConfigError::invalid(
                "noise.detector_miss_rate",
                "miss rate must be in [0, 1]",
            ));
        }
        if !(plant.pick_noise >= 0.0) {
            return Err(ConfigError::invalid("noise.pick_noise", "pick noise must be ≥ 0"));
        }
        if !(plant.bbox_jitter_px >= 0.0) {
            return Err(ConfigError::invalid("noise.bbox_jitter_px", "bbox jitter must be ≥ 0"));
        }

        let mpc = &self.mpc;
        if let Some(t) = mpc.horizon {
            if t < 2 {
                return Err(ConfigError::invalid("mpc.horizon", format!("horizon must be ≥ 2, got {t}")));
            }
        }
        let min_price = sys
            .materials
            .iter()
            .map(|m| m.price)
            .fold(f64::INFINITY, f64::min);
        if !(mpc.mixed_price >= 0.0) || mpc.mixed_price > min_price {
            return Err(ConfigError::invalid(
                "mpc.mixed_price",
                format!(
                    "salvage price must sit in [0, {min_price}] (the cheapest material price)"
                ),
            ));
        }
        if !(mpc.fd_epsilon > 0.0) {
            return Err(ConfigError::invalid("mpc.fd_epsilon", "difference width must be positive"));
        }
        if !(mpc.armijo_c1 > 0.0 && mpc.armijo_c1 < 1.0) {
            return Err(ConfigError::invalid("mpc.armijo_c1", "Armijo constant must be in (0, 1)"));
        }
        if !(mpc.backtrack_factor > 0.0 && mpc.backtrack_factor < 1.0) {
            return Err(ConfigError::invalid(
                "mpc.backtrack_factor",
                "backtrack factor must be in (0, 1)",
            ));
        }
        if mpc.max_backtracks == 0 {
            return Err(ConfigError::invalid("mpc.max_backtracks", "at least one backtrack is required"));
        }
        if !(mpc.grad_tol >= 0.0) {
            return Err(ConfigError::invalid("mpc.grad_tol", "gradient tolerance must be ≥ 0"));
        }

        let infeed = &self.infeed;
        if infeed.materials.len() != n {
            return Err(ConfigError::invalid(
                "infeed.materials",
                format!("expected {n} entries (one per material), got {}", infeed.materials.len()),
            ));
        }
        for (i, mat) in infeed.materials.iter().enumerate() {
            if !(mat.mean_rate >= 0.0) {
                return Err(ConfigError::invalid(
                    format!("infeed.materials[{i}].mean_rate"),
                    "mean rate must be ≥ 0",
                ));
            }
            if !(mat.rate_dispersion > 0.0) {
                return Err(ConfigError::invalid(
                    format!("infeed.materials[{i}].rate_dispersion"),
                    "gamma shape must be positive",
                ));
            }
            if !(mat.regime_mean_duration >= 1.0) {
                return Err(ConfigError::invalid(
                    format!("infeed.materials[{i}].regime_mean_duration"),
                    "mean regime duration must be ≥ 1 step",
                ));
            }
        }
        if let Some(script) = &infeed.scripted {
            for (t, row) in script.iter().enumerate() {
                if row.len() != n {
                    return Err(ConfigError::invalid(
                        format!("infeed.scripted[{t}]"),
                        format!("expected {n} entries, got {}", row.len()),
                    ));
                }
                if row.iter().any(|&x| !(x >= 0.0)) {
                    return Err(ConfigError::invalid(
                        format!("infeed.scripted[{t}]"),
                        "scripted masses must be ≥ 0",
                    ));
                }
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Raw document shapes (what the JSON file actually contains).

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDoc {
    system: RawSystem,
    materials: Vec<RawMaterial>,
    #[serde(default)]
    stations: Vec<SortStation>,
    #[serde(default)]
    camera: Option<RawCamera>,
    #[serde(default)]
    noise: Option<RawNoise>,
    #[serde(default)]
    mpc: Option<MpcConfig>,
    #[serde(default)]
    infeed: Option<InfeedModel>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSystem {
    m: usize,
    r_min: f64,
    r_max: f64,
    u_min: f64,
    u_max: f64,
    #[serde(default = "default_dt")]
    dt: f64,
    #[serde(default = "default_steps")]
    steps: usize,
    #[serde(default)]
    initial_speed: Option<f64>,
}

fn default_dt() -> f64 {
    1.0
}

fn default_steps() -> usize {
    3600
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawMaterial {
    /// Optional; defaults to the position in the list.
    #[serde(default)]
    id: Option<usize>,
    name: String,
    price: f64,
}

#[derive(Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
struct RawCamera {
    first_volume: usize,
    lambda: Option<usize>,
    image_width: Option<f64>,
    image_height: Option<f64>,
    mass_per_object: Option<f64>,
    perfect_vision: bool,
}

/// One JSON block covering filter noise and plant imperfections.
#[derive(Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
struct RawNoise {
    q_mass: Option<f64>,
    q_speed: Option<f64>,
    r_meas: Option<f64>,
    slip_prob: Option<f64>,
    pick_noise: Option<f64>,
    detector_miss_rate: Option<f64>,
    bbox_jitter_px: Option<f64>,
}

fn assemble(raw: RawDoc) -> Result<Config, ConfigError> {
    let materials: Vec<MaterialSpec> = raw
        .materials
        .into_iter()
        .enumerate()
        .map(|(i, mat)| MaterialSpec {
            id: mat.id.unwrap_or(i),
            name: mat.name,
            price: mat.price,
        })
        .collect();
    let n = materials.len();
    let system = SystemConfig {
        m: raw.system.m,
        materials,
        stations: raw.stations,
        r_min: raw.system.r_min,
        r_max: raw.system.r_max,
        u_min: raw.system.u_min,
        u_max: raw.system.u_max,
        dt: raw.system.dt,
    };

    let raw_camera = raw.camera.unwrap_or_default();
    let camera = CameraModel {
        first_volume: raw_camera.first_volume,
        lambda: raw_camera.lambda.unwrap_or_else(|| default_lambda(system.m)),
        image_width: raw_camera.image_width.unwrap_or(640.0),
        image_height: raw_camera.image_height.unwrap_or(480.0),
        mass_per_object: raw_camera.mass_per_object.unwrap_or(1.0),
    };

    let raw_noise = raw.noise.unwrap_or_default();
    let defaults = NoiseConfig::default();
    let noise = NoiseConfig {
        q_mass: raw_noise.q_mass.unwrap_or(defaults.q_mass),
        q_speed: raw_noise.q_speed.unwrap_or(defaults.q_speed),
        r_meas: raw_noise.r_meas.unwrap_or(defaults.r_meas),
    };
    let plant = PlantNoise {
        slip_prob: raw_noise.slip_prob.unwrap_or(0.0),
        pick_noise: raw_noise.pick_noise.unwrap_or(0.0),
        detector_miss_rate: raw_noise.detector_miss_rate.unwrap_or(0.0),
        bbox_jitter_px: raw_noise.bbox_jitter_px.unwrap_or(0.0),
    };

    let mut infeed = raw.infeed.unwrap_or_default();
    if infeed.materials.is_empty() {
        infeed.materials = vec![MaterialInfeed::default(); n];
    }

    let initial_speed = raw.system.initial_speed.unwrap_or(system.r_min);
    Ok(Config {
        camera,
        noise,
        plant,
        mpc: raw.mpc.unwrap_or_default(),
        infeed,
        steps: raw.system.steps,
        initial_speed,
        perfect_vision: raw_camera.perfect_vision,
        system,
    })
}

fn render_parse_error(err: serde_path_to_error::Error<serde_json::Error>) -> ConfigError {
    let path = err.path().to_string();
    let inner = err.into_inner();
    let syntactic = matches!(
        inner.classify(),
        serde_json::error::Category::Syntax | serde_json::error::Category::Eof
    );
    let message = inner.to_string();
    if syntactic {
        return ConfigError::Parse(message);
    }
    if let Some(rest) = message.strip_prefix("missing field `") {
        if let Some(field) = rest.split('`').next() {
            let key = if path == "." {
                field.to_string()
            } else {
                format!("{path}.{field}")
            };
            return ConfigError::Invalid {
                key,
                message: "missing required key".to_string(),
            };
        }
    }
    if path == "." {
        ConfigError::Parse(message)
    } else {
        ConfigError::Invalid { key: path, message }
    }
}
