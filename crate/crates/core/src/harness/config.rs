//! TOML experiment configuration.

use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use super::{EpisodeConfig, HarnessError, TrainingScenario};
use crate::quad_dynamics::PhysicalParams;
use crate::quadred::QuadredConfig;
use crate::sadf_smpc::SmpcConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VehicleConfig {
    pub mass: f64,
    pub inertia: [f64; 3],
    pub arm_length: f64,
    pub torque_coeff: f64,
    pub max_thrust: f64,
}

impl Default for VehicleConfig {
    fn default() -> Self {
        let p = PhysicalParams::default();
        Self {
            mass: p.mass,
            inertia: p.inertia.into(),
            arm_length: p.arm_length,
            torque_coeff: p.torque_coeff,
            max_thrust: p.max_thrust,
        }
    }
}

impl VehicleConfig {
    pub fn params(&self) -> Result<PhysicalParams, HarnessError> {
        let p = PhysicalParams {
            mass: self.mass,
            inertia: Vector3::from(self.inertia),
            arm_length: self.arm_length,
            torque_coeff: self.torque_coeff,
            max_thrust: self.max_thrust,
            ..PhysicalParams::default()
        };
        p.validate()?;
        if p.hover_thrust() >= p.max_thrust {
            return Err(HarnessError::Config("vehicle.max_thrust cannot hold hover".into()));
        }
        Ok(p)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub episodes: usize,
    pub scenario: TrainingScenario,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            episodes: 300,
            scenario: TrainingScenario::default(),
        }
    }
}

/// A compared method: no checkpoint means planning with a zero mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodSpec {
    pub name: String,
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub forces: Vec<[f64; 3]>,
    pub trials: usize,
    /// Residual standard deviation in every bench scenario, m/s^2.
    pub noise_std: f64,
    pub methods: Vec<MethodSpec>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            forces: vec![[0.0, 2.0, 0.0], [-2.0, 2.0, 0.0], [-3.0, 3.0, 0.0]],
            trials: 20,
            noise_std: 0.3,
            methods: vec![
                MethodSpec {
                    name: "nominal".into(),
                    checkpoint: None,
                },
                MethodSpec {
                    name: "mean_critic".into(),
                    checkpoint: Some(PathBuf::from("mean_critic.ckpt")),
                },
                MethodSpec {
                    name: "quadred".into(),
                    checkpoint: Some(PathBuf::from("quadred.ckpt")),
                },
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HarnessConfig {
    pub seed: u64,
    pub vehicle: VehicleConfig,
    pub smpc: SmpcConfig,
    pub agent: QuadredConfig,
    pub training: TrainingConfig,
    pub episode: EpisodeConfig,
    pub bench: BenchConfig,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            vehicle: VehicleConfig::default(),
            smpc: SmpcConfig::default(),
            agent: QuadredConfig::default(),
            training: TrainingConfig::default(),
            episode: EpisodeConfig::default(),
            bench: BenchConfig::default(),
        }
    }
}

impl HarnessConfig {
    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        let cfg: Self = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text).map_err(|e| match e {
            HarnessError::Config(msg) => HarnessError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).unwrap_or_default()
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        self.vehicle.params()?;
        self.smpc
            .validate()
            .map_err(|e| HarnessError::Config(format!("smpc: {e}")))?;
        self.agent
            .validate()
            .map_err(|e| HarnessError::Config(format!("agent: {e}")))?;
        self.training.scenario.validate(self.smpc.horizon)?;
        self.episode.validate()?;
        if self.bench.trials == 0 {
            return Err(HarnessError::Config("bench.trials must be at least 1".into()));
        }
        if self.bench.forces.iter().flatten().any(|f| !f.is_finite()) {
            return Err(HarnessError::Config("bench.forces must be finite".into()));
        }
        if !(self.bench.noise_std >= 0.0 && self.bench.noise_std.is_finite()) {
            return Err(HarnessError::Config("bench.noise_std must be nonnegative".into()));
        }
        Ok(())
    }
}
