//! Training environment: the estimator's action is the disturbance mean fed
//! to the tracking controller, which closes the loop on the true plant.

use nalgebra::{DVector, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{agent_state, expand_prediction, HarnessError, ReferenceConfig, AGENT_STATE_DIM};
use crate::quad_dynamics::{step_rk4, PhysicalParams, QuadState, DISTURBANCE_DIM, STATE_DIM};
use crate::quadred::{self, EnvStep, Environment, QuadredAgent, QuadredConfig, QuadredError, TrainReport, TrainSettings};
use crate::sadf_smpc::{SmpcConfig, TrackingController};
use crate::wind::{aero_force, measured_wind, sample_residual, WindScenario, DEFAULT_RESIDUAL_BOUND};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingScenario {
    /// Horizontal aerodynamic components are drawn from `[-force_range, force_range]`.
    pub force_range: f64,
    /// Residual standard deviation, m/s^2.
    pub noise_std: f64,
    pub residual_bound: f64,
    pub measurement_noise: f64,
    pub episode_steps: usize,
    /// Number of piecewise-constant blocks in the predicted sequence.
    pub action_blocks: usize,
    /// Initial position offsets are drawn from `[-initial_offset, initial_offset]`.
    pub initial_offset: f64,
    /// Per-step rewards are clipped from below at this value.
    pub reward_floor: f64,
    pub reference: ReferenceConfig,
}

impl Default for TrainingScenario {
    fn default() -> Self {
        Self {
            force_range: DEFAULT_RESIDUAL_BOUND,
            noise_std: 0.3,
            residual_bound: DEFAULT_RESIDUAL_BOUND,
            measurement_noise: 0.1,
            episode_steps: 100,
            action_blocks: 1,
            initial_offset: 0.0,
            reward_floor: -1.0,
            reference: ReferenceConfig::default(),
        }
    }
}

impl TrainingScenario {
    pub fn validate(&self, horizon: usize) -> Result<(), HarnessError> {
        let nonneg = |v: f64| v.is_finite() && v >= 0.0;
        if !(nonneg(self.force_range) && nonneg(self.noise_std) && nonneg(self.measurement_noise) && nonneg(self.initial_offset)) {
            return Err(HarnessError::Config("training ranges and noise levels must be nonnegative".into()));
        }
        if !(self.reward_floor.is_finite() && self.reward_floor < 0.0) {
            return Err(HarnessError::Config("training.reward_floor must be finite and negative".into()));
        }
        if self.episode_steps == 0 {
            return Err(HarnessError::Config("training.episode_steps must be positive".into()));
        }
        if self.action_blocks == 0 || self.action_blocks > horizon {
            return Err(HarnessError::Config(format!(
                "training.action_blocks must lie in 1..={horizon}"
            )));
        }
        self.reference.validate(f64::INFINITY)?;
        Ok(())
    }

    pub fn action_dim(&self) -> usize {
        self.action_blocks * DISTURBANCE_DIM
    }
}

pub struct QuadrotorEnv {
    pub scenario: TrainingScenario,
    pub controller: TrackingController,
    pub wind: WindScenario,
    h1: Vec<f64>,
    h2: Vec<f64>,
    x: QuadState,
    k: usize,
    e_f_meas: Vector3<f64>,
}

impl QuadrotorEnv {
    pub fn new(scenario: TrainingScenario, smpc: SmpcConfig, params: PhysicalParams) -> Result<Self, HarnessError> {
        scenario.validate(smpc.horizon)?;
        let h1 = smpc.q_diag.clone();
        let h2 = smpc.r_diag.clone();
        if h1.iter().chain(&h2).any(|h| *h <= 0.0) {
            return Err(HarnessError::Config("reward weights (smpc.q_diag, smpc.r_diag) must be positive".into()));
        }
        let controller = TrackingController::new(smpc, params)?;
        let x = scenario.reference.state(0.0);
        Ok(Self {
            scenario,
            controller,
            wind: WindScenario::default(),
            h1,
            h2,
            x,
            k: 0,
            e_f_meas: Vector3::zeros(),
        })
    }

    fn time(&self) -> f64 {
        self.k as f64 * self.controller.config.dt
    }

    pub fn state(&self) -> &QuadState {
        &self.x
    }

    fn observation(&self) -> DVector<f64> {
        agent_state(&self.x, &self.scenario.reference.state(self.time()), &self.e_f_meas)
    }

    fn env_err(e: impl std::fmt::Display) -> QuadredError {
        QuadredError::Environment(e.to_string())
    }
}

impl Environment for QuadrotorEnv {
    fn state_dim(&self) -> usize {
        AGENT_STATE_DIM
    }

    fn action_dim(&self) -> usize {
        self.scenario.action_dim()
    }

    fn reset(&mut self, rng: &mut ChaCha8Rng) -> Result<DVector<f64>, QuadredError> {
        let r = self.scenario.force_range;
        let force = if r > 0.0 {
            [rng.random_range(-r..=r), rng.random_range(-r..=r), 0.0]
        } else {
            [0.0; 3]
        };
        self.wind = WindScenario {
            noise_std: self.scenario.noise_std,
            residual_bound: self.scenario.residual_bound,
            ..WindScenario::constant(force)
        };
        self.k = 0;
        self.x = self.scenario.reference.state(0.0);
        let o = self.scenario.initial_offset;
        if o > 0.0 {
            for i in 0..3 {
                self.x.position[i] += rng.random_range(-o..=o);
            }
        }
        self.controller.reset();
        self.e_f_meas = measured_wind(&aero_force(&self.wind, 0.0), self.scenario.measurement_noise, rng);
        Ok(self.observation())
    }

    fn step(&mut self, action: &DVector<f64>, rng: &mut ChaCha8Rng) -> Result<EnvStep, QuadredError> {
        let dt = self.controller.config.dt;
        let horizon = self.controller.horizon();
        let t = self.time();
        let refs = self.scenario.reference.window(t, dt, horizon + 1);
        let w_pred = expand_prediction(action, horizon).map_err(Self::env_err)?;
        let out = self
            .controller
            .step(&self.x, &refs, &self.e_f_meas, Some(&w_pred))
            .map_err(Self::env_err)?;
        let params = self.controller.params;
        let accel = aero_force(&self.wind, t) + sample_residual(&self.wind, rng);
        self.x = step_rk4(&self.x, &out.command, &(accel * params.mass), dt, &params).map_err(Self::env_err)?;
        self.k += 1;
        self.e_f_meas = measured_wind(&aero_force(&self.wind, self.time()), self.scenario.measurement_noise, rng);
        let s = self.observation();
        let hover = params.hover_thrust();
        let du: Vec<f64> = out.command.thrust.iter().map(|t| t - hover).collect();
        let dx = s.rows(0, STATE_DIM);
        let reward = quadred::reward(dx.as_slice(), &[0.0; STATE_DIM], &du, &self.h1, &self.h2)?.max(self.scenario.reward_floor);
        Ok(EnvStep {
            state: s,
            reward,
            terminal: false,
            truncated: self.k >= self.scenario.episode_steps,
        })
    }
}

/// Train an estimator on the quadrotor environment.
pub fn train_agent(
    scenario: &TrainingScenario,
    episodes: usize,
    agent_config: QuadredConfig,
    smpc: &SmpcConfig,
    params: PhysicalParams,
    seed: u64,
) -> Result<(QuadredAgent, TrainReport), HarnessError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut env = QuadrotorEnv::new(scenario.clone(), smpc.clone(), params)?;
    let mut agent = QuadredAgent::new(AGENT_STATE_DIM, scenario.action_dim(), agent_config, &mut rng)?;
    let settings = TrainSettings {
        episodes,
        max_steps: scenario.episode_steps,
    };
    let report = quadred::train(&mut agent, &mut env, &settings, &mut rng)?;
    Ok((agent, report))
}
