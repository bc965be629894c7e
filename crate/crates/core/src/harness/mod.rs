//! Experiment orchestration: references, closed-loop episodes, the training
//! environment for the disturbance estimator, method comparison and config.

mod compare;
mod config;
mod env;
mod episode;
mod reference;

pub use compare::{compare_methods, format_table, write_comparison, ComparisonRow, MethodEntry};
pub use config::{BenchConfig, HarnessConfig, MethodSpec, TrainingConfig, VehicleConfig};
pub use env::{train_agent, QuadrotorEnv, TrainingScenario};
pub use episode::{run_episode, write_telemetry, EpisodeConfig, EpisodeResult, TelemetryRow, TrackingMetrics};
pub use reference::{ReferenceConfig, ReferencePoint};

use nalgebra::{DVector, Vector3};
use thiserror::Error;

use crate::quad_dynamics::{QuadState, DISTURBANCE_DIM, STATE_DIM};
use crate::quadred::{QuadredAgent, QuadredError};
use crate::sadf_smpc::{SmpcError, TrackingController};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Smpc(#[from] SmpcError),
    #[error(transparent)]
    Dynamics(#[from] crate::quad_dynamics::DynamicsError),
    #[error(transparent)]
    Wind(#[from] crate::wind::WindError),
    #[error(transparent)]
    Quadred(#[from] QuadredError),
    #[error(transparent)]
    Nn(#[from] crate::nn_core::NnError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Dimension of the estimator's observation.
pub const AGENT_STATE_DIM: usize = STATE_DIM + DISTURBANCE_DIM;

/// Estimator observation `[x - x_ref, measured aerodynamic effect]`.
pub fn agent_state(x: &QuadState, reference: &QuadState, e_f_meas: &Vector3<f64>) -> DVector<f64> {
    let dx = TrackingController::deviation(x, reference);
    let mut s = DVector::zeros(AGENT_STATE_DIM);
    s.rows_mut(0, STATE_DIM).copy_from(&dx);
    s.rows_mut(STATE_DIM, DISTURBANCE_DIM).copy_from(e_f_meas);
    s
}

/// Expand `blocks` piecewise-constant 3-vectors to a `horizon * 3` sequence.
pub fn expand_prediction(action: &DVector<f64>, horizon: usize) -> Result<DVector<f64>, HarnessError> {
    let n_w = DISTURBANCE_DIM;
    if action.is_empty() || action.len() % n_w != 0 {
        return Err(HarnessError::Config(format!(
            "prediction length {} is not a positive multiple of {n_w}",
            action.len()
        )));
    }
    let blocks = action.len() / n_w;
    if blocks > horizon {
        return Err(HarnessError::Config(format!("{blocks} prediction blocks exceed horizon {horizon}")));
    }
    Ok(DVector::from_fn(horizon * n_w, |row, _| {
        let (step, axis) = (row / n_w, row % n_w);
        let block = step * blocks / horizon;
        action[block * n_w + axis]
    }))
}

/// Source of the disturbance mean handed to the controller.
#[derive(Debug, Clone, Copy)]
pub enum Predictor<'a> {
    /// No prediction: the controller plans with a zero mean.
    None,
    /// Fixed mean on every step.
    Constant(Vector3<f64>),
    /// Learned estimator evaluated on the current observation.
    Agent(&'a QuadredAgent),
}

impl Predictor<'_> {
    pub fn predict(&self, s: &DVector<f64>, horizon: usize) -> Result<Option<DVector<f64>>, HarnessError> {
        match self {
            Predictor::None => Ok(None),
            Predictor::Constant(mu) => Ok(Some(DVector::from_fn(horizon * DISTURBANCE_DIM, |i, _| {
                mu[i % DISTURBANCE_DIM]
            }))),
            Predictor::Agent(agent) => Ok(Some(expand_prediction(&agent.act(s)?, horizon)?)),
        }
    }
}
