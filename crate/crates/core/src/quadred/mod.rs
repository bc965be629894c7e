//! Quantile-distributional actor-critic disturbance estimator.
//!
//! The critic regresses `N_q` return quantiles with the quantile Huber loss;
//! an option head picks which quantile window (all, low, middle, high) the
//! actor ascends. The actor maps the observed state to a bounded predicted
//! disturbance sequence consumed by the stochastic MPC.

mod agent;
mod distribution;
mod tabular;
pub mod toy;

use thiserror::Error;

pub use agent::{
    reward, train, write_learning_curve, EnvStep, EpisodeRecord, Environment, OptionSet, QuadredAgent,
    QuadredConfig, ReplayBuffer, RunningNormalizer, TrainReport, TrainSettings, Transition, UpdateLosses,
};
pub use distribution::{
    project_w1, quantile_huber_loss, quantile_midpoints, wasserstein_distance, DiscreteDistribution,
    QuantileDistribution,
};
pub use tabular::{
    greedy_policy, tabular_distributional_iteration, tabular_policy_improvement, Mdp, PolicyIterate,
    TabularEvaluation,
};

#[derive(Debug, Error)]
pub enum QuadredError {
    #[error("empty {0}")]
    Empty(&'static str),
    #[error("non-finite {0}")]
    NonFinite(&'static str),
    #[error("probabilities sum to {0}, not 1")]
    Unnormalized(f64),
    #[error("invalid argument: {0}")]
    Invalid(&'static str),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("training diverged at episode {episode}: {what}")]
    Diverged { episode: usize, what: String },
    #[error("environment: {0}")]
    Environment(String),
    #[error(transparent)]
    Nn(#[from] crate::nn_core::NnError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
