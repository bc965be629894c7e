//! Quadrotor trajectory tracking with a quantile-distributional disturbance
//! estimator feeding a stochastic MPC built on simplified affine disturbance
//! feedback.

pub mod harness;
pub mod nn_core;
pub mod qp;
pub mod quadred;
pub mod quad_dynamics;
pub mod sadf_smpc;
pub mod wind;
