//! Ground-truth aerodynamic effects, residual disturbances and the noisy wind
//! measurement that stands in for an external wind estimator.

use nalgebra::Vector3;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default bound on residual accelerations, m/s^2.
pub const DEFAULT_RESIDUAL_BOUND: f64 = 3.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WindError {
    #[error("segments must be sorted by start time")]
    Unsorted,
    #[error("segment start time must be finite and nonnegative")]
    BadStart,
    #[error("residual mean {0} exceeds the residual bound {1}")]
    MeanOutsideBound(f64, f64),
    #[error("invalid {0}")]
    Invalid(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindSegment {
    pub t_start: f64,
    pub accel: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindScenario {
    #[serde(default)]
    pub segments: Vec<WindSegment>,
    /// Per-axis standard deviation of the residual, m/s^2.
    #[serde(default)]
    pub noise_std: f64,
    #[serde(default)]
    pub residual_mean: [f64; 3],
    #[serde(default = "default_bound")]
    pub residual_bound: f64,
}

fn default_bound() -> f64 {
    DEFAULT_RESIDUAL_BOUND
}

impl Default for WindScenario {
    fn default() -> Self {
        Self {
            segments: Vec::new(),
            noise_std: 0.0,
            residual_mean: [0.0; 3],
            residual_bound: DEFAULT_RESIDUAL_BOUND,
        }
    }
}

impl WindScenario {
    pub fn constant(accel: [f64; 3]) -> Self {
        Self {
            segments: vec![WindSegment { t_start: 0.0, accel }],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), WindError> {
        for s in &self.segments {
            if !(s.t_start.is_finite() && s.t_start >= 0.0) {
                return Err(WindError::BadStart);
            }
            if s.accel.iter().any(|a| !a.is_finite()) {
                return Err(WindError::Invalid("segment acceleration"));
            }
        }
        if self.segments.windows(2).any(|w| w[0].t_start > w[1].t_start) {
            return Err(WindError::Unsorted);
        }
        if !(self.residual_bound.is_finite() && self.residual_bound >= 0.0) {
            return Err(WindError::Invalid("residual_bound"));
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return Err(WindError::Invalid("noise_std"));
        }
        let mean = Vector3::from(self.residual_mean);
        if !mean.iter().all(|m| m.is_finite()) {
            return Err(WindError::Invalid("residual_mean"));
        }
        if mean.norm() > self.residual_bound {
            return Err(WindError::MeanOutsideBound(mean.norm(), self.residual_bound));
        }
        Ok(())
    }

    pub fn residual_mean(&self) -> Vector3<f64> {
        Vector3::from(self.residual_mean)
    }
}

/// Piecewise-constant, right-continuous aerodynamic acceleration at time `t`.
pub fn aero_force(scenario: &WindScenario, t: f64) -> Vector3<f64> {
    scenario
        .segments
        .iter()
        .rev()
        .find(|s| s.t_start <= t)
        .map(|s| Vector3::from(s.accel))
        .unwrap_or_else(Vector3::zeros)
}

/// Draw a residual from a Gaussian around `residual_mean`, rejection-truncated
/// to the box `|w_i| <= residual_bound`.
pub fn sample_residual<R: Rng + ?Sized>(scenario: &WindScenario, rng: &mut R) -> Vector3<f64> {
    let mean = scenario.residual_mean();
    if scenario.noise_std == 0.0 {
        return mean;
    }
    let bound = scenario.residual_bound;
    loop {
        let w = mean
            + scenario.noise_std
                * Vector3::new(
                    StandardNormal.sample(rng),
                    StandardNormal.sample(rng),
                    StandardNormal.sample(rng),
                );
        if w.amax() <= bound {
            return w;
        }
    }
}

/// Noisy, unbiased, zero-delay measurement of the true aerodynamic effect.
pub fn measured_wind<R: Rng + ?Sized>(e_f_true: &Vector3<f64>, noise_std: f64, rng: &mut R) -> Vector3<f64> {
    if noise_std == 0.0 {
        return *e_f_true;
    }
    e_f_true
        + noise_std
            * Vector3::new(
                StandardNormal.sample(rng),
                StandardNormal.sample(rng),
                StandardNormal.sample(rng),
            )
}
