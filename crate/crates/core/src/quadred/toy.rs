//! Scalar plant with a constant unknown disturbance, used to exercise the
//! learner end to end.
//!
//! `x+ = (1 - k) x + d - a` under the feedback `u = -k x - a`, where `a` is the
//! agent's estimate of `d`. The observation is `(x, d)` and the reward is
//! `-(x+)^2`, so the perfect estimate `a = d` keeps `x` at its initial value
//! decaying by `1 - k`.

use nalgebra::DVector;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::agent::{EnvStep, Environment};
use super::QuadredError;

#[derive(Debug, Clone)]
pub struct ScalarDisturbancePlant {
    pub gain: f64,
    pub disturbance_range: f64,
    pub horizon: usize,
    x: f64,
    d: f64,
    t: usize,
}

impl ScalarDisturbancePlant {
    pub fn new(horizon: usize) -> Self {
        Self {
            gain: 0.5,
            disturbance_range: 1.0,
            horizon,
            x: 0.0,
            d: 0.0,
            t: 0,
        }
    }

    pub fn disturbance(&self) -> f64 {
        self.d
    }

    /// Episode return when the estimate is chosen by `estimate(x, d)`.
    pub fn rollout_return(&self, x0: f64, d: f64, estimate: impl Fn(f64, f64) -> f64) -> f64 {
        let mut x = x0;
        let mut total = 0.0;
        for _ in 0..self.horizon {
            x = (1.0 - self.gain) * x + d - estimate(x, d);
            total -= x * x;
        }
        total
    }

    fn observe(&self) -> DVector<f64> {
        DVector::from_vec(vec![self.x, self.d])
    }
}

impl Environment for ScalarDisturbancePlant {
    fn state_dim(&self) -> usize {
        2
    }

    fn action_dim(&self) -> usize {
        1
    }

    fn reset(&mut self, rng: &mut ChaCha8Rng) -> Result<DVector<f64>, QuadredError> {
        self.x = rng.random_range(-0.2..0.2);
        self.d = rng.random_range(-self.disturbance_range..self.disturbance_range);
        self.t = 0;
        Ok(self.observe())
    }

    fn step(&mut self, action: &DVector<f64>, _rng: &mut ChaCha8Rng) -> Result<EnvStep, QuadredError> {
        if action.len() != 1 {
            return Err(QuadredError::Dimension {
                expected: 1,
                got: action.len(),
            });
        }
        self.x = (1.0 - self.gain) * self.x + self.d - action[0];
        self.t += 1;
        Ok(EnvStep {
            state: self.observe(),
            reward: -self.x * self.x,
            terminal: false,
            truncated: self.t >= self.horizon,
        })
    }
}
