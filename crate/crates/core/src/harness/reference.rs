//! Analytic reference trajectories with identity attitude.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::quad_dynamics::QuadState;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum ReferenceConfig {
    Hover {
        position: [f64; 3],
    },
    /// Rest-to-rest quintic from `start` to `end` over `duration` seconds.
    Line {
        start: [f64; 3],
        end: [f64; 3],
        duration: f64,
    },
    Circle {
        center: [f64; 3],
        radius: f64,
        period: f64,
    },
    /// Figure-eight `(r sin wt, r/2 sin 2wt)` around `center`.
    Lemniscate {
        center: [f64; 3],
        radius: f64,
        period: f64,
    },
}

impl Default for ReferenceConfig {
    fn default() -> Self {
        ReferenceConfig::Hover {
            position: [0.0, 0.0, 1.0],
        }
    }
}

/// Position, velocity and acceleration at one time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReferencePoint {
    pub position: Vector3<f64>,
    pub velocity: Vector3<f64>,
    pub acceleration: Vector3<f64>,
}

impl ReferencePoint {
    pub fn state(&self) -> QuadState {
        let mut s = QuadState::hover_at(self.position);
        s.velocity = self.velocity;
        s
    }
}

impl ReferenceConfig {
    pub fn validate(&self, max_accel: f64) -> Result<(), HarnessError> {
        let finite = |v: &[f64; 3]| v.iter().all(|x| x.is_finite());
        let bad = |msg: &str| Err(HarnessError::Config(format!("reference: {msg}")));
        match self {
            ReferenceConfig::Hover { position } => {
                if !finite(position) {
                    return bad("position must be finite");
                }
            }
            ReferenceConfig::Line { start, end, duration } => {
                if !(finite(start) && finite(end)) {
                    return bad("line endpoints must be finite");
                }
                if !(*duration > 0.0 && duration.is_finite()) {
                    return bad("line duration must be positive");
                }
            }
            ReferenceConfig::Circle { center, radius, period }
            | ReferenceConfig::Lemniscate { center, radius, period } => {
                if !finite(center) {
                    return bad("center must be finite");
                }
                if !(*radius > 0.0 && radius.is_finite() && *period > 0.0 && period.is_finite()) {
                    return bad("radius and period must be positive");
                }
            }
        }
        let peak = self.peak_acceleration();
        if peak > max_accel {
            return Err(HarnessError::Config(format!(
                "reference: peak acceleration {peak:.3} m/s^2 exceeds max_accel {max_accel}"
            )));
        }
        Ok(())
    }

    /// Largest acceleration magnitude along the trajectory.
    pub fn peak_acceleration(&self) -> f64 {
        match self {
            ReferenceConfig::Hover { .. } => 0.0,
            ReferenceConfig::Line { start, end, duration } => {
                let dist = (Vector3::from(*end) - Vector3::from(*start)).norm();
                // max |s''(tau)| of the quintic is 10 / sqrt(3).
                dist * 10.0 / 3f64.sqrt() / (duration * duration)
            }
            ReferenceConfig::Circle { radius, period, .. } => {
                let w = 2.0 * std::f64::consts::PI / period;
                radius * w * w
            }
            ReferenceConfig::Lemniscate { period, .. } => (0..=2000)
                .map(|i| self.point(period * i as f64 / 2000.0).acceleration.norm())
                .fold(0.0, f64::max),
        }
    }

    /// Time at which the reference reaches its endpoint, capped at `horizon`.
    pub fn settle_time(&self, episode: f64) -> f64 {
        match self {
            ReferenceConfig::Hover { .. } => 0.0,
            ReferenceConfig::Line { duration, .. } => duration.min(episode),
            _ => episode,
        }
    }

    pub fn point(&self, t: f64) -> ReferencePoint {
        match self {
            ReferenceConfig::Hover { position } => ReferencePoint {
                position: Vector3::from(*position),
                velocity: Vector3::zeros(),
                acceleration: Vector3::zeros(),
            },
            ReferenceConfig::Line { start, end, duration } => {
                let tau = (t / duration).clamp(0.0, 1.0);
                let delta = Vector3::from(*end) - Vector3::from(*start);
                let s = tau.powi(3) * (10.0 - 15.0 * tau + 6.0 * tau * tau);
                let ds = 30.0 * tau * tau * (1.0 - tau) * (1.0 - tau);
                let dds = 60.0 * tau * (1.0 - tau) * (1.0 - 2.0 * tau);
                let moving = t > 0.0 && t < *duration;
                ReferencePoint {
                    position: Vector3::from(*start) + delta * s,
                    velocity: if moving { delta * (ds / duration) } else { Vector3::zeros() },
                    acceleration: if moving {
                        delta * dds / (duration * duration)
                    } else {
                        Vector3::zeros()
                    },
                }
            }
            ReferenceConfig::Circle { center, radius, period } => {
                let w = 2.0 * std::f64::consts::PI / period;
                let (s, c) = (w * t).sin_cos();
                ReferencePoint {
                    position: Vector3::from(*center) + Vector3::new(radius * c, radius * s, 0.0),
                    velocity: Vector3::new(-radius * w * s, radius * w * c, 0.0),
                    acceleration: Vector3::new(-radius * w * w * c, -radius * w * w * s, 0.0),
                }
            }
            ReferenceConfig::Lemniscate { center, radius, period } => {
                let w = 2.0 * std::f64::consts::PI / period;
                let (s1, c1) = (w * t).sin_cos();
                let (s2, c2) = (2.0 * w * t).sin_cos();
                ReferencePoint {
                    position: Vector3::from(*center) + Vector3::new(radius * s1, 0.5 * radius * s2, 0.0),
                    velocity: Vector3::new(radius * w * c1, radius * w * c2, 0.0),
                    acceleration: Vector3::new(-radius * w * w * s1, -2.0 * radius * w * w * s2, 0.0),
                }
            }
        }
    }

    pub fn state(&self, t: f64) -> QuadState {
        self.point(t).state()
    }

    /// `count` reference states spaced `dt` apart starting at `t`.
    pub fn window(&self, t: f64, dt: f64, count: usize) -> Vec<QuadState> {
        (0..count).map(|i| self.state(t + i as f64 * dt)).collect()
    }
}
