//! Closed-loop episodes on the true plant and their metrics.

use std::path::Path;

use nalgebra::Vector3;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{agent_state, HarnessError, Predictor, ReferenceConfig};
use crate::quad_dynamics::{rotation_matrix, step_rk4, QuadState};
use crate::sadf_smpc::TrackingController;
use crate::wind::{aero_force, measured_wind, sample_residual, WindScenario};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EpisodeConfig {
    /// Simulated time, s.
    pub duration: f64,
    /// Largest admissible position error, m.
    pub err_max: f64,
    /// Endpoint tolerance, m.
    pub goal_tol: f64,
    /// Standard deviation of the wind measurement, m/s^2.
    pub measurement_noise: f64,
    /// Reference accelerations above this are rejected, m/s^2.
    pub max_accel: f64,
    pub reference: ReferenceConfig,
    pub wind: WindScenario,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        Self {
            duration: 10.0,
            err_max: 2.0,
            goal_tol: 0.3,
            measurement_noise: 0.1,
            max_accel: 6.0,
            reference: ReferenceConfig::default(),
            wind: WindScenario::default(),
        }
    }
}

impl EpisodeConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return Err(HarnessError::Config("episode.duration must be positive".into()));
        }
        if !(self.err_max > 0.0 && self.goal_tol > 0.0) {
            return Err(HarnessError::Config("episode.err_max and episode.goal_tol must be positive".into()));
        }
        if !(self.measurement_noise >= 0.0 && self.measurement_noise.is_finite()) {
            return Err(HarnessError::Config("episode.measurement_noise must be nonnegative".into()));
        }
        self.reference.validate(self.max_accel)?;
        self.wind.validate()?;
        Ok(())
    }

    pub fn steps(&self, dt: f64) -> usize {
        (self.duration / dt).round() as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackingMetrics {
    /// Sum over steps of position-error norm times the step, m s.
    pub cumulative_error: f64,
    /// Time at which the endpoint was reached within tolerance.
    pub completion_time: Option<f64>,
    pub success: bool,
    pub max_error: f64,
    pub final_error: f64,
    pub steps: usize,
    pub failure: Option<String>,
    /// Steps whose input came from the fallback rule.
    pub fallbacks: usize,
    pub mean_solve_time: f64,
    pub max_solve_time: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TelemetryRow {
    pub t: f64,
    pub position: Vector3<f64>,
    pub reference: Vector3<f64>,
    pub error: Vector3<f64>,
    pub thrust: [f64; 4],
    /// Lateral (world y) acceleration produced by the commanded thrust, m/s^2.
    pub u_y: f64,
    /// First-step disturbance mean used by the controller.
    pub mu: Vector3<f64>,
    pub status: &'static str,
    pub solve_time: f64,
}

#[derive(Debug, Clone)]
pub struct EpisodeResult {
    pub metrics: TrackingMetrics,
    pub telemetry: Vec<TelemetryRow>,
    pub final_state: QuadState,
}

/// Simulate one episode: true plant with aerodynamic effect plus residual,
/// noisy wind measurement, controller with the given predictor.
pub fn run_episode(
    cfg: &EpisodeConfig,
    ctrl: &mut TrackingController,
    predictor: &Predictor,
    rng: &mut ChaCha8Rng,
) -> Result<EpisodeResult, HarnessError> {
    cfg.validate()?;
    ctrl.reset();
    let params = ctrl.params;
    let dt = ctrl.config.dt;
    let horizon = ctrl.horizon();
    let steps = cfg.steps(dt);
    let settle = cfg.reference.settle_time(cfg.duration);
    let endpoint = cfg.reference.point(cfg.duration.max(settle)).position;

    let mut x = cfg.reference.state(0.0);
    let mut telemetry = Vec::with_capacity(steps);
    let (mut cumulative, mut max_error, mut final_error) = (0.0, 0.0f64, 0.0);
    let mut completion = None;
    let mut failure = None;
    let (mut fallbacks, mut solve_total, mut solve_max) = (0, 0.0, 0.0f64);
    let mut e_f_meas = measured_wind(&aero_force(&cfg.wind, 0.0), cfg.measurement_noise, rng);

    for k in 0..steps {
        let t = k as f64 * dt;
        let refs = cfg.reference.window(t, dt, horizon + 1);
        let s = agent_state(&x, &refs[0], &e_f_meas);
        let w_pred = predictor.predict(&s, horizon)?;
        let out = match ctrl.step(&x, &refs, &e_f_meas, w_pred.as_ref()) {
            Ok(out) => out,
            Err(e) => {
                failure = Some(format!("controller error at t = {t:.2}: {e}"));
                break;
            }
        };
        if out.path == crate::sadf_smpc::SolvePath::Fallback {
            fallbacks += 1;
        }
        solve_total += out.solve_time;
        solve_max = solve_max.max(out.solve_time);

        let accel = aero_force(&cfg.wind, t) + sample_residual(&cfg.wind, rng);
        x = match step_rk4(&x, &out.command, &(accel * params.mass), dt, &params) {
            Ok(next) => next,
            Err(e) => {
                failure = Some(format!("plant diverged at t = {t:.2}: {e}"));
                break;
            }
        };
        let t_next = t + dt;
        let p_ref = cfg.reference.point(t_next).position;
        let err = x.position - p_ref;
        let norm = err.norm();
        cumulative += norm * dt;
        max_error = max_error.max(norm);
        final_error = norm;
        if completion.is_none() && t_next + 1e-9 >= settle && (x.position - endpoint).norm() <= cfg.goal_tol {
            completion = Some(t_next);
        }
        let total: f64 = out.command.thrust.iter().sum();
        let lift = rotation_matrix(&x.attitude) * Vector3::new(0.0, 0.0, total / params.mass);
        telemetry.push(TelemetryRow {
            t: t_next,
            position: x.position,
            reference: p_ref,
            error: err,
            thrust: out.command.thrust,
            u_y: lift[1],
            mu: Vector3::new(out.mu[0], out.mu[1], out.mu[2]),
            status: out.path.as_str(),
            solve_time: out.solve_time,
        });
        if !norm.is_finite() || norm > 10.0 * cfg.err_max {
            failure = Some(format!("position error {norm:.3} m at t = {t_next:.2}"));
            break;
        }
        e_f_meas = measured_wind(&aero_force(&cfg.wind, t_next), cfg.measurement_noise, rng);
    }
    let ran = telemetry.len();
    let success = failure.is_none()
        && ran == steps
        && max_error <= cfg.err_max
        && final_error <= cfg.goal_tol
        && completion.is_some();
    Ok(EpisodeResult {
        metrics: TrackingMetrics {
            cumulative_error: cumulative,
            completion_time: completion,
            success,
            max_error,
            final_error,
            steps: ran,
            failure,
            fallbacks,
            mean_solve_time: if ran > 0 { solve_total / ran as f64 } else { 0.0 },
            max_solve_time: solve_max,
        },
        telemetry,
        final_state: x,
    })
}

/// CSV with one row per control step.
pub fn write_telemetry(path: &Path, rows: &[TelemetryRow]) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "t", "x", "y", "z", "ref_x", "ref_y", "ref_z", "err_x", "err_y", "err_z", "T1", "T2", "T3", "T4",
        "u_y", "mu_x", "mu_y", "mu_z", "status", "solve_time",
    ])?;
    for r in rows {
        let mut rec: Vec<String> = vec![format!("{:.4}", r.t)];
        for v in r.position.iter().chain(r.reference.iter()).chain(r.error.iter()) {
            rec.push(v.to_string());
        }
        rec.extend(r.thrust.iter().map(|v| v.to_string()));
        rec.push(r.u_y.to_string());
        rec.extend(r.mu.iter().map(|v| v.to_string()));
        rec.push(r.status.to_string());
        rec.push(r.solve_time.to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
