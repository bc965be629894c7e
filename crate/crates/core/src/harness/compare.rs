//! Seeded method comparison over a set of constant aerodynamic forces.

use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{run_episode, EpisodeConfig, HarnessError, Predictor};
use crate::quad_dynamics::PhysicalParams;
use crate::sadf_smpc::{SmpcConfig, TrackingController};
use crate::wind::WindScenario;

#[derive(Debug, Clone)]
pub struct MethodEntry<'a> {
    pub name: String,
    pub predictor: Predictor<'a>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub method: String,
    pub force: [f64; 3],
    pub trials: usize,
    pub successes: usize,
    pub success_rate: f64,
    /// Mean completion time over successful trials (NaN without successes).
    pub mean_time: f64,
    pub mean_error: f64,
    /// Cumulative error per trial, in seed order.
    pub errors: Vec<f64>,
}

/// Run every method on every force for `trials` seeds. Trial `i` uses seed
/// `seed + i` for all methods, so results are paired across methods.
pub fn compare_methods(
    base: &EpisodeConfig,
    forces: &[[f64; 3]],
    noise_std: f64,
    methods: &[MethodEntry],
    trials: usize,
    seed: u64,
    smpc: &SmpcConfig,
    params: PhysicalParams,
) -> Result<Vec<ComparisonRow>, HarnessError> {
    if trials == 0 {
        return Err(HarnessError::Config("bench.trials must be at least 1".into()));
    }
    let mut ctrl = TrackingController::new(smpc.clone(), params)?;
    let mut rows = Vec::with_capacity(forces.len() * methods.len());
    for force in forces {
        let mut cfg = base.clone();
        cfg.wind = WindScenario {
            noise_std,
            residual_bound: base.wind.residual_bound,
            ..WindScenario::constant(*force)
        };
        for method in methods {
            let mut errors = Vec::with_capacity(trials);
            let mut times = Vec::new();
            for trial in 0..trials {
                let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(trial as u64));
                let result = run_episode(&cfg, &mut ctrl, &method.predictor, &mut rng)?;
                errors.push(result.metrics.cumulative_error);
                if result.metrics.success {
                    times.push(result.metrics.completion_time.unwrap_or(f64::NAN));
                }
            }
            let successes = times.len();
            rows.push(ComparisonRow {
                method: method.name.clone(),
                force: *force,
                trials,
                successes,
                success_rate: successes as f64 / trials as f64,
                mean_time: if successes > 0 {
                    times.iter().sum::<f64>() / successes as f64
                } else {
                    f64::NAN
                },
                mean_error: errors.iter().sum::<f64>() / trials as f64,
                errors,
            });
        }
    }
    Ok(rows)
}

fn force_label(f: &[f64; 3]) -> String {
    format!("[{}, {}, {}]", f[0], f[1], f[2])
}

/// Aligned text table: one row per force and method.
pub fn format_table(rows: &[ComparisonRow]) -> String {
    let width = rows.iter().map(|r| r.method.len()).max().unwrap_or(6).max(6);
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<16} {:<width$} {:>10} {:>9} {:>10}",
        "force (m/s^2)", "method", "succ. rate", "time (s)", "err. (m)"
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{:<16} {:<width$} {:>10.2} {:>9.2} {:>10.3}",
            force_label(&r.force),
            r.method,
            r.success_rate,
            r.mean_time,
            r.mean_error
        );
    }
    out
}

/// CSV with header `force_x,force_y,force_z,method,trials,success_rate,mean_time,mean_error`.
pub fn write_comparison(path: &Path, rows: &[ComparisonRow]) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "force_x",
        "force_y",
        "force_z",
        "method",
        "trials",
        "success_rate",
        "mean_time",
        "mean_error",
    ])?;
    for r in rows {
        w.write_record([
            r.force[0].to_string(),
            r.force[1].to_string(),
            r.force[2].to_string(),
            r.method.clone(),
            r.trials.to_string(),
            r.success_rate.to_string(),
            r.mean_time.to_string(),
            r.mean_error.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
