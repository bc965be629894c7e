use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use quadred_smpc::harness::{
    compare_methods, run_episode, write_telemetry, EpisodeConfig, MethodEntry, Predictor, QuadrotorEnv,
    ReferenceConfig, TrainingScenario,
};
use quadred_smpc::quad_dynamics::{step_rk4, PhysicalParams, QuadState};
use quadred_smpc::quadred::Environment;
use quadred_smpc::sadf_smpc::{SmpcConfig, SolvePath, TrackingController};
use quadred_smpc::wind::WindScenario;

fn controller() -> TrackingController {
    TrackingController::new(SmpcConfig::default(), PhysicalParams::default()).unwrap()
}

#[test]
fn calm_hover_has_negligible_error() {
    let cfg = EpisodeConfig {
        measurement_noise: 0.0,
        ..EpisodeConfig::default()
    };
    let mut ctrl = controller();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let result = run_episode(&cfg, &mut ctrl, &Predictor::None, &mut rng).unwrap();
    assert!(result.metrics.cumulative_error < 0.01, "{}", result.metrics.cumulative_error);
    assert!(result.metrics.success);
    assert_eq!(result.metrics.completion_time, Some(0.05));
}

#[test]
fn episodes_are_seed_deterministic() {
    let cfg = EpisodeConfig {
        duration: 3.0,
        wind: WindScenario {
            noise_std: 0.3,
            ..WindScenario::constant([0.0, 2.0, 0.0])
        },
        ..EpisodeConfig::default()
    };
    let mut ctrl = controller();
    let run = |ctrl: &mut TrackingController, seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        run_episode(&cfg, ctrl, &Predictor::None, &mut rng).unwrap()
    };
    let (a, b, c) = (run(&mut ctrl, 5), run(&mut ctrl, 5), run(&mut ctrl, 6));
    assert_eq!(a.metrics.cumulative_error, b.metrics.cumulative_error);
    assert_eq!(a.final_state, b.final_state);
    assert_ne!(a.metrics.cumulative_error, c.metrics.cumulative_error);
}

#[test]
fn telemetry_has_one_row_per_step() {
    let cfg = EpisodeConfig {
        duration: 2.0,
        reference: ReferenceConfig::Circle {
            center: [0.0, 0.0, 1.0],
            radius: 1.0,
            period: 8.0,
        },
        ..EpisodeConfig::default()
    };
    let mut ctrl = controller();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let result = run_episode(&cfg, &mut ctrl, &Predictor::None, &mut rng).unwrap();
    assert_eq!(result.telemetry.len(), 40);
    for (i, row) in result.telemetry.iter().enumerate() {
        assert!((row.t - 0.05 * (i + 1) as f64).abs() < 1e-9);
    }
    let path = std::env::temp_dir().join(format!("telemetry-{}.csv", std::process::id()));
    write_telemetry(&path, &result.telemetry).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().count(), 41);
    let _ = std::fs::remove_file(path);
}

#[test]
fn single_trial_table_equals_episode() {
    let cfg = EpisodeConfig {
        duration: 2.0,
        ..EpisodeConfig::default()
    };
    let smpc = SmpcConfig::default();
    let params = PhysicalParams::default();
    let methods = [MethodEntry {
        name: "nominal".into(),
        predictor: Predictor::None,
    }];
    let rows = compare_methods(&cfg, &[[0.0, 2.0, 0.0]], 0.3, &methods, 1, 11, &smpc, params).unwrap();
    assert_eq!(rows.len(), 1);

    let mut episode_cfg = cfg.clone();
    episode_cfg.wind = WindScenario {
        noise_std: 0.3,
        ..WindScenario::constant([0.0, 2.0, 0.0])
    };
    let mut ctrl = controller();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let result = run_episode(&episode_cfg, &mut ctrl, &Predictor::None, &mut rng).unwrap();
    assert_eq!(rows[0].mean_error, result.metrics.cumulative_error);
    assert_eq!(rows[0].success_rate, if result.metrics.success { 1.0 } else { 0.0 });
    assert_eq!(rows[0].trials, 1);
}

#[test]
fn success_rate_is_monotone_in_threshold() {
    let smpc = SmpcConfig::default();
    let params = PhysicalParams::default();
    let methods = [MethodEntry {
        name: "nominal".into(),
        predictor: Predictor::None,
    }];
    let mut previous = -1.0;
    for err_max in [0.05, 0.2, 0.5, 2.0] {
        let cfg = EpisodeConfig {
            duration: 2.0,
            err_max,
            goal_tol: 0.3,
            ..EpisodeConfig::default()
        };
        let rows = compare_methods(&cfg, &[[0.0, 2.0, 0.0]], 0.5, &methods, 4, 3, &smpc, params).unwrap();
        assert!(rows[0].success_rate >= previous);
        assert_eq!(rows[0].successes as f64 / rows[0].trials as f64, rows[0].success_rate);
        previous = rows[0].success_rate;
    }
}

#[test]
fn feasible_solves_never_need_clamping() {
    let params = PhysicalParams::default();
    let mut ctrl = controller();
    let wind = WindScenario {
        noise_std: 0.5,
        residual_bound: 1.0,
        ..WindScenario::constant([-2.0, 2.0, 0.0])
    };
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let reference = ReferenceConfig::Lemniscate {
        center: [0.0, 0.0, 1.0],
        radius: 2.0,
        period: 10.0,
    };
    let mut x = reference.state(0.0);
    let mut solved = 0;
    for k in 0..200 {
        let t = 0.05 * k as f64;
        let refs = reference.window(t, 0.05, ctrl.horizon() + 1);
        let out = ctrl.step(&x, &refs, &Vector3::zeros(), None).unwrap();
        if out.path != SolvePath::Fallback {
            assert!(!out.clamped, "clamped at step {k}");
            solved += 1;
        }
        let accel = quadred_smpc::wind::aero_force(&wind, t) + quadred_smpc::wind::sample_residual(&wind, &mut rng);
        x = step_rk4(&x, &out.command, &(accel * params.mass), 0.05, &params).unwrap();
    }
    assert!(solved > 150);
}

#[test]
fn calm_regulation_error_shrinks_monotonically() {
    let params = PhysicalParams::default();
    let mut ctrl = controller();
    let target = QuadState::hover_at(Vector3::new(0.0, 0.0, 1.0));
    let refs = vec![target; ctrl.horizon() + 1];
    let mut x = QuadState::hover_at(Vector3::new(0.6, -0.4, 1.3));
    let mut previous = (x.position - target.position).norm();
    for k in 0..400 {
        let out = ctrl.step(&x, &refs, &Vector3::zeros(), None).unwrap();
        x = step_rk4(&x, &out.command, &Vector3::zeros(), 0.05, &params).unwrap();
        let err = (x.position - target.position).norm();
        if previous > 0.05 {
            assert!(err <= previous + 1e-12, "error grew from {previous} to {err} at step {k}");
        }
        previous = err;
    }
    assert!(previous < 0.01);
}

#[test]
fn training_environment_contract() {
    let scenario = TrainingScenario {
        episode_steps: 5,
        ..TrainingScenario::default()
    };
    let mut env = QuadrotorEnv::new(scenario, SmpcConfig::default(), PhysicalParams::default()).unwrap();
    assert_eq!((env.state_dim(), env.action_dim()), (16, 3));
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let s = env.reset(&mut rng).unwrap();
    assert_eq!(s.len(), 16);
    let force = quadred_smpc::wind::aero_force(&env.wind, 0.0);
    assert!(force.x.abs() <= 3.0 && force.y.abs() <= 3.0 && force.z == 0.0);
    let action = nalgebra::DVector::zeros(3);
    for k in 0..5 {
        let step = env.step(&action, &mut rng).unwrap();
        assert!(step.reward <= 0.0);
        assert!(!step.terminal);
        assert_eq!(step.truncated, k == 4);
    }
}
