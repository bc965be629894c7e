use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

mod common;
use common::{benchmark, random_matrix, random_psd, random_system, scalar, scalar_weights, tight};
use rand_distr::{Distribution, StandardNormal};

use quadred_smpc::qp;
use quadred_smpc::quad_dynamics::stack_prediction;
use quadred_smpc::sadf_smpc::{
    assemble_constraints, assemble_cost, lyapunov_value, policy_to_input, solve_affine,
    solve_sadf, AffinePolicy, ConstraintSet, CostWeights, DisturbanceStats,
    FeedbackMap, FeedbackStructure, SmpcError, UnconstrainedSolver,
};

#[test]
fn policy_matches_hand_expansion() {
    let m1 = DMatrix::from_row_slice(2, 1, &[1.0, -2.0]);
    let m2 = DMatrix::from_row_slice(2, 1, &[0.5, 3.0]);
    let policy = AffinePolicy {
        horizon: 3,
        n_u: 2,
        n_w: 1,
        m_blocks: vec![m1.clone(), m2.clone()],
        v: DVector::from_vec(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]),
    };
    let w = DVector::from_vec(vec![0.7, -1.3, 9.0]);
    let u2 = policy_to_input(&policy, &w, 2).unwrap();
    let expected = &m2 * w[0] + &m1 * w[1] + DVector::from_vec(vec![5.0, 6.0]);
    assert!((u2 - &expected).amax() < 1e-15);
    let u0 = policy_to_input(&policy, &w, 0).unwrap();
    assert_eq!(u0.as_slice(), &[1.0, 2.0]);

    let dense = policy.dense_gain() * &w + &policy.v;
    for i in 0..3 {
        let block = policy_to_input(&policy, &w, i).unwrap();
        assert!((dense.rows(2 * i, 2) - block).amax() < 1e-14);
    }
    assert!(matches!(
        policy_to_input(&policy, &w, 3),
        Err(SmpcError::StepOutOfRange { .. })
    ));

    let zero = AffinePolicy { m_blocks: vec![DMatrix::zeros(2, 1); 2], ..policy.clone() };
    for i in 0..3 {
        let u = policy_to_input(&zero, &w, i).unwrap();
        assert_eq!(u.as_slice(), zero.v.rows(2 * i, 2).as_slice());
    }
    let round = AffinePolicy::from_params(3, 2, 1, &policy.params(), policy.v.clone());
    assert_eq!(round, policy);
}

#[test]
fn deterministic_cost_ignores_gain() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let pred = random_system(3, 2, 2, 4, &mut rng);
    let weights = CostWeights {
        q: random_psd(3, &mut rng, 0.1),
        r: random_psd(2, &mut rng, 0.1),
        p: random_psd(3, &mut rng, 0.1),
    };
    let stats = DisturbanceStats::zero(4, 2);
    let x0 = DVector::from_vec(vec![0.3, -0.2, 1.0]);
    let cost = assemble_cost(&x0, &pred, &weights, &stats, FeedbackStructure::Toeplitz).unwrap();
    let (n_v, n_m) = (cost.n_v, cost.n_m);
    assert!(cost.hessian.view((n_v, 0), (n_m, n_v + n_m)).amax() == 0.0);
    assert!(cost.gradient.rows(n_v, n_m).amax() == 0.0);

    let v = DVector::from_fn(n_v, |_, _| rng.random_range(-1.0..1.0));
    let (wx, wu) = weights.stacked(4);
    let x = &pred.a_stack * &x0 + &pred.b_stack * &v;
    let direct = x.dot(&(&wx * &x)) + v.dot(&(&wu * &v));
    for _ in 0..5 {
        let m = DVector::from_fn(n_m, |_, _| rng.random_range(-5.0..5.0));
        assert!((cost.value(&v, &m) - direct).abs() < 1e-10 * direct.max(1.0));
    }
}

#[test]
fn scalar_cost_matches_symbolic_expansion() {
    let (a, b, g) = (1.1, 0.4, 0.3);
    let (q, r, p) = (2.0, 0.5, 3.0);
    let (mu0, mu1, c0, c1) = (0.2, -0.4, 0.09, 0.25);
    let x0 = 0.7;
    let pred = scalar(a, b, g, 2);
    let stats = DisturbanceStats::new(
        DVector::from_vec(vec![mu0, mu1]),
        DMatrix::from_diagonal(&DVector::from_vec(vec![c0, c1])),
    )
    .unwrap();
    let cost = assemble_cost(
        &DVector::from_element(1, x0),
        &pred,
        &scalar_weights(q, r, p),
        &stats,
        FeedbackStructure::Toeplitz,
    )
    .unwrap();
    assert_eq!((cost.n_v, cost.n_m), (2, 1));

    let expansion = |v0: f64, v1: f64, m: f64| {
        let mean1 = a * x0 + b * v0 + g * mu0;
        let ex1 = mean1 * mean1 + g * g * c0;
        let k = a * g + b * m;
        let mean2 = a * a * x0 + a * b * v0 + b * v1 + k * mu0 + g * mu1;
        let ex2 = mean2 * mean2 + k * k * c0 + g * g * c1;
        let eu1 = (m * mu0 + v1).powi(2) + m * m * c0;
        q * x0 * x0 + q * ex1 + p * ex2 + r * v0 * v0 + r * eu1
    };
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..20 {
        let (v0, v1, m) = (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
        let got = cost.value(&DVector::from_vec(vec![v0, v1]), &DVector::from_element(1, m));
        assert!((got - expansion(v0, v1, m)).abs() < 1e-12 * got.abs().max(1.0));
    }
    // Second derivatives of the expansion.
    let h = &cost.hessian;
    let s = mu0 * mu0 + c0;
    assert!((h[(2, 2)] - 2.0 * (p * b * b * s + r * s)).abs() < 1e-12);
    assert!((h[(0, 0)] - 2.0 * (q * b * b + p * a * a * b * b + r)).abs() < 1e-12);
    assert!((h[(1, 1)] - 2.0 * (p * b * b + r)).abs() < 1e-12);
    assert!((h[(1, 2)] - 2.0 * (p * b * b * mu0 + r * mu0)).abs() < 1e-12);
    assert!((h[(0, 2)] - 2.0 * p * a * b * b * mu0).abs() < 1e-12);
}

#[test]
fn cost_matches_monte_carlo() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let horizon = 4;
    let pred = random_system(2, 1, 2, horizon, &mut rng);
    let weights = CostWeights {
        q: random_psd(2, &mut rng, 0.1),
        r: random_psd(1, &mut rng, 0.1),
        p: random_psd(2, &mut rng, 0.1),
    };
    let mu = DVector::from_fn(horizon * 2, |_, _| rng.random_range(-0.5..0.5));
    let root = random_matrix(horizon * 2, horizon * 2, 0.4, &mut rng);
    let stats = DisturbanceStats::new(mu.clone(), &root * root.transpose()).unwrap();
    let x0 = DVector::from_vec(vec![0.5, -0.3]);
    let cost = assemble_cost(&x0, &pred, &weights, &stats, FeedbackStructure::Toeplitz).unwrap();
    let v = DVector::from_fn(cost.n_v, |_, _| rng.random_range(-1.0..1.0));
    let m = DVector::from_fn(cost.n_m, |_, _| rng.random_range(-1.0..1.0));
    let expected = cost.value(&v, &m);

    let policy = AffinePolicy::from_params(horizon, 1, 2, &m, v.clone());
    let (wx, wu) = weights.stacked(horizon);
    let draws = 100_000;
    let mut total = 0.0;
    for _ in 0..draws {
        let z = DVector::from_fn(horizon * 2, |_, _| StandardNormal.sample(&mut rng));
        let w = &mu + &root * z;
        let mut u = DVector::zeros(horizon);
        for i in 0..horizon {
            u.rows_mut(i, 1).copy_from(&policy_to_input(&policy, &w, i).unwrap());
        }
        let x = pred.predict(&x0, &u, &w);
        total += x.dot(&(&wx * &x)) + u.dot(&(&wu * &u));
    }
    let empirical = total / draws as f64;
    assert!(
        (empirical - expected).abs() < 0.01 * expected,
        "empirical {empirical} vs assembled {expected}"
    );
}

#[test]
fn mean_shift_matches_direct_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let horizon = 5;
    let pred = random_system(2, 2, 1, horizon, &mut rng);
    let weights = CostWeights {
        q: random_psd(2, &mut rng, 0.1),
        r: random_psd(2, &mut rng, 0.1),
        p: random_psd(2, &mut rng, 0.1),
    };
    let x0 = DVector::from_vec(vec![1.0, -0.5]);
    let cov = DMatrix::identity(horizon, horizon) * 0.04;
    let zero = DisturbanceStats::new(DVector::zeros(horizon), cov.clone()).unwrap();
    let mu = DVector::from_fn(horizon, |_, _| rng.random_range(-1.0..1.0));
    let shifted = DisturbanceStats::new(mu.clone(), cov).unwrap();
    let c0 = assemble_cost(&x0, &pred, &weights, &zero, FeedbackStructure::Toeplitz).unwrap();
    let c1 = assemble_cost(&x0, &pred, &weights, &shifted, FeedbackStructure::Toeplitz).unwrap();
    let v = DVector::from_fn(c0.n_v, |_, _| rng.random_range(-1.0..1.0));
    let m = DVector::from_fn(c0.n_m, |_, _| rng.random_range(-1.0..1.0));
    let gain = AffinePolicy::from_params(horizon, 2, 1, &m, v.clone()).dense_gain();
    let (wx, wu) = weights.stacked(horizon);
    let r0 = &pred.a_stack * &x0 + &pred.b_stack * &v;
    let f = &pred.b_stack * &gain + &pred.g_stack;
    let xm = &r0 + &f * &mu;
    let um = &v + &gain * &mu;
    let shift = xm.dot(&(&wx * &xm)) - r0.dot(&(&wx * &r0)) + um.dot(&(&wu * &um)) - v.dot(&(&wu * &v));
    let got = c1.value(&v, &m) - c0.value(&v, &m);
    assert!((got - shift).abs() < 1e-10 * shift.abs().max(1.0));
}

#[test]
fn hessians_are_psd() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = f64::INFINITY;
    for trial in 0..200 {
        let n = rng.random_range(1..4);
        let n_u = rng.random_range(1..3);
        let n_w = rng.random_range(1..3);
        let horizon = rng.random_range(1..6);
        let pred = random_system(n, n_u, n_w, horizon, &mut rng);
        let weights = CostWeights {
            q: random_psd(n, &mut rng, 0.0),
            r: random_psd(n_u, &mut rng, 0.01),
            p: random_psd(n, &mut rng, 0.0),
        };
        let root = random_matrix(horizon * n_w, horizon * n_w, 0.5, &mut rng);
        let mu = DVector::from_fn(horizon * n_w, |_, _| rng.random_range(-1.0..1.0));
        let stats = DisturbanceStats::new(mu, &root * root.transpose()).unwrap();
        let x0 = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
        let structure = if trial % 2 == 0 { FeedbackStructure::Toeplitz } else { FeedbackStructure::Full };
        let cost = assemble_cost(&x0, &pred, &weights, &stats, structure).unwrap();
        worst = worst.min(qp::min_eigenvalue(&cost.hessian));
    }
    assert!(worst >= -1e-8, "min eigenvalue {worst}");
}

#[test]
fn rejects_indefinite_covariance() {
    let cov = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
    assert!(matches!(
        DisturbanceStats::new(DVector::zeros(2), cov),
        Err(SmpcError::CovarianceNotPsd(_))
    ));
}

#[test]
fn single_step_margin_is_support_function() {
    let (g, wb) = (0.3, 0.5);
    let pred = scalar(0.9, 1.0, g, 1);
    let mut cs = ConstraintSet::unconstrained(1, 1, 1);
    cs.xf_lo[0] = -1.0;
    cs.xf_hi[0] = 2.0;
    cs.w_half[0] = wb;
    let stats = DisturbanceStats::zero(1, 1);
    let x0 = DVector::from_element(1, 0.4);
    let lin = assemble_constraints(&x0, &pred, &cs, &stats, FeedbackStructure::Toeplitz).unwrap();
    assert_eq!(lin.a.nrows(), 2);
    // Row: b v <= hi - a x0 - |g| wb.
    assert!((lin.b[0] - (2.0 - 0.9 * 0.4 - g * wb)).abs() < 1e-15);
    assert!((lin.b[1] - (1.0 + 0.9 * 0.4 - g * wb)).abs() < 1e-15);

    cs.xf_lo[0] = -0.1;
    cs.xf_hi[0] = 0.1;
    assert!(matches!(
        assemble_constraints(&x0, &pred, &cs, &stats, FeedbackStructure::Toeplitz),
        Err(SmpcError::StructurallyInfeasible { row: 1 })
    ));
}

#[test]
fn zero_disturbance_box_gives_nominal_constraints() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let pred = random_system(2, 1, 1, 3, &mut rng);
    let mut cs = ConstraintSet::unconstrained(2, 1, 1);
    cs.x_lo.fill(-1.0);
    cs.x_hi.fill(1.0);
    cs.u_lo.fill(-2.0);
    cs.u_hi.fill(2.0);
    let stats = DisturbanceStats::zero(3, 1);
    let x0 = DVector::from_vec(vec![0.1, 0.2]);
    let lin = assemble_constraints(&x0, &pred, &cs, &stats, FeedbackStructure::Toeplitz).unwrap();
    assert_eq!((lin.n_t, lin.n_s), (0, 0));
    // Nominal: two input rows per step plus two state rows per state per
    // non-terminal predicted step (terminal box is unbounded).
    assert_eq!(lin.a.nrows(), 2 * 3 + 2 * 2 * 2);
}

#[test]
fn sampled_disturbances_respect_tightened_boxes() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (n, n_u, n_w, horizon) = (2, 1, 1, 4);
    let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.0, 1.0]);
    let b = DMatrix::from_row_slice(2, 1, &[0.005, 0.1]);
    let g = DMatrix::from_row_slice(2, 1, &[0.005, 0.1]);
    let pred = stack_prediction(&a, &b, &g, horizon).unwrap();
    let weights = CostWeights {
        q: DMatrix::identity(2, 2),
        r: DMatrix::identity(1, 1) * 0.1,
        p: DMatrix::identity(2, 2) * 5.0,
    };
    let mut cs = ConstraintSet::unconstrained(n, n_u, n_w);
    cs.x_lo = DVector::from_vec(vec![-1.0, -0.5]);
    cs.x_hi = DVector::from_vec(vec![1.0, 0.5]);
    cs.xf_lo = cs.x_lo.clone();
    cs.xf_hi = cs.x_hi.clone();
    cs.u_lo.fill(-1.5);
    cs.u_hi.fill(1.5);
    cs.w_half.fill(0.4);
    let stats = DisturbanceStats::diagonal(DVector::from_element(horizon, 0.2), &[0.1]).unwrap();
    let mut checked = 0;
    for _ in 0..10 {
        let x0 = DVector::from_vec(vec![rng.random_range(-0.6..0.6), rng.random_range(-0.3..0.3)]);
        let sol = match solve_affine(&x0, &pred, &weights, &cs, &stats, FeedbackStructure::Toeplitz, &tight(), None) {
            Ok(sol) => sol,
            Err(_) => continue,
        };
        let policy = sol.policy(horizon, n_u, n_w).unwrap();
        for draw in 0..1000 {
            let w = DVector::from_fn(horizon, |i, _| {
                let dev = if draw < 16 {
                    if (draw >> i) & 1 == 1 { 0.4 } else { -0.4 }
                } else {
                    rng.random_range(-0.4..0.4)
                };
                0.2 + dev
            });
            let u = DVector::from_fn(horizon, |i, _| policy_to_input(&policy, &w, i).unwrap()[0]);
            assert!(u.amax() <= 1.5 + 1e-6);
            let x = pred.predict(&x0, &u, &w);
            for i in 1..=horizon {
                assert!(x[2 * i].abs() <= 1.0 + 1e-6);
                assert!(x[2 * i + 1].abs() <= 0.5 + 1e-6);
            }
            checked += 1;
        }
    }
    assert!(checked >= 5000, "only {checked} draws checked");
}

/// Explicit least-squares representation of the scalar N = 3 expected cost
/// using deterministic sigma points that reproduce the mean and covariance.
fn scalar_normal_equations(
    a: f64,
    b: f64,
    g: f64,
    q: f64,
    r: f64,
    p: f64,
    x0: f64,
    mu: &[f64; 3],
    std: f64,
) -> (DVector<f64>, f64) {
    // z = [v0, v1, v2, m1, m2]; u1 = m1 w0 + v1, u2 = m2 w0 + m1 w1 + v2.
    let mut points = Vec::new();
    for k in 0..3 {
        for sign in [1.0, -1.0] {
            let mut w = *mu;
            w[k] += sign * std * 3f64.sqrt();
            points.push(w);
        }
    }
    let weight = 1.0 / points.len() as f64;
    let mut rows: Vec<(Vec<f64>, f64)> = Vec::new();
    for w in &points {
        let s = weight.sqrt();
        // Inputs as affine functions of z.
        let u0 = [1.0, 0.0, 0.0, 0.0, 0.0];
        let u1 = [0.0, 1.0, 0.0, w[0], 0.0];
        let u2 = [0.0, 0.0, 1.0, w[1], w[0]];
        let mut x = ([0.0; 5], x0);
        rows.push((vec![0.0; 5], s * q.sqrt() * x0));
        for (i, u) in [u0, u1, u2].iter().enumerate() {
            let mut coef = [0.0; 5];
            for j in 0..5 {
                coef[j] = a * x.0[j] + b * u[j];
            }
            x = (coef, a * x.1 + g * w[i]);
            let wt = if i == 2 { p } else { q };
            rows.push((coef.iter().map(|c| s * wt.sqrt() * c).collect(), s * wt.sqrt() * x.1));
            rows.push((u.iter().map(|c| s * r.sqrt() * c).collect(), 0.0));
        }
    }
    let am = DMatrix::from_fn(rows.len(), 5, |i, j| rows[i].0[j]);
    let bv = DVector::from_fn(rows.len(), |i, _| rows[i].1);
    let ata = am.transpose() * &am;
    let z = -ata.lu().solve(&(am.transpose() * &bv)).unwrap();
    let res = &am * &z + &bv;
    (z, res.norm_squared())
}

#[test]
fn unconstrained_scalar_matches_normal_equations() {
    let (a, b, g, q, r, p) = (1.05, 0.5, 0.2, 1.0, 0.3, 2.0);
    let mu = [0.3, -0.2, 0.5];
    let std = 0.4;
    let pred = scalar(a, b, g, 3);
    let stats = DisturbanceStats::diagonal(DVector::from_row_slice(&mu), &[std]).unwrap();
    let weights = scalar_weights(q, r, p);
    let cs = ConstraintSet::unconstrained(1, 1, 1);
    for x0 in [-1.0, 0.0, 0.8] {
        let (z, value) = scalar_normal_equations(a, b, g, q, r, p, x0, &mu, std);
        let x = DVector::from_element(1, x0);
        let sol = solve_affine(&x, &pred, &weights, &cs, &stats, FeedbackStructure::Toeplitz, &tight(), None).unwrap();
        for i in 0..3 {
            assert!((sol.v[i] - z[i]).abs() < 1e-6, "v{i}: {} vs {}", sol.v[i], z[i]);
        }
        assert!((sol.m[0] - z[3]).abs() < 1e-6 && (sol.m[1] - z[4]).abs() < 1e-6);
        assert!((sol.cost - value).abs() < 1e-8 * value.max(1.0));

        let fast = UnconstrainedSolver::new(&pred, &weights, &stats, FeedbackStructure::Toeplitz, 0.0).unwrap();
        let (v, m) = fast.solve(&x, &pred, &stats.mu);
        assert!((v - z.rows(0, 3)).amax() < 1e-9);
        assert!((m - z.rows(3, 2)).amax() < 1e-9);
    }
}

#[test]
fn optimal_value_is_midpoint_convex() {
    let (pred, weights, cs, stats) = benchmark();
    let value = |x: f64| {
        solve_affine(&DVector::from_element(1, x), &pred, &weights, &cs, &stats, FeedbackStructure::Toeplitz, &tight(), None)
            .unwrap()
            .cost
    };
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..50 {
        let (x1, x2) = (rng.random_range(-1.8..1.8), rng.random_range(-1.8..1.8));
        let lhs = value(0.5 * (x1 + x2));
        let rhs = 0.5 * (value(x1) + value(x2));
        assert!(lhs <= rhs + 1e-7, "{lhs} > {rhs} at ({x1}, {x2})");
    }
}

#[test]
fn zero_state_zero_disturbance_gives_zero_plan() {
    let (pred, weights, mut cs, _) = benchmark();
    cs.w_half.fill(0.0);
    let stats = DisturbanceStats::zero(3, 1);
    let (policy, value) = solve_sadf(&DVector::zeros(1), &pred, &weights, &cs, &stats).unwrap();
    assert!(policy.v.amax() < 1e-8);
    assert!(value.abs() < 1e-10);
}

#[test]
fn lyapunov_candidate_is_nonnegative_and_decreases() {
    let (pred, weights, cs, stats) = benchmark();
    let zero = DVector::zeros(1);
    assert_eq!(lyapunov_value(&zero, &pred, &weights, &cs, &stats).unwrap(), 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..100 {
        let x = DVector::from_element(1, rng.random_range(-1.8..1.8));
        let v = lyapunov_value(&x, &pred, &weights, &cs, &stats).unwrap();
        assert!(v >= -1e-9, "V({}) = {v}", x[0]);
    }
    for i in 0..40 {
        let x0 = -1.5 + 3.0 * i as f64 / 39.0;
        if x0.abs() < 0.05 {
            continue;
        }
        let x = DVector::from_element(1, x0);
        let (policy, _) = solve_sadf(&x, &pred, &weights, &cs, &stats).unwrap();
        let next = DVector::from_element(1, 1.2 * x0 + policy.v[0]);
        let dv = lyapunov_value(&next, &pred, &weights, &cs, &stats).unwrap()
            - lyapunov_value(&x, &pred, &weights, &cs, &stats).unwrap();
        assert!(dv <= 1e-7, "V increased by {dv} at {x0}");
    }
}

#[test]
fn toeplitz_gain_matches_full_gain_optimum() {
    let (pred, weights, _, stats) = benchmark();
    let cs = ConstraintSet::unconstrained(1, 1, 1);
    for x0 in [-1.0, 0.3, 1.5] {
        let x = DVector::from_element(1, x0);
        let sadf = solve_affine(&x, &pred, &weights, &cs, &stats, FeedbackStructure::Toeplitz, &tight(), None).unwrap();
        let adf = solve_affine(&x, &pred, &weights, &cs, &stats, FeedbackStructure::Full, &tight(), None).unwrap();
        assert!(adf.cost <= sadf.cost + 1e-8);
        assert!((sadf.cost - adf.cost).abs() < 1e-7 * sadf.cost.max(1.0), "{} vs {}", sadf.cost, adf.cost);
    }
}

#[test]
fn known_mean_shrinks_steady_offset() {
    // Closed loop x+ = a x + b u + g d with a constant disturbance d.
    let (a, b, g, d) = (1.0, 0.1, 0.1, 0.5);
    let horizon = 10;
    let pred = scalar(a, b, g, horizon);
    let weights = scalar_weights(1.0, 1e-3, 10.0);
    let run = |mu: f64| {
        let stats = DisturbanceStats::diagonal(DVector::from_element(horizon, mu), &[0.05]).unwrap();
        let solver = UnconstrainedSolver::new(&pred, &weights, &stats, FeedbackStructure::Toeplitz, 1e-10).unwrap();
        let mut x = 0.0;
        for _ in 0..400 {
            let (v, _) = solver.solve(&DVector::from_element(1, x), &pred, &stats.mu);
            x = a * x + b * v[0] + g * d;
        }
        x.abs()
    };
    let (informed, blind) = (run(d), run(0.0));
    assert!(blind >= 10.0 * informed, "blind {blind} informed {informed}");
}

#[test]
fn fast_path_matches_qp_when_inactive() {
    let (pred, weights, cs, stats) = benchmark();
    let x = DVector::from_element(1, 0.4);
    let qp = solve_affine(&x, &pred, &weights, &cs, &stats, FeedbackStructure::Toeplitz, &tight(), None).unwrap();
    let fast = UnconstrainedSolver::new(&pred, &weights, &stats, FeedbackStructure::Toeplitz, 1e-10).unwrap();
    let (v, m) = fast.solve(&x, &pred, &stats.mu);
    let lin = assemble_constraints(&x, &pred, &cs, &stats, FeedbackStructure::Toeplitz).unwrap();
    assert!(lin.max_violation(&v, &m) <= 0.0);
    assert!((v - &qp.v).amax() < 1e-6);
    assert!((m - &qp.m).amax() < 1e-6);
    assert!((fast.cost(&x, &pred, &stats.mu, &qp.v, &qp.m) - qp.cost).abs() < 1e-10);
}

#[test]
fn feedback_map_dimensions() {
    let toeplitz = FeedbackMap::new(FeedbackStructure::Toeplitz, 4, 2, 3);
    let full = FeedbackMap::new(FeedbackStructure::Full, 4, 2, 3);
    assert_eq!(toeplitz.dim, 3 * 2 * 3);
    assert_eq!(full.dim, 6 * 2 * 3);
    assert_eq!(toeplitz.entries.len(), full.entries.len());
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let m = DVector::from_fn(toeplitz.dim, |_, _| rng.random_range(-1.0..1.0));
    let c = DVector::from_fn(12, |_, _| rng.random_range(-1.0..1.0));
    assert!((toeplitz.lift_dense(&c) * &m - toeplitz.gain(&m) * &c).amax() < 1e-14);
}
