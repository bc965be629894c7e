#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use quadred_smpc::quad_dynamics::{stack_prediction, LinearPrediction};
use quadred_smpc::qp::QpSettings;
use quadred_smpc::sadf_smpc::{solve_dare, ConstraintSet, CostWeights, DisturbanceStats, SolveOptions};
use quadred_smpc::nn_core::{Mlp, OutputActivation};
use quadred_smpc::quadred::{DiscreteDistribution, Mdp};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Exact minimizer of a strictly convex box QP by enumerating all 3^n
/// lower/free/upper activity patterns and keeping the best feasible
/// stationary point of each reduced problem.
pub fn box_qp_enumeration(
    p: &DMatrix<f64>,
    q: &DVector<f64>,
    lo: &DVector<f64>,
    hi: &DVector<f64>,
) -> DVector<f64> {
    let n = q.len();
    let mut best: Option<(f64, DVector<f64>)> = None;
    for code in 0..3usize.pow(n as u32) {
        let mut pattern = vec![0u8; n];
        let mut c = code;
        for slot in pattern.iter_mut() {
            *slot = (c % 3) as u8;
            c /= 3;
        }
        let free: Vec<usize> = (0..n).filter(|&i| pattern[i] == 1).collect();
        let mut x = DVector::zeros(n);
        for i in 0..n {
            match pattern[i] {
                0 => x[i] = lo[i],
                2 => x[i] = hi[i],
                _ => {}
            }
        }
        if !free.is_empty() {
            let k = free.len();
            let pff = DMatrix::from_fn(k, k, |a, b| p[(free[a], free[b])]);
            let mut rhs = DVector::from_fn(k, |a, _| -q[free[a]]);
            for a in 0..k {
                for j in 0..n {
                    if pattern[j] != 1 {
                        rhs[a] -= p[(free[a], j)] * x[j];
                    }
                }
            }
            let sol = pff.lu().solve(&rhs).expect("reduced system singular");
            for a in 0..k {
                x[free[a]] = sol[a];
            }
        }
        if (0..n).any(|i| x[i] < lo[i] - 1e-12 || x[i] > hi[i] + 1e-12) {
            continue;
        }
        let f = 0.5 * x.dot(&(p * &x)) + q.dot(&x);
        if best.as_ref().map_or(true, |(fb, _)| f < *fb) {
            best = Some((f, x));
        }
    }
    best.expect("box is nonempty").1
}

pub struct BoxQp {
    pub p: DMatrix<f64>,
    pub q: DVector<f64>,
    pub lo: DVector<f64>,
    pub hi: DVector<f64>,
}

/// Strictly convex box QP whose unconstrained minimizer usually leaves the box.
pub fn random_box_qp<R: Rng>(n: usize, rng: &mut R) -> BoxQp {
    let mut normal = || -> f64 { StandardNormal.sample(rng) };
    let m = DMatrix::from_fn(n, n, |_, _| normal());
    let p = m.transpose() * &m + DMatrix::identity(n, n) * 0.1;
    let q = DVector::from_fn(n, |_, _| 2.0 * normal());
    let lo = DVector::from_fn(n, |_, _| -0.2 - normal().abs());
    let hi = DVector::from_fn(n, |_, _| 0.2 + normal().abs());
    BoxQp { p, q, lo, hi }
}

pub fn classical_q(mdp: &Mdp, policy: &[usize]) -> Vec<f64> {
    // Solve (I - gamma P_pi) Q = r on state-action pairs.
    let (ns, na) = (mdp.n_states, mdp.n_actions);
    let n = ns * na;
    let mut m = DMatrix::<f64>::identity(n, n);
    let mut r = DVector::zeros(n);
    for s in 0..ns {
        for a in 0..na {
            let row = s * na + a;
            r[row] = mdp.r(s, a);
            for s2 in 0..ns {
                m[(row, s2 * na + policy[s2])] -= mdp.gamma * mdp.p(s, a, s2);
            }
        }
    }
    m.lu().solve(&r).unwrap().iter().copied().collect()
}

pub fn value_iteration_policy(mdp: &Mdp) -> (Vec<usize>, Vec<f64>) {
    let (ns, na) = (mdp.n_states, mdp.n_actions);
    let mut v = vec![0.0; ns];
    let mut q = vec![0.0; ns * na];
    for _ in 0..5000 {
        for s in 0..ns {
            for a in 0..na {
                q[s * na + a] = mdp.r(s, a) + mdp.gamma * (0..ns).map(|t| mdp.p(s, a, t) * v[t]).sum::<f64>();
            }
        }
        for s in 0..ns {
            v[s] = q[s * na..(s + 1) * na].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        }
    }
    let policy = (0..ns)
        .map(|s| {
            let row = &q[s * na..(s + 1) * na];
            (0..na).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap()
        })
        .collect();
    (policy, q)
}

/// Exhaustive search on a 1e-3 grid; W1 to an N-atom quantile set separates
/// into one term per quantile interval.
pub fn grid_w1_optimum(dist: &DiscreteDistribution, n_q: usize) -> f64 {
    let lo = dist.atoms.iter().map(|a| a.0).fold(f64::INFINITY, f64::min);
    let hi = dist.atoms.iter().map(|a| a.0).fold(f64::NEG_INFINITY, f64::max);
    let steps = ((hi - lo) / 1e-3).round() as i64;
    let mut total = 0.0;
    for i in 0..n_q {
        let mut best = f64::INFINITY;
        for k in 0..=steps {
            let q = lo + k as f64 * 1e-3;
            best = best.min(interval_cost(dist, i, n_q, q));
        }
        total += best;
    }
    total
}

/// `int_{i/N}^{(i+1)/N} |F^-1(tau) - q| dtau`
pub fn interval_cost(dist: &DiscreteDistribution, i: usize, n_q: usize, q: f64) -> f64 {
    let mut atoms = dist.atoms.clone();
    atoms.sort_by(|a, b| a.0.total_cmp(&b.0));
    let (a, b) = (i as f64 / n_q as f64, (i + 1) as f64 / n_q as f64);
    let mut cost = 0.0;
    let mut level: f64 = 0.0;
    for (v, w) in atoms {
        let (s, e) = (level.max(a), (level + w).min(b));
        if e > s {
            cost += (e - s) * (v - q).abs();
        }
        level += w;
    }
    cost
}

/// Weighted sum of outputs over a small batch; gradients of this scalar are
/// what the finite-difference check compares against.
pub fn loss(net: &Mlp, x: &DMatrix<f64>, weights: &DMatrix<f64>) -> f64 {
    let tape = net.forward_batch(x).unwrap();
    tape.output().component_mul(weights).sum()
}

pub fn random_net(rng: &mut ChaCha8Rng) -> (Mlp, DMatrix<f64>, DMatrix<f64>) {
    let depth = rng.random_range(1..4);
    let mut dims = vec![rng.random_range(1..5)];
    for _ in 0..depth {
        dims.push(rng.random_range(1..6));
    }
    let output = if rng.random_bool(0.5) {
        OutputActivation::ScaledTanh(rng.random_range(0.5..3.0))
    } else {
        OutputActivation::Identity
    };
    let net = Mlp::new(&dims, output, 0.5, rng).unwrap();
    let batch = 3;
    let x = DMatrix::from_fn(dims[0], batch, |_, _| rng.random_range(-1.0..1.0));
    let w = DMatrix::from_fn(*dims.last().unwrap(), batch, |_, _| rng.random_range(-1.0..1.0));
    (net, x, w)
}

/// Worst relative error between backprop and central differences over
/// parameter and input gradients of `count` random networks.
pub fn worst_network_gradient_error(count: usize, rng: &mut ChaCha8Rng) -> f64 {
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for _ in 0..count {
        let (net, x, w) = random_net(rng);
        let tape = net.forward_batch(&x).unwrap();
        let (grads, input_grad) = net.backward(&tape, &w).unwrap();
        for l in 0..net.layers.len() {
            let (rows, cols) = net.layers[l].weight.shape();
            for r in 0..rows {
                for c in 0..cols {
                    let mut plus = net.clone();
                    let mut minus = net.clone();
                    plus.layers[l].weight[(r, c)] += h;
                    minus.layers[l].weight[(r, c)] -= h;
                    let fd = (loss(&plus, &x, &w) - loss(&minus, &x, &w)) / (2.0 * h);
                    let g = grads.layers[l].weight[(r, c)];
                    worst = worst.max((g - fd).abs() / g.abs().max(fd.abs()).max(1e-6));
                }
                let mut plus = net.clone();
                let mut minus = net.clone();
                plus.layers[l].bias[r] += h;
                minus.layers[l].bias[r] -= h;
                let fd = (loss(&plus, &x, &w) - loss(&minus, &x, &w)) / (2.0 * h);
                let g = grads.layers[l].bias[r];
                worst = worst.max((g - fd).abs() / g.abs().max(fd.abs()).max(1e-6));
            }
        }
        for r in 0..x.nrows() {
            for c in 0..x.ncols() {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[(r, c)] += h;
                xm[(r, c)] -= h;
                let fd = (loss(&net, &xp, &w) - loss(&net, &xm, &w)) / (2.0 * h);
                let g = input_grad[(r, c)];
                worst = worst.max((g - fd).abs() / g.abs().max(fd.abs()).max(1e-6));
            }
        }
    }
    worst
}

pub fn scalar(a: f64, b: f64, g: f64, horizon: usize) -> LinearPrediction {
    stack_prediction(
        &DMatrix::from_element(1, 1, a),
        &DMatrix::from_element(1, 1, b),
        &DMatrix::from_element(1, 1, g),
        horizon,
    )
    .unwrap()
}

pub fn scalar_weights(q: f64, r: f64, p: f64) -> CostWeights {
    CostWeights {
        q: DMatrix::from_element(1, 1, q),
        r: DMatrix::from_element(1, 1, r),
        p: DMatrix::from_element(1, 1, p),
    }
}

pub fn tight() -> SolveOptions {
    SolveOptions {
        qp: QpSettings {
            eps_abs: 1e-10,
            eps_rel: 1e-10,
            max_iter: 100_000,
            ..QpSettings::default()
        },
        m_regularization: 1e-10,
    }
}

pub fn random_matrix(rows: usize, cols: usize, scale: f64, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| scale * rng.random_range(-1.0..1.0))
}

pub fn random_psd(n: usize, rng: &mut ChaCha8Rng, floor: f64) -> DMatrix<f64> {
    let m = random_matrix(n, n, 1.0, rng);
    &m * m.transpose() + DMatrix::identity(n, n) * floor
}

pub fn random_system(n: usize, n_u: usize, n_w: usize, horizon: usize, rng: &mut ChaCha8Rng) -> LinearPrediction {
    let a = random_matrix(n, n, 0.6, rng) + DMatrix::identity(n, n) * 0.5;
    stack_prediction(
        &a,
        &random_matrix(n, n_u, 1.0, rng),
        &random_matrix(n, n_w, 0.5, rng),
        horizon,
    )
    .unwrap()
}

pub fn benchmark() -> (LinearPrediction, CostWeights, ConstraintSet, DisturbanceStats) {
    let (a, b) = (1.2, 1.0);
    let pred = scalar(a, b, 1.0, 3);
    let p = solve_dare(
        &DMatrix::from_element(1, 1, a),
        &DMatrix::from_element(1, 1, b),
        &DMatrix::from_element(1, 1, 1.0),
        &DMatrix::from_element(1, 1, 0.5),
        1e-14,
        100_000,
    )
    .unwrap()[(0, 0)];
    let weights = scalar_weights(1.0, 0.5, p);
    let mut cs = ConstraintSet::unconstrained(1, 1, 1);
    cs.x_lo.fill(-3.0);
    cs.x_hi.fill(3.0);
    cs.xf_lo.fill(-3.0);
    cs.xf_hi.fill(3.0);
    cs.u_lo.fill(-2.0);
    cs.u_hi.fill(2.0);
    cs.w_half.fill(0.1);
    let stats = DisturbanceStats::diagonal(DVector::zeros(3), &[0.05]).unwrap();
    (pred, weights, cs, stats)
}
