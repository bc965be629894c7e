//! Stochastic MPC with simplified affine disturbance feedback.
//!
//! Inputs over the horizon follow `u_i = sum_{k<i} M_{i-k} w_k + v_i` with a
//! lower block-Toeplitz gain. For disturbances with mean `mu` and covariance
//! `C_w = S S'` the expected quadratic cost is an explicit convex quadratic in
//! `(v, m)`, where `m` stacks the free entries of the gain. Constraints are
//! tightened robustly over the box `mu + [-w_half, w_half]`.
//!
//! Decision vector layout: `[v, m, t, s]` where `t >= |m|` bounds the
//! input-constraint tightening and `s` bounds the disturbance response of
//! constrained state rows.

mod controller;

pub use controller::{
    solve_dare, terminal_weight, ControlOutput, SmpcConfig, SolvePath, TrackingController,
};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::qp::{self, QpError, QpProblem, QpSettings, QpStatus, WarmStart};
use crate::quad_dynamics::{DynamicsError, LinearPrediction};

#[derive(Debug, Error)]
pub enum SmpcError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("covariance is not positive semidefinite (min eigenvalue {0:e})")]
    CovarianceNotPsd(f64),
    #[error("invalid weights: {0}")]
    Weights(&'static str),
    #[error("invalid constraint set: {0}")]
    Constraints(String),
    #[error("tightened constraint on state row {row} is empty")]
    StructurallyInfeasible { row: usize },
    #[error("step index {index} outside horizon {horizon}")]
    StepOutOfRange { index: usize, horizon: usize },
    #[error("QP finished with status {0:?}")]
    SolveFailed(QpStatus),
    #[error("value undefined: {0}")]
    Undefined(String),
    #[error(transparent)]
    Qp(#[from] QpError),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
}

/// Which entries of the stacked gain `M` are free.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeedbackStructure {
    /// `M_{i,k} = M_{i-k}`: one block per lag (simplified affine feedback).
    Toeplitz,
    /// Independent strictly-lower-triangular blocks (full affine feedback).
    Full,
}

/// One scalar entry of the stacked gain: `M[u_row, w_col] = m[param]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GainEntry {
    pub u_row: usize,
    pub w_col: usize,
    pub param: usize,
}

/// Linear map from the parameter vector `m` to the stacked gain matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct FeedbackMap {
    pub structure: FeedbackStructure,
    pub horizon: usize,
    pub n_u: usize,
    pub n_w: usize,
    pub dim: usize,
    pub entries: Vec<GainEntry>,
}

impl FeedbackMap {
    pub fn new(structure: FeedbackStructure, horizon: usize, n_u: usize, n_w: usize) -> Self {
        let mut entries = Vec::new();
        let mut dim = 0;
        match structure {
            FeedbackStructure::Toeplitz => {
                for lag in 1..horizon {
                    for r in 0..n_u {
                        for a in 0..n_w {
                            let param = ((lag - 1) * n_u + r) * n_w + a;
                            for i in lag..horizon {
                                let k = i - lag;
                                entries.push(GainEntry {
                                    u_row: i * n_u + r,
                                    w_col: k * n_w + a,
                                    param,
                                });
                            }
                        }
                    }
                }
                dim = horizon.saturating_sub(1) * n_u * n_w;
            }
            FeedbackStructure::Full => {
                for i in 1..horizon {
                    for k in 0..i {
                        for r in 0..n_u {
                            for a in 0..n_w {
                                entries.push(GainEntry {
                                    u_row: i * n_u + r,
                                    w_col: k * n_w + a,
                                    param: dim,
                                });
                                dim += 1;
                            }
                        }
                    }
                }
            }
        }
        Self {
            structure,
            horizon,
            n_u,
            n_w,
            dim,
            entries,
        }
    }

    pub fn gain(&self, m: &DVector<f64>) -> DMatrix<f64> {
        let mut g = DMatrix::zeros(self.horizon * self.n_u, self.horizon * self.n_w);
        for e in &self.entries {
            g[(e.u_row, e.w_col)] = m[e.param];
        }
        g
    }

    /// `M c` for parameters `m`.
    pub fn apply(&self, m: &DVector<f64>, c: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.horizon * self.n_u);
        for e in &self.entries {
            out[e.u_row] += m[e.param] * c[e.w_col];
        }
        out
    }

    /// Nonzero entries `(u_row, param, value)` of the matrix `L_c` with
    /// `L_c m = M c`.
    pub fn lift(&self, c: &DVector<f64>) -> Vec<(usize, usize, f64)> {
        self.entries
            .iter()
            .filter(|e| c[e.w_col] != 0.0)
            .map(|e| (e.u_row, e.param, c[e.w_col]))
            .collect()
    }

    /// Dense `L_c`.
    pub fn lift_dense(&self, c: &DVector<f64>) -> DMatrix<f64> {
        let mut l = DMatrix::zeros(self.horizon * self.n_u, self.dim);
        for (row, p, v) in self.lift(c) {
            l[(row, p)] += v;
        }
        l
    }
}

/// `H L` for a sparse `L` given by triplets.
fn mat_times_lift(h: &DMatrix<f64>, lift: &[(usize, usize, f64)], dim: usize) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(h.nrows(), dim);
    for &(row, p, v) in lift {
        let mut col = out.column_mut(p);
        col.axpy(v, &h.column(row), 1.0);
    }
    out
}

/// `L' X` for a sparse `L` given by triplets.
fn lift_t_times(lift: &[(usize, usize, f64)], x: &DMatrix<f64>, dim: usize) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(dim, x.ncols());
    for &(row, p, v) in lift {
        let src = x.row(row) * v;
        let mut dst = out.row_mut(p);
        dst += src;
    }
    out
}

fn lift_t_times_vec(lift: &[(usize, usize, f64)], x: &DVector<f64>, dim: usize) -> DVector<f64> {
    let mut out = DVector::zeros(dim);
    for &(row, p, v) in lift {
        out[p] += v * x[row];
    }
    out
}

/// SADF policy: Toeplitz feedback blocks `M_1..M_{N-1}` and open-loop inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct AffinePolicy {
    pub horizon: usize,
    pub n_u: usize,
    pub n_w: usize,
    /// `m_blocks[j - 1]` is `M_j` (`n_u x n_w`).
    pub m_blocks: Vec<DMatrix<f64>>,
    /// `N * n_u` stacked open-loop inputs.
    pub v: DVector<f64>,
}

impl AffinePolicy {
    pub fn zeros(horizon: usize, n_u: usize, n_w: usize) -> Self {
        Self {
            horizon,
            n_u,
            n_w,
            m_blocks: vec![DMatrix::zeros(n_u, n_w); horizon.saturating_sub(1)],
            v: DVector::zeros(horizon * n_u),
        }
    }

    /// Build from Toeplitz parameters in `FeedbackMap` order.
    pub fn from_params(horizon: usize, n_u: usize, n_w: usize, m: &DVector<f64>, v: DVector<f64>) -> Self {
        let mut policy = Self::zeros(horizon, n_u, n_w);
        for lag in 1..horizon {
            for r in 0..n_u {
                for a in 0..n_w {
                    policy.m_blocks[lag - 1][(r, a)] = m[((lag - 1) * n_u + r) * n_w + a];
                }
            }
        }
        policy.v = v;
        policy
    }

    pub fn params(&self) -> DVector<f64> {
        let mut m = DVector::zeros(self.horizon.saturating_sub(1) * self.n_u * self.n_w);
        for (j, block) in self.m_blocks.iter().enumerate() {
            for r in 0..self.n_u {
                for a in 0..self.n_w {
                    m[(j * self.n_u + r) * self.n_w + a] = block[(r, a)];
                }
            }
        }
        m
    }

    /// Dense lower block-Toeplitz gain.
    pub fn dense_gain(&self) -> DMatrix<f64> {
        FeedbackMap::new(FeedbackStructure::Toeplitz, self.horizon, self.n_u, self.n_w).gain(&self.params())
    }

    /// Shift one step: drop the first input and repeat the last one.
    pub fn shifted(&self) -> Self {
        let mut next = self.clone();
        let n_u = self.n_u;
        if self.horizon > 1 {
            let tail = self.v.rows(n_u, (self.horizon - 1) * n_u).into_owned();
            next.v.rows_mut(0, (self.horizon - 1) * n_u).copy_from(&tail);
        }
        next
    }
}

/// Evaluate `u_i = sum_{k<i} M_{i-k} w_k + v_i`.
pub fn policy_to_input(policy: &AffinePolicy, w_seq: &DVector<f64>, i: usize) -> Result<DVector<f64>, SmpcError> {
    if i >= policy.horizon {
        return Err(SmpcError::StepOutOfRange {
            index: i,
            horizon: policy.horizon,
        });
    }
    if w_seq.len() < i * policy.n_w {
        return Err(SmpcError::Dimension(format!(
            "need {} disturbance values, got {}",
            i * policy.n_w,
            w_seq.len()
        )));
    }
    let mut u = policy.v.rows(i * policy.n_u, policy.n_u).into_owned();
    for k in 0..i {
        u += &policy.m_blocks[i - k - 1] * w_seq.rows(k * policy.n_w, policy.n_w);
    }
    Ok(u)
}

/// Mean and covariance of the stacked disturbance sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct DisturbanceStats {
    pub mu: DVector<f64>,
    pub cov: DMatrix<f64>,
    /// Symmetric square root of `cov`.
    pub sqrt: DMatrix<f64>,
}

impl DisturbanceStats {
    pub fn new(mu: DVector<f64>, cov: DMatrix<f64>) -> Result<Self, SmpcError> {
        let n = mu.len();
        if cov.shape() != (n, n) {
            return Err(SmpcError::Dimension(format!("covariance {:?} for mean of {n}", cov.shape())));
        }
        if mu.iter().chain(cov.iter()).any(|v| !v.is_finite()) {
            return Err(SmpcError::Dimension("non-finite disturbance statistics".into()));
        }
        let sym = (&cov + cov.transpose()) * 0.5;
        if (&sym - &cov).amax() > 1e-12 * cov.amax().max(1.0) {
            return Err(SmpcError::CovarianceNotPsd(f64::NAN));
        }
        let is_diag = (0..n).all(|i| (0..n).all(|j| i == j || sym[(i, j)] == 0.0));
        let sqrt = if is_diag {
            if let Some(d) = sym.diagonal().iter().find(|&&d| d < 0.0) {
                return Err(SmpcError::CovarianceNotPsd(*d));
            }
            DMatrix::from_diagonal(&sym.diagonal().map(f64::sqrt))
        } else {
            let eig = sym.clone().symmetric_eigen();
            let min = eig.eigenvalues.min();
            if min < -1e-10 * sym.amax().max(1.0) {
                return Err(SmpcError::CovarianceNotPsd(min));
            }
            let root = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
            &eig.eigenvectors * DMatrix::from_diagonal(&root) * eig.eigenvectors.transpose()
        };
        Ok(Self { mu, cov: sym, sqrt })
    }

    pub fn zero(horizon: usize, n_w: usize) -> Self {
        let n = horizon * n_w;
        Self {
            mu: DVector::zeros(n),
            cov: DMatrix::zeros(n, n),
            sqrt: DMatrix::zeros(n, n),
        }
    }

    /// Independent steps with per-axis standard deviation `std`.
    pub fn diagonal(mu: DVector<f64>, std: &[f64]) -> Result<Self, SmpcError> {
        let n_w = std.len();
        if n_w == 0 || mu.len() % n_w != 0 {
            return Err(SmpcError::Dimension("mean length must be a multiple of the axis count".into()));
        }
        let var = DVector::from_fn(mu.len(), |i, _| std[i % n_w] * std[i % n_w]);
        Self::new(mu, DMatrix::from_diagonal(&var))
    }
}

/// Stage, input and terminal weights of the finite-horizon cost.
#[derive(Debug, Clone, PartialEq)]
pub struct CostWeights {
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub p: DMatrix<f64>,
}

impl CostWeights {
    pub fn validate(&self, n: usize, n_u: usize) -> Result<(), SmpcError> {
        if self.q.shape() != (n, n) || self.p.shape() != (n, n) || self.r.shape() != (n_u, n_u) {
            return Err(SmpcError::Dimension("weight shapes".into()));
        }
        let sym = |m: &DMatrix<f64>| (m - m.transpose()).amax() <= 1e-12 * m.amax().max(1.0);
        if !(sym(&self.q) && sym(&self.r) && sym(&self.p)) {
            return Err(SmpcError::Weights("weights must be symmetric"));
        }
        if qp::min_eigenvalue(&self.q) < -1e-12 || qp::min_eigenvalue(&self.p) < -1e-12 {
            return Err(SmpcError::Weights("state weights must be positive semidefinite"));
        }
        if self.r.clone().cholesky().is_none() {
            return Err(SmpcError::Weights("input weight must be positive definite"));
        }
        Ok(())
    }

    /// Block-diagonal `(W_x, W_u)` over the horizon.
    pub fn stacked(&self, horizon: usize) -> (DMatrix<f64>, DMatrix<f64>) {
        let (n, n_u) = (self.q.nrows(), self.r.nrows());
        let mut wx = DMatrix::zeros((horizon + 1) * n, (horizon + 1) * n);
        for i in 0..horizon {
            wx.view_mut((i * n, i * n), (n, n)).copy_from(&self.q);
        }
        wx.view_mut((horizon * n, horizon * n), (n, n)).copy_from(&self.p);
        let mut wu = DMatrix::zeros(horizon * n_u, horizon * n_u);
        for i in 0..horizon {
            wu.view_mut((i * n_u, i * n_u), (n_u, n_u)).copy_from(&self.r);
        }
        (wx, wu)
    }
}

/// Boxes on states, terminal state and inputs (in the prediction's
/// coordinates), plus the half-width of the disturbance box around its mean.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintSet {
    pub x_lo: DVector<f64>,
    pub x_hi: DVector<f64>,
    pub xf_lo: DVector<f64>,
    pub xf_hi: DVector<f64>,
    pub u_lo: DVector<f64>,
    pub u_hi: DVector<f64>,
    pub w_half: DVector<f64>,
}

impl ConstraintSet {
    pub fn unconstrained(n: usize, n_u: usize, n_w: usize) -> Self {
        let inf = |k| DVector::from_element(k, f64::INFINITY);
        Self {
            x_lo: -inf(n),
            x_hi: inf(n),
            xf_lo: -inf(n),
            xf_hi: inf(n),
            u_lo: -inf(n_u),
            u_hi: inf(n_u),
            w_half: DVector::zeros(n_w),
        }
    }

    pub fn validate(&self, n: usize, n_u: usize, n_w: usize) -> Result<(), SmpcError> {
        let pairs = [
            (&self.x_lo, &self.x_hi, n, "state"),
            (&self.xf_lo, &self.xf_hi, n, "terminal"),
            (&self.u_lo, &self.u_hi, n_u, "input"),
        ];
        for (lo, hi, dim, name) in pairs {
            if lo.len() != dim || hi.len() != dim {
                return Err(SmpcError::Dimension(format!("{name} box")));
            }
            for i in 0..dim {
                if lo[i].is_nan() || hi[i].is_nan() || !(lo[i] <= 0.0 && 0.0 <= hi[i]) {
                    return Err(SmpcError::Constraints(format!(
                        "{name} box row {i} must contain the origin"
                    )));
                }
            }
        }
        if self.w_half.len() != n_w || self.w_half.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(SmpcError::Constraints("disturbance half-widths must be finite and nonnegative".into()));
        }
        Ok(())
    }

    fn has_finite_state_rows(&self) -> bool {
        self.x_lo
            .iter()
            .chain(self.x_hi.iter())
            .chain(self.xf_lo.iter())
            .chain(self.xf_hi.iter())
            .any(|v| v.is_finite())
    }
}

/// `1/2 z'Pz + q'z + constant` over `z = [v, m]`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticCost {
    pub hessian: DMatrix<f64>,
    pub gradient: DVector<f64>,
    pub constant: f64,
    pub n_v: usize,
    pub n_m: usize,
}

impl QuadraticCost {
    pub fn value(&self, v: &DVector<f64>, m: &DVector<f64>) -> f64 {
        let mut z = DVector::zeros(self.n_v + self.n_m);
        z.rows_mut(0, self.n_v).copy_from(v);
        z.rows_mut(self.n_v, self.n_m).copy_from(m);
        0.5 * z.dot(&(&self.hessian * &z)) + self.gradient.dot(&z) + self.constant
    }
}

/// Covariance contribution `sum_k |W_x^1/2 (B L_k m + G c_k)|^2 + |W_u^1/2 L_k m|^2`
/// over the columns `c_k` of `C_w^1/2`, as `1/2 m'Tm + g'm + c`. Independent
/// of the initial state and of the disturbance mean.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceTerms {
    pub hessian: DMatrix<f64>,
    pub gradient: DVector<f64>,
    pub constant: f64,
}

fn check_prediction(pred: &LinearPrediction, stats: &DisturbanceStats) -> Result<(), SmpcError> {
    let nw = pred.horizon * pred.n_w;
    if stats.mu.len() != nw {
        return Err(SmpcError::Dimension(format!(
            "disturbance mean has {} entries, horizon needs {nw}",
            stats.mu.len()
        )));
    }
    Ok(())
}

/// `H = B'W_x B + W_u`.
pub fn input_hessian(pred: &LinearPrediction, wx: &DMatrix<f64>, wu: &DMatrix<f64>) -> DMatrix<f64> {
    pred.b_stack.transpose() * wx * &pred.b_stack + wu
}

pub fn trace_terms(
    pred: &LinearPrediction,
    wx: &DMatrix<f64>,
    h: &DMatrix<f64>,
    stats: &DisturbanceStats,
    map: &FeedbackMap,
) -> TraceTerms {
    let dim = map.dim;
    let btwx_g = pred.b_stack.transpose() * wx * &pred.g_stack;
    let gtwx_g = pred.g_stack.transpose() * wx * &pred.g_stack;
    let mut hessian = DMatrix::zeros(dim, dim);
    let mut gradient = DVector::zeros(dim);
    let mut constant = 0.0;
    for k in 0..stats.sqrt.ncols() {
        let c = stats.sqrt.column(k).into_owned();
        if c.iter().all(|&v| v == 0.0) {
            continue;
        }
        let lift = map.lift(&c);
        let hl = mat_times_lift(h, &lift, dim);
        hessian += lift_t_times(&lift, &hl, dim) * 2.0;
        gradient += lift_t_times_vec(&lift, &(&btwx_g * &c), dim) * 2.0;
        constant += c.dot(&(&gtwx_g * &c));
    }
    TraceTerms {
        hessian,
        gradient,
        constant,
    }
}

/// Expected finite-horizon cost as an explicit quadratic in `(v, m)`.
pub fn assemble_cost(
    x0: &DVector<f64>,
    pred: &LinearPrediction,
    weights: &CostWeights,
    stats: &DisturbanceStats,
    structure: FeedbackStructure,
) -> Result<QuadraticCost, SmpcError> {
    weights.validate(pred.n, pred.n_u)?;
    check_prediction(pred, stats)?;
    if x0.len() != pred.n {
        return Err(SmpcError::Dimension("initial state".into()));
    }
    let map = FeedbackMap::new(structure, pred.horizon, pred.n_u, pred.n_w);
    let (wx, wu) = weights.stacked(pred.horizon);
    let h = input_hessian(pred, &wx, &wu);
    let trace = trace_terms(pred, &wx, &h, stats, &map);
    Ok(cost_from_parts(x0, pred, &wx, &h, stats, &map, &trace))
}

fn cost_from_parts(
    x0: &DVector<f64>,
    pred: &LinearPrediction,
    wx: &DMatrix<f64>,
    h: &DMatrix<f64>,
    stats: &DisturbanceStats,
    map: &FeedbackMap,
    trace: &TraceTerms,
) -> QuadraticCost {
    let (n_v, n_m) = (pred.horizon * pred.n_u, map.dim);
    let e = &pred.a_stack * x0 + &pred.offset + &pred.g_stack * &stats.mu;
    let wx_e = wx * &e;
    let bt_wx_e = pred.b_stack.transpose() * &wx_e;
    let lift_mu = map.lift(&stats.mu);
    let h_lmu = mat_times_lift(h, &lift_mu, n_m);

    let mut hessian = DMatrix::zeros(n_v + n_m, n_v + n_m);
    hessian.view_mut((0, 0), (n_v, n_v)).copy_from(&(h * 2.0));
    hessian.view_mut((0, n_v), (n_v, n_m)).copy_from(&(&h_lmu * 2.0));
    hessian
        .view_mut((n_v, 0), (n_m, n_v))
        .copy_from(&(h_lmu.transpose() * 2.0));
    let mm = lift_t_times(&lift_mu, &h_lmu, n_m) * 2.0 + &trace.hessian;
    hessian.view_mut((n_v, n_v), (n_m, n_m)).copy_from(&mm);

    let mut gradient = DVector::zeros(n_v + n_m);
    gradient.rows_mut(0, n_v).copy_from(&(&bt_wx_e * 2.0));
    let gm = lift_t_times_vec(&lift_mu, &bt_wx_e, n_m) * 2.0 + &trace.gradient;
    gradient.rows_mut(n_v, n_m).copy_from(&gm);

    QuadraticCost {
        hessian: (&hessian + hessian.transpose()) * 0.5,
        gradient,
        constant: e.dot(&wx_e) + trace.constant,
        n_v,
        n_m,
    }
}

/// Linear inequalities `A z <= b` over `z = [v, m, t, s]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearConstraints {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    /// `s = |aux_coef m + aux_offset|` is the tightest auxiliary choice.
    pub aux_coef: DMatrix<f64>,
    pub aux_offset: DVector<f64>,
    pub n_v: usize,
    pub n_m: usize,
    pub n_t: usize,
    pub n_s: usize,
}

impl LinearConstraints {
    pub fn n_vars(&self) -> usize {
        self.n_v + self.n_m + self.n_t + self.n_s
    }

    /// Full decision vector for `(v, m)` with the tightest auxiliaries.
    pub fn complete(&self, v: &DVector<f64>, m: &DVector<f64>) -> DVector<f64> {
        let mut z = DVector::zeros(self.n_vars());
        z.rows_mut(0, self.n_v).copy_from(v);
        z.rows_mut(self.n_v, self.n_m).copy_from(m);
        if self.n_t > 0 {
            z.rows_mut(self.n_v + self.n_m, self.n_t).copy_from(&m.abs());
        }
        if self.n_s > 0 {
            let s = (&self.aux_coef * m + &self.aux_offset).abs();
            z.rows_mut(self.n_v + self.n_m + self.n_t, self.n_s).copy_from(&s);
        }
        z
    }

    /// Largest violation of `A z <= b` at `(v, m)`; nonpositive when feasible.
    pub fn max_violation(&self, v: &DVector<f64>, m: &DVector<f64>) -> f64 {
        if self.b.is_empty() {
            return f64::NEG_INFINITY;
        }
        (&self.a * self.complete(v, m) - &self.b).max()
    }
}

/// Robustly tightened input, state and terminal boxes.
pub fn assemble_constraints(
    x0: &DVector<f64>,
    pred: &LinearPrediction,
    constraints: &ConstraintSet,
    stats: &DisturbanceStats,
    structure: FeedbackStructure,
) -> Result<LinearConstraints, SmpcError> {
    let (n, n_u, n_w, horizon) = (pred.n, pred.n_u, pred.n_w, pred.horizon);
    constraints.validate(n, n_u, n_w)?;
    check_prediction(pred, stats)?;
    let map = FeedbackMap::new(structure, horizon, n_u, n_w);
    let (n_v, n_m) = (horizon * n_u, map.dim);
    let wb = |col: usize| constraints.w_half[col % n_w];
    let lift_mu = map.lift(&stats.mu);

    // Input-row tightening coefficients on t.
    let mut u_coef = DMatrix::zeros(n_v, n_m);
    for e in &map.entries {
        u_coef[(e.u_row, e.param)] += wb(e.w_col);
    }
    let u_finite = (0..n_u).any(|r| constraints.u_lo[r].is_finite() || constraints.u_hi[r].is_finite());
    let robust_inputs = u_finite && constraints.w_half.iter().any(|&w| w > 0.0) && n_m > 0;
    let n_t = if robust_inputs { n_m } else { 0 };

    // State rows with finite bounds and their disturbance-response couplings.
    struct Aux {
        index: usize,
        width: f64,
        coef: DVector<f64>,
        g: f64,
    }
    struct StateRow {
        global: usize,
        lo: f64,
        hi: f64,
        fixed_margin: f64,
        aux: Vec<Aux>,
    }
    let mut state_rows = Vec::new();
    let mut n_s = 0;
    if constraints.has_finite_state_rows() {
        for i in 1..=horizon {
            let (lo, hi) = if i < horizon {
                (&constraints.x_lo, &constraints.x_hi)
            } else {
                (&constraints.xf_lo, &constraints.xf_hi)
            };
            for rho in 0..n {
                if !(lo[rho].is_finite() || hi[rho].is_finite()) {
                    continue;
                }
                let global = i * n + rho;
                let mut aux = Vec::new();
                let mut fixed_margin = 0.0;
                for k in 0..horizon * n_w {
                    let width = wb(k);
                    if width == 0.0 {
                        continue;
                    }
                    let mut coef = DVector::zeros(n_m);
                    for e in map.entries.iter().filter(|e| e.w_col == k) {
                        coef[e.param] += pred.b_stack[(global, e.u_row)];
                    }
                    let g = pred.g_stack[(global, k)];
                    if coef.iter().all(|&c| c == 0.0) {
                        fixed_margin += g.abs() * width;
                    } else {
                        aux.push(Aux {
                            index: n_s,
                            width,
                            coef,
                            g,
                        });
                        n_s += 1;
                    }
                }
                if hi[rho] - lo[rho] < 2.0 * fixed_margin {
                    return Err(SmpcError::StructurallyInfeasible { row: global });
                }
                state_rows.push(StateRow {
                    global,
                    lo: lo[rho],
                    hi: hi[rho],
                    fixed_margin,
                    aux,
                });
            }
        }
    }

    let n_vars = n_v + n_m + n_t + n_s;
    let mut rows: Vec<(DVector<f64>, f64)> = Vec::new();
    let mu_part = {
        let mut l = DMatrix::<f64>::zeros(n_v, n_m);
        for &(row, p, v) in &lift_mu {
            l[(row, p)] += v;
        }
        l
    };

    for u_row in 0..n_v {
        let r = u_row % n_u;
        for (sign, bound) in [(1.0, constraints.u_hi[r]), (-1.0, -constraints.u_lo[r])] {
            if !bound.is_finite() {
                continue;
            }
            let mut a = DVector::zeros(n_vars);
            a[u_row] = sign;
            for p in 0..n_m {
                a[n_v + p] = sign * mu_part[(u_row, p)];
                if robust_inputs {
                    a[n_v + n_m + p] = u_coef[(u_row, p)];
                }
            }
            rows.push((a, bound));
        }
    }
    if robust_inputs {
        for p in 0..n_m {
            for sign in [1.0, -1.0] {
                let mut a = DVector::zeros(n_vars);
                a[n_v + p] = sign;
                a[n_v + n_m + p] = -1.0;
                rows.push((a, 0.0));
            }
        }
    }

    let e = &pred.a_stack * x0 + &pred.offset + &pred.g_stack * &stats.mu;
    let s0 = n_v + n_m + n_t;
    for row in &state_rows {
        let b_row = pred.b_stack.row(row.global);
        // Sensitivity of the nominal row to m through M mu.
        let mut m_sens = DVector::<f64>::zeros(n_m);
        for &(u_row, p, v) in &lift_mu {
            m_sens[p] += b_row[u_row] * v;
        }
        for (sign, bound) in [(1.0, row.hi), (-1.0, -row.lo)] {
            if !bound.is_finite() {
                continue;
            }
            let mut a = DVector::zeros(n_vars);
            for j in 0..n_v {
                a[j] = sign * b_row[j];
            }
            for p in 0..n_m {
                a[n_v + p] = sign * m_sens[p];
            }
            for aux in &row.aux {
                a[s0 + aux.index] = aux.width;
            }
            rows.push((a, bound - sign * e[row.global] - row.fixed_margin));
        }
        for aux in &row.aux {
            for sign in [1.0, -1.0] {
                let mut a = DVector::zeros(n_vars);
                for p in 0..n_m {
                    a[n_v + p] = sign * aux.coef[p];
                }
                a[s0 + aux.index] = -1.0;
                rows.push((a, -sign * aux.g));
            }
        }
    }

    let mut a = DMatrix::zeros(rows.len(), n_vars);
    let mut b = DVector::zeros(rows.len());
    for (i, (row, bound)) in rows.into_iter().enumerate() {
        a.set_row(i, &row.transpose());
        b[i] = bound;
    }
    let mut aux_coef = DMatrix::zeros(n_s, n_m);
    let mut aux_offset = DVector::zeros(n_s);
    for aux in state_rows.iter().flat_map(|r| r.aux.iter()) {
        aux_coef.set_row(aux.index, &aux.coef.transpose());
        aux_offset[aux.index] = aux.g;
    }
    Ok(LinearConstraints {
        a,
        b,
        aux_coef,
        aux_offset,
        n_v,
        n_m,
        n_t,
        n_s,
    })
}

/// Solution of the affine-feedback program.
#[derive(Debug, Clone)]
pub struct AffineSolution {
    pub structure: FeedbackStructure,
    pub v: DVector<f64>,
    pub m: DVector<f64>,
    /// Expected cost at `(v, m)`.
    pub cost: f64,
    pub status: QpStatus,
    pub iterations: usize,
    pub warm: WarmStart,
}

impl AffineSolution {
    /// Toeplitz policy view; `None` for full feedback.
    pub fn policy(&self, horizon: usize, n_u: usize, n_w: usize) -> Option<AffinePolicy> {
        (self.structure == FeedbackStructure::Toeplitz)
            .then(|| AffinePolicy::from_params(horizon, n_u, n_w, &self.m, self.v.clone()))
    }
}

/// Optional tweaks for [`solve_affine`].
#[derive(Debug, Clone, Copy)]
pub struct SolveOptions {
    pub qp: QpSettings,
    /// Ridge on the gain parameters; removes the null space of unexcited entries.
    pub m_regularization: f64,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            qp: QpSettings::default(),
            m_regularization: 1e-8,
        }
    }
}

/// Minimise the expected cost over `(v, m)` subject to robust constraints.
pub fn solve_affine(
    x0: &DVector<f64>,
    pred: &LinearPrediction,
    weights: &CostWeights,
    constraints: &ConstraintSet,
    stats: &DisturbanceStats,
    structure: FeedbackStructure,
    options: &SolveOptions,
    warm: Option<&WarmStart>,
) -> Result<AffineSolution, SmpcError> {
    let cost = assemble_cost(x0, pred, weights, stats, structure)?;
    let lin = assemble_constraints(x0, pred, constraints, stats, structure)?;
    let (n_v, n_m, n_vars) = (lin.n_v, lin.n_m, lin.n_vars());
    let mut p = DMatrix::zeros(n_vars, n_vars);
    p.view_mut((0, 0), (n_v + n_m, n_v + n_m)).copy_from(&cost.hessian);
    for i in n_v..n_v + n_m {
        p[(i, i)] += options.m_regularization;
    }
    let mut q = DVector::zeros(n_vars);
    q.rows_mut(0, n_v + n_m).copy_from(&cost.gradient);
    let problem = if lin.a.nrows() > 0 {
        QpProblem::unconstrained(p, q).with_inequalities(lin.a, lin.b)
    } else {
        QpProblem::unconstrained(p, q)
    };
    let warm = warm.filter(|w| w.x.len() == n_vars && w.y_in.len() == problem.b_in.len());
    let sol = qp::solve(&problem, &options.qp, warm)?;
    if !matches!(sol.status, QpStatus::Optimal) {
        return Err(SmpcError::SolveFailed(sol.status));
    }
    let v = sol.x.rows(0, n_v).into_owned();
    let m = sol.x.rows(n_v, n_m).into_owned();
    Ok(AffineSolution {
        structure,
        cost: cost.value(&v, &m),
        v,
        m,
        status: sol.status,
        iterations: sol.iterations,
        warm: WarmStart::from(&sol),
    })
}

/// Simplified affine disturbance feedback (Toeplitz gains).
pub fn solve_sadf(
    x0: &DVector<f64>,
    pred: &LinearPrediction,
    weights: &CostWeights,
    constraints: &ConstraintSet,
    stats: &DisturbanceStats,
) -> Result<(AffinePolicy, f64), SmpcError> {
    let sol = solve_affine(
        x0,
        pred,
        weights,
        constraints,
        stats,
        FeedbackStructure::Toeplitz,
        &SolveOptions::default(),
        None,
    )?;
    let policy = sol
        .policy(pred.horizon, pred.n_u, pred.n_w)
        .ok_or_else(|| SmpcError::Undefined("policy".into()))?;
    Ok((policy, sol.cost))
}

/// Lyapunov candidate `V(x0) = L*(x0) - L*(0)` built from optimal values.
pub fn lyapunov_value(
    x0: &DVector<f64>,
    pred: &LinearPrediction,
    weights: &CostWeights,
    constraints: &ConstraintSet,
    stats: &DisturbanceStats,
) -> Result<f64, SmpcError> {
    let value = |x: &DVector<f64>| match solve_sadf(x, pred, weights, constraints, stats) {
        Ok((_, v)) => Ok(v),
        Err(SmpcError::SolveFailed(status)) => Err(SmpcError::Undefined(format!(
            "no feasible policy ({status:?})"
        ))),
        Err(e) => Err(e),
    };
    let origin = DVector::zeros(pred.n);
    Ok(value(x0)? - value(&origin)?)
}

/// Closed-form minimiser when no constraint is active.
///
/// The expected cost separates in `ubar = v + M mu` and `m`, so the gain
/// minimiser depends only on the covariance and is cached.
#[derive(Debug, Clone)]
pub struct UnconstrainedSolver {
    pub structure: FeedbackStructure,
    map: FeedbackMap,
    wx: DMatrix<f64>,
    wu: DMatrix<f64>,
    h: DMatrix<f64>,
    h_chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
    m_star: DVector<f64>,
    trace: TraceTerms,
}

impl UnconstrainedSolver {
    pub fn new(
        pred: &LinearPrediction,
        weights: &CostWeights,
        stats: &DisturbanceStats,
        structure: FeedbackStructure,
        m_regularization: f64,
    ) -> Result<Self, SmpcError> {
        weights.validate(pred.n, pred.n_u)?;
        check_prediction(pred, stats)?;
        let map = FeedbackMap::new(structure, pred.horizon, pred.n_u, pred.n_w);
        let (wx, wu) = weights.stacked(pred.horizon);
        let h = input_hessian(pred, &wx, &wu);
        let h_chol = h
            .clone()
            .cholesky()
            .ok_or(SmpcError::Weights("input Hessian is not positive definite"))?;
        let trace = trace_terms(pred, &wx, &h, stats, &map);
        let mut t = trace.hessian.clone();
        for i in 0..t.nrows() {
            t[(i, i)] += m_regularization.max(1e-14);
        }
        let m_star = match t.clone().cholesky() {
            Some(c) => -c.solve(&trace.gradient),
            None => -t
                .lu()
                .solve(&trace.gradient)
                .ok_or(SmpcError::Weights("gain Hessian is singular"))?,
        };
        Ok(Self {
            structure,
            map,
            wx,
            wu,
            h,
            h_chol,
            m_star,
            trace,
        })
    }

    pub fn gain_params(&self) -> &DVector<f64> {
        &self.m_star
    }

    /// Hessian of the expected cost in the nominal inputs `v + M mu`.
    pub fn input_hessian(&self) -> &DMatrix<f64> {
        &self.h
    }

    /// Linear term of the expected cost in the nominal inputs.
    pub fn input_gradient(&self, x0: &DVector<f64>, pred: &LinearPrediction, mu: &DVector<f64>) -> DVector<f64> {
        let e = &pred.a_stack * x0 + &pred.offset + &pred.g_stack * mu;
        pred.b_stack.transpose() * (&self.wx * e)
    }

    /// `(v, m)` minimising the expected cost for this initial state and mean.
    pub fn solve(
        &self,
        x0: &DVector<f64>,
        pred: &LinearPrediction,
        mu: &DVector<f64>,
    ) -> (DVector<f64>, DVector<f64>) {
        let e = &pred.a_stack * x0 + &pred.offset + &pred.g_stack * mu;
        let rhs = -(pred.b_stack.transpose() * (&self.wx * e));
        let ubar = self.h_chol.solve(&rhs);
        let v = ubar - self.map.apply(&self.m_star, mu);
        (v, self.m_star.clone())
    }

    /// Expected cost of `(v, m)` without re-assembling the full quadratic.
    pub fn cost(
        &self,
        x0: &DVector<f64>,
        pred: &LinearPrediction,
        mu: &DVector<f64>,
        v: &DVector<f64>,
        m: &DVector<f64>,
    ) -> f64 {
        let e = &pred.a_stack * x0 + &pred.offset + &pred.g_stack * mu;
        let ubar = v + self.map.apply(m, mu);
        let x = &e + &pred.b_stack * &ubar;
        let stage = x.dot(&(&self.wx * &x)) + ubar.dot(&(&self.wu * &ubar));
        stage + 0.5 * m.dot(&(&self.trace.hessian * m)) + self.trace.gradient.dot(m) + self.trace.constant
    }

    pub fn map(&self) -> &FeedbackMap {
        &self.map
    }
}
