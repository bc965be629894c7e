//! Dense convex QP solver.
//!
//! Solves
//!
//! ```text
//! minimize    1/2 x'Px + q'x
//! subject to  A_in x <= b_in
//!             A_eq x  = b_eq
//! ```
//!
//! with an operator-splitting (ADMM) iteration on the stacked form
//! `l <= Cx <= u`, Ruiz equilibration, over-relaxation, periodic step-size
//! adaptation and an active-set polishing pass. Multipliers follow the
//! Lagrangian `1/2 x'Px + q'x + y_in'(A_in x - b_in) + y_eq'(A_eq x - b_eq)`,
//! so `y_in >= 0` at a solution.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QpError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("objective Hessian is not positive semidefinite (min eigenvalue {0:e})")]
    NotConvex(f64),
    #[error("non-finite problem data")]
    NonFinite,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpProblem {
    pub p: DMatrix<f64>,
    pub q: DVector<f64>,
    pub a_in: DMatrix<f64>,
    pub b_in: DVector<f64>,
    pub a_eq: DMatrix<f64>,
    pub b_eq: DVector<f64>,
}

impl QpProblem {
    pub fn unconstrained(p: DMatrix<f64>, q: DVector<f64>) -> Self {
        let n = q.len();
        Self {
            p,
            q,
            a_in: DMatrix::zeros(0, n),
            b_in: DVector::zeros(0),
            a_eq: DMatrix::zeros(0, n),
            b_eq: DVector::zeros(0),
        }
    }

    pub fn with_inequalities(mut self, a: DMatrix<f64>, b: DVector<f64>) -> Self {
        self.a_in = a;
        self.b_in = b;
        self
    }

    pub fn with_equalities(mut self, a: DMatrix<f64>, b: DVector<f64>) -> Self {
        self.a_eq = a;
        self.b_eq = b;
        self
    }

    /// Append rows to the inequality block.
    pub fn with_inequalities_appended(self, a: DMatrix<f64>, b: DVector<f64>) -> Self {
        let a = concat_rows(&self.a_in, &a);
        let b = concat_vec(&self.b_in, &b);
        self.with_inequalities(a, b)
    }

    /// `lo <= x <= hi` as inequality rows (infinite bounds are skipped).
    pub fn with_box(self, lo: &DVector<f64>, hi: &DVector<f64>) -> Self {
        let n = self.n();
        let mut rows: Vec<(usize, f64, f64)> = Vec::new();
        for i in 0..n {
            if hi[i].is_finite() {
                rows.push((i, 1.0, hi[i]));
            }
            if lo[i].is_finite() {
                rows.push((i, -1.0, -lo[i]));
            }
        }
        let mut a = DMatrix::zeros(rows.len(), n);
        let mut b = DVector::zeros(rows.len());
        for (r, (i, s, v)) in rows.into_iter().enumerate() {
            a[(r, i)] = s;
            b[r] = v;
        }
        self.with_inequalities_appended(a, b)
    }

    pub fn n(&self) -> usize {
        self.q.len()
    }

    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.p * x)) + self.q.dot(x)
    }

    pub fn validate(&self) -> Result<(), QpError> {
        let n = self.n();
        if self.p.shape() != (n, n) {
            return Err(QpError::Dimension(format!("P is {:?}, q has {n}", self.p.shape())));
        }
        if self.a_in.ncols() != n || self.a_in.nrows() != self.b_in.len() {
            return Err(QpError::Dimension("inequality block".into()));
        }
        if self.a_eq.ncols() != n || self.a_eq.nrows() != self.b_eq.len() {
            return Err(QpError::Dimension("equality block".into()));
        }
        let finite = |m: &DMatrix<f64>| m.iter().all(|v| v.is_finite());
        if !finite(&self.p)
            || !self.q.iter().all(|v| v.is_finite())
            || !finite(&self.a_in)
            || !finite(&self.a_eq)
            || self.b_in.iter().any(|v| v.is_nan())
            || !self.b_eq.iter().all(|v| v.is_finite())
        {
            return Err(QpError::NonFinite);
        }
        Ok(())
    }
}

/// Symmetrize `p` and floor small negative eigenvalues (assembly noise) at
/// zero with a 1e-9 shift. Rejects genuinely indefinite matrices.
pub fn enforce_psd(p: &DMatrix<f64>) -> Result<DMatrix<f64>, QpError> {
    let n = p.nrows();
    let sym = (p + p.transpose()) * 0.5;
    if n == 0 || sym.clone().cholesky().is_some() {
        return Ok(sym);
    }
    let eig = sym.clone().symmetric_eigen();
    let min = eig.eigenvalues.min();
    let scale = sym.amax().max(1.0);
    if min < -1e-8 * scale {
        return Err(QpError::NotConvex(min));
    }
    let floored = eig.eigenvalues.map(|l| l.max(0.0) + 1e-9);
    let rebuilt = &eig.eigenvectors * DMatrix::from_diagonal(&floored) * eig.eigenvectors.transpose();
    Ok((&rebuilt + rebuilt.transpose()) * 0.5)
}

pub fn min_eigenvalue(p: &DMatrix<f64>) -> f64 {
    let sym = (p + p.transpose()) * 0.5;
    sym.symmetric_eigen().eigenvalues.min()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QpSettings {
    pub eps_abs: f64,
    pub eps_rel: f64,
    pub eps_infeasible: f64,
    pub max_iter: usize,
    pub rho: f64,
    pub sigma: f64,
    pub alpha: f64,
    pub adaptive_rho_interval: usize,
    pub check_interval: usize,
    pub scaling_iters: usize,
    pub polish: bool,
}

impl Default for QpSettings {
    fn default() -> Self {
        Self {
            eps_abs: 1e-6,
            eps_rel: 1e-6,
            eps_infeasible: 1e-7,
            max_iter: 20_000,
            rho: 0.1,
            sigma: 1e-6,
            alpha: 1.6,
            adaptive_rho_interval: 50,
            check_interval: 5,
            scaling_iters: 10,
            polish: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpStatus {
    Optimal,
    MaxIters,
    /// Primal infeasibility certificate found.
    Infeasible,
    /// Dual infeasibility certificate found (objective unbounded below).
    Unbounded,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct KktReport {
    /// `||Px + q + A_in'y_in + A_eq'y_eq||_inf`
    pub stationarity: f64,
    /// Largest constraint violation.
    pub primal: f64,
    /// Largest `|y_in_i * (A_in x - b_in)_i|`.
    pub complementarity: f64,
    /// Largest negative part of `y_in`.
    pub dual_sign: f64,
}

impl KktReport {
    pub fn max(&self) -> f64 {
        self.stationarity
            .max(self.primal)
            .max(self.complementarity)
            .max(self.dual_sign)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub x: DVector<f64>,
    pub y_in: DVector<f64>,
    pub y_eq: DVector<f64>,
    pub status: QpStatus,
    pub iterations: usize,
    pub polished: bool,
    pub residuals: KktReport,
    pub objective: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WarmStart {
    pub x: DVector<f64>,
    pub y_in: DVector<f64>,
    pub y_eq: DVector<f64>,
}

impl From<&QpSolution> for WarmStart {
    fn from(s: &QpSolution) -> Self {
        Self {
            x: s.x.clone(),
            y_in: s.y_in.clone(),
            y_eq: s.y_eq.clone(),
        }
    }
}

/// Stationarity, feasibility, complementarity and dual-sign residuals.
pub fn check_kkt(
    problem: &QpProblem,
    x: &DVector<f64>,
    y_in: &DVector<f64>,
    y_eq: &DVector<f64>,
) -> KktReport {
    let grad = &problem.p * x
        + &problem.q
        + problem.a_in.transpose() * y_in
        + problem.a_eq.transpose() * y_eq;
    let slack = &problem.a_in * x - &problem.b_in;
    let eq = &problem.a_eq * x - &problem.b_eq;
    let primal = slack
        .iter()
        .map(|s| s.max(0.0))
        .chain(eq.iter().map(|e| e.abs()))
        .fold(0.0, f64::max);
    let complementarity = slack
        .iter()
        .zip(y_in.iter())
        .map(|(s, y)| if s.is_finite() { (s * y).abs() } else { y.abs() })
        .fold(0.0, f64::max);
    KktReport {
        stationarity: grad.amax(),
        primal,
        complementarity,
        dual_sign: y_in.iter().map(|y| (-y).max(0.0)).fold(0.0, f64::max),
    }
}

pub fn check_solution(problem: &QpProblem, solution: &QpSolution) -> KktReport {
    check_kkt(problem, &solution.x, &solution.y_in, &solution.y_eq)
}

fn concat_rows(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(a.nrows() + b.nrows(), a.ncols().max(b.ncols()));
    out.view_mut((0, 0), a.shape()).copy_from(a);
    out.view_mut((a.nrows(), 0), b.shape()).copy_from(b);
    out
}

fn concat_vec(a: &DVector<f64>, b: &DVector<f64>) -> DVector<f64> {
    let mut out = DVector::zeros(a.len() + b.len());
    out.rows_mut(0, a.len()).copy_from(a);
    out.rows_mut(a.len(), b.len()).copy_from(b);
    out
}

/// Problem in the stacked form `l <= Cx <= u`, Ruiz-scaled.
struct Scaled {
    p: DMatrix<f64>,
    q: DVector<f64>,
    c: DMatrix<f64>,
    l: DVector<f64>,
    u: DVector<f64>,
    /// variable scaling
    d: DVector<f64>,
    /// constraint scaling
    e: DVector<f64>,
    /// cost scaling
    cost: f64,
}

fn inf_norm_col(m: &DMatrix<f64>, j: usize) -> f64 {
    m.column(j).amax()
}

fn inf_norm_row(m: &DMatrix<f64>, i: usize) -> f64 {
    m.row(i).amax()
}

fn scale_problem(problem: &QpProblem, iters: usize) -> Scaled {
    let n = problem.n();
    let m_in = problem.b_in.len();
    let m = m_in + problem.b_eq.len();
    let mut p = problem.p.clone();
    let mut q = problem.q.clone();
    let mut c = concat_rows(&problem.a_in, &problem.a_eq);
    let mut l = DVector::from_element(m, f64::NEG_INFINITY);
    let mut u = DVector::zeros(m);
    u.rows_mut(0, m_in).copy_from(&problem.b_in);
    l.rows_mut(m_in, m - m_in).copy_from(&problem.b_eq);
    u.rows_mut(m_in, m - m_in).copy_from(&problem.b_eq);

    let mut d = DVector::from_element(n, 1.0);
    let mut e = DVector::from_element(m, 1.0);
    let clip = |v: f64| if v < 1e-4 { 1.0 } else { v.min(1e4) };
    for _ in 0..iters {
        let mut dd = DVector::zeros(n);
        for j in 0..n {
            let norm = inf_norm_col(&p, j).max(if m > 0 { inf_norm_col(&c, j) } else { 0.0 });
            dd[j] = 1.0 / clip(norm).sqrt();
        }
        let mut de = DVector::zeros(m);
        for i in 0..m {
            de[i] = 1.0 / clip(inf_norm_row(&c, i)).sqrt();
        }
        for j in 0..n {
            for i in 0..n {
                p[(i, j)] *= dd[i] * dd[j];
            }
            for i in 0..m {
                c[(i, j)] *= de[i] * dd[j];
            }
        }
        q.component_mul_assign(&dd);
        d.component_mul_assign(&dd);
        e.component_mul_assign(&de);
    }
    for i in 0..m {
        l[i] *= e[i];
        u[i] *= e[i];
    }
    let mean_col = if n > 0 {
        (0..n).map(|j| inf_norm_col(&p, j)).sum::<f64>() / n as f64
    } else {
        1.0
    };
    let cost = 1.0 / clip(mean_col.max(q.amax()));
    p *= cost;
    q *= cost;
    Scaled { p, q, c, l, u, d, e, cost }
}

struct KktFactor {
    chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
}

fn factor(s: &Scaled, rho: &DVector<f64>, sigma: f64) -> Option<KktFactor> {
    let n = s.p.nrows();
    let mut k = s.p.clone();
    for i in 0..n {
        k[(i, i)] += sigma;
    }
    if s.c.nrows() > 0 {
        let mut rc = s.c.clone();
        for (i, mut row) in rc.row_iter_mut().enumerate() {
            row *= rho[i];
        }
        k += s.c.transpose() * rc;
    }
    k.cholesky().map(|chol| KktFactor { chol })
}

fn rho_vector(s: &Scaled, rho: f64) -> DVector<f64> {
    DVector::from_iterator(
        s.l.len(),
        (0..s.l.len()).map(|i| {
            if s.l[i] == s.u[i] {
                1e3 * rho
            } else if s.l[i].is_infinite() && s.u[i].is_infinite() {
                1e-6
            } else {
                rho
            }
        }),
    )
}

fn project(v: &DVector<f64>, l: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
    DVector::from_iterator(v.len(), (0..v.len()).map(|i| v[i].max(l[i]).min(u[i])))
}

/// Solve a convex QP.
pub fn solve(
    problem: &QpProblem,
    settings: &QpSettings,
    warm: Option<&WarmStart>,
) -> Result<QpSolution, QpError> {
    problem.validate()?;
    let mut problem = problem.clone();
    problem.p = enforce_psd(&problem.p)?;
    let problem = &problem;
    let n = problem.n();
    let m_in = problem.b_in.len();
    let m = m_in + problem.b_eq.len();
    let s = scale_problem(problem, settings.scaling_iters);

    let mut x = DVector::zeros(n);
    let mut y = DVector::zeros(m);
    if let Some(w) = warm {
        if w.x.len() == n && w.y_in.len() == m_in && w.y_eq.len() == m - m_in {
            x = w.x.component_div(&s.d);
            y.rows_mut(0, m_in).copy_from(&w.y_in);
            y.rows_mut(m_in, m - m_in).copy_from(&w.y_eq);
            y = y.component_div(&s.e) * s.cost;
        }
    }
    let mut z = project(&(&s.c * &x), &s.l, &s.u);

    let mut rho = settings.rho;
    let mut rho_vec = rho_vector(&s, rho);
    let mut kkt = factor(&s, &rho_vec, settings.sigma).ok_or(QpError::NotConvex(f64::NAN))?;

    let unscale_x = |x: &DVector<f64>| x.component_mul(&s.d);
    let unscale_y = |y: &DVector<f64>| y.component_mul(&s.e) / s.cost;

    let c_orig = concat_rows(&problem.a_in, &problem.a_eq);
    let mut status = QpStatus::MaxIters;
    let mut iterations = settings.max_iter;

    for iter in 1..=settings.max_iter {
        let x_prev = x.clone();
        let y_prev = y.clone();
        let rhs = settings.sigma * &x - &s.q + s.c.transpose() * (rho_vec.component_mul(&z) - &y);
        let x_tilde = kkt.chol.solve(&rhs);
        let z_tilde = &s.c * &x_tilde;
        x = settings.alpha * &x_tilde + (1.0 - settings.alpha) * &x_prev;
        let z_relaxed = settings.alpha * &z_tilde + (1.0 - settings.alpha) * &z;
        let z_next = project(&(&z_relaxed + y.component_div(&rho_vec)), &s.l, &s.u);
        y += rho_vec.component_mul(&(&z_relaxed - &z_next));
        z = z_next;

        let check = iter % settings.check_interval == 0 || iter == settings.max_iter;
        let adapt = settings.adaptive_rho_interval > 0 && iter % settings.adaptive_rho_interval == 0;
        if !(check || adapt) {
            continue;
        }

        // Residuals in the original scaling.
        let xu = unscale_x(&x);
        let cx = &c_orig * &xu;
        let zu = z.component_div(&s.e);
        let yu = unscale_y(&y);
        let px = &problem.p * &xu;
        let cty = c_orig.transpose() * &yu;
        let r_prim = if m > 0 { (&cx - &zu).amax() } else { 0.0 };
        let r_dual = (&px + &problem.q + &cty).amax();
        let eps_prim = settings.eps_abs + settings.eps_rel * cx.amax().max(zu.amax());
        let eps_dual =
            settings.eps_abs + settings.eps_rel * px.amax().max(cty.amax()).max(problem.q.amax());

        if check {
            if r_prim <= eps_prim && r_dual <= eps_dual {
                status = QpStatus::Optimal;
                iterations = iter;
                break;
            }
            let delta_y = &y - &y_prev;
            let delta_x = &x - &x_prev;
            if primal_infeasible(&s, &delta_y, settings.eps_infeasible) {
                status = QpStatus::Infeasible;
                iterations = iter;
                break;
            }
            if dual_infeasible(&s, &delta_x, settings.eps_infeasible) {
                status = QpStatus::Unbounded;
                iterations = iter;
                break;
            }
        }
        if adapt && m > 0 {
            let prim_norm = (&s.c * &x).amax().max(z.amax()).max(1e-12);
            let dual_norm = (&s.p * &x)
                .amax()
                .max((s.c.transpose() * &y).amax())
                .max(s.q.amax())
                .max(1e-12);
            let r_prim_s = (&s.c * &x - &z).amax();
            let r_dual_s = (&s.p * &x + &s.q + s.c.transpose() * &y).amax();
            let ratio = ((r_prim_s / prim_norm) / (r_dual_s / dual_norm).max(1e-30)).sqrt();
            let new_rho = (rho * ratio).clamp(1e-6, 1e6);
            if new_rho > 5.0 * rho || new_rho < 0.2 * rho {
                rho = new_rho;
                rho_vec = rho_vector(&s, rho);
                kkt = factor(&s, &rho_vec, settings.sigma).ok_or(QpError::NotConvex(f64::NAN))?;
            }
        }
    }

    let xu = unscale_x(&x);
    let yu = unscale_y(&y);
    let mut sol = QpSolution {
        y_in: yu.rows(0, m_in).into_owned(),
        y_eq: yu.rows(m_in, m - m_in).into_owned(),
        objective: problem.objective(&xu),
        residuals: KktReport::default(),
        x: xu,
        status,
        iterations,
        polished: false,
    };
    if matches!(status, QpStatus::Infeasible | QpStatus::Unbounded) {
        // Report the certificate direction's iterate; residuals describe it.
        sol.residuals = check_solution(problem, &sol);
        return Ok(sol);
    }
    sol.residuals = check_solution(problem, &sol);
    if settings.polish {
        if let Some(polished) = polish(problem, &sol, &z.component_div(&s.e), settings) {
            sol = polished;
        }
    }
    Ok(sol)
}

fn primal_infeasible(s: &Scaled, dy: &DVector<f64>, eps: f64) -> bool {
    let norm = dy.amax();
    if norm < 1e-30 {
        return false;
    }
    // certificate in the unscaled space: E dy
    let dy_u = dy.component_mul(&s.e);
    let norm_u = dy_u.amax();
    let ct = (s.c.transpose() * dy).component_div(&s.d);
    if ct.amax() > eps * norm_u {
        return false;
    }
    let mut support = 0.0;
    for i in 0..dy.len() {
        let (l, u) = (s.l[i] / s.e[i], s.u[i] / s.e[i]);
        let v = dy_u[i];
        if v > 0.0 {
            if u.is_infinite() {
                if v > eps * norm_u {
                    return false;
                }
                continue;
            }
            support += u * v;
        } else if v < 0.0 {
            if l.is_infinite() {
                if -v > eps * norm_u {
                    return false;
                }
                continue;
            }
            support += l * v;
        }
    }
    support < -eps * norm_u
}

fn dual_infeasible(s: &Scaled, dx: &DVector<f64>, eps: f64) -> bool {
    let dx_u = dx.component_mul(&s.d);
    let norm = dx_u.amax();
    if norm < 1e-30 {
        return false;
    }
    let pdx = (&s.p * dx).component_div(&s.d) / s.cost;
    if pdx.amax() > eps * norm {
        return false;
    }
    if (s.q.dot(dx) / s.cost) > -eps * norm {
        return false;
    }
    let cdx = (&s.c * dx).component_div(&s.e);
    for i in 0..cdx.len() {
        let (l, u) = (s.l[i], s.u[i]);
        let ok = if l.is_finite() && u.is_finite() {
            cdx[i].abs() <= eps * norm
        } else if u.is_finite() {
            cdx[i] <= eps * norm
        } else if l.is_finite() {
            cdx[i] >= -eps * norm
        } else {
            true
        };
        if !ok {
            return false;
        }
    }
    true
}

/// Solve the equality-constrained KKT system on the guessed active set and
/// keep the result if it satisfies the optimality conditions at least as
/// well as the ADMM iterate.
fn polish(
    problem: &QpProblem,
    sol: &QpSolution,
    z: &DVector<f64>,
    settings: &QpSettings,
) -> Option<QpSolution> {
    let n = problem.n();
    let m_in = problem.b_in.len();
    let m_eq = problem.b_eq.len();
    let tol = 1e-7 * (1.0 + problem.b_in.amax());
    let mut active: Vec<usize> = Vec::new();
    for i in 0..m_in {
        if sol.y_in[i] > 1e-9 || (problem.b_in[i] - z[i]).abs() <= tol && sol.y_in[i] > -1e-9 {
            active.push(i);
        }
    }
    let k = active.len() + m_eq;
    let dim = n + k;
    let mut kkt = DMatrix::zeros(dim, dim);
    kkt.view_mut((0, 0), (n, n)).copy_from(&problem.p);
    let mut rhs = DVector::zeros(dim);
    rhs.rows_mut(0, n).copy_from(&(-&problem.q));
    for (r, &i) in active.iter().enumerate() {
        let row = problem.a_in.row(i);
        kkt.view_mut((n + r, 0), (1, n)).copy_from(&row);
        kkt.view_mut((0, n + r), (n, 1)).copy_from(&row.transpose());
        rhs[n + r] = problem.b_in[i];
    }
    for j in 0..m_eq {
        let r = active.len() + j;
        let row = problem.a_eq.row(j);
        kkt.view_mut((n + r, 0), (1, n)).copy_from(&row);
        kkt.view_mut((0, n + r), (n, 1)).copy_from(&row.transpose());
        rhs[n + r] = problem.b_eq[j];
    }
    let delta = 1e-9;
    let mut reg = kkt.clone();
    for i in 0..n {
        reg[(i, i)] += delta;
    }
    for i in n..dim {
        reg[(i, i)] -= delta;
    }
    let lu = reg.lu();
    let mut sol_vec = lu.solve(&rhs)?;
    for _ in 0..5 {
        let residual = &rhs - &kkt * &sol_vec;
        sol_vec += lu.solve(&residual)?;
    }
    let x = sol_vec.rows(0, n).into_owned();
    let mut y_in = DVector::zeros(m_in);
    for (r, &i) in active.iter().enumerate() {
        y_in[i] = sol_vec[n + r];
    }
    let y_eq = sol_vec.rows(n + active.len(), m_eq).into_owned();
    let report = check_kkt(problem, &x, &y_in, &y_eq);
    let scale = 1.0 + problem.q.amax();
    let accept = report.max() <= sol.residuals.max().max(settings.eps_abs * scale)
        && report.dual_sign <= 1e-9
        && report.primal <= settings.eps_abs;
    if !accept || !x.iter().all(|v| v.is_finite()) {
        return None;
    }
    Some(QpSolution {
        objective: problem.objective(&x),
        x,
        y_in,
        y_eq,
        status: QpStatus::Optimal,
        iterations: sol.iterations,
        polished: true,
        residuals: report,
    })
}
