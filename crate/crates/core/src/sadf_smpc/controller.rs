//! Receding-horizon tracking controller around a hover linearization.

use std::time::Instant;

use nalgebra::{DMatrix, DVector, Vector3};
use serde::{Deserialize, Serialize};

use super::{
    assemble_constraints, AffineSolution, ConstraintSet, CostWeights, DisturbanceStats,
    FeedbackStructure, SmpcError, SolveOptions, UnconstrainedSolver,
};
use crate::qp::{QpProblem, QpSettings, QpStatus, WarmStart};
use crate::quad_dynamics::{
    linearize, stack_prediction, LinearPrediction, PhysicalParams, QuadState, RotorCommand,
    DISTURBANCE_DIM, INPUT_DIM, STATE_DIM,
};

/// Index of the scalar quaternion component in the state vector.
const Q0_INDEX: usize = 6;

/// Stabilizing solution of the discrete algebraic Riccati equation by fixed-point
/// iteration.
pub fn solve_dare(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    tol: f64,
    max_iter: usize,
) -> Result<DMatrix<f64>, SmpcError> {
    let mut p = q.clone();
    for _ in 0..max_iter {
        let bt_p = b.transpose() * &p;
        let s = r + &bt_p * b;
        let k = s
            .cholesky()
            .ok_or(SmpcError::Weights("Riccati gain system is not positive definite"))?
            .solve(&(&bt_p * a));
        let next = q + a.transpose() * &p * a - (a.transpose() * bt_p.transpose()) * k;
        let next = (&next + next.transpose()) * 0.5;
        if !next.iter().all(|v| v.is_finite()) {
            return Err(SmpcError::Weights("Riccati iteration diverged"));
        }
        let change = (&next - &p).amax();
        p = next;
        if change <= tol * p.amax().max(1.0) {
            return Ok(p);
        }
    }
    Err(SmpcError::Weights("Riccati iteration did not converge"))
}

/// Terminal weight from the Riccati solution on the coordinates other than
/// `excluded`; excluded coordinates keep their stage weight.
pub fn terminal_weight(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    excluded: &[usize],
) -> Result<DMatrix<f64>, SmpcError> {
    let n = a.nrows();
    let keep: Vec<usize> = (0..n).filter(|i| !excluded.contains(i)).collect();
    let k = keep.len();
    let square = |m: &DMatrix<f64>| DMatrix::from_fn(k, k, |i, j| m[(keep[i], keep[j])]);
    let b_sub = DMatrix::from_fn(k, b.ncols(), |i, j| b[(keep[i], j)]);
    let p_sub = solve_dare(&square(a), &b_sub, &square(q), r, 1e-12, 200_000)?;
    let mut p = q.clone();
    for (i, &gi) in keep.iter().enumerate() {
        for (j, &gj) in keep.iter().enumerate() {
            p[(gi, gj)] = p_sub[(i, j)];
        }
    }
    Ok(p)
}

/// Controller settings, loadable from a config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SmpcConfig {
    pub horizon: usize,
    pub dt: f64,
    /// Stage weight diagonal over the 13 state coordinates.
    pub q_diag: Vec<f64>,
    /// Input weight diagonal over the 4 rotors.
    pub r_diag: Vec<f64>,
    /// Position-deviation box half-width, m (unbounded when absent).
    pub position_bound: Option<f64>,
    /// Velocity-deviation box half-width, m/s (unbounded when absent).
    pub velocity_bound: Option<f64>,
    /// Half-width of the disturbance box around its mean, m/s^2.
    pub w_half_width: f64,
    /// Per-axis residual standard deviation used for the covariance, m/s^2.
    pub noise_std: f64,
    /// Add the measured aerodynamic effect to the disturbance mean.
    pub use_measured_wind: bool,
    pub structure: FeedbackStructure,
    pub m_regularization: f64,
    pub qp_eps: f64,
    pub qp_max_iter: usize,
    /// Accept the closed-form minimiser when it satisfies every constraint.
    pub fast_path: bool,
    /// Without state bounds, solve box QPs over the nominal inputs with the
    /// gain held at scaled copies of its unconstrained optimum before the full QP.
    pub fixed_gain_qp: bool,
}

impl Default for SmpcConfig {
    fn default() -> Self {
        let mut q_diag = vec![2.5e-2; 3];
        q_diag.extend([1e-3; 3]);
        q_diag.extend([2.5e-3; 4]);
        q_diag.extend([1e-5; 3]);
        Self {
            horizon: 20,
            dt: 0.05,
            q_diag,
            r_diag: vec![1.25e-4; 4],
            position_bound: None,
            velocity_bound: None,
            w_half_width: 1.0,
            noise_std: 0.3,
            use_measured_wind: false,
            structure: FeedbackStructure::Toeplitz,
            m_regularization: 1e-8,
            qp_eps: 1e-6,
            qp_max_iter: 4000,
            fast_path: true,
            fixed_gain_qp: true,
        }
    }
}

impl SmpcConfig {
    pub fn validate(&self) -> Result<(), SmpcError> {
        if self.horizon == 0 {
            return Err(SmpcError::Constraints("horizon must be positive".into()));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(SmpcError::Constraints("dt must be positive".into()));
        }
        if self.q_diag.len() != STATE_DIM || self.r_diag.len() != INPUT_DIM {
            return Err(SmpcError::Dimension(format!(
                "q_diag needs {STATE_DIM} entries and r_diag {INPUT_DIM}"
            )));
        }
        if self.q_diag.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(SmpcError::Weights("q_diag entries must be nonnegative"));
        }
        if self.r_diag.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(SmpcError::Weights("r_diag entries must be positive"));
        }
        for (name, b) in [("position_bound", self.position_bound), ("velocity_bound", self.velocity_bound)] {
            if let Some(b) = b {
                if !(b > 0.0) {
                    return Err(SmpcError::Constraints(format!("{name} must be positive")));
                }
            }
        }
        if !(self.w_half_width.is_finite() && self.w_half_width >= 0.0) {
            return Err(SmpcError::Constraints("w_half_width must be nonnegative".into()));
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return Err(SmpcError::Constraints("noise_std must be nonnegative".into()));
        }
        if !(self.qp_eps > 0.0 && self.qp_max_iter > 0 && self.m_regularization >= 0.0) {
            return Err(SmpcError::Constraints("solver tolerances must be positive".into()));
        }
        Ok(())
    }
}

/// How the applied input was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolvePath {
    Fast,
    FixedGain,
    Qp,
    Fallback,
}

impl SolvePath {
    pub fn as_str(&self) -> &'static str {
        match self {
            SolvePath::Fast => "fast",
            SolvePath::FixedGain => "fixed_gain",
            SolvePath::Qp => "qp",
            SolvePath::Fallback => "fallback",
        }
    }
}

#[derive(Debug, Clone)]
pub struct ControlOutput {
    pub command: RotorCommand,
    /// First open-loop input deviation from hover.
    pub v0: DVector<f64>,
    /// Disturbance mean used for this solve.
    pub mu: DVector<f64>,
    pub path: SolvePath,
    pub qp_status: Option<QpStatus>,
    pub solve_time: f64,
    /// Expected cost of the returned plan (`NaN` on fallback).
    pub cost: f64,
    /// Whether clamping to the rotor limits changed the input.
    pub clamped: bool,
}

/// Multiples of the unconstrained gain tried by the fixed-gain tier.
const GAIN_SCALES: [f64; 5] = [1.0, 0.5, 0.25, 0.125, 0.0];

/// SADF stochastic MPC tracking a reference with hover-trimmed inputs.
#[derive(Debug, Clone)]
pub struct TrackingController {
    pub config: SmpcConfig,
    pub params: PhysicalParams,
    pub weights: CostWeights,
    pub constraints: ConstraintSet,
    prediction: LinearPrediction,
    covariance: DisturbanceStats,
    fast: UnconstrainedSolver,
    previous: Option<(DVector<f64>, DVector<f64>)>,
    warm: Option<WarmStart>,
}

impl TrackingController {
    pub fn new(config: SmpcConfig, params: PhysicalParams) -> Result<Self, SmpcError> {
        config.validate()?;
        params.validate()?;
        let hover_state = QuadState::hover_at(Vector3::zeros());
        let lin = linearize(
            &hover_state,
            &RotorCommand::hover(&params),
            &Vector3::zeros(),
            config.dt,
            &params,
        )?;
        let q = DMatrix::from_diagonal(&DVector::from_vec(config.q_diag.clone()));
        let r = DMatrix::from_diagonal(&DVector::from_vec(config.r_diag.clone()));
        let p = terminal_weight(&lin.a, &lin.b, &q, &r, &[Q0_INDEX])?;
        let weights = CostWeights { q, r, p };
        let prediction = stack_prediction(&lin.a, &lin.b, &lin.g, config.horizon)?;
        let hover = params.hover_thrust();
        let mut constraints = ConstraintSet::unconstrained(STATE_DIM, INPUT_DIM, DISTURBANCE_DIM);
        constraints.u_lo = DVector::from_element(INPUT_DIM, -hover);
        constraints.u_hi = DVector::from_element(INPUT_DIM, params.max_thrust - hover);
        constraints.w_half = DVector::from_element(DISTURBANCE_DIM, config.w_half_width);
        for (bound, range) in [(config.position_bound, 0..3), (config.velocity_bound, 3..6)] {
            if let Some(b) = bound {
                for i in range {
                    constraints.x_lo[i] = -b;
                    constraints.x_hi[i] = b;
                    constraints.xf_lo[i] = -b;
                    constraints.xf_hi[i] = b;
                }
            }
        }
        let covariance = DisturbanceStats::diagonal(
            DVector::zeros(config.horizon * DISTURBANCE_DIM),
            &[config.noise_std; DISTURBANCE_DIM],
        )?;
        let fast = UnconstrainedSolver::new(
            &prediction,
            &weights,
            &covariance,
            config.structure,
            config.m_regularization,
        )?;
        Ok(Self {
            config,
            params,
            weights,
            constraints,
            prediction,
            covariance,
            fast,
            previous: None,
            warm: None,
        })
    }

    pub fn horizon(&self) -> usize {
        self.config.horizon
    }

    pub fn prediction(&self) -> &LinearPrediction {
        &self.prediction
    }

    pub fn reset(&mut self) {
        self.previous = None;
        self.warm = None;
    }

    /// Input boxes hold for every disturbance in the box around `mu`.
    /// Per-row worst-case input spread `sum |M| w_half`.
    fn input_margin(&self, m: &DVector<f64>) -> DVector<f64> {
        let map = self.fast.map();
        let mut margin = DVector::<f64>::zeros(map.horizon * map.n_u);
        for e in &map.entries {
            margin[e.u_row] += self.constraints.w_half[e.w_col % DISTURBANCE_DIM] * m[e.param].abs();
        }
        margin
    }

    fn inputs_robustly_feasible(&self, v: &DVector<f64>, m: &DVector<f64>, mu: &DVector<f64>) -> bool {
        let nominal = v + self.fast.map().apply(m, mu);
        let margin = self.input_margin(m);
        (0..nominal.len()).all(|row| {
            let r = row % INPUT_DIM;
            nominal[row] + margin[row] <= self.constraints.u_hi[r] + 1e-9
                && nominal[row] - margin[row] >= self.constraints.u_lo[r] - 1e-9
        })
    }

    /// Box QP over the nominal inputs for a fixed gain; `None` if the
    /// tightened box is empty or the solve does not converge.
    fn solve_fixed_gain(
        &self,
        x0: &DVector<f64>,
        pred: &LinearPrediction,
        mu: &DVector<f64>,
        m: &DVector<f64>,
        settings: &QpSettings,
    ) -> Option<(DVector<f64>, QpStatus)> {
        let margin = self.input_margin(m);
        let n = margin.len();
        let lo = DVector::from_fn(n, |row, _| self.constraints.u_lo[row % INPUT_DIM] + margin[row]);
        let hi = DVector::from_fn(n, |row, _| self.constraints.u_hi[row % INPUT_DIM] - margin[row]);
        if (0..n).any(|i| lo[i] > hi[i]) {
            return None;
        }
        let problem = QpProblem::unconstrained(self.fast.input_hessian().clone(), self.fast.input_gradient(x0, pred, mu))
            .with_box(&lo, &hi);
        let sol = crate::qp::solve(&problem, settings, None).ok()?;
        if sol.status != QpStatus::Optimal {
            return None;
        }
        let ubar = DVector::from_fn(n, |i, _| sol.x[i].clamp(lo[i], hi[i]));
        Some((ubar - self.fast.map().apply(m, mu), sol.status))
    }

    /// Deviation of `x` from `reference` with the quaternion sign aligned.
    pub fn deviation(x: &QuadState, reference: &QuadState) -> DVector<f64> {
        let mut dx = x.to_vector() - reference.to_vector();
        if x.attitude.dot(&reference.attitude) < 0.0 {
            for i in 0..4 {
                dx[Q0_INDEX + i] = -x.attitude[i] - reference.attitude[i];
            }
        }
        dx
    }

    /// One receding-horizon step.
    ///
    /// `reference` holds the `N + 1` reference states starting at the current
    /// time; `w_pred` is an optional predicted residual sequence (`N * 3`).
    pub fn step(
        &mut self,
        x: &QuadState,
        reference: &[QuadState],
        e_f_meas: &Vector3<f64>,
        w_pred: Option<&DVector<f64>>,
    ) -> Result<ControlOutput, SmpcError> {
        let horizon = self.config.horizon;
        if reference.len() != horizon + 1 {
            return Err(SmpcError::Dimension(format!(
                "need {} reference states, got {}",
                horizon + 1,
                reference.len()
            )));
        }
        let n_w = DISTURBANCE_DIM;
        let mut mu = match w_pred {
            Some(w) if w.len() == horizon * n_w => w.clone(),
            Some(w) => {
                return Err(SmpcError::Dimension(format!(
                    "prediction has {} entries, need {}",
                    w.len(),
                    horizon * n_w
                )))
            }
            None => DVector::zeros(horizon * n_w),
        };
        if self.config.use_measured_wind {
            for i in 0..horizon {
                for a in 0..n_w {
                    mu[i * n_w + a] += e_f_meas[a];
                }
            }
        }
        if mu.iter().any(|v| !v.is_finite()) || !x.is_finite() {
            return Err(SmpcError::Dimension("non-finite controller input".into()));
        }

        let start = Instant::now();
        let hover = RotorCommand::hover(&self.params);
        let mut offsets = Vec::with_capacity(horizon);
        for i in 0..horizon {
            let next = crate::quad_dynamics::step_rk4(
                &reference[i],
                &hover,
                &Vector3::zeros(),
                self.config.dt,
                &self.params,
            )?;
            offsets.push(Self::deviation(&next, &reference[i + 1]));
        }
        let mut pred = self.prediction.clone();
        pred.offset = pred.offset_stack(&offsets);
        let x0 = Self::deviation(x, &reference[0]);
        let mut stats = self.covariance.clone();
        stats.mu = mu.clone();

        let mut outcome: Option<(DVector<f64>, DVector<f64>, SolvePath, Option<QpStatus>, f64)> = None;
        let state_bounded = self.config.position_bound.is_some() || self.config.velocity_bound.is_some();
        if self.config.fast_path {
            let (v, m) = self.fast.solve(&x0, &pred, &mu);
            let feasible = if state_bounded {
                assemble_constraints(&x0, &pred, &self.constraints, &stats, self.config.structure)
                    .map(|lin| lin.max_violation(&v, &m) <= 1e-9)
                    .unwrap_or(false)
            } else {
                self.inputs_robustly_feasible(&v, &m, &mu)
            };
            if feasible {
                let cost = self.fast.cost(&x0, &pred, &mu, &v, &m);
                outcome = Some((v, m, SolvePath::Fast, None, cost));
            }
        }
        let qp_settings = QpSettings {
            eps_abs: self.config.qp_eps,
            eps_rel: self.config.qp_eps,
            max_iter: self.config.qp_max_iter,
            ..QpSettings::default()
        };
        if outcome.is_none() && self.config.fixed_gain_qp && !state_bounded {
            for scale in GAIN_SCALES {
                let m = self.fast.gain_params() * scale;
                if let Some((v, status)) = self.solve_fixed_gain(&x0, &pred, &mu, &m, &qp_settings) {
                    let cost = self.fast.cost(&x0, &pred, &mu, &v, &m);
                    if outcome.as_ref().is_none_or(|o| cost < o.4) {
                        outcome = Some((v, m, SolvePath::FixedGain, Some(status), cost));
                    }
                }
            }
        }
        if outcome.is_none() {
            let options = SolveOptions {
                qp: qp_settings,
                m_regularization: self.config.m_regularization,
            };
            let solved: Result<AffineSolution, SmpcError> = super::solve_affine(
                &x0,
                &pred,
                &self.weights,
                &self.constraints,
                &stats,
                self.config.structure,
                &options,
                self.warm.as_ref(),
            );
            if let Ok(sol) = solved {
                self.warm = Some(sol.warm.clone());
                outcome = Some((sol.v, sol.m, SolvePath::Qp, Some(sol.status), sol.cost));
            }
        }
        let (v, m, path, status, cost) = match outcome {
            Some(o) => o,
            None => {
                self.warm = None;
                let (v, m) = match &self.previous {
                    Some((v, m)) => (shift_inputs(v, INPUT_DIM), m.clone()),
                    None => (DVector::zeros(horizon * INPUT_DIM), DVector::zeros(self.fast.map().dim)),
                };
                (v, m, SolvePath::Fallback, None, f64::NAN)
            }
        };
        let solve_time = start.elapsed().as_secs_f64();

        let v0 = v.rows(0, INPUT_DIM).into_owned();
        let raw: [f64; 4] = std::array::from_fn(|i| hover.thrust[i] + v0[i]);
        let command = RotorCommand::clamped(raw, &self.params);
        let clamped = raw.iter().zip(command.thrust.iter()).any(|(a, b)| (a - b).abs() > 1e-12);
        self.previous = Some((v, m));
        Ok(ControlOutput {
            command,
            v0,
            mu,
            path,
            qp_status: status,
            solve_time,
            cost,
            clamped,
        })
    }
}

/// Drop the first input block and repeat the last.
fn shift_inputs(v: &DVector<f64>, n_u: usize) -> DVector<f64> {
    let mut out = v.clone();
    let len = v.len();
    if len > n_u {
        let tail = v.rows(n_u, len - n_u).into_owned();
        out.rows_mut(0, len - n_u).copy_from(&tail);
    }
    out
}
