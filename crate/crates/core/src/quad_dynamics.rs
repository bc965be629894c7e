//! Rigid-body quadrotor model.
//!
//! State layout (13): position `p` (m), velocity `v` (m/s), attitude quaternion
//! `q` stored scalar-first `[w, x, y, z]`, body rates `omega` (rad/s).
//! Inputs are the four rotor thrusts of an X-configuration frame:
//!
//! ```text
//!        x (forward)
//!   1 (CW)    0 (CCW)
//!         \  /
//!          \/        rotor i sits at (±d, ±d), d = l_arm / sqrt(2)
//!          /\
//!         /  \
//!   2 (CCW)   3 (CW)
//! ```
//!
//! External aerodynamic effects enter as a world-frame force `e_f` (N) on the
//! translational dynamics.

use nalgebra::{DMatrix, DVector, Matrix3, Matrix4, Vector3, Vector4};
use thiserror::Error;

pub const STATE_DIM: usize = 13;
pub const INPUT_DIM: usize = 4;
pub const DISTURBANCE_DIM: usize = 3;

const QUAT_TOL: f64 = 1e-9;
const FD_STEP: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DynamicsError {
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("quaternion norm {0} is not unit within tolerance")]
    NonUnitQuaternion(f64),
    #[error("time step must be positive, got {0}")]
    NonPositiveStep(f64),
    #[error("rotor thrust {value} outside [0, {max}] for rotor {index}")]
    ThrustOutOfRange { index: usize, value: f64, max: f64 },
    #[error("horizon must be at least 1")]
    EmptyHorizon,
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid physical parameter: {0}")]
    InvalidParams(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhysicalParams {
    pub mass: f64,
    /// Diagonal of the inertia tensor, kg m^2.
    pub inertia: Vector3<f64>,
    pub gravity: f64,
    pub arm_length: f64,
    /// Rotor drag torque per newton of thrust, m.
    pub torque_coeff: f64,
    pub max_thrust: f64,
}

impl Default for PhysicalParams {
    fn default() -> Self {
        Self {
            mass: 1.0,
            inertia: Vector3::new(0.01, 0.01, 0.02),
            gravity: 9.81,
            arm_length: 0.17,
            torque_coeff: 0.016,
            max_thrust: 8.0,
        }
    }
}

impl PhysicalParams {
    pub fn validate(&self) -> Result<(), DynamicsError> {
        if !(self.mass > 0.0 && self.mass.is_finite()) {
            return Err(DynamicsError::InvalidParams("mass"));
        }
        if self.inertia.iter().any(|j| !(*j > 0.0 && j.is_finite())) {
            return Err(DynamicsError::InvalidParams("inertia"));
        }
        if (self.gravity - 9.81).abs() > 1e-12 {
            return Err(DynamicsError::InvalidParams("gravity"));
        }
        if !(self.arm_length > 0.0 && self.torque_coeff > 0.0 && self.max_thrust > 0.0) {
            return Err(DynamicsError::InvalidParams("rotor geometry"));
        }
        Ok(())
    }

    /// Per-rotor thrust that balances gravity.
    pub fn hover_thrust(&self) -> f64 {
        self.mass * self.gravity / INPUT_DIM as f64
    }

    /// Body torque produced by the four thrusts.
    pub fn body_torque(&self, thrust: &[f64; 4]) -> Vector3<f64> {
        let d = self.arm_length / std::f64::consts::SQRT_2;
        let [t0, t1, t2, t3] = *thrust;
        Vector3::new(
            d * (t0 + t1 - t2 - t3),
            d * (-t0 + t1 + t2 - t3),
            self.torque_coeff * (t0 - t1 + t2 - t3),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadState {
    pub position: Vector3<f64>,
    pub velocity: Vector3<f64>,
    /// Scalar-first unit quaternion, world <- body.
    pub attitude: Vector4<f64>,
    pub body_rate: Vector3<f64>,
}

impl QuadState {
    pub fn hover_at(position: Vector3<f64>) -> Self {
        Self {
            position,
            velocity: Vector3::zeros(),
            attitude: Vector4::new(1.0, 0.0, 0.0, 0.0),
            body_rate: Vector3::zeros(),
        }
    }

    pub fn to_vector(&self) -> DVector<f64> {
        let mut x = DVector::zeros(STATE_DIM);
        x.fixed_rows_mut::<3>(0).copy_from(&self.position);
        x.fixed_rows_mut::<3>(3).copy_from(&self.velocity);
        x.fixed_rows_mut::<4>(6).copy_from(&self.attitude);
        x.fixed_rows_mut::<3>(10).copy_from(&self.body_rate);
        x
    }

    /// Unchecked conversion; the quaternion is taken as-is.
    pub fn from_slice(x: &[f64]) -> Self {
        Self {
            position: Vector3::new(x[0], x[1], x[2]),
            velocity: Vector3::new(x[3], x[4], x[5]),
            attitude: Vector4::new(x[6], x[7], x[8], x[9]),
            body_rate: Vector3::new(x[10], x[11], x[12]),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.position.iter().all(|v| v.is_finite())
            && self.velocity.iter().all(|v| v.is_finite())
            && self.attitude.iter().all(|v| v.is_finite())
            && self.body_rate.iter().all(|v| v.is_finite())
    }

    pub fn validate(&self) -> Result<(), DynamicsError> {
        if !self.is_finite() {
            return Err(DynamicsError::NonFinite("state"));
        }
        check_unit(&self.attitude)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RotorCommand {
    pub thrust: [f64; 4],
}

impl RotorCommand {
    pub fn uniform(value: f64) -> Self {
        Self { thrust: [value; 4] }
    }

    pub fn hover(params: &PhysicalParams) -> Self {
        Self::uniform(params.hover_thrust())
    }

    pub fn collective(&self) -> f64 {
        self.thrust.iter().sum()
    }

    pub fn validate(&self, params: &PhysicalParams) -> Result<(), DynamicsError> {
        for (index, &value) in self.thrust.iter().enumerate() {
            if !value.is_finite() {
                return Err(DynamicsError::NonFinite("rotor command"));
            }
            if value < 0.0 || value > params.max_thrust {
                return Err(DynamicsError::ThrustOutOfRange {
                    index,
                    value,
                    max: params.max_thrust,
                });
            }
        }
        Ok(())
    }

    /// Clamp each rotor into `[0, max_thrust]`.
    pub fn clamped(thrust: [f64; 4], params: &PhysicalParams) -> Self {
        Self {
            thrust: thrust.map(|t| t.clamp(0.0, params.max_thrust)),
        }
    }
}

fn check_unit(q: &Vector4<f64>) -> Result<(), DynamicsError> {
    let norm = q.norm();
    if (norm - 1.0).abs() > QUAT_TOL {
        return Err(DynamicsError::NonUnitQuaternion(norm));
    }
    Ok(())
}

fn check_finite3(v: &Vector3<f64>, what: &'static str) -> Result<(), DynamicsError> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(DynamicsError::NonFinite(what))
    }
}

/// Rotation matrix of a scalar-first quaternion (no normalization).
pub fn rotation_matrix(q: &Vector4<f64>) -> Matrix3<f64> {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

fn rotate_raw(q: &Vector4<f64>, v: &Vector3<f64>) -> Vector3<f64> {
    // v' = v + 2 w (u x v) + 2 u x (u x v)
    let u = Vector3::new(q[1], q[2], q[3]);
    let t = 2.0 * u.cross(v);
    v + q[0] * t + u.cross(&t)
}

/// Rotate `vec` by the unit quaternion `q`.
pub fn quat_rotate(q: &Vector4<f64>, vec: &Vector3<f64>) -> Result<Vector3<f64>, DynamicsError> {
    if !q.iter().all(|v| v.is_finite()) {
        return Err(DynamicsError::NonFinite("quaternion"));
    }
    check_finite3(vec, "vector")?;
    check_unit(q)?;
    Ok(rotate_raw(q, vec))
}

/// The 4x4 quaternion-rate matrix for body rates.
pub fn rate_matrix(omega: &Vector3<f64>) -> Matrix4<f64> {
    let (p, q, r) = (omega[0], omega[1], omega[2]);
    Matrix4::new(
        0.0, -p, -q, -r, //
        p, 0.0, r, -q, //
        q, -r, 0.0, p, //
        r, q, -p, 0.0,
    )
}

/// `q_dot = 0.5 * Lambda(omega) * q`.
pub fn quat_kinematics(
    omega: &Vector3<f64>,
    q: &Vector4<f64>,
) -> Result<Vector4<f64>, DynamicsError> {
    check_finite3(omega, "body rate")?;
    if !q.iter().all(|v| v.is_finite()) {
        return Err(DynamicsError::NonFinite("quaternion"));
    }
    Ok(0.5 * rate_matrix(omega) * q)
}

fn derivative_raw(
    x: &[f64; STATE_DIM],
    thrust: &[f64; 4],
    force: &Vector3<f64>,
    params: &PhysicalParams,
) -> [f64; STATE_DIM] {
    let v = Vector3::new(x[3], x[4], x[5]);
    let q = Vector4::new(x[6], x[7], x[8], x[9]);
    let omega = Vector3::new(x[10], x[11], x[12]);

    let collective = Vector3::new(0.0, 0.0, thrust.iter().sum());
    let accel = Vector3::new(0.0, 0.0, -params.gravity)
        + (rotate_raw(&q, &collective) + force) / params.mass;
    let q_dot = 0.5 * rate_matrix(&omega) * q;
    let j = params.inertia;
    let j_omega = j.component_mul(&omega);
    let torque = params.body_torque(thrust);
    let omega_dot = (torque - omega.cross(&j_omega)).component_div(&j);

    let mut out = [0.0; STATE_DIM];
    out[0..3].copy_from_slice(v.as_slice());
    out[3..6].copy_from_slice(accel.as_slice());
    out[6..10].copy_from_slice(q_dot.as_slice());
    out[10..13].copy_from_slice(omega_dot.as_slice());
    out
}

/// Continuous-time state derivative (13) of the nominal model.
pub fn continuous_dynamics(
    x: &QuadState,
    u: &RotorCommand,
    e_f: &Vector3<f64>,
    params: &PhysicalParams,
) -> Result<DVector<f64>, DynamicsError> {
    x.validate()?;
    u.validate(params)?;
    check_finite3(e_f, "external force")?;
    let raw = to_raw(&x.to_vector());
    Ok(DVector::from_row_slice(&derivative_raw(&raw, &u.thrust, e_f, params)))
}

fn to_raw(x: &DVector<f64>) -> [f64; STATE_DIM] {
    let mut out = [0.0; STATE_DIM];
    out.copy_from_slice(x.as_slice());
    out
}

fn axpy(x: &[f64; STATE_DIM], k: &[f64; STATE_DIM], h: f64) -> [f64; STATE_DIM] {
    let mut out = *x;
    for (o, d) in out.iter_mut().zip(k) {
        *o += h * d;
    }
    out
}

/// One RK4 step on the raw state vector with quaternion renormalization.
/// No validation; used by `step_rk4` and the finite-difference Jacobians.
pub(crate) fn step_raw(
    x: &[f64; STATE_DIM],
    thrust: &[f64; 4],
    force: &Vector3<f64>,
    dt: f64,
    params: &PhysicalParams,
) -> [f64; STATE_DIM] {
    let k1 = derivative_raw(x, thrust, force, params);
    let k2 = derivative_raw(&axpy(x, &k1, 0.5 * dt), thrust, force, params);
    let k3 = derivative_raw(&axpy(x, &k2, 0.5 * dt), thrust, force, params);
    let k4 = derivative_raw(&axpy(x, &k3, dt), thrust, force, params);
    let mut out = *x;
    for i in 0..STATE_DIM {
        out[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
    let norm = (out[6] * out[6] + out[7] * out[7] + out[8] * out[8] + out[9] * out[9]).sqrt();
    for v in &mut out[6..10] {
        *v /= norm;
    }
    out
}

/// Classical fourth-order Runge-Kutta step followed by quaternion renormalization.
pub fn step_rk4(
    x: &QuadState,
    u: &RotorCommand,
    e_f: &Vector3<f64>,
    dt: f64,
    params: &PhysicalParams,
) -> Result<QuadState, DynamicsError> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(DynamicsError::NonPositiveStep(dt));
    }
    x.validate()?;
    u.validate(params)?;
    check_finite3(e_f, "external force")?;
    let next = step_raw(&to_raw(&x.to_vector()), &u.thrust, e_f, dt, params);
    let state = QuadState::from_slice(&next);
    if !state.is_finite() {
        return Err(DynamicsError::NonFinite("integrated state"));
    }
    Ok(state)
}

/// Discrete-time Jacobians of one RK4 step.
#[derive(Debug, Clone, PartialEq)]
pub struct Linearization {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    /// Sensitivity to an additive acceleration (m/s^2) on the velocity.
    pub g: DMatrix<f64>,
}

/// Central-difference Jacobians of `step_rk4` around `(x_ref, u_ref, e_f)`.
///
/// Rotor columns switch to one-sided differences when the reference sits on a
/// thrust bound.
pub fn linearize(
    x_ref: &QuadState,
    u_ref: &RotorCommand,
    e_f: &Vector3<f64>,
    dt: f64,
    params: &PhysicalParams,
) -> Result<Linearization, DynamicsError> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(DynamicsError::NonPositiveStep(dt));
    }
    x_ref.validate()?;
    u_ref.validate(params)?;
    check_finite3(e_f, "external force")?;

    let x0 = to_raw(&x_ref.to_vector());
    let h = FD_STEP;
    let mut a = DMatrix::zeros(STATE_DIM, STATE_DIM);
    for j in 0..STATE_DIM {
        let mut xp = x0;
        let mut xm = x0;
        xp[j] += h;
        xm[j] -= h;
        let fp = step_raw(&xp, &u_ref.thrust, e_f, dt, params);
        let fm = step_raw(&xm, &u_ref.thrust, e_f, dt, params);
        for i in 0..STATE_DIM {
            a[(i, j)] = (fp[i] - fm[i]) / (2.0 * h);
        }
    }

    let mut b = DMatrix::zeros(STATE_DIM, INPUT_DIM);
    for j in 0..INPUT_DIM {
        let base = u_ref.thrust[j];
        let (lo, hi) = (
            (base - h).max(0.0),
            (base + h).min(params.max_thrust),
        );
        let mut up = u_ref.thrust;
        let mut um = u_ref.thrust;
        up[j] = hi;
        um[j] = lo;
        let fp = step_raw(&x0, &up, e_f, dt, params);
        let fm = step_raw(&x0, &um, e_f, dt, params);
        for i in 0..STATE_DIM {
            b[(i, j)] = (fp[i] - fm[i]) / (hi - lo);
        }
    }

    let mut g = DMatrix::zeros(STATE_DIM, DISTURBANCE_DIM);
    for j in 0..DISTURBANCE_DIM {
        // The disturbance is an acceleration; the force input is mass-scaled.
        let mut fp_force = *e_f;
        let mut fm_force = *e_f;
        fp_force[j] += h * params.mass;
        fm_force[j] -= h * params.mass;
        let fp = step_raw(&x0, &u_ref.thrust, &fp_force, dt, params);
        let fm = step_raw(&x0, &u_ref.thrust, &fm_force, dt, params);
        for i in 0..STATE_DIM {
            g[(i, j)] = (fp[i] - fm[i]) / (2.0 * h);
        }
    }
    Ok(Linearization { a, b, g })
}

/// Stacked finite-horizon prediction `x = A x0 + B u + G w + offset`.
///
/// Block row `i` of each stack predicts `x_{i}` for `i = 0..=N`; the first
/// block row of `a_stack` is the identity and those of `b_stack`/`g_stack` are
/// zero. `offset` carries known affine terms (zero from `stack_prediction`).
#[derive(Debug, Clone, PartialEq)]
pub struct LinearPrediction {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub g: DMatrix<f64>,
    pub a_stack: DMatrix<f64>,
    pub b_stack: DMatrix<f64>,
    pub g_stack: DMatrix<f64>,
    pub offset: DVector<f64>,
    pub n: usize,
    pub n_u: usize,
    pub n_w: usize,
    pub horizon: usize,
}

pub fn stack_prediction(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    g: &DMatrix<f64>,
    horizon: usize,
) -> Result<LinearPrediction, DynamicsError> {
    if horizon == 0 {
        return Err(DynamicsError::EmptyHorizon);
    }
    let n = a.nrows();
    if a.ncols() != n {
        return Err(DynamicsError::Dimension(format!("A is {}x{}", n, a.ncols())));
    }
    if b.nrows() != n || g.nrows() != n {
        return Err(DynamicsError::Dimension(format!(
            "A has {n} rows, B has {}, G has {}",
            b.nrows(),
            g.nrows()
        )));
    }
    let (n_u, n_w) = (b.ncols(), g.ncols());
    let rows = (horizon + 1) * n;

    let mut powers = Vec::with_capacity(horizon + 1);
    powers.push(DMatrix::<f64>::identity(n, n));
    for k in 1..=horizon {
        powers.push(a * &powers[k - 1]);
    }
    let mut a_stack = DMatrix::zeros(rows, n);
    for (k, p) in powers.iter().enumerate() {
        a_stack.view_mut((k * n, 0), (n, n)).copy_from(p);
    }
    // Block (i, j) of B/G stacks is A^{i-1-j} B for j < i.
    let ab: Vec<DMatrix<f64>> = powers[..horizon].iter().map(|p| p * b).collect();
    let ag: Vec<DMatrix<f64>> = powers[..horizon].iter().map(|p| p * g).collect();
    let mut b_stack = DMatrix::zeros(rows, horizon * n_u);
    let mut g_stack = DMatrix::zeros(rows, horizon * n_w);
    for i in 1..=horizon {
        for j in 0..i {
            b_stack
                .view_mut((i * n, j * n_u), (n, n_u))
                .copy_from(&ab[i - 1 - j]);
            g_stack
                .view_mut((i * n, j * n_w), (n, n_w))
                .copy_from(&ag[i - 1 - j]);
        }
    }
    Ok(LinearPrediction {
        a: a.clone(),
        b: b.clone(),
        g: g.clone(),
        a_stack,
        b_stack,
        g_stack,
        offset: DVector::zeros(rows),
        n,
        n_u,
        n_w,
        horizon,
    })
}

impl LinearPrediction {
    /// Set the affine offset from per-step additive terms `d_i` entering
    /// `x_{i+1} = A x_i + B u_i + G w_i + d_i`.
    pub fn with_step_offsets(mut self, offsets: &[DVector<f64>]) -> Result<Self, DynamicsError> {
        if offsets.len() != self.horizon || offsets.iter().any(|d| d.len() != self.n) {
            return Err(DynamicsError::Dimension(
                "one offset of state dimension per horizon step".into(),
            ));
        }
        self.offset = self.offset_stack(offsets);
        Ok(self)
    }

    /// Stacked affine term produced by per-step offsets (`offsets.len()` must
    /// equal the horizon).
    pub fn offset_stack(&self, offsets: &[DVector<f64>]) -> DVector<f64> {
        let n = self.n;
        let mut stacked = DVector::zeros((self.horizon + 1) * n);
        let mut acc = DVector::zeros(n);
        for (i, d) in offsets.iter().enumerate().take(self.horizon) {
            acc = &self.a * acc + d;
            stacked.rows_mut((i + 1) * n, n).copy_from(&acc);
        }
        stacked
    }

    /// Evaluate the stacked prediction.
    pub fn predict(
        &self,
        x0: &DVector<f64>,
        u: &DVector<f64>,
        w: &DVector<f64>,
    ) -> DVector<f64> {
        &self.a_stack * x0 + &self.b_stack * u + &self.g_stack * w + &self.offset
    }

    pub fn block<'a>(&self, stack: &'a DVector<f64>, i: usize) -> nalgebra::DVectorView<'a, f64> {
        stack.rows(i * self.n, self.n)
    }
}
