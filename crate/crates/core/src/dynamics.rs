//! Quadrotor + taut-cable payload model.
//!
//! The cable is a massless rod of length `l` attached at the quadrotor's
//! center of mass. The payload position `x_L` is the canonical position; the
//! quadrotor position is always `x_L - l * rho`.
//!
//! Two flavours of the same translational dynamics live here:
//!
//! * [`derivative`]: the control model, where body rates are an input and
//!   attitude follows `R_dot = R * hat(omega_c)`. External forces on both
//!   bodies enter additively.
//! * [`rigid_body_derivative`]: the truth model used by the simulator, where
//!   body rates are a state driven by rotor torques.

use nalgebra::{Matrix3, Matrix4, Quaternion, UnitQuaternion, Vector4};
use serde::{Deserialize, Serialize};

use crate::{Error, Result, Vec3};

/// Propeller model coefficients, shared by the estimator, INDI and simulator.
///
/// Rotor layout (body frame, x forward, z up): rotor 1 at (+x,+y),
/// rotor 2 at (+x,-y), rotor 3 at (-x,-y), rotor 4 at (-x,+y). Rotors 1 and 3
/// spin counter-clockwise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RotorGeometry {
    /// Thrust coefficient (N s^2 / rad^2).
    pub k_f: f64,
    /// Drag torque coefficient (N m s^2 / rad^2).
    pub k_m: f64,
    /// Arm length (m).
    pub arm: f64,
    /// Angle between body x axis and the arms (rad).
    pub beta: f64,
    /// Propeller + rotor inertia about the spin axis (kg m^2).
    pub prop_inertia: f64,
    /// First-order motor time constant (s).
    pub motor_tau: f64,
    /// Maximum rotor speed (rad/s).
    pub n_max: f64,
}

impl Default for RotorGeometry {
    fn default() -> Self {
        Self {
            k_f: 8.5e-6,
            k_m: 1.4e-7,
            arm: 0.12,
            beta: std::f64::consts::FRAC_PI_4,
            prop_inertia: 1e-5,
            motor_tau: 0.05,
            n_max: 1200.0,
        }
    }
}

impl RotorGeometry {
    /// Maps squared rotor speeds to `[f, tau_x, tau_y, tau_z]`.
    pub fn g1(&self) -> Matrix4<f64> {
        let ax = self.arm * self.beta.cos() * self.k_f;
        let ay = self.arm * self.beta.sin() * self.k_f;
        let kf = self.k_f;
        let km = self.k_m;
        Matrix4::new(
            kf, kf, kf, kf, //
            ay, -ay, -ay, ay, //
            -ax, -ax, ax, ax, //
            -km, km, -km, km,
        )
    }

    /// Maps rotor accelerations to the reaction yaw torque.
    ///
    /// Spinning up a rotor reacts on the body in the same direction as its
    /// drag torque, so the sign pattern follows the last row of [`Self::g1`].
    pub fn g2(&self) -> Matrix4<f64> {
        let ip = self.prop_inertia;
        let mut g = Matrix4::zeros();
        g[(3, 0)] = -ip;
        g[(3, 1)] = ip;
        g[(3, 2)] = -ip;
        g[(3, 3)] = ip;
        g
    }

    /// Collective thrust and body torque from rotor speeds and accelerations.
    pub fn forward(&self, n: &Vector4<f64>, n_dot: &Vector4<f64>) -> (f64, Vec3) {
        let w = self.g1() * n.component_mul(n) + self.g2() * n_dot;
        (w[0], Vec3::new(w[1], w[2], w[3]))
    }

    /// Per-rotor speed that produces `thrust` with all rotors equal.
    pub fn hover_speed(&self, thrust: f64) -> f64 {
        (thrust.max(0.0) / (4.0 * self.k_f)).sqrt()
    }

    pub fn max_thrust(&self) -> f64 {
        4.0 * self.k_f * self.n_max * self.n_max
    }

    fn validate(&self) -> Result<()> {
        let all = [
            self.k_f,
            self.k_m,
            self.arm,
            self.beta,
            self.prop_inertia,
            self.motor_tau,
            self.n_max,
        ];
        if all.iter().all(|v| v.is_finite() && *v > 0.0) {
            Ok(())
        } else {
            Err(Error::InvalidParameter(
                "rotor geometry entries must be finite and strictly positive".into(),
            ))
        }
    }
}

/// `[f; tau] = G1 n^2 + G2 n_dot`.
pub fn rotor_forward(geom: &RotorGeometry, n: &Vector4<f64>, n_dot: &Vector4<f64>) -> (f64, Vec3) {
    geom.forward(n, n_dot)
}

/// Physical constants of the vehicle and payload. All SI.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemParams {
    pub m_q: f64,
    pub m_l: f64,
    pub cable_len: f64,
    pub inertia: Matrix3<f64>,
    pub gravity: f64,
    pub rotors: RotorGeometry,
}

impl Default for SystemParams {
    fn default() -> Self {
        Self {
            m_q: 1.0,
            m_l: 0.285,
            cable_len: 0.6,
            inertia: Matrix3::from_diagonal(&Vec3::new(8.1e-3, 8.1e-3, 1.42e-2)),
            gravity: 9.81,
            rotors: RotorGeometry::default(),
        }
    }
}

impl SystemParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("m_q", self.m_q),
            ("m_l", self.m_l),
            ("cable_len", self.cable_len),
            ("gravity", self.gravity),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidParameter(format!("{name} must be positive, got {v}")));
            }
        }
        let j = &self.inertia;
        if (j - j.transpose()).abs().max() > 1e-12 || j.cholesky().is_none() {
            return Err(Error::InvalidParameter(
                "inertia must be symmetric positive definite".into(),
            ));
        }
        self.rotors.validate()
    }

    pub fn total_mass(&self) -> f64 {
        self.m_q + self.m_l
    }

    pub fn hover_thrust(&self) -> f64 {
        self.total_mass() * self.gravity
    }

    pub fn gravity_vec(&self) -> Vec3 {
        Vec3::new(0.0, 0.0, self.gravity)
    }

    /// Loads parameters from a JSON file.
    pub fn from_json_str(text: &str) -> Result<Self> {
        let p: Self = serde_json::from_str(text)?;
        p.validate()?;
        Ok(p)
    }
}

/// Full vehicle + payload state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemState {
    pub x_q: Vec3,
    pub x_l: Vec3,
    pub v_q: Vec3,
    pub v_l: Vec3,
    /// Unit cable direction, pointing from the quadrotor to the payload.
    pub rho: Vec3,
    pub rho_dot: Vec3,
    pub q: UnitQuaternion<f64>,
    /// Body angular velocity (rad/s).
    pub omega: Vec3,
}

impl SystemState {
    /// Payload at rest at `x_l`, cable vertical, level attitude.
    pub fn hover(x_l: Vec3, params: &SystemParams) -> Self {
        let rho = Vec3::new(0.0, 0.0, -1.0);
        Self {
            x_q: x_l - params.cable_len * rho,
            x_l,
            v_q: Vec3::zeros(),
            v_l: Vec3::zeros(),
            rho,
            rho_dot: Vec3::zeros(),
            q: UnitQuaternion::identity(),
            omega: Vec3::zeros(),
        }
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        self.q.to_rotation_matrix().into_inner()
    }

    /// World-frame body z axis.
    pub fn body_z(&self) -> Vec3 {
        self.q * Vec3::z()
    }

    pub fn is_finite(&self) -> bool {
        [self.x_q, self.x_l, self.v_q, self.v_l, self.rho, self.rho_dot, self.omega]
            .iter()
            .all(|v| v.iter().all(|c| c.is_finite()))
            && self.q.coords.iter().all(|c| c.is_finite())
    }

    fn advanced(&self, d: &StateDerivative, h: f64) -> Self {
        let q = self.q.into_inner() + d.q_dot * h;
        Self {
            x_q: self.x_q + d.vel_q * h,
            x_l: self.x_l + d.vel_l * h,
            v_q: self.v_q + d.acc_q * h,
            v_l: self.v_l + d.acc_l * h,
            rho: self.rho + d.rho_dot * h,
            rho_dot: self.rho_dot + d.rho_ddot * h,
            q: UnitQuaternion::new_normalize(q),
            omega: self.omega + d.omega_dot * h,
        }
    }
}

/// Collective thrust plus commanded body rates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlInput {
    pub thrust: f64,
    pub omega_c: Vec3,
}

impl ControlInput {
    pub fn new(thrust: f64, omega_c: Vec3) -> Self {
        Self { thrust, omega_c }
    }

    pub fn hover(params: &SystemParams) -> Self {
        Self::new(params.hover_thrust(), Vec3::zeros())
    }
}

/// World-frame external forces on the quadrotor and on the payload.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ExternalForces {
    pub f_q: Vec3,
    pub f_l: Vec3,
}

impl ExternalForces {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn is_finite(&self) -> bool {
        self.f_q.iter().chain(self.f_l.iter()).all(|c| c.is_finite())
    }
}

/// Time derivative of every [`SystemState`] field.
#[derive(Debug, Clone, PartialEq)]
pub struct StateDerivative {
    pub vel_q: Vec3,
    pub vel_l: Vec3,
    pub acc_q: Vec3,
    pub acc_l: Vec3,
    pub rho_dot: Vec3,
    pub rho_ddot: Vec3,
    pub q_dot: Quaternion<f64>,
    pub omega_dot: Vec3,
    /// Cable tension (N) at this instant.
    pub tension: f64,
}

impl StateDerivative {
    pub fn max_abs(&self) -> f64 {
        [
            self.vel_q,
            self.vel_l,
            self.acc_q,
            self.acc_l,
            self.rho_dot,
            self.rho_ddot,
            self.omega_dot,
        ]
        .iter()
        .map(|v| v.amax())
        .fold(self.q_dot.coords.amax(), f64::max)
    }

    fn combine(k: [&StateDerivative; 4]) -> StateDerivative {
        let w = [1.0 / 6.0, 2.0 / 6.0, 2.0 / 6.0, 1.0 / 6.0];
        let mix = |f: fn(&StateDerivative) -> Vec3| -> Vec3 {
            f(k[0]) * w[0] + f(k[1]) * w[1] + f(k[2]) * w[2] + f(k[3]) * w[3]
        };
        StateDerivative {
            vel_q: mix(|d| d.vel_q),
            vel_l: mix(|d| d.vel_l),
            acc_q: mix(|d| d.acc_q),
            acc_l: mix(|d| d.acc_l),
            rho_dot: mix(|d| d.rho_dot),
            rho_ddot: mix(|d| d.rho_ddot),
            q_dot: k[0].q_dot * w[0] + k[1].q_dot * w[1] + k[2].q_dot * w[2] + k[3].q_dot * w[3],
            omega_dot: mix(|d| d.omega_dot),
            tension: k[0].tension,
        }
    }
}

/// Accelerations of the two bodies and the cable for a given world-frame
/// thrust vector. Returns `(acc_q, acc_l, rho_ddot, tension)`.
pub fn translational(
    state: &SystemState,
    thrust_vec: &Vec3,
    params: &SystemParams,
    ext: &ExternalForces,
) -> (Vec3, Vec3, Vec3, f64) {
    let (mq, ml, l) = (params.m_q, params.m_l, params.cable_len);
    let rho = &state.rho;
    let ge = params.gravity_vec();
    let quad_force = thrust_vec + ext.f_q;
    let rd2 = state.rho_dot.norm_squared();
    let tension =
        mq * ml / (mq + ml) * (l * rd2 - rho.dot(&quad_force) / mq + rho.dot(&ext.f_l) / ml);
    let acc_q = (tension * rho + quad_force) / mq - ge;
    let acc_l = (-tension * rho + ext.f_l) / ml - ge;
    let pull = quad_force / (mq * l) - ext.f_l / (ml * l);
    let rho_ddot = rho.cross(&rho.cross(&pull)) - rd2 * rho;
    (acc_q, acc_l, rho_ddot, tension)
}

fn quat_rate(q: &UnitQuaternion<f64>, omega: &Vec3) -> Quaternion<f64> {
    q.into_inner() * Quaternion::from_imag(*omega) * 0.5
}

fn check_finite(state: &SystemState, ext: &ExternalForces) -> Result<()> {
    if !state.is_finite() {
        return Err(Error::NonFinite("state"));
    }
    if !ext.is_finite() {
        return Err(Error::NonFinite("external forces"));
    }
    Ok(())
}

/// Disturbed control-model dynamics. Body rates are taken from the input;
/// the state's `omega` is carried with zero derivative.
pub fn derivative(
    state: &SystemState,
    input: &ControlInput,
    params: &SystemParams,
    ext: &ExternalForces,
) -> Result<StateDerivative> {
    check_finite(state, ext)?;
    if !input.thrust.is_finite() || !input.omega_c.iter().all(|c| c.is_finite()) {
        return Err(Error::NonFinite("control input"));
    }
    let thrust_vec = state.body_z() * input.thrust;
    let (acc_q, acc_l, rho_ddot, tension) = translational(state, &thrust_vec, params, ext);
    Ok(StateDerivative {
        vel_q: state.v_q,
        vel_l: state.v_l,
        acc_q,
        acc_l,
        rho_dot: state.rho_dot,
        rho_ddot,
        q_dot: quat_rate(&state.q, &input.omega_c),
        omega_dot: Vec3::zeros(),
        tension,
    })
}

/// Undisturbed dynamics written in the two-equation form: the payload
/// equation for the system as a whole and the cable swing equation.
pub fn nominal_derivative(
    state: &SystemState,
    input: &ControlInput,
    params: &SystemParams,
) -> Result<StateDerivative> {
    check_finite(state, &ExternalForces::zero())?;
    if !input.thrust.is_finite() || !input.omega_c.iter().all(|c| c.is_finite()) {
        return Err(Error::NonFinite("control input"));
    }
    let (mq, ml, l) = (params.m_q, params.m_l, params.cable_len);
    let rho = &state.rho;
    let ge = params.gravity_vec();
    let thrust_vec = state.body_z() * input.thrust;
    let rd2 = state.rho_dot.norm_squared();
    let acc_l = (rho.dot(&thrust_vec) - mq * l * rd2) * rho / (mq + ml) - ge;
    let rho_ddot = rho.cross(&rho.cross(&thrust_vec)) / (mq * l) - rd2 * rho;
    let acc_q = acc_l - l * rho_ddot;
    let tension = -ml * (acc_l + ge).dot(rho);
    Ok(StateDerivative {
        vel_q: state.v_q,
        vel_l: state.v_l,
        acc_q,
        acc_l,
        rho_dot: state.rho_dot,
        rho_ddot,
        q_dot: quat_rate(&state.q, &input.omega_c),
        omega_dot: Vec3::zeros(),
        tension,
    })
}

/// Truth-model dynamics: rates are integrated from body torque and the
/// rigid-body Euler equation.
pub fn rigid_body_derivative(
    state: &SystemState,
    thrust: f64,
    torque: &Vec3,
    params: &SystemParams,
    ext: &ExternalForces,
) -> Result<StateDerivative> {
    check_finite(state, ext)?;
    if !thrust.is_finite() || !torque.iter().all(|c| c.is_finite()) {
        return Err(Error::NonFinite("wrench"));
    }
    let thrust_vec = state.body_z() * thrust;
    let (acc_q, acc_l, rho_ddot, tension) = translational(state, &thrust_vec, params, ext);
    let j = &params.inertia;
    let w = &state.omega;
    let omega_dot = j
        .try_inverse()
        .ok_or_else(|| Error::Singular("inertia".into()))?
        * (torque - w.cross(&(j * w)));
    Ok(StateDerivative {
        vel_q: state.v_q,
        vel_l: state.v_l,
        acc_q,
        acc_l,
        rho_dot: state.rho_dot,
        rho_ddot,
        q_dot: quat_rate(&state.q, w),
        omega_dot,
        tension,
    })
}

/// Re-imposes the state invariants: unit `rho`, `rho_dot` tangent to the
/// sphere, unit quaternion and the quadrotor position/velocity implied by the
/// payload and cable.
pub fn normalize_state(state: &SystemState, params: &SystemParams) -> Result<SystemState> {
    let rn = state.rho.norm();
    if !(0.9..=1.1).contains(&rn) {
        return Err(Error::Degenerate(format!("cable direction norm {rn}")));
    }
    let qn = state.q.as_ref().norm();
    if !(0.9..=1.1).contains(&qn) {
        return Err(Error::Degenerate(format!("quaternion norm {qn}")));
    }
    let rho = state.rho / rn;
    let rho_dot = state.rho_dot - rho * rho.dot(&state.rho_dot);
    let l = params.cable_len;
    Ok(SystemState {
        x_q: state.x_l - l * rho,
        x_l: state.x_l,
        v_q: state.v_l - l * rho_dot,
        v_l: state.v_l,
        rho,
        rho_dot,
        q: UnitQuaternion::new_normalize(state.q.into_inner()),
        omega: state.omega,
    })
}

fn check_dt(dt: f64) -> Result<()> {
    if dt > 0.0 && dt <= 0.05 {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("integration step {dt} outside (0, 0.05]")))
    }
}

/// Generic RK4 step with a caller-supplied vector field, followed by
/// normalization.
pub fn rk4_with<F>(state: &SystemState, dt: f64, params: &SystemParams, mut f: F) -> Result<SystemState>
where
    F: FnMut(&SystemState) -> Result<StateDerivative>,
{
    check_dt(dt)?;
    let k1 = f(state)?;
    let k2 = f(&state.advanced(&k1, 0.5 * dt))?;
    let k3 = f(&state.advanced(&k2, 0.5 * dt))?;
    let k4 = f(&state.advanced(&k3, dt))?;
    let d = StateDerivative::combine([&k1, &k2, &k3, &k4]);
    normalize_state(&state.advanced(&d, dt), params)
}

/// One classic RK4 step of the control model. The returned state carries the
/// commanded body rate as its `omega`.
pub fn step_rk4(
    state: &SystemState,
    input: &ControlInput,
    params: &SystemParams,
    ext: &ExternalForces,
    dt: f64,
) -> Result<SystemState> {
    let mut next = rk4_with(state, dt, params, |s| derivative(s, input, params, ext))?;
    next.omega = input.omega_c;
    Ok(next)
}

/// Total mechanical energy of both bodies (J), gravity potential referenced
/// to z = 0.
pub fn mechanical_energy(state: &SystemState, params: &SystemParams) -> f64 {
    let g = params.gravity;
    0.5 * params.m_q * state.v_q.norm_squared()
        + 0.5 * params.m_l * state.v_l.norm_squared()
        + params.m_q * g * state.x_q.z
        + params.m_l * g * state.x_l.z
        + 0.5 * state.omega.dot(&(params.inertia * state.omega))
}
