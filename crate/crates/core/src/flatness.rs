//! Differential flatness of the taut-cable system.
//!
//! The flat outputs are the payload position and the quadrotor yaw. The cable
//! direction is the negated unit vector of `a_L + g e_z`; its derivatives come
//! from differentiating that normalized vector analytically, which is why the
//! payload trajectory must be smooth up to order four (five for body rates).

use nalgebra::{Matrix3, Rotation3, UnitQuaternion};

use crate::dynamics::{SystemParams, SystemState};
use crate::{Error, Result, Vec3};

/// Minimum `||a_L + g e_z||` (m/s^2) for which the cable is considered taut.
pub const EPS_TAUT: f64 = 0.1;

/// Flat outputs and their derivatives at one instant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlatSnapshot {
    pub pos: Vec3,
    pub vel: Vec3,
    pub acc: Vec3,
    pub jerk: Vec3,
    pub snap: Vec3,
    /// Fifth derivative. Only the body rates depend on it.
    pub crackle: Vec3,
    pub psi: f64,
    pub psi_dot: f64,
}

impl FlatSnapshot {
    pub fn hover(pos: Vec3) -> Self {
        Self {
            pos,
            vel: Vec3::zeros(),
            acc: Vec3::zeros(),
            jerk: Vec3::zeros(),
            snap: Vec3::zeros(),
            crackle: Vec3::zeros(),
            psi: 0.0,
            psi_dot: 0.0,
        }
    }

    /// Builds a snapshot from derivatives of orders 0..=5.
    pub fn from_derivs(d: [Vec3; 6], psi: f64, psi_dot: f64) -> Self {
        Self { pos: d[0], vel: d[1], acc: d[2], jerk: d[3], snap: d[4], crackle: d[5], psi, psi_dot }
    }
}

/// Full state and inputs implied by a flat snapshot.
#[derive(Debug, Clone, PartialEq)]
pub struct FlatState {
    pub state: SystemState,
    /// Collective thrust (N).
    pub thrust: f64,
    /// Body rates (rad/s).
    pub omega: Vec3,
    /// Cable tension (N).
    pub tension: f64,
    pub rho_ddot: Vec3,
    pub acc_q: Vec3,
}

/// Derivatives of the unit vector `n = w / |w|` given derivatives of `w`,
/// together with the reverse-mode pass used by the planner.
#[derive(Debug, Clone, Copy)]
pub struct UnitChain {
    pub r: f64,
    pub r_d: f64,
    pub r_dd: f64,
    pub n: Vec3,
    pub n_d: Vec3,
    pub n_dd: Vec3,
    w_d: Vec3,
    w_dd: Vec3,
}

impl UnitChain {
    pub fn new(w: &Vec3, w_d: &Vec3, w_dd: &Vec3) -> Self {
        let r = w.norm();
        let n = w / r;
        let r_d = n.dot(w_d);
        let n_d = (w_d - n * r_d) / r;
        let r_dd = n_d.dot(w_d) + n.dot(w_dd);
        let n_dd = (w_dd - 2.0 * r_d * n_d - r_dd * n) / r;
        Self { r, r_d, r_dd, n, n_d, n_dd, w_d: *w_d, w_dd: *w_dd }
    }

    /// Third derivative of `n`.
    pub fn n_ddd(&self, w_ddd: &Vec3) -> Vec3 {
        let r_ddd = self.n_dd.dot(&self.w_d) + 2.0 * self.n_d.dot(&self.w_dd) + self.n.dot(w_ddd);
        (w_ddd - 3.0 * self.r_d * self.n_dd - 3.0 * self.r_dd * self.n_d - r_ddd * self.n) / self.r
    }

    /// Pulls gradients with respect to `n` and `n_dd` back onto `w`, `w_d`
    /// and `w_dd`.
    pub fn backward(&self, g_n_in: &Vec3, g_ndd: &Vec3) -> (Vec3, Vec3, Vec3) {
        let UnitChain { r, r_d, r_dd, n, n_d, n_dd, w_d, w_dd } = *self;
        let mut g_n = *g_n_in;
        let mut g_wd = Vec3::zeros();
        let mut g_wdd = g_ndd / r;
        let mut g_nd = -2.0 * r_d / r * g_ndd;
        let mut g_rd = -2.0 * n_d.dot(g_ndd) / r;
        g_n -= r_dd / r * g_ndd;
        let g_rdd = -n.dot(g_ndd) / r;
        let mut g_r = -n_dd.dot(g_ndd) / r;

        // r_dd = n_d . w_d + n . w_dd
        g_nd += g_rdd * w_d;
        g_wd += g_rdd * n_d;
        g_n += g_rdd * w_dd;
        g_wdd += g_rdd * n;

        // n_d = (w_d - n r_d) / r
        g_wd += g_nd / r;
        g_n -= r_d / r * g_nd;
        g_rd -= n.dot(&g_nd) / r;
        g_r -= n_d.dot(&g_nd) / r;

        // r_d = n . w_d
        g_n += g_rd * w_d;
        g_wd += g_rd * n;

        // n = w / r, r = |w|
        g_r -= n.dot(&g_n) / r;
        let g_w = g_n / r + g_r * n;
        (g_w, g_wd, g_wdd)
    }
}

/// Cable direction for a payload acceleration.
pub fn cable_direction(acc: &Vec3, gravity: f64) -> Result<Vec3> {
    let w = acc + Vec3::new(0.0, 0.0, gravity);
    let r = w.norm();
    if !(r > EPS_TAUT) {
        return Err(Error::FlatnessSingularity(format!(
            "||a_L + g e_z|| = {r:.4} below taut threshold"
        )));
    }
    Ok(-w / r)
}

/// Attitude with body z along `z_b` and body x in the vertical plane of the
/// heading `psi`. Returns the rotation and the unnormalized `y_C x z_B`.
fn attitude(z_b: &Vec3, psi: f64) -> Result<(Matrix3<f64>, Vec3)> {
    let y_c = Vec3::new(-psi.sin(), psi.cos(), 0.0);
    let u = y_c.cross(z_b);
    let un = u.norm();
    if un < 1e-6 {
        return Err(Error::FlatnessSingularity("thrust axis aligned with heading normal".into()));
    }
    let x_b = u / un;
    let y_b = z_b.cross(&x_b);
    Ok((Matrix3::from_columns(&[x_b, y_b, *z_b]), u))
}

/// Full state, thrust and body rates from the flat outputs.
pub fn flat_to_state(snap: &FlatSnapshot, params: &SystemParams) -> Result<FlatState> {
    let (mq, ml, l) = (params.m_q, params.m_l, params.cable_len);
    let w = snap.acc + params.gravity_vec();
    if !(w.norm() > EPS_TAUT) {
        return Err(Error::FlatnessSingularity(format!(
            "||a_L + g e_z|| = {:.4} below taut threshold",
            w.norm()
        )));
    }
    let chain = UnitChain::new(&w, &snap.jerk, &snap.snap);
    let rho = -chain.n;
    let rho_dot = -chain.n_d;
    let rho_ddot = -chain.n_dd;
    let rho_dddot = -chain.n_ddd(&snap.crackle);

    let force = (mq + ml) * w - mq * l * rho_ddot;
    let force_dot = (mq + ml) * snap.jerk - mq * l * rho_dddot;
    let thrust = force.norm();
    if !(thrust > 1e-9) {
        return Err(Error::FlatnessSingularity("zero thrust".into()));
    }
    let z_b = force / thrust;
    let z_b_dot = (force_dot - z_b * z_b.dot(&force_dot)) / thrust;
    let (rot, u) = attitude(&z_b, snap.psi)?;
    let x_b = rot.column(0).into_owned();
    let y_b = rot.column(1).into_owned();
    let y_c_dot = -snap.psi_dot * Vec3::new(snap.psi.cos(), snap.psi.sin(), 0.0);
    let y_c = Vec3::new(-snap.psi.sin(), snap.psi.cos(), 0.0);
    let u_dot = y_c_dot.cross(&z_b) + y_c.cross(&z_b_dot);
    let x_b_dot = (u_dot - x_b * x_b.dot(&u_dot)) / u.norm();
    let omega = Vec3::new(-z_b_dot.dot(&y_b), z_b_dot.dot(&x_b), x_b_dot.dot(&y_b));

    let q = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(rot));
    let state = SystemState {
        x_q: snap.pos - l * rho,
        x_l: snap.pos,
        v_q: snap.vel - l * rho_dot,
        v_l: snap.vel,
        rho,
        rho_dot,
        q,
        omega,
    };
    Ok(FlatState {
        state,
        thrust,
        omega,
        tension: ml * chain.r,
        rho_ddot,
        acc_q: snap.acc - l * rho_ddot,
    })
}

/// Sphere approximating part of the vehicle, cable or payload.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bubble {
    pub center: Vec3,
    pub radius: f64,
}

/// How the whole body is covered by spheres: `count + 1` centers evenly
/// spaced from the payload (index 0) to the quadrotor (index `count`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BubbleSpec {
    pub count: usize,
    /// Safe radius of the payload and cable spheres (m).
    pub d_payload: f64,
    /// Safe radius of the quadrotor sphere (m).
    pub d_quad: f64,
}

impl Default for BubbleSpec {
    fn default() -> Self {
        Self { count: 6, d_payload: 0.15, d_quad: 0.3 }
    }
}

impl BubbleSpec {
    pub fn radius(&self, j: usize) -> f64 {
        if j == self.count {
            self.d_quad
        } else {
            self.d_payload
        }
    }

    /// Fraction of the cable length from the payload to sphere `j`.
    pub fn fraction(&self, j: usize) -> f64 {
        j as f64 / self.count as f64
    }
}

/// Whole-body spheres for a payload position and acceleration.
pub fn system_bubbles(x_l: &Vec3, a_l: &Vec3, params: &SystemParams, spec: &BubbleSpec) -> Result<Vec<Bubble>> {
    if spec.count == 0 {
        return Err(Error::InvalidParameter("bubble count must be at least 1".into()));
    }
    let rho = cable_direction(a_l, params.gravity)?;
    Ok((0..=spec.count)
        .map(|j| Bubble {
            center: x_l - spec.fraction(j) * params.cable_len * rho,
            radius: spec.radius(j),
        })
        .collect())
}
