//! Real-time-iteration NMPC over the disturbed control model.
//!
//! The optimal control problem is discretized by multiple shooting with one
//! RK4 step per stage. Each call performs a single Gauss-Newton iteration in
//! error-state coordinates (15-dim tangent: payload position and velocity,
//! ambient cable direction and rate, attitude rotation vector), solves the
//! resulting LQ problem with a Riccati recursion and handles input bounds by
//! clamping violated components and re-solving once.

use std::time::Instant;

use nalgebra::{DMatrix, DVector, SMatrix, SVector, UnitQuaternion, Vector4};
use serde::{Deserialize, Serialize};

use crate::dynamics::{step_rk4, ControlInput, ExternalForces, SystemParams, SystemState};
use crate::flatness::{flat_to_state, FlatSnapshot};
use crate::minco::PiecewisePoly;
use crate::{Error, Result, Vec3};

pub const NX: usize = 15;
pub const NU: usize = 4;
/// Cost residual size: `x_Q, x_L, v_Q, v_L, rho, rho_dot, attitude`.
pub const NR: usize = 21;

type Tangent = SVector<f64, NX>;
type MatX = SMatrix<f64, NX, NX>;
type MatXU = SMatrix<f64, NX, NU>;

/// Diagonal weights of the tracking residual, one 3-vector per block.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StateWeights {
    pub pos_q: Vec3,
    pub pos_l: Vec3,
    pub vel_q: Vec3,
    pub vel_l: Vec3,
    pub rho: Vec3,
    pub rho_dot: Vec3,
    pub att: Vec3,
}

impl StateWeights {
    pub fn diagonal(&self) -> SVector<f64, NR> {
        let mut d = SVector::<f64, NR>::zeros();
        for (b, v) in [self.pos_q, self.pos_l, self.vel_q, self.vel_l, self.rho, self.rho_dot, self.att].iter().enumerate() {
            d.fixed_rows_mut::<3>(3 * b).copy_from(v);
        }
        d
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            pos_q: self.pos_q * s,
            pos_l: self.pos_l * s,
            vel_q: self.vel_q * s,
            vel_l: self.vel_l * s,
            rho: self.rho * s,
            rho_dot: self.rho_dot * s,
            att: self.att * s,
        }
    }
}

impl Default for StateWeights {
    fn default() -> Self {
        Self {
            pos_q: Vec3::repeat(10.0),
            pos_l: Vec3::repeat(200.0),
            vel_q: Vec3::repeat(1.0),
            vel_l: Vec3::repeat(20.0),
            rho: Vec3::repeat(5.0),
            rho_dot: Vec3::repeat(0.5),
            att: Vec3::new(1.0, 1.0, 5.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NmpcConfig {
    pub horizon: usize,
    pub dt: f64,
    pub q: StateWeights,
    /// Input weights `[thrust, omega_x, omega_y, omega_z]`.
    pub h: Vector4<f64>,
    pub q_e: StateWeights,
    pub b_x: f64,
    pub b_u: f64,
    pub u_min: ControlInput,
    pub u_max: ControlInput,
}

impl Default for NmpcConfig {
    fn default() -> Self {
        let q = StateWeights::default();
        Self {
            horizon: 20,
            dt: 0.05,
            q,
            h: Vector4::new(0.5, 10.0, 10.0, 10.0),
            q_e: q.scaled(10.0),
            b_x: 1.0,
            b_u: 1.0,
            u_min: ControlInput::new(1.0, Vec3::new(-6.0, -6.0, -3.0)),
            u_max: ControlInput::new(40.0, Vec3::new(6.0, 6.0, 3.0)),
        }
    }
}

impl NmpcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon < 5 {
            return Err(Error::InvalidParameter(format!("horizon {} < 5", self.horizon)));
        }
        if !(self.dt > 0.0 && self.dt <= 0.05) {
            return Err(Error::InvalidParameter(format!("stage duration {} outside (0, 0.05]", self.dt)));
        }
        let all_nonneg = self.q.diagonal().iter().chain(self.q_e.diagonal().iter()).chain(self.h.iter()).all(|w| *w >= 0.0)
            && self.b_x >= 0.0
            && self.b_u >= 0.0;
        if !all_nonneg {
            return Err(Error::InvalidParameter("weights and decay rates must be non-negative".into()));
        }
        if self.h.iter().any(|w| *w <= 0.0) {
            return Err(Error::InvalidParameter("input weights must be positive".into()));
        }
        let (lo, hi) = (input_vec(&self.u_min), input_vec(&self.u_max));
        if (0..NU).any(|i| !(lo[i] < hi[i])) {
            return Err(Error::InvalidParameter("u_min must be below u_max componentwise".into()));
        }
        Ok(())
    }

    pub fn clamp(&self, u: &ControlInput) -> ControlInput {
        let (lo, hi) = (input_vec(&self.u_min), input_vec(&self.u_max));
        let v = input_vec(u);
        input_from(&Vector4::from_fn(|i, _| v[i].clamp(lo[i], hi[i])))
    }
}

fn input_vec(u: &ControlInput) -> Vector4<f64> {
    Vector4::new(u.thrust, u.omega_c.x, u.omega_c.y, u.omega_c.z)
}

fn input_from(v: &Vector4<f64>) -> ControlInput {
    ControlInput::new(v[0], Vec3::new(v[1], v[2], v[3]))
}

/// Reference states (N+1) and inputs (N).
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceWindow {
    pub states: Vec<SystemState>,
    pub inputs: Vec<ControlInput>,
}

impl ReferenceWindow {
    /// Stationary hover at `x_l` for every stage.
    pub fn hover(x_l: Vec3, horizon: usize, params: &SystemParams) -> Self {
        Self {
            states: vec![SystemState::hover(x_l, params); horizon + 1],
            inputs: vec![ControlInput::hover(params); horizon],
        }
    }
}

/// Samples the flat trajectory (constant zero yaw) at `t0 + k dt`. Past the
/// end of the plan every stage is a hover at the final point.
pub fn build_reference(poly: &PiecewisePoly, t0: f64, cfg: &NmpcConfig, params: &SystemParams) -> Result<ReferenceWindow> {
    let total = poly.total_duration();
    let end = poly.evaluate(total, 0);
    let mut states = Vec::with_capacity(cfg.horizon + 1);
    let mut inputs = Vec::with_capacity(cfg.horizon);
    for k in 0..=cfg.horizon {
        let t = t0 + k as f64 * cfg.dt;
        let snap = if t >= total { FlatSnapshot::hover(end) } else { FlatSnapshot::from_derivs(poly.derivs(t.max(0.0)), 0.0, 0.0) };
        let fs = flat_to_state(&snap, params)?;
        if k < cfg.horizon {
            inputs.push(ControlInput::new(fs.thrust, fs.omega));
        }
        states.push(fs.state);
    }
    Ok(ReferenceWindow { states, inputs })
}

/// Per-stage decayed weight diagonals for `k = 0..=N`. The terminal stage of
/// the solver uses `q_e` instead of `q[N]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DecayedWeights {
    pub q: Vec<SVector<f64, NR>>,
    pub h: Vec<Vector4<f64>>,
    pub q_e: SVector<f64, NR>,
}

pub fn decay_weights(cfg: &NmpcConfig) -> DecayedWeights {
    let n = cfg.horizon as f64;
    let q = cfg.q.diagonal();
    DecayedWeights {
        q: (0..=cfg.horizon).map(|k| q * (-(k as f64) * cfg.b_x / n).exp()).collect(),
        h: (0..=cfg.horizon).map(|k| cfg.h * (-(k as f64) * cfg.b_u / n).exp()).collect(),
        q_e: cfg.q_e.diagonal(),
    }
}

/// `x ⊞ d`: retraction onto the state manifold.
pub fn boxplus(x: &SystemState, d: &Tangent, params: &SystemParams) -> SystemState {
    let l = params.cable_len;
    let x_l = x.x_l + d.fixed_rows::<3>(0);
    let v_l = x.v_l + d.fixed_rows::<3>(3);
    let rho = (x.rho + d.fixed_rows::<3>(6)).normalize();
    let rd = x.rho_dot + d.fixed_rows::<3>(9);
    let rho_dot = rd - rho * rho.dot(&rd);
    let q = x.q * UnitQuaternion::from_scaled_axis(d.fixed_rows::<3>(12).into_owned());
    SystemState { x_q: x_l - l * rho, x_l, v_q: v_l - l * rho_dot, v_l, rho, rho_dot, q, omega: x.omega }
}

/// `a ⊟ b`, the tangent at `b` pointing to `a`.
pub fn boxminus(a: &SystemState, b: &SystemState) -> Tangent {
    let mut d = Tangent::zeros();
    d.fixed_rows_mut::<3>(0).copy_from(&(a.x_l - b.x_l));
    d.fixed_rows_mut::<3>(3).copy_from(&(a.v_l - b.v_l));
    d.fixed_rows_mut::<3>(6).copy_from(&(a.rho - b.rho));
    d.fixed_rows_mut::<3>(9).copy_from(&(a.rho_dot - b.rho_dot));
    d.fixed_rows_mut::<3>(12).copy_from(&(b.q.inverse() * a.q).scaled_axis());
    d
}

/// Linear map from the tangent to the cost residual.
fn residual_map(l: f64) -> SMatrix<f64, NR, NX> {
    let mut c = SMatrix::<f64, NR, NX>::zeros();
    let eye = SMatrix::<f64, 3, 3>::identity();
    // x_Q = x_L - l rho, v_Q = v_L - l rho_dot
    c.fixed_view_mut::<3, 3>(0, 0).copy_from(&eye);
    c.fixed_view_mut::<3, 3>(0, 6).copy_from(&(-l * eye));
    c.fixed_view_mut::<3, 3>(3, 0).copy_from(&eye);
    c.fixed_view_mut::<3, 3>(6, 3).copy_from(&eye);
    c.fixed_view_mut::<3, 3>(6, 9).copy_from(&(-l * eye));
    c.fixed_view_mut::<3, 3>(9, 3).copy_from(&eye);
    c.fixed_view_mut::<3, 3>(12, 6).copy_from(&eye);
    c.fixed_view_mut::<3, 3>(15, 9).copy_from(&eye);
    c.fixed_view_mut::<3, 3>(18, 12).copy_from(&eye);
    c
}

/// Shooting trajectory kept between cycles.
#[derive(Debug, Clone, PartialEq)]
pub struct NmpcSolution {
    pub states: Vec<SystemState>,
    pub inputs: Vec<ControlInput>,
}

/// Drops stage 0 and repeats the last stage.
pub fn shift_warm_start(sol: &NmpcSolution) -> NmpcSolution {
    let mut states: Vec<SystemState> = sol.states.iter().skip(1).cloned().collect();
    let mut inputs: Vec<ControlInput> = sol.inputs.iter().skip(1).copied().collect();
    if let Some(last) = sol.states.last() {
        states.push(last.clone());
    }
    if let Some(last) = sol.inputs.last() {
        inputs.push(*last);
    }
    NmpcSolution { states, inputs }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct NmpcDiagnostics {
    pub solve_ms: f64,
    /// Largest shooting gap at the linearization point.
    pub gap_norm: f64,
    /// Tracking cost of the linearization point.
    pub cost: f64,
    /// Some component of the returned input sat on a bound.
    pub clipped: bool,
    /// The LQ solve failed; the shifted warm-start input was returned.
    pub degraded: bool,
}

struct Stage {
    a: MatX,
    b: MatXU,
    gap: Tangent,
}

/// Free input components and fixed increments for one stage.
#[derive(Clone)]
struct InputMask {
    free: Vec<usize>,
    fixed: Vector4<f64>,
}

impl InputMask {
    fn all_free() -> Self {
        Self { free: (0..NU).collect(), fixed: Vector4::zeros() }
    }

    fn select(&self) -> DMatrix<f64> {
        let mut e = DMatrix::zeros(NU, self.free.len());
        for (j, &i) in self.free.iter().enumerate() {
            e[(i, j)] = 1.0;
        }
        e
    }
}

struct Gains {
    k: DMatrix<f64>,
    kff: DVector<f64>,
}

fn linearize(x: &SystemState, u: &ControlInput, params: &SystemParams, ext: &ExternalForces, dt: f64) -> Result<(SystemState, MatX, MatXU)> {
    let f0 = step_rk4(x, u, params, ext, dt)?;
    let h = 1e-6;
    let mut a = MatX::zeros();
    for j in 0..NX {
        let mut d = Tangent::zeros();
        d[j] = h;
        let p = step_rk4(&boxplus(x, &d, params), u, params, ext, dt)?;
        let m = step_rk4(&boxplus(x, &(-d), params), u, params, ext, dt)?;
        a.set_column(j, &((boxminus(&p, &f0) - boxminus(&m, &f0)) / (2.0 * h)));
    }
    let mut b = MatXU::zeros();
    let uv = input_vec(u);
    for j in 0..NU {
        let mut du = Vector4::zeros();
        du[j] = h;
        let p = step_rk4(x, &input_from(&(uv + du)), params, ext, dt)?;
        let m = step_rk4(x, &input_from(&(uv - du)), params, ext, dt)?;
        b.set_column(j, &((boxminus(&p, &f0) - boxminus(&m, &f0)) / (2.0 * h)));
    }
    Ok((f0, a, b))
}

/// One RTI iteration. Returns the first input (always within bounds), the
/// updated shooting trajectory and diagnostics.
pub fn rti_step(
    x_now: &SystemState,
    reference: &ReferenceWindow,
    ext: &ExternalForces,
    cfg: &NmpcConfig,
    params: &SystemParams,
    warm: Option<&NmpcSolution>,
) -> Result<(ControlInput, NmpcSolution, NmpcDiagnostics)> {
    let started = Instant::now();
    let n = cfg.horizon;
    if reference.states.len() != n + 1 || reference.inputs.len() != n {
        return Err(Error::InvalidParameter(format!(
            "reference window has {} states / {} inputs for horizon {n}",
            reference.states.len(),
            reference.inputs.len()
        )));
    }
    if !x_now.is_finite() {
        return Err(Error::NonFinite("NMPC initial state"));
    }
    let mut sol = match warm {
        Some(w) if w.states.len() == n + 1 && w.inputs.len() == n => w.clone(),
        _ => NmpcSolution { states: reference.states.clone(), inputs: reference.inputs.clone() },
    };
    let weights = decay_weights(cfg);
    let c = residual_map(params.cable_len);
    let w_stage: Vec<MatX> = (0..=n)
        .map(|k| {
            let q = if k == n { weights.q_e } else { weights.q[k] };
            c.transpose() * SMatrix::<f64, NR, NR>::from_diagonal(&q) * c
        })
        .collect();

    let mut diag = NmpcDiagnostics::default();
    let mut stages = Vec::with_capacity(n);
    for k in 0..n {
        let lin = linearize(&sol.states[k], &sol.inputs[k], params, ext, cfg.dt);
        let (f0, a, b) = match lin {
            Ok(v) => v,
            Err(_) => return Ok(degraded(&sol, cfg, diag, started)),
        };
        let gap = boxminus(&f0, &sol.states[k + 1]);
        diag.gap_norm = diag.gap_norm.max(gap.norm());
        stages.push(Stage { a, b, gap });
    }
    let errs: Vec<Tangent> = (0..=n).map(|k| boxminus(&sol.states[k], &reference.states[k])).collect();
    let du_ref: Vec<Vector4<f64>> = (0..n).map(|k| input_vec(&sol.inputs[k]) - input_vec(&reference.inputs[k])).collect();
    diag.cost = (0..=n).map(|k| errs[k].dot(&(w_stage[k] * errs[k]))).sum::<f64>()
        + (0..n).map(|k| du_ref[k].dot(&weights.h[k].component_mul(&du_ref[k]))).sum::<f64>();
    let dx0 = boxminus(x_now, &sol.states[0]);

    let (lo, hi) = (input_vec(&cfg.u_min), input_vec(&cfg.u_max));
    let mut masks = vec![InputMask::all_free(); n];
    let mut result = None;
    for pass in 0..2 {
        let Some(gains) = riccati(&stages, &w_stage, &errs, &du_ref, &weights.h, &masks) else {
            return Ok(degraded(&sol, cfg, diag, started));
        };
        let (dxs, dus) = forward(&stages, &gains, &masks, dx0);
        if pass == 0 {
            let mut any = false;
            for k in 0..n {
                let u = input_vec(&sol.inputs[k]) + dus[k];
                let mut m = InputMask { free: Vec::new(), fixed: Vector4::zeros() };
                for i in 0..NU {
                    let target = u[i].clamp(lo[i], hi[i]);
                    if target != u[i] {
                        m.fixed[i] = target - input_vec(&sol.inputs[k])[i];
                        any = true;
                    } else {
                        m.free.push(i);
                    }
                }
                masks[k] = m;
            }
            result = Some((dxs, dus));
            if !any {
                break;
            }
        } else {
            result = Some((dxs, dus));
        }
    }
    let (dxs, dus) = result.expect("at least one pass");
    for k in 0..=n {
        sol.states[k] = boxplus(&sol.states[k], &dxs[k], params);
    }
    for k in 0..n {
        let raw = input_vec(&sol.inputs[k]) + dus[k];
        let clamped = Vector4::from_fn(|i, _| raw[i].clamp(lo[i], hi[i]));
        if k == 0 {
            diag.clipped = (0..NU).any(|i| clamped[i] == lo[i] || clamped[i] == hi[i]);
        }
        sol.inputs[k] = input_from(&clamped);
    }
    diag.solve_ms = started.elapsed().as_secs_f64() * 1e3;
    Ok((sol.inputs[0], sol, diag))
}

fn degraded(sol: &NmpcSolution, cfg: &NmpcConfig, mut diag: NmpcDiagnostics, started: Instant) -> (ControlInput, NmpcSolution, NmpcDiagnostics) {
    let shifted = shift_warm_start(sol);
    diag.degraded = true;
    diag.solve_ms = started.elapsed().as_secs_f64() * 1e3;
    let u = cfg.clamp(&shifted.inputs[0]);
    (u, shifted, diag)
}

fn riccati(
    stages: &[Stage],
    w: &[MatX],
    errs: &[Tangent],
    du_ref: &[Vector4<f64>],
    h: &[Vector4<f64>],
    masks: &[InputMask],
) -> Option<Vec<Gains>> {
    let n = stages.len();
    let mut p = w[n];
    let mut pv = w[n] * errs[n];
    let mut gains: Vec<Gains> = Vec::with_capacity(n);
    for k in (0..n).rev() {
        let st = &stages[k];
        let m = &masks[k];
        let e = m.select();
        let hk = DMatrix::from_diagonal(&DVector::from_column_slice(h[k].as_slice()));
        let b_full = DMatrix::from_column_slice(NX, NU, st.b.as_slice());
        let fixed = DVector::from_column_slice(m.fixed.as_slice());
        let r_full = DVector::from_column_slice(h[k].component_mul(&du_ref[k]).as_slice());
        let bt = &b_full * &e;
        let ht = e.transpose() * &hk * &e;
        let rt = e.transpose() * (&hk * &fixed + r_full);
        let ct = st.gap + st.b * m.fixed;

        let pc = pv + p * ct;
        let pd = DMatrix::from_column_slice(NX, NX, p.as_slice());
        let ad = DMatrix::from_column_slice(NX, NX, st.a.as_slice());
        let qux = bt.transpose() * &pd * &ad;
        let quu = ht + bt.transpose() * &pd * &bt;
        let pcd = DVector::from_column_slice(pc.as_slice());
        let qu = rt + bt.transpose() * &pcd;
        let (k_mat, kff) = if e.ncols() == 0 {
            (DMatrix::zeros(0, NX), DVector::zeros(0))
        } else {
            let chol = quu.cholesky()?;
            (-chol.solve(&qux), -chol.solve(&qu))
        };
        let qxx = w[k] + st.a.transpose() * p * st.a;
        let qx = w[k] * errs[k] + st.a.transpose() * pc;
        let dp = qux.transpose() * &k_mat;
        let dpv = qux.transpose() * &kff;
        p = qxx + MatX::from_column_slice(dp.as_slice());
        p = 0.5 * (p + p.transpose());
        pv = qx + Tangent::from_column_slice(dpv.as_slice());
        if !p.iter().all(|v| v.is_finite()) {
            return None;
        }
        gains.push(Gains { k: k_mat, kff });
    }
    gains.reverse();
    Some(gains)
}

fn forward(stages: &[Stage], gains: &[Gains], masks: &[InputMask], dx0: Tangent) -> (Vec<Tangent>, Vec<Vector4<f64>>) {
    let mut dxs = vec![dx0];
    let mut dus = Vec::with_capacity(stages.len());
    for (k, st) in stages.iter().enumerate() {
        let dx = DVector::from_column_slice(dxs[k].as_slice());
        let v = &gains[k].k * dx + &gains[k].kff;
        let mut du = masks[k].fixed;
        for (j, &i) in masks[k].free.iter().enumerate() {
            du[i] += v[j];
        }
        dxs.push(st.a * dxs[k] + st.b * du + st.gap);
        dus.push(du);
    }
    (dxs, dus)
}

/// Controller instance that owns its warm start.
#[derive(Debug, Clone)]
pub struct Nmpc {
    pub cfg: NmpcConfig,
    warm: Option<NmpcSolution>,
}

impl Nmpc {
    pub fn new(cfg: NmpcConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg, warm: None })
    }

    pub fn step(
        &mut self,
        x_now: &SystemState,
        reference: &ReferenceWindow,
        ext: &ExternalForces,
        params: &SystemParams,
    ) -> Result<(ControlInput, NmpcDiagnostics)> {
        let (u, sol, diag) = rti_step(x_now, reference, ext, &self.cfg, params, self.warm.as_ref())?;
        self.warm = Some(shift_warm_start(&sol));
        Ok((u, diag))
    }

    pub fn reset(&mut self) {
        self.warm = None;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::minco::{construct, BoundaryState};

    fn params() -> SystemParams {
        SystemParams::default()
    }

    #[test]
    fn decay_examples() {
        let mut cfg = NmpcConfig { b_x: 0.0, ..Default::default() };
        let w = decay_weights(&cfg);
        assert!(w.q.iter().all(|q| *q == cfg.q.diagonal()));
        cfg.b_x = 2.0;
        let w = decay_weights(&cfg);
        let ratio = w.q[cfg.horizon][3] / cfg.q.diagonal()[3];
        assert!((ratio - (-2.0f64).exp()).abs() < 1e-15);
        assert!((ratio - 0.1353).abs() < 1e-4);
        for k in 1..=cfg.horizon {
            assert!(w.q[k][3] < w.q[k - 1][3]);
            assert!(w.h[k][0] < w.h[k - 1][0]);
        }
    }

    #[test]
    fn boxplus_and_boxminus_are_inverse() {
        let p = params();
        let mut x = SystemState::hover(Vec3::new(1.0, 2.0, 3.0), &p);
        x.q = UnitQuaternion::from_scaled_axis(Vec3::new(0.1, -0.2, 0.3));
        let d = Tangent::from_fn(|i, _| 0.01 * (i as f64 - 7.0));
        let y = boxplus(&x, &d, &p);
        let back = boxminus(&y, &x);
        // Attitude and positions round-trip exactly; the cable block loses
        // its radial component.
        for i in (0..6).chain(12..15) {
            assert!((back[i] - d[i]).abs() < 1e-12, "{i}");
        }
        assert!(boxminus(&x, &x).norm() < 1e-15);
    }

    #[test]
    fn hover_reference_is_constant() {
        let p = params();
        let goal = Vec3::new(0.0, 0.0, 1.0);
        let poly = construct(BoundaryState::rest(goal), BoundaryState::rest(goal), &[], &[1.0]).unwrap();
        let cfg = NmpcConfig::default();
        let r = build_reference(&poly, 0.0, &cfg, &p).unwrap();
        let h = ReferenceWindow::hover(goal, cfg.horizon, &p);
        for (a, b) in r.states.iter().zip(&h.states) {
            assert!(boxminus(a, b).norm() < 1e-12);
        }
        for (a, b) in r.inputs.iter().zip(&h.inputs) {
            assert!((a.thrust - b.thrust).abs() < 1e-12 && a.omega_c.norm() < 1e-12);
        }
        let late = build_reference(&poly, 50.0, &cfg, &p).unwrap();
        assert!(late.states.iter().all(|s| (s.x_l - goal).norm() < 1e-12));
    }

    #[test]
    fn on_reference_returns_reference_input() {
        let p = params();
        let cfg = NmpcConfig::default();
        let r = ReferenceWindow::hover(Vec3::new(0.0, 0.0, 1.0), cfg.horizon, &p);
        let warm = NmpcSolution { states: r.states.clone(), inputs: r.inputs.clone() };
        let (u, _, diag) = rti_step(&r.states[0], &r, &ExternalForces::zero(), &cfg, &p, Some(&warm)).unwrap();
        assert!((input_vec(&u) - input_vec(&r.inputs[0])).norm() < 1e-6);
        assert!(!diag.degraded);
    }

    #[test]
    fn displacement_tilts_back() {
        let p = params();
        let cfg = NmpcConfig::default();
        let r = ReferenceWindow::hover(Vec3::new(0.0, 0.0, 1.0), cfg.horizon, &p);
        let x = SystemState::hover(Vec3::new(0.1, 0.0, 1.0), &p);
        let (u, _, _) = rti_step(&x, &r, &ExternalForces::zero(), &cfg, &p, None).unwrap();
        // Accelerating toward -x needs a negative pitch rate.
        assert!(u.omega_c.y < 0.0, "{u:?}");
        assert!(u.omega_c.x.abs() < 1e-6);
    }

    #[test]
    fn shift_examples() {
        let p = params();
        let r = ReferenceWindow::hover(Vec3::zeros(), 10, &p);
        let sol = NmpcSolution { states: r.states.clone(), inputs: r.inputs.clone() };
        assert_eq!(shift_warm_start(&sol), sol);
        let mut moving = sol.clone();
        for (k, s) in moving.states.iter_mut().enumerate() {
            s.x_l.x = k as f64;
        }
        assert_eq!(shift_warm_start(&moving).states[0], moving.states[1]);
        assert_eq!(shift_warm_start(&moving).states.len(), moving.states.len());
    }

    #[test]
    fn inputs_respect_bounds_under_large_error() {
        let p = params();
        let cfg = NmpcConfig::default();
        let r = ReferenceWindow::hover(Vec3::new(0.0, 0.0, 1.0), cfg.horizon, &p);
        let x = SystemState::hover(Vec3::new(3.0, -2.0, -1.0), &p);
        let (u, sol, diag) = rti_step(&x, &r, &ExternalForces::zero(), &cfg, &p, None).unwrap();
        assert!(diag.clipped);
        for v in std::iter::once(&u).chain(&sol.inputs) {
            assert_eq!(cfg.clamp(v), *v);
        }
    }
}
