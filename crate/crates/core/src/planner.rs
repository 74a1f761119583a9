//! Spatio-temporal trajectory optimization for the payload.
//!
//! Decision variables are the intermediate waypoints and the virtual times of
//! a MINCO spline. The objective is snap energy, a time cost and integrated
//! constraint penalties. Every penalty is evaluated through flatness at
//! quadrature points and differentiated analytically back to the spline
//! coefficients and durations, then through the MINCO adjoint to the
//! decision variables.

use std::time::Instant;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::dynamics::SystemParams;
use crate::esdf::EsdfMap;
use crate::flatness::{BubbleSpec, FlatSnapshot, UnitChain, EPS_TAUT};
use crate::kinodynamic::KinoPath;
use crate::minco::{basis, energy_and_grads, real_to_virtual, virtual_to_real, BoundaryState, Coeffs, Minco, PiecewisePoly};
use crate::numopt::{lbfgs_minimize, smooth_l1, LbfgsOptions, LbfgsStatus};
use crate::{Error, Result, Vec3};

/// Physical limits the trajectory must respect.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DynamicLimits {
    /// Thrust bounds (N).
    pub f_l: f64,
    pub f_u: f64,
    /// Tilt bound (rad).
    pub theta_max: f64,
    pub v_max: f64,
    pub a_max: f64,
    /// Margin on `a_z + g` (m/s^2).
    pub eps_tension: f64,
    /// Safe radius of the quadrotor (m).
    pub d_q: f64,
    /// Safe radius of the payload and cable (m).
    pub d_l: f64,
}

impl Default for DynamicLimits {
    fn default() -> Self {
        Self {
            f_l: 2.0,
            f_u: 30.0,
            theta_max: 60f64.to_radians(),
            v_max: 3.0,
            a_max: 5.0,
            eps_tension: EPS_TAUT,
            d_q: 0.3,
            d_l: 0.15,
        }
    }
}

impl DynamicLimits {
    pub fn validate(&self) -> Result<()> {
        let ok = self.f_l > 0.0
            && self.f_l < self.f_u
            && self.theta_max > 0.0
            && self.theta_max < std::f64::consts::FRAC_PI_2
            && self.v_max > 0.0
            && self.a_max > 0.0
            && self.eps_tension > 0.0
            && self.d_q >= 0.0
            && self.d_l >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!("invalid dynamic limits {self:?}")))
        }
    }

    fn tightened(&self, m: &Margins) -> Self {
        Self {
            f_l: self.f_l + m.thrust,
            f_u: self.f_u - m.thrust,
            theta_max: self.theta_max - m.tilt,
            v_max: self.v_max * (1.0 - m.rel_kinematic),
            a_max: self.a_max * (1.0 - m.rel_kinematic),
            eps_tension: self.eps_tension + m.tension,
            d_q: self.d_q + m.clearance,
            d_l: self.d_l + m.clearance,
        }
    }
}

/// Penalty and cost weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlannerWeights {
    pub lambda_t: f64,
    /// Global multiplier on all constraint penalties.
    pub lambda_s: f64,
    pub collision: f64,
    pub thrust: f64,
    pub tilt: f64,
    pub vel: f64,
    pub acc: f64,
    pub tension: f64,
    /// Quadrature intervals per piece.
    pub kappa: usize,
    /// Smoothing width of the penalty ramp.
    pub mu: f64,
    /// Spheres along the cable (the quadrotor adds one more).
    pub bubbles: usize,
}

impl Default for PlannerWeights {
    fn default() -> Self {
        Self {
            lambda_t: 1e4,
            lambda_s: 1.0,
            collision: 1e6,
            thrust: 1e2,
            tilt: 1e5,
            vel: 1e4,
            acc: 1e4,
            tension: 1e4,
            kappa: 16,
            mu: 1e-2,
            bubbles: 6,
        }
    }
}

impl PlannerWeights {
    pub fn validate(&self) -> Result<()> {
        let w = [self.lambda_t, self.lambda_s, self.collision, self.thrust, self.tilt, self.vel, self.acc, self.tension];
        if w.iter().any(|v| !(*v >= 0.0)) || self.kappa < 4 || !(self.mu > 0.0) || self.bubbles == 0 {
            return Err(Error::InvalidParameter(format!("invalid planner weights {self:?}")));
        }
        Ok(())
    }
}

/// Amounts by which the optimizer's internal limits are tightened so that
/// soft penalties still leave the audited constraints satisfied.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Margins {
    pub thrust: f64,
    pub tilt: f64,
    pub rel_kinematic: f64,
    pub tension: f64,
    pub clearance: f64,
}

impl Default for Margins {
    fn default() -> Self {
        Self { thrust: 0.3, tilt: 0.03, rel_kinematic: 0.03, tension: 0.2, clearance: 0.05 }
    }
}

/// Full optimizer configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct PlannerConfig {
    pub weights: PlannerWeights,
    pub margins: Margins,
    pub lbfgs: LbfgsOptions,
    /// Rounds of penalty escalation when the audit still fails.
    pub escalations: usize,
    /// Target length per piece when resampling the front-end path (m).
    pub piece_length: f64,
    /// Dense audit step (s).
    pub audit_dt: f64,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self {
            weights: PlannerWeights::default(),
            margins: Margins::default(),
            lbfgs: LbfgsOptions { max_iters: 300, grad_tol: 1e-5, rel_tol: 1e-9, ..Default::default() },
            escalations: 3,
            piece_length: 1.5,
            audit_dt: 0.01,
        }
    }
}

/// Indices into per-term breakdowns.
pub const TERM_NAMES: [&str; 6] = ["collision", "thrust", "tilt", "vel", "acc", "tension"];

/// Thrust magnitude and tilt cosine with gradients with respect to payload
/// acceleration, jerk and snap.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThrustTilt {
    pub thrust: f64,
    pub cos_tilt: f64,
    pub grad_thrust: [Vec3; 3],
    pub grad_cos: [Vec3; 3],
}

struct ForceChain {
    chain: UnitChain,
    force: Vec3,
}

fn force_chain(acc: &Vec3, jerk: &Vec3, snap: &Vec3, params: &SystemParams) -> Option<ForceChain> {
    let w = acc + params.gravity_vec();
    if !(w.norm() > EPS_TAUT) {
        return None;
    }
    let chain = UnitChain::new(&w, jerk, snap);
    // rho_ddot = -n_dd
    let force = params.total_mass() * w + params.m_q * params.cable_len * chain.n_dd;
    Some(ForceChain { chain, force })
}

impl ForceChain {
    /// Pulls a gradient on the thrust vector back to (acc, jerk, snap).
    fn backward(&self, g_force: &Vec3, params: &SystemParams) -> [Vec3; 3] {
        let g_ndd = params.m_q * params.cable_len * g_force;
        let (g_w, g_wd, g_wdd) = self.chain.backward(&Vec3::zeros(), &g_ndd);
        [g_w + params.total_mass() * g_force, g_wd, g_wdd]
    }
}

pub fn thrust_and_tilt(snap: &FlatSnapshot, params: &SystemParams) -> Result<ThrustTilt> {
    let fc = force_chain(&snap.acc, &snap.jerk, &snap.snap, params)
        .ok_or_else(|| Error::FlatnessSingularity("cable not taut".into()))?;
    let f = fc.force.norm();
    if !(f > 1e-9) {
        return Err(Error::FlatnessSingularity("zero thrust".into()));
    }
    let unit = fc.force / f;
    let cos = unit.z;
    let g_cos_force = (Vec3::z() - unit * cos) / f;
    Ok(ThrustTilt {
        thrust: f,
        cos_tilt: cos,
        grad_thrust: fc.backward(&unit, params),
        grad_cos: fc.backward(&g_cos_force, params),
    })
}

/// Thrust constraint value: positive outside `[f_l, f_u]`.
pub fn thrust_violation(f: f64, f_l: f64, f_u: f64) -> f64 {
    let mid = 0.5 * (f_u + f_l);
    let rad = 0.5 * (f_u - f_l);
    (f - mid).powi(2) - rad * rad
}

/// Tilt constraint value: positive when tilted beyond `theta_max`.
pub fn tilt_violation(cos_tilt: f64, theta_max: f64) -> f64 {
    theta_max.cos() - cos_tilt
}

/// Penalty value with gradients on spline coefficients and durations.
#[derive(Debug, Clone)]
pub struct PenaltyEval {
    pub value: f64,
    pub grad_c: Vec<Coeffs>,
    pub grad_t: Vec<f64>,
    /// Contribution of each constraint family, ordered as [`TERM_NAMES`].
    pub terms: [f64; 6],
}

/// Penalty of a single flat sample with gradients on derivatives 0..=4.
fn sample_penalty(
    d: &[Vec3; 6],
    map: &EsdfMap,
    lim: &DynamicLimits,
    w: &PlannerWeights,
    params: &SystemParams,
    terms: &mut [f64; 6],
) -> (f64, [Vec3; 5]) {
    let mut g = [Vec3::zeros(); 5];
    let mut total = 0.0;
    let (vel, acc) = (d[1], d[2]);

    let (pv, dv) = smooth_l1(vel.norm_squared() - lim.v_max * lim.v_max, w.mu);
    if pv > 0.0 || dv > 0.0 {
        total += w.vel * pv;
        terms[3] += w.vel * pv;
        g[1] += w.vel * dv * 2.0 * vel;
    }
    let (pa, da) = smooth_l1(acc.norm_squared() - lim.a_max * lim.a_max, w.mu);
    if pa > 0.0 || da > 0.0 {
        total += w.acc * pa;
        terms[4] += w.acc * pa;
        g[2] += w.acc * da * 2.0 * acc;
    }
    let (pt, dt) = smooth_l1(lim.eps_tension - acc.z - params.gravity, w.mu);
    if pt > 0.0 || dt > 0.0 {
        total += w.tension * pt;
        terms[5] += w.tension * pt;
        g[2].z -= w.tension * dt;
    }

    let wv = acc + params.gravity_vec();
    // Below this the cable direction is ill-conditioned; push a_z upward.
    let guard = 0.5;
    if wv.norm() < guard {
        let big = 1e3 * w.tension;
        total += big * (guard - wv.z);
        terms[5] += big * (guard - wv.z);
        g[2].z -= big;
        return (total, g);
    }
    let Some(fc) = force_chain(&acc, &d[3], &d[4], params) else {
        return (total, g);
    };

    let f = fc.force.norm();
    if f > 1e-9 {
        let unit = fc.force / f;
        let mut g_force = Vec3::zeros();
        let (pf, df) = smooth_l1(thrust_violation(f, lim.f_l, lim.f_u), w.mu);
        if pf > 0.0 || df > 0.0 {
            total += w.thrust * pf;
            terms[1] += w.thrust * pf;
            let mid = 0.5 * (lim.f_u + lim.f_l);
            g_force += w.thrust * df * 2.0 * (f - mid) * unit;
        }
        let cos = unit.z;
        let (pc, dc) = smooth_l1(tilt_violation(cos, lim.theta_max), w.mu);
        if pc > 0.0 || dc > 0.0 {
            total += w.tilt * pc;
            terms[2] += w.tilt * pc;
            g_force -= w.tilt * dc * (Vec3::z() - unit * cos) / f;
        }
        if g_force != Vec3::zeros() {
            let [ga, gj, gs] = fc.backward(&g_force, params);
            g[2] += ga;
            g[3] += gj;
            g[4] += gs;
        }
    }

    // Bubbles along the cable: center = x_L + s l n, with n = -rho.
    let n = fc.chain.n;
    let count = w.bubbles;
    let scale = w.collision / (count + 1) as f64;
    let mut g_n = Vec3::zeros();
    for j in 0..=count {
        let s = j as f64 / count as f64;
        let radius = if j == count { lim.d_q } else { lim.d_l };
        let center = d[0] + s * params.cable_len * n;
        let (dist, grad) = map.query(&center);
        let pen = radius - dist;
        if pen > 0.0 {
            total += scale * pen * pen * pen;
            terms[0] += scale * pen * pen * pen;
            let g_center = -3.0 * scale * pen * pen * grad;
            g[0] += g_center;
            g_n += s * params.cable_len * g_center;
        }
    }
    if g_n != Vec3::zeros() {
        let (g_w, _, _) = fc.chain.backward(&g_n, &Vec3::zeros());
        g[2] += g_w;
    }
    (total, g)
}

/// Integrated constraint penalty by trapezoidal quadrature with `kappa`
/// intervals per piece.
pub fn penalty_eval(
    poly: &PiecewisePoly,
    map: &EsdfMap,
    limits: &DynamicLimits,
    weights: &PlannerWeights,
    params: &SystemParams,
) -> PenaltyEval {
    let m = poly.piece_count();
    let kappa = weights.kappa;
    let mut out = PenaltyEval { value: 0.0, grad_c: vec![Coeffs::zeros(); m], grad_t: vec![0.0; m], terms: [0.0; 6] };
    let ls = weights.lambda_s;
    for i in 0..m {
        let t_i = poly.durations[i];
        for j in 0..=kappa {
            let frac = j as f64 / kappa as f64;
            let tau = frac * t_i;
            let omega = if j == 0 || j == kappa { 0.5 } else { 1.0 };
            let d = [0, 1, 2, 3, 4, 5].map(|o| poly.eval_piece(i, tau, o));
            let mut terms = [0.0; 6];
            let (p, g) = sample_penalty(&d, map, limits, weights, params, &mut terms);
            if p == 0.0 && g.iter().all(|v| *v == Vec3::zeros()) {
                continue;
            }
            let step = omega * t_i / kappa as f64 * ls;
            out.value += step * p;
            for (acc, t) in out.terms.iter_mut().zip(terms) {
                *acc += step * t;
            }
            let mut dt_chain = 0.0;
            for (r, gr) in g.iter().enumerate() {
                if *gr == Vec3::zeros() {
                    continue;
                }
                let b = basis(tau, r);
                for k in r..8 {
                    for a in 0..3 {
                        out.grad_c[i][(k, a)] += step * b[k] * gr[a];
                    }
                }
                dt_chain += gr.dot(&d[r + 1]) * frac;
            }
            out.grad_t[i] += omega / kappa as f64 * ls * p + step * dt_chain;
        }
    }
    out
}

/// Maximum violation per constraint family in natural units, from dense
/// sampling with the raw constraint formulas.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeasibilityReport {
    /// Deepest bubble penetration below its safe radius (m).
    pub collision: f64,
    /// Thrust outside `[f_l, f_u]` (N).
    pub thrust: f64,
    /// Tilt beyond `theta_max` (rad).
    pub tilt: f64,
    pub vel: f64,
    pub acc: f64,
    /// `eps - a_z - g` (m/s^2).
    pub tension: f64,
    /// Smallest cable tension along the trajectory (N).
    pub min_tension: f64,
    pub peak_speed: f64,
    pub peak_acc: f64,
    pub total_time: f64,
    pub singular: bool,
    pub feasible: bool,
    pub iterations: usize,
    pub evaluations: usize,
    pub objective: f64,
    pub runtime_ms: f64,
    pub status: String,
}

/// Audit tolerance for non-collision constraints (natural units).
pub const AUDIT_TOL: f64 = 1e-3;

/// Dense audit. Collision is accepted down to one voxel below each radius.
pub fn audit(poly: &PiecewisePoly, map: &EsdfMap, limits: &DynamicLimits, params: &SystemParams, bubbles: usize, dt: f64) -> FeasibilityReport {
    let total = poly.total_duration();
    let n = (total / dt).ceil().max(1.0) as usize;
    let spec = BubbleSpec { count: bubbles, d_payload: limits.d_l, d_quad: limits.d_q };
    let mut r = FeasibilityReport {
        collision: f64::NEG_INFINITY,
        thrust: 0.0,
        tilt: 0.0,
        vel: 0.0,
        acc: 0.0,
        tension: f64::NEG_INFINITY,
        min_tension: f64::INFINITY,
        peak_speed: 0.0,
        peak_acc: 0.0,
        total_time: total,
        singular: false,
        feasible: false,
        iterations: 0,
        evaluations: 0,
        objective: 0.0,
        runtime_ms: 0.0,
        status: String::new(),
    };
    let lo = map.grid.origin;
    let hi = map.grid.extent_max();
    for s in 0..=n {
        let t = total * s as f64 / n as f64;
        let d = poly.derivs(t);
        let (v, a) = (d[1], d[2]);
        r.peak_speed = r.peak_speed.max(v.norm());
        r.peak_acc = r.peak_acc.max(a.norm());
        r.vel = r.vel.max(v.norm() - limits.v_max);
        r.acc = r.acc.max(a.norm() - limits.a_max);
        r.tension = r.tension.max(limits.eps_tension - a.z - params.gravity);
        let w = a + params.gravity_vec();
        r.min_tension = r.min_tension.min(params.m_l * w.norm());
        let Some(fc) = force_chain(&a, &d[3], &d[4], params) else {
            r.singular = true;
            continue;
        };
        let f = fc.force.norm();
        r.thrust = r.thrust.max(limits.f_l - f).max(f - limits.f_u);
        let tilt = (fc.force.z / f).clamp(-1.0, 1.0).acos();
        r.tilt = r.tilt.max(tilt - limits.theta_max);
        let n_dir = fc.chain.n;
        for j in 0..=spec.count {
            let center = d[0] + spec.fraction(j) * params.cable_len * n_dir;
            let radius = spec.radius(j);
            let outside = (0..3).map(|ax| (lo[ax] - (center[ax] - radius)).max(center[ax] + radius - hi[ax])).fold(0.0, f64::max);
            r.collision = r.collision.max(radius - map.distance_at(&center)).max(outside);
        }
    }
    r.collision = r.collision.max(0.0);
    r.tension = r.tension.max(0.0);
    r.feasible = !r.singular
        && r.collision <= map.resolution()
        && [r.thrust, r.tilt, r.vel, r.acc, r.tension].iter().all(|v| *v <= AUDIT_TOL);
    r
}

/// Boundary conditions and fixed inputs of one planning problem.
pub struct Problem<'a> {
    pub map: &'a EsdfMap,
    pub limits: DynamicLimits,
    pub params: &'a SystemParams,
    pub head: BoundaryState,
    pub tail: BoundaryState,
    pub pieces: usize,
}

/// Objective breakdown at one decision vector.
#[derive(Debug, Clone)]
pub struct ObjectiveParts {
    pub energy: f64,
    pub time: f64,
    pub penalty: f64,
    pub terms: [f64; 6],
}

impl Problem<'_> {
    pub fn dim(&self) -> usize {
        3 * (self.pieces - 1) + self.pieces
    }

    pub fn pack(&self, waypoints: &[Vec3], durations: &[f64]) -> DVector<f64> {
        let m = self.pieces;
        let mut x = DVector::zeros(self.dim());
        for (i, p) in waypoints.iter().enumerate() {
            x.fixed_rows_mut::<3>(3 * i).copy_from(p);
        }
        for (i, t) in durations.iter().enumerate() {
            x[3 * (m - 1) + i] = real_to_virtual(*t);
        }
        x
    }

    pub fn unpack(&self, x: &DVector<f64>) -> (Vec<Vec3>, Vec<f64>, Vec<f64>) {
        let m = self.pieces;
        let wps = (0..m - 1).map(|i| x.fixed_rows::<3>(3 * i).into_owned()).collect();
        let (ts, dts) = (0..m).map(|i| virtual_to_real(x[3 * (m - 1) + i])).unzip();
        (wps, ts, dts)
    }

    pub fn spline(&self, x: &DVector<f64>) -> Result<PiecewisePoly> {
        let (wps, ts, _) = self.unpack(x);
        Ok(Minco::construct(self.head, self.tail, &wps, &ts)?.poly)
    }

    /// Full objective `energy + lambda_T * sum(T) + S` with its gradient.
    pub fn evaluate(&self, x: &DVector<f64>, weights: &PlannerWeights, grad: &mut DVector<f64>) -> Result<(f64, ObjectiveParts)> {
        let m = self.pieces;
        let (wps, ts, dts) = self.unpack(x);
        let mc = Minco::construct(self.head, self.tail, &wps, &ts)?;
        let (energy, mut gc, mut gt) = energy_and_grads(&mc.poly);
        let pen = penalty_eval(&mc.poly, self.map, &self.limits, weights, self.params);
        for i in 0..m {
            gc[i] += pen.grad_c[i];
            gt[i] += pen.grad_t[i] + weights.lambda_t;
        }
        let (gp, gt_total) = mc.propagate_gradients(&gc, &gt);
        for (i, g) in gp.iter().enumerate() {
            grad.fixed_rows_mut::<3>(3 * i).copy_from(g);
        }
        for i in 0..m {
            grad[3 * (m - 1) + i] = gt_total[i] * dts[i];
        }
        let time = weights.lambda_t * ts.iter().sum::<f64>();
        let parts = ObjectiveParts { energy, time, penalty: pen.value, terms: pen.terms };
        Ok((energy + time + pen.value, parts))
    }
}

/// Planned trajectory with its audit.
#[derive(Debug, Clone)]
pub struct PlanResult {
    pub poly: PiecewisePoly,
    pub report: FeasibilityReport,
    /// Accepted objective values of each optimization round.
    pub history: Vec<Vec<f64>>,
}

/// Piece count for a front-end path of the given length.
pub fn piece_count(length: f64, piece_length: f64) -> usize {
    ((length / piece_length).ceil() as usize).max(3)
}

/// Optimizes waypoints and durations starting from a front-end path.
pub fn optimize(
    init: &KinoPath,
    map: &EsdfMap,
    limits: &DynamicLimits,
    cfg: &PlannerConfig,
    params: &SystemParams,
    head: BoundaryState,
    tail: BoundaryState,
) -> Result<PlanResult> {
    limits.validate()?;
    cfg.weights.validate()?;
    let started = Instant::now();
    let total = init.duration();
    let length = init.length(0.01);
    let at_rest = head.vel.norm() < 1e-9 && head.acc.norm() < 1e-9 && head.jerk.norm() < 1e-9;
    if (tail.pos - head.pos).norm() < 1e-6 && at_rest && tail.vel.norm() < 1e-9 {
        let poly = Minco::construct(head, tail, &[], &[1.0])?.poly;
        let mut report = audit(&poly, map, limits, params, cfg.weights.bubbles, cfg.audit_dt);
        report.status = "trivial".into();
        report.runtime_ms = started.elapsed().as_secs_f64() * 1e3;
        log::debug!("zero-length request, {:.3} ms", started.elapsed().as_secs_f64() * 1e3);
        return Ok(PlanResult { poly, report, history: Vec::new() });
    }
    if init.nodes.is_empty() || !(total > 0.0) {
        return Err(Error::InvalidParameter("initial path is empty".into()));
    }
    let m = piece_count(length, cfg.piece_length);
    let wps: Vec<Vec3> = (1..m).map(|k| init.state_at(total * k as f64 / m as f64).0).collect();
    let durations = vec![total / m as f64; m];
    let problem = Problem { map, limits: limits.tightened(&cfg.margins), params, head, tail, pieces: m };

    let mut x = problem.pack(&wps, &durations);
    let mut weights = cfg.weights;
    let mut iterations = 0;
    let mut evaluations = 0;
    let mut status = LbfgsStatus::MaxIterations;
    let mut value = f64::NAN;
    let mut report = None;
    let mut history = Vec::new();
    for round in 0..=cfg.escalations {
        let res = lbfgs_minimize(
            |x, g| match problem.evaluate(x, &weights, g) {
                Ok((v, _)) => v,
                Err(_) => f64::NAN,
            },
            &x,
            &cfg.lbfgs,
        );
        iterations += res.iterations;
        evaluations += res.evaluations;
        status = res.status;
        value = res.value;
        history.push(res.history);
        x = res.x;
        let poly = problem.spline(&x)?;
        let rep = audit(&poly, map, limits, params, weights.bubbles, cfg.audit_dt);
        log::debug!(
            "round {round}: {:?} after {} iters, J = {:.4}, feasible = {}",
            res.status,
            res.iterations,
            res.value,
            rep.feasible
        );
        let done = rep.feasible;
        report = Some((poly, rep));
        if done {
            break;
        }
        weights.lambda_s *= 10.0;
    }
    let (poly, mut report) = report.expect("at least one round runs");
    report.iterations = iterations;
    report.evaluations = evaluations;
    report.objective = value;
    report.status = format!("{status:?}");
    report.runtime_ms = started.elapsed().as_secs_f64() * 1e3;
    log::debug!("planned {} pieces in {:.1} ms", m, started.elapsed().as_secs_f64() * 1e3);
    Ok(PlanResult { poly, report, history })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::esdf::{build_esdf, rasterize};
    use crate::flatness::flat_to_state;
    use crate::minco::construct;

    fn empty_map() -> EsdfMap {
        build_esdf(&rasterize(&[], Vec3::new(-3.0, -3.0, 0.0), Vec3::new(8.0, 3.0, 4.0), 0.1).unwrap()).unwrap()
    }

    #[test]
    fn thrust_and_tilt_examples() {
        let p = SystemParams::default();
        let tt = thrust_and_tilt(&FlatSnapshot::hover(Vec3::zeros()), &p).unwrap();
        assert!((tt.thrust - p.hover_thrust()).abs() < 1e-12);
        assert!((tt.cos_tilt - 1.0).abs() < 1e-15);
        assert!((thrust_violation(25.0, 2.0, 20.0) - 115.0).abs() < 1e-12);
        assert!((tilt_violation(0.4, 60f64.to_radians()) - 0.1).abs() < 1e-12);
    }

    #[test]
    fn thrust_and_tilt_agree_with_flatness_and_fd() {
        let p = SystemParams::default();
        let mut s = FlatSnapshot::hover(Vec3::zeros());
        s.acc = Vec3::new(2.0, -1.0, 0.5);
        s.jerk = Vec3::new(1.0, 3.0, -2.0);
        s.snap = Vec3::new(-4.0, 2.0, 5.0);
        let tt = thrust_and_tilt(&s, &p).unwrap();
        let fs = flat_to_state(&s, &p).unwrap();
        assert!((tt.thrust - fs.thrust).abs() < 1e-12);
        assert!((tt.cos_tilt - fs.state.body_z().z).abs() < 1e-12);
        let h = 1e-6;
        let perturb = |which: usize, a: usize, dh: f64| {
            let mut x = s;
            match which {
                0 => x.acc[a] += dh,
                1 => x.jerk[a] += dh,
                _ => x.snap[a] += dh,
            }
            thrust_and_tilt(&x, &p).unwrap()
        };
        for which in 0..3 {
            for a in 0..3 {
                let (tp, tm) = (perturb(which, a, h), perturb(which, a, -h));
                let fd_f = (tp.thrust - tm.thrust) / (2.0 * h);
                let fd_c = (tp.cos_tilt - tm.cos_tilt) / (2.0 * h);
                assert!((fd_f - tt.grad_thrust[which][a]).abs() < 1e-6);
                assert!((fd_c - tt.grad_cos[which][a]).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn slow_line_has_no_penalty() {
        let map = empty_map();
        let p = SystemParams::default();
        let lim = DynamicLimits { f_u: 40.0, ..Default::default() };
        let poly = construct(BoundaryState::rest(Vec3::new(0.0, 0.0, 1.5)), BoundaryState::rest(Vec3::new(3.0, 0.0, 1.5)), &[], &[6.0]).unwrap();
        let pen = penalty_eval(&poly, &map, &lim, &PlannerWeights::default(), &p);
        assert_eq!(pen.value, 0.0);
        assert!(pen.grad_t.iter().all(|g| *g == 0.0));
        assert!(pen.grad_c.iter().all(|g| g.iter().all(|v| *v == 0.0)));
    }

    #[test]
    fn acceleration_penalty_shrinks_with_longer_durations() {
        let map = empty_map();
        let p = SystemParams::default();
        let head = BoundaryState::rest(Vec3::new(0.0, 0.0, 1.5));
        let tail = BoundaryState::rest(Vec3::new(4.0, 0.0, 1.5));
        let t = 2.0;
        let poly = construct(head, tail, &[], &[t]).unwrap();
        let peak = (0..=200).map(|i| poly.evaluate(t * i as f64 / 200.0, 2).norm()).fold(0.0, f64::max);
        let lim = DynamicLimits { a_max: peak / 1.2, f_u: 100.0, theta_max: 1.5, ..Default::default() };
        let w = PlannerWeights::default();
        let mc = Minco::construct(head, tail, &[], &[t]).unwrap();
        let pen = penalty_eval(&mc.poly, &map, &lim, &w, &p);
        assert!(pen.terms[4] > 0.0);
        let (_, gt) = mc.propagate_gradients(&pen.grad_c, &pen.grad_t);
        assert!(gt[0] < 0.0);
        let longer = penalty_eval(&construct(head, tail, &[], &[t * 1.01]).unwrap(), &map, &lim, &w, &p);
        assert!(longer.value < pen.value);
    }
}
