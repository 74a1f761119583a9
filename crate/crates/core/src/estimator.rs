//! Sliding-window external force estimation.
//!
//! For every sample in the window the unknowns are the forces on the
//! quadrotor and on the payload. Residuals per sample, with `F` the measured
//! thrust vector:
//!
//! - `r1 = f_Q + f_L - (m_Q (a_Q + g e_z) + m_L (a_L + g e_z) - F)`
//! - `r2 = rho x (f_Q - (m_Q (a_Q + g e_z) - F))`
//! - `r3 = w_g (f_L . rho)`, fixing the along-cable gauge on the payload side.
//!
//! The objective sums a Huber loss of the stacked residual with Huber
//! penalties pulling every per-sample force toward the window mean.

use std::collections::VecDeque;
use std::fmt::Write as _;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::dynamics::{ExternalForces, SystemParams};
use crate::numopt::{huber, lbfgs_minimize, LbfgsOptions, LbfgsStatus};
use crate::{e_z, Error, Result, Vec3};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForceMeasurement {
    pub acc_q: Vec3,
    pub acc_l: Vec3,
    pub rho: Vec3,
    /// `f R e_z` in the world frame (N).
    pub thrust_vec: Vec3,
    pub stamp: f64,
}

impl ForceMeasurement {
    fn is_finite(&self) -> bool {
        [self.acc_q, self.acc_l, self.rho, self.thrust_vec].iter().all(|v| v.iter().all(|c| c.is_finite())) && self.stamp.is_finite()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EstimatorConfig {
    pub window: usize,
    /// Huber threshold (N).
    pub delta: f64,
    /// Weight of the variance regularization. Above 1 a single outlier can
    /// no longer drag its own sample away from the window mean.
    pub k_r: f64,
    /// Scale of the along-cable residual.
    pub gauge_weight: f64,
    pub max_iters: usize,
    pub grad_tol: f64,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self { window: 20, delta: 1.0, k_r: 2.0, gauge_weight: 50.0, max_iters: 200, grad_tol: 1e-9 }
    }
}

impl EstimatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 {
            return Err(Error::InvalidParameter("estimator window must hold at least one sample".into()));
        }
        for (name, v) in [("delta", self.delta), ("gauge_weight", self.gauge_weight), ("grad_tol", self.grad_tol)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidParameter(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.k_r.is_finite() && self.k_r >= 0.0) {
            return Err(Error::InvalidParameter(format!("k_r must be non-negative, got {}", self.k_r)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForceEstimate {
    pub f_q: Vec3,
    pub f_l: Vec3,
    /// Per-sample forces, oldest first.
    pub samples: Vec<ExternalForces>,
    /// Euclidean norm of all stacked residuals.
    pub residual_norm: f64,
    pub stamp: f64,
    /// The solver failed and this is the previous estimate.
    pub stale: bool,
    pub iterations: usize,
}

impl ForceEstimate {
    pub fn forces(&self) -> ExternalForces {
        ExternalForces { f_q: self.f_q, f_l: self.f_l }
    }
}

/// Splits `f` into its component along `rho` and the remainder.
pub fn decompose_along_cable(f: &Vec3, rho: &Vec3) -> (Vec3, Vec3) {
    let par = rho * f.dot(rho);
    (par, f - par)
}

/// Targets `(b1, b2)` of one sample: `r1 = f_Q + f_L - b1`, `r2 = rho x (f_Q - b2)`.
fn targets(m: &ForceMeasurement, params: &SystemParams) -> (Vec3, Vec3) {
    let g = params.gravity * e_z();
    let quad = params.m_q * (m.acc_q + g) - m.thrust_vec;
    (quad + params.m_l * (m.acc_l + g), quad)
}

/// Zero-residual solution of a single sample.
fn exact_sample(m: &ForceMeasurement, params: &SystemParams) -> (Vec3, Vec3) {
    let (b1, b2) = targets(m, params);
    let rho = m.rho;
    let f_q = decompose_along_cable(&b2, &rho).1 + rho * rho.dot(&b1);
    (f_q, b1 - f_q)
}

fn residual(m: &ForceMeasurement, b: &(Vec3, Vec3), f_q: &Vec3, f_l: &Vec3, wg: f64) -> [f64; 7] {
    let r1 = f_q + f_l - b.0;
    let r2 = m.rho.cross(&(f_q - b.1));
    let r3 = wg * f_l.dot(&m.rho);
    [r1.x, r1.y, r1.z, r2.x, r2.y, r2.z, r3]
}

#[derive(Debug, Clone)]
pub struct ForceEstimator {
    pub cfg: EstimatorConfig,
    params: SystemParams,
    window: VecDeque<ForceMeasurement>,
    /// Per-sample solution aligned with `window`.
    warm: VecDeque<(Vec3, Vec3)>,
    rejected: usize,
    last: Option<ForceEstimate>,
}

impl ForceEstimator {
    pub fn new(cfg: EstimatorConfig, params: SystemParams) -> Result<Self> {
        cfg.validate()?;
        params.validate()?;
        Ok(Self { cfg, params, window: VecDeque::new(), warm: VecDeque::new(), rejected: 0, last: None })
    }

    pub fn len(&self) -> usize {
        self.window.len()
    }

    pub fn is_empty(&self) -> bool {
        self.window.is_empty()
    }

    /// Samples refused so far (non-finite, non-unit cable direction or out of order).
    pub fn rejected(&self) -> usize {
        self.rejected
    }

    pub fn last_estimate(&self) -> Option<&ForceEstimate> {
        self.last.as_ref()
    }

    pub fn push(&mut self, meas: ForceMeasurement) -> Result<()> {
        if !meas.is_finite() {
            self.rejected += 1;
            return Err(Error::NonFinite("force measurement"));
        }
        if (meas.rho.norm() - 1.0).abs() > 1e-6 {
            self.rejected += 1;
            return Err(Error::InvalidParameter(format!("cable direction norm {}", meas.rho.norm())));
        }
        if let Some(prev) = self.window.back() {
            if meas.stamp <= prev.stamp {
                self.rejected += 1;
                return Err(Error::InvalidParameter(format!("stamp {} not after {}", meas.stamp, prev.stamp)));
            }
        }
        let init = match &self.last {
            Some(e) if !e.stale => (e.f_q, e.f_l),
            _ => exact_sample(&meas, &self.params),
        };
        self.window.push_back(meas);
        self.warm.push_back(init);
        while self.window.len() > self.cfg.window {
            self.window.pop_front();
            self.warm.pop_front();
        }
        Ok(())
    }

    /// Objective value; writes the gradient into `grad`.
    fn objective(&self, targets: &[(Vec3, Vec3)], x: &DVector<f64>, grad: &mut DVector<f64>) -> f64 {
        let w = self.window.len();
        let (delta, k_r, wg) = (self.cfg.delta, self.cfg.k_r, self.cfg.gauge_weight);
        let get = |i: usize, o: usize| Vec3::new(x[6 * i + o], x[6 * i + o + 1], x[6 * i + o + 2]);
        grad.fill(0.0);
        let mut value = 0.0;
        let (mut mean_q, mut mean_l) = (Vec3::zeros(), Vec3::zeros());
        for i in 0..w {
            mean_q += get(i, 0);
            mean_l += get(i, 3);
        }
        mean_q /= w as f64;
        mean_l /= w as f64;
        let (mut sum_gq, mut sum_gl) = (Vec3::zeros(), Vec3::zeros());
        for (i, m) in self.window.iter().enumerate() {
            let (f_q, f_l) = (get(i, 0), get(i, 3));
            let r = residual(m, &targets[i], &f_q, &f_l, wg);
            let (v, g) = huber(&r, delta);
            value += v;
            let g1 = Vec3::new(g[0], g[1], g[2]);
            let g2 = Vec3::new(g[3], g[4], g[5]);
            let gq = g1 + g2.cross(&m.rho);
            let gl = g1 + m.rho * (wg * g[6]);

            let dq = f_q - mean_q;
            let dl = f_l - mean_l;
            let (vq, hq) = huber(dq.as_slice(), delta);
            let (vl, hl) = huber(dl.as_slice(), delta);
            value += k_r * (vq + vl);
            let hq = Vec3::from_column_slice(&hq) * k_r;
            let hl = Vec3::from_column_slice(&hl) * k_r;
            sum_gq += hq;
            sum_gl += hl;
            for c in 0..3 {
                grad[6 * i + c] += gq[c] + hq[c];
                grad[6 * i + 3 + c] += gl[c] + hl[c];
            }
        }
        // d(mean)/d(f_i) = I / W
        for i in 0..w {
            for c in 0..3 {
                grad[6 * i + c] -= sum_gq[c] / w as f64;
                grad[6 * i + 3 + c] -= sum_gl[c] / w as f64;
            }
        }
        value
    }

    pub fn estimate(&mut self) -> Result<ForceEstimate> {
        if self.window.is_empty() {
            return Err(Error::InvalidParameter("estimate requested from an empty window".into()));
        }
        let w = self.window.len();
        let tg: Vec<(Vec3, Vec3)> = self.window.iter().map(|m| targets(m, &self.params)).collect();
        let mut x0 = DVector::zeros(6 * w);
        for (i, (q, l)) in self.warm.iter().enumerate() {
            x0.fixed_rows_mut::<3>(6 * i).copy_from(q);
            x0.fixed_rows_mut::<3>(6 * i + 3).copy_from(l);
        }
        let opts = LbfgsOptions { max_iters: self.cfg.max_iters, grad_tol: self.cfg.grad_tol, ..Default::default() };
        let res = lbfgs_minimize(|x, g| self.objective(&tg, x, g), &x0, &opts);
        let stamp = self.window.back().map_or(0.0, |m| m.stamp);
        if matches!(res.status, LbfgsStatus::NonFinite) || !res.value.is_finite() {
            return Ok(self.stale(stamp));
        }
        let x = res.x;
        let mut samples = Vec::with_capacity(w);
        let mut sq = 0.0;
        for (i, m) in self.window.iter().enumerate() {
            let f_q = Vec3::new(x[6 * i], x[6 * i + 1], x[6 * i + 2]);
            let f_l = Vec3::new(x[6 * i + 3], x[6 * i + 4], x[6 * i + 5]);
            sq += residual(m, &tg[i], &f_q, &f_l, 1.0).iter().map(|v| v * v).sum::<f64>();
            samples.push(ExternalForces { f_q, f_l });
        }
        for (slot, s) in self.warm.iter_mut().zip(&samples) {
            *slot = (s.f_q, s.f_l);
        }
        let n = w as f64;
        let est = ForceEstimate {
            f_q: samples.iter().map(|s| s.f_q).sum::<Vec3>() / n,
            f_l: samples.iter().map(|s| s.f_l).sum::<Vec3>() / n,
            samples,
            residual_norm: sq.sqrt(),
            stamp,
            stale: false,
            iterations: res.iterations,
        };
        self.last = Some(est.clone());
        Ok(est)
    }

    fn stale(&self, stamp: f64) -> ForceEstimate {
        let mut e = self.last.clone().unwrap_or(ForceEstimate {
            f_q: Vec3::zeros(),
            f_l: Vec3::zeros(),
            samples: Vec::new(),
            residual_norm: f64::NAN,
            stamp,
            stale: true,
            iterations: 0,
        });
        e.stale = true;
        e
    }
}

/// CSV with columns `stamp, f_q xyz, f_l xyz, residual_norm`.
pub fn estimates_to_csv(rows: &[ForceEstimate]) -> String {
    let mut s = String::from("stamp,fq_x,fq_y,fq_z,fl_x,fl_y,fl_z,residual_norm\n");
    for e in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            e.stamp, e.f_q.x, e.f_q.y, e.f_q.z, e.f_l.x, e.f_l.y, e.f_l.z, e.residual_norm
        );
    }
    s
}
