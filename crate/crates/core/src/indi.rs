//! INDI angular-rate loop.
//!
//! Body rates and rotor speeds go through one multi-channel Butterworth filter
//! so both see the same delay; the filtered rates are differentiated with a
//! causal smooth noise-robust stencil. The commanded moment is the filtered
//! moment plus an inertia-scaled acceleration increment, and rotor speeds
//! come from a Newton solve of the rotor model including the spin-up term.

use std::collections::VecDeque;

use nalgebra::{Matrix3, Matrix4, Vector4};
use serde::{Deserialize, Serialize};

use crate::dynamics::{RotorGeometry, SystemParams};
use crate::{Error, Result, Vec3};

/// Second-order low-pass Butterworth biquad (bilinear transform with
/// prewarping), transposed direct form II, any number of channels.
#[derive(Debug, Clone, PartialEq)]
pub struct Butterworth2 {
    pub cutoff: f64,
    pub sample_rate: f64,
    b: [f64; 3],
    a: [f64; 2],
    state: Vec<[f64; 2]>,
    primed: bool,
}

impl Butterworth2 {
    pub fn new(cutoff: f64, sample_rate: f64, channels: usize) -> Result<Self> {
        if !(cutoff > 0.0 && sample_rate > 0.0 && cutoff < 0.5 * sample_rate) {
            return Err(Error::InvalidParameter(format!("cutoff {cutoff} Hz invalid for sample rate {sample_rate} Hz")));
        }
        let k = (std::f64::consts::PI * cutoff / sample_rate).tan();
        let s2 = std::f64::consts::SQRT_2;
        let norm = 1.0 / (1.0 + s2 * k + k * k);
        let b0 = k * k * norm;
        Ok(Self {
            cutoff,
            sample_rate,
            b: [b0, 2.0 * b0, b0],
            a: [2.0 * (k * k - 1.0) * norm, (1.0 - s2 * k + k * k) * norm],
            state: vec![[0.0; 2]; channels],
            primed: false,
        })
    }

    pub fn channels(&self) -> usize {
        self.state.len()
    }

    /// Sets every channel to the steady state of a constant input.
    pub fn prime(&mut self, x: &[f64]) {
        let [b0, _, b2] = self.b;
        let [_, a2] = self.a;
        for (s, &c) in self.state.iter_mut().zip(x) {
            *s = [(1.0 - b0) * c, (b2 - a2) * c];
        }
        self.primed = true;
    }

    /// Filters one sample per channel. The first call primes the filter with
    /// its input so there is no start-up transient.
    pub fn filter_step(&mut self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.state.len(), "channel count mismatch");
        if !self.primed {
            self.prime(x);
        }
        let [b0, b1, b2] = self.b;
        let [a1, a2] = self.a;
        self.state
            .iter_mut()
            .zip(x)
            .map(|(s, &xi)| {
                let y = b0 * xi + s[0];
                s[0] = b1 * xi - a1 * y + s[1];
                s[1] = b2 * xi - a2 * y;
                y
            })
            .collect()
    }
}

/// Causal five-point smooth noise-robust differentiator,
/// `(f0 + 2 f1 - 2 f3 - f4) / (8 h)` with `fk` the sample `k` steps back.
#[derive(Debug, Clone, PartialEq)]
pub struct RobustDiff {
    h: f64,
    hist: VecDeque<Vec<f64>>,
}

impl RobustDiff {
    pub fn new(h: f64) -> Self {
        Self { h, hist: VecDeque::with_capacity(5) }
    }

    pub fn step(&mut self, x: &[f64]) -> Vec<f64> {
        if self.hist.is_empty() {
            for _ in 0..4 {
                self.hist.push_back(x.to_vec());
            }
        }
        self.hist.push_back(x.to_vec());
        if self.hist.len() > 5 {
            self.hist.pop_front();
        }
        let f = |k: usize| &self.hist[4 - k];
        (0..x.len()).map(|i| (f(0)[i] + 2.0 * f(1)[i] - 2.0 * f(3)[i] - f(4)[i]) / (8.0 * self.h)).collect()
    }
}

/// `K (omega_r - omega_f) + omega_dot_r`, with a diagonal gain.
pub fn angular_accel_cmd(omega_r: &Vec3, omega_dot_r: &Vec3, omega_f: &Vec3, k_omega: &Vec3) -> Vec3 {
    k_omega.component_mul(&(omega_r - omega_f)) + omega_dot_r
}

/// `tau_f + J (omega_dot_c - omega_dot_f)`.
pub fn control_moment(tau_f: &Vec3, omega_dot_c: &Vec3, omega_dot_f: &Vec3, inertia: &Matrix3<f64>) -> Vec3 {
    tau_f + inertia * (omega_dot_c - omega_dot_f)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Allocation {
    pub n_c: Vector4<f64>,
    /// Wrench error of the returned speeds (N and N m stacked).
    pub residual: f64,
    pub saturated: bool,
}

/// Rotor speeds `n_c` with `G1 n_c^2 + G2 (n_c - n_f) / dt_m = [f; tau]`.
///
/// Newton from `n_f` (at most 5 iterations), then clamping to `[0, n_max]`.
pub fn allocate(f_tc: f64, tau_c: &Vec3, n_f: &Vector4<f64>, geom: &RotorGeometry) -> Allocation {
    let target = Vector4::new(f_tc, tau_c.x, tau_c.y, tau_c.z);
    let g1 = geom.g1();
    let g2 = geom.g2() / geom.motor_tau;
    let wrench = |n: &Vector4<f64>| g1 * n.component_mul(n) + g2 * (n - n_f);
    let mut n = *n_f;
    // Start from a positive guess so the Jacobian is invertible.
    let floor = 0.05 * geom.n_max;
    n.iter_mut().for_each(|v| *v = v.max(floor));
    for _ in 0..5 {
        let r = wrench(&n) - target;
        if r.amax() < 1e-12 {
            break;
        }
        let jac: Matrix4<f64> = g1 * Matrix4::from_diagonal(&(2.0 * n)) + g2;
        let Some(step) = jac.lu().solve(&r) else { break };
        n -= step;
    }
    let clamped = n.map(|v| v.clamp(0.0, geom.n_max));
    let saturated = clamped != n || !n.iter().all(|v| v.is_finite());
    let n_c = if clamped.iter().all(|v| v.is_finite()) { clamped } else { *n_f };
    let residual = (wrench(&n_c) - target).norm();
    Allocation { n_c, residual, saturated }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IndiConfig {
    pub cutoff_hz: f64,
    pub rate_hz: f64,
    pub k_omega: Vec3,
}

impl Default for IndiConfig {
    fn default() -> Self {
        Self { cutoff_hz: 10.0, rate_hz: 1000.0, k_omega: Vec3::new(20.0, 20.0, 10.0) }
    }
}

/// Filtered signals of the last update.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct IndiState {
    pub omega_f: Vec3,
    pub n_f: Vector4<f64>,
    pub omega_dot_f: Vec3,
    pub n_dot_f: Vector4<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InnerOutput {
    pub n_c: Vector4<f64>,
    pub tau_c: Vec3,
    pub saturated: bool,
}

/// Stateful INDI rate controller.
#[derive(Debug, Clone)]
pub struct IndiController {
    pub cfg: IndiConfig,
    filter: Butterworth2,
    diff: RobustDiff,
    pub state: IndiState,
}

impl IndiController {
    pub fn new(cfg: IndiConfig) -> Result<Self> {
        // 3 rate channels + 4 rotor channels share one set of coefficients.
        let filter = Butterworth2::new(cfg.cutoff_hz, cfg.rate_hz, 7)?;
        let diff = RobustDiff::new(1.0 / cfg.rate_hz);
        Ok(Self { cfg, filter, diff, state: IndiState::default() })
    }

    pub fn update(
        &mut self,
        omega_meas: &Vec3,
        n_meas: &Vector4<f64>,
        omega_r: &Vec3,
        omega_dot_r: &Vec3,
        f_tc: f64,
        params: &SystemParams,
    ) -> InnerOutput {
        let raw = [omega_meas.x, omega_meas.y, omega_meas.z, n_meas[0], n_meas[1], n_meas[2], n_meas[3]];
        let y = self.filter.filter_step(&raw);
        let d = self.diff.step(&y);
        let omega_f = Vec3::new(y[0], y[1], y[2]);
        let n_f = Vector4::new(y[3], y[4], y[5], y[6]);
        let omega_dot_f = Vec3::new(d[0], d[1], d[2]);
        let n_dot_f = Vector4::new(d[3], d[4], d[5], d[6]);
        self.state = IndiState { omega_f, n_f, omega_dot_f, n_dot_f };

        let (_, tau_f) = params.rotors.forward(&n_f, &n_dot_f);
        let omega_dot_c = angular_accel_cmd(omega_r, omega_dot_r, &omega_f, &self.cfg.k_omega);
        let tau_c = control_moment(&tau_f, &omega_dot_c, &omega_dot_f, &params.inertia);
        let alloc = allocate(f_tc, &tau_c, n_meas, &params.rotors);
        InnerOutput { n_c: alloc.n_c, tau_c, saturated: alloc.saturated }
    }
}

/// One inner-loop update, for logging.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InnerRecord {
    pub stamp: f64,
    pub omega_r: Vec3,
    pub omega_f: Vec3,
    pub tau_c: Vec3,
    pub n_c: Vector4<f64>,
    pub saturated: bool,
}

pub fn inner_log_csv(rows: &[InnerRecord]) -> String {
    let mut s = String::from("stamp,wr_x,wr_y,wr_z,wf_x,wf_y,wf_z,tau_x,tau_y,tau_z,n1,n2,n3,n4,saturated\n");
    for r in rows {
        let cols: Vec<String> = std::iter::once(r.stamp)
            .chain(r.omega_r.iter().copied())
            .chain(r.omega_f.iter().copied())
            .chain(r.tau_c.iter().copied())
            .chain(r.n_c.iter().copied())
            .map(|v| v.to_string())
            .collect();
        s.push_str(&cols.join(","));
        s.push_str(if r.saturated { ",1\n" } else { ",0\n" });
    }
    s
}

/// Conventional model-based rate loop used when INDI is switched off:
/// `tau = J (K (omega_r - omega) + omega_dot_r) + omega x J omega`.
#[derive(Debug, Clone)]
pub struct RateController {
    pub k_omega: Vec3,
}

impl RateController {
    pub fn update(
        &self,
        omega_meas: &Vec3,
        n_meas: &Vector4<f64>,
        omega_r: &Vec3,
        omega_dot_r: &Vec3,
        f_tc: f64,
        params: &SystemParams,
    ) -> InnerOutput {
        let j = &params.inertia;
        let acc = angular_accel_cmd(omega_r, omega_dot_r, omega_meas, &self.k_omega);
        let tau_c = j * acc + omega_meas.cross(&(j * omega_meas));
        let alloc = allocate(f_tc, &tau_c, n_meas, &params.rotors);
        InnerOutput { n_c: alloc.n_c, tau_c, saturated: alloc.saturated }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn filter_dc_gain_and_priming() {
        let mut f = Butterworth2::new(10.0, 1000.0, 2).unwrap();
        let y = f.filter_step(&[3.0, -1.5]);
        assert!((y[0] - 3.0).abs() < 1e-12 && (y[1] + 1.5).abs() < 1e-12);
        let mut g = Butterworth2::new(10.0, 1000.0, 1).unwrap();
        g.prime(&[0.0]);
        let mut y = 0.0;
        // 5 time constants of the slower pole pair.
        for _ in 0..200 {
            y = g.filter_step(&[2.0])[0];
        }
        assert!((y - 2.0).abs() < 1e-3, "{y}");
        assert!(Butterworth2::new(600.0, 1000.0, 1).is_err());
    }

    #[test]
    fn step_overshoot_matches_butterworth() {
        let mut f = Butterworth2::new(10.0, 1000.0, 1).unwrap();
        f.prime(&[0.0]);
        let peak = (0..2000).map(|_| f.filter_step(&[1.0])[0]).fold(0.0, f64::max);
        // Continuous second-order system with zeta = 1/sqrt(2): exp(-pi) = 4.32 %.
        let zeta = std::f64::consts::FRAC_1_SQRT_2;
        let analytic = (-std::f64::consts::PI * zeta / (1.0 - zeta * zeta).sqrt()).exp();
        assert!(peak - 1.0 <= 0.05);
        assert!((peak - 1.0 - analytic).abs() < 0.005, "{peak} vs {analytic}");
    }

    #[test]
    fn cutoff_gain_is_half_power() {
        let fs = 1000.0;
        let fc = 10.0;
        let mut f = Butterworth2::new(fc, fs, 1).unwrap();
        f.prime(&[0.0]);
        let w = 2.0 * std::f64::consts::PI * fc / fs;
        let mut peak: f64 = 0.0;
        for k in 0..20000 {
            let y = f.filter_step(&[(w * k as f64).sin()])[0];
            if k > 10000 {
                peak = peak.max(y.abs());
            }
        }
        assert!((peak - std::f64::consts::FRAC_1_SQRT_2).abs() < 0.02 * std::f64::consts::FRAC_1_SQRT_2, "{peak}");
    }

    #[test]
    fn channels_share_delay() {
        let mut f = Butterworth2::new(10.0, 1000.0, 7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut out = vec![Vec::new(); 7];
        for _ in 0..500 {
            let x: f64 = rng.random_range(-1.0..1.0);
            for (c, y) in f.filter_step(&[x; 7]).into_iter().enumerate() {
                out[c].push(y);
            }
        }
        for c in 1..7 {
            assert_eq!(out[c], out[0]);
        }
    }

    #[test]
    fn differentiator_accuracy() {
        let h = 1e-3;
        for freq in [1.0, 2.5, 5.0] {
            let mut d = RobustDiff::new(h);
            let w = 2.0 * std::f64::consts::PI * freq;
            let mut peak: f64 = 0.0;
            for k in 0..3000 {
                let v = d.step(&[(w * k as f64 * h).sin()])[0];
                if k > 1000 {
                    peak = peak.max(v.abs());
                }
            }
            assert!((peak / w - 1.0).abs() <= 0.03, "{freq} Hz: {}", peak / w);
        }
    }

    #[test]
    fn moment_law_examples() {
        let k = Vec3::repeat(10.0);
        assert_eq!(angular_accel_cmd(&Vec3::new(0.3, 0.1, 0.0), &Vec3::zeros(), &Vec3::new(0.3, 0.1, 0.0), &k), Vec3::zeros());
        assert_eq!(angular_accel_cmd(&Vec3::new(0.1, 0.0, 0.0), &Vec3::zeros(), &Vec3::zeros(), &k), Vec3::new(1.0, 0.0, 0.0));
        let e1 = Vec3::new(0.1, -0.2, 0.05);
        let e2 = Vec3::new(-0.3, 0.4, 0.2);
        let lin = angular_accel_cmd(&(e1 + e2), &Vec3::zeros(), &Vec3::zeros(), &k);
        let sum = angular_accel_cmd(&e1, &Vec3::zeros(), &Vec3::zeros(), &k) + angular_accel_cmd(&e2, &Vec3::zeros(), &Vec3::zeros(), &k);
        assert!((lin - sum).norm() < 1e-15);

        let j = SystemParams::default().inertia;
        let tf = Vec3::new(0.01, -0.02, 0.003);
        let a = Vec3::new(0.5, 0.2, -0.1);
        assert_eq!(control_moment(&tf, &a, &a, &j), tf);
        assert_eq!(control_moment(&Vec3::zeros(), &Vec3::x(), &Vec3::zeros(), &j), j * Vec3::x());
    }

    #[test]
    fn hover_allocation_is_fixed_point() {
        let p = SystemParams::default();
        let nh = p.rotors.hover_speed(p.hover_thrust());
        let n_f = Vector4::repeat(nh);
        let a = allocate(p.hover_thrust(), &Vec3::zeros(), &n_f, &p.rotors);
        assert!((a.n_c - n_f).amax() < 1e-9, "{:?}", a.n_c);
        assert!((nh - (p.hover_thrust() / (4.0 * p.rotors.k_f)).sqrt()).abs() < 1e-12);
        assert!(!a.saturated);
    }

    #[test]
    fn yaw_request_alternates_rotors() {
        let p = SystemParams::default();
        let n_f = Vector4::repeat(p.rotors.hover_speed(p.hover_thrust()));
        let a = allocate(p.hover_thrust(), &Vec3::new(0.0, 0.0, -0.01), &n_f, &p.rotors);
        let d = a.n_c - n_f;
        assert!(d[0] > 0.0 && d[1] < 0.0 && d[2] > 0.0 && d[3] < 0.0, "{d:?}");
    }

    #[test]
    fn allocation_round_trips_through_rotor_model() {
        let p = SystemParams::default();
        let g = &p.rotors;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let n_f = Vector4::from_fn(|_, _| rng.random_range(500.0..700.0));
            let f = rng.random_range(8.0..20.0);
            let tau = Vec3::new(rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1), rng.random_range(-0.02..0.02));
            let a = allocate(f, &tau, &n_f, g);
            assert!(!a.saturated);
            let (f2, t2) = g.forward(&a.n_c, &((a.n_c - n_f) / g.motor_tau));
            assert!((f2 - f).abs() < 1e-6 && (t2 - tau).norm() < 1e-6, "{} {}", f2 - f, (t2 - tau).norm());
        }
    }

    #[test]
    fn infeasible_wrench_is_flagged() {
        let p = SystemParams::default();
        let n_f = Vector4::repeat(600.0);
        let a = allocate(500.0, &Vec3::zeros(), &n_f, &p.rotors);
        assert!(a.saturated);
        assert!(a.n_c.iter().all(|v| (0.0..=p.rotors.n_max).contains(v)));
    }
}
