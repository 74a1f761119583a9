//! Deterministic closed-loop simulation.
//!
//! The truth model integrates the rigid-body dynamics with first-order
//! motors at the simulation step. NMPC, the force estimator and the inner
//! rate loop run at their own rates on the same grid.

use std::fmt::Write as _;
use std::time::Instant;

use nalgebra::Vector4;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dynamics::{rigid_body_derivative, rk4_with, ExternalForces, RotorGeometry, StateDerivative, SystemParams, SystemState};
use crate::estimator::{ForceEstimator, ForceMeasurement};
use crate::flatness::{flat_to_state, FlatSnapshot, FlatState};
use crate::indi::{IndiController, RateController};
use crate::minco::PiecewisePoly;
use crate::nmpc::{build_reference, Nmpc};
use crate::scenario::{reference, Disturbance, PlanOutcome, Scenario, Wind};
use crate::{Error, Result, Vec3};

/// Reference state at time `t`; past the end, hover at the final point.
pub fn reference_at(poly: &PiecewisePoly, t: f64, params: &SystemParams) -> Result<FlatState> {
    let total = poly.total_duration();
    let snap = if t >= total {
        FlatSnapshot::hover(poly.evaluate(total, 0))
    } else {
        FlatSnapshot::from_derivs(poly.derivs(t.max(0.0)), 0.0, 0.0)
    };
    flat_to_state(&snap, params)
}

/// Result of one truth step.
#[derive(Debug, Clone)]
pub struct TruthStep {
    pub state: SystemState,
    pub n: Vector4<f64>,
    pub thrust: f64,
    pub torque: Vec3,
    /// Cable tension at the start of the step (N).
    pub tension: f64,
}

/// Rotor speed and acceleration after `h` seconds of first-order response.
fn motor_at(n0: &Vector4<f64>, n_c: &Vector4<f64>, tau: f64, h: f64) -> (Vector4<f64>, Vector4<f64>) {
    let n = n_c + (n0 - n_c) * (-h / tau).exp();
    (n, (n_c - n) / tau)
}

/// Advances the truth model by `dt`. Commanded rotor speeds are held over the
/// step; the wrench is taken at the midpoint of the analytic motor response.
pub fn truth_step(
    state: &SystemState,
    n: &Vector4<f64>,
    n_c: &Vector4<f64>,
    bias_torque: &Vec3,
    params: &SystemParams,
    ext: &ExternalForces,
    dt: f64,
) -> Result<TruthStep> {
    let geom = &params.rotors;
    let n_c = n_c.map(|v| v.clamp(0.0, geom.n_max));
    let (n_mid, n_dot_mid) = motor_at(n, &n_c, geom.motor_tau, 0.5 * dt);
    let (thrust, rotor_torque) = geom.forward(&n_mid, &n_dot_mid);
    let torque = rotor_torque + bias_torque;
    let mut tension = f64::NAN;
    let next = rk4_with(state, dt, params, |s| {
        let d = rigid_body_derivative(s, thrust, &torque, params, ext)?;
        if tension.is_nan() {
            tension = d.tension;
        }
        Ok(d)
    })?;
    let (n_next, _) = motor_at(n, &n_c, geom.motor_tau, dt);
    Ok(TruthStep { state: next, n: n_next, thrust, torque, tension })
}

/// Accelerometer-derived measurement: truth accelerations plus Gaussian
/// noise, and the thrust vector from the true rotor speeds and attitude.
#[allow(clippy::too_many_arguments)]
pub fn imu_measure(
    state: &SystemState,
    deriv: &StateDerivative,
    n: &Vector4<f64>,
    n_dot: &Vector4<f64>,
    geom: &RotorGeometry,
    sigma: f64,
    rng: &mut ChaCha8Rng,
    stamp: f64,
) -> ForceMeasurement {
    let mut noise = || -> Vec3 {
        if sigma > 0.0 {
            let d = Normal::new(0.0, sigma).expect("positive sigma");
            Vec3::from_fn(|_, _| d.sample(rng))
        } else {
            Vec3::zeros()
        }
    };
    let (f, _) = geom.forward(n, n_dot);
    ForceMeasurement {
        acc_q: deriv.acc_q + noise(),
        acc_l: deriv.acc_l + noise(),
        rho: state.rho,
        thrust_vec: state.body_z() * f,
        stamp,
    }
}

/// One simulation step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub t: f64,
    pub x_q: Vec3,
    pub x_l: Vec3,
    pub ref_q: Vec3,
    pub ref_l: Vec3,
    pub v_l: Vec3,
    pub thrust_cmd: f64,
    pub omega_c: Vec3,
    pub omega: Vec3,
    pub n: Vector4<f64>,
    pub est_f_q: Vec3,
    pub est_f_l: Vec3,
    pub tension: f64,
    pub saturated: bool,
}

/// One NMPC cycle. Wall-clock times are kept apart in [`RunLog::timing`] so
/// the log itself is reproducible.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleRow {
    pub t: f64,
    pub gap_norm: f64,
    pub cost: f64,
    pub clipped: bool,
    pub degraded: bool,
    pub est_residual: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub nmpc_ms: Vec<f64>,
    pub estimator_ms: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub rows: Vec<LogRow>,
    pub cycles: Vec<CycleRow>,
    /// `(time, description)` of every applied disturbance.
    pub events: Vec<(f64, String)>,
    /// Set when the cable went slack and the run stopped.
    pub aborted: Option<String>,
    pub timing: Timing,
}

fn v3(out: &mut String, v: &Vec3) {
    let _ = write!(out, ",{},{},{}", v.x, v.y, v.z);
}

impl RunLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "t,xq_x,xq_y,xq_z,xl_x,xl_y,xl_z,refq_x,refq_y,refq_z,refl_x,refl_y,refl_z,vl_x,vl_y,vl_z,thrust_cmd,wc_x,wc_y,wc_z,w_x,w_y,w_z,n1,n2,n3,n4,fq_x,fq_y,fq_z,fl_x,fl_y,fl_z,tension,saturated\n",
        );
        for r in &self.rows {
            let _ = write!(s, "{}", r.t);
            for v in [&r.x_q, &r.x_l, &r.ref_q, &r.ref_l, &r.v_l] {
                v3(&mut s, v);
            }
            let _ = write!(s, ",{}", r.thrust_cmd);
            v3(&mut s, &r.omega_c);
            v3(&mut s, &r.omega);
            let _ = write!(s, ",{},{},{},{}", r.n[0], r.n[1], r.n[2], r.n[3]);
            v3(&mut s, &r.est_f_q);
            v3(&mut s, &r.est_f_l);
            let _ = writeln!(s, ",{},{}", r.tension, r.saturated as u8);
        }
        s
    }

    pub fn cycles_csv(&self) -> String {
        let mut s = String::from("t,gap_norm,cost,clipped,degraded,est_residual\n");
        for c in &self.cycles {
            let _ = writeln!(s, "{},{},{},{},{},{}", c.t, c.gap_norm, c.cost, c.clipped as u8, c.degraded as u8, c.est_residual);
        }
        s
    }

    pub fn events_csv(&self) -> String {
        let mut s = String::from("t,event\n");
        for (t, e) in &self.events {
            let _ = writeln!(s, "{t},{e}");
        }
        s
    }
}

/// Tracking errors in centimetres.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackingMetrics {
    pub rmse_q: f64,
    pub max_q: f64,
    pub rmse_l: f64,
    pub max_l: f64,
    pub samples: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TimingStats {
    pub nmpc_mean_ms: f64,
    pub nmpc_max_ms: f64,
    pub estimator_mean_ms: f64,
    pub estimator_max_ms: f64,
}

fn mean_max(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (0.0, 0.0);
    }
    (v.iter().sum::<f64>() / v.len() as f64, v.iter().copied().fold(0.0, f64::max))
}

pub fn metrics(log: &RunLog) -> Result<TrackingMetrics> {
    if log.rows.is_empty() {
        return Err(Error::InvalidParameter("empty run log".into()));
    }
    let (mut sq, mut mq, mut sl, mut ml) = (0.0, 0.0f64, 0.0, 0.0f64);
    for r in &log.rows {
        let eq = (r.x_q - r.ref_q).norm();
        let el = (r.x_l - r.ref_l).norm();
        sq += eq * eq;
        sl += el * el;
        mq = mq.max(eq);
        ml = ml.max(el);
    }
    let n = log.rows.len() as f64;
    Ok(TrackingMetrics { rmse_q: 100.0 * (sq / n).sqrt(), max_q: 100.0 * mq, rmse_l: 100.0 * (sl / n).sqrt(), max_l: 100.0 * ml, samples: log.rows.len() })
}

pub fn timing_stats(log: &RunLog) -> TimingStats {
    let (nmpc_mean_ms, nmpc_max_ms) = mean_max(&log.timing.nmpc_ms);
    let (estimator_mean_ms, estimator_max_ms) = mean_max(&log.timing.estimator_ms);
    TimingStats { nmpc_mean_ms, nmpc_max_ms, estimator_mean_ms, estimator_max_ms }
}

enum Inner {
    Indi(IndiController),
    Plain(RateController),
}

/// Plans (or builds) the reference and simulates it.
pub fn run(sc: &Scenario) -> Result<(RunLog, Option<PlanOutcome>)> {
    sc.validate()?;
    let (poly, plan) = reference(sc)?;
    Ok((run_with_reference(sc, &poly)?, plan))
}

/// Simulates tracking of a given payload trajectory.
pub fn run_with_reference(sc: &Scenario, poly: &PiecewisePoly) -> Result<RunLog> {
    sc.validate()?;
    let [nmpc_every, inner_every, est_every] = sc.rates.dividers()?;
    let dt = sc.rates.sim_dt;
    let nominal = &sc.params;
    let mut truth = sc.params.clone();
    let steps = ((poly.total_duration() + sc.settle_time) / dt).round() as usize;

    let init = reference_at(poly, 0.0, nominal)?;
    let mut state = init.state.clone();
    let mut n = Vector4::repeat(nominal.rotors.hover_speed(init.thrust));
    let mut n_c = n;

    let mut nmpc = Nmpc::new(sc.nmpc.clone())?;
    let mut estimator = ForceEstimator::new(sc.estimator.clone(), nominal.clone())?;
    let mut inner = if sc.flags.indi {
        Inner::Indi(IndiController::new(sc.indi.clone())?)
    } else {
        Inner::Plain(RateController { k_omega: sc.indi.k_omega })
    };
    let mut acc_rng = ChaCha8Rng::seed_from_u64(sc.seed);
    let mut gyro_rng = ChaCha8Rng::seed_from_u64(sc.seed);
    gyro_rng.set_stream(1);
    let gyro_noise = (sc.noise.gyro_sigma > 0.0).then(|| Normal::new(0.0, sc.noise.gyro_sigma).expect("positive sigma"));

    let mut wind = Wind::default();
    let mut bias = Vec3::zeros();
    let mut next_event = 0;
    let mut u = crate::dynamics::ControlInput::new(init.thrust, init.omega);
    let mut est = ExternalForces::zero();
    let mut est_residual = 0.0;
    let mut saturated = false;
    let mut log = RunLog::default();
    log.rows.reserve(steps + 1);

    for k in 0..=steps {
        let t = k as f64 * dt;
        while let Some(ev) = sc.events.get(next_event).filter(|e| e.time <= t + 1e-12) {
            let desc = match ev.disturbance {
                Disturbance::Wind(w) => {
                    wind = w;
                    format!("wind {:.3} {:.3} {:.3} m/s", w.velocity.x, w.velocity.y, w.velocity.z)
                }
                Disturbance::AttachMass { mass } => {
                    truth.m_l += mass;
                    format!("attach {mass} kg")
                }
                Disturbance::ComOffsetTorque { torque } => {
                    bias = torque;
                    format!("torque {:.4} {:.4} {:.4} N m", torque.x, torque.y, torque.z)
                }
            };
            log.events.push((t, desc));
            next_event += 1;
        }
        let w = wind.at(t);
        let ext = ExternalForces { f_q: sc.aero.drag(sc.aero.cda_q, &w, &state.v_q), f_l: sc.aero.drag(sc.aero.cda_l, &w, &state.v_l) };

        if k % est_every == 0 {
            let n_dot = (n_c - n) / nominal.rotors.motor_tau;
            let (f, tau) = truth.rotors.forward(&n, &n_dot);
            let deriv = rigid_body_derivative(&state, f, &(tau + bias), &truth, &ext)?;
            let meas = imu_measure(&state, &deriv, &n, &n_dot, &truth.rotors, sc.noise.acc_sigma, &mut acc_rng, t);
            estimator.push(meas)?;
            let started = Instant::now();
            let e = estimator.estimate()?;
            log.timing.estimator_ms.push(started.elapsed().as_secs_f64() * 1e3);
            est = e.forces();
            est_residual = e.residual_norm;
        }

        if k % nmpc_every == 0 {
            let window = build_reference(poly, t, &sc.nmpc, nominal)?;
            let ext_model = if sc.flags.force_comp { est } else { ExternalForces::zero() };
            let started = Instant::now();
            let (cmd, diag) = nmpc.step(&state, &window, &ext_model, nominal)?;
            log.timing.nmpc_ms.push(started.elapsed().as_secs_f64() * 1e3);
            u = cmd;
            log.cycles.push(CycleRow { t, gap_norm: diag.gap_norm, cost: diag.cost, clipped: diag.clipped, degraded: diag.degraded, est_residual });
        }

        if k % inner_every == 0 {
            let omega_meas = match &gyro_noise {
                Some(d) => state.omega + Vec3::from_fn(|_, _| d.sample(&mut gyro_rng)),
                None => state.omega,
            };
            let out = match &mut inner {
                Inner::Indi(c) => c.update(&omega_meas, &n, &u.omega_c, &Vec3::zeros(), u.thrust, nominal),
                Inner::Plain(c) => c.update(&omega_meas, &n, &u.omega_c, &Vec3::zeros(), u.thrust, nominal),
            };
            n_c = out.n_c;
            saturated = out.saturated;
        }

        let r = reference_at(poly, t, nominal)?;
        let step = truth_step(&state, &n, &n_c, &bias, &truth, &ext, dt)?;
        log.rows.push(LogRow {
            t,
            x_q: state.x_q,
            x_l: state.x_l,
            ref_q: r.state.x_q,
            ref_l: r.state.x_l,
            v_l: state.v_l,
            thrust_cmd: u.thrust,
            omega_c: u.omega_c,
            omega: state.omega,
            n,
            est_f_q: est.f_q,
            est_f_l: est.f_l,
            tension: step.tension,
            saturated,
        });
        if !(step.tension > 0.0) || !step.state.is_finite() {
            let err = Error::TautViolation { time: t, tension: step.tension };
            log::warn!("{err}");
            log.aborted = Some(err.to_string());
            break;
        }
        state = step.state;
        n = step.n;
    }
    Ok(log)
}
