//! Independent reference implementations used by the integration tests and
//! the acceptance harness.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use slung::dynamics::{derivative, rk4_with, ControlInput, ExternalForces, SystemParams, SystemState};
use slung::esdf::{build_esdf, rasterize, OccupancyGrid, Primitive, MAX_DISTANCE};
use slung::indi::{IndiConfig, IndiController, InnerRecord, RateController};
use slung::minco::{construct, energy_and_grads, BoundaryState};
use slung::numopt::grad_check;
use slung::planner::{DynamicLimits, PlannerWeights, Problem};
use slung::sim::{reference_at, truth_step};
use slung::Vec3;

fn falling(k: usize, r: usize) -> f64 {
    ((k - r + 1)..=k).map(|v| v as f64).product()
}

/// Monomial derivative row, written independently of the library.
pub fn monomial_row(t: f64, r: usize) -> [f64; 8] {
    let mut row = [0.0; 8];
    for k in r..8 {
        row[k] = falling(k, r) * t.powi((k - r) as i32);
    }
    row
}

/// Minimum snap energy through the given waypoints found by a dense
/// equality-constrained QP: head/tail up to jerk, waypoint interpolation and
/// C^3 continuity only. Returns (energy, coefficients per dimension).
pub fn dense_min_snap(head: &BoundaryState, tail: &BoundaryState, wps: &[Vec3], ts: &[f64]) -> (f64, Vec<DVector<f64>>) {
    let m = ts.len();
    let nv = 8 * m;
    let mut h = DMatrix::<f64>::zeros(nv, nv);
    for (i, &t) in ts.iter().enumerate() {
        for k in 4..8 {
            for l in 4..8 {
                let p = (k + l - 7) as i32;
                h[(8 * i + k, 8 * i + l)] = 2.0 * falling(k, 4) * falling(l, 4) * t.powi(p) / p as f64;
            }
        }
    }
    let nc = 8 + 5 * (m - 1);
    let mut rows: Vec<(Vec<(usize, f64)>, [f64; 3])> = Vec::with_capacity(nc);
    let hd = [head.pos, head.vel, head.acc, head.jerk];
    let tl = [tail.pos, tail.vel, tail.acc, tail.jerk];
    for r in 0..4 {
        let row = monomial_row(0.0, r);
        rows.push(((0..8).map(|k| (k, row[k])).collect(), [hd[r].x, hd[r].y, hd[r].z]));
        let row = monomial_row(ts[m - 1], r);
        rows.push(((0..8).map(|k| (8 * (m - 1) + k, row[k])).collect(), [tl[r].x, tl[r].y, tl[r].z]));
    }
    for i in 0..m - 1 {
        let end = monomial_row(ts[i], 0);
        let p = wps[i];
        rows.push(((0..8).map(|k| (8 * i + k, end[k])).collect(), [p.x, p.y, p.z]));
        rows.push((vec![(8 * (i + 1), 1.0)], [p.x, p.y, p.z]));
        for r in 1..4 {
            let e = monomial_row(ts[i], r);
            let s = monomial_row(0.0, r);
            let mut entries: Vec<(usize, f64)> = (0..8).map(|k| (8 * i + k, e[k])).collect();
            entries.extend((0..8).map(|k| (8 * (i + 1) + k, -s[k])));
            rows.push((entries, [0.0; 3]));
        }
    }
    let n = nv + nc;
    let mut kkt = DMatrix::<f64>::zeros(n, n);
    kkt.view_mut((0, 0), (nv, nv)).copy_from(&h);
    for (ci, (entries, _)) in rows.iter().enumerate() {
        for &(j, v) in entries {
            kkt[(nv + ci, j)] += v;
            kkt[(j, nv + ci)] += v;
        }
    }
    let lu = kkt.lu();
    let mut energy = 0.0;
    let mut coeffs = Vec::new();
    for d in 0..3 {
        let mut rhs = DVector::zeros(n);
        for (ci, (_, b)) in rows.iter().enumerate() {
            rhs[nv + ci] = b[d];
        }
        let sol = lu.solve(&rhs).expect("KKT system singular");
        let c = sol.rows(0, nv).into_owned();
        energy += 0.5 * (c.transpose() * &h * &c)[(0, 0)];
        coeffs.push(c);
    }
    (energy, coeffs)
}

/// Brute-force signed distance at every voxel center by scanning the
/// opposite set. Saturates at `max`.
pub fn brute_force_esdf(grid: &OccupancyGrid, max: f64) -> Vec<f64> {
    let coords = |i: usize| grid.coords(i);
    let occ: Vec<[usize; 3]> = (0..grid.len()).filter(|&i| grid.occupied[i]).map(coords).collect();
    let free: Vec<[usize; 3]> = (0..grid.len()).filter(|&i| !grid.occupied[i]).map(coords).collect();
    let nearest = |c: [usize; 3], set: &[[usize; 3]]| -> f64 {
        let mut best = i64::MAX;
        for s in set {
            let d: i64 = (0..3).map(|a| (c[a] as i64 - s[a] as i64).pow(2)).sum();
            best = best.min(d);
        }
        if best == i64::MAX {
            f64::INFINITY
        } else {
            (best as f64).sqrt()
        }
    };
    (0..grid.len())
        .map(|i| {
            let c = coords(i);
            let d = if grid.occupied[i] { -nearest(c, &free) } else { nearest(c, &occ) };
            (d * grid.resolution).clamp(-max, max)
        })
        .collect()
}

/// Random boundary states, waypoints and durations for `m` pieces.
pub fn minco_instance(seed: u64, m: usize) -> (BoundaryState, BoundaryState, Vec<Vec3>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rv = |s: f64| Vec3::new(rng.random_range(-s..s), rng.random_range(-s..s), rng.random_range(-s..s));
    let head = BoundaryState { pos: rv(1.0), vel: rv(1.0), acc: rv(1.0), jerk: rv(1.0) };
    let tail = BoundaryState { pos: rv(3.0), vel: rv(1.0), acc: rv(1.0), jerk: rv(1.0) };
    let wps = (0..m - 1).map(|_| rv(2.0)).collect();
    let ts = (0..m).map(|_| rng.random_range(0.4..2.0)).collect();
    (head, tail, wps, ts)
}

/// Relative energy gap between the banded constructor and the dense QP.
pub fn minco_energy_gap(seed: u64, m: usize) -> f64 {
    let (head, tail, wps, ts) = minco_instance(seed, m);
    let poly = construct(head, tail, &wps, &ts).unwrap();
    let (e, _, _) = energy_and_grads(&poly);
    let (e_ref, _) = dense_min_snap(&head, &tail, &wps, &ts);
    (e - e_ref).abs() / e_ref.abs().max(1e-12)
}

/// Worst voxel-center distance error on a random 32^3 grid.
pub fn esdf_worst_error(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut grid = OccupancyGrid::new(Vec3::zeros(), 0.1, [32, 32, 32]).unwrap();
    let density = rng.random_range(0.002..0.03);
    for o in grid.occupied.iter_mut() {
        *o = rng.random_bool(density);
    }
    let map = build_esdf(&grid).unwrap();
    let oracle = brute_force_esdf(&grid, MAX_DISTANCE);
    map.distance.iter().zip(&oracle).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
}

/// Relative error of the full planner objective gradient against central
/// differences on one seeded instance near an obstacle.
pub fn planner_gradient_error(seed: u64) -> f64 {
    let p = SystemParams::default();
    let prims = [Primitive::Box { min: Vec3::new(1.5, -0.5, 0.0), max: Vec3::new(2.0, 0.5, 3.0) }];
    let map = build_esdf(&rasterize(&prims, Vec3::new(-1.0, -2.0, 0.0), Vec3::new(5.0, 2.0, 3.0), 0.1).unwrap()).unwrap();
    let w = PlannerWeights::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = 4;
    let prob = Problem {
        map: &map,
        limits: DynamicLimits { a_max: 3.0, v_max: 2.0, ..Default::default() },
        params: &p,
        head: BoundaryState::rest(Vec3::new(0.0, 0.0, 1.0)),
        tail: BoundaryState::rest(Vec3::new(4.0, 0.3, 1.2)),
        pieces: m,
    };
    let wps: Vec<Vec3> = (1..m)
        .map(|i| Vec3::new(i as f64 + rng.random_range(-0.3..0.3), rng.random_range(-0.5..0.5), 1.0 + rng.random_range(-0.3..0.3)))
        .collect();
    let ts: Vec<f64> = (0..m).map(|_| rng.random_range(0.6..1.2)).collect();
    let x = prob.pack(&wps, &ts);
    let mut g = DVector::zeros(prob.dim());
    let (_, parts) = prob.evaluate(&x, &w, &mut g).unwrap();
    assert!(parts.penalty > 0.0, "seed {seed} exercises no constraint");
    grad_check(|x: &DVector<f64>, g: &mut DVector<f64>| prob.evaluate(x, &w, g).unwrap().0, &x, 1e-6)
}

/// Replays the flatness-derived thrust and body rate open loop through the
/// model for one second and returns the worst quadrotor/payload position
/// deviation from the flat states.
pub fn flat_replay_error(seed: u64) -> f64 {
    let p = SystemParams::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rv = |s: f64| Vec3::new(rng.random_range(-s..s), rng.random_range(-s..s), rng.random_range(-s..s));
    let start = Vec3::new(0.0, 0.0, 1.0);
    let head = BoundaryState { vel: rv(0.5), ..BoundaryState::rest(start) };
    let tail = BoundaryState::rest(start + rv(0.8));
    let poly = construct(head, tail, &[start + rv(0.4)], &[1.5, 1.5]).unwrap();
    let dt = 1e-3;
    let input = |t: f64| {
        let fs = reference_at(&poly, t, &p).unwrap();
        ControlInput::new(fs.thrust, fs.omega)
    };
    let mut s = reference_at(&poly, 0.0, &p).unwrap().state;
    let mut worst = 0.0f64;
    for k in 0..1000 {
        let t = k as f64 * dt;
        let stage_t = [t, t + 0.5 * dt, t + 0.5 * dt, t + dt];
        let mut stage = 0;
        s = rk4_with(&s, dt, &p, |x| {
            let u = input(stage_t[stage]);
            stage += 1;
            derivative(x, &u, &p, &ExternalForces::zero())
        })
        .unwrap();
        let r = reference_at(&poly, t + dt, &p).unwrap().state;
        worst = worst.max((s.x_q - r.x_q).norm()).max((s.x_l - r.x_l).norm());
    }
    worst
}

/// Rate loop on the full truth model with a constant unknown body torque.
/// Returns the rate error at every millisecond.
pub fn rate_loop(bias: Vec3, indi: bool, omega_r: impl Fn(f64) -> Vec3, seconds: f64, log: Option<&mut Vec<InnerRecord>>) -> Vec<Vec3> {
    let p = SystemParams::default();
    let cfg = IndiConfig::default();
    let mut ctrl = IndiController::new(cfg.clone()).unwrap();
    let plain = RateController { k_omega: cfg.k_omega };
    let mut s = SystemState::hover(Vec3::new(0.0, 0.0, 1.0), &p);
    let mut n = Vector4::repeat(p.rotors.hover_speed(p.hover_thrust()));
    let dt = 1e-3;
    let steps = (seconds / dt) as usize;
    let mut errs = Vec::with_capacity(steps);
    let mut records = Vec::new();
    for k in 0..steps {
        let t = k as f64 * dt;
        let (wr, wr_next) = (omega_r(t), omega_r(t + dt));
        let wr_dot = (wr_next - wr) / dt;
        let out = if indi {
            ctrl.update(&s.omega, &n, &wr, &wr_dot, p.hover_thrust(), &p)
        } else {
            plain.update(&s.omega, &n, &wr, &wr_dot, p.hover_thrust(), &p)
        };
        records.push(InnerRecord { stamp: t, omega_r: wr, omega_f: ctrl.state.omega_f, tau_c: out.tau_c, n_c: out.n_c, saturated: out.saturated });
        errs.push(s.omega - wr);
        let st = truth_step(&s, &n, &out.n_c, &bias, &p, &ExternalForces::zero(), dt).unwrap();
        s = st.state;
        n = st.n;
    }
    if let Some(l) = log {
        *l = records;
    }
    errs
}

pub fn tail_rms(errs: &[Vec3], seconds: f64) -> f64 {
    let tail = &errs[errs.len() - (seconds / 1e-3) as usize..];
    (tail.iter().map(|e| e.norm_squared()).sum::<f64>() / tail.len() as f64).sqrt()
}

/// A fixed-direction body torque of the given magnitude (N m).
pub fn torque_bias(mag: f64) -> Vec3 {
    Vec3::new(1.0, -1.0, 0.5).normalize() * mag
}
