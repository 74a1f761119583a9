//! Kinodynamic A* over constant-acceleration payload primitives.
//!
//! Each primitive applies a constant payload acceleration for a short
//! duration. The cable direction along a primitive follows from that
//! acceleration, so whole-body collision checks use the same bubble model as
//! the optimizer. The heuristic is the optimal boundary-value cost of the
//! double integrator; the same solution is used for the final goal shot.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap, HashSet};

use nalgebra::Matrix4;

use crate::dynamics::SystemParams;
use crate::esdf::EsdfMap;
use crate::flatness::{system_bubbles, BubbleSpec};
use crate::{Error, Result, Vec3};

#[derive(Debug, Clone, PartialEq)]
pub struct SearchConfig {
    pub a_max: f64,
    pub v_max: f64,
    /// Acceleration samples per axis (lattice is their product, projected into the `a_max` ball).
    pub samples_per_axis: usize,
    pub taus: Vec<f64>,
    /// Time weight.
    pub lambda: f64,
    pub goal_tol: f64,
    /// Cell size of the position part of the pruning key (m).
    pub prune_res: f64,
    /// Cell size of the velocity part of the pruning key (m/s).
    pub vel_bin: f64,
    pub check_dt: f64,
    pub max_expansions: usize,
    pub bubbles: BubbleSpec,
    /// Minimum admissible `a_z + g` (m/s^2); keeps the cable taut.
    pub eps_tension: f64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            a_max: 5.0,
            v_max: 3.0,
            samples_per_axis: 3,
            taus: vec![0.2, 0.4],
            lambda: 10.0,
            goal_tol: 0.2,
            prune_res: 0.2,
            vel_bin: 0.5,
            check_dt: 0.05,
            max_expansions: 20_000,
            bubbles: BubbleSpec::default(),
            eps_tension: 0.1,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.a_max, self.v_max, self.lambda, self.goal_tol, self.prune_res, self.vel_bin, self.check_dt];
        if positive.iter().any(|v| !(*v > 0.0)) || self.taus.iter().any(|t| !(*t > 0.0)) || self.taus.is_empty() {
            return Err(Error::InvalidParameter("search config values must be positive".into()));
        }
        if self.samples_per_axis < 2 {
            return Err(Error::InvalidParameter("need at least 2 acceleration samples per axis".into()));
        }
        Ok(())
    }

    /// Acceleration lattice: per-axis grid projected onto the `a_max` ball,
    /// without duplicates and without inputs that would slacken the cable.
    pub fn lattice(&self, gravity: f64) -> Vec<Vec3> {
        let n = self.samples_per_axis;
        let axis: Vec<f64> = (0..n).map(|i| -self.a_max + 2.0 * self.a_max * i as f64 / (n - 1) as f64).collect();
        let mut out: Vec<Vec3> = Vec::new();
        for &x in &axis {
            for &y in &axis {
                for &z in &axis {
                    let mut u = Vec3::new(x, y, z);
                    let norm = u.norm();
                    if norm > self.a_max {
                        u *= self.a_max / norm;
                    }
                    if u.z + gravity < self.eps_tension {
                        continue;
                    }
                    if !out.iter().any(|w| (w - u).norm() < 1e-12) {
                        out.push(u);
                    }
                }
            }
        }
        out
    }
}

/// One search node: the state reached after applying `u` for `tau`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KinoNode {
    pub pos: Vec3,
    pub vel: Vec3,
    pub g_cost: f64,
    pub f_cost: f64,
    pub parent: Option<usize>,
    pub u: Vec3,
    pub tau: f64,
}

/// Cubic connection between two double-integrator states.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObvpShot {
    pub p0: Vec3,
    pub v0: Vec3,
    pub a0: Vec3,
    pub jerk: Vec3,
    pub duration: f64,
    pub cost: f64,
}

impl ObvpShot {
    /// Minimum-effort cubic from `(p0, v0)` to `(p1, v1)` in time `t`.
    pub fn new(p0: Vec3, v0: Vec3, p1: Vec3, v1: Vec3, t: f64, lambda: f64) -> Self {
        // [t^2/2, t^3/6; t, t^2/2] [a0; j] = [dp - v0 t; v1 - v0]
        let r1 = p1 - p0 - v0 * t;
        let r2 = v1 - v0;
        let det = t * t * t * t / 4.0 - t * t * t * t / 6.0;
        let a0 = (r1 * (t * t / 2.0) - r2 * (t * t * t / 6.0)) / det;
        let jerk = (r2 * (t * t / 2.0) - r1 * t) / det;
        let cost = obvp_cost(&(p1 - p0), &v0, &v1, t, lambda);
        Self { p0, v0, a0, jerk, duration: t, cost }
    }

    pub fn state(&self, t: f64) -> (Vec3, Vec3, Vec3) {
        let p = self.p0 + self.v0 * t + self.a0 * (t * t / 2.0) + self.jerk * (t * t * t / 6.0);
        let v = self.v0 + self.a0 * t + self.jerk * (t * t / 2.0);
        let a = self.a0 + self.jerk * t;
        (p, v, a)
    }
}

/// `int ||u||^2 dt + lambda T` for the optimal cubic over a fixed duration.
pub fn obvp_cost(dp: &Vec3, v0: &Vec3, v1: &Vec3, t: f64, lambda: f64) -> f64 {
    12.0 * dp.norm_squared() / (t * t * t) - 12.0 * dp.dot(&(v0 + v1)) / (t * t)
        + 4.0 * (v0.norm_squared() + v0.dot(v1) + v1.norm_squared()) / t
        + lambda * t
}

/// Optimal arrival time and cost between two double-integrator states.
pub fn obvp(p0: &Vec3, v0: &Vec3, p1: &Vec3, v1: &Vec3, lambda: f64) -> (f64, f64) {
    let dp = p1 - p0;
    let alpha = 12.0 * dp.norm_squared();
    let beta = -12.0 * dp.dot(&(v0 + v1));
    let gamma = 4.0 * (v0.norm_squared() + v0.dot(v1) + v1.norm_squared());
    if alpha.abs() < 1e-14 && beta.abs() < 1e-14 && gamma.abs() < 1e-14 {
        return (0.0, 0.0);
    }
    // d cost / dT = 0  <=>  lambda T^4 - gamma T^2 - 2 beta T - 3 alpha = 0
    let mut comp = Matrix4::zeros();
    comp[(1, 0)] = 1.0;
    comp[(2, 1)] = 1.0;
    comp[(3, 2)] = 1.0;
    comp[(0, 3)] = 3.0 * alpha / lambda;
    comp[(1, 3)] = 2.0 * beta / lambda;
    comp[(2, 3)] = gamma / lambda;
    let cost = |t: f64| obvp_cost(&dp, v0, v1, t, lambda);
    let mut best = (f64::INFINITY, 0.0);
    for root in comp.complex_eigenvalues().iter() {
        if root.re <= 0.0 || root.im.abs() > 1e-6 * root.re.max(1.0) {
            continue;
        }
        let mut t = root.re;
        for _ in 0..3 {
            let f = lambda * t.powi(4) - gamma * t * t - 2.0 * beta * t - 3.0 * alpha;
            let df = 4.0 * lambda * t.powi(3) - 2.0 * gamma * t - 2.0 * beta;
            if df.abs() < 1e-300 {
                break;
            }
            let next = t - f / df;
            if next > 0.0 {
                t = next;
            }
        }
        let c = cost(t);
        if c < best.0 {
            best = (c, t);
        }
    }
    best
}

/// Cost-to-go estimate: optimal connection to the goal at rest.
pub fn heuristic(pos: &Vec3, vel: &Vec3, goal: &Vec3, lambda: f64) -> f64 {
    obvp(pos, vel, goal, &Vec3::zeros(), lambda).0
}

/// `||u||^2 tau + lambda tau` for a constant-input primitive.
pub fn primitive_cost(u: &Vec3, tau: f64, lambda: f64) -> f64 {
    (u.norm_squared() + lambda) * tau
}

/// Whether every bubble for payload position `x_l` and acceleration `a_l`
/// keeps at least `radius - shrink` from obstacles and stays inside the map.
pub fn bubbles_clear(map: &EsdfMap, x_l: &Vec3, a_l: &Vec3, params: &SystemParams, spec: &BubbleSpec, shrink: f64) -> bool {
    let Ok(bubbles) = system_bubbles(x_l, a_l, params, spec) else {
        return false;
    };
    let lo = map.grid.origin;
    let hi = map.grid.extent_max();
    bubbles.iter().all(|b| {
        let r = b.radius - shrink;
        let inside = (0..3).all(|a| b.center[a] - r >= lo[a] && b.center[a] + r <= hi[a]);
        inside && map.distance_at(&b.center) >= r
    })
}

/// Result of a successful search.
#[derive(Debug, Clone)]
pub struct KinoPath {
    /// Nodes from the start (`tau = 0`) to the last primitive.
    pub nodes: Vec<KinoNode>,
    /// Final analytic connection to the goal, if the search ended with one.
    pub shot: Option<ObvpShot>,
    pub explored: usize,
    /// Accumulated primitive cost plus the shot cost.
    pub cost: f64,
}

impl KinoPath {
    pub fn duration(&self) -> f64 {
        self.nodes.iter().map(|n| n.tau).sum::<f64>() + self.shot.map_or(0.0, |s| s.duration)
    }

    /// Payload position, velocity and acceleration at time `t` along the path.
    pub fn state_at(&self, t: f64) -> (Vec3, Vec3, Vec3) {
        let mut rem = t.max(0.0);
        for w in self.nodes.windows(2) {
            let (from, to) = (&w[0], &w[1]);
            if rem <= to.tau {
                let p = from.pos + from.vel * rem + to.u * (rem * rem / 2.0);
                return (p, from.vel + to.u * rem, to.u);
            }
            rem -= to.tau;
        }
        let last = self.nodes.last().expect("path has a start node");
        match &self.shot {
            Some(shot) => shot.state(rem.min(shot.duration)),
            None => (last.pos, last.vel, Vec3::zeros()),
        }
    }

    pub fn length(&self, dt: f64) -> f64 {
        let total = self.duration();
        let n = (total / dt).ceil().max(1.0) as usize;
        let mut prev = self.state_at(0.0).0;
        let mut len = 0.0;
        for i in 1..=n {
            let p = self.state_at(total * i as f64 / n as f64).0;
            len += (p - prev).norm();
            prev = p;
        }
        len
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct OpenItem {
    f: f64,
    seq: u64,
    idx: usize,
}

impl Eq for OpenItem {}

impl Ord for OpenItem {
    fn cmp(&self, other: &Self) -> Ordering {
        // Min-heap on f, FIFO on ties.
        other.f.total_cmp(&self.f).then_with(|| other.seq.cmp(&self.seq))
    }
}

impl PartialOrd for OpenItem {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

type Key = [i64; 6];

fn key_of(pos: &Vec3, vel: &Vec3, cfg: &SearchConfig) -> Key {
    let c = |v: f64, s: f64| (v / s).floor() as i64;
    [
        c(pos.x, cfg.prune_res),
        c(pos.y, cfg.prune_res),
        c(pos.z, cfg.prune_res),
        c(vel.x, cfg.vel_bin),
        c(vel.y, cfg.vel_bin),
        c(vel.z, cfg.vel_bin),
    ]
}

fn sample_times(duration: f64, dt: f64) -> impl Iterator<Item = f64> {
    let n = (duration / dt).ceil().max(1.0) as usize;
    (1..=n).map(move |i| duration * i as f64 / n as f64)
}

/// Searches from `(start, start_vel)` to `goal` (at rest).
const SHOT_STRETCH: [f64; 4] = [1.0, 1.3, 1.7, 2.2];

pub fn search(
    map: &EsdfMap,
    start: &Vec3,
    start_vel: &Vec3,
    goal: &Vec3,
    cfg: &SearchConfig,
    params: &SystemParams,
) -> Result<KinoPath> {
    cfg.validate()?;
    let hover = Vec3::zeros();
    if !bubbles_clear(map, start, &hover, params, &cfg.bubbles, 0.0) {
        return Err(Error::Infeasible("start configuration is in collision".into()));
    }
    if !bubbles_clear(map, goal, &hover, params, &cfg.bubbles, 0.0) {
        return Err(Error::Infeasible("goal configuration is in collision".into()));
    }
    let lattice = cfg.lattice(params.gravity);
    let g = params.gravity;
    let h0 = heuristic(start, start_vel, goal, cfg.lambda);
    let mut nodes = vec![KinoNode { pos: *start, vel: *start_vel, g_cost: 0.0, f_cost: h0, parent: None, u: Vec3::zeros(), tau: 0.0 }];
    let mut keys = vec![key_of(start, start_vel, cfg)];
    let mut best_g: HashMap<Key, f64> = HashMap::new();
    best_g.insert(keys[0], 0.0);
    let mut closed: HashSet<Key> = HashSet::new();
    let mut open = BinaryHeap::new();
    let mut seq = 0u64;
    open.push(OpenItem { f: h0, seq, idx: 0 });
    let mut explored = 0usize;

    let shot_ok = |shot: &ObvpShot| {
        sample_times(shot.duration, cfg.check_dt).chain(std::iter::once(0.0)).all(|t| {
            let (p, v, a) = shot.state(t);
            v.norm() <= cfg.v_max * (1.0 + 1e-9)
                && a.norm() <= cfg.a_max * (1.0 + 1e-9)
                && a.z + g >= cfg.eps_tension
                && bubbles_clear(map, &p, &a, params, &cfg.bubbles, 0.0)
        })
    };

    while let Some(item) = open.pop() {
        let idx = item.idx;
        let key = keys[idx];
        if closed.contains(&key) || nodes[idx].g_cost > best_g[&key] {
            continue;
        }
        closed.insert(key);
        explored += 1;
        if explored > cfg.max_expansions {
            break;
        }
        let node = nodes[idx];

        let (_, t_goal) = obvp(&node.pos, &node.vel, goal, &Vec3::zeros(), cfg.lambda);
        let close = (node.pos - goal).norm() <= cfg.goal_tol;
        if t_goal > 0.0 {
            // The cost-optimal duration can be too aggressive; slower shots stay valid.
            for scale in SHOT_STRETCH {
                let shot = ObvpShot::new(node.pos, node.vel, *goal, Vec3::zeros(), t_goal * scale, cfg.lambda);
                if shot_ok(&shot) {
                    return Ok(finish(&nodes, idx, Some(shot), explored));
                }
            }
        } else if close {
            return Ok(finish(&nodes, idx, None, explored));
        }

        for u in &lattice {
            for &tau in &cfg.taus {
                let vel = node.vel + u * tau;
                if vel.norm() > cfg.v_max {
                    continue;
                }
                let pos = node.pos + node.vel * tau + u * (tau * tau / 2.0);
                let ckey = key_of(&pos, &vel, cfg);
                if ckey == key || closed.contains(&ckey) {
                    continue;
                }
                let g_cost = node.g_cost + primitive_cost(u, tau, cfg.lambda);
                if best_g.get(&ckey).is_some_and(|&b| b <= g_cost) {
                    continue;
                }
                let free = sample_times(tau, cfg.check_dt).all(|s| {
                    let p = node.pos + node.vel * s + u * (s * s / 2.0);
                    bubbles_clear(map, &p, u, params, &cfg.bubbles, 0.0)
                });
                if !free {
                    continue;
                }
                let f_cost = g_cost + heuristic(&pos, &vel, goal, cfg.lambda);
                nodes.push(KinoNode { pos, vel, g_cost, f_cost, parent: Some(idx), u: *u, tau });
                keys.push(ckey);
                best_g.insert(ckey, g_cost);
                seq += 1;
                open.push(OpenItem { f: f_cost, seq, idx: nodes.len() - 1 });
            }
        }
    }
    Err(Error::NoPath { explored })
}

fn finish(nodes: &[KinoNode], last: usize, shot: Option<ObvpShot>, explored: usize) -> KinoPath {
    let mut chain = vec![nodes[last]];
    let mut cur = nodes[last].parent;
    while let Some(i) = cur {
        chain.push(nodes[i]);
        cur = nodes[i].parent;
    }
    chain.reverse();
    let cost = nodes[last].g_cost + shot.map_or(0.0, |s| s.cost);
    KinoPath { nodes: chain, shot, explored, cost }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::esdf::{build_esdf, rasterize, Primitive};

    fn empty_map() -> EsdfMap {
        let grid = rasterize(&[], Vec3::new(-2.0, -2.0, 0.0), Vec3::new(8.0, 2.0, 3.0), 0.1).unwrap();
        build_esdf(&grid).unwrap()
    }

    #[test]
    fn primitive_cost_examples() {
        assert_eq!(primitive_cost(&Vec3::new(1.0, 0.0, 0.0), 2.0, 10.0), 22.0);
        assert_eq!(primitive_cost(&Vec3::zeros(), 0.4, 10.0), 4.0);
        let u = Vec3::new(0.3, -0.2, 0.5);
        let c1 = primitive_cost(&u, 0.4, 0.0);
        let c2 = primitive_cost(&(2.0 * u), 0.4, 0.0);
        assert!((c2 - 4.0 * c1).abs() < 1e-15);
    }

    #[test]
    fn heuristic_matches_grid_search() {
        assert_eq!(heuristic(&Vec3::new(1.0, 2.0, 3.0), &Vec3::zeros(), &Vec3::new(1.0, 2.0, 3.0), 10.0), 0.0);
        for (d, lambda) in [(5.0, 10.0), (0.3, 1.0), (12.0, 100.0)] {
            let dp = Vec3::new(d, 0.0, 0.0);
            let h = heuristic(&Vec3::zeros(), &Vec3::zeros(), &dp, lambda);
            // Grid search followed by golden-section refinement.
            let mut best = (f64::INFINITY, 0.0);
            for i in 1..20000 {
                let t = i as f64 * 1e-3;
                let c = obvp_cost(&dp, &Vec3::zeros(), &Vec3::zeros(), t, lambda);
                if c < best.0 {
                    best = (c, t);
                }
            }
            let (mut a, mut b) = (best.1 - 1e-3, best.1 + 1e-3);
            let phi = (5f64.sqrt() - 1.0) / 2.0;
            for _ in 0..100 {
                let c = b - phi * (b - a);
                let e = a + phi * (b - a);
                let f = |t| obvp_cost(&dp, &Vec3::zeros(), &Vec3::zeros(), t, lambda);
                if f(c) < f(e) {
                    b = e;
                } else {
                    a = c;
                }
            }
            let reference = obvp_cost(&dp, &Vec3::zeros(), &Vec3::zeros(), 0.5 * (a + b), lambda);
            assert!((h - reference).abs() < 1e-6, "{h} vs {reference}");
        }
    }

    #[test]
    fn shot_meets_boundary_conditions() {
        let p0 = Vec3::new(0.0, 1.0, 2.0);
        let v0 = Vec3::new(1.0, -0.5, 0.2);
        let p1 = Vec3::new(3.0, 0.0, 1.0);
        let shot = ObvpShot::new(p0, v0, p1, Vec3::zeros(), 2.5, 10.0);
        let (p, v, _) = shot.state(2.5);
        assert!((p - p1).norm() < 1e-12 && v.norm() < 1e-12);
        // Integrated effort plus time matches the closed form.
        let n = 2000;
        let h = 2.5 / n as f64;
        let effort: f64 = (0..n).map(|i| shot.state((i as f64 + 0.5) * h).2.norm_squared() * h).sum();
        assert!((effort + 25.0 - shot.cost).abs() < 1e-5);
    }

    #[test]
    fn lattice_lies_in_ball() {
        let cfg = SearchConfig { samples_per_axis: 5, ..Default::default() };
        let lat = cfg.lattice(9.81);
        assert!(lat.iter().all(|u| u.norm() <= cfg.a_max + 1e-12));
        assert!(lat.len() > 27);
    }

    #[test]
    fn straight_line_in_empty_map() {
        let map = empty_map();
        let p = SystemParams::default();
        let cfg = SearchConfig::default();
        let start = Vec3::new(0.0, 0.0, 1.0);
        let goal = Vec3::new(5.0, 0.0, 1.0);
        let path = search(&map, &start, &Vec3::zeros(), &goal, &cfg, &p).unwrap();
        let (end, v, _) = path.state_at(path.duration());
        assert!((end - goal).norm() < 1e-9 && v.norm() < 1e-9);
        let optimal = heuristic(&start, &Vec3::zeros(), &goal, cfg.lambda);
        assert!(path.cost >= optimal - 1e-9);
        assert!(path.cost <= 1.1 * optimal, "{} vs {optimal}", path.cost);
    }

    #[test]
    fn enclosed_start_fails() {
        let shell = [
            Primitive::Box { min: Vec3::new(-1.0, -1.0, 0.0), max: Vec3::new(1.0, 1.0, 0.2) },
            Primitive::Box { min: Vec3::new(-1.0, -1.0, 2.3), max: Vec3::new(1.0, 1.0, 2.5) },
            Primitive::Box { min: Vec3::new(-1.0, -1.0, 0.0), max: Vec3::new(-0.8, 1.0, 2.5) },
            Primitive::Box { min: Vec3::new(0.8, -1.0, 0.0), max: Vec3::new(1.0, 1.0, 2.5) },
            Primitive::Box { min: Vec3::new(-1.0, -1.0, 0.0), max: Vec3::new(1.0, -0.8, 2.5) },
            Primitive::Box { min: Vec3::new(-1.0, 0.8, 0.0), max: Vec3::new(1.0, 1.0, 2.5) },
        ];
        let grid = rasterize(&shell, Vec3::new(-3.0, -3.0, 0.0), Vec3::new(3.0, 3.0, 3.0), 0.1).unwrap();
        let map = build_esdf(&grid).unwrap();
        let err = search(&map, &Vec3::new(0.0, 0.0, 0.9), &Vec3::zeros(), &Vec3::new(2.5, 2.5, 1.0), &SearchConfig::default(), &SystemParams::default());
        assert!(matches!(err, Err(Error::NoPath { explored }) if explored > 0), "{err:?}");
    }

    #[test]
    fn goal_in_obstacle_is_rejected() {
        let grid = rasterize(
            &[Primitive::Box { min: Vec3::new(3.0, -1.0, 0.0), max: Vec3::new(4.0, 1.0, 3.0) }],
            Vec3::new(-2.0, -2.0, 0.0),
            Vec3::new(8.0, 2.0, 3.0),
            0.1,
        )
        .unwrap();
        let map = build_esdf(&grid).unwrap();
        let r = search(&map, &Vec3::new(0.0, 0.0, 1.0), &Vec3::zeros(), &Vec3::new(3.5, 0.0, 1.0), &SearchConfig::default(), &SystemParams::default());
        assert!(matches!(r, Err(Error::Infeasible(_))));
    }
}
