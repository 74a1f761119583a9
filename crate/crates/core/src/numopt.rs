//! Unconstrained optimization utilities shared by the planner and the force
//! estimator.

use nalgebra::DVector;

/// Value and gradient of an objective at one point.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveEval {
    pub value: f64,
    pub gradient: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LbfgsOptions {
    /// Number of stored curvature pairs.
    pub memory: usize,
    pub max_iters: usize,
    /// Stop once the gradient infinity norm drops below this.
    pub grad_tol: f64,
    /// Optional relative decrease test against the value `past` iterations
    /// ago. Zero disables it.
    pub rel_tol: f64,
    pub past: usize,
    /// Sufficient decrease (Armijo) constant.
    pub c1: f64,
    /// Curvature constant of the strong Wolfe conditions.
    pub c2: f64,
    pub max_line_search: usize,
}

impl Default for LbfgsOptions {
    fn default() -> Self {
        Self {
            memory: 8,
            max_iters: 500,
            grad_tol: 1e-6,
            rel_tol: 0.0,
            past: 3,
            c1: 1e-4,
            c2: 0.9,
            max_line_search: 40,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LbfgsStatus {
    Converged,
    /// Relative decrease over `past` iterations fell below `rel_tol`.
    Stalled,
    MaxIterations,
    LineSearchFailed,
    /// The objective returned a non-finite value at the starting point.
    NonFinite,
}

#[derive(Debug, Clone)]
pub struct LbfgsResult {
    pub x: DVector<f64>,
    pub value: f64,
    pub gradient_norm: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub status: LbfgsStatus,
    /// Objective value at every accepted iterate, starting with `x0`.
    pub history: Vec<f64>,
}

struct Point {
    alpha: f64,
    value: f64,
    slope: f64,
}

/// Minimizes `objective` from `x0`.
///
/// The objective writes the gradient into its second argument and returns
/// the value. Accepted iterates satisfy the strong Wolfe conditions, so the
/// sequence of accepted values is non-increasing. Line-search failure is
/// reported through [`LbfgsStatus`]; the best iterate is always returned.
pub fn lbfgs_minimize<F>(mut objective: F, x0: &DVector<f64>, opts: &LbfgsOptions) -> LbfgsResult
where
    F: FnMut(&DVector<f64>, &mut DVector<f64>) -> f64,
{
    assert!(0.0 < opts.c1 && opts.c1 < opts.c2 && opts.c2 < 1.0, "invalid Wolfe constants");
    let n = x0.len();
    let mut x = x0.clone();
    let mut g = DVector::zeros(n);
    let mut fx = objective(&x, &mut g);
    let mut evaluations = 1;
    if !fx.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return LbfgsResult {
            x,
            value: fx,
            gradient_norm: f64::INFINITY,
            iterations: 0,
            evaluations,
            status: LbfgsStatus::NonFinite,
            history: vec![fx],
        };
    }

    let m = opts.memory.max(1);
    let mut s_hist: Vec<DVector<f64>> = Vec::with_capacity(m);
    let mut y_hist: Vec<DVector<f64>> = Vec::with_capacity(m);
    let mut rho_hist: Vec<f64> = Vec::with_capacity(m);
    let mut history = vec![fx];
    let mut status = LbfgsStatus::MaxIterations;
    let mut iterations = 0;

    let mut trial_x = DVector::zeros(n);
    let mut trial_g = DVector::zeros(n);

    while iterations < opts.max_iters {
        if g.amax() <= opts.grad_tol {
            status = LbfgsStatus::Converged;
            break;
        }

        // two-loop recursion
        let mut d = -&g;
        let k = s_hist.len();
        let mut alphas = vec![0.0; k];
        for i in (0..k).rev() {
            alphas[i] = rho_hist[i] * s_hist[i].dot(&d);
            d.axpy(-alphas[i], &y_hist[i], 1.0);
        }
        if k > 0 {
            let gamma = s_hist[k - 1].dot(&y_hist[k - 1]) / y_hist[k - 1].norm_squared();
            d *= gamma;
        }
        for i in 0..k {
            let beta = rho_hist[i] * y_hist[i].dot(&d);
            d.axpy(alphas[i] - beta, &s_hist[i], 1.0);
        }
        let mut slope0 = g.dot(&d);
        if !(slope0 < 0.0) {
            // lost descent; restart from steepest descent
            s_hist.clear();
            y_hist.clear();
            rho_hist.clear();
            d = -&g;
            slope0 = -g.norm_squared();
        }

        let first_step = if k == 0 { (1.0 / d.norm()).min(1.0) } else { 1.0 };
        let last = std::cell::Cell::new((f64::NAN, f64::NAN));
        let found = {
            let mut eval = |alpha: f64| -> Point {
                trial_x.copy_from(&x);
                trial_x.axpy(alpha, &d, 1.0);
                let v = objective(&trial_x, &mut trial_g);
                evaluations += 1;
                last.set((alpha, v));
                if v.is_finite() && trial_g.iter().all(|c| c.is_finite()) {
                    Point { alpha, value: v, slope: trial_g.dot(&d) }
                } else {
                    Point { alpha, value: f64::INFINITY, slope: f64::NAN }
                }
            };
            strong_wolfe(fx, slope0, first_step, opts, &mut eval).map(|alpha| {
                let (a, v) = last.get();
                if a == alpha {
                    v
                } else {
                    eval(alpha).value
                }
            })
        };
        let Some(value) = found else {
            status = LbfgsStatus::LineSearchFailed;
            break;
        };
        if !(value <= fx) {
            status = LbfgsStatus::LineSearchFailed;
            break;
        }
        let s = &trial_x - &x;
        let y = &trial_g - &g;
        x.copy_from(&trial_x);
        g.copy_from(&trial_g);
        fx = value;
        iterations += 1;

        let sy = s.dot(&y);
        if sy > 1e-16 * s.norm() * y.norm() && sy > 0.0 {
            if s_hist.len() == m {
                s_hist.remove(0);
                y_hist.remove(0);
                rho_hist.remove(0);
            }
            rho_hist.push(1.0 / sy);
            s_hist.push(s);
            y_hist.push(y);
        }

        history.push(fx);
        if opts.rel_tol > 0.0 && history.len() > opts.past {
            let old = history[history.len() - 1 - opts.past];
            if (old - fx) / fx.abs().max(1.0) < opts.rel_tol {
                status = LbfgsStatus::Stalled;
                break;
            }
        }
    }
    if status == LbfgsStatus::MaxIterations && g.amax() <= opts.grad_tol {
        status = LbfgsStatus::Converged;
    }
    LbfgsResult { gradient_norm: g.amax(), x, value: fx, iterations, evaluations, status, history }
}

/// Minimizer of the cubic through two points with slopes, safeguarded to the
/// interior of `[lo, hi]`.
fn cubic_step(a: &Point, b: &Point) -> f64 {
    let (lo, hi) = if a.alpha < b.alpha { (a.alpha, b.alpha) } else { (b.alpha, a.alpha) };
    let width = hi - lo;
    let mid = 0.5 * (lo + hi);
    if !b.value.is_finite() || !b.slope.is_finite() {
        return mid;
    }
    let d1 = a.slope + b.slope - 3.0 * (a.value - b.value) / (a.alpha - b.alpha);
    let disc = d1 * d1 - a.slope * b.slope;
    if disc < 0.0 {
        return mid;
    }
    let d2 = (b.alpha - a.alpha).signum() * disc.sqrt();
    let t = b.alpha - (b.alpha - a.alpha) * (b.slope + d2 - d1) / (b.slope - a.slope + 2.0 * d2);
    if t.is_finite() {
        t.clamp(lo + 0.1 * width, hi - 0.1 * width)
    } else {
        mid
    }
}

fn strong_wolfe<E>(f0: f64, slope0: f64, first: f64, opts: &LbfgsOptions, mut eval: E) -> Option<f64>
where
    E: FnMut(f64) -> Point,
{
    let armijo = |p: &Point| p.value <= f0 + opts.c1 * p.alpha * slope0;
    let curvature = |p: &Point| p.slope.abs() <= -opts.c2 * slope0;
    let mut prev = Point { alpha: 0.0, value: f0, slope: slope0 };
    let mut alpha = first;
    let mut best: Option<f64> = None;
    let mut best_val = f0;
    let mut budget = opts.max_line_search;

    let mut bracket: Option<(Point, Point)> = None;
    for i in 0..opts.max_line_search {
        budget -= 1;
        let p = eval(alpha);
        if p.value < best_val && armijo(&p) {
            best_val = p.value;
            best = Some(p.alpha);
        }
        if !armijo(&p) || (i > 0 && p.value >= prev.value) {
            bracket = Some((prev, p));
            break;
        }
        if curvature(&p) {
            return Some(p.alpha);
        }
        if p.slope >= 0.0 {
            bracket = Some((p, prev));
            break;
        }
        let next = (alpha * 4.0).min(alpha + 1e6);
        prev = p;
        alpha = next;
    }
    let Some((mut lo, mut hi)) = bracket else {
        return best;
    };
    while budget > 0 {
        budget -= 1;
        let a = cubic_step(&lo, &hi);
        if (hi.alpha - lo.alpha).abs() < 1e-16 * lo.alpha.abs().max(1.0) {
            break;
        }
        let p = eval(a);
        if p.value < best_val && armijo(&p) {
            best_val = p.value;
            best = Some(p.alpha);
        }
        if !armijo(&p) || p.value >= lo.value {
            hi = p;
        } else {
            if curvature(&p) {
                return Some(p.alpha);
            }
            if p.slope * (hi.alpha - lo.alpha) >= 0.0 {
                hi = lo;
            }
            lo = p;
        }
    }
    best
}

/// Smoothed hinge: zero for `x <= 0`, a C2 cubic ramp on `(0, mu]` and the
/// line `x - mu/2` beyond. Returns `(value, derivative)`.
pub fn smooth_l1(x: f64, mu: f64) -> (f64, f64) {
    if x <= 0.0 {
        (0.0, 0.0)
    } else if x <= mu {
        let r = x / mu;
        let r2 = r * r;
        ((mu - 0.5 * x) * r2 * r, r2 * (3.0 - 2.0 * r))
    } else {
        (x - 0.5 * mu, 1.0)
    }
}

/// Huber loss on the Euclidean norm of `r`. Returns the value and the
/// gradient with respect to `r`.
pub fn huber(r: &[f64], delta: f64) -> (f64, Vec<f64>) {
    let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm <= delta {
        (0.5 * norm * norm, r.to_vec())
    } else {
        let s = delta / norm;
        (delta * (norm - 0.5 * delta), r.iter().map(|v| v * s).collect())
    }
}

/// Central-difference gradient check. Returns the largest coordinate error,
/// measured relative to the finite-difference magnitude of that coordinate
/// but never relative to less than a thousandth of the largest one, so
/// coordinates whose gradient is essentially zero are compared on the scale
/// of the whole gradient.
pub fn grad_check<F>(mut objective: F, x: &DVector<f64>, h: f64) -> f64
where
    F: FnMut(&DVector<f64>, &mut DVector<f64>) -> f64,
{
    let n = x.len();
    let mut analytic = DVector::zeros(n);
    objective(x, &mut analytic);
    let mut scratch = DVector::zeros(n);
    let mut xp = x.clone();
    let fd: Vec<f64> = (0..n)
        .map(|i| {
            xp[i] = x[i] + h;
            let fp = objective(&xp, &mut scratch);
            xp[i] = x[i] - h;
            let fm = objective(&xp, &mut scratch);
            xp[i] = x[i];
            (fp - fm) / (2.0 * h)
        })
        .collect();
    let scale = fd.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = (1e-3 * scale).max(1e-12);
    fd.iter()
        .zip(analytic.iter())
        .map(|(f, a)| (f - a).abs() / f.abs().max(floor))
        .fold(0.0, f64::max)
}
