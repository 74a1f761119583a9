//! Minimum-snap (s = 4) piecewise polynomials in MINCO form.
//!
//! A trajectory of `M` degree-7 pieces is fully determined by the fixed head
//! and tail states (position through jerk), the `M - 1` intermediate
//! waypoints and the piece durations. The coefficients come from one banded
//! linear system of size `8M`; gradients with respect to waypoints and
//! durations come from an adjoint solve with the same factorization.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::SMatrix;
use serde::{Deserialize, Serialize};

use crate::{Error, Result, Vec3};

/// Coefficients of one piece: row `k` multiplies `t^k`, columns are x, y, z.
pub type Coeffs = SMatrix<f64, 8, 3>;

/// Position, velocity, acceleration and jerk at a trajectory end.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundaryState {
    pub pos: Vec3,
    pub vel: Vec3,
    pub acc: Vec3,
    pub jerk: Vec3,
}

impl BoundaryState {
    pub fn rest(pos: Vec3) -> Self {
        Self { pos, vel: Vec3::zeros(), acc: Vec3::zeros(), jerk: Vec3::zeros() }
    }

    pub fn deriv(&self, order: usize) -> Vec3 {
        match order {
            0 => self.pos,
            1 => self.vel,
            2 => self.acc,
            _ => self.jerk,
        }
    }
}

/// `d^r/dt^r [1, t, ..., t^7]`.
pub fn basis(t: f64, r: usize) -> [f64; 8] {
    let mut b = [0.0; 8];
    if r > 7 {
        return b;
    }
    let mut pw = 1.0;
    for k in r..8 {
        let fall: f64 = ((k - r + 1)..=k).map(|v| v as f64).product();
        b[k] = fall * pw;
        pw *= t;
    }
    b
}

/// Piecewise degree-7 polynomial in three dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct PiecewisePoly {
    pub coeffs: Vec<Coeffs>,
    pub durations: Vec<f64>,
}

impl PiecewisePoly {
    pub fn new(coeffs: Vec<Coeffs>, durations: Vec<f64>) -> Result<Self> {
        if coeffs.is_empty() || coeffs.len() != durations.len() {
            return Err(Error::InvalidParameter("piece count mismatch or empty".into()));
        }
        if durations.iter().any(|&t| !(t > 0.0 && t.is_finite())) {
            return Err(Error::InvalidParameter("durations must be positive".into()));
        }
        Ok(Self { coeffs, durations })
    }

    pub fn piece_count(&self) -> usize {
        self.durations.len()
    }

    pub fn total_duration(&self) -> f64 {
        self.durations.iter().sum()
    }

    /// Piece index and local time for a global time, clamped to the domain.
    pub fn locate(&self, t: f64) -> (usize, f64) {
        let mut rem = t.max(0.0);
        let last = self.durations.len() - 1;
        for (i, &d) in self.durations.iter().enumerate() {
            if rem < d || i == last {
                return (i, rem.min(d));
            }
            rem -= d;
        }
        unreachable!()
    }

    /// Derivative of the given order inside piece `i` at local time `tau`.
    pub fn eval_piece(&self, i: usize, tau: f64, order: usize) -> Vec3 {
        let c = &self.coeffs[i];
        let mut out = Vec3::zeros();
        if order > 7 {
            return out;
        }
        // Horner on the differentiated coefficients.
        for k in (order..8).rev() {
            let fall: f64 = ((k - order + 1)..=k).map(|v| v as f64).product();
            out = out * tau + fall * c.row(k).transpose();
        }
        out
    }

    /// Derivative of the given order at global time `t`; out-of-domain times
    /// are clamped and flagged.
    pub fn evaluate_checked(&self, t: f64, order: usize) -> (Vec3, bool) {
        let clamped = !(0.0..=self.total_duration()).contains(&t);
        let (i, tau) = self.locate(t);
        (self.eval_piece(i, tau, order), clamped)
    }

    pub fn evaluate(&self, t: f64, order: usize) -> Vec3 {
        self.evaluate_checked(t, order).0
    }

    /// Derivatives 0..=5 at `t`.
    pub fn derivs(&self, t: f64) -> [Vec3; 6] {
        let (i, tau) = self.locate(t);
        [0, 1, 2, 3, 4, 5].map(|o| self.eval_piece(i, tau, o))
    }

    /// Positions at the junctions between pieces.
    pub fn waypoints(&self) -> Vec<Vec3> {
        (0..self.piece_count() - 1).map(|i| self.eval_piece(i, self.durations[i], 0)).collect()
    }

    pub fn start_state(&self) -> BoundaryState {
        let d = |o| self.eval_piece(0, 0.0, o);
        BoundaryState { pos: d(0), vel: d(1), acc: d(2), jerk: d(3) }
    }

    pub fn end_state(&self) -> BoundaryState {
        let i = self.piece_count() - 1;
        let t = self.durations[i];
        let d = |o| self.eval_piece(i, t, o);
        BoundaryState { pos: d(0), vel: d(1), acc: d(2), jerk: d(3) }
    }

    /// Approximate arc length by dense sampling.
    pub fn length(&self, dt: f64) -> f64 {
        let total = self.total_duration();
        let n = (total / dt).ceil().max(1.0) as usize;
        let mut prev = self.evaluate(0.0, 0);
        let mut len = 0.0;
        for s in 1..=n {
            let p = self.evaluate(total * s as f64 / n as f64, 0);
            len += (p - prev).norm();
            prev = p;
        }
        len
    }

    /// Text rows `piece duration cx0..cx7 cy0..cy7 cz0..cz7`.
    pub fn to_text(&self) -> String {
        let mut s = String::from("# piece duration cx0..cx7 cy0..cy7 cz0..cz7\n");
        for (i, (c, t)) in self.coeffs.iter().zip(&self.durations).enumerate() {
            let _ = write!(s, "{i} {t}");
            for d in 0..3 {
                for k in 0..8 {
                    let _ = write!(s, " {}", c[(k, d)]);
                }
            }
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut coeffs = Vec::new();
        let mut durations = Vec::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let vals: Vec<f64> = line
                .split_whitespace()
                .map(|v| v.parse::<f64>().map_err(|e| Error::Parse(format!("trajectory value '{v}': {e}"))))
                .collect::<Result<_>>()?;
            if vals.len() != 26 {
                return Err(Error::Parse(format!("trajectory row has {} fields, expected 26", vals.len())));
            }
            if vals[0] as usize != coeffs.len() {
                return Err(Error::Parse(format!("piece index {} out of order", vals[0])));
            }
            durations.push(vals[1]);
            coeffs.push(Coeffs::from_fn(|k, d| vals[2 + 8 * d + k]));
        }
        Self::new(coeffs, durations)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

/// Banded LU with partial pivoting. Row `i` stores columns
/// `i - kl ..= i + kl + ku`, leaving room for pivoting fill-in.
#[derive(Debug, Clone)]
struct BandLu {
    n: usize,
    kl: usize,
    ku: usize,
    width: usize,
    data: Vec<f64>,
    piv: Vec<usize>,
}

impl BandLu {
    fn zeros(n: usize, kl: usize, ku: usize) -> Self {
        let width = 2 * kl + ku + 1;
        Self { n, kl, ku, width, data: vec![0.0; n * width], piv: (0..n).collect() }
    }

    fn slot(&self, i: usize, j: usize) -> usize {
        debug_assert!(j + self.kl >= i && j <= i + self.kl + self.ku);
        i * self.width + (j + self.kl - i)
    }

    fn get(&self, i: usize, j: usize) -> f64 {
        self.data[self.slot(i, j)]
    }

    fn set(&mut self, i: usize, j: usize, v: f64) {
        let s = self.slot(i, j);
        self.data[s] = v;
    }

    fn factor(&mut self) -> Result<()> {
        let (n, kl, ku) = (self.n, self.kl, self.ku);
        let scale = self.data.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
        for k in 0..n {
            let last_row = (k + kl).min(n - 1);
            let last_col = (k + kl + ku).min(n - 1);
            let mut p = k;
            let mut best = self.get(k, k).abs();
            for i in k + 1..=last_row {
                let v = self.get(i, k).abs();
                if v > best {
                    best = v;
                    p = i;
                }
            }
            if !(best > 1e-14 * scale) {
                return Err(Error::Singular(format!("zero pivot at column {k}")));
            }
            self.piv[k] = p;
            if p != k {
                for j in k..=last_col {
                    let (a, b) = (self.get(k, j), self.get(p, j));
                    self.set(k, j, b);
                    self.set(p, j, a);
                }
            }
            let pivot = self.get(k, k);
            for i in k + 1..=last_row {
                let l = self.get(i, k) / pivot;
                self.set(i, k, l);
                if l != 0.0 {
                    for j in k + 1..=last_col {
                        let v = self.get(i, j) - l * self.get(k, j);
                        self.set(i, j, v);
                    }
                }
            }
        }
        Ok(())
    }

    /// Solves `A x = b` in place for each column of `b` (row-major `n x 3`).
    fn solve(&self, b: &mut [Vec3]) {
        let (n, kl, ku) = (self.n, self.kl, self.ku);
        for k in 0..n {
            b.swap(k, self.piv[k]);
            let bk = b[k];
            for i in k + 1..=(k + kl).min(n - 1) {
                let l = self.get(i, k);
                b[i] -= l * bk;
            }
        }
        for k in (0..n).rev() {
            let mut acc = b[k];
            for j in k + 1..=(k + kl + ku).min(n - 1) {
                acc -= self.get(k, j) * b[j];
            }
            b[k] = acc / self.get(k, k);
        }
    }

    /// Solves `A^T x = b` in place.
    fn solve_transpose(&self, b: &mut [Vec3]) {
        let (n, kl, ku) = (self.n, self.kl, self.ku);
        for k in 0..n {
            let mut acc = b[k];
            for j in k.saturating_sub(kl + ku)..k {
                acc -= self.get(j, k) * b[j];
            }
            b[k] = acc / self.get(k, k);
        }
        for k in (0..n).rev() {
            let mut acc = b[k];
            for i in k + 1..=(k + kl).min(n - 1) {
                acc -= self.get(i, k) * b[i];
            }
            b[k] = acc;
            b.swap(k, self.piv[k]);
        }
    }
}

/// Constructed trajectory plus the factorization needed for gradients.
#[derive(Debug, Clone)]
pub struct Minco {
    pub head: BoundaryState,
    pub tail: BoundaryState,
    pub waypoints: Vec<Vec3>,
    pub poly: PiecewisePoly,
    lu: BandLu,
}

fn check_inputs(waypoints: &[Vec3], durations: &[f64]) -> Result<()> {
    if durations.is_empty() {
        return Err(Error::InvalidParameter("at least one piece required".into()));
    }
    if waypoints.len() + 1 != durations.len() {
        return Err(Error::InvalidParameter(format!(
            "{} waypoints for {} pieces",
            waypoints.len(),
            durations.len()
        )));
    }
    if durations.iter().any(|&t| !(t > 0.0 && t.is_finite())) {
        return Err(Error::Singular("non-positive duration".into()));
    }
    if waypoints.iter().any(|p| !p.iter().all(|v| v.is_finite())) {
        return Err(Error::NonFinite("waypoints"));
    }
    Ok(())
}

impl Minco {
    /// Builds the minimum-snap spline through `waypoints` with the given
    /// piece durations.
    pub fn construct(head: BoundaryState, tail: BoundaryState, waypoints: &[Vec3], durations: &[f64]) -> Result<Self> {
        check_inputs(waypoints, durations)?;
        let m = durations.len();
        let n = 8 * m;
        let mut a = BandLu::zeros(n, 11, 11);
        let mut b = vec![Vec3::zeros(); n];
        for r in 0..4 {
            let row = basis(0.0, r);
            for (k, v) in row.iter().enumerate() {
                if *v != 0.0 {
                    a.set(r, k, *v);
                }
            }
            b[r] = head.deriv(r);
        }
        for i in 0..m - 1 {
            let base = 4 + 8 * i;
            let (ci, cn) = (8 * i, 8 * (i + 1));
            for r in 0..7 {
                let end = basis(durations[i], r);
                for k in 0..8 {
                    a.set(base + r, ci + k, end[k]);
                }
                if r > 0 {
                    let start = basis(0.0, r);
                    for k in 0..8 {
                        if start[k] != 0.0 {
                            a.set(base + r, cn + k, -start[k]);
                        }
                    }
                }
            }
            a.set(base + 7, cn, 1.0);
            b[base] = waypoints[i];
            b[base + 7] = waypoints[i];
        }
        let last = 8 * (m - 1);
        for r in 0..4 {
            let end = basis(durations[m - 1], r);
            for k in 0..8 {
                a.set(n - 4 + r, last + k, end[k]);
            }
            b[n - 4 + r] = tail.deriv(r);
        }
        a.factor()?;
        a.solve(&mut b);
        let coeffs = (0..m).map(|i| Coeffs::from_fn(|k, d| b[8 * i + k][d])).collect();
        Ok(Self {
            head,
            tail,
            waypoints: waypoints.to_vec(),
            poly: PiecewisePoly { coeffs, durations: durations.to_vec() },
            lu: a,
        })
    }

    /// Chain rule through the constructor: returns total gradients with
    /// respect to waypoints and durations given `dL/dc` and the direct
    /// `dL/dT`.
    pub fn propagate_gradients(&self, grad_c: &[Coeffs], grad_t_direct: &[f64]) -> (Vec<Vec3>, Vec<f64>) {
        let m = self.poly.piece_count();
        assert_eq!(grad_c.len(), m);
        assert_eq!(grad_t_direct.len(), m);
        let n = 8 * m;
        let mut lam: Vec<Vec3> = (0..n).map(|r| grad_c[r / 8].row(r % 8).transpose()).collect();
        self.lu.solve_transpose(&mut lam);

        let grad_p = (0..m - 1).map(|i| lam[4 + 8 * i] + lam[4 + 8 * i + 7]).collect();
        let mut grad_t = grad_t_direct.to_vec();
        for (i, gt) in grad_t.iter_mut().enumerate() {
            let t = self.poly.durations[i];
            let c = &self.poly.coeffs[i];
            let (first, rows) = if i + 1 < m { (4 + 8 * i, 7) } else { (n - 4, 4) };
            for r in 0..rows {
                let db = basis(t, r + 1);
                let mut v = Vec3::zeros();
                for k in 0..8 {
                    v += db[k] * c.row(k).transpose();
                }
                *gt -= lam[first + r].dot(&v);
            }
        }
        (grad_p, grad_t)
    }
}

/// Builds the spline without keeping the factorization.
pub fn construct(head: BoundaryState, tail: BoundaryState, waypoints: &[Vec3], durations: &[f64]) -> Result<PiecewisePoly> {
    Ok(Minco::construct(head, tail, waypoints, durations)?.poly)
}

/// Snap energy `sum_i int ||diag(w) Z_i^(4)||^2 dt` with gradients with
/// respect to coefficients and (coefficient-fixed) durations.
pub fn energy_weighted(poly: &PiecewisePoly, weights: &Vec3) -> (f64, Vec<Coeffs>, Vec<f64>) {
    let mut energy = 0.0;
    let mut gc = Vec::with_capacity(poly.piece_count());
    let mut gt = Vec::with_capacity(poly.piece_count());
    let fall4 = |k: usize| ((k - 3)..=k).map(|v| v as f64).product::<f64>();
    for (c, &t) in poly.coeffs.iter().zip(&poly.durations) {
        let mut g = Coeffs::zeros();
        let mut e = 0.0;
        let mut de = 0.0;
        for k in 4..8 {
            for l in 4..8 {
                let p = (k + l - 7) as i32;
                let w = fall4(k) * fall4(l);
                let gkl = w * t.powi(p) / p as f64;
                let dgkl = w * t.powi(p - 1);
                for d in 0..3 {
                    let q = weights[d] * c[(k, d)] * c[(l, d)];
                    e += gkl * q;
                    de += dgkl * q;
                    g[(k, d)] += 2.0 * gkl * weights[d] * c[(l, d)];
                }
            }
        }
        energy += e;
        gc.push(g);
        gt.push(de);
    }
    (energy, gc, gt)
}

/// Snap energy with identity weighting.
pub fn energy_and_grads(poly: &PiecewisePoly) -> (f64, Vec<Coeffs>, Vec<f64>) {
    energy_weighted(poly, &Vec3::repeat(1.0))
}

/// Maps an unconstrained virtual time to a positive duration, with the derivative.
pub fn virtual_to_real(sigma: f64) -> (f64, f64) {
    if sigma >= 0.0 {
        ((0.5 * sigma + 1.0) * sigma + 1.0, sigma + 1.0)
    } else {
        let den = (0.5 * sigma - 1.0) * sigma + 1.0;
        (1.0 / den, (1.0 - sigma) / (den * den))
    }
}

/// Inverse of [`virtual_to_real`].
pub fn real_to_virtual(t: f64) -> f64 {
    if t >= 1.0 {
        (2.0 * t - 1.0).sqrt() - 1.0
    } else {
        1.0 - (2.0 / t - 1.0).sqrt()
    }
}
