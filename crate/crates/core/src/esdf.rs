//! Voxel occupancy grids and Euclidean signed distance fields.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result, Vec3};

/// Default saturation distance of the field (m).
pub const MAX_DISTANCE: f64 = 10.0;

/// Geometric primitive used to describe obstacles.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Primitive {
    /// Axis-aligned box given by its corners.
    Box { min: Vec3, max: Vec3 },
    Sphere { center: Vec3, radius: f64 },
}

impl Primitive {
    pub fn contains(&self, p: &Vec3) -> bool {
        match self {
            Primitive::Box { min, max } => (0..3).all(|i| p[i] >= min[i] && p[i] <= max[i]),
            Primitive::Sphere { center, radius } => (p - center).norm_squared() <= radius * radius,
        }
    }

    fn aabb(&self) -> (Vec3, Vec3) {
        match *self {
            Primitive::Box { min, max } => (min, max),
            Primitive::Sphere { center, radius } => {
                let r = Vec3::repeat(radius);
                (center - r, center + r)
            }
        }
    }
}

/// Boolean voxel grid. Voxel `(i, j, k)` has its center at
/// `origin + (idx + 0.5) * resolution`; storage is x-fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyGrid {
    pub origin: Vec3,
    pub resolution: f64,
    pub dims: [usize; 3],
    pub occupied: Vec<bool>,
}

impl OccupancyGrid {
    pub fn new(origin: Vec3, resolution: f64, dims: [usize; 3]) -> Result<Self> {
        if !(resolution > 0.0) || !resolution.is_finite() {
            return Err(Error::InvalidParameter(format!("resolution {resolution}")));
        }
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidParameter(format!("dims {dims:?}")));
        }
        Ok(Self { origin, resolution, dims, occupied: vec![false; dims[0] * dims[1] * dims[2]] })
    }

    pub fn len(&self) -> usize {
        self.occupied.len()
    }

    pub fn is_empty(&self) -> bool {
        self.occupied.is_empty()
    }

    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let i = idx % self.dims[0];
        let j = (idx / self.dims[0]) % self.dims[1];
        let k = idx / (self.dims[0] * self.dims[1]);
        [i, j, k]
    }

    pub fn center(&self, i: usize, j: usize, k: usize) -> Vec3 {
        self.origin + Vec3::new(i as f64 + 0.5, j as f64 + 0.5, k as f64 + 0.5) * self.resolution
    }

    pub fn set(&mut self, i: usize, j: usize, k: usize, value: bool) {
        let idx = self.index(i, j, k);
        self.occupied[idx] = value;
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> bool {
        self.occupied[self.index(i, j, k)]
    }

    /// Upper corner of the mapped volume.
    pub fn extent_max(&self) -> Vec3 {
        self.origin + Vec3::new(self.dims[0] as f64, self.dims[1] as f64, self.dims[2] as f64) * self.resolution
    }

    /// Voxel containing `p`, if inside the grid.
    pub fn voxel_of(&self, p: &Vec3) -> Option<[usize; 3]> {
        let mut out = [0; 3];
        for a in 0..3 {
            let u = ((p[a] - self.origin[a]) / self.resolution).floor();
            if !(u >= 0.0 && u < self.dims[a] as f64) {
                return None;
            }
            out[a] = u as usize;
        }
        Some(out)
    }

    /// Whether `p` lies in an occupied voxel. Points outside the grid count as free.
    pub fn is_occupied_at(&self, p: &Vec3) -> bool {
        self.voxel_of(p).is_some_and(|[i, j, k]| self.get(i, j, k))
    }

    pub fn occupied_count(&self) -> usize {
        self.occupied.iter().filter(|&&o| o).count()
    }

    /// Text form: three header lines followed by one line of `0`/`1`
    /// characters per (y, z) row, x varying fastest.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let o = self.origin;
        let _ = writeln!(s, "origin {} {} {}", o.x, o.y, o.z);
        let _ = writeln!(s, "resolution {}", self.resolution);
        let _ = writeln!(s, "dims {} {} {}", self.dims[0], self.dims[1], self.dims[2]);
        for row in self.occupied.chunks(self.dims[0]) {
            s.extend(row.iter().map(|&b| if b { '1' } else { '0' }));
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#'));
        let mut header = |key: &str, n: usize| -> Result<Vec<f64>> {
            let line = lines.next().ok_or_else(|| Error::Parse(format!("missing '{key}' line")))?;
            let mut parts = line.split_whitespace();
            if parts.next() != Some(key) {
                return Err(Error::Parse(format!("expected '{key}', got '{line}'")));
            }
            let vals = parts
                .map(|p| p.parse::<f64>().map_err(|e| Error::Parse(format!("{key}: {e}"))))
                .collect::<Result<Vec<_>>>()?;
            if vals.len() != n {
                return Err(Error::Parse(format!("'{key}' expects {n} values")));
            }
            Ok(vals)
        };
        let o = header("origin", 3)?;
        let res = header("resolution", 1)?[0];
        let d = header("dims", 3)?;
        if d.iter().any(|v| v.fract() != 0.0 || *v < 1.0) {
            return Err(Error::Parse("dims must be positive integers".into()));
        }
        let mut grid = Self::new(Vec3::new(o[0], o[1], o[2]), res, [d[0] as usize, d[1] as usize, d[2] as usize])?;
        let nx = grid.dims[0];
        let rows = grid.dims[1] * grid.dims[2];
        let mut count = 0;
        for line in lines {
            if count == rows {
                return Err(Error::Parse("too many occupancy rows".into()));
            }
            if line.len() != nx {
                return Err(Error::Parse(format!("row {count} has {} cells, expected {nx}", line.len())));
            }
            for (i, c) in line.chars().enumerate() {
                grid.occupied[count * nx + i] = match c {
                    '0' => false,
                    '1' => true,
                    other => return Err(Error::Parse(format!("bad occupancy character '{other}'"))),
                };
            }
            count += 1;
        }
        if count != rows {
            return Err(Error::Parse(format!("expected {rows} occupancy rows, got {count}")));
        }
        Ok(grid)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

/// Rasterizes primitives into a grid covering `[min, max]`. A voxel is
/// occupied iff its center lies inside some primitive.
pub fn rasterize(primitives: &[Primitive], min: Vec3, max: Vec3, resolution: f64) -> Result<OccupancyGrid> {
    if !(resolution > 0.0) {
        return Err(Error::InvalidParameter(format!("resolution {resolution}")));
    }
    let mut dims = [0usize; 3];
    for a in 0..3 {
        let span = max[a] - min[a];
        if !(span > 0.0) {
            return Err(Error::InvalidParameter(format!("empty bounds on axis {a}")));
        }
        dims[a] = ((span / resolution) - 1e-9).ceil().max(1.0) as usize;
    }
    let mut grid = OccupancyGrid::new(min, resolution, dims)?;
    for prim in primitives {
        let (lo, hi) = prim.aabb();
        let mut range = [(0usize, 0usize); 3];
        let mut empty = false;
        for a in 0..3 {
            let first = ((lo[a] - min[a]) / resolution - 0.5).ceil().max(0.0);
            let last = ((hi[a] - min[a]) / resolution - 0.5).floor().min(dims[a] as f64 - 1.0);
            if last < first {
                empty = true;
                break;
            }
            range[a] = (first as usize, last as usize);
        }
        if empty {
            continue;
        }
        for k in range[2].0..=range[2].1 {
            for j in range[1].0..=range[1].1 {
                for i in range[0].0..=range[0].1 {
                    if prim.contains(&grid.center(i, j, k)) {
                        grid.set(i, j, k, true);
                    }
                }
            }
        }
    }
    Ok(grid)
}

/// Occupancy plus signed distance per voxel (negative inside obstacles).
#[derive(Debug, Clone)]
pub struct EsdfMap {
    pub grid: OccupancyGrid,
    pub distance: Vec<f64>,
    pub max_distance: f64,
}

/// Lower envelope of parabolas rooted at the finite entries of `f`; writes
/// squared distances into `out`. Entries of `f` that are infinite carry no site.
fn edt_1d(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k: isize = -1;
    for q in 0..n {
        if !f[q].is_finite() {
            continue;
        }
        let qf = q as f64;
        let mut s = f64::NEG_INFINITY;
        while k >= 0 {
            let p = v[k as usize];
            let pf = p as f64;
            s = ((f[q] + qf * qf) - (f[p] + pf * pf)) / (2.0 * (qf - pf));
            if s <= z[k as usize] {
                k -= 1;
            } else {
                break;
            }
        }
        if k < 0 {
            s = f64::NEG_INFINITY;
        }
        k += 1;
        v[k as usize] = q;
        z[k as usize] = s;
        z[k as usize + 1] = f64::INFINITY;
    }
    if k < 0 {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    }
    let mut j = 0;
    for (q, o) in out.iter_mut().enumerate() {
        let qf = q as f64;
        while z[j + 1] < qf {
            j += 1;
        }
        let p = v[j];
        let d = qf - p as f64;
        *o = d * d + f[p];
    }
}

/// Squared voxel-unit distance from every voxel to the nearest voxel where
/// `site` holds.
fn squared_edt(dims: [usize; 3], site: impl Fn(usize) -> bool) -> Vec<f64> {
    let total = dims[0] * dims[1] * dims[2];
    let mut g: Vec<f64> = (0..total).map(|i| if site(i) { 0.0 } else { f64::INFINITY }).collect();
    let longest = dims.iter().copied().max().unwrap_or(1);
    let (mut f, mut out) = (vec![0.0; longest], vec![0.0; longest]);
    let (mut v, mut z) = (vec![0usize; longest], vec![0.0; longest + 1]);
    let strides = [1, dims[0], dims[0] * dims[1]];
    for axis in 0..3 {
        let n = dims[axis];
        let stride = strides[axis];
        let (o1, o2) = match axis {
            0 => (1, 2),
            1 => (0, 2),
            _ => (0, 1),
        };
        for b in 0..dims[o2] {
            for a in 0..dims[o1] {
                let base = a * strides[o1] + b * strides[o2];
                for q in 0..n {
                    f[q] = g[base + q * stride];
                }
                edt_1d(&f[..n], &mut out[..n], &mut v, &mut z);
                for q in 0..n {
                    g[base + q * stride] = out[q];
                }
            }
        }
    }
    g
}

/// Builds the signed field saturated at [`MAX_DISTANCE`].
pub fn build_esdf(grid: &OccupancyGrid) -> Result<EsdfMap> {
    build_esdf_with_max(grid, MAX_DISTANCE)
}

pub fn build_esdf_with_max(grid: &OccupancyGrid, max_distance: f64) -> Result<EsdfMap> {
    if grid.is_empty() {
        return Err(Error::InvalidParameter("empty grid".into()));
    }
    if !(max_distance > 0.0) {
        return Err(Error::InvalidParameter(format!("max distance {max_distance}")));
    }
    let to_occ = squared_edt(grid.dims, |i| grid.occupied[i]);
    let to_free = squared_edt(grid.dims, |i| !grid.occupied[i]);
    let res = grid.resolution;
    let distance = to_occ
        .iter()
        .zip(&to_free)
        .map(|(&a, &b)| {
            let d = (a.sqrt() - b.sqrt()) * res;
            if d.is_nan() {
                // Only possible when both are infinite, i.e. never for a non-empty grid.
                0.0
            } else {
                d.clamp(-max_distance, max_distance)
            }
        })
        .collect();
    Ok(EsdfMap { grid: grid.clone(), distance, max_distance })
}

impl EsdfMap {
    pub fn resolution(&self) -> f64 {
        self.grid.resolution
    }

    pub fn at(&self, i: usize, j: usize, k: usize) -> f64 {
        self.distance[self.grid.index(i, j, k)]
    }

    /// Trilinearly interpolated distance and its gradient. Coordinates
    /// outside the span of voxel centers are clamped, and the gradient
    /// along a clamped axis is zero.
    pub fn query(&self, p: &Vec3) -> (f64, Vec3) {
        let g = &self.grid;
        let mut base = [0usize; 3];
        let mut frac = [0.0; 3];
        let mut live = [true; 3];
        for a in 0..3 {
            let n = g.dims[a];
            let mut u = (p[a] - g.origin[a]) / g.resolution - 0.5;
            // Absorb round-off so voxel centers return stored values exactly.
            if (u - u.round()).abs() < 1e-9 {
                u = u.round();
            }
            let hi = (n - 1) as f64;
            let uc = if u.is_nan() { 0.0 } else { u.clamp(0.0, hi) };
            if uc != u || n == 1 {
                live[a] = false;
            }
            if n == 1 {
                base[a] = 0;
                frac[a] = 0.0;
                continue;
            }
            let i0 = (uc.floor() as usize).min(n - 2);
            base[a] = i0;
            frac[a] = uc - i0 as f64;
        }
        let step = |a: usize| usize::from(g.dims[a] > 1);
        let mut c = [[[0.0; 2]; 2]; 2];
        for (dz, cz) in c.iter_mut().enumerate() {
            for (dy, cy) in cz.iter_mut().enumerate() {
                for (dx, cx) in cy.iter_mut().enumerate() {
                    *cx = self.at(base[0] + dx * step(0), base[1] + dy * step(1), base[2] + dz * step(2));
                }
            }
        }
        let [tx, ty, tz] = frac;
        let lerp = |a: f64, b: f64, t: f64| a + (b - a) * t;
        let c00 = lerp(c[0][0][0], c[0][0][1], tx);
        let c10 = lerp(c[0][1][0], c[0][1][1], tx);
        let c01 = lerp(c[1][0][0], c[1][0][1], tx);
        let c11 = lerp(c[1][1][0], c[1][1][1], tx);
        let c0 = lerp(c00, c10, ty);
        let c1 = lerp(c01, c11, ty);
        let d = lerp(c0, c1, tz);

        let dx0 = lerp(c[0][0][1] - c[0][0][0], c[0][1][1] - c[0][1][0], ty);
        let dx1 = lerp(c[1][0][1] - c[1][0][0], c[1][1][1] - c[1][1][0], ty);
        let gx = lerp(dx0, dx1, tz);
        let gy = lerp(c10 - c00, c11 - c01, tz);
        let gz = c1 - c0;
        let mut grad = Vec3::new(gx, gy, gz) / g.resolution;
        for a in 0..3 {
            if !live[a] {
                grad[a] = 0.0;
            }
        }
        (d, grad)
    }

    pub fn distance_at(&self, p: &Vec3) -> f64 {
        self.query(p).0
    }
}
