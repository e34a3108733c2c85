//! Regular grids on cubes, sampled maps into R^ν, finite-difference
//! derivatives and trapezoidal integration over cell regions.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

pub const MAX_DIM: usize = 4;

/// Fractional indices within this distance of an integer are snapped to it,
/// so that sampling at a node returns the stored value exactly.
const SNAP: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub m: usize,
    pub res: usize,
    pub inradius: f64,
    pub center: Vec<f64>,
}

impl Grid {
    pub fn new(m: usize, res: usize, inradius: f64) -> Result<Grid> {
        Grid::with_center(m, res, inradius, vec![0.0; m])
    }

    pub fn with_center(m: usize, res: usize, inradius: f64, center: Vec<f64>) -> Result<Grid> {
        if m == 0 || m > MAX_DIM {
            return invalid(format!("grid dimension {m} outside 1..={MAX_DIM}"));
        }
        if res < 3 {
            return invalid(format!("grid resolution {res} below 3"));
        }
        if !(inradius > 0.0 && inradius.is_finite()) {
            return invalid(format!("grid inradius {inradius} must be positive"));
        }
        if center.len() != m || center.iter().any(|c| !c.is_finite()) {
            return invalid("grid centre has wrong length or is not finite");
        }
        Ok(Grid { m, res, inradius, center })
    }

    pub fn h(&self) -> f64 {
        2.0 * self.inradius / (self.res - 1) as f64
    }

    pub fn n_nodes(&self) -> usize {
        self.res.pow(self.m as u32)
    }

    pub fn n_cells(&self) -> usize {
        (self.res - 1).pow(self.m as u32)
    }

    pub fn lo(&self, axis: usize) -> f64 {
        self.center[axis] - self.inradius
    }

    pub fn hi(&self, axis: usize) -> f64 {
        self.center[axis] + self.inradius
    }

    /// Coordinate of node index `k` along `axis`; the last node is exactly `hi`.
    pub fn coord(&self, axis: usize, k: usize) -> f64 {
        if k + 1 == self.res {
            self.hi(axis)
        } else {
            self.lo(axis) + k as f64 * self.h()
        }
    }

    /// Node stride of `axis` in the row-major layout (last axis fastest).
    pub fn stride(&self, axis: usize) -> usize {
        self.res.pow((self.m - 1 - axis) as u32)
    }

    pub fn unravel(&self, mut idx: usize, out: &mut [usize]) {
        for a in (0..self.m).rev() {
            out[a] = idx % self.res;
            idx /= self.res;
        }
    }

    pub fn ravel(&self, k: &[usize]) -> usize {
        k.iter().take(self.m).fold(0, |acc, &ki| acc * self.res + ki)
    }

    pub fn node_coords(&self, idx: usize, out: &mut [f64]) {
        let mut k = [0usize; MAX_DIM];
        self.unravel(idx, &mut k);
        for a in 0..self.m {
            out[a] = self.coord(a, k[a]);
        }
    }

    pub fn node_point(&self, idx: usize) -> Vec<f64> {
        let mut x = vec![0.0; self.m];
        self.node_coords(idx, &mut x);
        x
    }

    /// Cell indexing: cells per axis is `res - 1`, row-major.
    pub fn cell_unravel(&self, mut idx: usize, out: &mut [usize]) {
        let c = self.res - 1;
        for a in (0..self.m).rev() {
            out[a] = idx % c;
            idx /= c;
        }
    }

    pub fn cell_ravel(&self, k: &[usize]) -> usize {
        let c = self.res - 1;
        k.iter().take(self.m).fold(0, |acc, &ki| acc * c + ki)
    }

    pub fn cell_center(&self, idx: usize, out: &mut [f64]) {
        let mut k = [0usize; MAX_DIM];
        self.cell_unravel(idx, &mut k);
        let h = self.h();
        for a in 0..self.m {
            out[a] = self.lo(a) + (k[a] as f64 + 0.5) * h;
        }
    }

    /// Fractional index of coordinate `x` along `axis`, snapped to integers.
    pub fn frac_index(&self, axis: usize, x: f64) -> f64 {
        let t = (x - self.lo(axis)) / self.h();
        let r = t.round();
        if (t - r).abs() < SNAP {
            r
        } else {
            t
        }
    }

    pub fn contains(&self, x: &[f64], tol: f64) -> bool {
        (0..self.m).all(|a| x[a] >= self.lo(a) - tol && x[a] <= self.hi(a) + tol)
    }

    /// Index of the node nearest to `x` along `axis` if `x` is a node coordinate.
    pub fn node_index_of(&self, axis: usize, x: f64) -> Option<usize> {
        let t = self.frac_index(axis, x);
        if t.fract() == 0.0 && t >= 0.0 && t <= (self.res - 1) as f64 {
            Some(t as usize)
        } else {
            None
        }
    }

    pub fn same_lattice(&self, other: &Grid) -> bool {
        self.m == other.m && (self.h() - other.h()).abs() <= 1e-12 * self.h()
    }
}

/// Map from grid nodes to R^ν, stored node-major.
#[derive(Clone, Debug, PartialEq)]
pub struct GridMap {
    pub grid: Grid,
    pub nu: usize,
    pub values: Vec<f64>,
}

impl GridMap {
    pub fn new(grid: Grid, nu: usize, values: Vec<f64>) -> Result<GridMap> {
        if nu == 0 {
            return invalid("ambient dimension must be positive");
        }
        if values.len() != grid.n_nodes() * nu {
            return invalid(format!(
                "value array has {} entries, expected {}",
                values.len(),
                grid.n_nodes() * nu
            ));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return invalid(format!("non-finite value at flat index {i}"));
        }
        Ok(GridMap { grid, nu, values })
    }

    pub fn constant(grid: Grid, c: &[f64]) -> GridMap {
        let n = grid.n_nodes();
        let mut values = Vec::with_capacity(n * c.len());
        for _ in 0..n {
            values.extend_from_slice(c);
        }
        GridMap { grid, nu: c.len(), values }
    }

    /// Evaluate `f(x, out)` at every node in parallel.
    pub fn from_fn<F>(grid: Grid, nu: usize, f: F) -> GridMap
    where
        F: Fn(&[f64], &mut [f64]) + Sync,
    {
        let mut values = vec![0.0; grid.n_nodes() * nu];
        values.par_chunks_mut(nu).enumerate().for_each(|(i, out)| {
            let mut x = [0.0; MAX_DIM];
            grid.node_coords(i, &mut x);
            f(&x[..grid.m], out);
        });
        GridMap { grid, nu, values }
    }

    pub fn n_nodes(&self) -> usize {
        self.grid.n_nodes()
    }

    pub fn value(&self, node: usize) -> &[f64] {
        &self.values[node * self.nu..(node + 1) * self.nu]
    }

    pub fn value_mut(&mut self, node: usize) -> &mut [f64] {
        &mut self.values[node * self.nu..(node + 1) * self.nu]
    }

    /// Multilinear interpolation at the physical point `x`.
    pub fn sample(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        let mut t = [0.0; MAX_DIM];
        let tol = 1e-9;
        let top = (self.grid.res - 1) as f64;
        for a in 0..self.grid.m {
            let ta = self.grid.frac_index(a, x[a]);
            if !(ta >= -tol && ta <= top + tol) {
                return Err(Error::DomainExceeded(format!(
                    "coordinate {} on axis {a} outside [{}, {}]",
                    x[a],
                    self.grid.lo(a),
                    self.grid.hi(a)
                )));
            }
            t[a] = ta.clamp(0.0, top);
        }
        self.sample_index(&t[..self.grid.m], out);
        Ok(())
    }

    /// Multilinear interpolation at fractional node indices (assumed in range).
    /// Corners with zero weight are skipped, so node positions reproduce stored
    /// values bit for bit.
    pub fn sample_index(&self, t: &[f64], out: &mut [f64]) {
        let m = self.grid.m;
        let res = self.grid.res;
        let mut base = [0usize; MAX_DIM];
        let mut fr = [0.0; MAX_DIM];
        for a in 0..m {
            let k = (t[a].floor() as usize).min(res - 2);
            base[a] = k;
            fr[a] = t[a] - k as f64;
        }
        out.iter_mut().for_each(|o| *o = 0.0);
        let mut first = true;
        for corner in 0..(1usize << m) {
            let mut w = 1.0;
            let mut idx = 0usize;
            for a in 0..m {
                let bit = (corner >> a) & 1;
                let wa = if bit == 1 { fr[a] } else { 1.0 - fr[a] };
                w *= wa;
                idx = idx * res + base[a] + bit;
            }
            if w == 0.0 {
                continue;
            }
            let v = self.value(idx);
            if first && w == 1.0 {
                out.copy_from_slice(v);
            } else {
                for c in 0..self.nu {
                    out[c] += w * v[c];
                }
            }
            first = false;
        }
    }

    /// Largest Euclidean norm of a node value.
    pub fn sup_norm(&self) -> f64 {
        self.values
            .chunks(self.nu)
            .map(|v| v.iter().map(|x| x * x).sum::<f64>().sqrt())
            .fold(0.0, f64::max)
    }

    /// Per-component (min, max) over all nodes.
    pub fn component_range(&self) -> Vec<(f64, f64)> {
        let mut r = vec![(f64::INFINITY, f64::NEG_INFINITY); self.nu];
        for v in self.values.chunks(self.nu) {
            for c in 0..self.nu {
                r[c].0 = r[c].0.min(v[c]);
                r[c].1 = r[c].1.max(v[c]);
            }
        }
        r
    }

    pub fn scaled(&self, s: f64) -> GridMap {
        GridMap {
            grid: self.grid.clone(),
            nu: self.nu,
            values: self.values.iter().map(|v| v * s).collect(),
        }
    }

    pub fn sub(&self, other: &GridMap) -> Result<GridMap> {
        if self.grid != other.grid || self.nu != other.nu {
            return invalid("maps live on different grids");
        }
        Ok(GridMap {
            grid: self.grid.clone(),
            nu: self.nu,
            values: self.values.iter().zip(&other.values).map(|(a, b)| a - b).collect(),
        })
    }

    /// Copy of the values on a sub-grid sharing this map's lattice.
    pub fn restrict(&self, target: &Grid) -> Result<GridMap> {
        if !self.grid.same_lattice(target) {
            return invalid("restriction target does not share the lattice");
        }
        let mut offset = [0usize; MAX_DIM];
        for a in 0..target.m {
            offset[a] = self.grid.node_index_of(a, target.lo(a)).ok_or_else(|| {
                Error::DomainExceeded("restriction target is not aligned with source nodes".into())
            })?;
            if offset[a] + target.res > self.grid.res {
                return Err(Error::DomainExceeded("restriction target exceeds source grid".into()));
            }
        }
        let nu = self.nu;
        let mut values = vec![0.0; target.n_nodes() * nu];
        values.par_chunks_mut(nu).enumerate().for_each(|(i, out)| {
            let mut k = [0usize; MAX_DIM];
            target.unravel(i, &mut k);
            for a in 0..target.m {
                k[a] += offset[a];
            }
            out.copy_from_slice(self.value(self.grid.ravel(&k[..target.m])));
        });
        Ok(GridMap { grid: target.clone(), nu, values })
    }
}

/// Set of grid cells; integrals use the trapezoidal rule on these cells.
#[derive(Clone, Debug, PartialEq)]
pub struct Region {
    pub grid: Grid,
    pub cells: Vec<bool>,
    pub description: String,
}

impl Region {
    pub fn full(grid: &Grid) -> Region {
        Region { grid: grid.clone(), cells: vec![true; grid.n_cells()], description: "full".into() }
    }

    pub fn empty(grid: &Grid) -> Region {
        Region { grid: grid.clone(), cells: vec![false; grid.n_cells()], description: "empty".into() }
    }

    /// Cells whose centre satisfies `pred`.
    pub fn from_cells<F>(grid: &Grid, description: &str, pred: F) -> Region
    where
        F: Fn(&[f64]) -> bool + Sync,
    {
        let cells = (0..grid.n_cells())
            .into_par_iter()
            .map(|c| {
                let mut x = [0.0; MAX_DIM];
                grid.cell_center(c, &mut x);
                pred(&x[..grid.m])
            })
            .collect();
        Region { grid: grid.clone(), cells, description: description.into() }
    }

    /// Axis-aligned box [lo, hi] rasterized by cell centres.
    pub fn from_box(grid: &Grid, lo: &[f64], hi: &[f64], description: &str) -> Region {
        let tol = 1e-9 * grid.h();
        Region::from_cells(grid, description, |x| {
            (0..grid.m).all(|a| x[a] >= lo[a] - tol && x[a] <= hi[a] + tol)
        })
    }

    /// Max-norm cube of inradius r around `c`.
    pub fn cube(grid: &Grid, c: &[f64], r: f64) -> Region {
        let lo: Vec<f64> = c.iter().map(|v| v - r).collect();
        let hi: Vec<f64> = c.iter().map(|v| v + r).collect();
        Region::from_box(grid, &lo, &hi, "cube")
    }

    pub fn n_cells(&self) -> usize {
        self.cells.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.cells.iter().any(|&b| b)
    }

    pub fn measure(&self) -> f64 {
        self.n_cells() as f64 * self.grid.h().powi(self.grid.m as i32)
    }

    fn combine(&self, other: &Region, f: impl Fn(bool, bool) -> bool, d: &str) -> Region {
        Region {
            grid: self.grid.clone(),
            cells: self.cells.iter().zip(&other.cells).map(|(&a, &b)| f(a, b)).collect(),
            description: d.into(),
        }
    }

    pub fn union(&self, other: &Region) -> Region {
        self.combine(other, |a, b| a || b, &format!("{} ∪ {}", self.description, other.description))
    }

    pub fn intersection(&self, other: &Region) -> Region {
        self.combine(other, |a, b| a && b, &format!("{} ∩ {}", self.description, other.description))
    }

    pub fn difference(&self, other: &Region) -> Region {
        self.combine(other, |a, b| a && !b, &format!("{} ∖ {}", self.description, other.description))
    }

    pub fn complement(&self) -> Region {
        Region {
            grid: self.grid.clone(),
            cells: self.cells.iter().map(|&b| !b).collect(),
            description: format!("complement of {}", self.description),
        }
    }

    /// Trapezoidal node weights: h^m times the fraction of adjacent cells in the region.
    pub fn node_weights(&self) -> Vec<f64> {
        let g = &self.grid;
        let m = g.m;
        let vol = g.h().powi(m as i32) / (1usize << m) as f64;
        (0..g.n_nodes())
            .into_par_iter()
            .map(|i| {
                let mut k = [0usize; MAX_DIM];
                g.unravel(i, &mut k);
                let mut count = 0usize;
                'corner: for corner in 0..(1usize << m) {
                    let mut ck = [0usize; MAX_DIM];
                    for a in 0..m {
                        let back = (corner >> a) & 1 == 1;
                        if back {
                            if k[a] == 0 {
                                continue 'corner;
                            }
                            ck[a] = k[a] - 1;
                        } else {
                            if k[a] + 1 >= g.res {
                                continue 'corner;
                            }
                            ck[a] = k[a];
                        }
                    }
                    if self.cells[g.cell_ravel(&ck[..m])] {
                        count += 1;
                    }
                }
                count as f64 * vol
            })
            .collect()
    }

    /// Nodes touching at least one region cell.
    pub fn node_mask(&self) -> Vec<bool> {
        self.node_weights().into_iter().map(|w| w > 0.0).collect()
    }

    /// Nodes all of whose adjacent cells lie in the region.
    pub fn interior_node_mask(&self) -> Vec<bool> {
        let g = &self.grid;
        let full_w = g.h().powi(g.m as i32);
        let mut k = [0usize; MAX_DIM];
        self.node_weights()
            .into_iter()
            .enumerate()
            .map(|(i, w)| {
                g.unravel(i, &mut k);
                let adj = (0..g.m).fold(1usize, |acc, a| {
                    acc * if k[a] == 0 || k[a] + 1 == g.res { 1 } else { 2 }
                });
                let expect = full_w * adj as f64 / (1usize << g.m) as f64;
                w > 0.0 && (w - expect).abs() <= 1e-12 * full_w
            })
            .collect()
    }
}

/// Integral of a nodal scalar field over a region (fixed summation order).
pub fn integrate(region: &Region, f: &[f64]) -> f64 {
    integrate_weighted(&region.node_weights(), f)
}

pub fn integrate_weighted(weights: &[f64], f: &[f64]) -> f64 {
    weights.iter().zip(f).filter(|(w, _)| **w > 0.0).map(|(w, v)| w * v).sum()
}

/// Jacobians per node, layout `[node][axis][component]`.
#[derive(Clone, Debug)]
pub struct GradientField {
    pub grid: Grid,
    pub nu: usize,
    pub data: Vec<f64>,
}

impl GradientField {
    pub fn at(&self, node: usize) -> &[f64] {
        let w = self.grid.m * self.nu;
        &self.data[node * w..(node + 1) * w]
    }

    /// Frobenius norm per node.
    pub fn norms(&self) -> Vec<f64> {
        let w = self.grid.m * self.nu;
        self.data.par_chunks(w).map(|j| j.iter().map(|x| x * x).sum::<f64>().sqrt()).collect()
    }

    /// |Du|^p per node.
    pub fn norm_pow(&self, p: f64) -> Vec<f64> {
        let w = self.grid.m * self.nu;
        self.data
            .par_chunks(w)
            .map(|j| {
                let s = j.iter().map(|x| x * x).sum::<f64>();
                if p == 2.0 {
                    s
                } else {
                    s.sqrt().powf(p)
                }
            })
            .collect()
    }
}

/// Central differences inside, second-order one-sided differences on the boundary.
pub fn gradient(u: &GridMap) -> GradientField {
    let g = &u.grid;
    let m = g.m;
    let nu = u.nu;
    let h = g.h();
    let res = g.res;
    let mut data = vec![0.0; g.n_nodes() * m * nu];
    data.par_chunks_mut(m * nu).enumerate().for_each(|(i, out)| {
        let mut k = [0usize; MAX_DIM];
        g.unravel(i, &mut k);
        for a in 0..m {
            let s = g.stride(a);
            let o = &mut out[a * nu..(a + 1) * nu];
            if k[a] > 0 && k[a] + 1 < res {
                let (p, q) = (u.value(i + s), u.value(i - s));
                for c in 0..nu {
                    o[c] = (p[c] - q[c]) / (2.0 * h);
                }
            } else if k[a] == 0 {
                let (v0, v1, v2) = (u.value(i), u.value(i + s), u.value(i + 2 * s));
                for c in 0..nu {
                    o[c] = (-3.0 * v0[c] + 4.0 * v1[c] - v2[c]) / (2.0 * h);
                }
            } else {
                let (v0, v1, v2) = (u.value(i), u.value(i - s), u.value(i - 2 * s));
                for c in 0..nu {
                    o[c] = (3.0 * v0[c] - 4.0 * v1[c] + v2[c]) / (2.0 * h);
                }
            }
        }
    });
    GradientField { grid: g.clone(), nu, data }
}

fn check_p(p: f64) -> Result<()> {
    if !(p >= 1.0 && p.is_finite()) {
        return Err(Error::ParameterOutOfRange(format!("p = {p} must be a finite value ≥ 1")));
    }
    Ok(())
}

/// ∫_region |Du|^p.
pub fn energy(u: &GridMap, p: f64, region: &Region) -> Result<f64> {
    check_p(p)?;
    if region.is_empty() {
        return Ok(0.0);
    }
    Ok(integrate(region, &gradient(u).norm_pow(p)))
}

/// (∫_region |Du|^p)^{1/p}.
pub fn sobolev_seminorm(u: &GridMap, p: f64, region: &Region) -> Result<f64> {
    Ok(energy(u, p, region)?.powf(1.0 / p))
}

fn pointwise_pow(u: &GridMap, p: f64) -> Vec<f64> {
    u.values
        .par_chunks(u.nu)
        .map(|v| v.iter().map(|x| x * x).sum::<f64>().sqrt().powf(p))
        .collect()
}

pub fn lp_norm(u: &GridMap, p: f64, region: &Region) -> Result<f64> {
    check_p(p)?;
    Ok(integrate(region, &pointwise_pow(u, p)).powf(1.0 / p))
}

/// ‖u − v‖_{L^p} and ‖Du − Dv‖_{L^p} over a region.
pub fn w1p_distance(u: &GridMap, v: &GridMap, p: f64, region: &Region) -> Result<(f64, f64)> {
    let d = u.sub(v)?;
    Ok((lp_norm(&d, p, region)?, sobolev_seminorm(&d, p, region)?))
}

/// Full W^{1,p} norm (‖u‖_p^p + ‖Du‖_p^p)^{1/p}.
pub fn w1p_norm(u: &GridMap, p: f64, region: &Region) -> Result<f64> {
    let a = lp_norm(u, p, region)?.powf(p);
    let b = energy(u, p, region)?;
    Ok((a + b).powf(1.0 / p))
}

/// Double average of |u(x) − u(y)|^p over the region, and diam^p times the
/// average of |Du|^p. The caller decides on the constant.
pub fn poincare_wirtinger_ratio(u: &GridMap, region: &Region, p: f64) -> Result<(f64, f64)> {
    check_p(p)?;
    let w = region.node_weights();
    let nodes: Vec<usize> = (0..w.len()).filter(|&i| w[i] > 0.0).collect();
    if nodes.is_empty() {
        return Ok((0.0, 0.0));
    }
    let total: f64 = nodes.iter().map(|&i| w[i]).sum();
    let nu = u.nu;
    let rows: Vec<f64> = nodes
        .par_iter()
        .map(|&i| {
            let ui = u.value(i);
            nodes
                .iter()
                .map(|&j| {
                    let uj = u.value(j);
                    let d2: f64 = (0..nu).map(|c| (ui[c] - uj[c]).powi(2)).sum();
                    w[j] * d2.sqrt().powf(p)
                })
                .sum::<f64>()
                * w[i]
        })
        .collect();
    let lhs = rows.iter().sum::<f64>() / (total * total);
    // Diameter of the bounding box of the region nodes.
    let g = &u.grid;
    let mut lo = [f64::INFINITY; MAX_DIM];
    let mut hi = [f64::NEG_INFINITY; MAX_DIM];
    let mut x = [0.0; MAX_DIM];
    for &i in &nodes {
        g.node_coords(i, &mut x);
        for a in 0..g.m {
            lo[a] = lo[a].min(x[a]);
            hi[a] = hi[a].max(x[a]);
        }
    }
    let diam = (0..g.m).map(|a| (hi[a] - lo[a]).powi(2)).sum::<f64>().sqrt();
    let e = integrate_weighted(&w, &gradient(u).norm_pow(p));
    Ok((lhs, diam.powf(p) * e / total))
}

/// Reflect `k` (index on an extended axis shifted by `pad`) back into `0..res`.
fn fold_index(k: isize, res: usize) -> usize {
    let period = 2 * (res as isize - 1);
    let mut j = k.rem_euclid(period);
    if j > res as isize - 1 {
        j = period - j;
    }
    j as usize
}

/// Even reflection across every face onto the cube of inradius `inradius + 2γ`.
pub fn reflect_extend(u: &GridMap, gamma: f64) -> Result<GridMap> {
    let g = &u.grid;
    let h = g.h();
    if !(gamma > 0.0) {
        return Err(Error::PaddingMisaligned(format!("γ = {gamma} must be positive")));
    }
    let cells = gamma / h;
    if (cells - cells.round()).abs() > 1e-9 * cells.max(1.0) || cells.round() < 1.0 {
        return Err(Error::PaddingMisaligned(format!(
            "γ = {gamma} is {cells} cells at spacing {h}; a whole number is required"
        )));
    }
    let pad = 2 * cells.round() as usize;
    let new_res = g.res + 2 * pad;
    let inradius = (new_res - 1) as f64 * h / 2.0;
    let grid = Grid::with_center(g.m, new_res, inradius, g.center.clone())?;
    let nu = u.nu;
    let mut values = vec![0.0; grid.n_nodes() * nu];
    values.par_chunks_mut(nu).enumerate().for_each(|(i, out)| {
        let mut k = [0usize; MAX_DIM];
        grid.unravel(i, &mut k);
        let mut src = [0usize; MAX_DIM];
        for a in 0..g.m {
            src[a] = fold_index(k[a] as isize - pad as isize, g.res);
        }
        out.copy_from_slice(u.value(g.ravel(&src[..g.m])));
    });
    Ok(GridMap { grid, nu, values })
}

/// τ_v u(x) = u(x − v) on the same grid.
pub fn translate(u: &GridMap, v: &[f64]) -> Result<GridMap> {
    translate_onto(u, v, &u.grid)
}

/// τ_v u evaluated at the nodes of `target`.
pub fn translate_onto(u: &GridMap, v: &[f64], target: &Grid) -> Result<GridMap> {
    if v.len() != u.grid.m || target.m != u.grid.m {
        return invalid("translation vector dimension mismatch");
    }
    let nu = u.nu;
    let mut values = vec![0.0; target.n_nodes() * nu];
    values
        .par_chunks_mut(nu)
        .enumerate()
        .try_for_each(|(i, out)| {
            let mut x = [0.0; MAX_DIM];
            target.node_coords(i, &mut x);
            for a in 0..target.m {
                x[a] -= v[a];
            }
            u.sample(&x[..target.m], out)
        })?;
    Ok(GridMap { grid: target.clone(), nu, values })
}

/// Sub-grid of `g` with the same spacing covering the cube of inradius `r`
/// around `center` (which must sit on nodes).
pub fn subgrid(g: &Grid, center: &[f64], r: f64) -> Result<Grid> {
    let cells = r / g.h();
    if (cells - cells.round()).abs() > 1e-9 * cells.max(1.0) {
        return Err(Error::EtaMisaligned(format!("inradius {r} is not a whole number of cells")));
    }
    let res = 2 * cells.round() as usize + 1;
    let sg = Grid::with_center(g.m, res, r, center.to_vec())?;
    for a in 0..g.m {
        if g.node_index_of(a, sg.lo(a)).is_none() {
            return Err(Error::EtaMisaligned("sub-grid corner is not a node".into()));
        }
    }
    Ok(sg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity(res: usize) -> GridMap {
        GridMap::from_fn(Grid::new(2, res, 1.0).unwrap(), 2, |x, o| o.copy_from_slice(x))
    }

    #[test]
    fn constant_gradient_is_zero() {
        let u = GridMap::constant(Grid::new(3, 9, 1.0).unwrap(), &[1.5, -2.0]);
        assert!(gradient(&u).data.iter().all(|&d| d == 0.0));
    }

    #[test]
    fn identity_gradient_is_identity_matrix() {
        let g = gradient(&identity(33));
        for i in 0..g.grid.n_nodes() {
            let j = g.at(i);
            assert!((j[0] - 1.0).abs() < 1e-12 && j[1].abs() < 1e-12);
            assert!(j[2].abs() < 1e-12 && (j[3] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn sine_derivative_at_origin() {
        let u = GridMap::from_fn(Grid::new(2, 129, 1.0).unwrap(), 2, |x, o| {
            o[0] = x[0].sin();
            o[1] = 0.0;
        });
        let g = gradient(&u);
        let centre = g.grid.ravel(&[64, 64]);
        assert!((g.at(centre)[0] - 1.0).abs() < 1e-3);
    }

    #[test]
    fn identity_energy_is_eight() {
        let u = identity(65);
        let e = energy(&u, 2.0, &Region::full(&u.grid)).unwrap();
        assert!((e - 8.0).abs() < 0.08);
    }

    #[test]
    fn seminorm_is_homogeneous_and_additive() {
        let u = GridMap::from_fn(Grid::new(2, 33, 1.0).unwrap(), 1, |x, o| o[0] = (x[0] * x[1]).sin());
        let full = Region::full(&u.grid);
        let s = sobolev_seminorm(&u, 1.5, &full).unwrap();
        let s3 = sobolev_seminorm(&u.scaled(-3.0), 1.5, &full).unwrap();
        assert!((s3 - 3.0 * s).abs() < 1e-12 * s3);
        let left = Region::from_box(&u.grid, &[-1.0, -1.0], &[0.0, 1.0], "left");
        let right = left.complement();
        let sum = energy(&u, 1.5, &left).unwrap() + energy(&u, 1.5, &right).unwrap();
        assert!((sum - energy(&u, 1.5, &full).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn empty_region_gives_zero() {
        let u = identity(9);
        assert_eq!(sobolev_seminorm(&u, 2.0, &Region::empty(&u.grid)).unwrap(), 0.0);
    }

    #[test]
    fn reflection_mirrors_linear_map() {
        let g = Grid::new(1, 9, 1.0).unwrap();
        let u = GridMap::from_fn(g, 1, |x, o| o[0] = x[0]);
        let e = reflect_extend(&u, 0.5).unwrap();
        assert!((e.grid.inradius - 2.0).abs() < 1e-15);
        for i in 0..e.n_nodes() {
            let x = e.grid.coord(0, i);
            let want = if x > 1.0 { 1.0 - (x - 1.0) } else if x < -1.0 { -1.0 - (x + 1.0) } else { x };
            assert!((e.value(i)[0] - want).abs() < 1e-12);
        }
        assert_eq!(e.restrict(&u.grid).unwrap(), u);
    }

    #[test]
    fn reflection_rejects_partial_cells() {
        let u = identity(9);
        assert!(matches!(reflect_extend(&u, 0.3), Err(Error::PaddingMisaligned(_))));
    }

    #[test]
    fn translation_by_zero_is_identity() {
        let u = identity(17);
        assert_eq!(translate(&u, &[0.0, 0.0]).unwrap(), u);
        assert!(matches!(translate(&u, &[0.5, 0.0]), Err(Error::DomainExceeded(_))));
    }

    #[test]
    fn node_weights_sum_to_measure() {
        let g = Grid::new(3, 9, 1.0).unwrap();
        let r = Region::from_box(&g, &[-0.5, -1.0, 0.0], &[1.0, 0.25, 1.0], "box");
        let s: f64 = r.node_weights().iter().sum();
        assert!((s - r.measure()).abs() < 1e-12);
        assert!((r.measure() - 1.5 * 1.25 * 1.0).abs() < 1e-12);
    }
}
