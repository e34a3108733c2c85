//! Regular cubications of Q_{1+γ}: faces of every dimension, adjacency,
//! and the good/bad classification of the top-dimensional cubes.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::grid::{gradient, Grid, GridMap, Region, MAX_DIM};
use crate::manifolds::{TargetManifold, MEMBERSHIP_TOL};

/// A closed face: lower corner on the cube lattice plus the set of axes it spans.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct Face {
    pub base: Vec<usize>,
    pub axes: u32,
}

impl Face {
    pub fn dim(&self) -> usize {
        self.axes.count_ones() as usize
    }

    pub fn spans(&self, axis: usize) -> bool {
        self.axes >> axis & 1 == 1
    }
}

#[derive(Clone, Debug)]
pub struct Cubication {
    pub m: usize,
    pub eta: f64,
    pub gamma: f64,
    pub rho: f64,
    /// Cubes per axis.
    pub n: usize,
    /// Lower corner of Q_{1+γ}.
    pub origin: Vec<f64>,
    pub grid: Grid,
    skeleta: Vec<Vec<Face>>,
    index: Vec<HashMap<Face, usize>>,
}

fn whole(x: f64) -> Option<usize> {
    let r = x.round();
    if r >= 0.0 && (x - r).abs() <= 1e-9 * x.abs().max(1.0) {
        Some(r as usize)
    } else {
        None
    }
}

fn binom(n: usize, k: usize) -> usize {
    (0..k).fold(1, |acc, i| acc * (n - i) / (i + 1))
}

/// Cubication of Q_{1+γ} (centred on the grid centre) by cubes of inradius η.
pub fn build_cubication(grid: &Grid, gamma: f64, eta: f64, rho: f64) -> Result<Cubication> {
    if !(rho > 0.0 && rho < 0.5) {
        return Err(Error::ParameterOutOfRange(format!("ρ = {rho} outside (0, 1/2)")));
    }
    if !(eta > 0.0 && gamma > 0.0) {
        return Err(Error::ParameterOutOfRange("η and γ must be positive".into()));
    }
    if 2.0 * rho * eta > gamma * (1.0 + 1e-12) {
        return Err(Error::ParameterOutOfRange(format!("2ρη = {} exceeds γ = {gamma}", 2.0 * rho * eta)));
    }
    let half = 1.0 + gamma;
    let n = whole(half / eta)
        .filter(|&n| n >= 1)
        .ok_or_else(|| Error::EtaMisaligned(format!("η = {eta} does not divide 1+γ = {half}")))?;
    let h = grid.h();
    if whole(eta / h).is_none() {
        return Err(Error::EtaMisaligned(format!("η = {eta} is not a whole number of cells of width {h}")));
    }
    let m = grid.m;
    let origin: Vec<f64> = grid.center.iter().map(|c| c - half).collect();
    for a in 0..m {
        if grid.node_index_of(a, origin[a]).is_none() {
            return Err(Error::EtaMisaligned("cubication corner is not a grid node".into()));
        }
        if origin[a] < grid.lo(a) - 1e-9 * h {
            return Err(Error::DomainExceeded("grid does not cover Q_{1+γ}".into()));
        }
    }
    let mut skeleta: Vec<Vec<Face>> = vec![Vec::new(); m + 1];
    for axes in 0u32..(1 << m) {
        let mut base = vec![0usize; m];
        loop {
            skeleta[axes.count_ones() as usize].push(Face { base: base.clone(), axes });
            // Odometer over the admissible lower corners.
            let mut a = m;
            loop {
                if a == 0 {
                    break;
                }
                a -= 1;
                let top = if axes >> a & 1 == 1 { n - 1 } else { n };
                if base[a] < top {
                    base[a] += 1;
                    for b in base.iter_mut().skip(a + 1) {
                        *b = 0;
                    }
                    break;
                }
                if a == 0 {
                    a = usize::MAX;
                    break;
                }
            }
            if a == usize::MAX {
                break;
            }
        }
    }
    for s in &mut skeleta {
        s.sort();
    }
    let index = skeleta
        .iter()
        .map(|s| s.iter().enumerate().map(|(i, f)| (f.clone(), i)).collect())
        .collect();
    Ok(Cubication { m, eta, gamma, rho, n, origin, grid: grid.clone(), skeleta, index })
}

impl Cubication {
    pub fn faces(&self, dim: usize) -> &[Face] {
        &self.skeleta[dim]
    }

    pub fn cubes(&self) -> &[Face] {
        &self.skeleta[self.m]
    }

    pub fn face_id(&self, f: &Face) -> Option<usize> {
        self.index[f.dim()].get(f).copied()
    }

    /// Number of i-faces of a regular cubication with n cubes per axis.
    pub fn expected_count(&self, dim: usize) -> usize {
        binom(self.m, dim) * self.n.pow(dim as u32) * (self.n + 1).pow((self.m - dim) as u32)
    }

    pub fn lower(&self, f: &Face) -> Vec<f64> {
        (0..self.m).map(|a| self.origin[a] + 2.0 * self.eta * f.base[a] as f64).collect()
    }

    pub fn upper(&self, f: &Face) -> Vec<f64> {
        (0..self.m)
            .map(|a| self.origin[a] + 2.0 * self.eta * (f.base[a] + f.spans(a) as usize) as f64)
            .collect()
    }

    pub fn center(&self, f: &Face) -> Vec<f64> {
        (0..self.m)
            .map(|a| self.origin[a] + 2.0 * self.eta * f.base[a] as f64 + if f.spans(a) { self.eta } else { 0.0 })
            .collect()
    }

    /// The (dim−1)-faces of ∂f.
    pub fn boundary(&self, f: &Face) -> Vec<Face> {
        let mut out = Vec::new();
        for a in 0..self.m {
            if f.spans(a) {
                for off in 0..2 {
                    let mut base = f.base.clone();
                    base[a] += off;
                    out.push(Face { base, axes: f.axes & !(1 << a) });
                }
            }
        }
        out
    }

    /// The (dim+1)-faces having f on their boundary.
    pub fn cofaces(&self, f: &Face) -> Vec<Face> {
        let mut out = Vec::new();
        for a in 0..self.m {
            if f.spans(a) {
                continue;
            }
            let axes = f.axes | (1 << a);
            if f.base[a] < self.n {
                out.push(Face { base: f.base.clone(), axes });
            }
            if f.base[a] >= 1 {
                let mut base = f.base.clone();
                base[a] -= 1;
                out.push(Face { base, axes });
            }
        }
        out
    }

    /// All i-faces contained in f.
    pub fn subfaces(&self, f: &Face, dim: usize) -> Vec<Face> {
        let spanned: Vec<usize> = (0..self.m).filter(|&a| f.spans(a)).collect();
        let k = spanned.len();
        let mut out = Vec::new();
        if dim > k {
            return out;
        }
        for keep in 0u32..(1 << k) {
            if keep.count_ones() as usize != dim {
                continue;
            }
            let dropped: Vec<usize> = (0..k).filter(|&j| keep >> j & 1 == 0).map(|j| spanned[j]).collect();
            let mut axes = f.axes;
            for &a in &dropped {
                axes &= !(1 << a);
            }
            for offs in 0u32..(1 << dropped.len()) {
                let mut base = f.base.clone();
                for (j, &a) in dropped.iter().enumerate() {
                    base[a] += (offs >> j & 1) as usize;
                }
                out.push(Face { base, axes });
            }
        }
        out
    }

    /// σ + Q_r rasterized by cell centres.
    pub fn face_neighborhood(&self, f: &Face, r: f64) -> Region {
        let lo: Vec<f64> = self.lower(f).iter().map(|v| v - r).collect();
        let hi: Vec<f64> = self.upper(f).iter().map(|v| v + r).collect();
        Region::from_box(&self.grid, &lo, &hi, &format!("face{:?}+Q", f.base))
    }

    /// Inclusive cell-index range of σ + Q_r along each axis (the cells whose
    /// centres fall in the box), clipped to the grid.
    pub fn cell_range(&self, f: &Face, r: f64) -> Vec<(usize, usize)> {
        box_cell_range(&self.grid, &self.lower(f), &self.upper(f), r)
    }

    /// Marks per i-face: contained in at least one flagged cube.
    pub fn faces_of_cubes(&self, flags: &[bool], dim: usize) -> Vec<bool> {
        let mut out = vec![false; self.skeleta[dim].len()];
        for (c, cube) in self.cubes().iter().enumerate() {
            if flags[c] {
                for f in self.subfaces(cube, dim) {
                    out[self.index[dim][&f]] = true;
                }
            }
        }
        out
    }
}

pub(crate) fn box_cell_range(g: &Grid, lo: &[f64], hi: &[f64], r: f64) -> Vec<(usize, usize)> {
    let h = g.h();
    let tol = 1e-9;
    (0..g.m)
        .map(|a| {
            let t0 = ((lo[a] - r - g.lo(a)) / h - 0.5 - tol).ceil().max(0.0) as usize;
            let t1 = ((hi[a] + r - g.lo(a)) / h - 0.5 + tol).floor();
            let t1 = if t1 < 0.0 { 0 } else { (t1 as usize).min(g.res - 2) };
            (t0, t1)
        })
        .collect()
}

/// Summed-area table over the cells of a grid, for box integrals of
/// cell-averaged nodal fields (equal to trapezoidal integration over the box).
pub(crate) struct BoxSum {
    dims: Vec<usize>,
    table: Vec<f64>,
}

impl BoxSum {
    pub(crate) fn new(g: &Grid, nodal: &[f64]) -> BoxSum {
        let m = g.m;
        let nc = g.res - 1;
        let vol = g.h().powi(m as i32) / (1usize << m) as f64;
        let cells: Vec<f64> = (0..g.n_cells())
            .into_par_iter()
            .map(|c| {
                let mut k = [0usize; MAX_DIM];
                g.cell_unravel(c, &mut k);
                let mut s = 0.0;
                for corner in 0..(1usize << m) {
                    let mut idx = 0;
                    for a in 0..m {
                        idx = idx * g.res + k[a] + (corner >> a & 1);
                    }
                    s += nodal[idx];
                }
                s * vol
            })
            .collect();
        let dims = vec![nc + 1; m];
        let mut table = vec![0.0; (nc + 1).pow(m as u32)];
        // Row-major with a leading zero slab on every axis.
        let stride: Vec<usize> = (0..m).map(|a| (nc + 1).pow((m - 1 - a) as u32)).collect();
        for c in 0..cells.len() {
            let mut k = [0usize; MAX_DIM];
            g.cell_unravel(c, &mut k);
            let t: usize = (0..m).map(|a| (k[a] + 1) * stride[a]).sum();
            table[t] = cells[c];
        }
        for a in 0..m {
            for t in 0..table.len() {
                if (t / stride[a]) % (nc + 1) >= 1 {
                    table[t] += table[t - stride[a]];
                }
            }
        }
        BoxSum { dims, table }
    }

    /// Sum over cells k with lo[a] ≤ k[a] ≤ hi[a].
    pub(crate) fn sum(&self, range: &[(usize, usize)]) -> f64 {
        let m = range.len();
        if range.iter().any(|&(a, b)| a > b) {
            return 0.0;
        }
        let mut total = 0.0;
        for corner in 0..(1usize << m) {
            let mut t = 0usize;
            let mut sign = 1.0;
            for a in 0..m {
                let k = if corner >> a & 1 == 1 {
                    range[a].1 + 1
                } else {
                    sign = -sign;
                    range[a].0
                };
                t = t * self.dims[a] + k;
            }
            total += sign * self.table[t];
        }
        total
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct FaceReport {
    pub id: usize,
    pub mean_dist: f64,
    pub rescaled_energy: f64,
    pub good: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct GoodBadPartition {
    pub good: Vec<bool>,
    pub mean_dist: Vec<f64>,
    pub rescaled_energy: Vec<f64>,
    pub r: f64,
    pub lambda: f64,
    pub rho: f64,
    pub p: f64,
    pub eta: f64,
    pub basepoint: Vec<f64>,
}

impl GoodBadPartition {
    pub fn n_bad(&self) -> usize {
        self.good.iter().filter(|g| !**g).count()
    }

    pub fn bad(&self) -> Vec<bool> {
        self.good.iter().map(|g| !g).collect()
    }

    /// Re-evaluate both inequalities for one cube.
    pub fn recheck(&self, id: usize) -> bool {
        self.mean_dist[id] <= self.r && self.rescaled_energy[id] <= self.lambda
    }

    pub fn with_thresholds(&self, r: f64, lambda: f64) -> GoodBadPartition {
        let mut out = self.clone();
        out.r = r;
        out.lambda = lambda;
        out.good = (0..self.good.len()).map(|i| out.recheck(i)).collect();
        out
    }

    pub fn report(&self) -> Vec<FaceReport> {
        (0..self.good.len())
            .map(|id| FaceReport {
                id,
                mean_dist: self.mean_dist[id],
                rescaled_energy: self.rescaled_energy[id],
                good: self.good[id],
            })
            .collect()
    }
}

/// Nodal distance to the basepoint after checking membership.
pub(crate) fn nodal_distance(u: &GridMap, manifold: &TargetManifold) -> Result<Vec<f64>> {
    if u.nu != manifold.nu {
        return Err(Error::InputNotManifoldValued(format!(
            "map has {} components, target lives in R^{}",
            u.nu, manifold.nu
        )));
    }
    let worst = u
        .values
        .par_chunks(u.nu)
        .map(|v| manifold.residual(v))
        .reduce(|| 0.0, f64::max);
    if !(worst <= MEMBERSHIP_TOL) {
        return Err(Error::InputNotManifoldValued(format!("membership residual {worst:.3e}")));
    }
    Ok(u.values.par_chunks(u.nu).map(|v| manifold.dist_to_basepoint(v)).collect())
}

/// Good cubes: mean distance to a over σ+Q_{2ρη} at most R and
/// η^{−(m−p)/p}‖Du‖_{L^p(σ+Q_{2ρη})} at most λ.
pub fn classify(
    u: &GridMap,
    cub: &Cubication,
    p: f64,
    r: f64,
    lambda: f64,
    manifold: &TargetManifold,
) -> Result<GoodBadPartition> {
    if u.grid != cub.grid {
        return Err(Error::EtaMisaligned("map grid differs from the cubication grid".into()));
    }
    let dist = nodal_distance(u, manifold)?;
    let energy = gradient(u).norm_pow(p);
    let (ds, es) = (BoxSum::new(&u.grid, &dist), BoxSum::new(&u.grid, &energy));
    let m = cub.m as f64;
    let scale = cub.eta.powf(-(m - p) / p);
    let reach = 2.0 * cub.rho * cub.eta;
    let h_m = u.grid.h().powi(cub.m as i32);
    let rows: Vec<(f64, f64)> = cub
        .cubes()
        .par_iter()
        .map(|c| {
            let range = cub.cell_range(c, reach);
            let count: usize = range.iter().map(|&(a, b)| b + 1 - a).product();
            let mean = ds.sum(&range) / (count as f64 * h_m);
            let e = es.sum(&range).max(0.0);
            (mean, scale * e.powf(1.0 / p))
        })
        .collect();
    let mean_dist: Vec<f64> = rows.iter().map(|r| r.0).collect();
    let rescaled_energy: Vec<f64> = rows.iter().map(|r| r.1).collect();
    let good = rows.iter().map(|&(d, e)| d <= r && e <= lambda).collect();
    Ok(GoodBadPartition {
        good,
        mean_dist,
        rescaled_energy,
        r,
        lambda,
        rho: cub.rho,
        p,
        eta: cub.eta,
        basepoint: manifold.basepoint.clone(),
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct MeasureBoundReport {
    pub lhs: f64,
    pub term_r: f64,
    pub term_lambda: f64,
    pub ratio: f64,
}

/// |E^m_η + Q_{2ρη}| against R⁻¹∫dist(u,a) + η^p λ^{−p}∫|Du|^p over the whole grid.
pub fn bad_measure_report(
    u: &GridMap,
    cub: &Cubication,
    part: &GoodBadPartition,
    manifold: &TargetManifold,
) -> Result<MeasureBoundReport> {
    let g = &u.grid;
    let reach = 2.0 * cub.rho * cub.eta;
    let mut cells = vec![false; g.n_cells()];
    for (c, cube) in cub.cubes().iter().enumerate() {
        if part.good[c] {
            continue;
        }
        let range = cub.cell_range(cube, reach);
        let mut k = [0usize; MAX_DIM];
        for (a, &(lo, _)) in range.iter().enumerate() {
            k[a] = lo;
        }
        'outer: loop {
            cells[g.cell_ravel(&k[..g.m])] = true;
            let mut a = g.m;
            loop {
                if a == 0 {
                    break 'outer;
                }
                a -= 1;
                if k[a] < range[a].1 {
                    k[a] += 1;
                    for b in a + 1..g.m {
                        k[b] = range[b].0;
                    }
                    break;
                }
            }
        }
    }
    let lhs = cells.iter().filter(|c| **c).count() as f64 * g.h().powi(g.m as i32);
    let full = Region::full(g);
    let dist = nodal_distance(u, manifold)?;
    let term_r = crate::grid::integrate(&full, &dist) / part.r;
    let term_lambda =
        cub.eta.powf(part.p) / part.lambda.powf(part.p) * crate::grid::integrate(&full, &gradient(u).norm_pow(part.p));
    let denom = term_r + term_lambda;
    Ok(MeasureBoundReport { lhs, term_r, term_lambda, ratio: if denom > 0.0 { lhs / denom } else { 0.0 } })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::energy;

    #[test]
    fn square_counts() {
        let g = Grid::new(2, 13, 1.5).unwrap();
        let c = build_cubication(&g, 0.5, 0.5, 0.25).unwrap();
        assert_eq!((c.faces(2).len(), c.faces(1).len(), c.faces(0).len()), (9, 24, 16));
        for d in 0..=2 {
            assert_eq!(c.faces(d).len(), c.expected_count(d));
        }
    }

    #[test]
    fn single_segment() {
        let g = Grid::new(1, 9, 1.5).unwrap();
        let c = build_cubication(&g, 0.5, 1.5, 0.1).unwrap();
        assert_eq!((c.faces(1).len(), c.faces(0).len()), (1, 2));
    }

    #[test]
    fn misaligned_eta() {
        let g = Grid::new(2, 13, 1.5).unwrap();
        assert!(matches!(build_cubication(&g, 0.5, 0.4, 0.25), Err(Error::EtaMisaligned(_))));
    }

    #[test]
    fn cofaces_and_boundaries_agree() {
        let g = Grid::new(3, 13, 1.5).unwrap();
        let c = build_cubication(&g, 0.5, 0.5, 0.25).unwrap();
        for d in 0..3 {
            for f in c.faces(d) {
                for cf in c.cofaces(f) {
                    assert!(c.face_id(&cf).is_some());
                    assert!(c.boundary(&cf).contains(f));
                }
            }
        }
        // Each interior edge of a 3×3×3 complex has 4 square cofaces.
        let e = Face { base: vec![1, 1, 1], axes: 1 };
        assert_eq!(c.cofaces(&e).len(), 4);
    }

    #[test]
    fn box_sum_matches_trapezoid() {
        let g = Grid::new(2, 17, 1.0).unwrap();
        let u = GridMap::from_fn(g.clone(), 1, |x, o| o[0] = (x[0] + 2.0 * x[1]).sin());
        let f: Vec<f64> = u.values.clone();
        let bs = BoxSum::new(&g, &f);
        let lo = [-0.5, -0.25];
        let hi = [0.25, 0.75];
        let reg = Region::from_box(&g, &lo, &hi, "b");
        let range = box_cell_range(&g, &lo, &hi, 0.0);
        let direct = crate::grid::integrate(&reg, &f);
        assert!((bs.sum(&range) - direct).abs() < 1e-12);
    }

    #[test]
    fn neighborhood_of_edge_has_expected_area() {
        let g = Grid::new(2, 49, 1.5).unwrap();
        let c = build_cubication(&g, 0.5, 0.5, 0.25).unwrap();
        let e = Face { base: vec![1, 1], axes: 1 };
        let r = 0.125;
        let area = c.face_neighborhood(&e, r).measure();
        let exact = (2.0 * 0.5 + 2.0 * r) * (2.0 * r);
        assert!((area - exact).abs() <= 2.0 * (2.0 + 4.0 * r) * g.h());
    }

    #[test]
    fn constant_map_is_all_good() {
        let s = TargetManifold::sphere(2).unwrap();
        let g = Grid::new(2, 25, 1.5).unwrap();
        let u = GridMap::constant(g.clone(), &s.basepoint);
        let c = build_cubication(&g, 0.5, 0.25, 0.25).unwrap();
        let part = classify(&u, &c, 2.0, 1e-9, 1e-9, &s).unwrap();
        assert!(part.good.iter().all(|&b| b));
        let rep = bad_measure_report(&u, &c, &part, &s).unwrap();
        assert_eq!(rep.lhs, 0.0);
    }

    #[test]
    fn classify_energy_matches_region_integral() {
        let s = TargetManifold::sphere(1).unwrap();
        let g = Grid::new(2, 49, 1.5).unwrap();
        let u = GridMap::from_fn(g.clone(), 2, |x, o| {
            o[0] = (x[0] + 0.3 * x[1]).cos();
            o[1] = (x[0] + 0.3 * x[1]).sin();
        });
        let c = build_cubication(&g, 0.5, 0.5, 0.25).unwrap();
        let part = classify(&u, &c, 1.5, 10.0, 10.0, &s).unwrap();
        let cube = &c.cubes()[4];
        let reg = c.face_neighborhood(cube, 2.0 * 0.25 * 0.5);
        let e = energy(&u, 1.5, &reg).unwrap();
        let expect = 0.5f64.powf(-(2.0 - 1.5) / 1.5) * e.powf(1.0 / 1.5);
        assert!((part.rescaled_energy[4] - expect).abs() < 1e-10);
        // Monotone in the thresholds.
        let bigger = part.with_thresholds(20.0, 20.0);
        assert!(part.good.iter().zip(&bigger.good).all(|(a, b)| !a || *b));
    }
}
