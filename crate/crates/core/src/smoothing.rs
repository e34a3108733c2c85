//! Variable-scale mollification x ↦ ∫ u(x − ψ(x)y) φ(y) dy and the
//! transition scale field used by the pipeline.

use log::warn;
use rayon::prelude::*;
use serde::Serialize;

use crate::cubication::{Cubication, GoodBadPartition};
use crate::error::{Error, Result};
use crate::grid::{gradient, integrate, Grid, GridMap, Region, MAX_DIM};
use crate::util::{gauss_legendre, smoothstep3};

/// Fraction of ρ̲η over which ψ decays from its plateau to zero.
const DECAY: f64 = 0.95;

#[derive(Clone, Debug)]
pub struct ScaleField {
    pub field: GridMap,
    pub plateau: f64,
    pub rho_low: f64,
    pub rho: f64,
    pub eta: f64,
    /// Measured max |Dψ| on the grid.
    pub lipschitz: f64,
}

impl ScaleField {
    pub fn constant(grid: &Grid, value: f64) -> ScaleField {
        ScaleField {
            field: GridMap::constant(grid.clone(), &[value]),
            plateau: value,
            rho_low: 0.0,
            rho: 0.0,
            eta: 0.0,
            lipschitz: 0.0,
        }
    }

    /// Wrap an arbitrary nonnegative scalar field.
    pub fn from_gridmap(field: GridMap) -> Result<ScaleField> {
        if field.nu != 1 || field.values.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::InvalidInput("scale field must be a nonnegative scalar map".into()));
        }
        let lipschitz = gradient(&field).norms().into_iter().fold(0.0, f64::max);
        let plateau = field.values.iter().cloned().fold(0.0, f64::max);
        Ok(ScaleField { field, plateau, rho_low: 0.0, rho: 0.0, eta: 0.0, lipschitz })
    }

    pub fn max(&self) -> f64 {
        self.field.values.iter().cloned().fold(0.0, f64::max)
    }
}

/// max-norm distance from x to the union of the good cubes, looking only at
/// cubes adjacent to the one containing x (enough for distances below η).
fn dist_to_good(cub: &Cubication, good: &[bool], x: &[f64]) -> f64 {
    let m = cub.m;
    let two = 2.0 * cub.eta;
    let n = cub.n as isize;
    let mut k0 = [0isize; MAX_DIM];
    for a in 0..m {
        k0[a] = ((x[a] - cub.origin[a]) / two).floor() as isize;
    }
    let mut best = f64::INFINITY;
    for code in 0..3usize.pow(m as u32) {
        let mut idx = 0usize;
        let mut d: f64 = 0.0;
        let mut ok = true;
        for a in 0..m {
            let k = k0[a] + (code / 3usize.pow(a as u32) % 3) as isize - 1;
            if k < 0 || k >= n {
                ok = false;
                break;
            }
            idx = idx * cub.n + k as usize;
            let lo = cub.origin[a] + two * k as f64;
            let da = if x[a] < lo { lo - x[a] } else { (x[a] - lo - two).max(0.0) };
            d = d.max(da);
        }
        if ok && good[idx] {
            best = best.min(d);
        }
    }
    best
}

/// ψ = tη on the good cubes, decaying to zero within 0.95·ρ̲η of them.
pub fn build_transition(
    cub: &Cubication,
    part: &GoodBadPartition,
    t: f64,
    rho_low: f64,
    rho: f64,
) -> Result<ScaleField> {
    let eta = cub.eta;
    // Slope of the profile is at most 1.5·t/(0.95·ρ̲).
    if !(t > 0.0 && t < rho - rho_low && rho_low > 0.0 && 1.5 * t / (DECAY * rho_low) < 1.0) {
        return Err(Error::TransitionInfeasible(format!(
            "t = {t} needs 0 < t < ρ − ρ̲ = {} and slope 1.5t/(0.95ρ̲) < 1",
            rho - rho_low
        )));
    }
    if part.good.len() != cub.cubes().len() {
        return Err(Error::InvalidInput("partition does not match the cubication".into()));
    }
    let width = DECAY * rho_low * eta;
    let field = GridMap::from_fn(cub.grid.clone(), 1, |x, o| {
        let d = dist_to_good(cub, &part.good, x);
        o[0] = if d == 0.0 { t * eta } else { t * eta * (1.0 - smoothstep3(d / width)) };
    });
    let lipschitz = gradient(&field).norms().into_iter().fold(0.0, f64::max);
    let sf = ScaleField { field, plateau: t * eta, rho_low, rho, eta, lipschitz };
    verify_transition(cub, part, &sf)?;
    Ok(sf)
}

/// Checks the four defining properties of ψ on the grid.
pub fn verify_transition(cub: &Cubication, part: &GoodBadPartition, sf: &ScaleField) -> Result<()> {
    let g = &sf.field.grid;
    let bound = (sf.rho - sf.rho_low) * sf.eta;
    let mut x = [0.0; MAX_DIM];
    for i in 0..g.n_nodes() {
        g.node_coords(i, &mut x);
        let v = sf.field.values[i];
        let d = dist_to_good(cub, &part.good, &x[..g.m]);
        let ok = v >= 0.0 && v < bound && (d > 0.0 || v == sf.plateau) && (v == 0.0 || d < sf.rho_low * sf.eta);
        if !ok {
            return Err(Error::TransitionInfeasible(format!("scale field property fails at node {i} (ψ = {v}, dist = {d})")));
        }
    }
    if sf.lipschitz >= 1.0 {
        return Err(Error::TransitionInfeasible(format!("measured |Dψ| = {} ≥ 1", sf.lipschitz)));
    }
    Ok(())
}

/// Radial bump exp(−1/(1−|y|²)) integrated by a tensor Gauss–Legendre rule
/// on [−1,1]^m; weights are renormalized to unit mass.
#[derive(Clone, Debug)]
pub struct Mollifier {
    pub m: usize,
    pub nodes: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
}

impl Mollifier {
    pub fn new(m: usize, order: usize) -> Result<Mollifier> {
        if m == 0 || m > MAX_DIM || order < 2 {
            return Err(Error::InvalidInput(format!("mollifier needs 1 ≤ m ≤ {MAX_DIM} and order ≥ 2")));
        }
        let (xs, ws) = gauss_legendre(order);
        let mut nodes = Vec::new();
        let mut weights = Vec::new();
        for code in 0..order.pow(m as u32) {
            let mut y = vec![0.0; m];
            let mut w = 1.0;
            let mut c = code;
            for a in 0..m {
                y[a] = xs[c % order];
                w *= ws[c % order];
                c /= order;
            }
            let r2: f64 = y.iter().map(|v| v * v).sum();
            if r2 < 1.0 {
                nodes.push(y);
                weights.push(w * (-1.0 / (1.0 - r2)).exp());
            }
        }
        let mass: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= mass);
        Ok(Mollifier { m, nodes, weights })
    }

    pub fn mass(&self) -> f64 {
        self.weights.iter().sum()
    }
}

#[derive(Clone, Debug)]
pub struct Smoothed {
    pub map: GridMap,
    /// Set when ψ never reaches two grid cells, in which case the map is copied.
    pub identity_fallback: bool,
}

/// Adaptive convolution on the nodes of ω; nodes outside ω and nodes with
/// ψ = 0 are copied unchanged.
pub fn adaptive_convolve(u: &GridMap, psi: &ScaleField, phi: &Mollifier, omega: &Region) -> Result<Smoothed> {
    let g = &u.grid;
    if psi.field.grid != *g || omega.grid != *g || phi.m != g.m {
        return Err(Error::InvalidInput("map, scale field, region and kernel must share one grid".into()));
    }
    if psi.max() < 2.0 * g.h() {
        warn!("kernel scale {:.3e} is below two grid cells; smoothing is the identity", psi.max());
        return Ok(Smoothed { map: u.clone(), identity_fallback: true });
    }
    let mask = omega.node_mask();
    let nu = u.nu;
    let m = g.m;
    let mut values = u.values.clone();
    values.par_chunks_mut(nu).enumerate().try_for_each(|(i, out)| -> Result<()> {
        let s = psi.field.values[i];
        if !mask[i] || s == 0.0 {
            return Ok(());
        }
        let mut x = [0.0; MAX_DIM];
        g.node_coords(i, &mut x);
        let mut acc = [0.0; 16];
        let mut v = vec![0.0; nu];
        let mut y = [0.0; MAX_DIM];
        for (node, w) in phi.nodes.iter().zip(&phi.weights) {
            for a in 0..m {
                y[a] = x[a] - s * node[a];
            }
            u.sample(&y[..m], &mut v).map_err(|_| Error::DomainExceeded(format!("kernel at node {i} leaves the grid")))?;
            for c in 0..nu {
                acc[c] += w * v[c];
            }
        }
        out.copy_from_slice(&acc[..nu]);
        Ok(())
    })?;
    Ok(Smoothed { map: GridMap { grid: g.clone(), nu, values }, identity_fallback: false })
}

/// max over the kernel nodes v of ‖u(· − ψv) − u‖_{L^p(ω)}. Because the same
/// nodes define the discrete convolution, this bounds the convolution error.
pub fn translation_modulus(u: &GridMap, psi: &ScaleField, phi: &Mollifier, p: f64, omega: &Region) -> Result<f64> {
    let g = &u.grid;
    let weights = omega.node_weights();
    let nu = u.nu;
    let mut best: f64 = 0.0;
    for node in &phi.nodes {
        let vals: Result<Vec<f64>> = (0..g.n_nodes())
            .into_par_iter()
            .map(|i| {
                if weights[i] == 0.0 {
                    return Ok(0.0);
                }
                let s = psi.field.values[i];
                if s == 0.0 {
                    return Ok(0.0);
                }
                let mut x = [0.0; MAX_DIM];
                g.node_coords(i, &mut x);
                for a in 0..g.m {
                    x[a] -= s * node[a];
                }
                let mut v = vec![0.0; nu];
                u.sample(&x[..g.m], &mut v)?;
                let d2: f64 = v.iter().zip(u.value(i)).map(|(a, b)| (a - b) * (a - b)).sum();
                Ok(d2.sqrt().powf(p))
            })
            .collect();
        let vals = vals?;
        best = best.max(crate::grid::integrate_weighted(&weights, &vals).powf(1.0 / p));
    }
    Ok(best)
}

#[derive(Clone, Debug, Serialize)]
pub struct DerivativeBound {
    pub smoothed_seminorm: f64,
    pub source_seminorm: f64,
    pub lipschitz: f64,
    pub factor: f64,
    /// ‖D(φ_ψ*u)‖_{L^p(ω)} / ((1−‖Dψ‖)^{−1/p}‖Du‖_{L^p(Ω)}).
    pub c_emp: f64,
}

pub fn derivative_bound(u: &GridMap, out: &GridMap, psi: &ScaleField, p: f64, omega: &Region) -> Result<DerivativeBound> {
    if psi.lipschitz >= 1.0 {
        return Err(Error::TransitionInfeasible(format!("measured |Dψ| = {} ≥ 1", psi.lipschitz)));
    }
    let a = integrate(omega, &gradient(out).norm_pow(p)).powf(1.0 / p);
    let b = integrate(&Region::full(&u.grid), &gradient(u).norm_pow(p)).powf(1.0 / p);
    let factor = (1.0 - psi.lipschitz).powf(-1.0 / p);
    Ok(DerivativeBound {
        smoothed_seminorm: a,
        source_seminorm: b,
        lipschitz: psi.lipschitz,
        factor,
        c_emp: if b > 0.0 { a / (factor * b) } else { 0.0 },
    })
}

/// Nodes at which ψ(x) + margin fits inside the grid, as a region of cells
/// whose nodes all qualify.
pub fn admissible_region(psi: &ScaleField) -> Region {
    let g = &psi.field.grid;
    let ok: Vec<bool> = (0..g.n_nodes())
        .map(|i| {
            let x = g.node_point(i);
            let s = psi.field.values[i];
            (0..g.m).all(|a| x[a] - s >= g.lo(a) - 1e-12 && x[a] + s <= g.hi(a) + 1e-12)
        })
        .collect();
    let h = g.h();
    Region::from_cells(g, "admissible", |c| {
        let k: Vec<usize> = (0..g.m).map(|a| g.frac_index(a, c[a] - 0.5 * h).round() as usize).collect();
        (0..1usize << g.m).all(|corner| {
            let kk: Vec<usize> = (0..g.m).map(|a| k[a] + (corner >> a & 1)).collect();
            ok[g.ravel(&kk)]
        })
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cubication::{build_cubication, classify};
    use crate::manifolds::TargetManifold;

    fn grid() -> Grid {
        Grid::new(2, 65, 1.0).unwrap()
    }

    #[test]
    fn kernel_has_unit_mass() {
        for m in 1..=3 {
            let k = Mollifier::new(m, 8).unwrap();
            assert!((k.mass() - 1.0).abs() < 1e-12);
            assert!(k.weights.iter().all(|w| *w >= 0.0));
        }
    }

    #[test]
    fn zero_scale_is_identity() {
        let g = grid();
        let u = GridMap::from_fn(g.clone(), 1, |x, o| o[0] = (3.0 * x[0]).sin() * x[1]);
        let psi = ScaleField::constant(&g, 0.0);
        let out = adaptive_convolve(&u, &psi, &Mollifier::new(2, 6).unwrap(), &Region::full(&g)).unwrap();
        assert_eq!(out.map, u);
    }

    #[test]
    fn constants_and_affine_maps_are_preserved() {
        let g = grid();
        let psi = ScaleField::constant(&g, 0.1);
        let omega = admissible_region(&psi);
        let k = Mollifier::new(2, 8).unwrap();
        let one = GridMap::constant(g.clone(), &[1.0]);
        let out = adaptive_convolve(&one, &psi, &k, &omega).unwrap().map;
        assert!(out.values.iter().all(|v| (v - 1.0).abs() < 1e-10));
        let aff = GridMap::from_fn(g.clone(), 2, |x, o| {
            o[0] = 2.0 * x[0] - x[1] + 0.3;
            o[1] = x[1];
        });
        let out = adaptive_convolve(&aff, &psi, &k, &omega).unwrap().map;
        let mask = omega.node_mask();
        for i in 0..g.n_nodes() {
            if mask[i] {
                for c in 0..2 {
                    assert!((out.value(i)[c] - aff.value(i)[c]).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn modulus_bounds_error_and_lipschitz_bound() {
        let g = grid();
        let psi = ScaleField::constant(&g, 0.08);
        let omega = admissible_region(&psi);
        let k = Mollifier::new(2, 6).unwrap();
        let u = GridMap::from_fn(g.clone(), 1, |x, o| o[0] = 0.7 * x[0] + 0.2 * x[1]);
        let out = adaptive_convolve(&u, &psi, &k, &omega).unwrap().map;
        let (err, _) = crate::grid::w1p_distance(&out, &u, 2.0, &omega).unwrap();
        let tm = translation_modulus(&u, &psi, &k, 2.0, &omega).unwrap();
        assert!(tm >= err);
        let lip = (0.7f64.powi(2) + 0.04).sqrt();
        let bound = lip * 0.08 * omega.measure().sqrt();
        assert!(tm <= bound * 1.1);
    }

    #[test]
    fn transition_trivial_and_checkerboard() {
        let g = Grid::new(2, 97, 1.5).unwrap();
        let cub = build_cubication(&g, 0.5, 0.25, 0.25).unwrap();
        let s2 = TargetManifold::sphere(2).unwrap();
        let u = GridMap::constant(g.clone(), &[0.0, 0.0, 1.0]);
        let mut part = classify(&u, &cub, 2.0, 1.0, 1.0, &s2).unwrap();
        let t = 0.06;
        let sf = build_transition(&cub, &part, t, 0.125, 0.25).unwrap();
        assert!(sf.field.values.iter().all(|v| *v == t * 0.25));
        part.good.iter_mut().for_each(|v| *v = false);
        let sf = build_transition(&cub, &part, t, 0.125, 0.25).unwrap();
        assert!(sf.field.values.iter().all(|v| *v == 0.0));
        let n = cub.n;
        for (id, v) in part.good.iter_mut().enumerate() {
            *v = (id / n + id % n).is_multiple_of(2);
        }
        let sf = build_transition(&cub, &part, t, 0.125, 0.25).unwrap();
        assert!(sf.lipschitz < 1.0);
        assert!(build_transition(&cub, &part, 0.2, 0.125, 0.25).is_err());
    }
}
