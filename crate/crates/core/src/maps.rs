//! Named test maps and targets, as referenced from run configurations, plus
//! the plain mollify-and-project approximation used for maps that are already
//! bounded.

use std::path::PathBuf;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Grid, GridMap, Region, MAX_DIM};
use crate::io::read_gridmap;
use crate::manifolds::{bad_map_algebraic, embed_funnel, FunnelProfile, TargetManifold};
use crate::smoothing::{adaptive_convolve, Mollifier, ScaleField};
use crate::util::{norm, rng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ManifoldSpec {
    Sphere { n: usize },
    Euclidean { n: usize },
    FunnelSphere { n: usize, alpha: f64 },
    AlgebraicFunnel { n: usize, beta: f64 },
}

impl ManifoldSpec {
    pub fn build(&self) -> Result<TargetManifold> {
        match *self {
            ManifoldSpec::Sphere { n } => TargetManifold::sphere(n),
            ManifoldSpec::Euclidean { n } => TargetManifold::euclidean(n),
            ManifoldSpec::FunnelSphere { n, alpha } => TargetManifold::funnel_sphere(n, alpha),
            ManifoldSpec::AlgebraicFunnel { n, beta } => TargetManifold::algebraic_funnel(n, beta),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MapSpec {
    Constant { value: Vec<f64> },
    /// x ↦ x into R^m.
    Identity,
    /// x ↦ x/|x| into S^{m−1}; the origin takes e₁.
    Angular,
    /// Inverse stereographic projection of k·x + shift into S².
    Stereo { k: f64, shift: [f64; 2] },
    /// Random smooth S²-valued map on Q², reproducible from the seed.
    SmoothSphere { seed: u64 },
    /// Random smooth R^nu-valued map, reproducible from the seed.
    SmoothField { seed: u64, nu: usize },
    Funnel { alpha: f64, #[serde(default = "unit")] scale: f64 },
    AlgebraicBad { beta: f64, gamma: f64 },
    File { path: PathBuf },
}

fn unit() -> f64 {
    1.0
}

fn inv_stereo(a: f64, b: f64, o: &mut [f64]) {
    let d = 1.0 + a * a + b * b;
    o[0] = 2.0 * a / d;
    o[1] = 2.0 * b / d;
    o[2] = (a * a + b * b - 1.0) / d;
}

/// Sum of a few random plane waves with frequencies up to 2.5.
#[derive(Clone, Debug)]
struct Waves {
    terms: Vec<(Vec<f64>, f64, f64)>,
    offset: f64,
}

impl Waves {
    fn new(r: &mut impl Rng, m: usize, amp: f64) -> Waves {
        let terms = (0..3)
            .map(|_| {
                let k: Vec<f64> = (0..m).map(|_| r.gen_range(-2.5..2.5)).collect();
                (k, r.gen_range(0.0..std::f64::consts::TAU), amp * r.gen_range(0.3..1.0))
            })
            .collect();
        Waves { terms, offset: r.gen_range(-0.5..0.5) }
    }

    fn eval(&self, x: &[f64]) -> f64 {
        self.offset
            + self
                .terms
                .iter()
                .map(|(k, ph, a)| a * (k.iter().zip(x).map(|(ki, xi)| ki * xi).sum::<f64>() + ph).sin())
                .sum::<f64>()
    }
}

impl MapSpec {
    /// Sample the map on `grid`.
    pub fn build(&self, grid: &Grid) -> Result<GridMap> {
        let m = grid.m;
        match self {
            MapSpec::Constant { value } => {
                if value.is_empty() {
                    return Err(Error::InvalidInput("constant map needs a value".into()));
                }
                Ok(GridMap::constant(grid.clone(), value))
            }
            MapSpec::Identity => Ok(GridMap::from_fn(grid.clone(), m, |x, o| o.copy_from_slice(x))),
            MapSpec::Angular => Ok(GridMap::from_fn(grid.clone(), m, |x, o| {
                let r = norm(x);
                if r == 0.0 {
                    o.fill(0.0);
                    o[0] = 1.0;
                } else {
                    o.iter_mut().zip(x).for_each(|(v, xi)| *v = xi / r);
                }
            })),
            MapSpec::Stereo { k, shift } => {
                need_dim(m, 2, "stereo")?;
                Ok(GridMap::from_fn(grid.clone(), 3, |x, o| inv_stereo(k * x[0] + shift[0], k * x[1] + shift[1], o)))
            }
            MapSpec::SmoothSphere { seed } => {
                need_dim(m, 2, "smooth_sphere")?;
                let mut r = rng(*seed);
                let wa = Waves::new(&mut r, 2, 0.6);
                let wb = Waves::new(&mut r, 2, 0.6);
                Ok(GridMap::from_fn(grid.clone(), 3, |x, o| inv_stereo(wa.eval(x), wb.eval(x), o)))
            }
            MapSpec::SmoothField { seed, nu } => {
                if *nu == 0 {
                    return Err(Error::InvalidInput("smooth_field needs nu ≥ 1".into()));
                }
                let mut r = rng(*seed);
                let ws: Vec<Waves> = (0..*nu).map(|_| Waves::new(&mut r, m, 0.8)).collect();
                Ok(GridMap::from_fn(grid.clone(), *nu, |x, o| {
                    for (v, w) in o.iter_mut().zip(&ws) {
                        *v = w.eval(x);
                    }
                }))
            }
            MapSpec::Funnel { alpha, scale } => embed_funnel(m, *alpha, FunnelProfile { scale: *scale })?.to_gridmap(grid),
            MapSpec::AlgebraicBad { beta, gamma } => bad_map_algebraic(m, *beta, *gamma)?.to_gridmap(grid),
            MapSpec::File { path } => {
                if !path.exists() {
                    return Err(Error::InvalidInput(format!("map file {} does not exist", path.display())));
                }
                let u = read_gridmap(path)?;
                if u.grid != *grid {
                    return Err(Error::InvalidInput("map file grid differs from the configured grid".into()));
                }
                Ok(u)
            }
        }
    }
}

fn need_dim(m: usize, want: usize, name: &str) -> Result<()> {
    if m != want {
        return Err(Error::InvalidInput(format!("{name} map needs a {want}-dimensional domain, got {m}")));
    }
    Ok(())
}

/// The fixed battery of `count` smooth S²-valued maps used by calibration and
/// the density checks.
pub fn sphere_battery(count: usize) -> Vec<MapSpec> {
    (0..count as u64).map(|i| MapSpec::SmoothSphere { seed: 1000 + i }).collect()
}

/// Extension by point reflection through the boundary values, axis by axis:
/// u(b + t) = 2u(b) − u(b − t). Unlike even reflection this keeps first
/// derivatives continuous across the faces.
pub fn odd_extend(u: &GridMap, pad: usize) -> Result<GridMap> {
    let g = &u.grid;
    let m = g.m;
    if pad == 0 || pad >= g.res {
        return Err(Error::PaddingMisaligned(format!("padding of {pad} cells on a grid of {} nodes", g.res)));
    }
    let h = g.h();
    let res = g.res + 2 * pad;
    let grid = Grid::with_center(m, res, (res - 1) as f64 * h / 2.0, g.center.clone())?;
    let nu = u.nu;
    let last = g.res as isize - 1;
    let mut values = vec![0.0; grid.n_nodes() * nu];
    values.par_chunks_mut(nu).enumerate().for_each(|(i, out)| {
        let mut k = [0usize; MAX_DIM];
        grid.unravel(i, &mut k);
        // Per axis: (index, coefficient) pairs whose tensor product gives the value.
        let mut opts = [[(0usize, 0.0f64); 2]; MAX_DIM];
        let mut count = [1usize; MAX_DIM];
        for a in 0..m {
            let j = k[a] as isize - pad as isize;
            if j < 0 {
                opts[a] = [(0, 2.0), ((-j) as usize, -1.0)];
                count[a] = 2;
            } else if j > last {
                opts[a] = [(last as usize, 2.0), ((2 * last - j) as usize, -1.0)];
                count[a] = 2;
            } else {
                opts[a][0] = (j as usize, 1.0);
            }
        }
        out.fill(0.0);
        let total: usize = count[..m].iter().product();
        let mut src = [0usize; MAX_DIM];
        for code in 0..total {
            let mut c = code;
            let mut w = 1.0;
            for a in 0..m {
                let (idx, coef) = opts[a][c % count[a]];
                c /= count[a];
                src[a] = idx;
                w *= coef;
            }
            let v = u.value(g.ravel(&src[..m]));
            out.iter_mut().zip(v).for_each(|(o, x)| *o += w * x);
        }
    });
    GridMap::new(grid, nu, values)
}

/// Π∘(φ_ε * u) with a constant kernel scale ε, convolving the point-reflected
/// extension so that the kernel never leaves the grid.
pub fn mollify_project(u: &GridMap, manifold: &TargetManifold, eps: f64, kernel_order: usize) -> Result<GridMap> {
    let g = &u.grid;
    if !(eps > 0.0) {
        return Err(Error::ParameterOutOfRange(format!("kernel scale ε = {eps} must be positive")));
    }
    let ext = odd_extend(u, (eps / g.h()).ceil() as usize + 1)?;
    let psi = ScaleField::constant(&ext.grid, eps);
    let phi = Mollifier::new(g.m, kernel_order)?;
    let omega = Region::cube(&ext.grid, &g.center, g.inradius);
    let mut out = adaptive_convolve(&ext, &psi, &phi, &omega)?.map.restrict(g)?;
    out.values.par_chunks_mut(u.nu).try_for_each(|v| -> Result<()> {
        let p = manifold.project(v)?;
        v.copy_from_slice(&p);
        Ok(())
    })?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{sobolev_seminorm, w1p_distance};

    #[test]
    fn specs_round_trip_through_json() {
        let s = MapSpec::Funnel { alpha: 0.4, scale: 1.0 };
        let j = serde_json::to_string(&s).unwrap();
        assert_eq!(serde_json::from_str::<MapSpec>(&j).unwrap(), s);
        let m: ManifoldSpec = serde_json::from_str(r#"{"kind":"sphere","n":2}"#).unwrap();
        assert_eq!(m, ManifoldSpec::Sphere { n: 2 });
    }

    #[test]
    fn battery_maps_are_sphere_valued() {
        let g = Grid::new(2, 33, 1.0).unwrap();
        for s in sphere_battery(3) {
            let u = s.build(&g).unwrap();
            assert!(u.values.chunks(3).all(|v| (norm(v) - 1.0).abs() < 1e-12));
        }
    }

    #[test]
    fn odd_extension_continues_affine_maps() {
        let g = Grid::new(2, 9, 1.0).unwrap();
        let u = GridMap::from_fn(g, 1, |x, o| o[0] = 0.5 + 2.0 * x[0] - x[1]);
        let e = odd_extend(&u, 3).unwrap();
        for i in 0..e.n_nodes() {
            let x = e.grid.node_point(i);
            assert!((e.value(i)[0] - (0.5 + 2.0 * x[0] - x[1])).abs() < 1e-12);
        }
    }

    #[test]
    fn mollify_project_is_close_for_smooth_maps() {
        let g = Grid::new(2, 129, 1.0).unwrap();
        let s2 = TargetManifold::sphere(2).unwrap();
        let u = MapSpec::SmoothSphere { seed: 3 }.build(&g).unwrap();
        let v = mollify_project(&u, &s2, 4.0 * g.h(), 4).unwrap();
        let full = Region::full(&g);
        let (_, d) = w1p_distance(&u, &v, 2.0, &full).unwrap();
        let s = sobolev_seminorm(&u, 2.0, &full).unwrap();
        assert!(d < 0.05 * s, "{d} {s}");
        assert!(v.values.chunks(3).all(|x| (norm(x) - 1.0).abs() < 1e-12));
    }
}
