//! Bounded extensions of boundary data (chart extension, global trim, 1-d
//! geodesics) and the degree machinery that certifies when no bounded
//! extension with controlled energy exists.

use std::f64::consts::PI;

use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::cubication::build_cubication;
use crate::error::{Error, Result, TrimFailure};
use crate::grid::{energy, gradient, integrate, integrate_weighted, Grid, GridMap, Region, MAX_DIM};
use crate::homogenization::{boundary_energy, radial_pullback};
use crate::manifolds::{funnel_lambda, funnel_lambda_d, polyline_length, GlobalChart, ManifoldKind, TargetManifold};
use crate::opening::open_map;
use crate::util::{norm, rng};

#[derive(Clone, Debug)]
pub struct TrimResult {
    pub map: GridMap,
    /// Max deviation from the input on boundary nodes.
    pub boundary_residual: f64,
    /// ‖Dv‖_{L^p(Q)} / (‖Du‖_{L^p(Q)} + ‖Du‖_{L^p(∂Q)}).
    pub energy_ratio: f64,
    /// Largest jump between adjacent nodes.
    pub continuity_modulus: f64,
    /// Nodes whose chart value had to be pulled back into the κ′ ball.
    pub clamped_nodes: usize,
    /// Cube inradius at which a global trim succeeded.
    pub cube_inradius: Option<f64>,
}

/// Chart radius used by the trims when none is given.
pub fn default_chart_radius(m: &TargetManifold) -> f64 {
    match m.kind {
        ManifoldKind::Sphere => 1.0,
        ManifoldKind::Euclidean => 1.0,
        ManifoldKind::FunnelSphere { .. } => 0.5,
        ManifoldKind::AlgebraicFunnel { .. } => 0.2,
    }
}

/// Boundary-energy threshold α on a square of inradius r for p = 2: a loop of
/// length 8r with ‖u′‖_2 ≤ α has every point within √(2r)·α of any other
/// along the loop, which must stay below the chart radius κ.
pub fn small_energy_threshold(p: usize, inradius: f64, kappa: f64) -> Result<f64> {
    if p != 2 {
        return Err(Error::ParameterOutOfRange(format!(
            "closed-form threshold available for p = 2 only (got p = {p}); pass α explicitly"
        )));
    }
    Ok(kappa / (2.0 * inradius).sqrt())
}

fn boundary_nodes(g: &Grid) -> Vec<usize> {
    let mut k = vec![0usize; g.m];
    (0..g.n_nodes())
        .filter(|&i| {
            g.unravel(i, &mut k);
            k.iter().any(|&v| v == 0 || v == g.res - 1)
        })
        .collect()
}

fn max_jump(u: &GridMap) -> f64 {
    let g = &u.grid;
    let mut k = vec![0usize; g.m];
    let mut worst: f64 = 0.0;
    for i in 0..g.n_nodes() {
        g.unravel(i, &mut k);
        for a in 0..g.m {
            if k[a] + 1 < g.res {
                let j = i + g.stride(a);
                let d = u.value(i).iter().zip(u.value(j)).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
                worst = worst.max(d);
            }
        }
    }
    worst
}

/// Node at the centre of the +x₁ facet.
fn facet_centre_node(g: &Grid) -> usize {
    let mut k = vec![(g.res - 1) / 2; g.m];
    k[0] = g.res - 1;
    g.ravel(&k)
}

/// Extension through one chart: boundary values are pushed into the chart
/// at ξ, extended as a cone t·z(x/|x|_∞) (t the max-norm radius), clamped to
/// the κ′ ball and pulled back. Boundary nodes are copied unchanged.
pub fn trim_small_energy(u: &GridMap, manifold: &TargetManifold, alpha: f64, kappa: f64) -> Result<TrimResult> {
    let g = &u.grid;
    let p = g.m as f64;
    if u.nu != manifold.nu {
        return Err(Error::InvalidInput("map and manifold dimensions differ".into()));
    }
    let eb = boundary_energy(u, p).powf(1.0 / p);
    if eb > alpha {
        return Err(Error::NotSmallEnergy { energy: eb, alpha });
    }
    let xi = manifold.project(u.value(facet_centre_node(g)))?;
    let chart = manifold.chart_at(&xi, kappa)?;
    let n = manifold.n;
    let bnodes = boundary_nodes(g);
    let mut z = GridMap::constant(g.clone(), &vec![0.0; n]);
    for &i in &bnodes {
        z.value_mut(i).copy_from_slice(&chart.forward(u.value(i)));
    }
    let z = radial_pullback(&z);
    let half = (g.res - 1) as f64 / 2.0;
    let kp = chart.kappa_prime;
    let mut clamped = 0usize;
    let mut values = u.values.clone();
    let is_b: Vec<bool> = {
        let mut v = vec![false; g.n_nodes()];
        bnodes.iter().for_each(|&i| v[i] = true);
        v
    };
    let mut k = vec![0usize; g.m];
    for i in 0..g.n_nodes() {
        if is_b[i] {
            continue;
        }
        g.unravel(i, &mut k);
        let t = k.iter().map(|&v| (v as f64 - half).abs()).fold(0.0, f64::max) / half;
        let mut w: Vec<f64> = z.value(i).iter().map(|v| t * v).collect();
        let r = norm(&w);
        if r > kp {
            w.iter_mut().for_each(|v| *v *= kp / r);
            clamped += 1;
        }
        let y = chart.inverse(&w);
        values[i * u.nu..(i + 1) * u.nu].copy_from_slice(&y);
    }
    let v = GridMap { grid: g.clone(), nu: u.nu, values };
    let full = Region::full(g);
    let dv = energy(&v, p, &full)?.powf(1.0 / p);
    let du = energy(u, p, &full)?.powf(1.0 / p);
    let den = du + eb;
    let boundary_residual =
        bnodes.iter().map(|&i| max_abs_diff(u.value(i), v.value(i))).fold(0.0, f64::max);
    Ok(TrimResult {
        continuity_modulus: max_jump(&v),
        map: v,
        boundary_residual,
        energy_ratio: if den > 0.0 { dv / den } else { 0.0 },
        clamped_nodes: clamped,
        cube_inradius: Some(g.inradius),
    })
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Options for the global trim.
#[derive(Clone, Debug)]
pub struct GlobalTrimOptions {
    pub rho: f64,
    pub kappa: f64,
    /// Smallest admissible cube inradius in cells of the working grid.
    pub min_cells: usize,
}

impl GlobalTrimOptions {
    pub fn for_manifold(m: &TargetManifold) -> Self {
        GlobalTrimOptions { rho: 0.25, kappa: default_chart_radius(m), min_cells: 3 }
    }
}

/// Trim a map on Q^p (p = grid dimension = 2). A collar x ↦ u(x/|x|_∞) is
/// added on Q_2∖Q_1, the result is opened around the skeleton of cubes of
/// inradius μ covering Q_{3/2}, each cube is trimmed in a chart, and the
/// picture on Q_2 is read back on Q_1. μ is halved until every cube passes.
pub fn trim_global(u: &GridMap, manifold: &TargetManifold, opts: &GlobalTrimOptions) -> Result<TrimResult> {
    let g = &u.grid;
    let p = g.m;
    if g.inradius != 1.0 || g.center.iter().any(|c| *c != 0.0) || g.res.is_multiple_of(2) {
        return Err(Error::InvalidInput("global trim expects the centred unit cube with odd resolution".into()));
    }
    let pe = p as f64;
    let eb = boundary_energy(u, pe);
    if !eb.is_finite() {
        return Err(Error::InvalidInput("boundary trace has infinite energy".into()));
    }
    let wg = Grid::new(p, g.res, 2.0)?;
    let w = GridMap::from_fn(wg.clone(), u.nu, |y, out| {
        let t = y.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let q: Vec<f64> = if t <= 1.0 { y.to_vec() } else { y.iter().map(|v| v / t).collect() };
        u.sample(&q, out).expect("collar sample inside the unit cube");
        let on_node = (0..g.m).all(|a| g.node_index_of(a, q[a]).is_some());
        if !on_node {
            if let Ok(pr) = manifold.project(out) {
                out.copy_from_slice(&pr);
            }
        }
    });
    let h = wg.h();
    let mut eta = 0.75;
    let mut last_failure: Option<TrimFailure> = None;
    while eta / h >= opts.min_cells as f64 - 1e-9 {
        if ((eta / h).round() - eta / h).abs() > 1e-9 {
            break;
        }
        let cub = build_cubication(&wg, 0.5, eta, opts.rho)?;
        let sel = vec![true; cub.faces(p - 1).len()];
        let (_, mut w_op) = open_map(&w, &cub, p - 1, &sel, pe)?;
        for i in 0..wg.n_nodes() {
            if w_op.value(i) != w.value(i) {
                let pr = manifold.project(w_op.value(i))?;
                w_op.value_mut(i).copy_from_slice(&pr);
            }
        }
        let npts = (2.0 * eta / h).round() as usize + 1;
        let alpha = small_energy_threshold(p, eta, opts.kappa)?;
        let results: Vec<(usize, Result<TrimResult>)> = cub
            .cubes()
            .par_iter()
            .enumerate()
            .map(|(id, c)| {
                let centre = cub.center(c);
                let lg = Grid::with_center(p, npts, eta, centre.clone()).expect("cube grid");
                let lo: Vec<usize> =
                    (0..p).map(|a| wg.node_index_of(a, cub.lower(c)[a]).expect("aligned corner")).collect();
                let mut vals = Vec::with_capacity(lg.n_nodes() * u.nu);
                let mut k = vec![0usize; p];
                let mut kk = vec![0usize; p];
                for i in 0..lg.n_nodes() {
                    lg.unravel(i, &mut k);
                    for a in 0..p {
                        kk[a] = lo[a] + k[a];
                    }
                    vals.extend_from_slice(w_op.value(wg.ravel(&kk)));
                }
                let local = GridMap { grid: lg, nu: u.nu, values: vals };
                (id, trim_small_energy(&local, manifold, alpha, opts.kappa))
            })
            .collect();
        let mut out = w_op.clone();
        let mut failed = None;
        for (id, r) in results {
            match r {
                Ok(t) => {
                    let c = &cub.cubes()[id];
                    let lo: Vec<usize> =
                        (0..p).map(|a| wg.node_index_of(a, cub.lower(c)[a]).expect("aligned corner")).collect();
                    let mut k = vec![0usize; p];
                    let mut kk = vec![0usize; p];
                    for i in 0..t.map.grid.n_nodes() {
                        t.map.grid.unravel(i, &mut k);
                        if k.iter().any(|&v| v == 0 || v == npts - 1) {
                            continue;
                        }
                        for a in 0..p {
                            kk[a] = lo[a] + k[a];
                        }
                        out.value_mut(wg.ravel(&kk)).copy_from_slice(t.map.value(i));
                    }
                }
                Err(e) => {
                    if failed.is_none() {
                        failed = Some((id, e));
                    }
                }
            }
        }
        match failed {
            None => {
                let v = GridMap { grid: g.clone(), nu: u.nu, values: out.values };
                let full = Region::full(g);
                let dv = energy(&v, pe, &full)?.powf(1.0 / pe);
                let du = energy(u, pe, &full)?.powf(1.0 / pe);
                let den = du + eb.powf(1.0 / pe);
                let bn = boundary_nodes(g);
                return Ok(TrimResult {
                    boundary_residual: bn.iter().map(|&i| max_abs_diff(u.value(i), v.value(i))).fold(0.0, f64::max),
                    energy_ratio: if den > 0.0 { dv / den } else { 0.0 },
                    continuity_modulus: max_jump(&v),
                    clamped_nodes: 0,
                    map: v,
                    cube_inradius: Some(eta / 2.0),
                });
            }
            Some((id, e)) => {
                let c = &cub.cubes()[id];
                let centre: Vec<f64> = cub.center(c).iter().map(|v| v / 2.0).collect();
                let (probe_degree, probe) = failure_probe(&w_op, &cub.lower(c), &cub.upper(c), manifold);
                last_failure = Some(TrimFailure {
                    cube_center: centre,
                    cube_inradius: eta / 2.0,
                    reason: e.to_string(),
                    probe_degree,
                    probe,
                });
            }
        }
        eta /= 2.0;
    }
    Err(Error::TrimmingFailed(Box::new(last_failure.unwrap_or(TrimFailure {
        cube_center: vec![0.0; p],
        cube_inradius: 0.0,
        reason: "no admissible subdivision".into(),
        probe_degree: None,
        probe: None,
    }))))
}

/// Winding number of a failing square's boundary around the basepoint in the
/// global chart, if the target has one and the grid is two-dimensional.
fn failure_probe(w: &GridMap, lo: &[f64], hi: &[f64], m: &TargetManifold) -> (Option<i64>, Option<Vec<f64>>) {
    let Some(chart) = m.global_chart() else { return (None, None) };
    if w.grid.m != 2 {
        return (None, Some(m.basepoint.clone()));
    }
    let g = &w.grid;
    let k0: Vec<usize> = (0..2).map(|a| g.node_index_of(a, lo[a]).unwrap_or(0)).collect();
    let k1: Vec<usize> = (0..2).map(|a| g.node_index_of(a, hi[a]).unwrap_or(0)).collect();
    let loop_nodes = square_loop(g, &k0, &k1);
    let pts: Vec<Vec<f64>> = loop_nodes.iter().map(|&i| chart.forward(w.value(i))).collect();
    let y = chart.forward(&m.basepoint);
    (winding_of_loop(&pts, &y).ok(), Some(m.basepoint.clone()))
}

/// Counter-clockwise node loop around the square with corner indices k0, k1.
fn square_loop(g: &Grid, k0: &[usize], k1: &[usize]) -> Vec<usize> {
    let mut out = Vec::new();
    for i in k0[0]..k1[0] {
        out.push(g.ravel(&[i, k0[1]]));
    }
    for j in k0[1]..k1[1] {
        out.push(g.ravel(&[k1[0], j]));
    }
    for i in (k0[0] + 1..=k1[0]).rev() {
        out.push(g.ravel(&[i, k1[1]]));
    }
    for j in (k0[1] + 1..=k1[1]).rev() {
        out.push(g.ravel(&[k0[0], j]));
    }
    out
}

/// Winding number of a closed polygon around y with the stability margin.
fn winding_of_loop(pts: &[Vec<f64>], y: &[f64]) -> Result<i64> {
    let n = pts.len();
    let mut min_d = f64::INFINITY;
    let mut max_step: f64 = 0.0;
    for i in 0..n {
        let a = &pts[i];
        let b = &pts[(i + 1) % n];
        min_d = min_d.min(((a[0] - y[0]).powi(2) + (a[1] - y[1]).powi(2)).sqrt());
        max_step = max_step.max(((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt());
    }
    if !(min_d >= 2.0 * max_step) {
        return Err(Error::ProbeUnstable(format!(
            "boundary passes within {min_d:.3e} of the probe, step {max_step:.3e}"
        )));
    }
    let mut total = 0.0;
    for i in 0..n {
        let a = &pts[i];
        let b = &pts[(i + 1) % n];
        let (ax, ay) = (a[0] - y[0], a[1] - y[1]);
        let (bx, by) = (b[0] - y[0], b[1] - y[1]);
        total += (ax * by - ay * bx).atan2(ax * bx + ay * by);
    }
    Ok((total / (2.0 * PI)).round() as i64)
}

/// Result of the one-dimensional trim.
#[derive(Clone, Debug)]
pub struct GeodesicTrim {
    pub map: GridMap,
    pub length: f64,
    pub reference: f64,
}

/// Shortest path between two points of N, sampled by arc length on Q¹.
pub fn geodesic_trim_1d(a: &[f64], b: &[f64], manifold: &TargetManifold, res: usize) -> Result<GeodesicTrim> {
    let g = Grid::new(1, res, 1.0)?;
    let pts = manifold.geodesic_path(a, b, 256)?;
    let length = polyline_length(&pts);
    let reference = manifold.geodesic_distance(a, b)?;
    let mut cum = vec![0.0];
    for w in pts.windows(2) {
        let d = crate::util::dist(&w[0], &w[1]);
        cum.push(cum.last().unwrap() + d);
    }
    let nu = manifold.nu;
    let mut values = Vec::with_capacity(res * nu);
    for i in 0..res {
        if i == 0 {
            values.extend_from_slice(a);
            continue;
        }
        if i == res - 1 {
            values.extend_from_slice(b);
            continue;
        }
        if length == 0.0 {
            values.extend_from_slice(a);
            continue;
        }
        let s = length * i as f64 / (res - 1) as f64;
        let j = cum.partition_point(|&c| c <= s).clamp(1, pts.len() - 1);
        let seg = cum[j] - cum[j - 1];
        let t = if seg > 0.0 { (s - cum[j - 1]) / seg } else { 0.0 };
        let q: Vec<f64> = (0..nu).map(|c| pts[j - 1][c] + t * (pts[j][c] - pts[j - 1][c])).collect();
        values.extend_from_slice(&manifold.project(&q)?);
    }
    Ok(GeodesicTrim { map: GridMap { grid: g, nu, values }, length, reference })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum DegreeMethod {
    /// Winding number of the boundary loop (n = 2).
    Winding,
    /// Signed count of Kuhn simplices whose image contains the probe (n = 2, 3).
    Simplex,
}

/// Index range of Q_r around the grid centre.
fn cube_range(g: &Grid, r: f64) -> Result<(Vec<usize>, Vec<usize>)> {
    let k = r / g.h();
    if (k - k.round()).abs() > 1e-9 || k.round() < 1.0 || g.res.is_multiple_of(2) {
        return Err(Error::InvalidInput(format!("radius {r} is not a whole number of cells around a centre node")));
    }
    let k = k.round() as usize;
    let c = (g.res - 1) / 2;
    if k > c {
        return Err(Error::DomainExceeded(format!("radius {r} exceeds the grid")));
    }
    Ok((vec![c - k; g.m], vec![c + k; g.m]))
}

/// Boundary margin check shared by both degree methods.
fn check_margin(u: &GridMap, k0: &[usize], k1: &[usize], y: &[f64]) -> Result<f64> {
    let g = &u.grid;
    let m = g.m;
    let mut min_d = f64::INFINITY;
    let mut max_step: f64 = 0.0;
    let mut k = vec![0usize; m];
    let count: usize = (0..m).map(|a| k1[a] - k0[a] + 1).product();
    for l in 0..count {
        let mut r = l;
        for a in (0..m).rev() {
            let w = k1[a] - k0[a] + 1;
            k[a] = k0[a] + r % w;
            r /= w;
        }
        if !(0..m).any(|a| k[a] == k0[a] || k[a] == k1[a]) {
            continue;
        }
        let i = g.ravel(&k);
        let v = u.value(i);
        min_d = min_d.min(v.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt());
        for a in 0..m {
            if k[a] < k1[a] {
                let j = i + g.stride(a);
                max_step = max_step.max(v.iter().zip(u.value(j)).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt());
            }
        }
    }
    if !(min_d >= 2.0 * max_step) {
        return Err(Error::ProbeUnstable(format!(
            "boundary image within {min_d:.3e} of the probe, boundary step {max_step:.3e}"
        )));
    }
    Ok(min_d)
}

fn det(m: &[[f64; MAX_DIM]; MAX_DIM], n: usize) -> f64 {
    let mut a = *m;
    let mut d = 1.0;
    for c in 0..n {
        let piv = (c..n).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs())).unwrap();
        if a[piv][c] == 0.0 {
            return 0.0;
        }
        if piv != c {
            a.swap(piv, c);
            d = -d;
        }
        d *= a[c][c];
        for r in c + 1..n {
            let f = a[r][c] / a[c][c];
            for k in c..n {
                a[r][k] -= f * a[c][k];
            }
        }
    }
    d
}

fn permutations(n: usize) -> Vec<(Vec<usize>, i64)> {
    fn rec(cur: &mut Vec<usize>, used: &mut Vec<bool>, n: usize, out: &mut Vec<(Vec<usize>, i64)>) {
        if cur.len() == n {
            let mut inv = 0;
            for i in 0..n {
                for j in i + 1..n {
                    if cur[i] > cur[j] {
                        inv += 1;
                    }
                }
            }
            out.push((cur.clone(), if inv % 2 == 0 { 1 } else { -1 }));
            return;
        }
        for v in 0..n {
            if !used[v] {
                used[v] = true;
                cur.push(v);
                rec(cur, used, n, out);
                cur.pop();
                used[v] = false;
            }
        }
    }
    let mut out = Vec::new();
    rec(&mut Vec::new(), &mut vec![false; n], n, &mut out);
    out
}

/// Degree of a chart-valued map u : Q_r → R^n (n = grid dimension) at y.
pub fn brouwer_degree(u: &GridMap, r: f64, y: &[f64], method: DegreeMethod) -> Result<i64> {
    let g = &u.grid;
    let n = g.m;
    if u.nu != n || y.len() != n {
        return Err(Error::InvalidInput("degree needs an R^n-valued map on an n-dimensional grid".into()));
    }
    let (k0, k1) = cube_range(g, r)?;
    let margin = check_margin(u, &k0, &k1, y)?;
    match method {
        DegreeMethod::Winding => {
            if n != 2 {
                return Err(Error::InvalidInput("winding number needs n = 2".into()));
            }
            let pts: Vec<Vec<f64>> = square_loop(g, &k0, &k1).iter().map(|&i| u.value(i).to_vec()).collect();
            winding_of_loop(&pts, y)
        }
        DegreeMethod::Simplex => {
            if !(2..=3).contains(&n) {
                return Err(Error::InvalidInput("simplex counting supports n = 2, 3".into()));
            }
            // Generic shift of the probe, far below the boundary margin.
            let dirs = [1.0, 0.371_390_7, 0.029_411_3];
            let eps = 1e-9 * margin;
            let yp: Vec<f64> = (0..n).map(|a| y[a] + eps * dirs[a]).collect();
            let perms = permutations(n);
            let cells: Vec<Vec<usize>> = {
                let count: usize = (0..n).map(|a| k1[a] - k0[a]).product();
                (0..count)
                    .map(|l| {
                        let mut r = l;
                        let mut k = vec![0usize; n];
                        for a in (0..n).rev() {
                            let w = k1[a] - k0[a];
                            k[a] = k0[a] + r % w;
                            r /= w;
                        }
                        k
                    })
                    .collect()
            };
            let total: i64 = cells
                .par_iter()
                .map(|base| {
                    let mut acc = 0i64;
                    for (perm, sgn) in &perms {
                        let mut verts = Vec::with_capacity(n + 1);
                        let mut k = base.clone();
                        verts.push(u.value(g.ravel(&k)).to_vec());
                        for &a in perm {
                            k[a] += 1;
                            verts.push(u.value(g.ravel(&k)).to_vec());
                        }
                        let mut mat = [[0.0; MAX_DIM]; MAX_DIM];
                        for r in 0..n {
                            for c in 0..n {
                                mat[r][c] = verts[c + 1][r] - verts[0][r];
                            }
                        }
                        let d = det(&mat, n);
                        if d == 0.0 {
                            continue;
                        }
                        // Barycentric coordinates by Cramer's rule.
                        let mut inside = true;
                        let mut sum = 0.0;
                        for c in 0..n {
                            let mut mc = mat;
                            for r in 0..n {
                                mc[r][c] = yp[r] - verts[0][r];
                            }
                            let l = det(&mc, n) / d;
                            sum += l;
                            if l < 0.0 {
                                inside = false;
                                break;
                            }
                        }
                        if inside && sum <= 1.0 {
                            acc += sgn * if d > 0.0 { 1 } else { -1 };
                        }
                    }
                    acc
                })
                .sum();
            Ok(total)
        }
    }
}

/// P∘u for a target with a global chart.
pub fn chart_map(u: &GridMap, chart: &GlobalChart) -> GridMap {
    let n = chart.dim();
    let mut values = vec![0.0; u.n_nodes() * n];
    values.par_chunks_mut(n).enumerate().for_each(|(i, out)| out.copy_from_slice(&chart.forward(u.value(i))));
    GridMap { grid: u.grid.clone(), nu: n, values }
}

/// Random points in the closed geodesic cap of (round) radius θ around the
/// basepoint of a funnel sphere, or around the basepoint of other targets.
pub fn probe_cap(m: &TargetManifold, theta: f64, count: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut r = rng(seed);
    let nu = m.nu;
    let bp: Vec<f64> = {
        let b = norm(&m.basepoint);
        m.basepoint.iter().map(|v| v / b).collect()
    };
    let basis = crate::util::complement_basis(&bp);
    (0..count)
        .map(|_| {
            let a = theta * r.gen::<f64>().sqrt();
            let dir: Vec<f64> = (0..basis.len()).map(|_| r.gen::<f64>() - 0.5).collect();
            let dn = norm(&dir).max(1e-12);
            let mut y: Vec<f64> = bp.iter().map(|v| a.cos() * v).collect();
            for (j, b) in basis.iter().enumerate() {
                for c in 0..nu {
                    y[c] += a.sin() * dir[j] / dn * b[c];
                }
            }
            m.project(&y).unwrap_or(y)
        })
        .collect()
}

/// H^n of the cap of sphere radius θ around the basepoint of a funnel sphere
/// (antipodal to the puncture), by quadrature of the surface element
/// λ^{n−1}√(λ²+λ′²) sin^{n−1} d.
pub fn cap_measure(m: &TargetManifold, theta: f64) -> f64 {
    let n = m.n;
    let alpha = match m.kind {
        ManifoldKind::FunnelSphere { alpha } => alpha,
        _ => 0.0,
    };
    let sphere_area = 2.0 * PI.powf(n as f64 / 2.0) / libm_gamma(n as f64 / 2.0);
    let steps = 20_000;
    let lo = PI - theta;
    let hh = theta / steps as f64;
    let mut s = 0.0;
    for i in 0..=steps {
        let d = (lo + i as f64 * hh).min(PI);
        let l = funnel_lambda(alpha, d);
        let dl = funnel_lambda_d(alpha, d);
        let f = l.powi(n as i32 - 1) * (l * l + dl * dl).sqrt() * d.sin().powi(n as i32 - 1);
        s += if i == 0 || i == steps { 0.5 * f } else { f };
    }
    s * hh * sphere_area
}

/// Γ for half-integers and integers, enough for sphere areas.
fn libm_gamma(x: f64) -> f64 {
    if (x - x.round()).abs() < 1e-12 {
        (1..x.round() as usize).map(|k| k as f64).product()
    } else {
        let mut v = PI.sqrt();
        let mut t = 0.5;
        while t < x - 1e-12 {
            v *= t;
            t += 1.0;
        }
        v
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct CompetitorRow {
    pub height: f64,
    pub chart_radius: f64,
    pub gap: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct ObstructionCertificate {
    pub probes: Vec<Vec<f64>>,
    pub radii: Vec<f64>,
    /// degrees[r][probe] by winding number (n = 2) or simplex counting.
    pub degrees: Vec<Vec<i64>>,
    /// ∫_{Q_r}|Du|^n per radius.
    pub energies: Vec<f64>,
    /// n^{−n/2}∫_{Q_r}|Du|^n, the area-formula bound on H^n(u(Q_r)).
    pub area_bounds: Vec<f64>,
    pub probe_measure: f64,
    /// H^n(K) exceeds the area bound at the smallest radius.
    pub witness: bool,
    pub competitors: Vec<CompetitorRow>,
    pub epsilon: f64,
    pub epsilon_label: String,
}

/// Chart radius at which the fold competitors cut the target.
fn fold_radius(m: &TargetManifold, height: f64) -> Result<f64> {
    match m.kind {
        ManifoldKind::FunnelSphere { alpha } => {
            // Smallest sphere distance d with λ(d) ≤ height, by bisection.
            let (mut lo, mut hi) = (1e-300f64, 1.0f64);
            if funnel_lambda(alpha, hi) > height {
                return Err(Error::ParameterOutOfRange(format!("height {height} below the plateau")));
            }
            for _ in 0..200 {
                let mid = (lo * hi).sqrt().max(0.5 * (lo + hi) * 1e-3).min(0.5 * (lo + hi));
                let mid = if mid <= lo || mid >= hi { 0.5 * (lo + hi) } else { mid };
                if funnel_lambda(alpha, mid) > height {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            Ok(2.0 / (hi / 2.0).tan())
        }
        ManifoldKind::AlgebraicFunnel { .. } => Ok(height),
        _ => Err(Error::CertificateFailed("target is compact or contractible; nothing to obstruct".into())),
    }
}

/// Fold truncation P⁻¹(F_R(P∘u)) with F_R(z) = z inside the ball of radius R
/// and R²z/|z|² outside: continuous, bounded, equal to u where |P∘u| ≤ R.
pub fn fold_competitor(u: &GridMap, m: &TargetManifold, height: f64) -> Result<GridMap> {
    let chart = m.global_chart().ok_or_else(|| Error::CertificateFailed("no global chart".into()))?;
    let r = fold_radius(m, height)?;
    let mut out = u.clone();
    out.values.par_chunks_mut(u.nu).for_each(|v| {
        let z = chart.forward(v);
        let a = norm(&z);
        if a > r {
            let f = r * r / (a * a);
            let zf: Vec<f64> = z.iter().map(|c| c * f).collect();
            v.copy_from_slice(&chart.inverse(&zf));
        }
    });
    Ok(out)
}

/// ∫_Q |Dw − Du|^p over the whole grid.
pub fn gradient_gap(u: &GridMap, w: &GridMap, p: f64) -> Result<f64> {
    let d = w.sub(u)?;
    Ok(integrate(&Region::full(&u.grid), &gradient(&d).norm_pow(p)))
}

/// Degree, energy, area and competitor evidence that u cannot be approximated
/// by bounded maps with converging boundary values.
pub fn obstruction_certificate(
    u: &GridMap,
    m: &TargetManifold,
    probes: &[Vec<f64>],
    radii: &[f64],
    cap_theta: f64,
    heights: &[f64],
) -> Result<ObstructionCertificate> {
    let g = &u.grid;
    let n = g.m;
    if n != m.n {
        return Err(Error::InvalidInput("domain and target dimensions differ".into()));
    }
    let chart = match (m.global_chart(), &m.kind) {
        (_, ManifoldKind::FunnelSphere { alpha }) if *alpha == 0.0 => {
            return Err(Error::CertificateFailed("round sphere is compact: bounded maps are dense".into()))
        }
        (Some(c), ManifoldKind::FunnelSphere { .. }) | (Some(c), ManifoldKind::AlgebraicFunnel { .. }) => c,
        _ => return Err(Error::CertificateFailed("target has no funnel end: every degree vanishes".into())),
    };
    let pu = chart_map(u, &chart);
    let method = if n == 2 { DegreeMethod::Winding } else { DegreeMethod::Simplex };
    let mut degrees = Vec::new();
    for &r in radii {
        let row: Result<Vec<i64>> =
            probes.iter().map(|y| brouwer_degree(&pu, r, &chart.forward(y), method)).collect();
        let row = row?;
        if row.contains(&0) {
            return Err(Error::CertificateFailed(format!("degree vanishes at radius {r}")));
        }
        degrees.push(row);
    }
    let ne = n as f64;
    let energies: Result<Vec<f64>> =
        radii.iter().map(|&r| energy(u, ne, &Region::cube(g, &g.center, r))).collect();
    let energies = energies?;
    let c_area = ne.powf(-ne / 2.0);
    let area_bounds: Vec<f64> = energies.iter().map(|e| c_area * e).collect();
    let probe_measure = cap_measure(m, cap_theta);
    let smallest = radii
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .ok_or_else(|| Error::InvalidInput("no radii".into()))?;
    let witness = area_bounds[smallest] < probe_measure;
    let competitors: Result<Vec<CompetitorRow>> = heights
        .iter()
        .map(|&hgt| {
            let w = fold_competitor(u, m, hgt)?;
            Ok(CompetitorRow { height: hgt, chart_radius: fold_radius(m, hgt)?, gap: gradient_gap(u, &w, ne)? })
        })
        .collect();
    let competitors = competitors?;
    let epsilon = competitors.iter().map(|c| c.gap).fold(f64::INFINITY, f64::min);
    Ok(ObstructionCertificate {
        probes: probes.to_vec(),
        radii: radii.to_vec(),
        degrees,
        energies,
        area_bounds,
        probe_measure,
        witness,
        competitors,
        epsilon,
        epsilon_label: "EMPIRICAL".into(),
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct ProductGap {
    pub m: usize,
    pub n: usize,
    pub gap_n: f64,
    pub gap_m: f64,
    /// gap_m / (2^{m−n} gap_n).
    pub ratio: f64,
}

/// Lift u and a competitor w from Q^n to Q^m by x ↦ (x₁..x_n) and compare the
/// gaps; the lifted integral is summed slice by slice with trapezoid weights.
pub fn product_obstruction(u: &GridMap, w: &GridMap, m: usize) -> Result<ProductGap> {
    let g = &u.grid;
    let n = g.m;
    if m < n || m > MAX_DIM {
        return Err(Error::InvalidInput(format!("lift dimension {m} must lie in [{n}, {MAX_DIM}]")));
    }
    let p = n as f64;
    let gap_n = gradient_gap(u, w, p)?;
    if m == n {
        return Ok(ProductGap { m, n, gap_n, gap_m: gap_n, ratio: 1.0 });
    }
    let lg = Grid::new(m, g.res, g.inradius)?;
    let lift = |v: &GridMap| {
        GridMap::from_fn(lg.clone(), v.nu, |x, out| {
            v.sample(&x[..n], out).expect("lift inside the core cube");
        })
    };
    let du = lift(u);
    let dw = lift(w);
    let diff = dw.sub(&du)?;
    let integrand = gradient(&diff).norm_pow(p);
    drop((du, dw, diff));
    // Slice sums: trapezoid weights in the extra coordinates times the core weights.
    let core_w = Region::full(g).node_weights();
    let h = g.h();
    let per_slice = g.n_nodes();
    let slices = lg.n_nodes() / per_slice;
    let extra = m - n;
    let mut gap_m = 0.0;
    for s in 0..slices {
        let mut ws = 1.0;
        let mut r = s;
        for _ in 0..extra {
            let k = r % g.res;
            r /= g.res;
            ws *= if k == 0 || k == g.res - 1 { 0.5 * h } else { h };
        }
        // Row-major layout: the first n axes vary slowest, so gather strided.
        let vals: Vec<f64> = (0..per_slice).map(|i| integrand[i * slices + s]).collect();
        gap_m += ws * integrate_weighted(&core_w, &vals);
    }
    let scale = 2f64.powi(extra as i32) * g.inradius.powi(extra as i32);
    Ok(ProductGap { m, n, gap_n, gap_m, ratio: if gap_n > 0.0 { gap_m / (scale * gap_n) } else { 1.0 } })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifolds::{embed_funnel, FunnelProfile};

    fn cap_map(g: &Grid, s2: &TargetManifold, scale: f64) -> GridMap {
        let xi = [0.0, 0.0, 1.0];
        let chart = s2.chart_at(&xi, 1.0).unwrap();
        GridMap::from_fn(g.clone(), 3, |x, o| {
            let y = chart.inverse(&[scale * x[0], scale * x[1]]);
            o.copy_from_slice(&y);
        })
    }

    #[test]
    fn constant_boundary_trims_to_constant() {
        let g = Grid::new(2, 33, 1.0).unwrap();
        let s2 = TargetManifold::sphere(2).unwrap();
        let u = GridMap::constant(g, &[0.0, 0.0, 1.0]);
        let t = trim_small_energy(&u, &s2, 1.0, 1.0).unwrap();
        assert_eq!(t.energy_ratio, 0.0);
        assert!(t.map.values.chunks(3).all(|v| (v[2] - 1.0).abs() < 1e-12));
    }

    #[test]
    fn small_loop_stays_in_cap_and_large_loop_is_refused() {
        let s2 = TargetManifold::sphere(2).unwrap();
        let g = Grid::new(2, 65, 1.0).unwrap();
        let u = cap_map(&g, &s2, 0.15);
        let alpha = small_energy_threshold(2, 1.0, 1.0).unwrap();
        let t = trim_small_energy(&u, &s2, alpha, 1.0).unwrap();
        assert_eq!(t.boundary_residual, 0.0);
        assert!(t.map.values.chunks(3).all(|v| v[2] > (0.4f64).cos()));
        let big = cap_map(&g, &s2, 3.0);
        assert!(matches!(trim_small_energy(&big, &s2, alpha, 1.0), Err(Error::NotSmallEnergy { .. })));
    }

    #[test]
    fn global_trim_keeps_boundary() {
        let s2 = TargetManifold::sphere(2).unwrap();
        let g = Grid::new(2, 65, 1.0).unwrap();
        let u = cap_map(&g, &s2, 0.6);
        let t = trim_global(&u, &s2, &GlobalTrimOptions::for_manifold(&s2)).unwrap();
        assert_eq!(t.boundary_residual, 0.0);
        assert!(t.map.values.chunks(3).all(|v| (norm(v) - 1.0).abs() < 1e-9));
    }

    #[test]
    fn degree_basics() {
        let g = Grid::new(2, 33, 1.0).unwrap();
        let id = GridMap::from_fn(g.clone(), 2, |x, o| o.copy_from_slice(x));
        for m in [DegreeMethod::Winding, DegreeMethod::Simplex] {
            assert_eq!(brouwer_degree(&id, 0.5, &[0.0, 0.0], m).unwrap(), 1);
            assert_eq!(brouwer_degree(&id, 0.5, &[0.9, 0.0], m).unwrap(), 0);
            let c = GridMap::constant(g.clone(), &[1.0, 1.0]);
            assert_eq!(brouwer_degree(&c, 0.5, &[0.0, 0.0], m).unwrap(), 0);
        }
        let sq = GridMap::from_fn(g.clone(), 2, |x, o| {
            o[0] = x[0] * x[0] - x[1] * x[1];
            o[1] = 2.0 * x[0] * x[1];
        });
        assert_eq!(brouwer_degree(&sq, 0.5, &[0.01, 0.02], DegreeMethod::Simplex).unwrap(), 2);
        assert!(matches!(brouwer_degree(&id, 0.5, &[0.5, 0.0], DegreeMethod::Winding), Err(Error::ProbeUnstable(_))));
        let g3 = Grid::new(3, 17, 1.0).unwrap();
        let id3 = GridMap::from_fn(g3.clone(), 3, |x, o| {
            o[0] = x[1];
            o[1] = x[0];
            o[2] = x[2];
        });
        assert_eq!(brouwer_degree(&id3, 0.5, &[0.01, 0.02, 0.03], DegreeMethod::Simplex).unwrap(), -1);
    }

    #[test]
    fn geodesic_trim_lengths() {
        let s2 = TargetManifold::sphere(2).unwrap();
        let a = [0.0, 0.0, 1.0];
        let t = geodesic_trim_1d(&a, &a, &s2, 33).unwrap();
        assert!(t.map.values.chunks(3).all(|v| v == a));
        let t = geodesic_trim_1d(&a, &[0.0, 0.0, -1.0], &s2, 65).unwrap();
        assert!((t.length - PI).abs() < 0.03 * PI);
    }

    #[test]
    fn funnel_certificate_small() {
        let fm = embed_funnel(2, 0.4, FunnelProfile::default()).unwrap();
        let m = fm.manifold().unwrap();
        let g = Grid::new(2, 129, 1.0).unwrap();
        let u = fm.to_gridmap(&g).unwrap();
        let probes = probe_cap(&m, PI / 2.0, 3, 7);
        let cert = obstruction_certificate(&u, &m, &probes, &[0.25, 0.125], PI / 2.0, &[1.1, 1.3]).unwrap();
        assert!(cert.degrees.iter().flatten().all(|d| *d == 1));
        assert!(cert.energies[0] > cert.energies[1]);
        assert!((cert.probe_measure - 2.0 * PI).abs() < 1e-6);
        let e = TargetManifold::euclidean(2).unwrap();
        let ue = GridMap::from_fn(g.clone(), 2, |x, o| o.copy_from_slice(x));
        assert!(matches!(obstruction_certificate(&ue, &e, &[vec![0.0, 0.0]], &[0.25], 1.0, &[1.1]), Err(Error::CertificateFailed(_))));
    }

    #[test]
    fn product_lift_doubles_gap() {
        let fm = embed_funnel(2, 0.4, FunnelProfile::default()).unwrap();
        let m = fm.manifold().unwrap();
        let g = Grid::new(2, 33, 1.0).unwrap();
        let u = fm.to_gridmap(&g).unwrap();
        let w = fold_competitor(&u, &m, 1.2).unwrap();
        let pg = product_obstruction(&u, &w, 3).unwrap();
        assert!((pg.ratio - 1.0).abs() < 0.05, "{pg:?}");
        assert_eq!(product_obstruction(&u, &w, 2).unwrap().ratio, 1.0);
    }
}
