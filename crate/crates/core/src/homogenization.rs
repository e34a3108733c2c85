//! Zero-degree homogenization: a cube is filled by pulling its boundary
//! values back along max-norm rays, v(x) = u(a + η(x−a)/|x−a|_∞).

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use crate::cubication::{Cubication, Face};
use crate::error::{Error, Result};
use crate::grid::{Grid, GridMap, MAX_DIM};
use crate::opening::box_energy;

/// Tolerance for agreement of face restrictions on shared subfaces.
pub const TRACE_TOL: f64 = 1e-8;

/// Node-level location of a face on the global grid.
#[derive(Clone, Debug)]
struct FaceNodes {
    /// Global node index of the lower corner, per axis.
    corner: Vec<usize>,
    axes: Vec<usize>,
    /// Nodes per spanned axis.
    npts: usize,
}

fn face_nodes(cub: &Cubication, f: &Face) -> Result<FaceNodes> {
    let g = &cub.grid;
    let lo = cub.lower(f);
    let corner: Option<Vec<usize>> = (0..g.m).map(|a| g.node_index_of(a, lo[a])).collect();
    let corner = corner.ok_or_else(|| Error::EtaMisaligned("face corner is not a grid node".into()))?;
    let npts = (2.0 * cub.eta / g.h()).round() as usize + 1;
    Ok(FaceNodes { corner, axes: (0..g.m).filter(|&a| f.spans(a)).collect(), npts })
}

impl FaceNodes {
    fn count(&self) -> usize {
        self.npts.pow(self.axes.len() as u32)
    }

    /// Global node index of the local multi-index `k` (one entry per spanned axis).
    fn global(&self, g: &Grid, k: &[usize]) -> usize {
        let mut idx = self.corner.clone();
        for (j, &a) in self.axes.iter().enumerate() {
            idx[a] += k[j];
        }
        g.ravel(&idx)
    }

    fn unravel(&self, mut l: usize, k: &mut [usize]) {
        for j in (0..self.axes.len()).rev() {
            k[j] = l % self.npts;
            l /= self.npts;
        }
    }
}

/// Global node indices of a face, row-major over its spanned axes.
pub(crate) fn face_node_indices(cub: &Cubication, f: &Face) -> Result<Vec<usize>> {
    let fnodes = face_nodes(cub, f)?;
    let mut k = vec![0usize; fnodes.axes.len()];
    Ok((0..fnodes.count())
        .map(|l| {
            fnodes.unravel(l, &mut k);
            fnodes.global(&cub.grid, &k)
        })
        .collect())
}

/// Per-face restrictions of a map to a collection of faces, stored in face
/// coordinates (row-major over the spanned axes in increasing order).
#[derive(Clone, Debug)]
pub struct SkeletonMap {
    pub m: usize,
    pub nu: usize,
    pub h: f64,
    pub eta: f64,
    pub npts: usize,
    pub faces: BTreeMap<Face, Vec<f64>>,
}

impl SkeletonMap {
    pub fn from_global(u: &GridMap, cub: &Cubication, faces: &[Face]) -> Result<SkeletonMap> {
        if u.grid != cub.grid {
            return Err(Error::EtaMisaligned("map grid differs from the cubication grid".into()));
        }
        let mut out = BTreeMap::new();
        let mut npts = 0;
        for f in faces {
            let fn_ = face_nodes(cub, f)?;
            npts = fn_.npts;
            let mut vals = Vec::with_capacity(fn_.count() * u.nu);
            let mut k = vec![0usize; fn_.axes.len()];
            for l in 0..fn_.count() {
                fn_.unravel(l, &mut k);
                vals.extend_from_slice(u.value(fn_.global(&u.grid, &k)));
            }
            out.insert(f.clone(), vals);
        }
        Ok(SkeletonMap { m: cub.m, nu: u.nu, h: u.grid.h(), eta: cub.eta, npts, faces: out })
    }

    /// Values of face f restricted to its subface s (both present in face coordinates).
    fn restrict(&self, f: &Face, s: &Face) -> Vec<f64> {
        let vals = &self.faces[f];
        let axes: Vec<usize> = (0..self.m).filter(|&a| f.spans(a)).collect();
        let sub: Vec<usize> = (0..self.m).filter(|&a| s.spans(a)).collect();
        let n = self.npts;
        let mut out = Vec::new();
        let count = n.pow(sub.len() as u32);
        for l in 0..count {
            let mut ks = vec![0usize; sub.len()];
            let mut r = l;
            for j in (0..sub.len()).rev() {
                ks[j] = r % n;
                r /= n;
            }
            let mut flat = 0;
            for &a in &axes {
                let k = match sub.iter().position(|&b| b == a) {
                    Some(j) => ks[j],
                    None => {
                        if s.base[a] > f.base[a] {
                            n - 1
                        } else {
                            0
                        }
                    }
                };
                flat = flat * n + k;
            }
            out.extend_from_slice(&vals[flat * self.nu..(flat + 1) * self.nu]);
        }
        out
    }

    /// Largest disagreement between restrictions of faces onto common subfaces
    /// (including stored lower-dimensional faces).
    pub fn trace_mismatch(&self) -> f64 {
        let mut seen: BTreeMap<Face, Vec<f64>> = BTreeMap::new();
        let mut worst: f64 = 0.0;
        let mut faces: Vec<&Face> = self.faces.keys().collect();
        faces.sort_by_key(|f| f.dim());
        for f in faces {
            if let Some(prev) = seen.get(f) {
                worst = worst.max(max_diff(prev, &self.faces[f]));
            }
            for d in 0..f.dim() {
                for s in subfaces_of(self.m, f, d) {
                    let r = self.restrict(f, &s);
                    match seen.get(&s) {
                        Some(prev) => worst = worst.max(max_diff(prev, &r)),
                        None => {
                            seen.insert(s, r);
                        }
                    }
                }
            }
        }
        worst
    }

    pub fn check_traces(&self) -> Result<()> {
        let w = self.trace_mismatch();
        if w > TRACE_TOL {
            return Err(Error::TraceIncompatible(format!("restrictions differ by {w:.3e} on a shared face")));
        }
        Ok(())
    }

    /// Face-intrinsic ∫|Du|^p of one face.
    pub fn face_energy(&self, f: &Face, p: f64) -> f64 {
        let d = f.dim();
        if d == 0 {
            return 0.0;
        }
        box_energy(&self.faces[f], self.nu, &vec![self.npts; d], self.h, p)
    }

    /// Write one little-endian f64 file per face plus a JSON manifest.
    pub fn write_bundle(&self, dir: &Path) -> Result<()> {
        #[derive(Serialize)]
        struct Entry<'a> {
            face: &'a Face,
            file: String,
            npts: usize,
            nu: usize,
        }
        #[derive(Serialize)]
        struct Manifest<'a> {
            h: f64,
            eta: f64,
            trace_mismatch: f64,
            faces: Vec<Entry<'a>>,
        }
        std::fs::create_dir_all(dir)?;
        let mut entries = Vec::new();
        for (i, (f, vals)) in self.faces.iter().enumerate() {
            let file = format!("face_{i:05}.bin");
            let bytes: Vec<u8> = vals.iter().flat_map(|v| v.to_le_bytes()).collect();
            std::fs::write(dir.join(&file), bytes)?;
            entries.push(Entry { face: f, file, npts: self.npts, nu: self.nu });
        }
        let man = Manifest { h: self.h, eta: self.eta, trace_mismatch: self.trace_mismatch(), faces: entries };
        std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&man)?)?;
        Ok(())
    }
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn subfaces_of(m: usize, f: &Face, dim: usize) -> Vec<Face> {
    let spanned: Vec<usize> = (0..m).filter(|&a| f.spans(a)).collect();
    let k = spanned.len();
    let mut out = Vec::new();
    for keep in 0u32..(1 << k) {
        if keep.count_ones() as usize != dim {
            continue;
        }
        let dropped: Vec<usize> = (0..k).filter(|&j| keep >> j & 1 == 0).map(|j| spanned[j]).collect();
        let axes = dropped.iter().fold(f.axes, |acc, &a| acc & !(1 << a));
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

/// Σ over faces of dimension `dim` of the face-intrinsic ∫|Du|^p.
pub fn skeleton_seminorm(us: &SkeletonMap, dim: usize, p: f64) -> Result<f64> {
    us.check_traces()?;
    Ok(us.faces.keys().filter(|f| f.dim() == dim).map(|f| us.face_energy(f, p)).sum())
}

/// Fill the relative interior of a face by max-norm radial pullback of its
/// boundary. `read` gives the value at a global node; the results are
/// returned as (global node, value) pairs.
fn homogenize_face(g: &Grid, nu: usize, fnodes: &FaceNodes, read: &(dyn Fn(usize) -> Vec<f64> + Sync)) -> Vec<(usize, Vec<f64>)> {
    let i = fnodes.axes.len();
    let n = fnodes.npts;
    let half = (n - 1) as f64 / 2.0;
    let interior = (n - 2).pow(i as u32);
    (0..interior)
        .into_par_iter()
        .map(|l| {
            let mut k = [0usize; MAX_DIM];
            let mut r = l;
            for j in (0..i).rev() {
                k[j] = r % (n - 2) + 1;
                r /= n - 2;
            }
            // Local coordinates in index units relative to the centre.
            let y: Vec<f64> = (0..i).map(|j| k[j] as f64 - half).collect();
            let t = y.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
            let node = fnodes.global(g, &k[..i]);
            if t == 0.0 {
                let mut kc = vec![(n - 1) / 2; i];
                kc[0] = n - 1;
                return (node, read(fnodes.global(g, &kc)));
            }
            let dom = (0..i).find(|&j| y[j].abs() == t).expect("dominant axis");
            let mut frac = [0.0; MAX_DIM];
            for j in 0..i {
                frac[j] = if j == dom {
                    if y[j] > 0.0 {
                        (n - 1) as f64
                    } else {
                        0.0
                    }
                } else {
                    (half + half * y[j] / t).clamp(0.0, (n - 1) as f64)
                };
            }
            let mut acc = vec![0.0; nu];
            let mut base = [0usize; MAX_DIM];
            let mut w = [0.0; MAX_DIM];
            for j in 0..i {
                let f = frac[j].floor().min((n - 2) as f64);
                base[j] = f as usize;
                w[j] = frac[j] - f;
            }
            for corner in 0..1usize << i {
                let mut wt = 1.0;
                let mut kk = [0usize; MAX_DIM];
                for j in 0..i {
                    let up = corner >> j & 1 == 1;
                    wt *= if up { w[j] } else { 1.0 - w[j] };
                    kk[j] = base[j] + up as usize;
                }
                if wt == 0.0 {
                    continue;
                }
                let v = read(fnodes.global(g, &kk[..i]));
                for c in 0..nu {
                    acc[c] += wt * v[c];
                }
            }
            (node, acc)
        })
        .collect()
}

/// Homogenize an i-dimensional cube map from its boundary nodes (interior
/// input values are ignored). Requires p < i.
pub fn homogenize_cube(ub: &GridMap, p: f64) -> Result<GridMap> {
    let g = &ub.grid;
    let i = g.m;
    if p >= i as f64 {
        return Err(Error::HomogenizationIllposed { p, i });
    }
    Ok(radial_pullback(ub))
}

/// Interior nodes replaced by the boundary value along their max-norm ray,
/// without the exponent check.
pub(crate) fn radial_pullback(ub: &GridMap) -> GridMap {
    let g = &ub.grid;
    let fnodes = FaceNodes { corner: vec![0; g.m], axes: (0..g.m).collect(), npts: g.res };
    let read = |idx: usize| ub.value(idx).to_vec();
    let mut out = ub.clone();
    for (node, v) in homogenize_face(g, ub.nu, &fnodes, &read) {
        out.value_mut(node).copy_from_slice(&v);
    }
    out
}

/// Σ over boundary facets of the facet-intrinsic ∫|Du|^p, for a map on a cube grid.
pub fn boundary_energy(ub: &GridMap, p: f64) -> f64 {
    let g = &ub.grid;
    let i = g.m;
    let n = g.res;
    let mut total = 0.0;
    for axis in 0..i {
        for side in [0, n - 1] {
            let mut vals = Vec::new();
            let count = n.pow(i as u32 - 1);
            for l in 0..count {
                let mut k = vec![0usize; i];
                let mut r = l;
                for a in (0..i).rev() {
                    if a == axis {
                        continue;
                    }
                    k[a] = r % n;
                    r /= n;
                }
                k[axis] = side;
                vals.extend_from_slice(ub.value(g.ravel(&k)));
            }
            total += if i == 1 { 0.0 } else { box_energy(&vals, ub.nu, &vec![n; i - 1], g.h(), p) };
        }
    }
    total
}

#[derive(Clone, Debug, Serialize)]
pub struct ExtensionReport {
    pub filled: Vec<usize>,
    /// ‖Dv‖^p over E^m.
    pub energy: f64,
    /// η^{m−ℓ}‖Du‖^p over E^ℓ.
    pub term_ell: f64,
    /// η^{m−i}‖Du‖^p over S^i for i = ℓ+1..m−1.
    pub terms_s: Vec<f64>,
    pub c_emp: f64,
    pub range_ok: bool,
    pub max_jump: f64,
}

#[derive(Clone, Debug)]
pub struct Extension {
    pub map: GridMap,
    pub report: ExtensionReport,
}

/// Largest jump between adjacent nodes along the ℓ-faces of the flagged cubes.
fn skeleton_jump(u: &GridMap, cub: &Cubication, faces: &[Face]) -> Result<f64> {
    let g = &u.grid;
    let mut worst: f64 = 0.0;
    for f in faces {
        let fnodes = face_nodes(cub, f)?;
        let mut k = vec![0usize; fnodes.axes.len()];
        for l in 0..fnodes.count() {
            fnodes.unravel(l, &mut k);
            let a = fnodes.global(g, &k);
            for j in 0..k.len() {
                if k[j] + 1 < fnodes.npts {
                    k[j] += 1;
                    let b = fnodes.global(g, &k);
                    k[j] -= 1;
                    worst = worst.max(max_diff(u.value(a), u.value(b)));
                }
            }
        }
    }
    Ok(worst)
}

/// Extend a map given on E^ℓ ∪ S^{m−1} to the flagged cubes E^m by
/// homogenizing, dimension by dimension, every face of E^i that is not shared
/// with an unflagged cube. Values outside the filled relative interiors are
/// copied bit-exact.
pub fn extend_skeleton(u: &GridMap, cub: &Cubication, ell: usize, flagged: &[bool], p: f64, jump_tol: f64) -> Result<Extension> {
    let m = cub.m;
    if p >= (ell + 1) as f64 {
        return Err(Error::HomogenizationIllposed { p, i: ell + 1 });
    }
    if u.grid != cub.grid || flagged.len() != cub.cubes().len() {
        return Err(Error::InvalidInput("map, cubication and flags disagree".into()));
    }
    let good: Vec<bool> = flagged.iter().map(|b| !b).collect();
    let ell_faces: Vec<Face> = {
        let e = cub.faces_of_cubes(flagged, ell);
        cub.faces(ell).iter().zip(e).filter(|(_, b)| *b).map(|(f, _)| f.clone()).collect()
    };
    let max_jump = skeleton_jump(u, cub, &ell_faces)?;
    if max_jump > jump_tol {
        return Err(Error::DiscontinuousInput(format!("adjacent-node jump {max_jump:.3e} exceeds {jump_tol:.3e}")));
    }
    let mut w = u.clone();
    let g = u.grid.clone();
    let mut filled = vec![0; m + 1];
    let mut terms_s = Vec::new();
    let eta = cub.eta;
    for i in ell + 1..=m {
        let e = cub.faces_of_cubes(flagged, i);
        let s = if i < m { cub.faces_of_cubes(&good, i) } else { vec![false; e.len()] };
        let kept: Vec<Face> =
            cub.faces(i).iter().enumerate().filter(|(id, _)| e[*id] && s[*id]).map(|(_, f)| f.clone()).collect();
        if i < m {
            let sk = SkeletonMap::from_global(&w, cub, &kept)?;
            let en: f64 = kept.iter().map(|f| sk.face_energy(f, p)).sum();
            terms_s.push(eta.powi((m - i) as i32) * en);
        }
        let todo: Vec<Face> =
            cub.faces(i).iter().enumerate().filter(|(id, _)| e[*id] && !s[*id]).map(|(_, f)| f.clone()).collect();
        filled[i] = todo.len();
        let src = w.clone();
        let read = |idx: usize| src.value(idx).to_vec();
        let updates: Result<Vec<Vec<(usize, Vec<f64>)>>> = todo
            .iter()
            .map(|f| Ok(homogenize_face(&g, u.nu, &face_nodes(cub, f)?, &read)))
            .collect();
        for batch in updates? {
            for (node, v) in batch {
                w.value_mut(node).copy_from_slice(&v);
            }
        }
    }
    let sk_ell = SkeletonMap::from_global(u, cub, &ell_faces)?;
    let term_ell = eta.powi((m - ell) as i32) * ell_faces.iter().map(|f| sk_ell.face_energy(f, p)).sum::<f64>();
    let cubes: Vec<Face> = cub.cubes().iter().zip(flagged).filter(|(_, b)| **b).map(|(f, _)| f.clone()).collect();
    let sk_m = SkeletonMap::from_global(&w, cub, &cubes)?;
    let energy: f64 = cubes.iter().map(|f| sk_m.face_energy(f, p)).sum();
    // Range containment: every filled value lies in the per-component range of the sources.
    let mut lo = vec![f64::INFINITY; u.nu];
    let mut hi = vec![f64::NEG_INFINITY; u.nu];
    let mut sources: Vec<Face> = ell_faces.clone();
    for i in ell + 1..m {
        let e = cub.faces_of_cubes(flagged, i);
        let s = cub.faces_of_cubes(&good, i);
        sources.extend(cub.faces(i).iter().enumerate().filter(|(id, _)| e[*id] && s[*id]).map(|(_, f)| f.clone()));
    }
    let sk_src = SkeletonMap::from_global(u, cub, &sources)?;
    for vals in sk_src.faces.values() {
        for v in vals.chunks(u.nu) {
            for c in 0..u.nu {
                lo[c] = lo[c].min(v[c]);
                hi[c] = hi[c].max(v[c]);
            }
        }
    }
    let range_ok = sk_m.faces.values().all(|vals| {
        vals.chunks(u.nu).all(|v| (0..u.nu).all(|c| v[c] >= lo[c] - 1e-12 && v[c] <= hi[c] + 1e-12))
    });
    let rhs = term_ell + terms_s.iter().sum::<f64>();
    Ok(Extension {
        map: w,
        report: ExtensionReport {
            filled,
            energy,
            term_ell,
            terms_s,
            c_emp: if rhs > 0.0 { energy / rhs } else { 0.0 },
            range_ok,
            max_jump,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cubication::build_cubication;

    fn angular(g: &Grid) -> GridMap {
        GridMap::from_fn(g.clone(), 2, |x, o| {
            let r = (x[0] * x[0] + x[1] * x[1]).sqrt().max(1e-300);
            o[0] = x[0] / r;
            o[1] = x[1] / r;
        })
    }

    #[test]
    fn refuses_critical_exponent() {
        let g = Grid::new(2, 17, 1.0).unwrap();
        let u = angular(&g);
        assert!(matches!(homogenize_cube(&u, 2.0), Err(Error::HomogenizationIllposed { .. })));
    }

    #[test]
    fn constant_boundary_gives_constant() {
        let g = Grid::new(2, 17, 0.5).unwrap();
        let u = GridMap::constant(g, &[0.2, -1.0]);
        let v = homogenize_cube(&u, 1.0).unwrap();
        assert_eq!(u, v);
    }

    #[test]
    fn rays_carry_boundary_values() {
        let g = Grid::new(2, 65, 1.0).unwrap();
        let u = angular(&g);
        let v = homogenize_cube(&u, 1.0).unwrap();
        for k in 0..64 {
            let th = std::f64::consts::TAU * k as f64 / 64.0;
            let d = [th.cos(), th.sin()];
            let t = d[0].abs().max(d[1].abs());
            let b = [d[0] / t, d[1] / t];
            let mut ub = [0.0; 2];
            u.sample(&b, &mut ub).unwrap();
            for s in [0.3, 0.6, 0.9] {
                let mut vv = [0.0; 2];
                v.sample(&[s * b[0], s * b[1]], &mut vv).unwrap();
                assert!((vv[0] - ub[0]).abs() < 0.1 && (vv[1] - ub[1]).abs() < 0.1);
            }
        }
        // Boundary fidelity.
        for i in 0..g.n_nodes() {
            let x = g.node_point(i);
            if x[0].abs() == 1.0 || x[1].abs() == 1.0 {
                assert_eq!(u.value(i), v.value(i));
            }
        }
    }

    #[test]
    fn trace_checks() {
        let g = Grid::new(2, 49, 1.5).unwrap();
        let cub = build_cubication(&g, 0.5, 0.25, 0.25).unwrap();
        let u = GridMap::from_fn(g.clone(), 1, |x, o| o[0] = x[0] + 2.0 * x[1]);
        let edges: Vec<Face> = cub.faces(1).to_vec();
        let sk = SkeletonMap::from_global(&u, &cub, &edges).unwrap();
        assert!(sk.trace_mismatch() < 1e-15);
        let c = GridMap::constant(g.clone(), &[1.0]);
        let skc = SkeletonMap::from_global(&c, &cub, &edges).unwrap();
        assert_eq!(skeleton_seminorm(&skc, 1, 2.0).unwrap(), 0.0);
        let mut bad = sk.clone();
        let first = bad.faces.keys().next().unwrap().clone();
        bad.faces.get_mut(&first).unwrap()[0] += 1.0;
        assert!(matches!(skeleton_seminorm(&bad, 1, 2.0), Err(Error::TraceIncompatible(_))));
        // Single square with an affine map matches the global energy on that square.
        let sq = Face { base: vec![1, 1], axes: 0b11 };
        let sk = SkeletonMap::from_global(&u, &cub, std::slice::from_ref(&sq)).unwrap();
        let e = crate::grid::energy(&u, 2.0, &cub.face_neighborhood(&sq, 0.0)).unwrap();
        assert!((sk.face_energy(&sq, 2.0) - e).abs() < 1e-12);
    }

    #[test]
    fn extension_of_one_bad_square() {
        let g = Grid::new(2, 97, 1.5).unwrap();
        let cub = build_cubication(&g, 0.5, 0.25, 0.25).unwrap();
        let u = GridMap::from_fn(g.clone(), 2, |x, o| {
            let th = x[1].atan2(x[0]);
            o[0] = th.cos();
            o[1] = th.sin();
        });
        let mut flagged = vec![false; cub.cubes().len()];
        let centre = cub.cubes().iter().position(|c| c.base == vec![2, 2]).unwrap();
        flagged[centre] = true;
        let ext = extend_skeleton(&u, &cub, 1, &flagged, 1.5, f64::INFINITY).unwrap();
        assert!(ext.report.range_ok);
        assert!(ext.map.sup_norm() <= 1.0 + 1e-12);
        let none = vec![false; cub.cubes().len()];
        assert_eq!(extend_skeleton(&u, &cub, 1, &none, 1.5, f64::INFINITY).unwrap().map, u);
        assert!(extend_skeleton(&u, &cub, 1, &flagged, 2.0, f64::INFINITY).is_err());
    }
}
