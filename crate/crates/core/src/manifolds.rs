//! Embedded targets N^n ⊂ R^ν. The funnel targets are hypersurfaces of
//! revolution about the last coordinate axis, which lets projection reduce to
//! a one-parameter search along a meridian and makes distances to the pole
//! exact meridian arc lengths.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::f64::consts::PI;
use std::sync::{Arc, OnceLock};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Grid, GridMap};
use crate::util::{complement_basis, dist, dot, norm, smoothstep5, smoothstep5_d, unit_angle};

/// Membership tolerance for points handed to geodesic queries and charts.
pub const MEMBERSHIP_TOL: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum ManifoldKind {
    Sphere,
    Euclidean,
    /// F(S^n ∖ {puncture}) with F(x) = λ(x)x and λ blowing up like (log 1/d)^α.
    FunnelSphere { alpha: f64 },
    /// |y′|² = y_{n+1}/(1+y_{n+1})^{2β−1}.
    AlgebraicFunnel { beta: f64 },
}

#[derive(Clone, Debug)]
pub struct TargetManifold {
    pub kind: ManifoldKind,
    pub n: usize,
    pub nu: usize,
    pub basepoint: Vec<f64>,
    pub compact: bool,
    /// Funnel sphere: largest λ at which charts are offered.
    /// Algebraic funnel: largest meridian parameter s at which charts are offered.
    pub chart_cutoff: f64,
    arc: Arc<OnceLock<ArcTable>>,
}

/// λ for the funnel sphere as a function of the spherical distance d to the puncture:
/// (log 1/d)^α blended to 1 across d ∈ (1/2, 1) by a quintic smoothstep.
pub fn funnel_lambda(alpha: f64, d: f64) -> f64 {
    if alpha == 0.0 || d >= 1.0 {
        return 1.0;
    }
    let l = (-d.ln()).powf(alpha);
    if d <= 0.5 {
        return l;
    }
    let chi = 1.0 - smoothstep5((d - 0.5) / 0.5);
    chi * l + (1.0 - chi)
}

pub fn funnel_lambda_d(alpha: f64, d: f64) -> f64 {
    if alpha == 0.0 || d >= 1.0 {
        return 0.0;
    }
    let lg = -d.ln();
    let l = lg.powf(alpha);
    let dl = -alpha * lg.powf(alpha - 1.0) / d;
    if d <= 0.5 {
        return dl;
    }
    let t = (d - 0.5) / 0.5;
    let chi = 1.0 - smoothstep5(t);
    let dchi = -smoothstep5_d(t) / 0.5;
    dchi * (l - 1.0) + chi * dl
}

/// Tabulated meridian arc length measured from the pole carrying the basepoint.
#[derive(Clone, Debug)]
struct ArcTable {
    step: f64,
    arc: Vec<f64>,
}

impl ArcTable {
    fn build(f: impl Fn(f64) -> f64, step: f64, len: usize) -> ArcTable {
        let mut arc = Vec::with_capacity(len + 1);
        arc.push(0.0);
        let mut acc = 0.0;
        for k in 0..len {
            let a = k as f64 * step;
            acc += step / 6.0 * (f(a) + 4.0 * f(a + step / 2.0) + f(a + step));
            arc.push(acc);
        }
        ArcTable { step, arc }
    }

    fn end(&self) -> f64 {
        (self.arc.len() - 1) as f64 * self.step
    }

    fn at(&self, v: f64) -> f64 {
        let t = (v / self.step).max(0.0);
        let k = (t.floor() as usize).min(self.arc.len() - 2);
        let f = t - k as f64;
        self.arc[k] * (1.0 - f) + self.arc[k + 1] * f
    }

    /// Smallest v with arc(v) ≥ target (None past the table).
    fn inverse(&self, target: f64) -> Option<f64> {
        let k = self.arc.partition_point(|&a| a < target);
        if k == 0 {
            return Some(0.0);
        }
        if k >= self.arc.len() {
            return None;
        }
        let (a0, a1) = (self.arc[k - 1], self.arc[k]);
        let f = if a1 > a0 { (target - a0) / (a1 - a0) } else { 0.0 };
        Some((k as f64 - 1.0 + f) * self.step)
    }
}

const FUNNEL_TABLE_V: f64 = 50.0;
const ALG_TABLE_S: f64 = 50.0;

impl TargetManifold {
    fn build(kind: ManifoldKind, n: usize, nu: usize, basepoint: Vec<f64>, compact: bool, cutoff: f64) -> Self {
        TargetManifold { kind, n, nu, basepoint, compact, chart_cutoff: cutoff, arc: Arc::new(OnceLock::new()) }
    }

    pub fn sphere(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::ParameterOutOfRange("sphere dimension must be ≥ 1".into()));
        }
        let mut a = vec![0.0; n + 1];
        a[n] = 1.0;
        Ok(Self::build(ManifoldKind::Sphere, n, n + 1, a, true, f64::INFINITY))
    }

    pub fn euclidean(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::ParameterOutOfRange("Euclidean dimension must be ≥ 1".into()));
        }
        Ok(Self::build(ManifoldKind::Euclidean, n, n, vec![0.0; n], false, f64::INFINITY))
    }

    /// Funnel sphere with the puncture at the south pole and the basepoint at the north pole.
    /// α = 0 gives the round sphere (compact).
    pub fn funnel_sphere(n: usize, alpha: f64) -> Result<Self> {
        if n < 2 {
            return Err(Error::ParameterOutOfRange("funnel sphere needs n ≥ 2".into()));
        }
        let top = (n as f64 - 1.0) / n as f64;
        if !(alpha >= 0.0 && alpha < top) {
            return Err(Error::ParameterOutOfRange(format!("α = {alpha} outside [0, {top})")));
        }
        let mut a = vec![0.0; n + 1];
        a[n] = 1.0;
        Ok(Self::build(ManifoldKind::FunnelSphere { alpha }, n, n + 1, a, alpha == 0.0, 1.25))
    }

    /// Algebraic funnel with the basepoint at its vertex (the origin).
    pub fn algebraic_funnel(n: usize, beta: f64) -> Result<Self> {
        if n < 2 {
            return Err(Error::ParameterOutOfRange("algebraic funnel needs n ≥ 2".into()));
        }
        let lo = n as f64 / (n as f64 - 1.0);
        if !(beta > lo && beta.is_finite()) {
            return Err(Error::ParameterOutOfRange(format!("β = {beta} must exceed {lo}")));
        }
        let s_star = (1.0 / (2.0 * beta - 2.0)).sqrt();
        Ok(Self::build(ManifoldKind::AlgebraicFunnel { beta }, n, n + 1, vec![0.0; n + 1], false, 0.5 * s_star))
    }

    /// Replace the basepoint (sphere and Euclidean targets only).
    pub fn with_basepoint(mut self, a: &[f64]) -> Result<Self> {
        if !matches!(self.kind, ManifoldKind::Sphere | ManifoldKind::Euclidean) {
            return Err(Error::InvalidInput("funnel targets keep their basepoint at the pole".into()));
        }
        if a.len() != self.nu || self.residual(a) > 1e-10 {
            return Err(Error::NotOnManifold(self.residual(a)));
        }
        self.basepoint = a.to_vec();
        Ok(self)
    }

    fn alpha(&self) -> f64 {
        match self.kind {
            ManifoldKind::FunnelSphere { alpha } => alpha,
            _ => 0.0,
        }
    }

    /// Meridian point (distance to axis, height) at parameter t.
    /// Sphere and funnel: t is the angle from the south pole. Algebraic: t = √(y_{n+1}).
    pub fn profile(&self, t: f64) -> (f64, f64) {
        match self.kind {
            ManifoldKind::AlgebraicFunnel { beta } => (t / (1.0 + t * t).powf(beta - 0.5), t * t),
            _ => {
                let l = funnel_lambda(self.alpha(), t);
                (l * t.sin(), -l * t.cos())
            }
        }
    }

    /// Meridian parameter of a point (radial for sphere-like targets).
    pub fn param_of(&self, y: &[f64]) -> f64 {
        let z = y[self.nu - 1];
        let r = norm(&y[..self.nu - 1]);
        match self.kind {
            ManifoldKind::AlgebraicFunnel { .. } => z.max(0.0).sqrt(),
            _ => r.atan2(-z),
        }
    }

    /// Membership residual; zero exactly on N.
    pub fn residual(&self, y: &[f64]) -> f64 {
        if y.len() != self.nu || y.iter().any(|v| !v.is_finite()) {
            return f64::INFINITY;
        }
        match self.kind {
            ManifoldKind::Euclidean => 0.0,
            ManifoldKind::Sphere => (norm(y) - 1.0).abs(),
            ManifoldKind::FunnelSphere { alpha } => {
                let r = norm(y);
                if r == 0.0 {
                    return f64::INFINITY;
                }
                (r - funnel_lambda(alpha, self.param_of(y))).abs()
            }
            ManifoldKind::AlgebraicFunnel { beta } => {
                let z = y[self.nu - 1];
                let r2 = dot(&y[..self.nu - 1], &y[..self.nu - 1]);
                if z < 0.0 {
                    return -z + r2.sqrt();
                }
                (r2 - z / (1.0 + z).powf(2.0 * beta - 1.0)).abs()
            }
        }
    }

    fn lift(&self, t: f64, omega: &[f64]) -> Vec<f64> {
        let (rho, z) = self.profile(t);
        let mut y: Vec<f64> = omega.iter().map(|w| rho * w).collect();
        y.push(z);
        y
    }

    /// Nearest-point projection Π.
    pub fn project(&self, y: &[f64]) -> Result<Vec<f64>> {
        if y.len() != self.nu {
            return Err(Error::InvalidInput(format!("point has {} coordinates, expected {}", y.len(), self.nu)));
        }
        match self.kind {
            ManifoldKind::Euclidean => Ok(y.to_vec()),
            ManifoldKind::Sphere => {
                let r = norm(y);
                if !(r > 1e-12) || !r.is_finite() {
                    return Err(Error::OutsideTubularNeighborhood(format!("|y| = {r} at the focal centre")));
                }
                Ok(y.iter().map(|v| v / r).collect())
            }
            _ => self.project_revolution(y),
        }
    }

    /// Projection into a caller-provided buffer.
    pub fn project_into(&self, y: &[f64], out: &mut [f64]) -> Result<()> {
        match self.kind {
            ManifoldKind::Euclidean => {
                out.copy_from_slice(y);
                Ok(())
            }
            ManifoldKind::Sphere => {
                let r = norm(y);
                if !(r > 1e-12) || !r.is_finite() {
                    return Err(Error::OutsideTubularNeighborhood(format!("|y| = {r} at the focal centre")));
                }
                out.iter_mut().zip(y).for_each(|(o, v)| *o = v / r);
                Ok(())
            }
            _ => {
                out.copy_from_slice(&self.project_revolution(y)?);
                Ok(())
            }
        }
    }

    /// Damped Newton along the meridian. Also applies to the round sphere, which
    /// is used to cross-check the closed form.
    pub fn project_generic(&self, y: &[f64]) -> Result<Vec<f64>> {
        match self.kind {
            ManifoldKind::Euclidean => Ok(y.to_vec()),
            _ => self.project_revolution(y),
        }
    }

    fn project_revolution(&self, y: &[f64]) -> Result<Vec<f64>> {
        let k = self.nu - 1;
        let qr = norm(&y[..k]);
        let qz = y[k];
        if !qr.is_finite() || !qz.is_finite() {
            return Err(Error::OutsideTubularNeighborhood("non-finite point".into()));
        }
        let mut omega = vec![0.0; k];
        let on_axis = qr < 1e-300;
        if on_axis {
            omega[0] = 1.0;
        } else {
            omega.iter_mut().zip(&y[..k]).for_each(|(o, v)| *o = v / qr);
        }
        let algebraic = matches!(self.kind, ManifoldKind::AlgebraicFunnel { .. });
        // Work in s = √(height) for the algebraic funnel, τ = ln d otherwise.
        let to_t = |x: f64| if algebraic { x } else { x.exp() };
        let curve = |x: f64| self.profile(to_t(x));
        let phi = |x: f64| {
            let (r, z) = curve(x);
            0.5 * ((r - qr).powi(2) + (z - qz).powi(2))
        };
        let (x_lo, x_hi) = if algebraic { (0.0, f64::INFINITY) } else { (-700.0, PI.ln()) };
        // Initial guess: radial parameter, refined by a local scan.
        let x0 = if algebraic {
            let s_hi = qz.max(0.0).sqrt() + qr + 2.0;
            let mut best = (f64::INFINITY, 0.0);
            for i in 0..=400 {
                let s = s_hi * i as f64 / 400.0;
                let v = phi(s);
                if v < best.0 {
                    best = (v, s);
                }
            }
            best.1
        } else {
            let d0 = qr.atan2(-qz);
            if d0 <= 0.0 {
                return Err(Error::OutsideTubularNeighborhood("point on the puncture axis".into()));
            }
            let x = d0.ln().max(x_lo);
            let mut best = (phi(x), x);
            for i in -40..=40 {
                let xi = (x + 0.05 * i as f64).clamp(x_lo, x_hi);
                let v = phi(xi);
                if v < best.0 {
                    best = (v, xi);
                }
            }
            best.1
        };
        let hs = 1e-3;
        let d1 = |x: f64| {
            let f = |s: f64| curve((x + s * hs).clamp(x_lo, x_hi));
            let (a, b, c, d) = (f(-2.0), f(-1.0), f(1.0), f(2.0));
            ((a.0 - 8.0 * b.0 + 8.0 * c.0 - d.0) / (12.0 * hs), (a.1 - 8.0 * b.1 + 8.0 * c.1 - d.1) / (12.0 * hs))
        };
        let d2 = |x: f64| {
            let (a, b, c) = (curve(x - hs), curve(x), curve(x + hs));
            ((a.0 - 2.0 * b.0 + c.0) / (hs * hs), (a.1 - 2.0 * b.1 + c.1) / (hs * hs))
        };
        let mut x = x0;
        let mut converged = false;
        for _ in 0..100 {
            let c = curve(x);
            let (c1, c2) = (d1(x), d2(x));
            let e = (c.0 - qr, c.1 - qz);
            let g = e.0 * c1.0 + e.1 * c1.1;
            let hss = c1.0 * c1.0 + c1.1 * c1.1 + e.0 * c2.0 + e.1 * c2.1;
            let mut step = if hss > 0.0 { -g / hss } else { -g.signum() * 0.1 };
            step = step.clamp(-0.5, 0.5);
            let f0 = phi(x);
            let mut accepted = false;
            for _ in 0..40 {
                let xn = (x + step).clamp(x_lo, x_hi);
                if phi(xn) <= f0 {
                    let moved = (xn - x).abs();
                    x = xn;
                    accepted = true;
                    if moved < 1e-14 * x.abs().max(1.0) {
                        converged = true;
                    }
                    break;
                }
                step *= 0.5;
            }
            if !accepted || converged {
                converged = true;
                break;
            }
        }
        if !converged {
            return Err(Error::OutsideTubularNeighborhood("meridian Newton did not converge".into()));
        }
        let t = to_t(x);
        let c = curve(x);
        let (c1, c2) = (d1(x), d2(x));
        let speed = (c1.0 * c1.0 + c1.1 * c1.1).sqrt();
        if speed == 0.0 {
            return Err(Error::OutsideTubularNeighborhood("degenerate meridian".into()));
        }
        // Unit normal in the meridian half-plane and the two principal curvatures.
        let nrm = (c1.1 / speed, -c1.0 / speed);
        let s = (qr - c.0) * nrm.0 + (qz - c.1) * nrm.1;
        let k1 = (c2.0 * c1.1 - c2.1 * c1.0) / speed.powi(3);
        let k2 = if c.0 > 1e-9 { -c1.1 / (c.0 * speed) } else { k1 };
        if 1.0 - s * k1 <= 1e-9 || (self.n >= 2 && 1.0 - s * k2 <= 1e-9) {
            return Err(Error::OutsideTubularNeighborhood(format!(
                "offset {s:.3e} beyond the local focal distance"
            )));
        }
        if on_axis && c.0 > 1e-9 {
            return Err(Error::OutsideTubularNeighborhood("axis point with non-unique projection".into()));
        }
        Ok(self.lift(t, &omega))
    }

    /// Largest absolute principal curvature at meridian parameter t.
    fn max_curvature(&self, t: f64) -> f64 {
        let hs = 1e-4 * t.abs().max(1e-3);
        let (a, b, c) = (self.profile(t - hs), self.profile(t), self.profile(t + hs));
        let c1 = ((c.0 - a.0) / (2.0 * hs), (c.1 - a.1) / (2.0 * hs));
        let c2 = ((a.0 - 2.0 * b.0 + c.0) / (hs * hs), (a.1 - 2.0 * b.1 + c.1) / (hs * hs));
        let speed = (c1.0 * c1.0 + c1.1 * c1.1).sqrt();
        let k1 = ((c2.0 * c1.1 - c2.1 * c1.0) / speed.powi(3)).abs();
        let k2 = if b.0 > 1e-9 { (c1.1 / (b.0 * speed)).abs() } else { k1 };
        k1.max(k2)
    }

    fn arc_table(&self) -> &ArcTable {
        self.arc.get_or_init(|| match self.kind {
            ManifoldKind::AlgebraicFunnel { beta } => ArcTable::build(
                |s| {
                    let dr = (1.0 + s * s).powf(-beta - 0.5) * (1.0 + s * s - (2.0 * beta - 1.0) * s * s);
                    (dr * dr + 4.0 * s * s).sqrt()
                },
                1e-3,
                (ALG_TABLE_S / 1e-3) as usize,
            ),
            _ => {
                let alpha = self.alpha();
                // v = ln(π/d); |dc/dv| = d·√(λ² + λ′²).
                ArcTable::build(
                    |v| {
                        let d = PI * (-v).exp();
                        let l = funnel_lambda(alpha, d);
                        let dl = funnel_lambda_d(alpha, d);
                        d * (l * l + dl * dl).sqrt()
                    },
                    1e-3,
                    (FUNNEL_TABLE_V / 1e-3) as usize,
                )
            }
        })
    }

    /// Geodesic distance from the basepoint; exact along meridians for the
    /// funnels, closed form otherwise. No membership check.
    pub fn dist_to_basepoint(&self, y: &[f64]) -> f64 {
        match self.kind {
            ManifoldKind::Euclidean => dist(y, &self.basepoint),
            ManifoldKind::Sphere => {
                let r = norm(y);
                let yh: Vec<f64> = y.iter().map(|v| v / r).collect();
                unit_angle(&yh, &self.basepoint)
            }
            ManifoldKind::AlgebraicFunnel { .. } => {
                let s = self.param_of(y);
                let tab = self.arc_table();
                if s <= tab.end() {
                    tab.at(s)
                } else {
                    tab.at(tab.end()) + (s * s - tab.end() * tab.end())
                }
            }
            ManifoldKind::FunnelSphere { alpha } => {
                let d = self.param_of(y).max(1e-300);
                let v = (PI / d).ln();
                let tab = self.arc_table();
                if v <= tab.end() {
                    tab.at(v)
                } else {
                    let d_end = PI * (-tab.end()).exp();
                    tab.at(tab.end()) + (funnel_lambda(alpha, d) - funnel_lambda(alpha, d_end)).abs()
                }
            }
        }
    }

    /// Meridian parameter range covering the closed geodesic ball B_N(a; r).
    fn param_range_of_ball(&self, r: f64) -> (f64, f64) {
        let tab = self.arc_table();
        match self.kind {
            ManifoldKind::AlgebraicFunnel { .. } => (0.0, tab.inverse(r).unwrap_or(tab.end())),
            _ => {
                let v = tab.inverse(r).unwrap_or(tab.end());
                (PI * (-v).exp(), PI)
            }
        }
    }

    /// Conservative tubular width around the geodesic ball B_N(a; R̄): half the
    /// smallest principal radius of curvature sampled over the ball.
    pub fn tubular_radius(&self, rbar: f64) -> f64 {
        match self.kind {
            ManifoldKind::Euclidean => f64::INFINITY,
            ManifoldKind::Sphere => 0.5,
            ManifoldKind::FunnelSphere { .. } => {
                let (d_lo, d_hi) = self.param_range_of_ball(rbar.max(0.0));
                let (v_lo, v_hi) = ((PI / d_hi).ln(), (PI / d_lo).ln());
                let mut kmax: f64 = 1.0;
                for i in 0..=4000 {
                    let v = v_lo + (v_hi - v_lo) * i as f64 / 4000.0;
                    let d = (PI * (-v).exp()).min(PI - 1e-3);
                    kmax = kmax.max(self.max_curvature(d));
                }
                0.5 / kmax
            }
            ManifoldKind::AlgebraicFunnel { .. } => {
                let (_, s_hi) = self.param_range_of_ball(rbar.max(0.0));
                let mut kmax: f64 = 0.0;
                for i in 0..=4000 {
                    let s = (s_hi * i as f64 / 4000.0).max(1e-3);
                    kmax = kmax.max(self.max_curvature(s));
                }
                0.5 / kmax.max(1e-12)
            }
        }
    }

    fn check_member(&self, y: &[f64]) -> Result<()> {
        let r = self.residual(y);
        if r > MEMBERSHIP_TOL {
            return Err(Error::NotOnManifold(r));
        }
        Ok(())
    }

    /// Geodesic distance. Closed forms for the sphere and Euclidean space,
    /// meridian arc length when one endpoint is the pole, path straightening otherwise.
    pub fn geodesic_distance(&self, a: &[f64], b: &[f64]) -> Result<f64> {
        self.check_member(a)?;
        self.check_member(b)?;
        if dist(a, b) < 1e-14 {
            return Ok(0.0);
        }
        match self.kind {
            ManifoldKind::Euclidean => Ok(dist(a, b)),
            ManifoldKind::Sphere => Ok(unit_angle(a, b)),
            _ => {
                if dist(a, &self.basepoint) < 1e-12 {
                    return Ok(self.dist_to_basepoint(b));
                }
                if dist(b, &self.basepoint) < 1e-12 {
                    return Ok(self.dist_to_basepoint(a));
                }
                let path = self.geodesic_path(a, b, 256)?;
                Ok(polyline_length(&path))
            }
        }
    }

    fn initial_path(&self, a: &[f64], b: &[f64], k: usize) -> Vec<Vec<f64>> {
        let nu = self.nu;
        match self.kind {
            ManifoldKind::Euclidean => (0..=k)
                .map(|i| {
                    let s = i as f64 / k as f64;
                    a.iter().zip(b).map(|(x, y)| x + s * (y - x)).collect()
                })
                .collect(),
            ManifoldKind::AlgebraicFunnel { .. } => {
                let (sa, sb) = (self.param_of(a), self.param_of(b));
                let dir = |y: &[f64]| {
                    let r = norm(&y[..nu - 1]);
                    let mut w = vec![0.0; nu - 1];
                    if r > 0.0 {
                        w.iter_mut().zip(&y[..nu - 1]).for_each(|(o, v)| *o = v / r);
                    } else {
                        w[0] = 1.0;
                    }
                    w
                };
                let (wa, wb) = (dir(a), dir(b));
                if unit_angle(&wa, &wb) < PI / 2.0 {
                    (0..=k)
                        .map(|i| {
                            let s = i as f64 / k as f64;
                            self.lift(sa + s * (sb - sa), &slerp(&wa, &wb, s))
                        })
                        .collect()
                } else {
                    // Down one meridian to the vertex and up the other.
                    let total = sa + sb;
                    (0..=k)
                        .map(|i| {
                            let s = total * i as f64 / k as f64;
                            if s <= sa {
                                self.lift(sa - s, &wa)
                            } else {
                                self.lift(s - sa, &wb)
                            }
                        })
                        .collect()
                }
            }
            _ => {
                let unit = |y: &[f64]| {
                    let r = norm(y);
                    y.iter().map(|v| v / r).collect::<Vec<f64>>()
                };
                let (ua, ub) = (unit(a), unit(b));
                let dirs: Vec<Vec<f64>> = if unit_angle(&ua, &ub) > PI - 1e-6 {
                    let mut mid = self.basepoint.clone();
                    let d = dot(&mid, &ua);
                    mid.iter_mut().zip(&ua).for_each(|(m, u)| *m -= d * u);
                    if norm(&mid) < 1e-6 {
                        mid = complement_basis(&ua)[0].clone();
                    }
                    let mid = unit(&mid);
                    let half = k / 2;
                    (0..=k)
                        .map(|i| {
                            if i <= half {
                                slerp(&ua, &mid, i as f64 / half as f64)
                            } else {
                                slerp(&mid, &ub, (i - half) as f64 / (k - half) as f64)
                            }
                        })
                        .collect()
                } else {
                    (0..=k).map(|i| slerp(&ua, &ub, i as f64 / k as f64)).collect()
                };
                let alpha = self.alpha();
                dirs.into_iter()
                    .map(|u| {
                        let d = self.param_of(&u);
                        let l = funnel_lambda(alpha, d);
                        u.iter().map(|v| v * l).collect()
                    })
                    .collect()
            }
        }
    }

    /// Discrete geodesic polygon with `k` segments, by multilevel midpoint
    /// straightening with projection. Endpoints are kept exactly.
    pub fn geodesic_path(&self, a: &[f64], b: &[f64], k: usize) -> Result<Vec<Vec<f64>>> {
        self.check_member(a)?;
        self.check_member(b)?;
        let k = k.max(2);
        let mut segs = 8.min(k);
        let mut pts = self.initial_path(a, b, segs);
        if dist(a, b) == 0.0 {
            return Ok(vec![a.to_vec(); k + 1]);
        }
        let nu = self.nu;
        let mut mid = vec![0.0; nu];
        let mut level = 0;
        loop {
            let max_sweeps = if level == 0 { 4000 } else { 400 };
            for _ in 0..max_sweeps {
                let len = polyline_length(&pts);
                let mut change: f64 = 0.0;
                for i in 1..segs {
                    for c in 0..nu {
                        mid[c] = 0.5 * (pts[i - 1][c] + pts[i + 1][c]);
                    }
                    if let Ok(q) = self.project(&mid) {
                        change = change.max(dist(&q, &pts[i]));
                        pts[i] = q;
                    }
                }
                if change < 1e-12 * len.max(1e-12) {
                    break;
                }
            }
            if segs >= k {
                break;
            }
            let mut refined = Vec::with_capacity(2 * segs + 1);
            for i in 0..segs {
                refined.push(pts[i].clone());
                for c in 0..nu {
                    mid[c] = 0.5 * (pts[i][c] + pts[i + 1][c]);
                }
                refined.push(self.project(&mid)?);
            }
            refined.push(pts[segs].clone());
            pts = refined;
            segs *= 2;
            level += 1;
        }
        pts[0] = a.to_vec();
        pts[segs] = b.to_vec();
        Ok(pts)
    }

    /// Local bi-Lipschitz chart around ξ of geodesic radius κ.
    pub fn chart_at(&self, xi: &[f64], kappa: f64) -> Result<Chart> {
        self.check_member(xi)?;
        if !(kappa > 0.0) {
            return Err(Error::ParameterOutOfRange(format!("chart radius κ = {kappa}")));
        }
        match self.kind {
            ManifoldKind::Euclidean => Ok(Chart {
                center: xi.to_vec(),
                kappa,
                kappa_prime: kappa,
                lipschitz: 1.0,
                kind: ChartKind::Identity,
            }),
            ManifoldKind::Sphere => {
                if kappa >= PI {
                    return Err(Error::ParameterOutOfRange(format!("κ = {kappa} must be below π")));
                }
                let xi_n: Vec<f64> = xi.iter().map(|v| v / norm(xi)).collect();
                Ok(Chart {
                    center: xi.to_vec(),
                    kappa,
                    kappa_prime: 2.0 * (kappa / 2.0).tan(),
                    lipschitz: (2.0 / (1.0 + kappa.cos())).max(1.0),
                    kind: ChartKind::Stereo { basis: complement_basis(&xi_n), xi: xi_n, alpha: None },
                })
            }
            ManifoldKind::FunnelSphere { alpha } => {
                let d = self.param_of(xi);
                let lam = funnel_lambda(alpha, d);
                if lam > self.chart_cutoff {
                    return Err(Error::NoUniformChart(format!(
                        "λ = {lam:.4} exceeds the chart cutoff {}",
                        self.chart_cutoff
                    )));
                }
                if kappa >= 1.0 {
                    return Err(Error::ParameterOutOfRange(format!("κ = {kappa} must be below 1 on the funnel")));
                }
                let r = norm(xi);
                let xi_n: Vec<f64> = xi.iter().map(|v| v / r).collect();
                // Stretch of F over a cap generous enough to contain B_N(ξ; κ).
                let lam_min = 0.8;
                let cap = (kappa / lam_min).min(d - 1e-6).max(0.0);
                let (mut smin, mut smax) = (f64::INFINITY, 0.0f64);
                for i in 0..=400 {
                    let di = (d - cap + 2.0 * cap * i as f64 / 400.0).clamp(1e-12, PI);
                    let l = funnel_lambda(alpha, di);
                    let dl = funnel_lambda_d(alpha, di);
                    smin = smin.min(l);
                    smax = smax.max((l * l + dl * dl).sqrt());
                }
                let theta = kappa / smin;
                let lip_fwd = 2.0 / (1.0 + theta.min(PI - 1e-3).cos()) / smin;
                Ok(Chart {
                    center: xi.to_vec(),
                    kappa,
                    kappa_prime: 2.0 * (kappa / (2.0 * smax)).tan(),
                    lipschitz: lip_fwd.max(smax),
                    kind: ChartKind::Stereo { basis: complement_basis(&xi_n), xi: xi_n, alpha: Some(alpha) },
                })
            }
            ManifoldKind::AlgebraicFunnel { beta } => {
                let s = self.param_of(xi);
                if s > self.chart_cutoff {
                    return Err(Error::NoUniformChart(format!(
                        "meridian parameter {s:.4} beyond the chart cutoff {:.4}",
                        self.chart_cutoff
                    )));
                }
                let s_star = (1.0 / (2.0 * beta - 2.0)).sqrt();
                // Graph chart y ↦ y′ − ξ′ over the increasing part of the meridian.
                let mut lip: f64 = 1.0;
                for i in 0..=400 {
                    let si = s_star * 0.9 * i as f64 / 400.0;
                    let dr = (1.0 + si * si).powf(-beta - 0.5) * (1.0 + si * si - (2.0 * beta - 1.0) * si * si);
                    lip = lip.max((dr * dr + 4.0 * si * si).sqrt() / dr);
                }
                let rho_xi = self.profile(s).0;
                let rho_max = self.profile(0.9 * s_star).0;
                Ok(Chart {
                    center: xi.to_vec(),
                    kappa,
                    kappa_prime: (kappa / lip).min(rho_max - rho_xi).max(0.0),
                    lipschitz: lip,
                    kind: ChartKind::Graph { beta, s_max: s_star },
                })
            }
        }
    }

    /// Chart of all of N onto R^n for the funnels (noncompact, diffeomorphic to R^n).
    pub fn global_chart(&self) -> Option<GlobalChart> {
        match self.kind {
            ManifoldKind::FunnelSphere { alpha } if alpha > 0.0 => Some(GlobalChart { manifold: self.clone() }),
            ManifoldKind::AlgebraicFunnel { .. } => Some(GlobalChart { manifold: self.clone() }),
            _ => None,
        }
    }
}

fn slerp(a: &[f64], b: &[f64], s: f64) -> Vec<f64> {
    let th = unit_angle(a, b);
    if th < 1e-12 {
        return a.to_vec();
    }
    let (wa, wb) = (((1.0 - s) * th).sin() / th.sin(), (s * th).sin() / th.sin());
    a.iter().zip(b).map(|(x, y)| wa * x + wb * y).collect()
}

pub fn polyline_length(pts: &[Vec<f64>]) -> f64 {
    pts.windows(2).map(|w| dist(&w[0], &w[1])).sum()
}

#[derive(Clone, Debug)]
enum ChartKind {
    Identity,
    /// Stereographic projection from −ξ of the radial direction; `alpha`
    /// rescales back onto the funnel.
    Stereo { xi: Vec<f64>, basis: Vec<Vec<f64>>, alpha: Option<f64> },
    Graph { beta: f64, s_max: f64 },
}

#[derive(Clone, Debug)]
pub struct Chart {
    pub center: Vec<f64>,
    pub kappa: f64,
    pub kappa_prime: f64,
    pub lipschitz: f64,
    kind: ChartKind,
}

impl Chart {
    /// Ψ : N ⊃ B_N(ξ; κ) → R^n with Ψ(ξ) = 0.
    pub fn forward(&self, y: &[f64]) -> Vec<f64> {
        match &self.kind {
            ChartKind::Identity => y.iter().zip(&self.center).map(|(a, b)| a - b).collect(),
            ChartKind::Stereo { xi, basis, .. } => {
                let r = norm(y);
                let yh: Vec<f64> = y.iter().map(|v| v / r).collect();
                let den = 1.0 + dot(&yh, xi);
                basis.iter().map(|b| 2.0 * dot(&yh, b) / den).collect()
            }
            ChartKind::Graph { .. } => {
                let k = y.len() - 1;
                (0..k).map(|i| y[i] - self.center[i]).collect()
            }
        }
    }

    /// Ψ⁻¹ : R^n → N.
    pub fn inverse(&self, w: &[f64]) -> Vec<f64> {
        match &self.kind {
            ChartKind::Identity => w.iter().zip(&self.center).map(|(a, b)| a + b).collect(),
            ChartKind::Stereo { xi, basis, alpha } => {
                let s = dot(w, w) / 4.0;
                let mut y: Vec<f64> = xi.iter().map(|v| (1.0 - s) * v).collect();
                for (wi, b) in w.iter().zip(basis) {
                    y.iter_mut().zip(b).for_each(|(yy, bb)| *yy += wi * bb);
                }
                y.iter_mut().for_each(|v| *v /= 1.0 + s);
                if let Some(a) = alpha {
                    let nu = y.len();
                    let d = norm(&y[..nu - 1]).atan2(-y[nu - 1]);
                    let l = funnel_lambda(*a, d);
                    y.iter_mut().for_each(|v| *v *= l);
                }
                y
            }
            ChartKind::Graph { beta, s_max } => {
                let k = w.len();
                let yp: Vec<f64> = (0..k).map(|i| w[i] + self.center[i]).collect();
                let target = norm(&yp);
                let rho = |s: f64| s / (1.0 + s * s).powf(beta - 0.5);
                let (mut lo, mut hi) = (0.0, *s_max);
                for _ in 0..200 {
                    let mid = 0.5 * (lo + hi);
                    if rho(mid) < target {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                let s = 0.5 * (lo + hi);
                let mut y = yp;
                y.push(s * s);
                y
            }
        }
    }
}

/// Global chart P : N → R^n of a funnel target; the funnel end goes to infinity.
#[derive(Clone, Debug)]
pub struct GlobalChart {
    manifold: TargetManifold,
}

impl GlobalChart {
    pub fn dim(&self) -> usize {
        self.manifold.n
    }

    pub fn forward(&self, y: &[f64]) -> Vec<f64> {
        let m = &self.manifold;
        let k = m.nu - 1;
        let r = norm(&y[..k]);
        match m.kind {
            ManifoldKind::AlgebraicFunnel { .. } => {
                let s = m.param_of(y);
                if r == 0.0 {
                    return vec![0.0; k];
                }
                y[..k].iter().map(|v| s * v / r).collect()
            }
            _ => {
                let rr = norm(y);
                let last = y[k] / rr;
                y[..k].iter().map(|v| 2.0 * v / rr / (1.0 + last)).collect()
            }
        }
    }

    pub fn inverse(&self, w: &[f64]) -> Vec<f64> {
        let m = &self.manifold;
        let k = m.nu - 1;
        let r = norm(w);
        match m.kind {
            ManifoldKind::AlgebraicFunnel { .. } => {
                let mut omega = vec![0.0; k];
                if r > 0.0 {
                    omega.iter_mut().zip(w).for_each(|(o, v)| *o = v / r);
                } else {
                    omega[0] = 1.0;
                }
                m.lift(r, &omega)
            }
            _ => {
                let s = r * r / 4.0;
                let mut u: Vec<f64> = w.iter().map(|v| v / (1.0 + s)).collect();
                u.push((1.0 - s) / (1.0 + s));
                let d = m.param_of(&u);
                let l = funnel_lambda(m.alpha(), d);
                u.iter().map(|v| v * l).collect()
            }
        }
    }
}

/// Radial profile of the diffeomorphism f: Q̄ⁿ → neighbourhood of the puncture:
/// inverse Lambert azimuthal map d(r) = 2·asin(c·r/2) followed by the
/// exponential map at the puncture.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FunnelProfile {
    pub scale: f64,
}

impl Default for FunnelProfile {
    fn default() -> Self {
        FunnelProfile { scale: 1.0 }
    }
}

/// u = F∘f for the funnel sphere.
#[derive(Clone, Debug)]
pub struct FunnelMap {
    pub n: usize,
    pub alpha: f64,
    pub profile: FunnelProfile,
}

/// Builder for the counterexample map u = F∘f; requires 0 < α < (n−1)/n.
pub fn embed_funnel(n: usize, alpha: f64, profile: FunnelProfile) -> Result<FunnelMap> {
    let top = (n as f64 - 1.0) / n as f64;
    if n < 2 || !(alpha > 0.0 && alpha < top) {
        return Err(Error::ParameterOutOfRange(format!("α = {alpha} outside (0, {top}) for n = {n}")));
    }
    embed_funnel_unchecked(n, alpha, profile)
}

/// Same construction allowing α = 0 (the round sphere, where the map is bounded).
pub fn embed_funnel_unchecked(n: usize, alpha: f64, profile: FunnelProfile) -> Result<FunnelMap> {
    if profile.scale * (n as f64).sqrt() / 2.0 >= 1.0 || profile.scale <= 0.0 {
        return Err(Error::ParameterOutOfRange(format!(
            "profile scale {} does not keep f injective on the closed cube",
            profile.scale
        )));
    }
    Ok(FunnelMap { n, alpha, profile })
}

impl FunnelMap {
    pub fn manifold(&self) -> Result<TargetManifold> {
        TargetManifold::funnel_sphere(self.n, self.alpha)
    }

    /// Spherical distance to the puncture of f(x).
    pub fn sphere_dist(&self, r: f64) -> f64 {
        2.0 * (self.profile.scale * r / 2.0).min(1.0).asin()
    }

    /// u(x) for x ≠ 0.
    pub fn eval(&self, x: &[f64], out: &mut [f64]) {
        let n = self.n;
        let r = norm(x);
        let d = self.sphere_dist(r);
        let l = funnel_lambda(self.alpha, d);
        for i in 0..n {
            out[i] = l * d.sin() * x[i] / r;
        }
        out[n] = -l * d.cos();
    }

    /// Sample on a grid; a node at the origin takes the value of its +x₁ neighbour.
    pub fn to_gridmap(&self, grid: &Grid) -> Result<GridMap> {
        if grid.m != self.n {
            return Err(Error::InvalidInput("funnel map needs an n-dimensional grid".into()));
        }
        let h = grid.h();
        Ok(GridMap::from_fn(grid.clone(), self.n + 1, |x, o| {
            if norm(x) < 1e-12 * h {
                let mut y = x.to_vec();
                y[0] += h;
                self.eval(&y, o);
            } else {
                self.eval(x, o);
            }
        }))
    }
}

/// u(x) = (√w/(1+w)^{β−1/2}·x/|x|, w(|x|)) with w = |log r|^γ near 0 and 0 for r > 2/3.
#[derive(Clone, Debug)]
pub struct AlgebraicBadMap {
    pub n: usize,
    pub beta: f64,
    pub gamma: f64,
}

pub fn bad_map_algebraic(n: usize, beta: f64, gamma: f64) -> Result<AlgebraicBadMap> {
    if n < 2 {
        return Err(Error::ParameterOutOfRange("n must be ≥ 2".into()));
    }
    let nf = n as f64;
    if !(beta > nf / (nf - 1.0)) {
        return Err(Error::ParameterOutOfRange(format!("β = {beta} must exceed {}", nf / (nf - 1.0))));
    }
    let (lo, hi) = (1.0 / (nf * (beta - 1.0)), (nf - 1.0) / nf);
    if !(gamma > lo && gamma < hi) {
        return Err(Error::ParameterOutOfRange(format!("γ = {gamma} outside ({lo}, {hi})")));
    }
    Ok(AlgebraicBadMap { n, beta, gamma })
}

impl AlgebraicBadMap {
    pub fn manifold(&self) -> Result<TargetManifold> {
        TargetManifold::algebraic_funnel(self.n, self.beta)
    }

    pub fn w(&self, r: f64) -> f64 {
        if r >= 2.0 / 3.0 {
            return 0.0;
        }
        let chi = 1.0 - smoothstep5((r - 1.0 / 3.0) * 3.0);
        chi * (-r.ln()).abs().powf(self.gamma)
    }

    pub fn eval(&self, x: &[f64], out: &mut [f64]) {
        let n = self.n;
        let r = norm(x);
        let w = self.w(r);
        let a = w.sqrt() / (1.0 + w).powf(self.beta - 0.5);
        for i in 0..n {
            out[i] = a * x[i] / r;
        }
        out[n] = w;
    }

    pub fn to_gridmap(&self, grid: &Grid) -> Result<GridMap> {
        if grid.m != self.n {
            return Err(Error::InvalidInput("bad map needs an n-dimensional grid".into()));
        }
        let h = grid.h();
        Ok(GridMap::from_fn(grid.clone(), self.n + 1, |x, o| {
            if norm(x) < 1e-12 * h {
                let mut y = x.to_vec();
                y[0] += h;
                self.eval(&y, o);
            } else {
                self.eval(x, o);
            }
        }))
    }
}

#[derive(Copy, Clone, PartialEq)]
struct HeapItem(f64, usize);

impl Eq for HeapItem {}

impl Ord for HeapItem {
    fn cmp(&self, other: &Self) -> Ordering {
        other.0.partial_cmp(&self.0).unwrap_or(Ordering::Equal).then(other.1.cmp(&self.1))
    }
}

impl PartialOrd for HeapItem {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Shortest paths on a dense sample graph of a two-dimensional surface of
/// revolution. Built once, then queried read-only; an independent check on
/// the straightening solver.
pub struct GraphGeodesicOracle {
    n_t: usize,
    n_phi: usize,
    t_lo: f64,
    t_hi: f64,
    positions: Vec<[f64; 3]>,
    offsets: Vec<(isize, isize)>,
    algebraic: bool,
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

impl GraphGeodesicOracle {
    /// Sample graph over meridian parameters [t_lo, t_hi] (angle from the
    /// puncture for the funnel sphere, √height for the algebraic funnel).
    pub fn build(m: &TargetManifold, n_t: usize, n_phi: usize, t_lo: f64, t_hi: f64) -> Result<Self> {
        if m.n != 2 || !matches!(m.kind, ManifoldKind::FunnelSphere { .. } | ManifoldKind::AlgebraicFunnel { .. } | ManifoldKind::Sphere) {
            return Err(Error::InvalidInput("graph oracle supports two-dimensional surfaces of revolution".into()));
        }
        let mut positions = Vec::with_capacity(n_t * n_phi);
        for i in 0..n_t {
            let t = t_lo + (t_hi - t_lo) * i as f64 / (n_t - 1) as f64;
            let (rho, z) = m.profile(t);
            for j in 0..n_phi {
                let ph = 2.0 * PI * j as f64 / n_phi as f64;
                positions.push([rho * ph.cos(), rho * ph.sin(), z]);
            }
        }
        let mut offsets = Vec::new();
        for di in -3isize..=3 {
            for dj in -3isize..=3 {
                if (di, dj) != (0, 0) && gcd(di.unsigned_abs(), dj.unsigned_abs()) == 1 {
                    offsets.push((di, dj));
                }
            }
        }
        Ok(GraphGeodesicOracle {
            n_t,
            n_phi,
            t_lo,
            t_hi,
            positions,
            offsets,
            algebraic: matches!(m.kind, ManifoldKind::AlgebraicFunnel { .. }),
        })
    }

    fn locate(&self, y: &[f64]) -> (isize, isize) {
        let r = (y[0] * y[0] + y[1] * y[1]).sqrt();
        let t = if self.algebraic { y[2].max(0.0).sqrt() } else { r.atan2(-y[2]) };
        let i = ((t - self.t_lo) / (self.t_hi - self.t_lo) * (self.n_t - 1) as f64).round() as isize;
        let ph = y[1].atan2(y[0]).rem_euclid(2.0 * PI);
        let j = (ph / (2.0 * PI) * self.n_phi as f64).round() as isize;
        (i, j)
    }

    fn window(&self, y: &[f64]) -> Vec<(usize, f64)> {
        let (i0, j0) = self.locate(y);
        let mut out = Vec::new();
        for di in -3..=3 {
            let i = i0 + di;
            if i < 0 || i >= self.n_t as isize {
                continue;
            }
            for dj in -3..=3 {
                let j = (j0 + dj).rem_euclid(self.n_phi as isize);
                let node = i as usize * self.n_phi + j as usize;
                out.push((node, dist(y, &self.positions[node])));
            }
        }
        out
    }

    /// Graph distance between two surface points inside the sampled band.
    pub fn distance(&self, a: &[f64], b: &[f64]) -> f64 {
        let sources = self.window(a);
        let targets = self.window(b);
        let direct = dist(a, b);
        let mut best = f64::INFINITY;
        if sources.iter().any(|s| targets.iter().any(|t| t.0 == s.0)) {
            best = direct;
        }
        let n = self.positions.len();
        let mut d = vec![f64::INFINITY; n];
        let mut heap = BinaryHeap::new();
        for &(node, w) in &sources {
            if w < d[node] {
                d[node] = w;
                heap.push(HeapItem(w, node));
            }
        }
        let mut tail = vec![f64::INFINITY; n];
        for &(node, w) in &targets {
            tail[node] = tail[node].min(w);
        }
        while let Some(HeapItem(dv, v)) = heap.pop() {
            if dv > d[v] {
                continue;
            }
            if dv >= best {
                break;
            }
            if tail[v].is_finite() {
                best = best.min(dv + tail[v]);
            }
            let (i, j) = ((v / self.n_phi) as isize, (v % self.n_phi) as isize);
            for &(di, dj) in &self.offsets {
                let ii = i + di;
                if ii < 0 || ii >= self.n_t as isize {
                    continue;
                }
                let jj = (j + dj).rem_euclid(self.n_phi as isize);
                let u = ii as usize * self.n_phi + jj as usize;
                let nd = dv + dist(&self.positions[v], &self.positions[u]);
                if nd < d[u] {
                    d[u] = nd;
                    heap.push(HeapItem(nd, u));
                }
            }
        }
        best
    }
}
