//! Non-density evidence for the funnel sphere: finite energy, unbounded range,
//! nonzero degrees on shrinking cubes and a battery of bounded competitors that
//! all stay a fixed distance away.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::grid::{energy, Grid, GridMap, Region};
use crate::manifolds::{embed_funnel, embed_funnel_unchecked, FunnelMap, FunnelProfile};
use crate::trimming::{fold_competitor, obstruction_certificate, probe_cap, product_obstruction, ObstructionCertificate, ProductGap};
use crate::util::norm;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct CounterexampleParams {
    pub alpha: f64,
    pub res: usize,
    pub radii: Vec<f64>,
    /// Energy cut-offs δ = 2^{−k}.
    pub delta_exponents: Vec<u32>,
    pub n_probes: usize,
    pub cap_theta: f64,
    /// Fold heights of the competitor battery (values of λ where the fold starts).
    pub heights: Vec<f64>,
    /// Resolution of the core grid used for the dimension lift.
    pub lift_res: usize,
    pub profile: FunnelProfile,
    pub seed: u64,
    /// Relative successive-difference bound for the energy sequence.
    pub cauchy_tol: f64,
    /// Relative tolerance on the fitted growth exponent.
    pub exponent_tol: f64,
    /// Relative tolerance on the lifted gap factor.
    pub lift_tol: f64,
}

impl Default for CounterexampleParams {
    fn default() -> Self {
        CounterexampleParams {
            alpha: 0.4,
            res: 513,
            radii: vec![0.25, 0.125, 0.0625],
            delta_exponents: (3..=7).collect(),
            n_probes: 3,
            cap_theta: PI / 2.0,
            heights: (0..10).map(|i| 1.1 + 0.07 * i as f64).collect(),
            lift_res: 129,
            profile: FunnelProfile::default(),
            seed: 20,
            cauchy_tol: 0.01,
            exponent_tol: 0.10,
            lift_tol: 0.05,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct EnergyRow {
    pub delta: f64,
    /// ∫_{Q∖Q_δ}|Du|^n.
    pub energy: f64,
    /// |E_k − E_{k−1}| / E_k, absent for the first row.
    pub rel_change: Option<f64>,
    /// max |u| on Q∖Q_δ.
    pub sup: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct SubCheck {
    pub name: String,
    pub value: f64,
    pub bound: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct GapReport {
    pub map: String,
    pub n: usize,
    pub m: usize,
    pub alpha: f64,
    pub res: usize,
    pub energies: Vec<EnergyRow>,
    /// Mass of cells inside the δ-floor |x|_∞ < 2h, left out of every sum.
    pub excluded_measure: f64,
    pub fitted_exponent: f64,
    pub certificate: ObstructionCertificate,
    pub epsilon: f64,
    pub lift: ProductGap,
    pub checks: Vec<SubCheck>,
    pub passed: bool,
}

impl GapReport {
    pub fn check(&self, name: &str) -> Option<&SubCheck> {
        self.checks.iter().find(|c| c.name == name)
    }
}

fn check(name: &str, value: f64, bound: f64, pass: bool) -> SubCheck {
    SubCheck { name: name.into(), value, bound, pass }
}

/// Least-squares slope of y against x.
fn slope(x: &[f64], y: &[f64]) -> f64 {
    let k = x.len() as f64;
    let mx = x.iter().sum::<f64>() / k;
    let my = y.iter().sum::<f64>() / k;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}

fn energy_table(u: &GridMap, deltas: &[f64]) -> Result<Vec<EnergyRow>> {
    let g = &u.grid;
    let floor = 2.0 * g.h();
    let nf = g.m as f64;
    let mut rows: Vec<EnergyRow> = deltas
        .par_iter()
        .map(|&d| {
            let dd = d.max(floor);
            let reg = Region::from_cells(g, "annulus", |x| x.iter().fold(0.0f64, |a, v| a.max(v.abs())) > dd);
            let e = energy(u, nf, &reg)?;
            let mask = reg.node_mask();
            let sup = (0..u.n_nodes()).filter(|&i| mask[i]).map(|i| norm(u.value(i))).fold(0.0, f64::max);
            Ok(EnergyRow { delta: d, energy: e, rel_change: None, sup })
        })
        .collect::<Result<_>>()?;
    for k in 1..rows.len() {
        let prev = rows[k - 1].energy;
        rows[k].rel_change = Some((rows[k].energy - prev).abs() / rows[k].energy.max(f64::MIN_POSITIVE));
    }
    Ok(rows)
}

fn build_map(n: usize, params: &CounterexampleParams) -> Result<FunnelMap> {
    if params.alpha == 0.0 {
        embed_funnel_unchecked(n, 0.0, params.profile)
    } else {
        embed_funnel(n, params.alpha, params.profile)
    }
}

/// Builds the funnel map on Q^n, verifies the qualitative chain behind the
/// non-density statement and lifts the gap to Q^m. Construction errors are
/// returned with a stage tag; quantitative checks are recorded in the report.
pub fn reproduce_section4(n: usize, m: usize, params: &CounterexampleParams) -> Result<GapReport> {
    if m < n {
        return Err(Error::InvalidInput(format!("m = {m} below n = {n}")));
    }
    if params.radii.is_empty() || params.delta_exponents.len() < 2 || params.heights.is_empty() {
        return Err(Error::InvalidInput("radii, at least two cut-offs and one competitor height are required".into()));
    }
    let fm = build_map(n, params).map_err(|e| e.in_stage("map"))?;
    let manifold = fm.manifold().map_err(|e| e.in_stage("map"))?;
    let g = Grid::new(n, params.res, 1.0).map_err(|e| e.in_stage("map"))?;
    let u = fm.to_gridmap(&g)?;
    log::info!("funnel map on {} nodes", g.n_nodes());

    let deltas: Vec<f64> = params.delta_exponents.iter().map(|&k| 2f64.powi(-(k as i32))).collect();
    let energies = energy_table(&u, &deltas).map_err(|e| e.in_stage("energy"))?;
    let floor = 2.0 * g.h();
    let excluded_measure = Region::cube(&g, &g.center, floor).measure();

    let probes = probe_cap(&manifold, params.cap_theta, params.n_probes, params.seed);
    let certificate = obstruction_certificate(&u, &manifold, &probes, &params.radii, params.cap_theta, &params.heights)
        .map_err(|e| e.in_stage("certificate"))?;
    let epsilon = certificate.epsilon;

    // The lift runs on a coarser core so that Q^m fits in memory.
    let lg = Grid::new(n, params.lift_res, 1.0)?;
    let lu = fm.to_gridmap(&lg)?;
    let best = certificate
        .competitors
        .iter()
        .min_by(|a, b| a.gap.total_cmp(&b.gap))
        .map(|c| c.height)
        .unwrap_or(params.heights[0]);
    let lw = fold_competitor(&lu, &manifold, best)?;
    let lift = product_obstruction(&lu, &lw, m).map_err(|e| e.in_stage("lift"))?;

    let mut checks = Vec::new();
    let worst = energies.iter().filter_map(|r| r.rel_change).fold(0.0, f64::max);
    checks.push(check("energy_cauchy", worst, params.cauchy_tol, worst < params.cauchy_tol));
    let xs: Vec<f64> = deltas.iter().map(|d| (1.0 / d).ln().ln()).collect();
    let ys: Vec<f64> = energies.iter().map(|r| r.sup.ln()).collect();
    let fitted_exponent = slope(&xs, &ys);
    let rel = (fitted_exponent - params.alpha).abs() / params.alpha.max(f64::MIN_POSITIVE);
    checks.push(check("unbounded_growth", fitted_exponent, params.alpha, params.alpha > 0.0 && rel < params.exponent_tol));
    let min_deg = certificate.degrees.iter().flatten().map(|d| d.abs()).min().unwrap_or(0);
    checks.push(check("degrees_nonzero", min_deg as f64, 1.0, min_deg >= 1));
    // Radii are listed in decreasing order, so energies must decrease strictly.
    let mut by_r: Vec<(f64, f64)> = params.radii.iter().copied().zip(certificate.energies.iter().copied()).collect();
    by_r.sort_by(|a, b| b.0.total_cmp(&a.0));
    let decreasing = by_r.windows(2).all(|w| w[1].1 < w[0].1);
    checks.push(check("small_cube_energy_decreasing", by_r.last().map(|r| r.1).unwrap_or(0.0), by_r[0].1, decreasing));
    checks.push(check(
        "area_witness",
        *certificate.area_bounds.last().unwrap_or(&0.0),
        certificate.probe_measure,
        certificate.witness,
    ));
    let battery_min = certificate.competitors.iter().map(|c| c.gap).fold(f64::INFINITY, f64::min);
    checks.push(check("battery_above_epsilon", battery_min, epsilon, epsilon > 0.0 && battery_min >= epsilon));
    let dev = (lift.ratio - 1.0).abs();
    checks.push(check("lift_factor", lift.ratio, 1.0, dev < params.lift_tol));
    let passed = checks.iter().all(|c| c.pass);

    Ok(GapReport {
        map: format!("funnel sphere n = {n}, α = {}, profile scale {}", params.alpha, params.profile.scale),
        n,
        m,
        alpha: params.alpha,
        res: params.res,
        energies,
        excluded_measure,
        fitted_exponent,
        certificate,
        epsilon,
        lift,
        checks,
        passed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> CounterexampleParams {
        CounterexampleParams { res: 129, lift_res: 33, heights: vec![1.1, 1.3], delta_exponents: vec![3, 4, 5], ..Default::default() }
    }

    #[test]
    fn coarse_report_has_certificate_and_lift() {
        let r = reproduce_section4(2, 3, &small()).unwrap();
        assert!(r.check("degrees_nonzero").unwrap().pass);
        assert!(r.check("small_cube_energy_decreasing").unwrap().pass);
        assert!(r.check("lift_factor").unwrap().pass, "{:?}", r.lift);
        assert!(r.energies.windows(2).all(|w| w[1].energy > w[0].energy));
    }

    #[test]
    fn compact_target_has_no_certificate() {
        let p = CounterexampleParams { alpha: 0.0, ..small() };
        let e = reproduce_section4(2, 2, &p).unwrap_err();
        assert!(matches!(e.root(), Error::CertificateFailed(_)), "{e}");
    }

    #[test]
    fn alpha_out_of_range() {
        let p = CounterexampleParams { alpha: 0.7, ..small() };
        assert!(matches!(reproduce_section4(2, 2, &p).unwrap_err().root(), Error::ParameterOutOfRange(_)));
    }
}
