//! End-to-end acceptance run. Each criterion prints one PASS/FAIL line; the
//! binary exits nonzero if any line is FAIL.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::Rng;
use sobotrim::cli::{run, Command, RunConfig};
use sobotrim::counterexample::{reproduce_section4, CounterexampleParams};
use sobotrim::cubication::build_cubication;
use sobotrim::error::Error;
use sobotrim::grid::{lp_norm, w1p_distance, w1p_norm, energy, Grid, GridMap, Region};
use sobotrim::homogenization::{boundary_energy, homogenize_cube};
use sobotrim::manifolds::TargetManifold;
use sobotrim::maps::{mollify_project, sphere_battery, ManifoldSpec, MapSpec};
use sobotrim::opening::{face_energy_ratios, open_map, opened_region};
use sobotrim::pipeline::{converge, ClaimConstants, ScheduleLaw, StageSchedule};
use sobotrim::smoothing::{adaptive_convolve, admissible_region, derivative_bound, translation_modulus, Mollifier, ScaleField};
use sobotrim::trimming::{brouwer_degree, small_energy_threshold, trim_small_energy, DegreeMethod};
use sobotrim::util::{rng, smoothstep3};

type Criterion = (&'static str, fn() -> Verdict);

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

fn spread(v: &[f64]) -> f64 {
    let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
    hi / lo
}

fn rel_w1p(u: &GridMap, v: &GridMap, p: f64) -> f64 {
    let full = Region::full(&u.grid);
    let (a, b) = w1p_distance(u, v, p, &full).unwrap();
    (a.powf(p) + b.powf(p)).powf(1.0 / p) / w1p_norm(u, p, &full).unwrap()
}

fn density() -> Verdict {
    let s2 = TargetManifold::sphere(2).unwrap();
    let g = Grid::new(2, 257, 1.0).unwrap();
    let mut worst_err: f64 = 0.0;
    let mut worst_time: f64 = 0.0;
    for spec in sphere_battery(10) {
        let t0 = Instant::now();
        let u = spec.build(&g).unwrap();
        let v = mollify_project(&u, &s2, 4.0 * g.h(), 4).unwrap();
        let e = rel_w1p(&u, &v, 2.0);
        worst_time = worst_time.max(t0.elapsed().as_secs_f64());
        worst_err = worst_err.max(e);
    }
    verdict(
        worst_err < 0.02 && worst_time < 30.0,
        format!("max relative W^(1,2) error {worst_err:.4} (< 0.02), slowest map {worst_time:.2} s (< 30 s)"),
    )
}

fn homogenization() -> Verdict {
    let spec = MapSpec::SmoothSphere { seed: 1000 };
    let mut lines = Vec::new();
    let mut pass = true;
    for p in [1.0, 1.5] {
        let ratios: Vec<f64> = [0.25, 0.125, 0.0625]
            .iter()
            .map(|&eta: &f64| {
                let g = Grid::with_center(2, 129, eta / 2.0, vec![0.3, -0.2]).unwrap();
                let u = spec.build(&g).unwrap();
                let v = homogenize_cube(&u, p).unwrap();
                energy(&v, p, &Region::full(&g)).unwrap() / (eta * boundary_energy(&u, p))
            })
            .collect();
        let var = spread(&ratios) - 1.0;
        pass &= var < 0.30;
        lines.push(format!("p={p}: variation {:.1}%", 100.0 * var));
    }
    let g = Grid::new(2, 33, 1.0).unwrap();
    let u = spec.build(&g).unwrap();
    let refused = [2.0, 2.5].iter().all(|&p| matches!(homogenize_cube(&u, p), Err(Error::HomogenizationIllposed { .. })));
    pass &= refused;
    verdict(pass, format!("{} (< 30%); p >= 2 refused: {refused}", lines.join(", ")))
}

fn opening() -> Verdict {
    let t0 = Instant::now();
    let mut worst_var: f64 = 0.0;
    let mut exact = true;
    let mut drift: f64 = 1.0;
    for spec in sphere_battery(20) {
        let mut c = Vec::new();
        for res in [65, 257] {
            let g = Grid::new(2, res, 2.0).unwrap();
            let cub = build_cubication(&g, 0.5, 0.5, 0.25).unwrap();
            let u = spec.build(&g).unwrap();
            let sel = vec![true; cub.faces(1).len()];
            let (map, v) = open_map(&u, &cub, 1, &sel, 1.5).unwrap();
            worst_var = map.diagnostics.iter().map(|d| d.fiber_variance_max).fold(worst_var, f64::max);
            let inside = opened_region(&cub, &map).node_mask();
            exact &= (0..u.n_nodes()).all(|i| inside[i] || u.value(i) == v.value(i));
            let ratios = face_energy_ratios(&u, &v, &cub, &map, 1.5).unwrap();
            c.push(ratios.into_iter().fold(0.0, f64::max));
        }
        drift = drift.max(spread(&c));
    }
    let secs = t0.elapsed().as_secs_f64();
    verdict(
        worst_var < 1e-18 && exact && drift <= 2.0 && secs < 60.0,
        format!("fiber variance {worst_var:.2e} (< 1e-18), outside bit-exact: {exact}, face constant drift {drift:.3}x (<= 2x), {secs:.1} s (< 60 s)"),
    )
}

/// ψ vanishes for x₁ < −0.2, equals 0.1 for x₁ > 0.2 and has slope below 0.4.
fn ramp(g: &Grid) -> ScaleField {
    let f = GridMap::from_fn(g.clone(), 1, |x, o| o[0] = 0.1 * smoothstep3(((x[0] + 0.2) / 0.4).clamp(0.0, 1.0)));
    ScaleField::from_gridmap(f).unwrap()
}

fn smoothing() -> Verdict {
    let phi = Mollifier::new(2, 6).unwrap();
    let mut exact = true;
    let mut dominated = true;
    let mut drift: f64 = 1.0;
    let mut c_all = Vec::new();
    for spec in sphere_battery(20) {
        let mut c = Vec::new();
        for res in [65, 257] {
            let g = Grid::new(2, res, 1.0).unwrap();
            let u = spec.build(&g).unwrap();
            let psi = ramp(&g);
            let omega = admissible_region(&psi);
            let out = adaptive_convolve(&u, &psi, &phi, &omega).unwrap();
            assert!(!out.identity_fallback);
            let v = out.map;
            exact &= (0..u.n_nodes()).all(|i| psi.field.values[i] != 0.0 || u.value(i) == v.value(i));
            let err = lp_norm(&u.sub(&v).unwrap(), 2.0, &omega).unwrap();
            dominated &= translation_modulus(&u, &psi, &phi, 2.0, &omega).unwrap() >= err;
            c.push(derivative_bound(&u, &v, &psi, 2.0, &omega).unwrap().c_emp);
        }
        drift = drift.max(spread(&c));
        c_all.extend(c);
    }
    let c_max = c_all.iter().cloned().fold(0.0, f64::max);
    verdict(
        exact && dominated && drift <= 2.0,
        format!("exact on psi=0: {exact}, modulus >= error on all maps: {dominated}, C_emp <= {c_max:.3} with drift {drift:.3}x (<= 2x)"),
    )
}

fn pipeline() -> Verdict {
    let t0 = Instant::now();
    let s1 = TargetManifold::sphere(1).unwrap();
    let g = Grid::new(2, 257, 1.0).unwrap();
    let u = MapSpec::Angular.build(&g).unwrap();
    let law = ScheduleLaw { eta0: 0.5, eta_ratio: 0.25, ..Default::default() };
    let c = ClaimConstants::default();
    let sched = StageSchedule::from_law(&law, &s1, g.res, &c).unwrap();
    let rep = converge(&u, &s1, 1.5, &sched, &c, 0.05).unwrap();
    let secs = t0.elapsed().as_secs_f64();
    let sup = rep.rows.iter().map(|r| r.sup).fold(0.0, f64::max);
    let claims = rep.claims.iter().flatten().all(|c| c.pass) && rep.rows.iter().all(|r| r.claims_pass);
    verdict(
        sup <= 1.0 + 1e-6 && rep.final_rel < 0.05 && claims && secs < 300.0,
        format!(
            "sup {sup:.9} (<= 1+1e-6), final relative W^(1,1.5) error {:.4} (< 0.05), all claims pass: {claims}, {secs:.1} s (< 300 s)",
            rep.final_rel
        ),
    )
}

fn trimming() -> Verdict {
    let s2 = TargetManifold::sphere(2).unwrap();
    let alpha = small_energy_threshold(2, 1.0, 1.0).unwrap();
    let mut r = rng(6);
    let mut exact = true;
    let mut drift: f64 = 1.0;
    for _ in 0..10 {
        let xi: Vec<f64> = {
            let v: Vec<f64> = (0..3).map(|_| r.gen_range(-1.0..1.0)).collect();
            s2.project(&v).unwrap()
        };
        let chart = s2.chart_at(&xi, 1.0).unwrap();
        let s = r.gen_range(0.05..0.2);
        let (a, b, k) = (r.gen_range(-0.5..0.5), r.gen_range(-0.5..0.5), r.gen_range(1.0..3.0));
        let mut ratios = Vec::new();
        for res in [65, 129, 257] {
            let g = Grid::new(2, res, 1.0).unwrap();
            let u = GridMap::from_fn(g.clone(), 3, |x, o| {
                let w = [s * (x[0] + a * (k * x[1]).sin()), s * (x[1] + b * (k * x[0]).cos())];
                o.copy_from_slice(&chart.inverse(&w));
            });
            let t = trim_small_energy(&u, &s2, alpha, 1.0).unwrap();
            let mut kk = [0usize; 2];
            exact &= t.boundary_residual == 0.0
                && (0..g.n_nodes()).all(|i| {
                    g.unravel(i, &mut kk);
                    !kk.iter().any(|&v| v == 0 || v == res - 1) || t.map.value(i) == u.value(i)
                });
            ratios.push(t.energy_ratio);
        }
        drift = drift.max(spread(&ratios));
    }
    verdict(exact && drift <= 2.0, format!("boundary bit-exact: {exact}, energy ratio drift {drift:.3}x over res 65..257 (<= 2x)"))
}

fn counterexample() -> Verdict {
    let t0 = Instant::now();
    let rep = reproduce_section4(2, 3, &CounterexampleParams::default()).unwrap();
    let secs = t0.elapsed().as_secs_f64();
    let failed: Vec<String> = rep.checks.iter().filter(|c| !c.pass).map(|c| format!("{} = {:.4} vs {:.4}", c.name, c.value, c.bound)).collect();
    verdict(
        rep.passed && secs < 600.0,
        format!(
            "epsilon {:.4}, lift ratio {:.4}, {secs:.1} s (< 600 s); failing: {}",
            rep.epsilon,
            rep.lift.ratio,
            if failed.is_empty() { "none".into() } else { failed.join("; ") }
        ),
    )
}

fn degree_oracle() -> Verdict {
    let mut r = rng(8);
    let g = Grid::new(2, 129, 1.0).unwrap();
    let (mut agree, mut resampled, mut nonzero) = (0, 0, 0);
    while agree < 100 {
        let k = r.gen_range(1..4);
        let roots: Vec<([f64; 2], bool)> =
            (0..k).map(|_| ([r.gen_range(-0.8..0.8), r.gen_range(-0.8..0.8)], r.gen_bool(0.5))).collect();
        let u = GridMap::from_fn(g.clone(), 2, |x, o| {
            let (mut re, mut im) = (1.0, 0.0);
            for (a, conj) in &roots {
                let (zr, zi) = (x[0] - a[0], if *conj { a[1] - x[1] } else { x[1] - a[1] });
                (re, im) = (re * zr - im * zi, re * zi + im * zr);
            }
            o[0] = re;
            o[1] = im;
        });
        let rad = g.h() * r.gen_range(13..61) as f64;
        let y = [r.gen_range(-0.05..0.05), r.gen_range(-0.05..0.05)];
        match (brouwer_degree(&u, rad, &y, DegreeMethod::Winding), brouwer_degree(&u, rad, &y, DegreeMethod::Simplex)) {
            (Ok(a), Ok(b)) if a == b => {
                agree += 1;
                nonzero += (a != 0) as usize;
            }
            (Ok(a), Ok(b)) => return verdict(false, format!("instance {agree}: winding {a} but simplex {b}")),
            (Err(Error::ProbeUnstable(_)), _) | (_, Err(Error::ProbeUnstable(_))) => resampled += 1,
            (Err(e), _) | (_, Err(e)) => return verdict(false, format!("instance {agree}: {e}")),
        }
    }
    verdict(true, format!("100/100 agree ({nonzero} nonzero), {resampled} unstable probes resampled"))
}

fn csv_bytes(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect()
}

fn determinism() -> Verdict {
    let approx = RunConfig {
        map: Some(MapSpec::Angular),
        manifold: Some(ManifoldSpec::Sphere { n: 1 }),
        p: 1.5,
        grid: sobotrim::cli::GridSpec { m: 2, res: 257, inradius: 1.0 },
        schedule: ScheduleLaw { eta0: 0.5, eta_ratio: 0.25, ..Default::default() },
        stage_maps: false,
        ..Default::default()
    };
    let mut gap = RunConfig::default();
    gap.counterexample.m = 3;
    let mut lines = Vec::new();
    let mut pass = true;
    for (name, cmd, cfg) in [("approximate", Command::Approximate, &approx), ("counterexample", Command::Counterexample, &gap)] {
        let runs: Vec<_> = (0..2)
            .map(|_| {
                let dir = tempfile::tempdir().unwrap();
                let (code, res) = run(cmd, cfg, dir.path());
                res.unwrap();
                (code, csv_bytes(dir.path()))
            })
            .collect();
        let same = runs[0] == runs[1] && !runs[0].1.is_empty();
        pass &= same;
        lines.push(format!("{name}: {} csv files identical: {same}", runs[0].1.len()));
    }
    verdict(pass, lines.join(", "))
}

fn main() {
    let criteria: [Criterion; 9] = [
        ("mollify-and-project density", density),
        ("zero-degree homogenization", homogenization),
        ("opening guarantees", opening),
        ("adaptive smoothing contract", smoothing),
        ("full pipeline convergence", pipeline),
        ("trimming of cap loops", trimming),
        ("counterexample certificate", counterexample),
        ("degree oracle equivalence", degree_oracle),
        ("determinism", determinism),
    ];
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failures = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let n = i + 1;
        if !only.is_empty() && !only.contains(&n) {
            continue;
        }
        let v = f();
        println!("criterion {n} [{}] {name}: {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
        failures += (!v.pass) as usize;
    }
    if failures > 0 {
        println!("{failures} criterion(s) failed");
        std::process::exit(1);
    }
}
