//! Batch front end shared by the `sobotrim` binary and the tests: JSON run
//! configurations in, CSV and JSON reports out.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::info;
use serde::{Deserialize, Serialize};

use crate::counterexample::{reproduce_section4, CounterexampleParams, GapReport};
use crate::error::{Error, Result};
use crate::grid::{energy, lp_norm, Grid, Region};
use crate::io::write_gridmap;
use crate::maps::{ManifoldSpec, MapSpec};
use crate::pipeline::{converge, projection_lipschitz, run_stage, ClaimConstants, ScheduleLaw, StageName, StageParams, StageSchedule};
use crate::util::dist;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    Energy,
    Approximate,
    Counterexample,
    Calibrate,
}

impl FromStr for Command {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "energy" => Ok(Command::Energy),
            "approximate" => Ok(Command::Approximate),
            "counterexample" => Ok(Command::Counterexample),
            "calibrate" => Ok(Command::Calibrate),
            _ => Err(Error::InvalidInput(format!("unknown command {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridSpec {
    pub m: usize,
    pub res: usize,
    pub inradius: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec { m: 2, res: 65, inradius: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Tolerances {
    /// Target relative W^{1,p} error of the final schedule step.
    pub convergence: f64,
    /// Largest drift factor of a calibrated constant across resolutions.
    pub drift: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances { convergence: 0.05, drift: 4.0 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct CounterexampleSpec {
    pub n: usize,
    pub m: usize,
    #[serde(flatten)]
    pub params: CounterexampleParams,
}

impl Default for CounterexampleSpec {
    fn default() -> Self {
        CounterexampleSpec { n: 2, m: 2, params: CounterexampleParams::default() }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BatterySpec {
    pub maps: Vec<MapSpec>,
    #[serde(default = "default_resolutions")]
    pub resolutions: Vec<usize>,
}

fn default_resolutions() -> Vec<usize> {
    vec![65, 129]
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub command: Option<Command>,
    pub map: Option<MapSpec>,
    pub manifold: Option<ManifoldSpec>,
    pub p: f64,
    pub grid: GridSpec,
    pub schedule: ScheduleLaw,
    pub tolerances: Tolerances,
    pub constants: Option<ClaimConstants>,
    /// A `constants.json` written by `calibrate`.
    pub constants_file: Option<PathBuf>,
    pub counterexample: CounterexampleSpec,
    pub battery: Option<BatterySpec>,
    pub seed: u64,
    /// Write u^jx of every schedule step as a GridMap file.
    pub stage_maps: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            command: None,
            map: None,
            manifold: None,
            p: 2.0,
            grid: GridSpec::default(),
            schedule: ScheduleLaw::default(),
            tolerances: Tolerances::default(),
            constants: None,
            constants_file: None,
            counterexample: CounterexampleSpec::default(),
            battery: None,
            seed: 20,
            stage_maps: true,
        }
    }
}

impl RunConfig {
    /// Parse a config file; relative paths inside it are taken from its directory.
    pub fn load(path: &Path) -> Result<RunConfig> {
        if !path.exists() {
            return Err(Error::InvalidInput(format!("config file {} does not exist", path.display())));
        }
        let text = fs::read_to_string(path)?;
        let mut cfg: RunConfig = serde_json::from_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(MapSpec::File { path }) = cfg.map.as_mut() {
            fix(path);
        }
        if let Some(p) = cfg.constants_file.as_mut() {
            fix(p);
        }
        Ok(cfg)
    }

    fn grid(&self) -> Result<Grid> {
        Grid::new(self.grid.m, self.grid.res, self.grid.inradius)
    }

    fn map(&self) -> Result<&MapSpec> {
        self.map.as_ref().ok_or_else(|| Error::InvalidInput("config has no map".into()))
    }

    fn manifold_spec(&self) -> Result<&ManifoldSpec> {
        self.manifold.as_ref().ok_or_else(|| Error::InvalidInput("config has no manifold".into()))
    }

    fn check_p(&self) -> Result<()> {
        if !(self.p.is_finite() && self.p >= 1.0) {
            return Err(Error::ParameterOutOfRange(format!("p = {} must be ≥ 1", self.p)));
        }
        Ok(())
    }

    /// Inline constants, then a calibration file, then the defaults.
    pub fn claim_constants(&self) -> Result<ClaimConstants> {
        if let Some(c) = &self.constants {
            return Ok(c.clone());
        }
        if let Some(path) = &self.constants_file {
            if !path.exists() {
                return Err(Error::InvalidInput(format!("constants file {} does not exist", path.display())));
            }
            let cal: Calibration = serde_json::from_str(&fs::read_to_string(path)?)?;
            return Ok(cal.constants);
        }
        Ok(ClaimConstants::default())
    }
}

/// Files written by a command and the exit code it asks for.
#[derive(Clone, Debug, Serialize)]
pub struct Outcome {
    pub exit_code: i32,
    pub files: Vec<PathBuf>,
    pub summary: String,
}

#[derive(Serialize)]
struct EnergyRow {
    region: String,
    measure: f64,
    lp_norm: f64,
    seminorm: f64,
    energy: f64,
    w1p_norm: f64,
}

pub fn cmd_energy(cfg: &RunConfig, out: &Path) -> Result<Outcome> {
    cfg.check_p()?;
    let g = cfg.grid()?;
    let u = cfg.map()?.build(&g)?;
    let p = cfg.p;
    let half = Region::cube(&g, &g.center, 0.5 * g.inradius);
    let regions = [
        Region::full(&g),
        Region { description: "inner half cube".into(), ..half.clone() },
        Region { description: "outer shell".into(), ..Region::full(&g).difference(&half) },
    ];
    let path = out.join("energies.csv");
    let mut w = csv::Writer::from_path(&path)?;
    let mut total = 0.0;
    for r in &regions {
        let lp = lp_norm(&u, p, r)?;
        let e = energy(&u, p, r)?;
        let sn = e.powf(1.0 / p);
        if r.description == "full" {
            total = e;
        }
        w.serialize(EnergyRow {
            region: r.description.clone(),
            measure: r.measure(),
            lp_norm: lp,
            seminorm: sn,
            energy: e,
            w1p_norm: (lp.powf(p) + e).powf(1.0 / p),
        })?;
    }
    w.flush()?;
    Ok(Outcome { exit_code: 0, files: vec![path], summary: format!("∫|Du|^{p} = {total:.6e}") })
}

#[derive(Serialize)]
struct ClaimRow<'a> {
    step: usize,
    claim: u8,
    label: &'a str,
    lhs: f64,
    bound: f64,
    constant: f64,
    pass: bool,
}

#[derive(Serialize)]
struct ApproxSummary<'a> {
    converged: bool,
    monotone: bool,
    final_rel: f64,
    tolerance: f64,
    flag: &'a Option<String>,
    trim_failure: &'a Option<crate::error::TrimFailure>,
    schedule: &'a StageSchedule,
    constants: &'a ClaimConstants,
    gap_report: Option<String>,
}

pub fn cmd_approximate(cfg: &RunConfig, out: &Path) -> Result<Outcome> {
    cfg.check_p()?;
    let g = cfg.grid()?;
    let manifold = cfg.manifold_spec()?.build()?;
    let u = cfg.map()?.build(&g)?;
    let c = cfg.claim_constants()?;
    let schedule = StageSchedule::from_law(&cfg.schedule, &manifold, g.res, &c)?;
    let rep = converge(&u, &manifold, cfg.p, &schedule, &c, cfg.tolerances.convergence)?;
    let mut files = Vec::new();

    let path = out.join("convergence.csv");
    let mut w = csv::Writer::from_path(&path)?;
    for r in &rep.rows {
        w.serialize(r)?;
    }
    w.flush()?;
    files.push(path);

    let path = out.join("claims.csv");
    let mut w = csv::Writer::from_path(&path)?;
    for (step, checks) in rep.claims.iter().enumerate() {
        for ch in checks {
            w.serialize(ClaimRow {
                step,
                claim: ch.claim,
                label: &ch.label,
                lhs: ch.lhs,
                bound: ch.bound,
                constant: ch.constant,
                pass: ch.pass,
            })?;
        }
    }
    w.flush()?;
    files.push(path);

    if cfg.stage_maps {
        for (i, v) in rep.outputs.iter().enumerate() {
            let path = out.join(format!("jx_step{i}.gmap"));
            write_gridmap(v, &path)?;
            files.push(path);
        }
    }

    // A failed run on the funnel map is paired with its obstruction certificate.
    let mut gap_report = None;
    if !rep.converged {
        if let Some(MapSpec::Funnel { alpha, scale }) = cfg.map.as_ref() {
            let mut params = cfg.counterexample.params.clone();
            params.alpha = *alpha;
            params.profile.scale = *scale;
            params.seed = cfg.seed;
            // The certificate has its own resolution; the pipeline grid may be too coarse for it.
            match reproduce_section4(g.m, g.m, &params) {
                Ok(report) => {
                    let path = out.join("gap-report.json");
                    fs::write(&path, serde_json::to_string_pretty(&report)?)?;
                    gap_report = Some("gap-report.json".to_string());
                    files.push(path);
                }
                Err(e) => gap_report = Some(format!("certificate unavailable: {e}")),
            }
        }
    }

    let path = out.join("summary.json");
    let summary = ApproxSummary {
        converged: rep.converged,
        monotone: rep.monotone,
        final_rel: rep.final_rel,
        tolerance: rep.tolerance,
        flag: &rep.flag,
        trim_failure: &rep.trim_failure,
        schedule: &schedule,
        constants: &c,
        gap_report,
    };
    fs::write(&path, serde_json::to_string_pretty(&summary)?)?;
    files.push(path);

    let text = match &rep.flag {
        Some(f) => format!("not converged: {f}"),
        None => format!("final relative W^{{1,{}}} error {:.4e}", cfg.p, rep.final_rel),
    };
    Ok(Outcome { exit_code: if rep.converged { 0 } else { 4 }, files, summary: text })
}

#[derive(Serialize)]
struct GapEnergyRow {
    delta: f64,
    energy: f64,
    rel_change: Option<f64>,
    sup: f64,
}

pub fn write_gap_report(report: &GapReport, out: &Path) -> Result<Vec<PathBuf>> {
    let path = out.join("gap-report.json");
    fs::write(&path, serde_json::to_string_pretty(report)?)?;
    let csv_path = out.join("gap-energies.csv");
    let mut w = csv::Writer::from_path(&csv_path)?;
    for r in &report.energies {
        w.serialize(GapEnergyRow { delta: r.delta, energy: r.energy, rel_change: r.rel_change, sup: r.sup })?;
    }
    w.flush()?;
    Ok(vec![path, csv_path])
}

pub fn cmd_counterexample(cfg: &RunConfig, out: &Path) -> Result<Outcome> {
    let spec = &cfg.counterexample;
    let mut params = spec.params.clone();
    params.seed = cfg.seed;
    let report = reproduce_section4(spec.n, spec.m, &params)?;
    let files = write_gap_report(&report, out)?;
    let failed: Vec<&str> = report.checks.iter().filter(|c| !c.pass).map(|c| c.name.as_str()).collect();
    let mut summary = format!("ε = {:.4e}, lift factor {:.4}", report.epsilon, report.lift.ratio * 2f64.powi((spec.m - spec.n) as i32));
    if !failed.is_empty() {
        summary.push_str(&format!("; checks outside tolerance: {}", failed.join(", ")));
    }
    Ok(Outcome { exit_code: 0, files, summary })
}

/// Contents of `constants.json`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Calibration {
    pub constants: ClaimConstants,
    /// sup ‖DΠ‖ over the sampled smoothed values.
    pub projection_lipschitz: f64,
    /// Per resolution, the smallest value of each constant that makes every
    /// battery check tight.
    pub measured: BTreeMap<usize, BTreeMap<String, f64>>,
    /// max/min of each measured constant across resolutions.
    pub drift: BTreeMap<String, f64>,
    pub battery: Vec<MapSpec>,
    pub manifold: ManifoldSpec,
    pub p: f64,
}

fn constant_name(claim: u8, label: &str) -> Option<&'static str> {
    Some(match claim {
        2 if label.contains("Du") => "smoothing_grad",
        2 => "smoothing_lp",
        3 if label.contains("G^m") => "distance_good",
        3 => "distance_skeleton",
        5 => "skeleton_energy",
        6 => "shared_faces",
        7 => "extension",
        8 => "bad_energy",
        _ => return None,
    })
}

fn set_constant(c: &mut ClaimConstants, name: &str, v: f64) {
    match name {
        "smoothing_lp" => c.smoothing_lp = v,
        "smoothing_grad" => c.smoothing_grad = v,
        "distance_good" => c.distance_good = v,
        "distance_skeleton" => c.distance_skeleton = v,
        "skeleton_energy" => c.skeleton_energy = v,
        "shared_faces" => c.shared_faces = v,
        "extension" => c.extension = v,
        "bad_energy" => c.bad_energy = v,
        _ => {}
    }
}

/// Safety factor between the largest measured constant and the stored one.
const SAFETY: f64 = 2.0;

pub fn cmd_calibrate(cfg: &RunConfig, out: &Path) -> Result<Outcome> {
    cfg.check_p()?;
    let battery = cfg.battery.as_ref().ok_or_else(|| Error::InvalidInput("config has no battery".into()))?;
    if battery.maps.is_empty() || battery.resolutions.is_empty() {
        return Err(Error::InvalidInput("calibration battery is empty".into()));
    }
    let mspec = cfg.manifold_spec()?;
    let manifold = mspec.build()?;
    let start = ClaimConstants::default();
    let mut measured: BTreeMap<usize, BTreeMap<String, f64>> = BTreeMap::new();
    let mut lip: f64 = 0.0;
    for &res in &battery.resolutions {
        let g = Grid::new(cfg.grid.m, res, 1.0)?;
        let schedule = StageSchedule::from_law(&cfg.schedule, &manifold, res, &start)?;
        let row = measured.entry(res).or_default();
        for spec in &battery.maps {
            let u = spec.build(&g)?;
            let run = run_stage(&u, &manifold, cfg.p, &StageParams::new(schedule.steps[0].clone(), start.clone()))?;
            for ch in &run.claims {
                if let Some(name) = constant_name(ch.claim, &ch.label) {
                    let need = if ch.bound > 0.0 { ch.lhs * ch.constant / ch.bound } else { 0.0 };
                    let e = row.entry(name.to_string()).or_insert(0.0);
                    *e = e.max(need);
                }
            }
            let sm = run.map(StageName::Smooth);
            for v in sm.values.chunks(sm.nu) {
                let near = manifold.project(v).map(|q| dist(v, &q) <= run.step.iota).unwrap_or(false);
                if near {
                    if let Some(l) = projection_lipschitz(&manifold, v) {
                        lip = lip.max(l);
                    }
                }
            }
            info!("calibrated {spec:?} at res {res}");
        }
    }
    let mut constants = ClaimConstants::default();
    let mut drift = BTreeMap::new();
    let names: Vec<String> = measured.values().flat_map(|r| r.keys().cloned()).collect();
    for name in names {
        let vals: Vec<f64> = measured.values().filter_map(|r| r.get(&name).copied()).collect();
        let hi = vals.iter().cloned().fold(0.0, f64::max);
        let lo = vals.iter().cloned().filter(|v| *v > 0.0).fold(f64::INFINITY, f64::min);
        drift.insert(name.clone(), if hi > 0.0 && lo.is_finite() { hi / lo } else { 1.0 });
        if hi > 0.0 {
            set_constant(&mut constants, &name, SAFETY * hi);
        }
    }
    constants.projection = constants_lip(lip);
    let cal = Calibration {
        constants,
        projection_lipschitz: constants_lip(lip),
        measured,
        drift: drift.clone(),
        battery: battery.maps.clone(),
        manifold: mspec.clone(),
        p: cfg.p,
    };
    let path = out.join("constants.json");
    fs::write(&path, serde_json::to_string_pretty(&cal)?)?;
    let worst = drift.iter().max_by(|a, b| a.1.total_cmp(b.1)).map(|(k, v)| (k.clone(), *v));
    if let Some((name, d)) = &worst {
        if *d > cfg.tolerances.drift {
            return Err(Error::UnstableConstants(format!(
                "{name} drifts by {d:.2}× across resolutions (limit {}×)",
                cfg.tolerances.drift
            )));
        }
    }
    let summary = match worst {
        Some((name, d)) => format!("largest drift {d:.3}× ({name}); sup ‖DΠ‖ = {lip}"),
        None => format!("sup ‖DΠ‖ = {lip}"),
    };
    Ok(Outcome { exit_code: 0, files: vec![path], summary })
}

fn constants_lip(lip: f64) -> f64 {
    if lip > 0.0 {
        lip
    } else {
        1.0
    }
}

#[derive(Serialize)]
struct ErrorObject<'a> {
    kind: &'a str,
    message: String,
    exit_code: i32,
}

/// Record a failure as `error.json` in the output directory; returns the exit code.
pub fn write_error(out: &Path, e: &Error) -> i32 {
    let code = e.exit_code();
    let obj = ErrorObject { kind: e.kind(), message: e.to_string(), exit_code: code };
    if fs::create_dir_all(out).is_ok() {
        if let Ok(text) = serde_json::to_string_pretty(&obj) {
            let _ = fs::write(out.join("error.json"), text);
        }
    }
    code
}

/// Run a command, writing `error.json` on failure. Returns the exit code
/// together with the outcome.
pub fn run(command: Command, cfg: &RunConfig, out: &Path) -> (i32, Result<Outcome>) {
    let res = fs::create_dir_all(out).map_err(Error::from).and_then(|_| match command {
        Command::Energy => cmd_energy(cfg, out),
        Command::Approximate => cmd_approximate(cfg, out),
        Command::Counterexample => cmd_counterexample(cfg, out),
        Command::Calibrate => cmd_calibrate(cfg, out),
    });
    match res {
        Ok(o) => (o.exit_code, Ok(o)),
        Err(e) => (write_error(out, &e), Err(e)),
    }
}
