use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use serde_json::{json, Value};
use tempfile::TempDir;

struct Run {
    code: i32,
    stdout: String,
    out: PathBuf,
    _dir: TempDir,
}

fn sobotrim(command: &str, config: Value) -> Run {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.json");
    fs::write(&cfg, serde_json::to_string_pretty(&config).unwrap()).unwrap();
    let out = dir.path().join("out");
    let o = Command::new(env!("CARGO_BIN_EXE_sobotrim"))
        .args([command, "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--threads", "4"])
        .env("SOBOTRIM_LOG", "quiet")
        .output()
        .unwrap();
    Run { code: o.status.code().unwrap(), stdout: String::from_utf8_lossy(&o.stdout).into_owned(), out, _dir: dir }
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

fn csv_rows(p: &Path) -> Vec<csv::StringRecord> {
    csv::Reader::from_path(p).unwrap().records().map(|r| r.unwrap()).collect()
}

#[test]
fn constant_map_has_zero_energy() {
    let r = sobotrim("energy", json!({"map": {"kind": "constant", "value": [0.0, 0.0, 1.0]}, "p": 2.0}));
    assert_eq!(r.code, 0);
    let rows = csv_rows(&r.out.join("energies.csv"));
    assert_eq!(rows.len(), 3);
    for row in rows {
        assert_eq!(row[4].parse::<f64>().unwrap(), 0.0);
    }
}

#[test]
fn identity_energy_is_eight() {
    let r = sobotrim("energy", json!({"map": {"kind": "identity"}, "p": 2.0, "grid": {"res": 33}}));
    assert_eq!(r.code, 0);
    let rows = csv_rows(&r.out.join("energies.csv"));
    let full = rows.iter().find(|row| &row[0] == "full").unwrap();
    assert!((full[4].parse::<f64>().unwrap() - 8.0).abs() < 1e-9);
}

#[test]
fn missing_map_file_exits_two() {
    let r = sobotrim("energy", json!({"map": {"kind": "file", "path": "nowhere.gmap"}}));
    assert_eq!(r.code, 2);
    let e = read_json(&r.out.join("error.json"));
    assert_eq!(e["kind"], "InvalidInput");
    assert_eq!(e["exit_code"], 2);
}

#[test]
fn missing_config_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let st = Command::new(env!("CARGO_BIN_EXE_sobotrim"))
        .args(["energy", "--config", dir.path().join("absent.json").to_str().unwrap(), "--out", out.to_str().unwrap()])
        .env("SOBOTRIM_LOG", "quiet")
        .status()
        .unwrap();
    assert_eq!(st.code(), Some(2));
    assert!(out.join("error.json").exists());
}

#[test]
fn constant_map_approximates_with_zero_error() {
    let r = sobotrim(
        "approximate",
        json!({"map": {"kind": "constant", "value": [1.0, 0.0]}, "manifold": {"kind": "sphere", "n": 1}, "p": 1.5}),
    );
    assert_eq!(r.code, 0, "{}", r.stdout);
    let mut rdr = csv::Reader::from_path(r.out.join("convergence.csv")).unwrap();
    let head = rdr.headers().unwrap().clone();
    let col = |name: &str| head.iter().position(|h| h == name).unwrap();
    let (lp, grad) = (col("err_lp"), col("err_grad"));
    for row in rdr.records().map(|r| r.unwrap()) {
        assert_eq!(row[lp].parse::<f64>().unwrap(), 0.0);
        assert_eq!(row[grad].parse::<f64>().unwrap(), 0.0);
    }
    assert_eq!(read_json(&r.out.join("summary.json"))["final_rel"], 0.0);
    assert!(r.out.join("claims.csv").exists());
    assert!(r.out.join("jx_step0.gmap").exists());
}

#[test]
fn angular_map_converges() {
    let r = sobotrim(
        "approximate",
        json!({
            "map": {"kind": "angular"},
            "manifold": {"kind": "sphere", "n": 1},
            "p": 1.5,
            "grid": {"res": 129},
            "schedule": {"eta0": 0.5, "eta_ratio": 0.25},
            "stage_maps": false
        }),
    );
    assert_eq!(r.code, 0, "{}", r.stdout);
    let rows = csv_rows(&r.out.join("convergence.csv"));
    assert_eq!(rows.len(), 3);
    let claims = csv_rows(&r.out.join("claims.csv"));
    assert!(claims.iter().all(|c| &c[6] == "true"));
}

#[test]
fn funnel_map_reports_trimming_failure() {
    let r = sobotrim(
        "approximate",
        json!({
            "map": {"kind": "funnel", "alpha": 0.4},
            "manifold": {"kind": "funnel_sphere", "n": 2, "alpha": 0.4},
            "p": 2.0,
            "counterexample": {"res": 129, "lift_res": 33, "heights": [1.1, 1.3], "delta_exponents": [3, 4, 5]}
        }),
    );
    assert_eq!(r.code, 4, "{}", r.stdout);
    assert!(r.out.join("gap-report.json").exists());
    assert!(r.out.join("summary.json").exists());
}

#[test]
fn counterexample_report_and_lift() {
    let r = sobotrim("counterexample", json!({"counterexample": {"n": 2, "m": 3}}));
    assert_eq!(r.code, 0);
    let g = read_json(&r.out.join("gap-report.json"));
    let checks = g["checks"].as_array().unwrap();
    let pass = |name: &str| checks.iter().find(|c| c["name"] == name).unwrap()["pass"].as_bool().unwrap();
    for name in ["degrees_nonzero", "small_cube_energy_decreasing", "area_witness", "battery_above_epsilon", "lift_factor"] {
        assert!(pass(name), "{name}");
    }
    assert!(r.stdout.contains("lift factor 2.0"), "{}", r.stdout);
    assert!(r.out.join("gap-energies.csv").exists());
}

#[test]
fn alpha_out_of_range_exits_two() {
    let r = sobotrim("counterexample", json!({"counterexample": {"alpha": 0.9}}));
    assert_eq!(r.code, 2);
    assert_eq!(read_json(&r.out.join("error.json"))["exit_code"], 2);
}

#[test]
fn sphere_battery_calibrates_with_small_drift() {
    let maps: Vec<Value> = (0..3).map(|i| json!({"kind": "smooth_sphere", "seed": 1000 + i})).collect();
    let r = sobotrim(
        "calibrate",
        json!({
            "manifold": {"kind": "sphere", "n": 2},
            "p": 2.0,
            "schedule": {"eta0": 0.5},
            "battery": {"maps": maps, "resolutions": [257, 513]}
        }),
    );
    assert_eq!(r.code, 0, "{}", r.stdout);
    let c = read_json(&r.out.join("constants.json"));
    for (name, v) in c["constants"].as_object().unwrap() {
        assert!(v.as_f64().unwrap().is_finite(), "{name}");
    }
    for (name, d) in c["drift"].as_object().unwrap() {
        assert!(d.as_f64().unwrap() < 2.0, "{name} drifts by {d}");
    }
}

#[test]
fn euclidean_projection_constant_is_one() {
    let r = sobotrim(
        "calibrate",
        json!({
            "manifold": {"kind": "euclidean", "n": 2},
            "battery": {"maps": [{"kind": "smooth_field", "seed": 4, "nu": 2}], "resolutions": [65, 129]}
        }),
    );
    assert_eq!(r.code, 0, "{}", r.stdout);
    assert_eq!(read_json(&r.out.join("constants.json"))["projection_lipschitz"], 1.0);
}

#[test]
fn empty_battery_exits_two() {
    let r = sobotrim("calibrate", json!({"manifold": {"kind": "sphere", "n": 2}, "battery": {"maps": []}}));
    assert_eq!(r.code, 2);
}
