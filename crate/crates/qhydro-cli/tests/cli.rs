use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use qhydro::Dataset;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

fn qhydro(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qhydro"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn smoke_data() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../qhydro/tests/data/burgers50.json")
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn pde_file(dir: &Path, terms: &[(&str, f64)]) -> PathBuf {
    let record = json!([{
        "target": "u",
        "equation": "",
        "library": terms.iter().map(|t| t.0).collect::<Vec<_>>(),
        "rows": 0,
        "mu": null,
        "uncertainty": null,
        "pde": {
            "lambda0": 0.0,
            "active_terms": terms.iter().map(|t| t.0).collect::<Vec<_>>(),
            "coefficients": terms.iter().map(|t| [t.1, 0.0]).collect::<Vec<_>>(),
            "residual": 0.0,
            "objective": 0.0,
            "flags": [],
        },
    }]);
    let path = dir.join("given.json");
    fs::write(&path, record.to_string()).unwrap();
    path
}

#[test]
fn learn_on_bundled_dataset_recovers_burgers_and_hashes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let data = smoke_data();
    let args = [
        "learn",
        "--preset",
        "burgers",
        "--data",
        data.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ];
    let o = qhydro(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(stdout(&o).trim(), "u_t - 1.900*u_xx + 0.2400*u*u_x = 0");

    let pde = read_json(&out.join("pde.json"));
    let terms = pde[0]["pde"]["active_terms"].as_array().unwrap();
    assert_eq!(terms.len(), 2);

    let manifest = read_json(&out.join("manifest.json"));
    assert_eq!(manifest["command"], "learn");
    let files = manifest["files"].as_array().unwrap();
    let names: Vec<&str> = files.iter().map(|f| f["path"].as_str().unwrap()).collect();
    assert_eq!(names, ["config.json", "pde.json"]);
    for f in files {
        let bytes = fs::read(out.join(f["path"].as_str().unwrap())).unwrap();
        let hex: String = Sha256::digest(&bytes)
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect();
        assert_eq!(f["sha256"].as_str().unwrap(), hex);
    }
    let config = read_json(&out.join("config.json"));
    assert_eq!(config["model"]["kind"], "ingest");

    let first = fs::read(out.join("manifest.json")).unwrap();
    assert!(qhydro(&args).status.success());
    assert_eq!(fs::read(out.join("manifest.json")).unwrap(), first);
}

#[test]
fn missing_dataset_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("absent.json");
    let o = qhydro(&[
        "learn",
        "--data",
        missing.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("absent"));
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    for args in [
        vec!["learn", "--set", "regress.lamda0=1", "--out", d],
        vec!["learn", "--preset", "no_such_preset", "--out", d],
        vec![
            "simulate", "--model", "fermion", "--preset", "fig_s1", "--out", d,
        ],
        vec![
            "frontier",
            "--set",
            "equations.0.terms=[]",
            "--set",
            "equations.0.generate=null",
            "--out",
            d,
        ],
        vec!["frontier", "--set", "frontier.lambda_min=0", "--out", d],
    ] {
        assert_eq!(qhydro(&args).status.code(), Some(2), "{args:?}");
    }

    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, r#"{"preprocess": {"strid": {"t": 2}}}"#).unwrap();
    let o = qhydro(&["learn", "--config", cfg.to_str().unwrap(), "--out", d]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn dry_run_prints_plan_and_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("never");
    let o = qhydro(&[
        "frontier",
        "--preset",
        "fig_s5",
        "--set",
        "frontier.per_decade=2",
        "--dry-run",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.contains("command: frontier"));
    assert!(text.contains("equation rho_t: 93 candidate terms"));
    assert!(text.contains("frontier: 15 lambda0 values"));
    assert!(!out.exists());
}

#[test]
fn config_file_and_overrides_compose() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    fs::write(
        &cfg,
        r#"{"model": {"kind": "forward", "nx": 64, "nt": 41, "t_max": 20}, "regress": {"lambda0": 0.5}}"#,
    )
    .unwrap();
    let out = dir.path().join("sim");
    let o = qhydro(&[
        "simulate",
        "--config",
        cfg.to_str().unwrap(),
        "--set",
        "model.nx=32",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let ds = Dataset::load(&out.join("dataset.json")).unwrap();
    assert_eq!((ds.grid.nt, ds.grid.nx), (41, 32));
    let resolved = read_json(&out.join("config.json"));
    assert_eq!(resolved["regress"]["lambda0"], 0.5);
    assert_eq!(resolved["model"]["dx"], 1.0);
}

#[test]
fn single_lambda_frontier_has_one_row() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("f");
    let data = smoke_data();
    let o = qhydro(&[
        "frontier",
        "--preset",
        "burgers",
        "--data",
        data.to_str().unwrap(),
        "--set",
        "frontier.lambda_max=1e-3",
        "--set",
        "frontier.lambda_min=1e-3",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let doc = read_json(&out.join("frontier.json"));
    assert_eq!(doc[0]["entries"].as_array().unwrap().len(), 1);
    let csv = fs::read_to_string(out.join("frontier.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);
    assert!(stdout(&o).contains("u_t"));
}

#[test]
fn validating_the_generating_pde_gives_zero_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = smoke_data();
    let given = pde_file(dir.path(), &[("u*u_x", -0.24), ("u_xx", 1.9)]);
    let out = dir.path().join("v");
    let o = qhydro(&[
        "validate",
        "--preset",
        "burgers",
        "--data",
        data.to_str().unwrap(),
        "--pde",
        given.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report = read_json(&out.join("validate.json"));
    assert!(report["summary"]["blowup_time"].is_null());
    let max_abs = report["summary"]["errors"][0]["max_abs"].as_f64().unwrap();
    assert!(max_abs < 1e-12, "{max_abs}");

    let csv = fs::read_to_string(out.join("errors.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("t,u_max_abs"));
    assert_eq!(csv.lines().count(), 51);
    let solution = Dataset::load(&out.join("solution.json")).unwrap();
    assert_eq!((solution.grid.nt, solution.grid.nx), (50, 50));
}

#[test]
fn anti_diffusion_reports_blowup_time() {
    let dir = tempfile::tempdir().unwrap();
    let data = smoke_data();
    let given = pde_file(dir.path(), &[("u_xx", -1.9)]);
    let out = dir.path().join("v");
    let o = qhydro(&[
        "validate",
        "--preset",
        "burgers",
        "--data",
        data.to_str().unwrap(),
        "--pde",
        given.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report = read_json(&out.join("validate.json"));
    let tb = report["summary"]["blowup_time"]
        .as_f64()
        .expect("blowup recorded");
    assert!(tb > 0.0 && tb < 12.25, "{tb}");
    assert!(stdout(&o).contains("blowup_time"));
}
