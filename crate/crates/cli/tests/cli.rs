use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_platoon"))
}

fn repo_config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn error_json(out: &Output) -> Value {
    let text = String::from_utf8_lossy(&out.stderr);
    let line = text.lines().last().expect("stderr has an error line");
    serde_json::from_str(line).expect("error is JSON")
}

fn small_ring(dir: &Path, extra: &str) -> PathBuf {
    let cfg = format!(
        r#"{{
  "version": 1,
  "platoon": {{
    "n_vehicles": 6,
    "road": {{"kind": "ring", "length_m": 120.0}},
    "v_star_mps": 15.0,
    "drivers": {{"kind": "sampled",
                 "base": {{"alpha": 0.6, "theta": 0.9, "s_st": 5.0, "s_go": 35.0, "v_max": 30.0}},
                 "spread": {{"alpha": 0.1, "theta": 0.1, "s_go_m": 5.0}},
                 "seed": 4}},
    "neighbors": 2
  }},
  "simulation": {{
    "init": {{"kind": "uniform", "velocity_mps": 15.0, "velocity_spread_mps": 2.0}},
    "horizon_s": 30.0,
    "seed": 11
  }}{extra}
}}"#
    );
    let p = dir.join("ring6.json");
    fs::write(&p, cfg).unwrap();
    p
}

#[test]
fn analyze_ring_reports_one_marginal_mode() {
    let out = tempfile::tempdir().unwrap();
    let o = run(&[
        "analyze",
        "--config",
        repo_config("ring20_stop_and_go.json").to_str().unwrap(),
        "--out",
        out.path().to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let doc: Value = serde_json::from_str(&fs::read_to_string(out.path().join("analysis.json")).unwrap()).unwrap();
    let r = &doc["report"];
    assert_eq!(r["stabilizable"], true);
    assert_eq!(r["detectable"], true);
    assert_eq!(r["uncontrollable_at_origin"], 1);
}

#[test]
fn missing_controller_file_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_ring(dir.path(), "");
    let o = run(&[
        "simulate",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.path().join("out").to_str().unwrap(),
        "--controller",
        dir.path().join("nope.json").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(error_json(&o)["kind"], "ConfigError");
}

#[test]
fn unknown_fields_and_bad_versions_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_ring(dir.path(), r#", "colour": "red""#);
    let o = run(&["analyze", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(error_json(&o)["message"].as_str().unwrap().contains("colour"));

    let text = fs::read_to_string(small_ring(dir.path(), "")).unwrap().replace("\"version\": 1", "\"version\": 9");
    let p = dir.path().join("v9.json");
    fs::write(&p, text).unwrap();
    let o = run(&["analyze", "--config", p.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn bad_arguments_exit_with_config_error() {
    let o = run(&["simulate", "--frobnicate"]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(error_json(&o)["kind"], "ConfigError");
}

#[test]
fn simulation_artifacts_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_ring(dir.path(), "");
    let sim = |out: &str, seed: &str| {
        let o = run(&[
            "simulate",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            dir.path().join(out).to_str().unwrap(),
            "--seed",
            seed,
            "--plot",
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        fs::read_to_string(dir.path().join(out).join("trajectory.csv")).unwrap()
    };
    let a = sim("a", "5");
    let b = sim("b", "5");
    let c = sim("c", "6");
    assert_eq!(a, b);
    assert_ne!(a, c);
    assert!(a.starts_with("t,veh,p,v,s,u,event\n"));
    let svg = fs::read_to_string(dir.path().join("a/velocity.svg")).unwrap();
    assert_eq!(svg.matches("<polyline").count(), 6);
    let m: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("a/metrics.json")).unwrap()).unwrap();
    assert!(m["metrics"]["quadratic_cost"].as_f64().unwrap().is_finite());
}

#[test]
fn synthesize_then_simulate_small_ring() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_ring(dir.path(), "");
    let out = dir.path().join("out");
    let o = run(&["synthesize", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--dump-sdp"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let sdp: Value = serde_json::from_str(&fs::read_to_string(out.join("sdp.json")).unwrap()).unwrap();
    assert_eq!(sdp["version"], 1);
    let n_vars = sdp["n_vars"].as_u64().unwrap() as usize;
    assert_eq!(sdp["objective"].as_array().unwrap().len(), n_vars);
    let cone = &sdp["cones"][0];
    let dim = cone["dim"].as_u64().unwrap();
    for t in cone["coefficients"][0]["entries"].as_array().unwrap() {
        let (i, j) = (t[0].as_u64().unwrap(), t[1].as_u64().unwrap());
        assert!(i <= j && j < dim, "triplet ({i}, {j}) outside the upper triangle");
    }
    let k: Value = serde_json::from_str(&fs::read_to_string(out.join("controller.json")).unwrap()).unwrap();
    assert_eq!(k["meta"]["reduced"], true);
    assert_eq!(k["A_k"]["rows"], 11);

    let o = run(&[
        "simulate",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--controller",
        out.join("controller.json").to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let m: Value = serde_json::from_str(&fs::read_to_string(out.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(m["controlled"], true);
    assert!(m["closure_error_m"].as_f64().unwrap() < 1e-9 * 120.0);
}

#[test]
fn controller_for_another_platoon_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_ring(dir.path(), "");
    let out = dir.path().join("out");
    assert!(run(&["synthesize", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()])
        .status
        .success());
    let o = run(&[
        "simulate",
        "--config",
        repo_config("ring20_stop_and_go.json").to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--controller",
        out.join("controller.json").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(error_json(&o)["message"].as_str().unwrap().contains("6 vehicles"));
}

#[test]
fn ring20_sweep_with_nominal_controller() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = run(&["synthesize", "--config", repo_config("ring20_braking.json").to_str().unwrap(), "--out", out]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let ctrl = dir.path().join("controller.json");
    let o = run(&[
        "sweep",
        "--config",
        repo_config("ring20_braking.json").to_str().unwrap(),
        "--out",
        out,
        "--controller",
        ctrl.to_str().unwrap(),
        "--plot",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 19);
    for (k, row) in rows.iter().enumerate() {
        let f: Vec<&str> = row.split(',').collect();
        assert_eq!(f[0].parse::<usize>().unwrap(), k + 2);
        assert!(f[2].parse::<f64>().unwrap().is_finite());
        assert!(!f[3].is_empty(), "vehicle {} never settled", k + 2);
    }
    assert!(dir.path().join("sweep_cost.svg").exists());
}
