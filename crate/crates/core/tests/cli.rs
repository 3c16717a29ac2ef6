mod common;

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use common::*;
use serde_json::{json, Value};

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_saddle-blowup")).args(args).output().unwrap()
}

fn config(dir: &Path, name: &str, v: Value) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, v.to_string()).unwrap();
    p
}

fn run_json(cmd: &str, cfg: &Path, extra: &[&str]) -> Value {
    let mut args = vec![cmd, "--config", cfg.to_str().unwrap()];
    args.extend_from_slice(extra);
    let out = bin(&args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

fn run_csv(cmd: &str, cfg: &Path) -> Vec<Vec<String>> {
    let out = bin(&[cmd, "--config", cfg.to_str().unwrap(), "--format", "csv"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    let rows: Vec<Vec<String>> = text.lines().map(|l| l.split(',').map(String::from).collect()).collect();
    let width = rows[0].len();
    assert!(rows.iter().all(|r| r.len() == width));
    rows
}

#[test]
fn classify_reports_and_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let xyz = config(dir.path(), "xyz.json", json!({"objective": xyz_json(), "point": [0.0, 0.0, 0.0]}));
    let rep = run_json("classify", &xyz, &[]);
    assert_eq!(rep["k"], 3);
    assert_eq!(rep["weakly_strict"], true);
    assert_eq!(rep["tamed"], true);
    assert_eq!(rep["crit_points"].as_array().unwrap().len(), 14);

    let quad = config(dir.path(), "quad.json", json!({"objective": quad_json(), "point": [0.0, 0.0]}));
    let rep = run_json("classify", &quad, &[]);
    assert_eq!(rep["k"], 2);
    assert_eq!(rep["weakly_strict"], true);
    let rows = run_csv("classify", &quad);
    assert_eq!(rows[0], ["u1", "u2", "value", "morse_index", "nullity"]);
    assert_eq!(rows.len(), 5);

    let off = config(dir.path(), "off.json", json!({"objective": quad_json(), "point": [0.5, 0.0]}));
    let out = bin(&["classify", "--config", off.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("not critical"));

    let bad = config(dir.path(), "bad.json", json!({"objective": quad_json(), "point": [0.0, 0.0], "extra": 1}));
    assert_eq!(bin(&["classify", "--config", bad.to_str().unwrap()]).status.code(), Some(1));
    assert_eq!(bin(&["classify"]).status.code(), Some(1));
    assert_eq!(bin(&["classify", "--config", "/nonexistent/x.json"]).status.code(), Some(1));
}

#[test]
fn flow_csv_matches_closed_form() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(
        dir.path(),
        "flow.json",
        json!({"objective": norm_json(), "center": [0.0, 0.0], "start": [0.3, -0.4],
               "flow": {"t_max": 5.0, "grad_tol": 1e-300}}),
    );
    let rows = run_csv("flow", &cfg);
    assert_eq!(rows[0], ["t", "w1", "w2", "f", "grad_norm"]);
    for row in &rows[1..] {
        let v: Vec<f64> = row.iter().map(|s| s.parse().unwrap()).collect();
        let decay = (-2.0 * v[0]).exp();
        assert!((v[1] - 0.3 * decay).abs() <= 1e-6 && (v[2] + 0.4 * decay).abs() <= 1e-6);
    }
    let rep = run_json("flow", &cfg, &[]);
    assert_eq!(rep["termination"], "time_budget");

    let cyl = config(
        dir.path(),
        "cyl.json",
        json!({"objective": xyz_json(), "center": [0.0, 0.0, 0.0],
               "blowup": {"r0": 0.05, "u0": [0.6, 0.0, 0.8]}, "flow": {"t_max": 20.0}}),
    );
    let rows = run_csv("flow", &cyl);
    assert_eq!(rows[0], ["t", "r", "u1", "u2", "u3", "f", "grad_norm"]);
    for row in &rows[1..] {
        let u: Vec<f64> = row[2..5].iter().map(|s| s.parse().unwrap()).collect();
        assert!((u.iter().map(|x| x * x).sum::<f64>().sqrt() - 1.0).abs() <= 1e-10);
    }
    let both = config(
        dir.path(),
        "both.json",
        json!({"objective": xyz_json(), "center": [0.0, 0.0, 0.0], "start": [0.1, 0.1, 0.1],
               "blowup": {"r0": 0.05, "u0": [0.6, 0.0, 0.8]}}),
    );
    assert_eq!(bin(&["flow", "--config", both.to_str().unwrap()]).status.code(), Some(1));
}

#[test]
fn mc_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(
        dir.path(),
        "mc.json",
        json!({"objective": quad_json(), "center": [0.0, 0.0], "radius": 0.1, "n": 50, "flow": {"t_max": 50.0}}),
    );
    let a = bin(&["mc", "--config", cfg.to_str().unwrap(), "--seed", "42"]);
    let b = bin(&["mc", "--config", cfg.to_str().unwrap(), "--seed", "42", "--threads", "2"]);
    assert!(a.status.success());
    assert_eq!(a.stdout, b.stdout);
    let rep: Value = serde_json::from_slice(&a.stdout).unwrap();
    assert_eq!(rep["n_total"], 50);
    assert_eq!(rep["seed"], 42);
    // 17 significant digits
    assert!(String::from_utf8_lossy(&a.stdout).contains("1.0000000000000001e-1"));

    let domain = config(
        dir.path(),
        "domain.json",
        json!({"objective": quad_json(), "center": [0.0, 0.0], "radius": 5.0, "n": 5}),
    );
    assert_eq!(bin(&["mc", "--config", domain.to_str().unwrap()]).status.code(), Some(2));
}

#[test]
fn spectrum_and_lnn_reports() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "s.json", json!({"objective": quad_json(), "center": [0.0, 0.0]}));
    let rep = run_json("blowup-spectrum", &cfg, &[]);
    assert_eq!(rep["k"], 2);
    assert!(rep["max_distance"].as_f64().unwrap() < 1e-5);
    let rows = run_csv("blowup-spectrum", &cfg);
    assert_eq!(rows.len(), 1 + 4 * 2);

    let lnn = config(
        dir.path(),
        "lnn.json",
        json!({"problem": {"dims": [2, 3, 2], "X": [[1.0, 0.5, -0.3], [0.2, -1.0, 0.7]],
                           "Y": [[0.4, 1.1, -0.6], [-0.9, 0.3, 0.8]]}}),
    );
    let rep = run_json("lnn", &lnn, &[]);
    assert_eq!(rep["certification"]["weakly_strict"], true);
    assert_eq!(rep["zeta"], rep["kappa"]);
    assert!(bin(&["lnn", "--config", lnn.to_str().unwrap(), "--format", "csv"]).status.code() == Some(1));
}

#[test]
fn cstable_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let linear = config(dir.path(), "lin.json", json!({"T": [[0.5, 0.0], [0.0, 2.0]]}));
    let rows = run_csv("cstable", &linear);
    assert_eq!(rows[0], ["x1", "y1"]);
    assert!(rows[1..].iter().all(|r| r[1].parse::<f64>().unwrap() == 0.0));

    let demo = config(
        dir.path(),
        "demo.json",
        json!({"T": [[0.5, 0.0], [0.0, 2.0]],
               "perturbation": {"kind": "quadratic", "epsilon": 2e-4, "s": 1.0, "source": 0, "target": 1},
               "grid": {"half_width": 2.0}}),
    );
    let out_dir = dir.path().join("out");
    let out = bin(&["cstable", "--config", demo.to_str().unwrap(), "--out", out_dir.to_str().unwrap()]);
    assert!(out.status.success());
    let rep: Value = serde_json::from_str(&std::fs::read_to_string(out_dir.join("cstable.json")).unwrap()).unwrap();
    let bound = rep["solve"]["contraction_bound"].as_f64().unwrap();
    assert!(rep["solve"]["ratios"].as_array().unwrap().iter().all(|r| r.as_f64().unwrap() <= bound));
    for name in ["graph.csv", "contraction.csv", "membership.csv"] {
        assert!(out_dir.join(name).exists());
    }

    let stable = config(dir.path(), "stable.json", json!({"T": [[0.5, 0.0], [0.0, 0.9]]}));
    assert_eq!(bin(&["cstable", "--config", stable.to_str().unwrap()]).status.code(), Some(2));
    let big = config(
        dir.path(),
        "big.json",
        json!({"T": [[0.5, 0.0], [0.0, 2.0]],
               "perturbation": {"kind": "quadratic", "epsilon": 1.0, "s": 1.0, "source": 0, "target": 1}}),
    );
    assert_eq!(bin(&["cstable", "--config", big.to_str().unwrap()]).status.code(), Some(2));
}
