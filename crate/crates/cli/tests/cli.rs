use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn msrg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_msrg")).args(args).output().expect("binary runs")
}

fn out_arg(p: &Path) -> String {
    p.to_str().unwrap().to_string()
}

fn read_json(p: &Path) -> Value {
    serde_json::from_slice(&std::fs::read(p).unwrap()).unwrap()
}

#[test]
fn default_verify_passes_below_default_tolerance() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("v");
    let o = msrg(&["verify", "--out", &out_arg(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v = read_json(&out.join("verify.json"));
    assert_eq!(v["passed"], true);
    assert_eq!(v["config"]["side"], 8);
    assert_eq!(v["config_hash"].as_str().unwrap().len(), 64);
    for c in v["checks"].as_array().unwrap() {
        assert!(c["residual"].as_f64().unwrap() < 1e-11, "{c}");
    }
    assert!(out.join("verify.csv").exists());
}

#[test]
fn zero_tolerance_fails() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("v");
    let o = msrg(&["verify", "--tol", "0", "--out", &out_arg(&out)]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(read_json(&out.join("verify.json"))["passed"], false);
}

#[test]
fn malformed_config_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("never");
    for body in ["l = 2\nside eight\n", "bogus = 1\n", "side = 12\n", "lambda = 2\n"] {
        let cfg = dir.path().join("bad.cfg");
        std::fs::write(&cfg, body).unwrap();
        let o = msrg(&["verify", "--config", &out_arg(&cfg), "--out", &out_arg(&out)]);
        assert_eq!(o.status.code(), Some(2), "{body}");
        assert!(!o.stderr.is_empty());
        assert!(!out.exists(), "{body}");
    }
}

#[test]
fn infeasible_size_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("plane.cfg");
    std::fs::write(&cfg, "d = 2\nside = 8\n").unwrap();
    let out = dir.path().join("never");
    let o = msrg(&["decay", "--config", &out_arg(&cfg), "--out", &out_arg(&out)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("infeasible size"));
    assert!(!out.exists());
}

#[test]
fn same_seed_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for cmd in ["verify", "cluster", "flow", "decay"] {
        for out in [&a, &b] {
            assert!(msrg(&[cmd, "--seed", "3", "--out", &out_arg(out)]).status.success());
        }
    }
    let mut names: Vec<_> = std::fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert_eq!(names.len(), 8);
    for n in &names {
        let (x, y) = (std::fs::read(a.join(n)).unwrap(), std::fs::read(b.join(n)).unwrap());
        if n.to_str().unwrap().ends_with(".csv") {
            assert_eq!(x, y, "{n:?}");
        } else {
            // the output directory is part of the embedded config
            let (mut x, mut y): (Value, Value) = (serde_json::from_slice(&x).unwrap(), serde_json::from_slice(&y).unwrap());
            x["config"]["out"] = Value::Null;
            y["config"]["out"] = Value::Null;
            x["config_hash"] = Value::Null;
            y["config_hash"] = Value::Null;
            assert_eq!(x, y, "{n:?}");
        }
    }
    let before = std::fs::read(a.join("cluster.json")).unwrap();
    assert!(msrg(&["cluster", "--seed", "3", "--out", &out_arg(&a)]).status.success());
    assert_eq!(before, std::fs::read(a.join("cluster.json")).unwrap());
    let c = dir.path().join("c");
    assert!(msrg(&["cluster", "--seed", "4", "--out", &out_arg(&c)]).status.success());
    assert_ne!(std::fs::read(a.join("cluster.csv")).unwrap(), std::fs::read(c.join("cluster.csv")).unwrap());
}

#[test]
fn decay_reports_both_cube_sizes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d");
    assert!(msrg(&["decay", "--out", &out_arg(&out)]).status.success());
    let v = read_json(&out.join("decay.json"));
    let runs = v["decay"]["runs"].as_array().unwrap();
    let ms: Vec<u64> = runs.iter().map(|r| r["big_m"].as_u64().unwrap()).collect();
    assert_eq!(ms, vec![4, 8]);
    for r in runs {
        assert!(r["fit"]["rate"].as_f64().unwrap() > 0.0);
        assert!(r["ratio"].as_f64().unwrap() < 1.0);
    }
    assert!(v["decay"]["rate_nondecreasing"].is_boolean());
    let csv = std::fs::read_to_string(out.join("decay.csv")).unwrap();
    assert!(csv.starts_with("M,j,j_prime,y,y_prime,d_omega,value,kind\n"));
    assert!(csv.lines().any(|l| l.starts_with("4,")) && csv.lines().any(|l| l.starts_with("8,")));
}

#[test]
fn cluster_reports_both_partition_functions() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("c");
    assert!(msrg(&["cluster", "--out", &out_arg(&out)]).status.success());
    let p = &read_json(&out.join("cluster.json"))["cluster"]["pipeline"];
    let (x, b, gap) = (p["xi_expansion"].as_f64().unwrap(), p["xi_bruteforce"].as_f64().unwrap(), p["rel_gap"].as_f64().unwrap());
    assert!(x > 0.0 && b > 0.0);
    assert!(gap < 1e-8);
    assert!((x - b).abs() <= gap * b.abs().max(x.abs()) + 1e-300);
}

#[test]
fn report_embeds_every_summary() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("r");
    assert!(msrg(&["report", "--out", &out_arg(&out)]).status.success());
    let v = read_json(&out.join("report.json"));
    for k in ["checks", "decay", "cluster", "flow", "polymers", "config", "config_hash", "core_version"] {
        assert!(!v[k].is_null(), "{k}");
    }
    assert_eq!(v["polymers"]["tree_lemma_holds"], true);
    assert_eq!(v["flow"]["lambda_chain_ulps"], 0);
}
