use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

/// A scaled-down suite that runs in seconds.
const SMALL: &str = r#"
[path]
eps = 0.01
horizon = 2.0
mu = [{ h = 1.0, m = 0.5 }]

[suite]
seed = 7

[suite.mass]
eps = 0.001
n_paths = 4

[suite.occupation]
n_measures = 20

[suite.metric]
n_samples = 100

[suite.height]
eps = 0.01
n_paths = 5
n_times = 100

[suite.subordinator]
eps = 0.01
n_paths = 500

[suite.resolvent]
eps = 0.01
n_paths = 200

[suite.martingale]
eps = 0.01
n_paths = 4000

[suite.lambda_identity]
ys = [0.0, 1.0]

[suite.excursions]
eps = 0.01
min_excursions = 500
window = { local_time = 20.0, batches = 20, cap = 1000.0 }
marked = { delta = 1e-4, n_quad = 16, draws_per_node = 500 }

[suite.sampler]
n_draws = 2000
"#;

fn run(dir: &Path, args: &[&str]) -> Output {
    let cfg = dir.join("small.toml");
    fs::write(&cfg, SMALL).unwrap();
    Command::new(env!("CARGO_BIN_EXE_levy-explore"))
        .args(args)
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(dir.join("out"))
        .output()
        .unwrap()
}

fn report(dir: &Path, name: &str) -> Value {
    serde_json::from_str(&fs::read_to_string(dir.join("out").join(format!("{name}.json"))).unwrap()).unwrap()
}

#[test]
fn verify_invariants_writes_twelve_passing_reports() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["verify-invariants"]);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(out.status.success(), "{stdout}\n{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(stdout.lines().filter(|l| l.starts_with("PASS ")).count(), 12, "{stdout}");
    for name in levy_explore::verify::CHECKS {
        let r = report(dir.path(), name);
        assert_eq!(r["pass"], Value::Bool(true), "{name}");
        assert!(r["config"].is_object());
    }
    let summary = fs::read_to_string(dir.path().join("out/summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 13);
}

#[test]
fn resolvent_flags_reach_the_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["resolvent", "--lambda", "1", "--mu", "1:0.5", "--horizon", "10"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let r = report(dir.path(), "resolvent");
    let cases = r["config"]["resolvent"]["cases"].as_array().unwrap();
    assert_eq!(cases.len(), 3);
    for c in cases {
        assert_eq!(c["lambda"], 1.0);
        assert_eq!(c["horizon"], 10.0);
        assert_eq!(c["mu"], serde_json::json!([{ "h": 1.0, "m": 0.5 }]));
    }
    for e in r["estimators"].as_array().unwrap() {
        assert!(e["z"].is_number());
    }
}

#[test]
fn same_seed_gives_identical_bytes() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        let out = run(d.path(), &["poisson-rep", "--seed", "42"]);
        assert!(out.status.code().is_some_and(|c| c < 2), "{}", String::from_utf8_lossy(&out.stderr));
    }
    for name in ["config.json", "poisson-sampler.json", "poisson-representation.json", "summary.csv"] {
        let x = fs::read(a.path().join("out").join(name)).unwrap();
        let y = fs::read(b.path().join("out").join(name)).unwrap();
        assert_eq!(x, y, "{name}");
    }
    assert_eq!(report(a.path(), "config")["suite"]["seed"], 42);
}

#[test]
fn explore_writes_trajectory() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["explore"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(dir.path().join("out/trajectory.csv")).unwrap();
    assert!(csv.starts_with("t,total_mass,H,n_atoms"));
    let path = fs::read_to_string(dir.path().join("out/path.csv")).unwrap();
    assert!(path.starts_with("# c="));
    let summary = report(dir.path(), "path");
    assert_eq!(summary["config"]["path"]["mu"], serde_json::json!([{ "h": 1.0, "m": 0.5 }]));
}

#[test]
fn bad_config_reports_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["tilt-check", "--eps=-1"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains(".eps"), "{err}");

    let cfg = dir.path().join("typo.toml");
    fs::write(&cfg, "[suite.resolvent]\nn_path = 3\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_levy-explore"))
        .args(["resolvent", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(dir.path().join("out"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("n_path"));
}

#[test]
fn exact_checks_pass_on_defaults() {
    let dir = tempfile::tempdir().unwrap();
    for cmd in ["tilt-check", "metric-check"] {
        let out = Command::new(env!("CARGO_BIN_EXE_levy-explore"))
            .arg(cmd)
            .arg("--out")
            .arg(dir.path())
            .output()
            .unwrap();
        assert!(out.status.success(), "{cmd}: {}", String::from_utf8_lossy(&out.stdout));
    }
}
