use std::path::Path;
use std::process::{Command, Output};

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_teugel-smp"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.to_string_lossy().into_owned()
}

const BENCHMARK: &str = r#"{
  "levy": { "dimension": 1, "atoms": [ { "point": [1.0], "rate": 0.5 }, { "point": [-1.0], "rate": 0.5 } ] },
  "problem": { "catalog": "lq-benchmark" },
  "monte_carlo": { "paths": 200, "grid": 10, "seed": 3 }
}"#;

#[test]
fn negative_rate_is_a_config_error_naming_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "bad.json", &BENCHMARK.replacen("\"rate\": 0.5", "\"rate\": -0.5", 1));
    let out = bin(&["basis", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("levy.atoms[0].rate"), "{err}");
}

#[test]
fn unknown_field_is_reported_with_its_path() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "bad.json", &BENCHMARK.replace("\"seed\": 3", "\"seed\": 3, \"sede\": 4"));
    let out = bin(&["simulate", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("monte_carlo"), "{err}");
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(bin(&["basis", "--example", "no-such-example"]).status.code(), Some(2));
    assert_eq!(bin(&["simulate", "--bogus"]).status.code(), Some(2));
    assert_eq!(bin(&["basis", "--config", "/nonexistent/config.json"]).status.code(), Some(2));
    assert_eq!(
        bin(&["basis", "--config", "a.json", "--example", "lq-benchmark"]).status.code(),
        Some(2)
    );
}

#[test]
fn exploding_state_is_a_numerical_failure() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "explode.json",
        r#"{
  "levy": { "dimension": 1, "atoms": [ { "point": [1.0], "rate": 1.0 } ] },
  "problem": { "catalog": "linear", "a": 1e100, "b": 0.0, "c": 0.0, "q": 1.0, "r": 1.0, "s": 1.0,
               "horizon": 1.0, "x0": 1.0 },
  "control": { "kind": "zero" },
  "monte_carlo": { "paths": 10, "grid": 4, "seed": 1 }
}"#,
    );
    let out = bin(&["simulate", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn csv_output_carries_version_and_config_digest() {
    let out = bin(&["basis", "--example", "lq-benchmark"]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    let mut lines = text.lines();
    assert!(lines.next().unwrap().starts_with("# teugel-smp "));
    let digest = lines.next().unwrap().strip_prefix("# config_digest: ").unwrap().to_string();
    assert_eq!(digest.len(), 64);
    assert!(lines.next().unwrap().starts_with("# config: {"));
    assert!(lines.next().unwrap().starts_with("index,degree"));
}

#[test]
fn seed_controls_the_simulation() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "lq.json", BENCHMARK);
    let run = |seed: &str| String::from_utf8(bin(&["simulate", "--config", &cfg, "--seed", seed]).stdout).unwrap();
    let body = |s: String| s.lines().filter(|l| !l.starts_with('#')).collect::<Vec<_>>().join("\n");
    let a = body(run("5"));
    assert_eq!(a, body(run("5")));
    assert_ne!(a, body(run("6")));
}

#[test]
fn check_smp_writes_report_and_gap_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "lq.json", BENCHMARK);
    let report = dir.path().join("report.json");
    let out = bin(&[
        "check-smp",
        "--config",
        &cfg,
        "--control",
        "zero",
        "--umin=-2",
        "--umax=2",
        "--usteps",
        "5",
        "--out",
        report.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(json["tool"], "teugel-smp");
    assert!(json["report"]["maximum_condition"]["min_gap"]["mean"].as_f64().unwrap() < 0.0);
    let gap = std::fs::read_to_string(dir.path().join("report_gap.csv")).unwrap();
    assert!(gap.lines().any(|l| l.starts_with("t,")));
}
