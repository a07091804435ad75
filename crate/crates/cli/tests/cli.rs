use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn mixedlane(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mixedlane"))
        .args(args)
        .env("MIXEDLANE_LOG_LEVEL", "error")
        .output()
        .expect("binary runs")
}

fn path(dir: &TempDir, name: &str) -> String {
    dir.path().join(name).to_str().unwrap().to_string()
}

fn scenario(dir: &TempDir, body: &str) -> String {
    let p = path(dir, "scenario.toml");
    std::fs::write(&p, body).unwrap();
    p
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn run_writes_a_log_and_prints_metrics() {
    let dir = TempDir::new().unwrap();
    let log = path(&dir, "nested/run.jsonl");
    let out = mixedlane(&["run", "--seed", "3", "--policy", "zero", "--out", &log]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let metrics: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(metrics["outcome"], "complete");
    let text = std::fs::read_to_string(&log).unwrap();
    let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    assert_eq!(first["seed"], 3);
}

#[test]
fn short_horizon_exits_with_abort_code() {
    let dir = TempDir::new().unwrap();
    let cfg = scenario(&dir, "[controller]\nT_f = 0.001\n");
    let out = mixedlane(&["run", "--scenario", &cfg, "--out", &path(&dir, "a.jsonl")]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
    assert!(Path::new(&path(&dir, "a.jsonl")).exists());
}

#[test]
fn malformed_scenario_names_the_key() {
    let dir = TempDir::new().unwrap();
    let cfg = scenario(&dir, "[controller]\nbogus_gain = 1.0\n");
    let out = mixedlane(&["run", "--scenario", &cfg, "--out", &path(&dir, "b.jsonl")]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("bogus_gain"), "{}", stderr(&out));

    let cfg = scenario(&dir, "micro_step = -1.0\n");
    let out = mixedlane(&["run", "--scenario", &cfg, "--out", &path(&dir, "c.jsonl")]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("micro_step"), "{}", stderr(&out));
}

#[test]
fn compare_requires_a_seed_and_writes_outputs() {
    let dir = TempDir::new().unwrap();
    let out_dir = path(&dir, "cmp");
    let out = mixedlane(&["compare", "--seeds", "0", "--out", &out_dir]);
    assert_eq!(out.status.code(), Some(1));

    let out = mixedlane(&["compare", "--seeds", "2", "--out", &out_dir]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let table = String::from_utf8(out.stdout).unwrap();
    assert_eq!(table.lines().count(), 4);
    assert_eq!(std::fs::read_to_string(path(&dir, "cmp/summary.csv")).unwrap(), table);
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(path(&dir, "cmp/summary.json")).unwrap()).unwrap();
    assert_eq!(summary["cases"].as_array().unwrap().len(), 3);
    let series = std::fs::read_dir(&out_dir)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().is_dir())
        .count();
    assert_eq!(series, 3);
}

#[test]
fn human_batch_reports_each_repetition() {
    let dir = TempDir::new().unwrap();
    let out_file = path(&dir, "aggr.json");
    let out = mixedlane(&[
        "human-batch",
        "--archetype",
        "aggressive",
        "--reps",
        "2",
        "--out",
        &out_file,
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&out_file).unwrap()).unwrap();
    assert_eq!(report["runs"].as_array().unwrap().len(), 2);
    assert_eq!(report["archetype"], "aggressive");

    let out = mixedlane(&["human-batch", "--archetype", "reckless", "--out", &out_file]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn replay_checks_byte_identity() {
    let dir = TempDir::new().unwrap();
    let log = path(&dir, "r.jsonl");
    let out = mixedlane(&["run", "--seed", "4", "--mode", "time", "--out", &log]);
    assert!(matches!(out.status.code(), Some(0 | 2)), "{}", stderr(&out));

    let out = mixedlane(&["replay", &log]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert_eq!(String::from_utf8(out.stdout).unwrap().trim(), "identical");

    // Same header, altered trajectory.
    let text = std::fs::read_to_string(&log).unwrap();
    let mut lines: Vec<String> = text.lines().map(str::to_string).collect();
    let i = (0..lines.len())
        .filter(|&i| lines[i].starts_with("{\"type\":\"step\""))
        .nth(5)
        .unwrap();
    let mut step: serde_json::Value = serde_json::from_str(&lines[i]).unwrap();
    let x = step["states"]["C"]["x"].as_f64().unwrap();
    step["states"]["C"]["x"] = (x + 1.0).into();
    lines[i] = step.to_string();
    std::fs::write(&log, lines.join("\n") + "\n").unwrap();
    let out = mixedlane(&["replay", &log]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8(out.stdout).unwrap().starts_with("differs"));
}
