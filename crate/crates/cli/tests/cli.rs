use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use driftforge::ensemble::FitnessConfig;
use driftforge::divide::SearchBudget;
use driftforge::experiments::{ModelTag, ScenarioSpec, SweepKind, SweepSpec};
use driftforge::ga::GaConfig;
use driftforge::stream::{DriftCase, FormulaConfig, GeneratorConfig};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_driftforge"));
    c.env_remove("DRIFTFORGE_OUT");
    c
}

fn call(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn tiny() -> ScenarioSpec {
    ScenarioSpec {
        n_runs: 1,
        generator: GeneratorConfig {
            samples: [300, 300],
            features: [3, 4],
            formula: FormulaConfig {
                eta: [1, 2],
                ..Default::default()
            },
            growth: 40,
            ..Default::default()
        },
        horizon: 24,
        frame: [12, 20],
        fitness: FitnessConfig {
            tau: 4,
            ..Default::default()
        },
        ga: GaConfig {
            pop_size: 4,
            generations: 2,
            n_max: 3,
            ..Default::default()
        },
        budget: SearchBudget::random(4, 1),
        ..Default::default()
    }
}

fn write_json<T: serde::Serialize>(path: &Path, v: &T) {
    fs::write(path, serde_json::to_string_pretty(v).unwrap()).unwrap();
}

#[test]
fn generate_is_byte_identical_across_invocations() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("g.json");
    fs::write(&cfg, r#"{"samples": [200, 200], "features": [3, 5], "growth": 20, "horizon": 20}"#).unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        let o = call(&["generate", "--config", p(&cfg), "--seed", "5", "--case", "mixed", "--out", p(out)]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let csv_a = fs::read(a.join("stream.csv")).unwrap();
    assert_eq!(csv_a, fs::read(b.join("stream.csv")).unwrap());
    assert_eq!(fs::read(a.join("schedule.json")).unwrap(), fs::read(b.join("schedule.json")).unwrap());
    let rows = String::from_utf8(csv_a).unwrap().lines().count() - 1;
    assert_eq!(rows, 200 + 20 * 20);
}

#[test]
fn generate_refuses_to_overwrite() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("g.json");
    fs::write(&cfg, r#"{"samples": [100, 100], "horizon": 20}"#).unwrap();
    let out = dir.path().join("o");
    assert!(call(&["generate", "--config", p(&cfg), "--out", p(&out)]).status.success());
    let before = fs::read(out.join("stream.csv")).unwrap();
    let o = call(&["generate", "--config", p(&cfg), "--seed", "9", "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("stream.csv"));
    assert_eq!(fs::read(out.join("stream.csv")).unwrap(), before);
    let o = call(&["generate", "--config", p(&cfg), "--seed", "9", "--out", p(&out), "--overwrite"]);
    assert!(o.status.success());
    assert_ne!(fs::read(out.join("stream.csv")).unwrap(), before);
}

#[test]
fn out_root_falls_back_to_environment() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("g.json");
    fs::write(&cfg, r#"{"samples": [100, 100], "growth": 5}"#).unwrap();
    let o = bin()
        .args(["generate", "--config", p(&cfg)])
        .env("DRIFTFORGE_OUT", dir.path().join("env"))
        .output()
        .unwrap();
    assert!(o.status.success());
    assert!(dir.path().join("env/stream.csv").exists());
}

#[test]
fn run_twice_gives_identical_records() {
    let dir = tempfile::tempdir().unwrap();
    let sc = dir.path().join("s.json");
    write_json(&sc, &tiny());
    let mut records = Vec::new();
    for (name, threads) in [("a", "1"), ("b", "3")] {
        let out = dir.path().join(name);
        let o = call(&[
            "run", "--model", "proposed", "--scenario", p(&sc), "--seed", "7", "--case", "shift", "--out", p(&out),
            "--parallel", threads,
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        let rec = out.join("shift/7/proposed.record.json");
        records.push(fs::read_to_string(rec).unwrap());
        assert!(out.join("shift/7/proposed.genome.json").exists());
    }
    assert_eq!(records[0], records[1]);
    let v: serde_json::Value = serde_json::from_str(&records[0]).unwrap();
    assert_eq!(v["model"], "proposed");
    assert_eq!(v["seed"], 7);
    assert!(v.get("wall_time_s").is_none());
}

#[test]
fn sweep_then_report_reproduces_csv() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SweepSpec {
        kind: SweepKind::Compare,
        base: ScenarioSpec {
            n_runs: 2,
            ..tiny()
        },
        models: vec![
            ModelTag::SingleRandom,
            ModelTag::MultiRandom,
        ],
        cases: vec![DriftCase::Shift],
        ..Default::default()
    };
    let cfg = dir.path().join("sweep.json");
    write_json(&cfg, &spec);
    let out = dir.path().join("out");
    let o = call(&["sweep", "--config", p(&cfg), "--out", p(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let root = out.join("compare");
    let csv = fs::read_to_string(root.join("report.csv")).unwrap();
    let o = call(&["report", "--config", p(&root.join("summary.json"))]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(String::from_utf8(o.stdout).unwrap(), csv);

    let again = call(&["sweep", "--config", p(&cfg), "--out", p(&out)]);
    assert_eq!(again.status.code(), Some(1));
    assert_eq!(fs::read_to_string(root.join("report.csv")).unwrap(), csv);
}

#[test]
fn report_detects_tampered_records() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SweepSpec {
        base: ScenarioSpec {
            n_runs: 1,
            ..tiny()
        },
        models: vec![ModelTag::SingleRandom],
        cases: vec![DriftCase::Moving],
        ..Default::default()
    };
    let cfg = dir.path().join("sweep.json");
    write_json(&cfg, &spec);
    let out = dir.path().join("out");
    assert!(call(&["sweep", "--config", p(&cfg), "--out", p(&out)]).status.success());
    let rec = out.join("compare/moving/0/single_random.record.json");
    let mut v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&rec).unwrap()).unwrap();
    v["theta"] = serde_json::json!(0.123456);
    fs::write(&rec, v.to_string()).unwrap();
    let o = call(&["report", "--config", p(&out.join("compare/summary.json"))]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let o = call(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).to_lowercase().contains("usage"));
    assert_eq!(call(&["run", "--bogus"]).status.code(), Some(1));
    assert_eq!(call(&["--help"]).status.code(), Some(0));

    let short = dir.path().join("g.json");
    fs::write(&short, r#"{"horizon": 5}"#).unwrap();
    let o = call(&["generate", "--config", p(&short), "--out", p(dir.path())]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("horizon"));

    let missing = dir.path().join("nope.json");
    let o = call(&["run", "--model", "proposed", "--config", p(&missing)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("nope.json"));

    let bad = dir.path().join("bad.json");
    write_json(&bad, &ScenarioSpec { frame: [30, 20], ..tiny() });
    let o = call(&["run", "--model", "proposed", "--config", p(&bad)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("bad.json"));

    // Valid config, but the events cannot be placed on this horizon.
    let crowded = dir.path().join("crowded.json");
    let mut sc = tiny();
    sc.schedule.event_count = [300, 300];
    sc.schedule.placement_attempts = 50;
    write_json(&crowded, &sc);
    let o = call(&["run", "--model", "single_random", "--config", p(&crowded), "--case", "mixed", "--out", p(dir.path())]);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
}
