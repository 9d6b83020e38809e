use std::path::Path;
use std::process::{Command, Output};

use metaprune::reward::{reward, RewardParams};

fn metaprune(cwd: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_metaprune"))
        .current_dir(cwd)
        .args(args)
        .env("RUST_LOG", "warn")
        .env_remove("METAPRUNE_OUT")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    assert!(o.status.success(), "exit {:?}\nstdout: {}\nstderr: {}", o.status, String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout.clone()).unwrap()
}

const SMOKE: &str = r#"{
  "template": "mininet",
  "dataset": {"format": "synthetic", "samples": 300, "seed": 3},
  "epochs": {"max_training": 1, "max_iter": 1, "max_tuning": 1},
  "search": {"population": 8, "elite_archive": 8, "breeders": 4, "elites_carried": 1, "mutants": 3, "crossovers": 2},
  "calibration": 64,
  "monitor_nevs": 1
}"#;

#[test]
fn flops_of_full_width_resnet50() {
    let dir = tempfile::tempdir().unwrap();
    let out = stdout(&metaprune(dir.path(), &["flops", "--template", "resnet50"]));
    let line = out.lines().find(|l| l.starts_with("flops ")).unwrap();
    let macs: f64 = line.split_whitespace().nth(1).unwrap().parse().unwrap();
    assert!((macs / 4110e6 - 1.0).abs() <= 0.03, "{line}");
    assert!(std::fs::read_dir(dir.path()).unwrap().next().is_none(), "flops wrote files");
}

#[test]
fn flops_of_explicit_nev() {
    let dir = tempfile::tempdir().unwrap();
    let out = stdout(&metaprune(dir.path(), &["flops", "--template", "mininet", "--nev", "0,0,0,0"]));
    let t = metaprune::arch::ArchTemplate::builtin("mininet").unwrap();
    let expected = t.flops_of(&metaprune::arch::Nev::new(vec![0; 4]).unwrap()).unwrap();
    assert!(out.contains(&format!("flops {expected} ")), "{out}");
    let bad = metaprune(dir.path(), &["flops", "--template", "mininet", "--nev", "0,0"]);
    assert!(!bad.status.success());
}

#[test]
fn one_cell_reward_surface_equals_reward() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    stdout(&metaprune(
        dir.path(),
        &[
            "reward-surface", "--out", out.to_str().unwrap(), "--b-a", "0.766", "--b-f", "4110e6", "--acc-min", "0.7576",
            "--acc-steps", "1", "--flops-min", "1950e6", "--flops-steps", "1",
        ],
    ));
    let csv = std::fs::read_to_string(out.join("reward_surface.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 3, "{csv}");
    assert!(lines[0].starts_with("# metaprune-csv schema_version="));
    let cell: f64 = lines[2].split(',').nth(1).unwrap().parse().unwrap();
    let expected = reward(0.7576, 1950e6, &RewardParams::new(0.766, 4110e6).unwrap()).unwrap().reward;
    assert_eq!(cell, expected);
}

#[test]
fn distribution_writes_histogram() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let text = stdout(&metaprune(dir.path(), &["distribution", "--template", "resnet50", "--out", out.to_str().unwrap(), "--samples", "300", "--bins", "10"]));
    assert!(text.contains("unimodal"), "{text}");
    let csv = std::fs::read_to_string(out.join("distribution_resnet50_0-30.csv")).unwrap();
    let total: u64 = csv.lines().skip(2).map(|l| l.rsplit(',').next().unwrap().parse::<u64>().unwrap()).sum();
    assert_eq!(total, 300);
}

#[test]
fn run_all_then_report_matches_persisted_report() {
    let work = tempfile::tempdir().unwrap();
    let elsewhere = tempfile::tempdir().unwrap();
    let cfg = elsewhere.path().join("smoke.json");
    std::fs::write(&cfg, SMOKE).unwrap();
    let out = work.path().join("run");
    let args = ["--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--seed", "5"];
    let summary = stdout(&metaprune(work.path(), &[&["run-all"], &args[..]].concat()));
    assert!(summary.contains("best NEV"), "{summary}");
    for f in ["config.json", "hypernet.ckpt", "search_state.json", "search_history.csv", "model.ckpt", "report.json"] {
        assert!(out.join(f).is_file(), "{f} missing");
    }
    // nothing outside the output directory
    let entries: Vec<_> = std::fs::read_dir(work.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(entries, vec![std::ffi::OsString::from("run")]);
    assert_eq!(std::fs::read_dir(elsewhere.path()).unwrap().count(), 1);

    let persisted = std::fs::read_to_string(out.join("report.json")).unwrap();
    let printed = stdout(&metaprune(work.path(), &["report", "--out", out.to_str().unwrap()]));
    assert_eq!(printed.trim_end(), persisted.trim_end());

    // the same seed through the environment variable reproduces the outcome
    let out2 = work.path().join("run2");
    let o = Command::new(env!("CARGO_BIN_EXE_metaprune"))
        .current_dir(work.path())
        .args(["run-all", "--config", cfg.to_str().unwrap(), "--seed", "5"])
        .env("METAPRUNE_OUT", &out2)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    stdout(&o);
    let a = metaprune::pipeline::RunReport::from_json(&persisted).unwrap();
    let b = metaprune::pipeline::RunReport::from_json(&std::fs::read_to_string(out2.join("report.json")).unwrap()).unwrap();
    assert!(a.same_outcome(&b));
    assert_eq!(std::fs::read(out.join("model.ckpt")).unwrap(), std::fs::read(out2.join("model.ckpt")).unwrap());

    // a different seed into the same directory is refused
    let clash = metaprune(work.path(), &["run-all", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--seed", "6"]);
    assert!(!clash.status.success());
}

#[test]
fn phases_run_one_by_one() {
    let work = tempfile::tempdir().unwrap();
    let cfg = work.path().join("smoke.json");
    std::fs::write(&cfg, SMOKE).unwrap();
    let out = work.path().join("run");
    let o = out.to_str().unwrap();
    let early = metaprune(work.path(), &["search", "--config", cfg.to_str().unwrap(), "--out", o]);
    assert!(!early.status.success());
    assert!(String::from_utf8_lossy(&early.stderr).contains("meta-train has not finished"));
    stdout(&metaprune(work.path(), &["meta-train", "--config", cfg.to_str().unwrap(), "--out", o]));
    // later phases pick the stored config up from the output directory
    let s = stdout(&metaprune(work.path(), &["search", "--out", o]));
    assert!(s.contains("best NEV"), "{s}");
    stdout(&metaprune(work.path(), &["retrain", "--out", o]));
    assert!(out.join("report.json").is_file());
}

#[test]
fn invalid_config_lists_every_problem() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    std::fs::write(
        &cfg,
        r#"{"template": "no-such-template", "dataset": {"format": "idx"}, "reward": {"b_a": 2.0}, "workers": 0}"#,
    )
    .unwrap();
    let o = metaprune(dir.path(), &["run-all", "--config", cfg.to_str().unwrap(), "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let err: serde_json::Value = serde_json::from_slice(&o.stderr).unwrap();
    assert_eq!(err["error"], "config");
    let details = err["details"].as_array().unwrap();
    assert_eq!(details.len(), 4, "{details:#?}");
    assert!(!dir.path().join("o").exists());
}

#[test]
fn malformed_config_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, r#"{"template": "mininet""#).unwrap();
    let o = metaprune(dir.path(), &["run-all", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}
