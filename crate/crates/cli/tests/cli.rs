use std::path::Path;
use std::process::{Command, Output};

fn nudge(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nudge"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = nudge(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn offline_workflow() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    std::fs::write(dir.join("cfg.toml"), "[model]\nmax_epochs = 2\n[pipeline]\nbatches = 3\n").unwrap();
    ok(dir, &["synth", "--out", "data", "--users", "120", "--seed", "4"]);
    for f in ["catalog.toml", "participants.jsonl", "library.jsonl", "interactions.jsonl"] {
        assert!(dir.join("data").join(f).exists(), "{f}");
    }
    let stats = ok(dir, &["construct"]);
    assert!(stats.starts_with("nodes\t"));
    ok(dir, &["--config", "cfg.toml", "train", "--out", "m.json"]);
    ok(dir, &["--config", "cfg.toml", "--k-daily", "2", "--p-diversity", "0", "score", "--model", "m.json", "--day", "40"]);
    let day = std::fs::read_to_string(dir.join("out/day-40.jsonl")).unwrap();
    let lines: Vec<serde_json::Value> = day.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert!(!lines.is_empty());
    let mut per_user = std::collections::BTreeMap::new();
    for l in &lines {
        assert_eq!(l["day"], 40);
        assert_eq!(l["was_diversity_replacement"], false);
        *per_user.entry(l["user_id"].as_str().unwrap().to_string()).or_insert(0) += 1;
    }
    assert!(per_user.values().all(|&n| n <= 2));
    assert!(dir.join("out/day-40.telemetry.json").exists());

    ok(dir, &["--config", "cfg.toml", "finetune", "--model", "m.json", "--out", "m2.json", "--epochs", "1"]);
    let report = ok(dir, &["--config", "cfg.toml", "evaluate"]);
    assert!(report.contains("precision@3\t"));
}

#[test]
fn bad_overrides_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    for args in [
        &["--k-daily", "lots", "construct"][..],
        &["--batches", "0", "construct"][..],
        &["--p-diversity", "1.5", "construct"][..],
    ] {
        let out = nudge(tmp.path(), args);
        assert!(!out.status.success(), "{args:?} accepted");
    }
    std::fs::write(tmp.path().join("cfg.toml"), "[pipeline]\nbogus = 1\n").unwrap();
    assert!(!nudge(tmp.path(), &["--config", "cfg.toml", "construct"]).status.success());
}
