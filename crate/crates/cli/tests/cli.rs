use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn forge(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_safe-forge"))
        .args(args)
        .env_remove("SAFE_CACHE_DIR")
        .output()
        .unwrap()
}

fn fixture(dir: &Path) -> String {
    let out = forge(&["fixture", "--dir", dir.to_str().unwrap()]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap().trim().to_string()
}

fn reports(out: &Output) -> Vec<Value> {
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout)
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

fn skipped(reports: &[Value]) -> Vec<bool> {
    reports
        .iter()
        .map(|r| r["skipped"].as_bool().unwrap())
        .collect()
}

#[test]
fn stage_before_its_prerequisite_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let conf = fixture(dir.path());
    let out = forge(&["subjects", "--config", &conf]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(
        err.contains("missing_prerequisite") && err.contains("ingest"),
        "{err}"
    );
}

#[test]
fn full_run_reports_then_rerun_skips() {
    let dir = tempfile::tempdir().unwrap();
    let conf = fixture(dir.path());
    let first = reports(&forge(&["run", "--config", &conf]));
    let names: Vec<&str> = first.iter().map(|r| r["stage"].as_str().unwrap()).collect();
    assert_eq!(
        names,
        [
            "ingest",
            "curate",
            "ground",
            "subjects",
            "condition",
            "train",
            "generate",
            "evaluate"
        ]
    );
    assert!(skipped(&first).iter().all(|s| !s));
    assert!(dir.path().join("work/report.jsonl").exists());

    let again = reports(&forge(&["run", "--config", &conf]));
    assert!(skipped(&again).iter().all(|s| *s));
    let status = String::from_utf8(forge(&["status", "--config", &conf]).stdout).unwrap();
    assert_eq!(
        status.lines().filter(|l| l.ends_with("current")).count(),
        8,
        "{status}"
    );
}

#[test]
fn stage_flags_override_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let conf = fixture(dir.path());
    reports(&forge(&["ingest", "--config", &conf]));
    let curate = reports(&forge(&[
        "curate",
        "--config",
        &conf,
        "--iqa-threshold",
        "0.99",
    ]));
    assert_eq!(curate[0]["summary"]["quality_pass"], 0);

    // the generic per-key flag and --set hit the same keys, --set last
    let cfg = forge(&[
        "config",
        "--config",
        &conf,
        "--curate-iqa-threshold",
        "0.4",
        "--set",
        "train.rank=4",
    ]);
    let text = String::from_utf8(cfg.stdout).unwrap();
    assert!(
        text.contains("curate.iqa_threshold = 0.4\n") && text.contains("train.rank = 4\n"),
        "{text}"
    );
    let cfg = forge(&[
        "config",
        "--curate-iqa-threshold",
        "0.4",
        "--set",
        "curate.iqa_threshold=0.5",
    ]);
    assert!(String::from_utf8(cfg.stdout)
        .unwrap()
        .contains("curate.iqa_threshold = 0.5\n"));

    let bad = forge(&["curate", "--config", &conf, "--iqa-threshold", "1.5"]);
    assert_eq!(bad.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("curate.iqa_threshold"));
    assert_eq!(forge(&["config", "--set", "nope=1"]).status.code(), Some(2));
}

fn manifest_bytes(dir: &Path) -> Vec<u8> {
    let text = std::fs::read_to_string(dir.join("work/manifest.jsonl")).unwrap();
    text.replace(
        &std::path::absolute(dir).unwrap().display().to_string(),
        "<dir>",
    )
    .into_bytes()
}

#[test]
fn model_free_stages_reproduce_byte_for_byte() {
    let runs: Vec<(tempfile::TempDir, PathBuf)> = (0..2)
        .map(|_| {
            let dir = tempfile::tempdir().unwrap();
            let conf = fixture(dir.path());
            reports(&forge(&[
                "run",
                "--config",
                &conf,
                "--stages",
                "ingest,curate,ground,subjects,condition",
            ]));
            let p = dir.path().to_path_buf();
            (dir, p)
        })
        .collect();
    assert_eq!(manifest_bytes(&runs[0].1), manifest_bytes(&runs[1].1));
}
