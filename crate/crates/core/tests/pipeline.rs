use std::fs;
use std::path::Path;
use std::process::Command;

use sru::harness::{run_all, ExperimentConfig, Pipeline};
use sru::unlearning::format_requests;
use sru::SruError;

const SMALL: &str = "\
synthetic.sessions = 300
synthetic.items = 60
synthetic.clusters = 3
backbone.dim = 8
backbone.epochs = 2
backbone.batch_size = 32
backbone.lr = 0.005
partition.k = 3
aggregation.attention_dim = 8
aggregation.epochs = 1
aggregation.batch_size = 64
unlearn.requests = 10
";

fn small() -> ExperimentConfig {
    ExperimentConfig::parse(SMALL).unwrap()
}

fn artifacts(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().display().to_string();
                out.push((rel, fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn end_to_end_artifacts_are_reproducible() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    run_all(&Pipeline::new(small(), a.path()), false).unwrap();
    run_all(&Pipeline::new(small(), b.path()), true).unwrap();
    let (fa, fb) = (artifacts(a.path()), artifacts(b.path()));
    assert!(fa.iter().any(|(n, _)| n == "aggregation.ckpt"));
    assert!(fa.iter().any(|(n, _)| n == "reports/eval.csv"));
    assert_eq!(fa.len(), fb.len());
    for ((na, da), (nb, db)) in fa.iter().zip(&fb) {
        assert_eq!(na, nb);
        assert!(da == db, "{na} differs between runs");
    }
}

#[test]
fn stages_refuse_to_run_out_of_order() {
    let dir = tempfile::tempdir().unwrap();
    let p = Pipeline::new(small(), dir.path());
    match p.eval() {
        Err(SruError::StageDependency { stage, missing_stage, .. }) => {
            assert_eq!((stage, missing_stage), ("eval", "preprocess"));
        }
        other => panic!("expected a stage dependency error, got {other:?}"),
    }
    p.preprocess().unwrap();
    p.pretrain().unwrap();
    p.partition().unwrap();
    match p.train_agg() {
        Err(SruError::StageDependency { missing_stage, .. }) => assert_eq!(missing_stage, "train-shards"),
        other => panic!("expected a stage dependency error, got {other:?}"),
    }
    p.train_shards(false).unwrap();
    p.train_agg().unwrap();
    match p.effectiveness() {
        Err(SruError::StageDependency { missing_stage, .. }) => assert_eq!(missing_stage, "unlearn"),
        other => panic!("expected a stage dependency error, got {other:?}"),
    }
}

#[test]
fn upstream_config_change_makes_artifacts_stale() {
    let dir = tempfile::tempdir().unwrap();
    let p = Pipeline::new(small(), dir.path());
    p.preprocess().unwrap();
    p.pretrain().unwrap();

    let mut cfg = small();
    cfg.set("backbone.epochs", "3").unwrap();
    let mut changed = Pipeline::new(cfg, dir.path());
    assert!(matches!(changed.partition(), Err(SruError::StaleArtifact { .. })));
    changed.force = true;
    changed.partition().unwrap();

    // downstream-only keys leave upstream artifacts valid
    let mut cfg = small();
    cfg.set("aggregation.epochs", "2").unwrap();
    Pipeline::new(cfg, dir.path()).partition().unwrap();
}

#[test]
fn unlearn_updates_artifacts_and_feeds_effectiveness() {
    let dir = tempfile::tempdir().unwrap();
    let p = Pipeline::new(small(), dir.path());
    run_all(&p, false).unwrap();
    let before = artifacts(dir.path());

    let requests = p.sample_requests().unwrap();
    assert_eq!(requests.len(), 10);
    let req_path = dir.path().join("requests.csv");
    fs::write(&req_path, format_requests(&requests)).unwrap();
    p.unlearn(&req_path).unwrap();
    p.effectiveness().unwrap();
    p.eval().unwrap();

    let after = artifacts(dir.path());
    let get = |set: &[(String, Vec<u8>)], name: &str| set.iter().find(|(n, _)| n == name).map(|(_, d)| d.clone());
    assert_ne!(get(&before, "aggregation.ckpt"), get(&after, "aggregation.ckpt"));
    assert_eq!(get(&before, "reference.ckpt"), get(&after, "reference.ckpt"));
    let effectiveness = String::from_utf8(get(&after, "reports/effectiveness.csv").unwrap()).unwrap();
    assert!(effectiveness.starts_with("metric,k,value\n"));
    assert!(effectiveness.contains("hit,10,"));
    let deletions = String::from_utf8(get(&after, "reports/deletions.csv").unwrap()).unwrap();
    assert_eq!(deletions.lines().count(), 11);

    // a stale aggregation is detected after shards change underneath it
    p.train_shards(false).unwrap();
    assert!(matches!(p.eval(), Err(SruError::StaleArtifact { .. })));
}

#[test]
fn cli_reports_errors_and_prints_config() {
    let dir = tempfile::tempdir().unwrap();
    let bin = env!("CARGO_BIN_EXE_sru");
    let out = Command::new(bin)
        .args(["--work", dir.path().to_str().unwrap(), "eval"])
        .env("RUST_BACKTRACE", "0")
        .output()
        .unwrap();
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("preprocess"), "{stderr}");

    let out = Command::new(bin)
        .args(["--set", "partition.k=4", "config"])
        .env("SRU_SEED", "17")
        .output()
        .unwrap();
    assert!(out.status.success());
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("seed = 17\n"), "{stdout}");
    assert!(stdout.contains("partition.k = 4\n"), "{stdout}");

    let out = Command::new(bin).args(["--set", "partition.bogus=1", "config"]).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("partition.bogus"));
}
