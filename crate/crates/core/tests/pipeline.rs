use std::path::{Path, PathBuf};
use std::process::Command;

use cropgan::pipeline::{self, dir_checksum, Outcome, RunOptions, Stage};
use cropgan::Error;

fn setup(extra: &str) -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("pipeline.toml");
    std::fs::write(&path, format!("{}\n{extra}", pipeline::smoke_config_toml())).unwrap();
    (dir, path)
}

fn open(path: &Path) -> pipeline::RunContext {
    pipeline::open_run(path, &RunOptions::default()).unwrap()
}

#[test]
fn stage_before_its_dependency_is_refused() {
    let (_d, cfg) = setup("");
    let ctx = open(&cfg);
    let err = pipeline::run_stage(&ctx, Stage::EvalGen, false).unwrap_err();
    assert!(matches!(err, Error::Dependency(_)), "{err}");
    assert_eq!(err.exit_code(), 2);
    assert!(err.to_string().contains("generate"), "{err}");
    let err = pipeline::run_stage(&ctx, Stage::Report, false).unwrap_err();
    assert!(matches!(err, Error::Dependency(_)));
}

#[test]
fn rerun_is_a_no_op_and_force_reproduces_bytes() {
    let (_d, cfg) = setup("");
    let ctx = open(&cfg);
    assert_eq!(pipeline::run_stage(&ctx, Stage::Preprocess, false).unwrap(), Outcome::Ran);
    assert_eq!(pipeline::run_stage(&ctx, Stage::EvalSeg, false).unwrap(), Outcome::Ran);
    let before = dir_checksum(&ctx.run_dir.join("eval_seg")).unwrap();
    let pre = dir_checksum(&ctx.run_dir.join("preprocess")).unwrap();
    assert_eq!(pipeline::run_stage(&ctx, Stage::EvalSeg, false).unwrap(), Outcome::UpToDate);
    assert_eq!(dir_checksum(&ctx.run_dir.join("eval_seg")).unwrap(), before);
    assert_eq!(pipeline::run_stage(&ctx, Stage::EvalSeg, true).unwrap(), Outcome::Ran);
    assert_eq!(dir_checksum(&ctx.run_dir.join("eval_seg")).unwrap(), before);
    assert_eq!(dir_checksum(&ctx.run_dir.join("preprocess")).unwrap(), pre);

    // Tampering with an input invalidates the dependent stage.
    let summary = ctx.run_dir.join("preprocess/summary.json");
    std::fs::write(&summary, b"{}").unwrap();
    let err = pipeline::run_stage(&ctx, Stage::EvalSeg, false).unwrap_err();
    assert!(matches!(err, Error::Dependency(_)));
    assert_eq!(pipeline::run_stage(&ctx, Stage::Preprocess, false).unwrap(), Outcome::Ran);
}

#[test]
fn partial_report_is_deterministic() {
    let (_d, cfg) = setup("");
    let ctx = open(&cfg);
    pipeline::run_stage(&ctx, Stage::Preprocess, false).unwrap();
    pipeline::run_stage(&ctx, Stage::EvalSeg, false).unwrap();
    pipeline::run_stage(&ctx, Stage::Report, false).unwrap();
    let md_path = ctx.run_dir.join("report/report.md");
    let first = std::fs::read(&md_path).unwrap();
    let sum = dir_checksum(&ctx.run_dir.join("report")).unwrap();
    pipeline::run_stage(&ctx, Stage::Report, true).unwrap();
    assert_eq!(std::fs::read(&md_path).unwrap(), first);
    assert_eq!(dir_checksum(&ctx.run_dir.join("report")).unwrap(), sum);
    let md = String::from_utf8(first).unwrap();
    assert!(md.contains("## Instance segmentation") && md.contains("color_threshold"));
    assert!(md.contains("Partial report: eval_gen, train_clf not run."));
    let status = pipeline::status(&ctx).unwrap();
    assert!(status.contains(&(Stage::EvalSeg, "done")));
    assert!(status.contains(&(Stage::Pair, "pending")));
}

#[test]
fn changed_config_needs_force() {
    let (_d, cfg) = setup("");
    let ctx = open(&cfg);
    pipeline::run_stage(&ctx, Stage::Preprocess, false).unwrap();
    // Same run id, different seed.
    let other = pipeline::open_run(&cfg, &RunOptions { run_id: Some(ctx.run_id.clone()), seed: Some(99) }).unwrap();
    assert_ne!(other.config_hash, ctx.config_hash);
    let err = pipeline::run_stage(&other, Stage::Preprocess, false).unwrap_err();
    assert!(err.to_string().contains("--force"), "{err}");
    assert_eq!(pipeline::run_stage(&other, Stage::Preprocess, true).unwrap(), Outcome::Ran);
    assert_eq!(pipeline::status(&ctx).unwrap()[0].1, "stale (config changed)");
}

#[test]
fn invalid_config_is_rejected() {
    let (_d, cfg) = setup("");
    let text = std::fs::read_to_string(&cfg).unwrap().replace("[dataset.synthetic]", "[dataset]\nsplit_ratio = 1.5\n[dataset.synthetic]");
    std::fs::write(&cfg, text).unwrap();
    let err = pipeline::open_run(&cfg, &RunOptions::default()).unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err}");
}

#[test]
fn cli_exit_codes() {
    let bin = env!("CARGO_BIN_EXE_pipeline");
    let (d, cfg) = setup("");
    let run = |args: &[&str]| Command::new(bin).args(args).env("RUST_LOG", "off").current_dir(d.path()).output().unwrap();
    assert_eq!(run(&["--help"]).status.code(), Some(0));
    assert_eq!(run(&["bogus"]).status.code(), Some(1));
    let c = cfg.to_str().unwrap();
    let out = run(&["eval-gen", "--config", c]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing dependency"));
    let out = run(&["status", "--config", c]);
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("preprocess  pending"));
    assert_eq!(run(&["init", "fresh.toml"]).status.code(), Some(0));
    assert_eq!(run(&["init", "fresh.toml"]).status.code(), Some(1));
}
