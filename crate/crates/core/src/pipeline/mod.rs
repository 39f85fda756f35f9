//! Resumable stage runner behind the `pipeline` binary.

pub mod config;
pub mod record;
pub mod report;
pub mod stages;

use std::fs;
use std::path::Path;

use log::info;

pub use config::{smoke_config_toml, PipelineConfig, RUN_ROOT_ENV};
pub use record::{dir_checksum, RunLock, RunRecord, Stage};
pub use stages::RunContext;

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub run_id: Option<String>,
    pub seed: Option<u64>,
}

/// Loads and validates a config and works out where its run lives.
pub fn open_run(config_path: &Path, opts: &RunOptions) -> Result<RunContext> {
    let mut cfg = PipelineConfig::load(config_path)?;
    if let Some(seed) = opts.seed {
        cfg.run.seed = seed;
    }
    cfg.validate()?;
    let config_hash = cfg.hash()?;
    let run_id = opts.run_id.clone().unwrap_or_else(|| format!("run-{}", &config_hash[..12]));
    let run_dir = cfg.output_root().join("runs").join(&run_id);
    Ok(RunContext { cfg, run_id, config_hash, run_dir })
}

/// What `run_stage` did.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Outcome {
    Ran,
    UpToDate,
}

fn load_record(ctx: &RunContext, force: bool) -> Result<RunRecord> {
    match RunRecord::load(&ctx.run_dir)? {
        Some(r) if r.config_hash == ctx.config_hash => Ok(r),
        Some(r) if !force => Err(Error::Config(format!(
            "run `{}` was created with a different configuration (hash {} vs {}); rerun with --force to discard it",
            ctx.run_id,
            &r.config_hash[..12.min(r.config_hash.len())],
            &ctx.config_hash[..12]
        ))),
        Some(_) => {
            info!("configuration changed, resetting run {}", ctx.run_id);
            for s in Stage::ALL {
                let d = ctx.stage_dir(s);
                if d.exists() {
                    fs::remove_dir_all(&d).map_err(|e| Error::io(&d, e))?;
                }
            }
            new_record(ctx)
        }
        None => new_record(ctx),
    }
}

fn new_record(ctx: &RunContext) -> Result<RunRecord> {
    fs::create_dir_all(&ctx.run_dir).map_err(|e| Error::io(&ctx.run_dir, e))?;
    stages::write_json(&ctx.run_dir.join("config.json"), &ctx.cfg)?;
    let mut r = RunRecord::new(&ctx.run_id, &ctx.config_hash);
    r.save(&ctx.run_dir)?;
    Ok(r)
}

fn check_dependencies(ctx: &RunContext, record: &RunRecord, stage: Stage) -> Result<()> {
    if stage == Stage::Report {
        for s in Stage::EVALUATIONS {
            if record.verify(&ctx.run_dir, s)? {
                return Ok(());
            }
        }
        return Err(Error::Dependency(
            "report needs at least one of the eval_gen, train_clf or eval_seg stages to have completed".into(),
        ));
    }
    for &d in stage.dependencies() {
        if !record.verify(&ctx.run_dir, d)? {
            return Err(Error::Dependency(format!(
                "stage `{stage}` needs `{d}`, which has not completed (or its outputs changed); run `pipeline {}` first",
                d.as_str().replace('_', "-")
            )));
        }
    }
    Ok(())
}

/// Runs one stage unless its recorded outputs are intact. Without `force`
/// an up-to-date stage is left alone and no file is touched.
pub fn run_stage(ctx: &RunContext, stage: Stage, force: bool) -> Result<Outcome> {
    let _lock = RunLock::acquire(&ctx.run_dir)?;
    let mut record = load_record(ctx, force)?;
    check_dependencies(ctx, &record, stage)?;
    if !force && record.verify(&ctx.run_dir, stage)? {
        info!("{stage}: up to date");
        return Ok(Outcome::UpToDate);
    }
    let dir = ctx.stage_dir(stage);
    if dir.exists() {
        fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    record.invalidate(stage);
    record.save(&ctx.run_dir)?;
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    info!("{stage}: running");
    let res = match stage {
        Stage::Preprocess => stages::run_preprocess(ctx),
        Stage::Pair => stages::run_pair(ctx),
        Stage::TrainGan => stages::run_train_gan(ctx),
        Stage::Generate => stages::run_generate(ctx),
        Stage::EvalGen => stages::run_eval_gen(ctx),
        Stage::TrainClf => stages::run_train_clf(ctx),
        Stage::Explain => stages::run_explain(ctx),
        Stage::EvalSeg => stages::run_eval_seg(ctx),
        Stage::Report => report::run_report(ctx, &record),
    };
    if let Err(e) = res {
        let _ = fs::remove_dir_all(&dir);
        return Err(e);
    }
    record.complete(&ctx.run_dir, stage)?;
    record.save(&ctx.run_dir)?;
    Ok(Outcome::Ran)
}

/// Every stage in order; `force` reruns each one.
pub fn run_all(ctx: &RunContext, force: bool) -> Result<Vec<(Stage, Outcome)>> {
    Stage::ALL.iter().map(|&s| Ok((s, run_stage(ctx, s, force)?))).collect()
}

/// One line per stage describing its state.
pub fn status(ctx: &RunContext) -> Result<Vec<(Stage, &'static str)>> {
    let record = RunRecord::load(&ctx.run_dir)?;
    Stage::ALL
        .iter()
        .map(|&s| {
            let state = match &record {
                None => "pending",
                Some(r) if r.config_hash != ctx.config_hash => "stale (config changed)",
                Some(r) if r.verify(&ctx.run_dir, s)? => "done",
                Some(r) if r.stages.contains_key(&s) => "modified",
                Some(_) => "pending",
            };
            Ok((s, state))
        })
        .collect()
}
