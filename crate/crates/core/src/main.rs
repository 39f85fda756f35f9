use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use cropgan::pipeline::{self, Outcome, RunOptions, Stage};

/// Staged crop-disease synthesis and evaluation pipeline.
#[derive(Parser, Debug)]
#[command(name = "pipeline", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Debug)]
struct Common {
    /// Pipeline configuration (TOML).
    #[arg(long, short)]
    config: PathBuf,
    /// Rerun even if outputs are up to date; also discards a run whose
    /// configuration changed.
    #[arg(long)]
    force: bool,
    /// Use this run id instead of the one derived from the config hash.
    #[arg(long)]
    run: Option<String>,
    /// Override `run.seed`.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Load, split, resize and augment the dataset; rasterize annotations.
    Preprocess(Common),
    /// Pair healthy and diseased training images.
    Pair(Common),
    /// Train the translation models.
    TrainGan(Common),
    /// Translate healthy images and select the most realistic outputs.
    Generate(Common),
    /// Score generated images (FID, IS).
    EvalGen(Common),
    /// Train and benchmark the classifiers.
    TrainClf(Common),
    /// Render class activation maps.
    Explain(Common),
    /// Export COCO splits, emit engine configs and score segmentations.
    EvalSeg(Common),
    /// Write the markdown report.
    Report(Common),
    /// Every stage in order.
    All(Common),
    /// Show the state of each stage.
    Status(Common),
    /// Write a small self-contained example config.
    Init {
        /// Destination file.
        #[arg(default_value = "pipeline.toml")]
        path: PathBuf,
    },
}

fn open(c: &Common) -> Result<pipeline::RunContext> {
    Ok(pipeline::open_run(&c.config, &RunOptions { run_id: c.run.clone(), seed: c.seed })?)
}

fn report(stage: Stage, outcome: Outcome, ctx: &pipeline::RunContext) {
    let what = match outcome {
        Outcome::Ran => "done",
        Outcome::UpToDate => "up to date",
    };
    println!("{stage}: {what} ({})", ctx.stage_dir(stage).display());
}

fn run(cli: Cli) -> Result<()> {
    let (stage, c) = match cli.command {
        Command::Init { path } => {
            if path.exists() {
                anyhow::bail!("{} already exists", path.display());
            }
            std::fs::write(&path, pipeline::smoke_config_toml()).with_context(|| format!("writing {}", path.display()))?;
            println!("wrote {}", path.display());
            return Ok(());
        }
        Command::Status(c) => {
            let ctx = open(&c)?;
            println!("run {} at {}", ctx.run_id, ctx.run_dir.display());
            for (s, state) in pipeline::status(&ctx)? {
                println!("  {:<11} {state}", s.as_str());
            }
            return Ok(());
        }
        Command::All(c) => {
            let ctx = open(&c)?;
            for (s, o) in pipeline::run_all(&ctx, c.force)? {
                report(s, o, &ctx);
            }
            return Ok(());
        }
        Command::Preprocess(c) => (Stage::Preprocess, c),
        Command::Pair(c) => (Stage::Pair, c),
        Command::TrainGan(c) => (Stage::TrainGan, c),
        Command::Generate(c) => (Stage::Generate, c),
        Command::EvalGen(c) => (Stage::EvalGen, c),
        Command::TrainClf(c) => (Stage::TrainClf, c),
        Command::Explain(c) => (Stage::Explain, c),
        Command::EvalSeg(c) => (Stage::EvalSeg, c),
        Command::Report(c) => (Stage::Report, c),
    };
    let ctx = open(&c)?;
    let outcome = pipeline::run_stage(&ctx, stage, c.force)?;
    report(stage, outcome, &ctx);
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e.downcast_ref::<cropgan::Error>().map_or(1, |e| e.exit_code());
            ExitCode::from(code as u8)
        }
    }
}
