//! Markdown summary of whatever evaluations have completed. The output is a
//! pure function of the stage artifacts, so rerunning it is byte-stable.

use std::fmt::Write as _;
use std::fs;

use super::record::{RunRecord, Stage};
use super::stages::{
    gan_key, load_history, read_json, stem_for, ClfMetricsFile, GenMetricsFile, RunContext, SegMetricsFile, GRID, METRICS,
};
use crate::error::{Error, Result};
use crate::gan::epoch_means;
use crate::imaging;
use crate::render;

pub const REPORT: &str = "report.md";

fn f4(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.4}")
    } else {
        "n/a".into()
    }
}

fn copy(from: &std::path::Path, to: &std::path::Path) -> Result<()> {
    let bytes = fs::read(from).map_err(|e| Error::io(from, e))?;
    imaging::write_atomic(to, &bytes)
}

pub fn run_report(ctx: &RunContext, record: &RunRecord) -> Result<()> {
    let done = |s: Stage| -> Result<bool> { record.verify(&ctx.run_dir, s) };
    let out = ctx.stage_dir(Stage::Report);
    let fig = out.join("figures");
    let mut md = String::new();
    writeln!(md, "# Run report\n").ok();
    writeln!(md, "- run: `{}`", ctx.run_id).ok();
    writeln!(md, "- config hash: `{}`", ctx.config_hash).ok();
    writeln!(md, "- seed: {}\n", ctx.cfg.run.seed).ok();
    let mut missing = Vec::new();

    // Generation quality.
    writeln!(md, "## Generation quality\n").ok();
    if done(Stage::EvalGen)? {
        let m: GenMetricsFile = read_json(&ctx.stage_dir(Stage::EvalGen).join(METRICS))?;
        writeln!(
            md,
            "Features from the `{}` extractor. FID is lower-is-better; IS is computed over {} splits.\n",
            m.extractor, m.is_splits
        )
        .ok();
        writeln!(md, "| Model | Disease | FID | IS mean | IS std | real | generated |").ok();
        writeln!(md, "|---|---|---:|---:|---:|---:|---:|").ok();
        for r in &m.reports {
            let s = &r.scores;
            writeln!(
                md,
                "| {} | {} | {} | {} | {} | {} | {} |",
                r.model,
                r.disease_class,
                f4(s.fid),
                f4(s.is_mean),
                f4(s.is_std),
                s.n_real,
                s.n_gen
            )
            .ok();
        }
        let fids: Vec<f64> = m.reports.iter().map(|r| r.scores.fid).collect();
        imaging::save_png(&render::bar_chart(&fids, 320, 160), &fig.join("fid.png"))?;
        writeln!(md, "\n![FID per model and disease](figures/fid.png)\n").ok();
    } else {
        missing.push(Stage::EvalGen);
        writeln!(md, "_Not evaluated in this run._\n").ok();
    }
    if done(Stage::TrainGan)? {
        writeln!(md, "Training curves, per-epoch means of discriminator loss, generator adversarial loss and reconstruction loss:\n").ok();
        for &model in &ctx.cfg.gan.models {
            for &disease in &ctx.cfg.gan.diseases {
                let h = load_history(&ctx.run_dir, model, disease)?;
                let series = vec![
                    epoch_means(&h, |b| b.adversarial_d),
                    epoch_means(&h, |b| b.adversarial_g),
                    epoch_means(&h, |b| b.recon),
                ];
                let name = format!("gan_{}.png", gan_key(model, disease));
                imaging::save_png(&render::line_plot(&series, 320, 160), &fig.join(&name))?;
                writeln!(md, "- {} / {}: ![losses](figures/{name})", model.display_name(), disease).ok();
            }
        }
        writeln!(md).ok();
    }

    // Classification.
    writeln!(md, "## Classification\n").ok();
    if done(Stage::TrainClf)? {
        let m: ClfMetricsFile = read_json(&ctx.stage_dir(Stage::TrainClf).join(METRICS))?;
        writeln!(
            md,
            "Trained on {} images ({}); evaluated on {} held-out images ({}).\n",
            m.train_set.n,
            m.train_set.provenance.join(", "),
            m.eval_set.n,
            m.eval_set.provenance.join(", ")
        )
        .ok();
        writeln!(md, "| Adapter | Accuracy | Precision | Recall | F1 | Log loss |").ok();
        writeln!(md, "|---|---:|---:|---:|---:|---:|").ok();
        let mut acc = Vec::new();
        for e in &m.entries {
            match (&e.report, &e.error) {
                (Some(r), _) => {
                    acc.push(r.accuracy);
                    writeln!(
                        md,
                        "| {} | {} | {} | {} | {} | {} |",
                        e.adapter,
                        f4(r.accuracy),
                        f4(r.precision),
                        f4(r.recall),
                        f4(r.f1),
                        f4(r.log_loss)
                    )
                    .ok();
                }
                (None, err) => {
                    writeln!(md, "| {} | failed: {} | | | | |", e.adapter, err.as_deref().unwrap_or("unknown error")).ok();
                }
            }
        }
        if let Some(r) = m.entries.iter().find_map(|e| e.report.as_ref()) {
            writeln!(md, "\nAveraging: {}.", r.averaging).ok();
        }
        imaging::save_png(&render::bar_chart(&acc, 320, 160), &fig.join("accuracy.png"))?;
        writeln!(md, "\n![Accuracy per adapter](figures/accuracy.png)\n").ok();
        if done(Stage::Explain)? {
            copy(&ctx.stage_dir(Stage::Explain).join(GRID), &fig.join("cam_grid.png"))?;
            writeln!(md, "Class activation maps (rows are images, columns are model and method):\n").ok();
            writeln!(md, "![CAM grid](figures/cam_grid.png)\n").ok();
        }
    } else {
        missing.push(Stage::TrainClf);
        writeln!(md, "_Not evaluated in this run._\n").ok();
    }

    // Segmentation.
    writeln!(md, "## Instance segmentation\n").ok();
    if done(Stage::EvalSeg)? {
        let dir = ctx.stage_dir(Stage::EvalSeg);
        let m: SegMetricsFile = read_json(&dir.join(METRICS))?;
        writeln!(
            md,
            "{} test images, {} interpolation. Dice: {}.\n",
            m.n_test_images, m.interpolation, m.dice_aggregation
        )
        .ok();
        writeln!(md, "| Model | mask AP | mask AP50 | mask AP75 | box AP | box AP50 | Dice | predictions |").ok();
        writeln!(md, "|---|---:|---:|---:|---:|---:|---:|---:|").ok();
        for r in &m.reports {
            writeln!(
                md,
                "| {} | {} | {} | {} | {} | {} | {} | {} |",
                r.model,
                f4(r.segm.ap),
                f4(r.segm.ap50),
                f4(r.segm.ap75),
                f4(r.bbox.ap),
                f4(r.bbox.ap50),
                f4(r.dice),
                r.n_pred
            )
            .ok();
        }
        if !m.missing_predictions.is_empty() {
            writeln!(
                md,
                "\nNo engine predictions were found for: {}. Their configs and launch scripts are under `eval_seg/engine/`.",
                m.missing_predictions.join(", ")
            )
            .ok();
        }
        let ap50: Vec<f64> = m.reports.iter().map(|r| r.segm.ap50).collect();
        imaging::save_png(&render::bar_chart(&ap50, 320, 160), &fig.join("seg_ap.png"))?;
        writeln!(md, "\n![Mask AP50 per model](figures/seg_ap.png)\n").ok();
        let vis = dir.join("visuals");
        if vis.is_dir() {
            let mut files: Vec<_> = fs::read_dir(&vis)
                .map_err(|e| Error::io(&vis, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .collect();
            files.sort();
            if !files.is_empty() {
                writeln!(md, "Ground truth (left) beside predictions:\n").ok();
            }
            for f in files {
                let name = format!("seg_{}", f.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default());
                copy(&f, &fig.join(&name))?;
                writeln!(md, "![{}](figures/{name})", stem_for(&name)).ok();
            }
            writeln!(md).ok();
        }
    } else {
        missing.push(Stage::EvalSeg);
        writeln!(md, "_Not evaluated in this run._\n").ok();
    }

    if missing.len() == Stage::EVALUATIONS.len() {
        return Err(Error::Dependency("no evaluation stage has completed".into()));
    }
    if !missing.is_empty() {
        let names: Vec<&str> = missing.iter().map(|s| s.as_str()).collect();
        writeln!(md, "---\nPartial report: {} not run.", names.join(", ")).ok();
    }
    imaging::write_atomic(&out.join(REPORT), md.as_bytes())
}
