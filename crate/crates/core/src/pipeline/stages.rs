//! One function per stage. Each reads its inputs from earlier stage
//! directories and writes only under its own.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use image::RgbImage;
use log::info;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::config::{ExtractorKind, PipelineConfig};
use super::record::Stage;
use crate::cam::{explain_grid, DifferentiableModel};
use crate::classify::{benchmark, BenchmarkEntry, ClassifierAdapter, ClfExample, LinearSoftmax, TinyCnn};
use crate::dataset::coco::resolve_image;
use crate::dataset::synth::write_corpus;
use crate::dataset::{
    augment, export_coco, import_vgg_annotations, load_manifest, load_sample, pair_images, preprocess, rasterize,
    split_dataset, DatasetManifest, FileError, Geometry, ImagePair, ImageSample, Label, Layout, MaskAnnotation,
    Provenance, SampleRecord, Split,
};
use crate::error::{Error, Result};
use crate::gan::{
    history_csv, train_cyclegan, train_pix2pix, translate, Checkpoint, Direction, GanModel, LossBreakdown,
};
use crate::gen_metrics::{
    color_stats, score_generation, ColorStatsExtractor, FeatureExtractor, GenerationReport, RandomProjectionExtractor,
};
use crate::imaging;
use crate::render;
use crate::seg::{
    emit_engine_config, evaluate, export_predictions, ground_truth, import_predictions_file, visualize,
    ColorThresholdSegmenter, InstanceRecord, SegEvalReport, DICE_AGGREGATION,
};

/// Everything a stage needs to locate its inputs and outputs.
#[derive(Clone, Debug)]
pub struct RunContext {
    pub cfg: PipelineConfig,
    pub run_id: String,
    pub config_hash: String,
    pub run_dir: PathBuf,
}

impl RunContext {
    pub fn stage_dir(&self, s: Stage) -> PathBuf {
        self.run_dir.join(s.as_str())
    }

    fn seed(&self) -> u64 {
        self.cfg.run.seed
    }
}

pub(crate) fn write_json<T: Serialize + ?Sized>(path: &Path, v: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(v)?;
    bytes.push(b'\n');
    imaging::write_atomic(path, &bytes)
}

pub(crate) fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_slice(&bytes)?)
}

/// File path for a sample id: extensions dropped, separators other than `/`
/// flattened, `.png` appended.
pub fn file_for(id: &str) -> String {
    let mut s = id.to_string();
    for ext in [".png", ".PNG", ".jpg", ".JPG", ".jpeg", ".JPEG"] {
        s = s.replace(ext, "");
    }
    format!("{}.png", s.replace(['#', '~', ' ', ':', '\\'], "__"))
}

/// Flat, filesystem-safe stem of a sample id.
pub fn stem_for(id: &str) -> String {
    file_for(id).trim_end_matches(".png").replace('/', "_")
}

// ---------------------------------------------------------------- preprocess

pub const MANIFEST: &str = "manifest.json";
pub const ANNOTATIONS: &str = "annotations.json";

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PreprocessSummary {
    pub counts: BTreeMap<String, usize>,
    pub annotations: usize,
    pub dropped_annotations: Vec<String>,
    pub annotation_warnings: Vec<String>,
    pub annotation_errors: Vec<String>,
    pub ingest_errors: Vec<FileError>,
}

fn scale_annotation(ann: &MaskAnnotation, id: &str, sx: f64, sy: f64) -> MaskAnnotation {
    let geometry = match &ann.geometry {
        Geometry::Polygon(p) => Geometry::Polygon(p.iter().map(|&(x, y)| (x * sx, y * sy)).collect()),
        Geometry::Bitmask(m) => Geometry::Bitmask(m.clone()),
    };
    MaskAnnotation { image_id: id.to_string(), label: ann.label, geometry }
}

pub fn run_preprocess(ctx: &RunContext) -> Result<()> {
    let cfg = &ctx.cfg;
    let dir = ctx.stage_dir(Stage::Preprocess);
    let (root, vgg) = match &cfg.dataset.synthetic {
        Some(spec) => {
            let corpus = dir.join("corpus");
            let s = write_corpus(&corpus, spec)?;
            (corpus, Some(s.annotation_path))
        }
        None => {
            let root = cfg.dataset.root.as_ref().ok_or_else(|| Error::Config("dataset.root is not set".into()))?;
            (cfg.resolve(root), cfg.dataset.annotations.as_ref().map(|a| cfg.resolve(a)))
        }
    };
    let raw = load_manifest(&root, Layout::LabelDirectories)?;
    let split = split_dataset(&raw, cfg.dataset.split_ratio, ctx.seed())?;
    let params = &cfg.preprocess.params;
    let (tw, th) = params.target_size;

    let mut records = Vec::new();
    let mut scale: HashMap<String, (f64, f64)> = HashMap::new();
    let save = |s: &ImageSample, records: &mut Vec<SampleRecord>| -> Result<()> {
        let rel = format!("images/{}", file_for(&s.id));
        imaging::save_png(&s.pixels, &dir.join(&rel))?;
        records.push(s.record(rel));
        Ok(())
    };
    for rec in &split.samples {
        let p = preprocess(&load_sample(rec)?, params)?;
        scale.insert(rec.id.clone(), (f64::from(tw) / f64::from(rec.width), f64::from(th) / f64::from(rec.height)));
        save(&p, &mut records)?;
        if p.split == Split::Train {
            for a in augment(&p, &cfg.preprocess.augment, ctx.seed()) {
                save(&a, &mut records)?;
            }
        }
    }
    let mut manifest = DatasetManifest::new(records)?;
    manifest.split_seed = Some(ctx.seed());
    manifest.errors = raw
        .errors
        .iter()
        .map(|e| FileError { path: e.path.strip_prefix(&root).unwrap_or(&e.path).to_path_buf(), message: e.message.clone() })
        .collect();
    manifest.save(&dir.join(MANIFEST))?;

    let mut summary = PreprocessSummary {
        counts: BTreeMap::new(),
        annotations: 0,
        dropped_annotations: Vec::new(),
        annotation_warnings: Vec::new(),
        annotation_errors: Vec::new(),
        ingest_errors: manifest.errors.clone(),
    };
    let mut anns = Vec::new();
    if let Some(vgg) = vgg {
        let imp = import_vgg_annotations(&read_json(&vgg)?)?;
        summary.annotation_warnings = imp.warnings;
        summary.annotation_errors = imp.errors;
        for a in &imp.annotations {
            let Some(rec) = resolve_image(&raw, &a.image_id) else {
                summary.dropped_annotations.push(format!("`{}`: no such image", a.image_id));
                continue;
            };
            let (sx, sy) = scale[&rec.id];
            let scaled = scale_annotation(a, &rec.id, sx, sy);
            match rasterize(&scaled, (th as usize, tw as usize)) {
                Ok(_) => anns.push(scaled),
                Err(e) => summary.dropped_annotations.push(format!("`{}`: {e}", a.image_id)),
            }
        }
    }
    summary.annotations = anns.len();
    write_json(&dir.join(ANNOTATIONS), &anns)?;
    for s in &manifest.samples {
        let key = format!("{}/{}/{}", s.label, split_name(s.split), provenance_name(s.provenance));
        *summary.counts.entry(key).or_default() += 1;
    }
    write_json(&dir.join("summary.json"), &summary)?;
    info!("preprocess: {} samples, {} annotations", manifest.samples.len(), anns.len());
    Ok(())
}

fn split_name(s: Split) -> &'static str {
    match s {
        Split::Train => "train",
        Split::Test => "test",
        Split::Unassigned => "unassigned",
    }
}

fn provenance_name(p: Provenance) -> &'static str {
    match p {
        Provenance::Raw => "raw",
        Provenance::Preprocessed => "preprocessed",
        Provenance::Augmented => "augmented",
        Provenance::Generated => "generated",
    }
}

/// The preprocessed dataset with image paths resolved.
struct Dataset {
    manifest: DatasetManifest,
    base: PathBuf,
}

impl Dataset {
    fn open(ctx: &RunContext) -> Result<Self> {
        let base = ctx.stage_dir(Stage::Preprocess);
        Ok(Dataset { manifest: DatasetManifest::load(&base.join(MANIFEST))?, base })
    }

    fn select(&self, split: Split, label: Option<Label>, roots_only: bool) -> Vec<&SampleRecord> {
        self.manifest
            .samples
            .iter()
            .filter(|s| s.split == split && label.is_none_or(|l| s.label == l))
            .filter(|s| !roots_only || s.provenance == Provenance::Preprocessed)
            .collect()
    }

    fn sample(&self, rec: &SampleRecord) -> Result<ImageSample> {
        let mut r = rec.clone();
        r.path = self.base.join(&rec.path);
        load_sample(&r)
    }

    fn image(&self, rec: &SampleRecord) -> Result<RgbImage> {
        imaging::load_rgb(&self.base.join(&rec.path))
    }

    fn annotations(&self) -> Result<Vec<MaskAnnotation>> {
        read_json(&self.base.join(ANNOTATIONS))
    }
}

// ---------------------------------------------------------------- pair

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PairSet {
    pub k: usize,
    pub pairs: Vec<ImagePair>,
}

pub fn run_pair(ctx: &RunContext) -> Result<()> {
    let ds = Dataset::open(ctx)?;
    let healthy = ds.select(Split::Train, Some(Label::Healthy), false);
    let healthy: Vec<SampleRecord> = healthy.into_iter().cloned().collect();
    let mut pairs = Vec::new();
    for &disease in &ctx.cfg.gan.diseases {
        let diseased: Vec<SampleRecord> = ds.select(Split::Train, Some(disease), false).into_iter().cloned().collect();
        if diseased.is_empty() {
            return Err(Error::invalid(format!("no training images of class {disease} to pair")));
        }
        pairs.extend(pair_images(&healthy, &diseased, ctx.cfg.dataset.pair_k, ctx.seed())?);
    }
    write_json(&ctx.stage_dir(Stage::Pair).join("pairs.json"), &PairSet { k: ctx.cfg.dataset.pair_k, pairs })
}

// ---------------------------------------------------------------- train_gan

pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const HISTORY: &str = "history.json";

pub fn gan_key(model: GanModel, disease: Label) -> String {
    format!("{model}_{disease}")
}

pub fn run_train_gan(ctx: &RunContext) -> Result<()> {
    let ds = Dataset::open(ctx)?;
    let pairs: PairSet = read_json(&ctx.stage_dir(Stage::Pair).join("pairs.json"))?;
    let by_id: HashMap<&str, &SampleRecord> = ds.manifest.samples.iter().map(|s| (s.id.as_str(), s)).collect();
    let mut cache: HashMap<String, RgbImage> = HashMap::new();
    let mut load = |id: &str| -> Result<RgbImage> {
        if let Some(i) = cache.get(id) {
            return Ok(i.clone());
        }
        let rec = by_id.get(id).ok_or_else(|| Error::invalid(format!("pair refers to unknown sample `{id}`")))?;
        let img = ds.image(rec)?;
        cache.insert(id.to_string(), img.clone());
        Ok(img)
    };
    let healthy_ids: Vec<String> = ds.select(Split::Train, Some(Label::Healthy), false).iter().map(|s| s.id.clone()).collect();
    for &model in &ctx.cfg.gan.models {
        for &disease in &ctx.cfg.gan.diseases {
            let cfg = ctx.cfg.gan.train_config(model, ctx.seed());
            let out = ctx.stage_dir(Stage::TrainGan).join(gan_key(model, disease));
            let ckdir = out.join("checkpoints");
            info!("train_gan: {model} for {disease}");
            let (ck, hist) = match model {
                GanModel::Pix2pix => {
                    let p: Vec<(RgbImage, RgbImage)> = pairs
                        .pairs
                        .iter()
                        .filter(|p| p.disease == disease)
                        .map(|p| Ok((load(&p.input)?, load(&p.target)?)))
                        .collect::<Result<_>>()?;
                    train_pix2pix(&p, disease, &cfg, Some(&ckdir))?
                }
                GanModel::Cyclegan => {
                    let h: Vec<RgbImage> = healthy_ids.iter().map(|id| load(id)).collect::<Result<_>>()?;
                    let d: Vec<RgbImage> = ds
                        .select(Split::Train, Some(disease), false)
                        .iter()
                        .map(|s| load(&s.id))
                        .collect::<Result<_>>()?;
                    train_cyclegan(&h, &d, disease, &cfg, Some(&ckdir))?
                }
            };
            ck.save(&out.join(FINAL_CHECKPOINT))?;
            write_json(&out.join(HISTORY), &hist)?;
            imaging::write_atomic(&out.join("history.csv"), history_csv(&hist).as_bytes())?;
        }
    }
    Ok(())
}

pub fn load_history(run_dir: &Path, model: GanModel, disease: Label) -> Result<Vec<LossBreakdown>> {
    read_json(&run_dir.join(Stage::TrainGan.as_str()).join(gan_key(model, disease)).join(HISTORY))
}

// ---------------------------------------------------------------- generate

pub const GENERATED: &str = "generated.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratedImage {
    pub id: String,
    pub model: GanModel,
    pub disease: Label,
    pub source_id: String,
    /// Relative to the generate stage directory.
    pub path: String,
    /// Negative mean squared z-score of the image's colour statistics
    /// against the real images of its class; higher looks more real.
    pub realism: f64,
    pub selected: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Selection {
    pub method: String,
    pub top_n: usize,
    pub selected: BTreeMap<String, Vec<String>>,
}

/// Per-dimension mean and spread of colour statistics.
fn color_profile(images: &[RgbImage]) -> (Vec<f64>, Vec<f64>) {
    let feats: Vec<_> = images.iter().map(color_stats).collect();
    let n = feats.len().max(1) as f64;
    let d = feats.first().map_or(0, |f| f.len());
    let mean: Vec<f64> = (0..d).map(|k| feats.iter().map(|f| f[k]).sum::<f64>() / n).collect();
    let sd = (0..d)
        .map(|k| (feats.iter().map(|f| (f[k] - mean[k]).powi(2)).sum::<f64>() / n).sqrt().max(1e-3))
        .collect();
    (mean, sd)
}

fn realism(img: &RgbImage, (mean, sd): &(Vec<f64>, Vec<f64>)) -> f64 {
    let f = color_stats(img);
    -f.iter().zip(mean.iter().zip(sd)).map(|(x, (m, s))| ((x - m) / s).powi(2)).sum::<f64>() / f.len() as f64
}

pub fn run_generate(ctx: &RunContext) -> Result<()> {
    let ds = Dataset::open(ctx)?;
    let dir = ctx.stage_dir(Stage::Generate);
    let mut sources: Vec<ImageSample> =
        ds.select(Split::Train, Some(Label::Healthy), true).iter().map(|r| ds.sample(r)).collect::<Result<_>>()?;
    sources.sort_by(|a, b| a.id.cmp(&b.id));
    let top_n = ctx.cfg.generate.select_top;
    let mut all = Vec::new();
    let mut selection = Selection {
        method: "top_n_by_color_realism (scripted stand-in for manual curation)".into(),
        top_n,
        selected: BTreeMap::new(),
    };
    for &model in &ctx.cfg.gan.models {
        for &disease in &ctx.cfg.gan.diseases {
            let key = gan_key(model, disease);
            let ck = Checkpoint::load(&ctx.stage_dir(Stage::TrainGan).join(&key).join(FINAL_CHECKPOINT))?;
            let real: Vec<RgbImage> =
                ds.select(Split::Train, Some(disease), true).iter().map(|r| ds.image(r)).collect::<Result<_>>()?;
            let profile = color_profile(&real);
            let mut batch = Vec::new();
            for s in &sources {
                let g = translate(s, &ck, Direction::HealthyToDisease)?;
                let path = format!("{key}/{}", file_for(&s.id));
                imaging::save_png(&g.pixels, &dir.join(&path))?;
                batch.push(GeneratedImage {
                    id: g.id.clone(),
                    model,
                    disease,
                    source_id: s.id.clone(),
                    path,
                    realism: realism(&g.pixels, &profile),
                    selected: false,
                });
            }
            let mut order: Vec<usize> = (0..batch.len()).collect();
            order.sort_by(|&a, &b| batch[b].realism.total_cmp(&batch[a].realism).then(batch[a].id.cmp(&batch[b].id)));
            let mut chosen = Vec::new();
            for &i in order.iter().take(top_n) {
                batch[i].selected = true;
                chosen.push(batch[i].id.clone());
            }
            chosen.sort();
            selection.selected.insert(key, chosen);
            all.extend(batch);
        }
    }
    write_json(&dir.join(GENERATED), &all)?;
    write_json(&dir.join("selection.json"), &selection)
}

fn generated(ctx: &RunContext) -> Result<Vec<GeneratedImage>> {
    read_json(&ctx.stage_dir(Stage::Generate).join(GENERATED))
}

fn generated_image(ctx: &RunContext, g: &GeneratedImage) -> Result<RgbImage> {
    imaging::load_rgb(&ctx.stage_dir(Stage::Generate).join(&g.path))
}

// ---------------------------------------------------------------- eval_gen

pub const METRICS: &str = "metrics.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenMetricsFile {
    pub extractor: String,
    pub is_splits: usize,
    pub reports: Vec<GenerationReport>,
}

pub fn run_eval_gen(ctx: &RunContext) -> Result<()> {
    let ds = Dataset::open(ctx)?;
    let gm = &ctx.cfg.gen_metrics;
    let extractor: Box<dyn FeatureExtractor> = match gm.extractor {
        ExtractorKind::ColorStats => {
            let labelled: Vec<(RgbImage, Label)> = ds
                .select(Split::Train, None, true)
                .iter()
                .map(|r| Ok((ds.image(r)?, r.label)))
                .collect::<Result<_>>()?;
            Box::new(ColorStatsExtractor::fit(&labelled)?)
        }
        ExtractorKind::RandomProjection => {
            Box::new(RandomProjectionExtractor::new(ctx.seed(), gm.projection_dim, Label::ALL.len())?)
        }
    };
    let gen = generated(ctx)?;
    let mut reports = Vec::new();
    for &model in &ctx.cfg.gan.models {
        for &disease in &ctx.cfg.gan.diseases {
            let real: Vec<RgbImage> = [Split::Train, Split::Test]
                .into_iter()
                .flat_map(|sp| ds.select(sp, Some(disease), true))
                .map(|r| ds.image(r))
                .collect::<Result<_>>()?;
            let fake: Vec<RgbImage> = gen
                .iter()
                .filter(|g| g.model == model && g.disease == disease)
                .map(|g| generated_image(ctx, g))
                .collect::<Result<_>>()?;
            let scores = score_generation(&real, &fake, extractor.as_ref(), gm.splits)?;
            reports.push(GenerationReport {
                model: model.display_name().into(),
                disease_class: disease.as_str().into(),
                scores,
            });
        }
    }
    write_json(
        &ctx.stage_dir(Stage::EvalGen).join(METRICS),
        &GenMetricsFile { extractor: extractor.name(), is_splits: gm.splits, reports },
    )
}

// ---------------------------------------------------------------- train_clf

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SetDescription {
    pub split: String,
    pub provenance: Vec<String>,
    pub n: usize,
    pub class_counts: BTreeMap<String, usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClfMetricsFile {
    pub classes: Vec<String>,
    pub train_set: SetDescription,
    pub eval_set: SetDescription,
    pub entries: Vec<BenchmarkEntry>,
}

fn describe(split: &str, items: &[(Label, Provenance)]) -> SetDescription {
    let mut class_counts = BTreeMap::new();
    let mut prov: Vec<String> = Vec::new();
    for (l, p) in items {
        *class_counts.entry(l.as_str().to_string()).or_default() += 1;
        let p = provenance_name(*p).to_string();
        if !prov.contains(&p) {
            prov.push(p);
        }
    }
    prov.sort();
    SetDescription { split: split.into(), provenance: prov, n: items.len(), class_counts }
}

pub fn class_index(l: Label) -> usize {
    Label::ALL.iter().position(|x| *x == l).expect("label in ALL")
}

pub fn model_path(ctx: &RunContext, adapter: &str) -> PathBuf {
    ctx.stage_dir(Stage::TrainClf).join("models").join(format!("{adapter}.json"))
}

pub fn run_train_clf(ctx: &RunContext) -> Result<()> {
    let ds = Dataset::open(ctx)?;
    let dir = ctx.stage_dir(Stage::TrainClf);
    let mut train = Vec::new();
    let mut train_meta = Vec::new();
    for r in ds.select(Split::Train, None, false) {
        train.push(ClfExample { image: ds.image(r)?, class: class_index(r.label) });
        train_meta.push((r.label, r.provenance));
    }
    if ctx.cfg.classify.include_generated {
        for g in generated(ctx)?.iter().filter(|g| g.selected) {
            train.push(ClfExample { image: generated_image(ctx, g)?, class: class_index(g.disease) });
            train_meta.push((g.disease, Provenance::Generated));
        }
    }
    let mut test = Vec::new();
    let mut test_meta = Vec::new();
    for r in ds.select(Split::Test, None, true) {
        test.push(ClfExample { image: ds.image(r)?, class: class_index(r.label) });
        test_meta.push((r.label, r.provenance));
    }
    let classes: Vec<String> = Label::ALL.iter().map(|l| l.as_str().to_string()).collect();
    let mut tcfg = ctx.cfg.classify.train.clone();
    tcfg.seed = ctx.seed();
    let mut adapters: Vec<Box<dyn ClassifierAdapter>> = ctx
        .cfg
        .classify
        .adapters
        .iter()
        .map(|name| -> Box<dyn ClassifierAdapter> {
            if name == "linear_softmax" {
                Box::new(LinearSoftmax::new(name))
            } else {
                Box::new(TinyCnn::for_backbone(name, ctx.seed()))
            }
        })
        .collect();
    let entries = benchmark(&mut adapters, &train, &test, &classes, &tcfg, ctx.cfg.classify.averaging);
    for (a, e) in adapters.iter().zip(&entries) {
        let Some(report) = &e.report else { continue };
        a.persist(&model_path(ctx, a.name()))?;
        let cm = &report.confusion;
        imaging::write_atomic(&dir.join("confusion").join(format!("{}.csv", a.name())), cm.to_csv().as_bytes())?;
        imaging::save_png(&cm.render(24), &dir.join("confusion").join(format!("{}.png", a.name())))?;
    }
    write_json(
        &dir.join(METRICS),
        &ClfMetricsFile {
            classes,
            train_set: describe("train", &train_meta),
            eval_set: describe("test", &test_meta),
            entries,
        },
    )
}

// ---------------------------------------------------------------- explain

pub const GRID: &str = "grid.png";

pub fn run_explain(ctx: &RunContext) -> Result<()> {
    let ds = Dataset::open(ctx)?;
    let dir = ctx.stage_dir(Stage::Explain);
    let models: Vec<TinyCnn> = ctx
        .cfg
        .classify
        .adapters
        .iter()
        .map(|a| model_path(ctx, a))
        .filter(|p| p.is_file())
        .map(|p| TinyCnn::load(&p))
        .filter(|m| !matches!(m, Err(Error::Json(_))))
        .collect::<Result<_>>()?;
    if models.is_empty() {
        return Err(Error::invalid("no trained convolutional classifier to explain"));
    }
    let mut picks: Vec<&SampleRecord> =
        ds.select(Split::Test, None, true).into_iter().filter(|r| r.label.is_diseased()).collect();
    picks.sort_by(|a, b| a.id.cmp(&b.id));
    // Alternate classes so both diseases appear.
    let mut ordered = Vec::new();
    for l in Label::DISEASES {
        for (i, r) in picks.iter().filter(|r| r.label == l).enumerate() {
            ordered.push((i, class_index(l), *r));
        }
    }
    ordered.sort_by_key(|(i, c, _)| (*i, *c));
    let images: Vec<(String, RgbImage)> = ordered
        .iter()
        .take(ctx.cfg.cam.images)
        .map(|(_, _, r)| Ok((r.id.clone(), ds.image(r)?)))
        .collect::<Result<_>>()?;
    let refs: Vec<&dyn DifferentiableModel> = models.iter().map(|m| m as &dyn DifferentiableModel).collect();
    let cam = &ctx.cfg.cam;
    let (grid, manifest, tiles) =
        explain_grid(&refs, &cam.methods, &images, cam.alpha, cam.colormap, &cam.config, cam.tile_size)?;
    imaging::save_png(&grid, &dir.join(GRID))?;
    write_json(&dir.join("grid.json"), &manifest)?;
    for (cell, tile) in manifest.cells.iter().zip(&tiles) {
        if cell.error.is_some() {
            continue;
        }
        let name = format!("{}__{}__{}.png", stem_for(&cell.image), cell.model, cell.method.as_str());
        imaging::save_png(tile, &dir.join("overlays").join(name))?;
    }
    Ok(())
}

// ---------------------------------------------------------------- eval_seg

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegMetricsFile {
    pub interpolation: String,
    pub dice_aggregation: String,
    pub n_test_images: usize,
    pub reports: Vec<SegEvalReport>,
    /// Backbones whose engine results were not found.
    pub missing_predictions: Vec<String>,
    pub import_diagnostics: BTreeMap<String, Vec<String>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EngineSummary {
    pub backbone: String,
    pub n_train: usize,
    pub iterations: usize,
    pub config: String,
    pub script: String,
    pub results: String,
}

pub fn run_eval_seg(ctx: &RunContext) -> Result<()> {
    let ds = Dataset::open(ctx)?;
    let dir = ctx.stage_dir(Stage::EvalSeg);
    let seg = &ctx.cfg.segment;
    let anns = ds.annotations()?;
    let mut docs = Vec::new();
    for split in [Split::Train, Split::Test] {
        let recs: Vec<SampleRecord> = ds.select(split, None, true).into_iter().cloned().collect();
        let ids: HashSet<&str> = recs.iter().map(|r| r.id.as_str()).collect();
        let mine: Vec<MaskAnnotation> = anns.iter().filter(|a| ids.contains(a.image_id.as_str())).cloned().collect();
        let doc = export_coco(&DatasetManifest::new(recs)?, &mine)?;
        write_json(&dir.join("coco").join(format!("{}.json", split_name(split))), &doc)?;
        docs.push(doc);
    }
    let test = docs.pop().expect("test split");

    let abs = |p: PathBuf| -> PathBuf { std::path::absolute(&p).unwrap_or(p) };
    let train_json = abs(dir.join("coco/train.json"));
    let test_json = abs(dir.join("coco/test.json"));
    let images_dir = abs(ds.base.join("images"));
    let engine_dir = dir.join("engine");
    let mut engines = Vec::new();
    for &b in &seg.backbones {
        let art = emit_engine_config(&seg.engine_config(b, &train_json, &test_json, &images_dir), &engine_dir)?;
        let r = |p: &Path| p.strip_prefix(&engine_dir).unwrap_or(p).to_string_lossy().into_owned();
        engines.push(EngineSummary {
            backbone: b.as_str().into(),
            n_train: art.n_train,
            iterations: art.iterations,
            config: r(&art.config_path),
            script: r(&art.script_path),
            results: r(&art.results_path),
        });
    }
    write_json(&engine_dir.join("engines.json"), &engines)?;

    let gts = ground_truth(&test, None)?;
    let mut reports = Vec::new();
    let mut missing = Vec::new();
    let mut diagnostics = BTreeMap::new();
    let mut shown: Vec<(String, Vec<InstanceRecord>)> = Vec::new();
    if let Some(pred_dir) = &seg.predictions {
        let pred_dir = ctx.cfg.resolve(pred_dir);
        for &b in &seg.backbones {
            let p = pred_dir.join(format!("{}-output", b.as_str())).join("coco_instances_results.json");
            if !p.is_file() {
                missing.push(b.as_str().to_string());
                continue;
            }
            let imp = import_predictions_file(&p, &test.images)?;
            let mut d = imp.errors.clone();
            d.extend(imp.warnings.iter().cloned());
            if !d.is_empty() {
                diagnostics.insert(b.as_str().to_string(), d);
            }
            reports.push(evaluate(b.as_str(), &imp.records, &gts, seg.interpolation)?);
            shown.push((b.as_str().to_string(), imp.records));
        }
    } else {
        missing.extend(seg.backbones.iter().map(|b| b.as_str().to_string()));
    }

    let test_recs: Vec<&SampleRecord> = ds.select(Split::Test, None, true);
    if seg.baseline {
        let segmenter = ColorThresholdSegmenter::default();
        let mut preds = Vec::new();
        for r in &test_recs {
            preds.extend(segmenter.segment(&r.id, &ds.image(r)?)?);
        }
        reports.push(evaluate("color_threshold", &preds, &gts, seg.interpolation)?);
        write_json(&dir.join("predictions").join("color_threshold.json"), &export_predictions(&preds, &test.images)?)?;
        shown.push(("color_threshold".into(), preds));
    }

    // Ground truth next to each model's predictions for a few diseased images.
    let mut diseased: Vec<&&SampleRecord> = test_recs.iter().filter(|r| r.label.is_diseased()).collect();
    diseased.sort_by(|a, b| a.id.cmp(&b.id));
    for r in diseased.into_iter().take(seg.visuals) {
        let img = ds.image(r)?;
        let on = |v: &[InstanceRecord]| -> Vec<InstanceRecord> { v.iter().filter(|i| i.image_id == r.id).cloned().collect() };
        let mut tiles = vec![visualize(&img, &on(&gts))];
        tiles.extend(shown.iter().map(|(_, p)| visualize(&img, &on(p))));
        let cols = tiles.len();
        imaging::save_png(&render::tile_grid(&tiles, cols, 2), &dir.join("visuals").join(format!("{}.png", stem_for(&r.id))))?;
    }

    write_json(
        &dir.join(METRICS),
        &SegMetricsFile {
            interpolation: serde_json::to_value(seg.interpolation)?.as_str().unwrap_or_default().to_string(),
            dice_aggregation: DICE_AGGREGATION.into(),
            n_test_images: test.images.len(),
            reports,
            missing_predictions: missing,
            import_diagnostics: diagnostics,
        },
    )
}
