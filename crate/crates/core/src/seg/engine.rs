//! Configuration and launch script for an external Mask R-CNN trainer.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::CocoDataset;
use crate::error::{Error, Result};
use crate::imaging::write_atomic;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backbone {
    Resnet50,
    Resnet101,
    Resnext101,
}

impl Backbone {
    pub const ALL: [Backbone; 3] = [Backbone::Resnet50, Backbone::Resnet101, Backbone::Resnext101];

    pub fn as_str(self) -> &'static str {
        match self {
            Backbone::Resnet50 => "resnet50",
            Backbone::Resnet101 => "resnet101",
            Backbone::Resnext101 => "resnext101",
        }
    }

    /// Model-zoo base configuration the emitted file is merged onto.
    pub fn base_config(self) -> &'static str {
        match self {
            Backbone::Resnet50 => "COCO-InstanceSegmentation/mask_rcnn_R_50_FPN_3x.yaml",
            Backbone::Resnet101 => "COCO-InstanceSegmentation/mask_rcnn_R_101_FPN_3x.yaml",
            Backbone::Resnext101 => "COCO-InstanceSegmentation/mask_rcnn_X_101_32x8d_FPN_3x.yaml",
        }
    }
}

impl std::fmt::Display for Backbone {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Backbone {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let key = s.to_ascii_lowercase().replace(['-', '_', ' '], "");
        Backbone::ALL.into_iter().find(|b| b.as_str() == key).ok_or_else(|| {
            let valid: Vec<_> = Backbone::ALL.iter().map(|b| b.as_str()).collect();
            Error::Config(format!("unknown backbone `{s}`; valid: {}", valid.join(", ")))
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegEngineConfig {
    pub backbone: Backbone,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub optimizer: String,
    pub train_json: PathBuf,
    pub train_images: PathBuf,
    pub test_json: PathBuf,
    pub test_images: PathBuf,
}

impl SegEngineConfig {
    pub fn new(backbone: Backbone, train_json: PathBuf, train_images: PathBuf, test_json: PathBuf, test_images: PathBuf) -> Self {
        Self {
            backbone,
            learning_rate: 1e-3,
            batch_size: 8,
            epochs: 25,
            optimizer: "sgd".into(),
            train_json,
            train_images,
            test_json,
            test_images,
        }
    }

    /// `epochs × ⌈n_train / batch⌉`.
    pub fn iterations(&self, n_train: usize) -> usize {
        self.epochs * n_train.div_ceil(self.batch_size.max(1))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("engine learning rate, batch size and epochs must be positive".into()));
        }
        if self.optimizer != "sgd" {
            return Err(Error::Config(format!("engine optimizer must be sgd, got `{}`", self.optimizer)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EngineArtifacts {
    pub backbone: Backbone,
    pub config_path: PathBuf,
    pub script_path: PathBuf,
    pub n_train: usize,
    pub iterations: usize,
    /// Where the launcher writes COCO-format detections.
    pub results_path: PathBuf,
}

fn read_coco(path: &Path) -> Result<CocoDataset> {
    if !path.is_file() {
        return Err(Error::Dependency(format!("COCO export {} does not exist", path.display())));
    }
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_slice(&bytes)?)
}

/// Writes `<backbone>.yaml` and `train_<backbone>.sh` under `out_dir`.
pub fn emit_engine_config(cfg: &SegEngineConfig, out_dir: &Path) -> Result<EngineArtifacts> {
    cfg.validate()?;
    let train = read_coco(&cfg.train_json)?;
    read_coco(&cfg.test_json)?;
    let n_train = train.images.len();
    let iterations = cfg.iterations(n_train);
    let name = cfg.backbone.as_str();
    let output = out_dir.join(format!("{name}-output"));
    let yaml = format!(
        "# Merged onto {base}\n\
         MODEL:\n  ROI_HEADS:\n    NUM_CLASSES: {classes}\n\
         DATASETS:\n  TRAIN: (\"potato_train\",)\n  TEST: (\"potato_test\",)\n\
         DATALOADER:\n  NUM_WORKERS: 2\n\
         SOLVER:\n  BASE_LR: {lr}\n  IMS_PER_BATCH: {batch}\n  MAX_ITER: {iterations}\n  MOMENTUM: 0.9\n  STEPS: []\n\
         SEED: 0\n\
         OUTPUT_DIR: \"{output}\"\n",
        base = cfg.backbone.base_config(),
        classes = train.categories.len(),
        lr = cfg.learning_rate,
        batch = cfg.batch_size,
        output = output.display(),
    );
    let config_path = out_dir.join(format!("{name}.yaml"));
    write_atomic(&config_path, yaml.as_bytes())?;
    let script = format!(
        "#!/usr/bin/env bash\n\
         # Fine-tunes Mask R-CNN ({name}) and writes COCO detections for the test split.\n\
         set -euo pipefail\n\
         exec \"${{PYTHON:-python3}}\" - <<'PY'\n\
         from detectron2 import model_zoo\n\
         from detectron2.config import get_cfg\n\
         from detectron2.data import build_detection_test_loader\n\
         from detectron2.data.datasets import register_coco_instances\n\
         from detectron2.engine import DefaultTrainer\n\
         from detectron2.evaluation import COCOEvaluator, inference_on_dataset\n\
         register_coco_instances(\"potato_train\", {{}}, {train_json:?}, {train_images:?})\n\
         register_coco_instances(\"potato_test\", {{}}, {test_json:?}, {test_images:?})\n\
         cfg = get_cfg()\n\
         cfg.merge_from_file(model_zoo.get_config_file({base:?}))\n\
         cfg.merge_from_file({config:?})\n\
         cfg.MODEL.WEIGHTS = model_zoo.get_checkpoint_url({base:?})\n\
         trainer = DefaultTrainer(cfg)\n\
         trainer.resume_or_load(resume=False)\n\
         trainer.train()\n\
         evaluator = COCOEvaluator(\"potato_test\", output_dir=cfg.OUTPUT_DIR)\n\
         inference_on_dataset(trainer.model, build_detection_test_loader(cfg, \"potato_test\"), evaluator)\n\
         PY\n",
        train_json = cfg.train_json.display().to_string(),
        train_images = cfg.train_images.display().to_string(),
        test_json = cfg.test_json.display().to_string(),
        test_images = cfg.test_images.display().to_string(),
        base = cfg.backbone.base_config(),
        config = config_path.display().to_string(),
    );
    let script_path = out_dir.join(format!("train_{name}.sh"));
    write_atomic(&script_path, script.as_bytes())?;
    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        fs::set_permissions(&script_path, fs::Permissions::from_mode(0o755)).map_err(|e| Error::io(&script_path, e))?;
    }
    Ok(EngineArtifacts {
        backbone: cfg.backbone,
        config_path,
        script_path,
        n_train,
        iterations,
        results_path: output.join("coco_instances_results.json"),
    })
}
