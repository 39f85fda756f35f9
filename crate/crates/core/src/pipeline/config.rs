//! TOML run configuration. Relative paths resolve against the directory of
//! the config file.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cam::{CamConfig, CamMethod};
use crate::classify::{Averaging, ClfTrainConfig, BACKBONES};
use crate::dataset::synth::SynthSpec;
use crate::dataset::{AugmentOp, Label, PreprocessConfig};
use crate::error::{Error, Result};
use crate::gan::{AdversarialMode, GanModel, GanTrainConfig};
use crate::render::Colormap;
use crate::seed::sha256_hex;
use crate::seg::{ApInterpolation, Backbone, SegEngineConfig};

/// Environment variable that overrides `run.output_root`.
pub const RUN_ROOT_ENV: &str = "PIPELINE_RUN_ROOT";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub seed: u64,
    /// Run directories live under `<output_root>/runs/`. Not part of the
    /// config hash.
    pub output_root: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    /// Directory with one sub-directory per label.
    pub root: Option<PathBuf>,
    /// VGG Image Annotator export for `root`.
    pub annotations: Option<PathBuf>,
    /// Renders a synthetic corpus into the run instead of reading `root`.
    pub synthetic: Option<SynthSpec>,
    pub split_ratio: f64,
    /// Healthy partners per diseased image.
    pub pair_k: usize,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self { root: None, annotations: None, synthetic: None, split_ratio: 0.8, pair_k: 1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessSection {
    /// Applied to training-split images only.
    pub augment: Vec<AugmentOp>,
    #[serde(flatten)]
    pub params: PreprocessConfig,
}

impl Default for PreprocessSection {
    fn default() -> Self {
        Self { augment: AugmentOp::default_set(), params: PreprocessConfig::default() }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GanPreset {
    /// Small networks that train in seconds on a CPU.
    #[default]
    Desk,
    /// Reference architecture and hyper-parameters.
    Reference,
}

/// Per-model hyper-parameter overrides on top of the preset.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GanOverrides {
    pub learning_rate: Option<f64>,
    pub batch_size: Option<usize>,
    pub epochs: Option<usize>,
    pub lambda: Option<f64>,
    pub adversarial: Option<AdversarialMode>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GanSection {
    pub models: Vec<GanModel>,
    pub diseases: Vec<Label>,
    pub preset: GanPreset,
    pub pix2pix: GanOverrides,
    pub cyclegan: GanOverrides,
}

impl Default for GanSection {
    fn default() -> Self {
        Self {
            models: vec![GanModel::Pix2pix, GanModel::Cyclegan],
            diseases: Label::DISEASES.to_vec(),
            preset: GanPreset::Desk,
            pix2pix: GanOverrides::default(),
            cyclegan: GanOverrides::default(),
        }
    }
}

impl GanSection {
    pub fn train_config(&self, model: GanModel, seed: u64) -> GanTrainConfig {
        let mut cfg = match self.preset {
            GanPreset::Desk => GanTrainConfig::desk(model),
            GanPreset::Reference => GanTrainConfig::for_model(model),
        };
        let o = match model {
            GanModel::Pix2pix => &self.pix2pix,
            GanModel::Cyclegan => &self.cyclegan,
        };
        cfg.learning_rate = o.learning_rate.unwrap_or(cfg.learning_rate);
        cfg.batch_size = o.batch_size.unwrap_or(cfg.batch_size);
        cfg.epochs = o.epochs.unwrap_or(cfg.epochs);
        cfg.lambda = o.lambda.unwrap_or(cfg.lambda);
        cfg.adversarial = o.adversarial.unwrap_or(cfg.adversarial);
        cfg.seed = seed;
        cfg
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateSection {
    /// Generated images kept per (model, disease) by the realism ranking.
    pub select_top: usize,
}

impl Default for GenerateSection {
    fn default() -> Self {
        Self { select_top: 8 }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractorKind {
    /// Colour statistics with a nearest-prototype classifier fitted on the
    /// real training images.
    #[default]
    ColorStats,
    /// Fixed Gaussian projection of downsampled pixels.
    RandomProjection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenMetricsSection {
    pub extractor: ExtractorKind,
    pub splits: usize,
    pub projection_dim: usize,
}

impl Default for GenMetricsSection {
    fn default() -> Self {
        Self { extractor: ExtractorKind::ColorStats, splits: 2, projection_dim: 16 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifySection {
    /// Backbone names map to small CNN stand-ins; `linear_softmax` is a
    /// colour-statistics baseline.
    pub adapters: Vec<String>,
    /// Adds the selected generated images to the training split.
    pub include_generated: bool,
    pub averaging: Averaging,
    /// `seed` is taken from the run section.
    #[serde(flatten)]
    pub train: ClfTrainConfig,
}

impl Default for ClassifySection {
    fn default() -> Self {
        Self {
            adapters: BACKBONES.iter().map(|s| s.to_string()).collect(),
            include_generated: true,
            averaging: Averaging::Macro,
            train: ClfTrainConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CamSection {
    pub methods: Vec<CamMethod>,
    /// Number of diseased test images to explain.
    pub images: usize,
    pub alpha: f64,
    pub colormap: Colormap,
    pub tile_size: u32,
    #[serde(flatten)]
    pub config: CamConfig,
}

impl Default for CamSection {
    fn default() -> Self {
        Self {
            methods: CamMethod::ALL.to_vec(),
            images: 2,
            alpha: 0.5,
            colormap: Colormap::Jet,
            tile_size: 64,
            config: CamConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegmentSection {
    pub backbones: Vec<Backbone>,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Directory holding `<backbone>-output/coco_instances_results.json`
    /// from an external engine run.
    pub predictions: Option<PathBuf>,
    /// Also evaluates the built-in colour-threshold segmenter.
    pub baseline: bool,
    pub interpolation: ApInterpolation,
    /// Test images rendered with their predicted instances.
    pub visuals: usize,
}

impl Default for SegmentSection {
    fn default() -> Self {
        Self {
            backbones: Backbone::ALL.to_vec(),
            learning_rate: 1e-3,
            batch_size: 8,
            epochs: 25,
            predictions: None,
            baseline: true,
            interpolation: ApInterpolation::Coco101,
            visuals: 4,
        }
    }
}

impl SegmentSection {
    pub fn engine_config(&self, backbone: Backbone, train_json: &Path, test_json: &Path, images: &Path) -> SegEngineConfig {
        let mut c = SegEngineConfig::new(backbone, train_json.into(), images.into(), test_json.into(), images.into());
        c.learning_rate = self.learning_rate;
        c.batch_size = self.batch_size;
        c.epochs = self.epochs;
        c
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub run: RunSection,
    pub dataset: DatasetSection,
    pub preprocess: PreprocessSection,
    pub gan: GanSection,
    pub generate: GenerateSection,
    pub gen_metrics: GenMetricsSection,
    pub classify: ClassifySection,
    pub cam: CamSection,
    pub segment: SegmentSection,
    /// Directory relative paths resolve against. Set by [`load`].
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads and validates a config file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(cfg)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// `PIPELINE_RUN_ROOT`, then `run.output_root`, then the config directory.
    pub fn output_root(&self) -> PathBuf {
        match std::env::var_os(RUN_ROOT_ENV) {
            Some(v) if !v.is_empty() => PathBuf::from(v),
            _ => match &self.run.output_root {
                Some(p) => self.resolve(p),
                None => self.base_dir.clone(),
            },
        }
    }

    /// SHA-256 over the canonical JSON form, excluding the output root.
    pub fn hash(&self) -> Result<String> {
        let mut c = self.clone();
        c.run.output_root = None;
        Ok(sha256_hex(&serde_json::to_vec(&serde_json::to_value(&c)?)?))
    }

    pub fn run_id(&self) -> Result<String> {
        Ok(format!("run-{}", &self.hash()?[..12]))
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.dataset;
        match (&d.root, &d.synthetic) {
            (Some(_), Some(_)) => return Err(Error::Config("set either dataset.root or dataset.synthetic, not both".into())),
            (None, None) => return Err(Error::Config("set dataset.root or dataset.synthetic".into())),
            (Some(root), None) => {
                let r = self.resolve(root);
                if !r.is_dir() {
                    return Err(Error::Config(format!("dataset.root {} is not a directory", r.display())));
                }
            }
            (None, Some(_)) => {
                if d.annotations.is_some() {
                    return Err(Error::Config("dataset.annotations cannot be combined with a synthetic corpus".into()));
                }
            }
        }
        if let Some(a) = &d.annotations {
            let a = self.resolve(a);
            if !a.is_file() {
                return Err(Error::Config(format!("dataset.annotations {} does not exist", a.display())));
            }
        }
        if !(d.split_ratio > 0.0 && d.split_ratio < 1.0) {
            return Err(Error::Config(format!("dataset.split_ratio must lie in (0, 1), got {}", d.split_ratio)));
        }
        if d.pair_k == 0 {
            return Err(Error::Config("dataset.pair_k must be at least 1".into()));
        }
        self.preprocess.params.validate()?;
        if self.gan.models.is_empty() || self.gan.diseases.is_empty() {
            return Err(Error::Config("gan.models and gan.diseases must be non-empty".into()));
        }
        if let Some(l) = self.gan.diseases.iter().find(|l| !l.is_diseased()) {
            return Err(Error::Config(format!("gan.diseases lists `{l}`, which is not a disease")));
        }
        for m in &self.gan.models {
            self.gan.train_config(*m, self.run.seed).validate()?;
        }
        if self.generate.select_top == 0 {
            return Err(Error::Config("generate.select_top must be at least 1".into()));
        }
        if self.gen_metrics.splits == 0 || self.gen_metrics.projection_dim == 0 {
            return Err(Error::Config("gen_metrics.splits and projection_dim must be positive".into()));
        }
        if self.classify.adapters.is_empty() {
            return Err(Error::Config("classify.adapters must be non-empty".into()));
        }
        self.classify.train.validate()?;
        if !(0.0..=1.0).contains(&self.cam.alpha) || self.cam.tile_size < 8 || self.cam.methods.is_empty() {
            return Err(Error::Config("cam.alpha must lie in [0, 1], cam.tile_size be at least 8 and cam.methods non-empty".into()));
        }
        for b in &self.segment.backbones {
            self.segment.engine_config(*b, Path::new(""), Path::new(""), Path::new("")).validate()?;
        }
        if let Some(p) = &self.segment.predictions {
            let p = self.resolve(p);
            if !p.is_dir() {
                return Err(Error::Config(format!("segment.predictions {} is not a directory", p.display())));
            }
        }
        Ok(())
    }
}

/// Configuration used by the bundled smoke test: a small synthetic corpus
/// and desk-scale models.
pub fn smoke_config_toml() -> &'static str {
    r#"[run]
seed = 7

[dataset.synthetic]
healthy = 16
black_scurf = 10
common_scab = 10
size = 96
seed = 3

[preprocess]
target_size = [64, 64]
augment = [{ op = "hflip" }]

[gan]
models = ["pix2pix", "cyclegan"]
diseases = ["black_scurf", "common_scab"]
preset = "desk"

[gan.cyclegan]
epochs = 3

[generate]
select_top = 6

[classify]
adapters = ["densenet169", "resnet152v2", "inception_resnet_v2", "linear_softmax"]
epochs = 12

[cam]
images = 2
tile_size = 48
scorecam_budget = 16

[segment]
visuals = 2
"#
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn smoke_config_parses_and_hash_ignores_output_root() {
        let mut a = PipelineConfig::from_toml(smoke_config_toml()).unwrap();
        a.validate().unwrap();
        let h = a.hash().unwrap();
        a.run.output_root = Some("/elsewhere".into());
        assert_eq!(a.hash().unwrap(), h);
        a.run.seed += 1;
        assert_ne!(a.hash().unwrap(), h);
        assert!(a.run_id().unwrap().starts_with("run-") && a.run_id().unwrap().len() == 16);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        assert!(PipelineConfig::from_toml("[run]\nsede = 1\n").is_err());
        let c = PipelineConfig::from_toml("[dataset]\nsplit_ratio = 1.5\n[dataset.synthetic]\n").unwrap();
        assert!(c.validate().is_err());
        assert!(PipelineConfig::default().validate().is_err());
    }
}
