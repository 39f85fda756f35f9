//! Trainable classifiers behind a common adapter interface.

use std::path::Path;

use image::RgbImage;
use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gen_metrics::{color_stats, ClassProbMatrix, FeatureExtractor};
use crate::imaging;
use crate::nn::{softmax_rows, Adam, Conv2d, Graph, Init, Linear, ParamStore, Tensor, Var};
use crate::seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClfTrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Only `"adam"` is implemented.
    pub optimizer: String,
    pub seed: u64,
    /// Images are resized to this square side before the network.
    pub image_size: u32,
}

impl Default for ClfTrainConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-2, batch_size: 10, epochs: 30, optimizer: "adam".into(), seed: 0, image_size: 32 }
    }
}

impl ClfTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.image_size < 8 {
            return Err(Error::Config("batch_size and epochs must be positive, image_size at least 8".into()));
        }
        if self.optimizer != "adam" {
            return Err(Error::Config(format!("unsupported optimizer `{}`", self.optimizer)));
        }
        Ok(())
    }
}

/// One labelled training or evaluation image.
#[derive(Clone, Debug)]
pub struct ClfExample {
    pub image: RgbImage,
    pub class: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub epochs: usize,
    pub steps: u64,
    /// Mean cross-entropy per epoch.
    pub loss_history: Vec<f64>,
}

pub trait ClassifierAdapter {
    fn name(&self) -> &str;
    fn train(&mut self, data: &[ClfExample], num_classes: usize, cfg: &ClfTrainConfig) -> Result<TrainSummary>;
    fn predict_proba(&self, images: &[RgbImage]) -> Result<ClassProbMatrix>;

    /// Writes trained weights to `path`. Returns `false` for adapters that
    /// keep no persistent state.
    fn persist(&self, _path: &Path) -> Result<bool> {
        Ok(false)
    }
}

fn check_data(data: &[ClfExample], num_classes: usize) -> Result<()> {
    if data.is_empty() {
        return Err(Error::invalid("no training examples"));
    }
    if num_classes < 2 {
        return Err(Error::invalid("need at least two classes"));
    }
    if let Some(e) = data.iter().find(|e| e.class >= num_classes) {
        return Err(Error::invalid(format!("class index {} outside {num_classes} classes", e.class)));
    }
    Ok(())
}

/// Minibatch loop shared by the adapters. `step` returns the batch loss.
fn run_epochs(
    n: usize,
    cfg: &ClfTrainConfig,
    stream: &str,
    mut step: impl FnMut(&[usize]) -> Result<f64>,
) -> Result<TrainSummary> {
    let mut summary = TrainSummary::default();
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut seed::stream(cfg.seed, &format!("{stream}/epoch{epoch}")));
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let loss = step(batch)?;
            if !loss.is_finite() {
                return Err(Error::Numerical(format!("{stream}: loss diverged at epoch {epoch}")));
            }
            total += loss * batch.len() as f64;
            summary.steps += 1;
        }
        summary.loss_history.push(total / n as f64);
        summary.epochs += 1;
    }
    Ok(summary)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TinyCnnSpec {
    pub widths: Vec<usize>,
}

impl TinyCnnSpec {
    /// Stand-in widths for the named pretrained backbones.
    pub fn for_backbone(name: &str) -> Self {
        let widths = match name.to_ascii_lowercase().replace(['-', '_', ' '], "").as_str() {
            "densenet169" => vec![8, 16, 16],
            "resnet152v2" => vec![12, 24],
            "inceptionresnetv2" => vec![6, 12, 24],
            _ => vec![8, 16],
        };
        Self { widths }
    }
}

/// Stride-2 conv stages with ReLU, global average pooling and a linear head.
#[derive(Clone, Debug)]
pub struct TinyCnn {
    name: String,
    spec: TinyCnnSpec,
    image_size: u32,
    store: ParamStore,
    convs: Vec<Conv2d>,
    head: Option<Linear>,
    num_classes: usize,
    seed: u64,
}

/// Forward intermediates of [`TinyCnn`].
pub struct CnnTrace {
    pub stages: Vec<Var>,
    pub logits: Var,
}

#[derive(Serialize, Deserialize)]
struct TinyCnnFile {
    name: String,
    spec: TinyCnnSpec,
    image_size: u32,
    num_classes: usize,
    seed: u64,
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    values: Vec<Vec<f64>>,
}

impl TinyCnn {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn new(name: &str, spec: TinyCnnSpec, seed: u64) -> Self {
        Self {
            name: name.into(),
            spec,
            image_size: 32,
            store: ParamStore::new(),
            convs: Vec::new(),
            head: None,
            num_classes: 0,
            seed,
        }
    }

    pub fn for_backbone(name: &str, seed: u64) -> Self {
        Self::new(name, TinyCnnSpec::for_backbone(name), seed)
    }

    fn build(&mut self, num_classes: usize, image_size: u32) {
        let mut rng = seed::stream(self.seed, &format!("clf/{}/init", self.name));
        let mut store = ParamStore::new();
        let mut convs = Vec::new();
        let mut c_in = 3;
        for (i, &w) in self.spec.widths.iter().enumerate() {
            convs.push(Conv2d::new(&mut store, &format!("stage{i}"), c_in, w, 3, 2, 1, true, Init::He, &mut rng));
            c_in = w;
        }
        let head = Linear::new(&mut store, "head", c_in, num_classes, Init::Normal(0.1), &mut rng);
        self.store = store;
        self.convs = convs;
        self.head = Some(head);
        self.num_classes = num_classes;
        self.image_size = image_size;
    }

    pub fn is_trained(&self) -> bool {
        self.head.is_some()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn image_size(&self) -> u32 {
        self.image_size
    }

    pub fn layer_names(&self) -> Vec<String> {
        (0..self.convs.len()).map(|i| format!("stage{i}")).collect()
    }

    /// Network input for one image, `[1, 3, s, s]` in `[-1, 1]`.
    pub fn input_tensor(&self, img: &RgbImage) -> Tensor {
        imaging::to_signed_tensor(&imaging::resize(img, self.image_size, self.image_size))
    }

    pub fn forward_graph(&self, g: &mut Graph, x: Var, frozen: bool) -> Result<CnnTrace> {
        let head = self.head.as_ref().ok_or_else(|| Error::invalid(format!("classifier `{}` is untrained", self.name)))?;
        let mut h = x;
        let mut stages = Vec::new();
        for c in &self.convs {
            h = c.forward(g, &self.store, h, frozen)?;
            h = g.relu(h);
            stages.push(h);
        }
        let pooled = g.global_avg_pool(h)?;
        let logits = head.forward(g, &self.store, pooled, frozen)?;
        Ok(CnnTrace { stages, logits })
    }

    pub fn stage_index(&self, layer: &str) -> Result<usize> {
        self.layer_names()
            .iter()
            .position(|l| l == layer)
            .ok_or_else(|| Error::invalid(format!("unknown layer `{layer}`; have {:?}", self.layer_names())))
    }

    /// Logits computed from the output of stage `stage` onwards.
    pub fn logits_from_stage(&self, stage: usize, acts: Tensor) -> Result<Vec<f64>> {
        let head = self.head.as_ref().ok_or_else(|| Error::invalid(format!("classifier `{}` is untrained", self.name)))?;
        let mut g = Graph::new();
        let mut h = g.constant(acts);
        for c in &self.convs[stage + 1..] {
            h = c.forward(&mut g, &self.store, h, true)?;
            h = g.relu(h);
        }
        let pooled = g.global_avg_pool(h)?;
        let logits = head.forward(&mut g, &self.store, pooled, true)?;
        Ok(g.value(logits).data().to_vec())
    }

    fn batch_tensor(&self, images: &[&RgbImage]) -> Result<Tensor> {
        let ts: Vec<Tensor> = images.iter().map(|i| self.input_tensor(i)).collect();
        Tensor::stack(&ts.iter().collect::<Vec<_>>())
    }

    /// Logits `[n, C]` row-major.
    pub fn logits(&self, images: &[RgbImage]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(images.len() * self.num_classes);
        for chunk in images.chunks(16) {
            let mut g = Graph::new();
            let x = g.constant(self.batch_tensor(&chunk.iter().collect::<Vec<_>>())?);
            let t = self.forward_graph(&mut g, x, true)?;
            out.extend_from_slice(g.value(t.logits).data());
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = TinyCnnFile {
            name: self.name.clone(),
            spec: self.spec.clone(),
            image_size: self.image_size,
            num_classes: self.num_classes,
            seed: self.seed,
            names: self.store.names().to_vec(),
            shapes: self.store.values().iter().map(|t| t.shape().to_vec()).collect(),
            values: self.store.values().iter().map(|t| t.data().to_vec()).collect(),
        };
        imaging::write_atomic(path, &serde_json::to_vec(&file)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let f: TinyCnnFile = serde_json::from_slice(&bytes)?;
        let mut m = Self::new(&f.name, f.spec, f.seed);
        m.build(f.num_classes, f.image_size);
        let values = f
            .shapes
            .iter()
            .zip(f.values)
            .map(|(s, v)| Tensor::from_vec(s, v))
            .collect::<Result<Vec<_>>>()?;
        m.store.load(&f.names, values)?;
        Ok(m)
    }
}

impl ClassifierAdapter for TinyCnn {
    fn name(&self) -> &str {
        &self.name
    }

    fn persist(&self, path: &Path) -> Result<bool> {
        self.save(path).map(|_| true)
    }

    fn train(&mut self, data: &[ClfExample], num_classes: usize, cfg: &ClfTrainConfig) -> Result<TrainSummary> {
        cfg.validate()?;
        check_data(data, num_classes)?;
        self.build(num_classes, cfg.image_size);
        let inputs: Vec<Tensor> = data.iter().map(|e| self.input_tensor(&e.image)).collect();
        let mut opt = Adam::new(&self.store, cfg.learning_rate, 0.9, 0.999);
        let stream = format!("clf/{}", self.name);
        run_epochs(data.len(), cfg, &stream, |batch| {
            let mut g = Graph::new();
            let x = g.constant(Tensor::stack(&batch.iter().map(|&i| &inputs[i]).collect::<Vec<_>>())?);
            let t = self.forward_graph(&mut g, x, false)?;
            let targets: Vec<usize> = batch.iter().map(|&i| data[i].class).collect();
            let loss = g.softmax_cross_entropy(t.logits, &targets)?;
            let grads = g.backward(loss)?;
            let gr = grads.for_store(&self.store);
            opt.step(&mut self.store, &gr);
            Ok(g.value(loss).item())
        })
    }

    fn predict_proba(&self, images: &[RgbImage]) -> Result<ClassProbMatrix> {
        if images.is_empty() {
            return Err(Error::invalid("no images to classify"));
        }
        let logits = self.logits(images)?;
        ClassProbMatrix::new(images.len(), self.num_classes, softmax_rows(&logits, self.num_classes))
    }
}

impl FeatureExtractor for TinyCnn {
    fn name(&self) -> String {
        format!("cnn-{}", self.name)
    }

    fn dim(&self) -> usize {
        self.spec.widths.last().copied().unwrap_or(0)
    }

    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn embed(&self, images: &[RgbImage]) -> Result<DMatrix<f64>> {
        if images.is_empty() {
            return Err(Error::invalid("no images to embed"));
        }
        let d = FeatureExtractor::dim(self);
        let mut rows = Vec::with_capacity(images.len() * d);
        for chunk in images.chunks(16) {
            let mut g = Graph::new();
            let x = g.constant(self.batch_tensor(&chunk.iter().collect::<Vec<_>>())?);
            let t = self.forward_graph(&mut g, x, true)?;
            let last = *t.stages.last().ok_or_else(|| Error::invalid("network has no stages"))?;
            let pooled = g.global_avg_pool(last)?;
            rows.extend_from_slice(g.value(pooled).data());
        }
        Ok(DMatrix::from_row_slice(images.len(), d, &rows))
    }

    fn classify(&self, images: &[RgbImage]) -> Result<ClassProbMatrix> {
        self.predict_proba(images)
    }
}

/// Softmax regression on standardised colour statistics.
#[derive(Clone, Debug)]
pub struct LinearSoftmax {
    name: String,
    mean: Vec<f64>,
    scale: Vec<f64>,
    store: ParamStore,
    layer: Option<Linear>,
    num_classes: usize,
}

impl LinearSoftmax {
    pub fn new(name: &str) -> Self {
        Self { name: name.into(), mean: Vec::new(), scale: Vec::new(), store: ParamStore::new(), layer: None, num_classes: 0 }
    }

    fn features(&self, img: &RgbImage) -> Vec<f64> {
        color_stats(img).iter().zip(self.mean.iter().zip(&self.scale)).map(|(f, (m, s))| (f - m) / s).collect()
    }

    fn features_tensor(&self, imgs: &[&RgbImage]) -> Result<Tensor> {
        let d = self.mean.len();
        Tensor::from_vec(&[imgs.len(), d], imgs.iter().flat_map(|i| self.features(i)).collect())
    }
}

impl ClassifierAdapter for LinearSoftmax {
    fn name(&self) -> &str {
        &self.name
    }

    fn train(&mut self, data: &[ClfExample], num_classes: usize, cfg: &ClfTrainConfig) -> Result<TrainSummary> {
        cfg.validate()?;
        check_data(data, num_classes)?;
        let raw: Vec<_> = data.iter().map(|e| color_stats(&e.image)).collect();
        let d = raw[0].len();
        let n = raw.len() as f64;
        self.mean = (0..d).map(|k| raw.iter().map(|r| r[k]).sum::<f64>() / n).collect();
        self.scale = (0..d)
            .map(|k| (raw.iter().map(|r| (r[k] - self.mean[k]).powi(2)).sum::<f64>() / n).sqrt().max(1e-3))
            .collect();
        let mut store = ParamStore::new();
        let mut rng = seed::stream(cfg.seed, &format!("clf/{}/init", self.name));
        self.layer = Some(Linear::new(&mut store, "linear", d, num_classes, Init::Zeros, &mut rng));
        self.store = store;
        self.num_classes = num_classes;
        let feats: Vec<Tensor> = data.iter().map(|e| self.features_tensor(&[&e.image])).collect::<Result<_>>()?;
        let mut opt = Adam::new(&self.store, cfg.learning_rate, 0.9, 0.999);
        let layer = self.layer.clone().expect("built above");
        let stream = format!("clf/{}", self.name);
        run_epochs(data.len(), cfg, &stream, |batch| {
            let mut g = Graph::new();
            let rows: Vec<f64> = batch.iter().flat_map(|&i| feats[i].data().to_vec()).collect();
            let x = g.constant(Tensor::from_vec(&[batch.len(), d], rows)?);
            let logits = layer.forward(&mut g, &self.store, x, false)?;
            let targets: Vec<usize> = batch.iter().map(|&i| data[i].class).collect();
            let loss = g.softmax_cross_entropy(logits, &targets)?;
            let grads = g.backward(loss)?;
            let gr = grads.for_store(&self.store);
            opt.step(&mut self.store, &gr);
            Ok(g.value(loss).item())
        })
    }

    fn predict_proba(&self, images: &[RgbImage]) -> Result<ClassProbMatrix> {
        let layer = self.layer.as_ref().ok_or_else(|| Error::invalid(format!("classifier `{}` is untrained", self.name)))?;
        if images.is_empty() {
            return Err(Error::invalid("no images to classify"));
        }
        let mut g = Graph::new();
        let x = g.constant(self.features_tensor(&images.iter().collect::<Vec<_>>())?);
        let logits = layer.forward(&mut g, &self.store, x, true)?;
        ClassProbMatrix::new(images.len(), self.num_classes, softmax_rows(g.value(logits).data(), self.num_classes))
    }
}
