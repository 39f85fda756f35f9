//! Pluggable embedders used for FID features and IS class probabilities.

use image::RgbImage;
use nalgebra::DMatrix;
use rand_distr::{Distribution, StandardNormal};

use super::inception::ClassProbMatrix;
use crate::dataset::Label;
use crate::error::{Error, Result};
use crate::imaging;
use crate::nn::softmax_rows;
use crate::seed;

/// Deterministic image embedder with a matching classifier head.
pub trait FeatureExtractor {
    fn name(&self) -> String;
    fn dim(&self) -> usize;
    fn num_classes(&self) -> usize;
    /// `n × dim` feature matrix.
    fn embed(&self, images: &[RgbImage]) -> Result<DMatrix<f64>>;
    fn classify(&self, images: &[RgbImage]) -> Result<ClassProbMatrix>;
}

fn check_nonempty(images: &[RgbImage]) -> Result<()> {
    if images.is_empty() {
        return Err(Error::invalid("no images to embed"));
    }
    if images.iter().any(|i| i.width() == 0 || i.height() == 0) {
        return Err(Error::invalid("zero-sized image"));
    }
    Ok(())
}

fn probs_from_logits(logits: &[f64], n: usize, c: usize) -> Result<ClassProbMatrix> {
    ClassProbMatrix::new(n, c, softmax_rows(logits, c))
}

/// Fixed Gaussian projection of a downsampled image.
#[derive(Clone, Debug)]
pub struct RandomProjectionExtractor {
    side: u32,
    dim: usize,
    classes: usize,
    embed_w: DMatrix<f64>,
    class_w: DMatrix<f64>,
}

impl RandomProjectionExtractor {
    pub fn new(seed: u64, dim: usize, classes: usize) -> Result<Self> {
        if dim == 0 || classes == 0 {
            return Err(Error::invalid("projection needs positive dim and class count"));
        }
        let side = 16u32;
        let input = (3 * side * side) as usize;
        let scale = 1.0 / (input as f64).sqrt();
        let mut rng = seed::stream(seed, "extractor/random-projection");
        let mut draw = |r: usize| {
            DMatrix::from_fn(r, input, |_, _| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * scale
            })
        };
        let embed_w = draw(dim);
        let class_w = draw(classes) * 4.0;
        Ok(Self { side, dim, classes, embed_w, class_w })
    }

    fn inputs(&self, images: &[RgbImage]) -> Result<DMatrix<f64>> {
        check_nonempty(images)?;
        let cols: Vec<f64> = images
            .iter()
            .flat_map(|img| imaging::to_signed_tensor(&imaging::resize(img, self.side, self.side)).into_data())
            .collect();
        let input = (3 * self.side * self.side) as usize;
        Ok(DMatrix::from_column_slice(input, images.len(), &cols))
    }
}

impl FeatureExtractor for RandomProjectionExtractor {
    fn name(&self) -> String {
        format!("random-projection-{}", self.dim)
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn num_classes(&self) -> usize {
        self.classes
    }

    fn embed(&self, images: &[RgbImage]) -> Result<DMatrix<f64>> {
        Ok((&self.embed_w * self.inputs(images)?).transpose())
    }

    fn classify(&self, images: &[RgbImage]) -> Result<ClassProbMatrix> {
        let logits = (&self.class_w * self.inputs(images)?).transpose();
        let row_major: Vec<f64> = logits.row_iter().flat_map(|r| r.iter().copied().collect::<Vec<_>>()).collect();
        probs_from_logits(&row_major, images.len(), self.classes)
    }
}

pub const COLOR_STATS_DIM: usize = 13;

/// Hand-crafted colour and darkness statistics of a tuber image.
pub fn color_stats(img: &RgbImage) -> [f64; COLOR_STATS_DIM] {
    let small = imaging::resize(img, 64, 64);
    let n = (64 * 64) as f64;
    let mut sum = [0.0; 3];
    let mut sq = [0.0; 3];
    let (mut luma_sum, mut dark, mut lesion) = (0.0, 0.0, 0.0);
    let mut grid = [0.0; 4];
    for (x, y, p) in small.enumerate_pixels() {
        let c = p.0.map(|v| f64::from(v) / 255.0);
        for k in 0..3 {
            sum[k] += c[k];
            sq[k] += c[k] * c[k];
        }
        let l = 0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2];
        luma_sum += l;
        if l < 0.25 {
            dark += 1.0;
        }
        if c[0] > c[1] + 0.08 && l < 0.6 {
            lesion += 1.0;
        }
        grid[(usize::from(y >= 32) << 1) | usize::from(x >= 32)] += l;
    }
    let mut f = [0.0; COLOR_STATS_DIM];
    for k in 0..3 {
        let m = sum[k] / n;
        f[k] = m;
        f[3 + k] = (sq[k] / n - m * m).max(0.0).sqrt();
    }
    f[6] = luma_sum / n;
    f[7] = dark / n;
    f[8] = lesion / n;
    for (k, g) in grid.iter().enumerate() {
        f[9 + k] = g / (n / 4.0);
    }
    f
}

/// Colour statistics with a nearest-prototype classifier fitted on
/// labelled images.
#[derive(Clone, Debug)]
pub struct ColorStatsExtractor {
    labels: Vec<Label>,
    prototypes: Vec<[f64; COLOR_STATS_DIM]>,
    scale: [f64; COLOR_STATS_DIM],
    temperature: f64,
}

impl ColorStatsExtractor {
    pub fn fit(samples: &[(RgbImage, Label)]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::invalid("cannot fit prototypes on zero samples"));
        }
        let feats: Vec<([f64; COLOR_STATS_DIM], Label)> = samples.iter().map(|(i, l)| (color_stats(i), *l)).collect();
        let labels: Vec<Label> = Label::ALL.iter().copied().filter(|l| feats.iter().any(|(_, x)| x == l)).collect();
        let prototypes = labels
            .iter()
            .map(|l| {
                let rows: Vec<_> = feats.iter().filter(|(_, x)| x == l).map(|(f, _)| f).collect();
                let mut p = [0.0; COLOR_STATS_DIM];
                for r in &rows {
                    for k in 0..COLOR_STATS_DIM {
                        p[k] += r[k] / rows.len() as f64;
                    }
                }
                p
            })
            .collect();
        let n = feats.len() as f64;
        let mut scale = [0.0; COLOR_STATS_DIM];
        for k in 0..COLOR_STATS_DIM {
            let m = feats.iter().map(|(f, _)| f[k]).sum::<f64>() / n;
            let v = feats.iter().map(|(f, _)| (f[k] - m).powi(2)).sum::<f64>() / n;
            scale[k] = v.sqrt().max(1e-3);
        }
        Ok(Self { labels, prototypes, scale, temperature: 1.0 })
    }

    pub fn labels(&self) -> &[Label] {
        &self.labels
    }
}

impl FeatureExtractor for ColorStatsExtractor {
    fn name(&self) -> String {
        "color-stats".into()
    }

    fn dim(&self) -> usize {
        COLOR_STATS_DIM
    }

    fn num_classes(&self) -> usize {
        self.labels.len()
    }

    fn embed(&self, images: &[RgbImage]) -> Result<DMatrix<f64>> {
        check_nonempty(images)?;
        let rows: Vec<f64> = images.iter().flat_map(color_stats).collect();
        Ok(DMatrix::from_row_slice(images.len(), COLOR_STATS_DIM, &rows))
    }

    fn classify(&self, images: &[RgbImage]) -> Result<ClassProbMatrix> {
        check_nonempty(images)?;
        let mut logits = Vec::with_capacity(images.len() * self.labels.len());
        for img in images {
            let f = color_stats(img);
            for p in &self.prototypes {
                let d2: f64 = (0..COLOR_STATS_DIM).map(|k| ((f[k] - p[k]) / self.scale[k]).powi(2)).sum();
                logits.push(-d2 / self.temperature);
            }
        }
        probs_from_logits(&logits, images.len(), self.labels.len())
    }
}
