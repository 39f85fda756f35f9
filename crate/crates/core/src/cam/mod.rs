//! Class activation maps: GradCAM, GradCAM++ and ScoreCAM.
//!
//! ScoreCAM follows the masked-forward formulation: each activation map is
//! min-max scaled, upsampled, used as a soft mask on the input, and weighted
//! by the softmax of the resulting class-score gains. No gradients are used.

mod cnn;
pub mod grid;

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::classify::argmax;
use crate::error::{Error, Result};
use crate::imaging::Map2;
use crate::render::Colormap;

pub use grid::{explain_grid, render_cell, GridCell, GridManifest};

/// `K × h × w` feature maps or their gradients, row-major per map.
#[derive(Clone, Debug, PartialEq)]
pub struct Activations {
    pub k: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Activations {
    pub fn new(k: usize, h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != k * h * w {
            return Err(Error::shape(format!("{} values for {k}x{h}x{w} activations", data.len())));
        }
        Ok(Self { k, h, w, data })
    }

    pub fn map(&self, k: usize) -> &[f64] {
        &self.data[k * self.h * self.w..(k + 1) * self.h * self.w]
    }

    fn map2(&self, k: usize) -> Map2 {
        Map2 { height: self.h, width: self.w, data: self.map(k).to_vec() }
    }
}

/// What an explainer needs from a classifier.
pub trait DifferentiableModel {
    fn name(&self) -> String;
    fn num_classes(&self) -> usize;
    /// Last spatial stage.
    fn default_layer(&self) -> String;
    /// Class scores (pre-softmax).
    fn forward(&self, image: &RgbImage) -> Result<Vec<f64>>;
    fn activations(&self, image: &RgbImage, layer: &str) -> Result<Activations>;
    /// `∂y^c / ∂A^k`, same shape as [`Self::activations`].
    fn grad_of_score(&self, image: &RgbImage, layer: &str, class: usize) -> Result<Activations>;
    /// Class scores of the image multiplied pixelwise by `mask` (image-sized, in `[0, 1]`).
    fn masked_forward(&self, image: &RgbImage, mask: &Map2) -> Result<Vec<f64>>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CamMethod {
    #[serde(rename = "gradcam")]
    GradCam,
    #[serde(rename = "gradcampp")]
    GradCamPlusPlus,
    #[serde(rename = "scorecam")]
    ScoreCam,
}

impl CamMethod {
    pub const ALL: [CamMethod; 3] = [CamMethod::GradCam, CamMethod::GradCamPlusPlus, CamMethod::ScoreCam];

    pub fn as_str(self) -> &'static str {
        match self {
            CamMethod::GradCam => "gradcam",
            CamMethod::GradCamPlusPlus => "gradcampp",
            CamMethod::ScoreCam => "scorecam",
        }
    }
}

impl std::str::FromStr for CamMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace("++", "pp").replace(['-', '_'], "").as_str() {
            "gradcam" => Ok(CamMethod::GradCam),
            "gradcampp" | "gradcamplusplus" => Ok(CamMethod::GradCamPlusPlus),
            "scorecam" => Ok(CamMethod::ScoreCam),
            _ => Err(Error::invalid(format!("unknown CAM method `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Upsample {
    #[default]
    Bilinear,
    Nearest,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// Divide by the global max.
    #[default]
    Max,
    /// Subtract the min, then divide by the range.
    MinMax,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CamConfig {
    pub upsample: Upsample,
    pub normalization: Normalization,
    /// Maximum number of maps ScoreCAM forwards, chosen by activation energy.
    pub scorecam_budget: usize,
    /// Weights GradCAM++ maps by the summed squared positive gradients
    /// instead of the alpha formula.
    pub gradcampp_literal: bool,
}

impl Default for CamConfig {
    fn default() -> Self {
        Self { upsample: Upsample::Bilinear, normalization: Normalization::Max, scorecam_budget: 64, gradcampp_literal: false }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    pub values: Map2,
    pub layer: String,
    pub class: usize,
    pub method: CamMethod,
    /// Per-map weights before the weighted sum.
    pub weights: Vec<f64>,
}

fn upsample(m: &Map2, h: usize, w: usize, mode: Upsample) -> Map2 {
    match mode {
        Upsample::Bilinear => m.resize_bilinear(h, w),
        Upsample::Nearest => m.resize_nearest(h, w),
    }
}

fn normalize(mut m: Map2, mode: Normalization) -> Map2 {
    let (lo, hi) = (m.min(), m.max());
    match mode {
        Normalization::Max if hi > 0.0 => m.data.iter_mut().for_each(|v| *v /= hi),
        Normalization::MinMax if hi > lo => m.data.iter_mut().for_each(|v| *v = (*v - lo) / (hi - lo)),
        Normalization::MinMax => m.data.iter_mut().for_each(|v| *v = 0.0),
        Normalization::Max => {}
    }
    m
}

/// `ReLU(Σ_k w_k A^k)`, upsampled to the image and normalised.
fn combine(acts: &Activations, weights: &[f64], image: &RgbImage, cfg: &CamConfig) -> Map2 {
    let mut m = Map2::zeros(acts.h, acts.w);
    for (k, wk) in weights.iter().enumerate() {
        if *wk != 0.0 {
            for (o, a) in m.data.iter_mut().zip(acts.map(k)) {
                *o += wk * a;
            }
        }
    }
    m.data.iter_mut().for_each(|v| *v = v.max(0.0));
    let up = upsample(&m, image.height() as usize, image.width() as usize, cfg.upsample);
    let mut out = normalize(up, cfg.normalization);
    // Bilinear interpolation of non-negative values stays non-negative, but
    // guard against -0.0 and rounding.
    out.data.iter_mut().for_each(|v| *v = v.max(0.0));
    out
}

fn spatial_inputs(model: &dyn DifferentiableModel, image: &RgbImage, layer: &str, class: usize) -> Result<(Activations, Activations)> {
    if class >= model.num_classes() {
        return Err(Error::invalid(format!("class {class} outside {} classes", model.num_classes())));
    }
    let a = model.activations(image, layer)?;
    if a.h == 1 && a.w == 1 && a.k == model.num_classes() {
        return Err(Error::invalid(format!("layer `{layer}` is not spatial; choose a convolutional layer")));
    }
    let g = model.grad_of_score(image, layer, class)?;
    if (g.k, g.h, g.w) != (a.k, a.h, a.w) {
        return Err(Error::shape("gradient and activation shapes differ"));
    }
    Ok((a, g))
}

/// `w_k` is the spatial mean of the gradient of the class score.
pub fn gradcam(model: &dyn DifferentiableModel, image: &RgbImage, class: usize, layer: &str, cfg: &CamConfig) -> Result<Heatmap> {
    let (a, g) = spatial_inputs(model, image, layer, class)?;
    let z = (a.h * a.w) as f64;
    let weights: Vec<f64> = (0..a.k).map(|k| g.map(k).iter().sum::<f64>() / z).collect();
    Ok(Heatmap { values: combine(&a, &weights, image, cfg), layer: layer.into(), class, method: CamMethod::GradCam, weights })
}

pub fn gradcam_pp(model: &dyn DifferentiableModel, image: &RgbImage, class: usize, layer: &str, cfg: &CamConfig) -> Result<Heatmap> {
    let (a, g) = spatial_inputs(model, image, layer, class)?;
    let weights: Vec<f64> = (0..a.k)
        .map(|k| {
            let (gk, ak) = (g.map(k), a.map(k));
            if cfg.gradcampp_literal {
                return gk.iter().map(|v| v.max(0.0).powi(2)).sum();
            }
            let sum_a: f64 = ak.iter().sum();
            gk.iter()
                .map(|&gv| {
                    let pos = gv.max(0.0);
                    if pos == 0.0 {
                        return 0.0;
                    }
                    let (g2, g3) = (gv * gv, gv * gv * gv);
                    let den = 2.0 * g2 + sum_a * g3;
                    let alpha = if den != 0.0 { g2 / den } else { 0.0 };
                    alpha * pos
                })
                .sum()
        })
        .collect();
    Ok(Heatmap {
        values: combine(&a, &weights, image, cfg),
        layer: layer.into(),
        class,
        method: CamMethod::GradCamPlusPlus,
        weights,
    })
}

fn softmax(v: &[f64]) -> Vec<f64> {
    crate::nn::softmax_rows(v, v.len().max(1))
}

/// Gradient-free: never calls [`DifferentiableModel::grad_of_score`].
pub fn scorecam(model: &dyn DifferentiableModel, image: &RgbImage, class: usize, layer: &str, cfg: &CamConfig) -> Result<Heatmap> {
    if class >= model.num_classes() {
        return Err(Error::invalid(format!("class {class} outside {} classes", model.num_classes())));
    }
    let a = model.activations(image, layer)?;
    if a.h == 1 && a.w == 1 && a.k == model.num_classes() {
        return Err(Error::invalid(format!("layer `{layer}` is not spatial; choose a convolutional layer")));
    }
    let (hh, ww) = (image.height() as usize, image.width() as usize);
    let mut order: Vec<usize> = (0..a.k).collect();
    if a.k > cfg.scorecam_budget {
        let energy: Vec<f64> = (0..a.k).map(|k| a.map(k).iter().map(|v| v * v).sum()).collect();
        order.sort_by(|&x, &y| energy[y].total_cmp(&energy[x]).then(x.cmp(&y)));
        order.truncate(cfg.scorecam_budget);
        order.sort_unstable();
    }
    let baseline = model.masked_forward(image, &Map2::zeros(hh, ww))?;
    let base = *baseline.get(class).ok_or_else(|| Error::shape("score vector shorter than class index"))?;
    let mut gains = Vec::with_capacity(order.len());
    for &k in &order {
        let mask = upsample(&normalize(a.map2(k), Normalization::MinMax), hh, ww, cfg.upsample);
        let s = model.masked_forward(image, &mask)?;
        gains.push(s[class] - base);
    }
    let soft = softmax(&gains);
    let mut weights = vec![0.0; a.k];
    for (&k, w) in order.iter().zip(soft) {
        weights[k] = w;
    }
    Ok(Heatmap { values: combine(&a, &weights, image, cfg), layer: layer.into(), class, method: CamMethod::ScoreCam, weights })
}

/// Runs `method`; `class = None` explains the predicted class.
pub fn explain(
    model: &dyn DifferentiableModel,
    image: &RgbImage,
    method: CamMethod,
    class: Option<usize>,
    layer: Option<&str>,
    cfg: &CamConfig,
) -> Result<Heatmap> {
    let class = match class {
        Some(c) => c,
        None => argmax(&model.forward(image)?),
    };
    let layer = layer.map_or_else(|| model.default_layer(), str::to_string);
    match method {
        CamMethod::GradCam => gradcam(model, image, class, &layer, cfg),
        CamMethod::GradCamPlusPlus => gradcam_pp(model, image, class, &layer, cfg),
        CamMethod::ScoreCam => scorecam(model, image, class, &layer, cfg),
    }
}

/// `alpha · colormap(heatmap) + (1 − alpha) · image`, rounded per channel.
pub fn overlay(heatmap: &Map2, image: &RgbImage, alpha: f64, colormap: Colormap) -> Result<RgbImage> {
    if (heatmap.height, heatmap.width) != (image.height() as usize, image.width() as usize) {
        return Err(Error::shape(format!(
            "heatmap {}x{} vs image {}x{}",
            heatmap.height,
            heatmap.width,
            image.height(),
            image.width()
        )));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid(format!("alpha {alpha} outside [0, 1]")));
    }
    let mut out = image.clone();
    for (x, y, p) in out.enumerate_pixels_mut() {
        let c = colormap.rgb(heatmap.get(y as usize, x as usize));
        *p = Rgb(std::array::from_fn(|k| {
            (alpha * c[k] * 255.0 + (1.0 - alpha) * f64::from(p[k])).round().clamp(0.0, 255.0) as u8
        }));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overlay_blends() {
        let img = RgbImage::from_pixel(2, 2, Rgb([100, 50, 0]));
        let mut hm = Map2::zeros(2, 2);
        hm.data = vec![0.0, 1.0, 0.5, 0.25];
        assert_eq!(overlay(&hm, &img, 0.0, Colormap::Gray).unwrap(), img);
        let full = overlay(&hm, &img, 1.0, Colormap::Gray).unwrap();
        assert_eq!(full.get_pixel(1, 0).0, [255, 255, 255]);
        let half = overlay(&hm, &img, 0.5, Colormap::Gray).unwrap();
        // 0.5*127.5 + 0.5*100 = 113.75, 0.5*127.5 + 25 = 88.75, 63.75
        assert_eq!(half.get_pixel(0, 1).0, [114, 89, 64]);
        assert!(overlay(&Map2::zeros(3, 2), &img, 0.5, Colormap::Gray).is_err());
    }

    #[test]
    fn method_names_parse() {
        for m in CamMethod::ALL {
            assert_eq!(m.as_str().parse::<CamMethod>().unwrap(), m);
        }
        assert_eq!("GradCAM++".parse::<CamMethod>().unwrap(), CamMethod::GradCamPlusPlus);
    }
}
