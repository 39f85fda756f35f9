//! Fixed preprocessing chain: resize, bilateral denoise, percentile contrast
//! stretch, then contrast-limited adaptive histogram equalisation on luma.

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use super::sample::{ImageSample, Provenance};
use crate::error::{Error, Result};
use crate::imaging;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BilateralParams {
    pub diameter: u32,
    pub sigma_color: f64,
    pub sigma_space: f64,
}

impl Default for BilateralParams {
    fn default() -> Self {
        BilateralParams {
            diameter: 9,
            sigma_color: 75.0,
            sigma_space: 75.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClaheParams {
    pub clip_limit: f64,
    pub tile_grid: (u32, u32),
}

impl Default for ClaheParams {
    fn default() -> Self {
        ClaheParams {
            clip_limit: 2.0,
            tile_grid: (8, 8),
        }
    }
}

/// Per-channel HSL shift ranges (hue in degrees, others as fractions).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HslJitter {
    pub hue_deg: f64,
    pub saturation: f64,
    pub lightness: f64,
}

impl Default for HslJitter {
    fn default() -> Self {
        HslJitter {
            hue_deg: 8.0,
            saturation: 0.1,
            lightness: 0.08,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessConfig {
    pub target_size: (u32, u32),
    pub bilateral: BilateralParams,
    /// `(low, high)` percentiles.
    pub contrast_stretch: (f64, f64),
    pub clahe: ClaheParams,
    pub hsl_jitter: HslJitter,
    /// Maximum brightness shift as a fraction of full scale.
    pub brightness_jitter: f64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            target_size: (224, 224),
            bilateral: BilateralParams::default(),
            contrast_stretch: (2.0, 98.0),
            clahe: ClaheParams::default(),
            hsl_jitter: HslJitter::default(),
            brightness_jitter: 0.15,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.contrast_stretch;
        if !(0.0 <= lo && lo < hi && hi <= 100.0) {
            return Err(Error::Config(format!(
                "contrast stretch percentiles must satisfy 0 <= low < high <= 100, got ({lo}, {hi})"
            )));
        }
        if self.clahe.clip_limit <= 0.0 {
            return Err(Error::Config("CLAHE clip limit must be positive".into()));
        }
        if self.clahe.tile_grid.0 == 0 || self.clahe.tile_grid.1 == 0 {
            return Err(Error::Config("CLAHE tile grid must be non-empty".into()));
        }
        if self.target_size.0 == 0 || self.target_size.1 == 0 {
            return Err(Error::Config("target size must be non-zero".into()));
        }
        if self.bilateral.sigma_color <= 0.0 || self.bilateral.sigma_space <= 0.0 {
            return Err(Error::Config("bilateral sigmas must be positive".into()));
        }
        Ok(())
    }
}

/// Runs the full chain and tags the result as preprocessed.
pub fn preprocess(sample: &ImageSample, cfg: &PreprocessConfig) -> Result<ImageSample> {
    cfg.validate()?;
    if sample.width() < 2 || sample.height() < 2 {
        return Err(Error::invalid(format!(
            "sample `{}` is {}x{}; preprocessing needs at least 2x2 pixels",
            sample.id,
            sample.width(),
            sample.height()
        )));
    }
    let (w, h) = cfg.target_size;
    let resized = imaging::resize(&sample.pixels, w, h);
    let denoised = bilateral_filter(&resized, &cfg.bilateral);
    let stretched = contrast_stretch(&denoised, cfg.contrast_stretch.0, cfg.contrast_stretch.1);
    let equalised = clahe(&stretched, &cfg.clahe);
    Ok(ImageSample {
        id: sample.id.clone(),
        pixels: equalised,
        label: sample.label,
        split: sample.split,
        provenance: Provenance::Preprocessed,
        source_id: sample.source_id.clone(),
    })
}

fn reflect101(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let mut j = i;
    loop {
        if j < 0 {
            j = -j;
        } else if j >= n {
            j = 2 * (n - 1) - j;
        } else {
            return j as usize;
        }
    }
}

/// Edge-preserving smoothing with a circular spatial window and Gaussian
/// weights on Euclidean colour distance.
pub fn bilateral_filter(img: &RgbImage, p: &BilateralParams) -> RgbImage {
    let radius = (p.diameter / 2) as isize;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let space_coeff = -0.5 / (p.sigma_space * p.sigma_space);
    let color_coeff = -0.5 / (p.sigma_color * p.sigma_color);
    let mut offsets = Vec::new();
    for dy in -radius..=radius {
        for dx in -radius..=radius {
            let r2 = (dx * dx + dy * dy) as f64;
            if r2 <= (radius * radius) as f64 {
                offsets.push((dy, dx, (r2 * space_coeff).exp()));
            }
        }
    }
    let color_lut: Vec<f64> = (0..=3 * 255 * 255)
        .map(|d2| (d2 as f64 * color_coeff).exp())
        .collect();
    let src = img.as_raw();
    let mut out = RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let c = &src[(y * w + x) * 3..(y * w + x) * 3 + 3];
            let mut acc = [0.0f64; 3];
            let mut wsum = 0.0;
            for &(dy, dx, ws) in &offsets {
                let sy = reflect101(y as isize + dy, h);
                let sx = reflect101(x as isize + dx, w);
                let q = &src[(sy * w + sx) * 3..(sy * w + sx) * 3 + 3];
                let d2: i32 = (0..3).map(|k| (q[k] as i32 - c[k] as i32).pow(2)).sum();
                let wt = ws * color_lut[d2 as usize];
                wsum += wt;
                for k in 0..3 {
                    acc[k] += wt * q[k] as f64;
                }
            }
            let px = Rgb([0, 1, 2].map(|k| (acc[k] / wsum).round().clamp(0.0, 255.0) as u8));
            out.put_pixel(x as u32, y as u32, px);
        }
    }
    out
}

fn percentile_value(hist: &[u64; 256], total: u64, pct: f64) -> u8 {
    let rank = ((pct / 100.0) * total as f64).ceil().max(1.0) as u64;
    let mut acc = 0;
    for (v, &c) in hist.iter().enumerate() {
        acc += c;
        if acc >= rank {
            return v as u8;
        }
    }
    255
}

/// Linear stretch mapping the `low`/`high` percentiles of all channel values
/// onto `[0, 255]`. Images whose percentiles coincide are returned unchanged.
pub fn contrast_stretch(img: &RgbImage, low: f64, high: f64) -> RgbImage {
    let mut hist = [0u64; 256];
    for v in img.as_raw() {
        hist[*v as usize] += 1;
    }
    let total = img.as_raw().len() as u64;
    let lo = percentile_value(&hist, total, low) as f64;
    let hi = percentile_value(&hist, total, high) as f64;
    if hi <= lo {
        return img.clone();
    }
    let lut: Vec<u8> = (0..256)
        .map(|v| ((v as f64 - lo) * 255.0 / (hi - lo)).round().clamp(0.0, 255.0) as u8)
        .collect();
    let data = img.as_raw().iter().map(|v| lut[*v as usize]).collect();
    RgbImage::from_raw(img.width(), img.height(), data).expect("same dimensions")
}

fn luma(p: &[u8]) -> u8 {
    (0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64)
        .round()
        .clamp(0.0, 255.0) as u8
}

fn tile_lut(hist: &[u32; 256], pixels: u32, clip_limit: f64) -> [u8; 256] {
    let occupied = hist.iter().filter(|&&c| c > 0).count();
    let mut lut = [0u8; 256];
    if occupied <= 1 || pixels == 0 {
        for (v, l) in lut.iter_mut().enumerate() {
            *l = v as u8;
        }
        return lut;
    }
    let limit = ((clip_limit * pixels as f64 / 256.0) as u32).max(1);
    let mut h = *hist;
    let mut excess = 0u32;
    for c in h.iter_mut() {
        if *c > limit {
            excess += *c - limit;
            *c = limit;
        }
    }
    let bonus = excess / 256;
    let residual = (excess % 256) as usize;
    for c in h.iter_mut() {
        *c += bonus;
    }
    if residual > 0 {
        let step = (256 / residual).max(1);
        let mut i = 0;
        let mut left = residual;
        while i < 256 && left > 0 {
            h[i] += 1;
            left -= 1;
            i += step;
        }
    }
    let scale = 255.0 / pixels as f64;
    let mut acc = 0u32;
    for (v, l) in lut.iter_mut().enumerate() {
        acc += h[v];
        *l = (acc as f64 * scale).round().clamp(0.0, 255.0) as u8;
    }
    lut
}

/// CLAHE on luma, applied back to RGB as an additive luma shift so that a
/// tile holding a single grey level maps to itself.
pub fn clahe(img: &RgbImage, p: &ClaheParams) -> RgbImage {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let (gy, gx) = (p.tile_grid.0 as usize, p.tile_grid.1 as usize);
    let (gy, gx) = (gy.min(h).max(1), gx.min(w).max(1));
    let th = h.div_ceil(gy);
    let tw = w.div_ceil(gx);
    let src = img.as_raw();
    let lum: Vec<u8> = src.chunks(3).map(luma).collect();

    let mut luts = vec![[0u8; 256]; gy * gx];
    for ty in 0..gy {
        for tx in 0..gx {
            let mut hist = [0u32; 256];
            let (y0, y1) = (ty * th, ((ty + 1) * th).min(h));
            let (x0, x1) = (tx * tw, ((tx + 1) * tw).min(w));
            for y in y0..y1 {
                for x in x0..x1 {
                    hist[lum[y * w + x] as usize] += 1;
                }
            }
            let pixels = ((y1.saturating_sub(y0)) * (x1.saturating_sub(x0))) as u32;
            luts[ty * gx + tx] = tile_lut(&hist, pixels, p.clip_limit);
        }
    }

    let mut out = RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        let fy = (y as f64 + 0.5) / th as f64 - 0.5;
        let ty0 = fy.floor().clamp(0.0, (gy - 1) as f64) as usize;
        let ty1 = (ty0 + 1).min(gy - 1);
        let wy = (fy - ty0 as f64).clamp(0.0, 1.0);
        for x in 0..w {
            let fx = (x as f64 + 0.5) / tw as f64 - 0.5;
            let tx0 = fx.floor().clamp(0.0, (gx - 1) as f64) as usize;
            let tx1 = (tx0 + 1).min(gx - 1);
            let wx = (fx - tx0 as f64).clamp(0.0, 1.0);
            let v = lum[y * w + x] as usize;
            let m = |ty: usize, tx: usize| luts[ty * gx + tx][v] as f64;
            let mapped = (1.0 - wy) * ((1.0 - wx) * m(ty0, tx0) + wx * m(ty0, tx1))
                + wy * ((1.0 - wx) * m(ty1, tx0) + wx * m(ty1, tx1));
            let delta = mapped.round() - v as f64;
            let p = &src[(y * w + x) * 3..(y * w + x) * 3 + 3];
            let px = Rgb([0, 1, 2].map(|k| (p[k] as f64 + delta).clamp(0.0, 255.0) as u8));
            out.put_pixel(x as u32, y as u32, px);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Label;

    fn sample(img: RgbImage) -> ImageSample {
        ImageSample::raw("healthy/x.png", img, Label::Healthy)
    }

    #[test]
    fn output_is_224_square() {
        let img = RgbImage::from_fn(640, 480, |x, y| Rgb([(x % 256) as u8, (y % 256) as u8, 90]));
        let out = preprocess(&sample(img), &PreprocessConfig::default()).unwrap();
        assert_eq!((out.width(), out.height()), (224, 224));
        assert_eq!(out.provenance, Provenance::Preprocessed);
        let again = preprocess(&out, &PreprocessConfig::default()).unwrap();
        assert_eq!(again.pixels.dimensions(), out.pixels.dimensions());
    }

    #[test]
    fn constant_gray_is_a_fixed_point() {
        let img = RgbImage::from_pixel(224, 224, Rgb([117, 117, 117]));
        let out = preprocess(&sample(img.clone()), &PreprocessConfig::default()).unwrap();
        assert_eq!(out.pixels, img);
    }

    #[test]
    fn step_image_spans_full_range_after_stretch() {
        let img = RgbImage::from_fn(224, 224, |x, _| if x < 112 { Rgb([60; 3]) } else { Rgb([160; 3]) });
        let cfg = PreprocessConfig::default();
        let denoised = bilateral_filter(&img, &cfg.bilateral);
        let stretched = contrast_stretch(&denoised, 2.0, 98.0);
        let min = *stretched.as_raw().iter().min().unwrap();
        let max = *stretched.as_raw().iter().max().unwrap();
        assert_eq!((min, max), (0, 255));
    }

    #[test]
    fn tiny_inputs_are_rejected() {
        let img = RgbImage::from_pixel(1, 1, Rgb([1, 2, 3]));
        assert!(preprocess(&sample(img), &PreprocessConfig::default()).is_err());
    }

    #[test]
    fn invalid_config_is_rejected() {
        let cfg = PreprocessConfig {
            contrast_stretch: (50.0, 10.0),
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = PreprocessConfig {
            clahe: ClaheParams {
                clip_limit: 0.0,
                tile_grid: (8, 8),
            },
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn clahe_raises_local_contrast() {
        let img = RgbImage::from_fn(64, 64, |x, y| {
            let v = 100 + ((x + y) % 8) as u8;
            Rgb([v, v, v])
        });
        let out = clahe(&img, &ClaheParams::default());
        let spread = |im: &RgbImage| {
            let v: Vec<u8> = im.as_raw().iter().step_by(3).copied().collect();
            *v.iter().max().unwrap() as i32 - *v.iter().min().unwrap() as i32
        };
        assert!(spread(&out) > spread(&img));
    }
}
