//! Colour-threshold lesion segmenter used when no external engine output
//! is available.

use std::collections::VecDeque;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use super::instance::InstanceRecord;
use crate::dataset::Label;
use crate::error::Result;
use crate::mask::Mask;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ColorThresholdSegmenter {
    /// Pixels brighter than this seed the tuber region.
    pub skin_luma: f64,
    /// Pixels inside the tuber darker than this are lesion candidates.
    pub lesion_luma: f64,
    /// Components darker on average than this are black scurf.
    pub scurf_luma: f64,
    pub min_area: usize,
}

impl Default for ColorThresholdSegmenter {
    fn default() -> Self {
        Self { skin_luma: 125.0, lesion_luma: 112.0, scurf_luma: 72.0, min_area: 6 }
    }
}

fn luma(p: &image::Rgb<u8>) -> f64 {
    0.299 * f64::from(p[0]) + 0.587 * f64::from(p[1]) + 0.114 * f64::from(p[2])
}

/// Ellipse of the bright pixels from their second moments, scaled so the
/// uniform-ellipse variance matches.
fn tuber_region(img: &RgbImage, skin_luma: f64) -> Option<Mask> {
    let pts: Vec<(f64, f64)> = img
        .enumerate_pixels()
        .filter(|(_, _, p)| luma(p) > skin_luma)
        .map(|(x, y, _)| (f64::from(x) + 0.5, f64::from(y) + 0.5))
        .collect();
    if pts.len() < 16 {
        return None;
    }
    let n = pts.len() as f64;
    let (mx, my) = pts.iter().fold((0.0, 0.0), |(a, b), p| (a + p.0 / n, b + p.1 / n));
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for (x, y) in &pts {
        sxx += (x - mx).powi(2) / n;
        syy += (y - my).powi(2) / n;
        sxy += (x - mx) * (y - my) / n;
    }
    // A filled ellipse has variance r²/4 along each axis.
    let cov = nalgebra::Matrix2::new(4.0 * sxx, 4.0 * sxy, 4.0 * sxy, 4.0 * syy);
    let inv = cov.try_inverse()?;
    Some(Mask::from_fn(img.height() as usize, img.width() as usize, |y, x| {
        let d = nalgebra::Vector2::new(x as f64 + 0.5 - mx, y as f64 + 0.5 - my);
        (d.transpose() * inv * d)[(0, 0)] <= 0.92
    }))
}

fn components(m: &Mask) -> Vec<Vec<(usize, usize)>> {
    let (h, w) = (m.height(), m.width());
    let mut seen = vec![false; h * w];
    let mut out = Vec::new();
    for sy in 0..h {
        for sx in 0..w {
            if !m.get(sy, sx) || seen[sy * w + sx] {
                continue;
            }
            let mut comp = Vec::new();
            let mut q = VecDeque::from([(sy, sx)]);
            seen[sy * w + sx] = true;
            while let Some((y, x)) = q.pop_front() {
                comp.push((y, x));
                let n = [(y.wrapping_sub(1), x), (y + 1, x), (y, x.wrapping_sub(1)), (y, x + 1)];
                for (ny, nx) in n {
                    if ny < h && nx < w && m.get(ny, nx) && !seen[ny * w + nx] {
                        seen[ny * w + nx] = true;
                        q.push_back((ny, nx));
                    }
                }
            }
            out.push(comp);
        }
    }
    out
}

impl ColorThresholdSegmenter {
    /// Lesion instances, one per connected dark component inside the tuber.
    pub fn segment(&self, image_id: &str, img: &RgbImage) -> Result<Vec<InstanceRecord>> {
        let Some(tuber) = tuber_region(img, self.skin_luma) else { return Ok(Vec::new()) };
        let cand = Mask::from_fn(tuber.height(), tuber.width(), |y, x| {
            tuber.get(y, x) && luma(img.get_pixel(x as u32, y as u32)) < self.lesion_luma
        });
        let mut out = Vec::new();
        for comp in components(&cand) {
            if comp.len() < self.min_area {
                continue;
            }
            let mean = comp.iter().map(|&(y, x)| luma(img.get_pixel(x as u32, y as u32))).sum::<f64>() / comp.len() as f64;
            let label = if mean < self.scurf_luma { Label::BlackScurf } else { Label::CommonScab };
            let mut m = Mask::new(cand.height(), cand.width());
            for &(y, x) in &comp {
                m.set(y, x, true);
            }
            // Larger and more contrasted blobs are more trustworthy.
            let contrast = ((self.lesion_luma - mean) / self.lesion_luma).clamp(0.0, 1.0);
            let size = 1.0 - (-(comp.len() as f64) / 40.0).exp();
            let score = (0.5 * contrast + 0.5 * size).clamp(0.01, 0.99);
            out.push(InstanceRecord::new(image_id, label, m, score)?);
        }
        Ok(out)
    }
}
