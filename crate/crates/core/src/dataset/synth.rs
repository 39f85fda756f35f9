//! Synthetic desk-scale corpus: textured tuber ellipses on soil, with dark
//! scurf blotches or corky scab spots drawn as annotated polygons.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::annotation::{to_vgg_json, MaskAnnotation};
use super::sample::Label;
use crate::error::Result;
use crate::imaging;
use crate::mask;
use crate::seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub healthy: usize,
    pub black_scurf: usize,
    pub common_scab: usize,
    pub size: u32,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            healthy: 24,
            black_scurf: 12,
            common_scab: 12,
            size: 96,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn count(&self, label: Label) -> usize {
        match label {
            Label::Healthy => self.healthy,
            Label::BlackScurf => self.black_scurf,
            Label::CommonScab => self.common_scab,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusSummary {
    pub images: usize,
    pub regions: usize,
    pub annotation_path: PathBuf,
}

#[derive(Clone, Copy, Debug)]
struct Tuber {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    angle: f64,
}

impl Tuber {
    fn local(&self, x: f64, y: f64) -> (f64, f64) {
        let (s, c) = self.angle.sin_cos();
        let dx = x - self.cx;
        let dy = y - self.cy;
        ((c * dx + s * dy) / self.rx, (-s * dx + c * dy) / self.ry)
    }

    fn world(&self, u: f64, v: f64) -> (f64, f64) {
        let (s, c) = self.angle.sin_cos();
        let (lx, ly) = (u * self.rx, v * self.ry);
        (self.cx + c * lx - s * ly, self.cy + s * lx + c * ly)
    }
}

fn jitter(rng: &mut seed::Rng, v: f64, amp: f64) -> u8 {
    (v + rng.random_range(-amp..=amp)).round().clamp(0.0, 255.0) as u8
}

fn render_healthy(size: u32, rng: &mut seed::Rng) -> (RgbImage, Tuber) {
    let s = size as f64;
    let tuber = Tuber {
        cx: s * rng.random_range(0.42..0.58),
        cy: s * rng.random_range(0.42..0.58),
        rx: s * rng.random_range(0.30..0.40),
        ry: s * rng.random_range(0.22..0.30),
        angle: rng.random_range(0.0..std::f64::consts::PI),
    };
    let skin = [
        rng.random_range(190.0..215.0),
        rng.random_range(155.0..180.0),
        rng.random_range(100.0..125.0),
    ];
    let soil = [rng.random_range(70.0..95.0), rng.random_range(55.0..70.0), rng.random_range(38.0..50.0)];
    let mut img = RgbImage::new(size, size);
    for y in 0..size {
        for x in 0..size {
            let (u, v) = tuber.local(x as f64 + 0.5, y as f64 + 0.5);
            let r2 = u * u + v * v;
            let px = if r2 <= 1.0 {
                // Soft shading toward the rim.
                let shade = 1.0 - 0.25 * r2;
                Rgb(skin.map(|c| jitter(rng, c * shade, 6.0)))
            } else {
                Rgb(soil.map(|c| jitter(rng, c, 12.0)))
            };
            img.put_pixel(x, y, px);
        }
    }
    (img, tuber)
}

fn lesion_polygon(tuber: &Tuber, size: u32, rng: &mut seed::Rng, scale: (f64, f64)) -> Vec<(f64, f64)> {
    let s = size as f64;
    let rho = rng.random_range(0.0..0.65f64).sqrt() * 0.9;
    let theta = rng.random_range(0.0..std::f64::consts::TAU);
    let (cx, cy) = tuber.world(rho * theta.cos(), rho * theta.sin());
    let r = s * rng.random_range(scale.0..scale.1);
    let n = 10;
    (0..n)
        .map(|i| {
            let a = std::f64::consts::TAU * i as f64 / n as f64;
            let rr = r * rng.random_range(0.65..1.0);
            ((cx + rr * a.cos()).clamp(0.0, s), (cy + rr * a.sin()).clamp(0.0, s))
        })
        .collect()
}

fn paint(img: &mut RgbImage, poly: &[(f64, f64)], color: [f64; 3], amp: f64, rng: &mut seed::Rng) {
    let m = mask::fill_polygon(img.height() as usize, img.width() as usize, poly);
    for y in 0..m.height() {
        for x in 0..m.width() {
            if m.get(y, x) {
                img.put_pixel(x as u32, y as u32, Rgb(color.map(|c| jitter(rng, c, amp))));
            }
        }
    }
}

/// Draws lesions for `label` onto `img` and returns their polygons.
fn add_lesions(img: &mut RgbImage, tuber: &Tuber, label: Label, rng: &mut seed::Rng) -> Vec<Vec<(f64, f64)>> {
    let size = img.width();
    let (count, scale, color, amp) = match label {
        Label::Healthy => return Vec::new(),
        Label::BlackScurf => (rng.random_range(2..=4), (0.05, 0.09), [45.0, 38.0, 32.0], 10.0),
        Label::CommonScab => (rng.random_range(3..=5), (0.035, 0.065), [135.0, 92.0, 55.0], 18.0),
    };
    let mut polys = Vec::new();
    for _ in 0..count {
        let p = lesion_polygon(tuber, size, rng, scale);
        if mask::fill_polygon(size as usize, size as usize, &p).is_empty() {
            continue;
        }
        paint(img, &p, color, amp, rng);
        polys.push(p);
    }
    polys
}

/// One synthetic image of class `label` with its lesion polygons.
pub fn render_sample(label: Label, size: u32, seed: u64, index: usize) -> (RgbImage, Vec<Vec<(f64, f64)>>) {
    let mut rng = seed::stream(seed, &format!("synth/{label}/{index}"));
    let (mut img, tuber) = render_healthy(size, &mut rng);
    let polys = add_lesions(&mut img, &tuber, label, &mut rng);
    (img, polys)
}

pub fn file_name(label: Label, index: usize) -> String {
    format!("{label}_{index:03}.png")
}

/// Writes `root/<label>/<label>_NNN.png` plus a VGG export at
/// `root/annotations.json`.
pub fn write_corpus(root: &Path, spec: &SynthSpec) -> Result<CorpusSummary> {
    let mut anns = Vec::new();
    let mut images = 0;
    for label in Label::ALL {
        for i in 0..spec.count(label) {
            let (img, polys) = render_sample(label, spec.size, spec.seed, i);
            let name = file_name(label, i);
            imaging::save_png(&img, &root.join(label.as_str()).join(&name))?;
            images += 1;
            for p in polys {
                anns.push(MaskAnnotation::polygon(name.clone(), label, p));
            }
        }
    }
    let annotation_path = root.join("annotations.json");
    imaging::write_atomic(&annotation_path, &serde_json::to_vec_pretty(&to_vgg_json(&anns))?)?;
    Ok(CorpusSummary {
        images,
        regions: anns.len(),
        annotation_path,
    })
}

/// Aligned `(healthy, diseased)` pairs: the same tuber before and after
/// lesions are drawn. Diseases alternate between the two classes.
pub fn synthetic_pairs(n: usize, size: u32, seed: u64) -> Vec<(RgbImage, RgbImage)> {
    (0..n)
        .map(|i| {
            let label = Label::DISEASES[i % 2];
            let mut rng = seed::stream(seed, &format!("synth-pair/{i}"));
            let (healthy, tuber) = render_healthy(size, &mut rng);
            let mut diseased = healthy.clone();
            add_lesions(&mut diseased, &tuber, label, &mut rng);
            (healthy, diseased)
        })
        .collect()
}
