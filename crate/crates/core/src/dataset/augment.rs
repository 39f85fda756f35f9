use std::fmt;

use image::{imageops, Rgb, RgbImage};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::preprocess::HslJitter;
use super::sample::{ImageSample, Provenance};
use crate::seed;

/// A single augmentation. Parameterless stochastic ops draw from a stream
/// keyed by `(seed, sample id, op)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum AugmentOp {
    Hflip,
    Vflip,
    Rotate { degrees: f64 },
    /// Fixed additive shift as a fraction of full scale.
    Brightness { delta: f64 },
    /// Shift drawn uniformly from `[-max, max]`.
    RandomBrightness { max: f64 },
    ColorJitter(HslJitter),
}

impl AugmentOp {
    /// Default augmentation set: both flips and the quarter-turn rotations.
    pub fn default_set() -> Vec<AugmentOp> {
        vec![
            AugmentOp::Hflip,
            AugmentOp::Vflip,
            AugmentOp::Rotate { degrees: 90.0 },
            AugmentOp::Rotate { degrees: 180.0 },
            AugmentOp::Rotate { degrees: 270.0 },
        ]
    }

    pub fn tag(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for AugmentOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AugmentOp::Hflip => write!(f, "hflip"),
            AugmentOp::Vflip => write!(f, "vflip"),
            AugmentOp::Rotate { degrees } => write!(f, "rot{degrees}"),
            AugmentOp::Brightness { delta } => write!(f, "bright{delta}"),
            AugmentOp::RandomBrightness { max } => write!(f, "rbright{max}"),
            AugmentOp::ColorJitter(_) => write!(f, "jitter"),
        }
    }
}

/// One output per op, each derived from the original sample.
pub fn augment(sample: &ImageSample, ops: &[AugmentOp], seed: u64) -> Vec<ImageSample> {
    ops.iter()
        .map(|op| {
            let tag = op.tag();
            let mut rng = seed::stream(seed, &format!("augment/{}/{}", sample.id, tag));
            let pixels = apply(&sample.pixels, op, &mut rng);
            let mut out = sample.derive(format!("{}#{}", sample.id, tag), pixels, Provenance::Augmented);
            // Lineage points at the root so split inheritance is one hop.
            out.source_id = Some(sample.source_id.clone().unwrap_or_else(|| sample.id.clone()));
            out
        })
        .collect()
}

pub fn apply(img: &RgbImage, op: &AugmentOp, rng: &mut seed::Rng) -> RgbImage {
    match op {
        AugmentOp::Hflip => imageops::flip_horizontal(img),
        AugmentOp::Vflip => imageops::flip_vertical(img),
        AugmentOp::Rotate { degrees } => rotate(img, *degrees),
        AugmentOp::Brightness { delta } => brightness(img, *delta),
        AugmentOp::RandomBrightness { max } => {
            let d = if *max > 0.0 { rng.random_range(-*max..=*max) } else { 0.0 };
            brightness(img, d)
        }
        AugmentOp::ColorJitter(j) => {
            let dh = sym(rng, j.hue_deg);
            let ds = sym(rng, j.saturation);
            let dl = sym(rng, j.lightness);
            hsl_shift(img, dh, ds, dl)
        }
    }
}

fn sym(rng: &mut seed::Rng, m: f64) -> f64 {
    if m > 0.0 {
        rng.random_range(-m..=m)
    } else {
        0.0
    }
}

pub fn brightness(img: &RgbImage, delta: f64) -> RgbImage {
    let shift = delta * 255.0;
    let data = img
        .as_raw()
        .iter()
        .map(|v| (*v as f64 + shift).round().clamp(0.0, 255.0) as u8)
        .collect();
    RgbImage::from_raw(img.width(), img.height(), data).expect("same dimensions")
}

/// Rotation about the image centre. Quarter turns are exact; other angles
/// sample bilinearly with reflected coordinates.
pub fn rotate(img: &RgbImage, degrees: f64) -> RgbImage {
    let turns = degrees.rem_euclid(360.0);
    if turns == 0.0 {
        return img.clone();
    }
    if img.width() == img.height() {
        if turns == 90.0 {
            return imageops::rotate90(img);
        }
        if turns == 180.0 {
            return imageops::rotate180(img);
        }
        if turns == 270.0 {
            return imageops::rotate270(img);
        }
    } else if turns == 180.0 {
        return imageops::rotate180(img);
    }
    let (w, h) = (img.width() as usize, img.height() as usize);
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let (s, c) = turns.to_radians().sin_cos();
    let refl = |v: f64, n: usize| -> f64 {
        let max = (n - 1) as f64;
        if max == 0.0 {
            return 0.0;
        }
        let period = 2.0 * max;
        let m = v.rem_euclid(period);
        if m > max {
            period - m
        } else {
            m
        }
    };
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let dx = x as f64 - cx;
        let dy = y as f64 - cy;
        // Inverse map: rotate output coordinates back into the source.
        let sx = refl(c * dx + s * dy + cx, w);
        let sy = refl(-s * dx + c * dy + cy, h);
        let x0 = sx.floor() as usize;
        let y0 = sy.floor() as usize;
        let x1 = (x0 + 1).min(w - 1);
        let y1 = (y0 + 1).min(h - 1);
        let tx = sx - x0 as f64;
        let ty = sy - y0 as f64;
        let p = |xx: usize, yy: usize| img.get_pixel(xx as u32, yy as u32);
        Rgb([0, 1, 2].map(|k| {
            let top = p(x0, y0)[k] as f64 * (1.0 - tx) + p(x1, y0)[k] as f64 * tx;
            let bot = p(x0, y1)[k] as f64 * (1.0 - tx) + p(x1, y1)[k] as f64 * tx;
            (top * (1.0 - ty) + bot * ty).round().clamp(0.0, 255.0) as u8
        }))
    })
}

fn rgb_to_hsl(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let l = (max + min) / 2.0;
    if max == min {
        return (0.0, 0.0, l);
    }
    let d = max - min;
    let s = if l > 0.5 { d / (2.0 - max - min) } else { d / (max + min) };
    let h = if max == r {
        (g - b) / d + if g < b { 6.0 } else { 0.0 }
    } else if max == g {
        (b - r) / d + 2.0
    } else {
        (r - g) / d + 4.0
    };
    (h * 60.0, s, l)
}

fn hsl_to_rgb(h: f64, s: f64, l: f64) -> (f64, f64, f64) {
    if s == 0.0 {
        return (l, l, l);
    }
    let q = if l < 0.5 { l * (1.0 + s) } else { l + s - l * s };
    let p = 2.0 * l - q;
    let hk = h / 360.0;
    let ch = |t: f64| {
        let t = t.rem_euclid(1.0);
        if t < 1.0 / 6.0 {
            p + (q - p) * 6.0 * t
        } else if t < 0.5 {
            q
        } else if t < 2.0 / 3.0 {
            p + (q - p) * (2.0 / 3.0 - t) * 6.0
        } else {
            p
        }
    };
    (ch(hk + 1.0 / 3.0), ch(hk), ch(hk - 1.0 / 3.0))
}

/// Shifts hue (degrees), saturation and lightness (fractions) of every pixel.
pub fn hsl_shift(img: &RgbImage, dh: f64, ds: f64, dl: f64) -> RgbImage {
    let mut out = img.clone();
    for p in out.pixels_mut() {
        let (h, s, l) = rgb_to_hsl(p[0] as f64 / 255.0, p[1] as f64 / 255.0, p[2] as f64 / 255.0);
        let (r, g, b) = hsl_to_rgb(
            (h + dh).rem_euclid(360.0),
            (s + ds).clamp(0.0, 1.0),
            (l + dl).clamp(0.0, 1.0),
        );
        *p = Rgb([r, g, b].map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Label;

    fn fixture() -> ImageSample {
        let img = RgbImage::from_fn(17, 17, |x, y| Rgb([(x * 13) as u8, (y * 7) as u8, ((x * y) % 251) as u8]));
        ImageSample::raw("healthy/a.png", img, Label::Healthy)
    }

    #[test]
    fn flips_are_involutions_and_zero_rotation_is_identity() {
        let s = fixture();
        let mut rng = seed::stream(0, "t");
        for op in [AugmentOp::Hflip, AugmentOp::Vflip] {
            let once = apply(&s.pixels, &op, &mut rng);
            assert_ne!(once, s.pixels);
            assert_eq!(apply(&once, &op, &mut rng), s.pixels);
        }
        assert_eq!(rotate(&s.pixels, 0.0), s.pixels);
        assert_eq!(rotate(&s.pixels, 360.0), s.pixels);
        let four = (0..4).fold(s.pixels.clone(), |im, _| rotate(&im, 90.0));
        assert_eq!(four, s.pixels);
    }

    #[test]
    fn outputs_are_deterministic_and_carry_lineage() {
        let s = fixture();
        let ops = vec![
            AugmentOp::Rotate { degrees: 33.0 },
            AugmentOp::RandomBrightness { max: 0.2 },
            AugmentOp::ColorJitter(HslJitter::default()),
        ];
        let a = augment(&s, &ops, 7);
        let b = augment(&s, &ops, 7);
        assert_eq!(a, b);
        assert_eq!(a.len(), 3);
        assert!(a.iter().all(|x| x.source_id.as_deref() == Some("healthy/a.png")));
        assert!(a.iter().all(|x| x.provenance == Provenance::Augmented));
        assert!(augment(&s, &[], 7).is_empty());
    }

    #[test]
    fn hsl_round_trip_without_shift() {
        let s = fixture();
        assert_eq!(hsl_shift(&s.pixels, 0.0, 0.0, 0.0), s.pixels);
    }
}
