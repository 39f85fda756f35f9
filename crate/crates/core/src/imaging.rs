//! Conversions between 8-bit RGB images, float tensors and plain 2-D maps.

use std::fs;
use std::io::Cursor;
use std::path::Path;

use image::{imageops::FilterType, ImageFormat, RgbImage};

use crate::error::{Error, Result};
use crate::nn::Tensor;

/// Maps `[0, 255]` to `[-1, 1]` and returns a `[1, 3, H, W]` tensor.
pub fn to_signed_tensor(img: &RgbImage) -> Tensor {
    channel_planes(img, |v| v as f64 / 127.5 - 1.0)
}

/// Maps `[0, 255]` to `[0, 1]` and returns a `[1, 3, H, W]` tensor.
pub fn to_unit_tensor(img: &RgbImage) -> Tensor {
    channel_planes(img, |v| v as f64 / 255.0)
}

fn channel_planes(img: &RgbImage, f: impl Fn(u8) -> f64) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0; 3 * h * w];
    for (x, y, p) in img.enumerate_pixels() {
        let idx = y as usize * w + x as usize;
        for c in 0..3 {
            data[c * h * w + idx] = f(p[c]);
        }
    }
    Tensor::from_vec(&[1, 3, h, w], data).expect("image tensor shape")
}

/// Inverse of [`to_signed_tensor`] for item `index` of a batch; clamps and rounds.
pub fn from_signed_tensor(t: &Tensor, index: usize) -> Result<RgbImage> {
    planes_to_image(t, index, |v| (v + 1.0) * 127.5)
}

/// Inverse of [`to_unit_tensor`] for item `index` of a batch.
pub fn from_unit_tensor(t: &Tensor, index: usize) -> Result<RgbImage> {
    planes_to_image(t, index, |v| v * 255.0)
}

fn planes_to_image(t: &Tensor, index: usize, f: impl Fn(f64) -> f64) -> Result<RgbImage> {
    let (n, c, h, w) = t.dims4()?;
    if c != 3 || index >= n {
        return Err(Error::shape(format!("cannot read image {index} from {:?}", t.shape())));
    }
    let base = index * 3 * h * w;
    let d = t.data();
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let idx = y as usize * w + x as usize;
        let px = |ch: usize| f(d[base + ch * h * w + idx]).round().clamp(0.0, 255.0) as u8;
        image::Rgb([px(0), px(1), px(2)])
    }))
}

pub fn resize(img: &RgbImage, width: u32, height: u32) -> RgbImage {
    if img.width() == width && img.height() == height {
        return img.clone();
    }
    image::imageops::resize(img, width, height, FilterType::Triangle)
}

/// Row-major single-channel float map.
#[derive(Clone, Debug, PartialEq)]
pub struct Map2 {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Map2 {
    pub fn zeros(height: usize, width: usize) -> Self {
        Map2 {
            height,
            width,
            data: vec![0.0; height * width],
        }
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn max(&self) -> f64 {
        self.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.data.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    /// Index `(y, x)` of the largest value, first one on ties.
    pub fn argmax(&self) -> (usize, usize) {
        let mut best = 0;
        for (i, v) in self.data.iter().enumerate() {
            if *v > self.data[best] {
                best = i;
            }
        }
        (best / self.width, best % self.width)
    }

    pub fn resize_nearest(&self, height: usize, width: usize) -> Map2 {
        let mut out = Map2::zeros(height, width);
        for y in 0..height {
            let sy = ((y * self.height) / height).min(self.height - 1);
            for x in 0..width {
                let sx = ((x * self.width) / width).min(self.width - 1);
                out.data[y * width + x] = self.get(sy, sx);
            }
        }
        out
    }

    /// Bilinear resampling with half-pixel centre alignment.
    pub fn resize_bilinear(&self, height: usize, width: usize) -> Map2 {
        if height == self.height && width == self.width {
            return self.clone();
        }
        let sy = self.height as f64 / height as f64;
        let sx = self.width as f64 / width as f64;
        let mut out = Map2::zeros(height, width);
        for y in 0..height {
            let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f64);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(self.height - 1);
            let ty = fy - y0 as f64;
            for x in 0..width {
                let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f64);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(self.width - 1);
                let tx = fx - x0 as f64;
                let top = self.get(y0, x0) * (1.0 - tx) + self.get(y0, x1) * tx;
                let bottom = self.get(y1, x0) * (1.0 - tx) + self.get(y1, x1) * tx;
                out.data[y * width + x] = top * (1.0 - ty) + bottom * ty;
            }
        }
        out
    }
}

pub fn encode_png(img: &RgbImage) -> Result<Vec<u8>> {
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png)?;
    Ok(buf.into_inner())
}

/// Writes `bytes` to `path` through a temporary sibling and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    write_atomic(path, &encode_png(img)?)
}

pub fn load_rgb(path: &Path) -> Result<RgbImage> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(image::load_from_memory(&bytes)?.to_rgb8())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_round_trip_is_lossless() {
        let img = RgbImage::from_fn(5, 3, |x, y| image::Rgb([(x * 40) as u8, (y * 70) as u8, 255]));
        assert_eq!(from_signed_tensor(&to_signed_tensor(&img), 0).unwrap(), img);
        assert_eq!(from_unit_tensor(&to_unit_tensor(&img), 0).unwrap(), img);
    }

    #[test]
    fn bilinear_preserves_constants_and_identity() {
        let m = Map2 {
            height: 2,
            width: 3,
            data: vec![0.5; 6],
        };
        assert!(m.resize_bilinear(7, 5).data.iter().all(|v| (v - 0.5).abs() < 1e-15));
        let r = Map2 {
            height: 2,
            width: 2,
            data: vec![0.0, 1.0, 2.0, 3.0],
        };
        assert_eq!(r.resize_bilinear(2, 2), r);
    }
}
