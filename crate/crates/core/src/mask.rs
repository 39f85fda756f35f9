use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major boolean image mask.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Mask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

/// Axis-aligned box `(x, y, w, h)` in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        BBox { x, y, w, h }
    }

    pub fn area(&self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.x, self.y, self.w, self.h]
    }
}

impl Mask {
    pub fn new(height: usize, width: usize) -> Self {
        Mask {
            height,
            width,
            bits: vec![false; height * width],
        }
    }

    pub fn from_bits(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::shape(format!(
                "mask {height}x{width} needs {} bits, got {}",
                height * width,
                bits.len()
            )));
        }
        Ok(Mask { height, width, bits })
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                bits.push(f(y, x));
            }
        }
        Mask { height, width, bits }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|b| *b)
    }

    pub fn same_shape(&self, other: &Mask) -> bool {
        self.height == other.height && self.width == other.width
    }

    /// `(|a ∩ b|, |a|, |b|)`.
    pub fn overlap_counts(&self, other: &Mask) -> Result<(usize, usize, usize)> {
        if !self.same_shape(other) {
            return Err(Error::shape(format!(
                "masks differ: {}x{} vs {}x{}",
                self.height, self.width, other.height, other.width
            )));
        }
        let mut inter = 0;
        let mut a = 0;
        let mut b = 0;
        for (x, y) in self.bits.iter().zip(&other.bits) {
            a += *x as usize;
            b += *y as usize;
            inter += (*x && *y) as usize;
        }
        Ok((inter, a, b))
    }

    /// Tight pixel box of the set bits; `None` for an empty mask.
    pub fn tight_bbox(&self) -> Option<BBox> {
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(y, x) {
                    x0 = x0.min(x);
                    y0 = y0.min(y);
                    x1 = x1.max(x);
                    y1 = y1.max(y);
                }
            }
        }
        (x0 != usize::MAX).then(|| {
            BBox::new(
                x0 as f64,
                y0 as f64,
                (x1 - x0 + 1) as f64,
                (y1 - y0 + 1) as f64,
            )
        })
    }
}

/// Even-odd point-in-polygon test.
pub fn point_in_polygon(px: f64, py: f64, poly: &[(f64, f64)]) -> bool {
    let mut inside = false;
    let n = poly.len();
    let mut j = n - 1;
    for i in 0..n {
        let (xi, yi) = poly[i];
        let (xj, yj) = poly[j];
        if (yi > py) != (yj > py) && px < (xj - xi) * (py - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

/// Signed shoelace area.
pub fn polygon_area(poly: &[(f64, f64)]) -> f64 {
    let n = poly.len();
    (0..n)
        .map(|i| {
            let (x1, y1) = poly[i];
            let (x2, y2) = poly[(i + 1) % n];
            x1 * y2 - x2 * y1
        })
        .sum::<f64>()
        / 2.0
}

/// Sets every pixel whose centre lies inside `poly` (even-odd rule).
pub fn fill_polygon(height: usize, width: usize, poly: &[(f64, f64)]) -> Mask {
    let mut mask = Mask::new(height, width);
    let n = poly.len();
    let mut xs = Vec::new();
    for y in 0..height {
        let yc = y as f64 + 0.5;
        xs.clear();
        let mut j = n - 1;
        for i in 0..n {
            let (xi, yi) = poly[i];
            let (xj, yj) = poly[j];
            if (yi > yc) != (yj > yc) {
                xs.push((xj - xi) * (yc - yi) / (yj - yi) + xi);
            }
            j = i;
        }
        if xs.is_empty() {
            continue;
        }
        xs.sort_by(f64::total_cmp);
        for x in 0..width {
            let xc = x as f64 + 0.5;
            let right = xs.iter().filter(|&&c| xc < c).count();
            if right % 2 == 1 {
                mask.set(y, x, true);
            }
        }
    }
    mask
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scanline_fill_agrees_with_point_test() {
        let poly = vec![(1.2, 0.3), (8.7, 2.1), (5.5, 9.4), (3.0, 4.0), (0.4, 7.9)];
        let m = fill_polygon(10, 10, &poly);
        for y in 0..10 {
            for x in 0..10 {
                assert_eq!(m.get(y, x), point_in_polygon(x as f64 + 0.5, y as f64 + 0.5, &poly));
            }
        }
    }

    #[test]
    fn tight_bbox_of_rectangle() {
        let m = Mask::from_fn(10, 10, |y, x| (3..8).contains(&y) && (2..6).contains(&x));
        assert_eq!(m.tight_bbox(), Some(BBox::new(2.0, 3.0, 4.0, 5.0)));
        assert_eq!(Mask::new(3, 3).tight_bbox(), None);
    }
}
