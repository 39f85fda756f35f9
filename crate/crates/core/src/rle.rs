//! COCO run-length encoding of binary masks.
//!
//! Runs are counted in column-major order starting with a run of zeros, and
//! the compact string form uses the same 6-bit delta codec as pycocotools.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::Mask;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rle {
    /// `[height, width]`
    pub size: [usize; 2],
    pub counts: Vec<u64>,
}

impl Rle {
    pub fn encode(mask: &Mask) -> Rle {
        let (h, w) = (mask.height(), mask.width());
        let mut counts = Vec::new();
        let mut current = false;
        let mut run = 0u64;
        for x in 0..w {
            for y in 0..h {
                let v = mask.get(y, x);
                if v != current {
                    counts.push(run);
                    run = 0;
                    current = v;
                }
                run += 1;
            }
        }
        counts.push(run);
        Rle { size: [h, w], counts }
    }

    pub fn decode(&self) -> Result<Mask> {
        let [h, w] = self.size;
        let total: u64 = self.counts.iter().sum();
        if total != (h * w) as u64 {
            return Err(Error::invalid(format!(
                "RLE counts sum to {total}, expected {} for a {h}x{w} mask",
                h * w
            )));
        }
        let mut mask = Mask::new(h, w);
        let mut pos = 0usize;
        let mut value = false;
        for &c in &self.counts {
            if value {
                for p in pos..pos + c as usize {
                    mask.set(p % h, p / h, true);
                }
            }
            pos += c as usize;
            value = !value;
        }
        Ok(mask)
    }

    /// Compact ASCII form of the counts.
    pub fn counts_string(&self) -> String {
        let mut out = String::new();
        for i in 0..self.counts.len() {
            let mut x = self.counts[i] as i64;
            if i > 2 {
                x -= self.counts[i - 2] as i64;
            }
            loop {
                let mut c = x & 0x1f;
                x >>= 5;
                let more = if c & 0x10 != 0 { x != -1 } else { x != 0 };
                if more {
                    c |= 0x20;
                }
                out.push((c as u8 + 48) as char);
                if !more {
                    break;
                }
            }
        }
        out
    }

    pub fn from_counts_string(size: [usize; 2], s: &str) -> Result<Rle> {
        let bytes = s.as_bytes();
        let mut counts: Vec<u64> = Vec::new();
        let mut p = 0;
        while p < bytes.len() {
            let mut x: i64 = 0;
            let mut k = 0;
            loop {
                let b = *bytes.get(p).ok_or_else(|| Error::invalid("truncated RLE string"))?;
                if !(48..48 + 64).contains(&b) {
                    return Err(Error::invalid(format!("invalid RLE character {:?}", b as char)));
                }
                let c = (b - 48) as i64;
                if k >= 12 {
                    return Err(Error::invalid("RLE value too long"));
                }
                x |= (c & 0x1f) << (5 * k);
                p += 1;
                k += 1;
                if c & 0x20 == 0 {
                    if c & 0x10 != 0 {
                        x |= -1i64 << (5 * k);
                    }
                    break;
                }
            }
            let m = counts.len();
            if m > 2 {
                x += counts[m - 2] as i64;
            }
            if x < 0 {
                return Err(Error::invalid("RLE decodes to a negative run"));
            }
            counts.push(x as u64);
        }
        Ok(Rle { size, counts })
    }
}
