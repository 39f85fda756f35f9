//! Pixel and box overlap measures.

use crate::error::Result;
use crate::mask::{BBox, Mask};

/// `|a ∩ b| / |a ∪ b|`; two empty masks count as a perfect match.
pub fn mask_iou(a: &Mask, b: &Mask) -> Result<f64> {
    let (inter, na, nb) = a.overlap_counts(b)?;
    let union = na + nb - inter;
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// `2|a ∩ b| / (|a| + |b|)`; two empty masks give 1.
pub fn dice(a: &Mask, b: &Mask) -> Result<f64> {
    let (inter, na, nb) = a.overlap_counts(b)?;
    Ok(if na + nb == 0 { 1.0 } else { 2.0 * inter as f64 / (na + nb) as f64 })
}

/// Rectangle IoU. Any zero-area box gives 0, including two identical ones.
pub fn bbox_iou(a: &BBox, b: &BBox) -> f64 {
    if a.area() <= 0.0 || b.area() <= 0.0 {
        return 0.0;
    }
    let iw = ((a.x + a.w).min(b.x + b.w) - a.x.max(b.x)).max(0.0);
    let ih = ((a.y + a.h).min(b.y + b.h) - a.y.max(b.y)).max(0.0);
    let inter = iw * ih;
    inter / (a.area() + b.area() - inter)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_values() {
        let a = Mask::from_fn(1, 3, |_, x| x < 2);
        let b = Mask::from_fn(1, 3, |_, x| x > 0);
        assert_eq!(mask_iou(&a, &b).unwrap(), 1.0 / 3.0);
        assert_eq!(dice(&a, &b).unwrap(), 0.5);
        assert_eq!(mask_iou(&a, &a).unwrap(), 1.0);
        let e = Mask::new(1, 3);
        assert_eq!(mask_iou(&e, &e).unwrap(), 1.0);
        assert_eq!(dice(&e, &a).unwrap(), 0.0);
        assert!(mask_iou(&a, &Mask::new(2, 3)).is_err());
        let (p, q) = (BBox::new(0.0, 0.0, 2.0, 2.0), BBox::new(1.0, 1.0, 2.0, 2.0));
        assert_eq!(bbox_iou(&p, &q), 1.0 / 7.0);
        assert_eq!(bbox_iou(&p, &p), 1.0);
        assert_eq!(bbox_iou(&p, &BBox::new(5.0, 5.0, 1.0, 1.0)), 0.0);
        let z = BBox::new(1.0, 1.0, 0.0, 3.0);
        assert_eq!(bbox_iou(&z, &z), 0.0);
    }
}
