//! Greedy score-ordered matching of predictions to ground truth.

use serde::{Deserialize, Serialize};

use super::instance::{InstanceRecord, IouKind};
use super::overlap::{bbox_iou, mask_iou};
use crate::error::Result;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    /// `(pred_idx, gt_idx, iou)` in the order predictions were processed.
    pub pairs: Vec<(usize, usize, f64)>,
    pub unmatched_preds: Vec<usize>,
    pub unmatched_gts: Vec<usize>,
    pub threshold: f64,
}

pub fn iou(a: &InstanceRecord, b: &InstanceRecord, kind: IouKind) -> Result<f64> {
    match kind {
        IouKind::Mask => mask_iou(&a.mask, &b.mask),
        IouKind::Bbox => Ok(bbox_iou(&a.bbox, &b.bbox)),
    }
}

/// Prediction indices by descending score, ties in input order.
pub fn score_order(preds: &[InstanceRecord]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[b].score.total_cmp(&preds[a].score));
    order
}

/// Each prediction, best score first, claims the unmatched ground truth of
/// highest IoU at or above `threshold`. Callers group by image and class.
pub fn match_instances(
    preds: &[InstanceRecord],
    gts: &[InstanceRecord],
    kind: IouKind,
    threshold: f64,
) -> Result<MatchResult> {
    let mut taken = vec![false; gts.len()];
    let mut pairs = Vec::new();
    let mut unmatched_preds = Vec::new();
    for p in score_order(preds) {
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if taken[g] {
                continue;
            }
            let v = iou(&preds[p], gt, kind)?;
            if v >= threshold && best.is_none_or(|(_, b)| v > b) {
                best = Some((g, v));
            }
        }
        match best {
            Some((g, v)) => {
                taken[g] = true;
                pairs.push((p, g, v));
            }
            None => unmatched_preds.push(p),
        }
    }
    let unmatched_gts = (0..gts.len()).filter(|&g| !taken[g]).collect();
    Ok(MatchResult { pairs, unmatched_preds, unmatched_gts, threshold })
}
