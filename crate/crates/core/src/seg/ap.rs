//! Average precision over IoU thresholds and dataset-level Dice.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::instance::{InstanceRecord, IouKind};
use super::matching::match_instances;
use super::overlap::dice;
use crate::dataset::Label;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApInterpolation {
    /// Envelope precision sampled at recall 0, 0.01, ..., 1.
    #[default]
    Coco101,
    /// Area under the full precision envelope.
    AllPoints,
}

/// IoU thresholds 0.50, 0.55, ..., 0.95.
pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|i| f64::from(50 + 5 * i) / 100.0).collect()
}

/// AP of a ranked list of hits (best score first) against `n_gt` objects.
pub fn ap_from_ranked(hits: &[bool], n_gt: usize, mode: ApInterpolation) -> Result<f64> {
    if n_gt == 0 {
        return Err(Error::invalid("average precision needs at least one ground-truth instance"));
    }
    let mut tp = 0usize;
    let mut recall = Vec::with_capacity(hits.len());
    let mut precision = Vec::with_capacity(hits.len());
    for (i, &h) in hits.iter().enumerate() {
        tp += usize::from(h);
        recall.push(tp as f64 / n_gt as f64);
        precision.push(tp as f64 / (i + 1) as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    Ok(match mode {
        ApInterpolation::Coco101 => {
            let mut sum = 0.0;
            let mut j = 0;
            for r in (0..=100).map(|k| f64::from(k) / 100.0) {
                while j < recall.len() && recall[j] < r {
                    j += 1;
                }
                if j < recall.len() {
                    sum += precision[j];
                }
            }
            sum / 101.0
        }
        ApInterpolation::AllPoints => {
            let mut prev = 0.0;
            let mut area = 0.0;
            for (r, p) in recall.iter().zip(&precision) {
                area += (r - prev) * p;
                prev = *r;
            }
            area
        }
    })
}

type Group = (String, Label);

fn group(records: &[InstanceRecord]) -> BTreeMap<Group, Vec<usize>> {
    let mut m: BTreeMap<Group, Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        m.entry((r.image_id.clone(), r.label)).or_default().push(i);
    }
    m
}

/// `true` for every prediction matched at `threshold`, grouping by image
/// and class.
fn hit_flags(preds: &[InstanceRecord], gts: &[InstanceRecord], kind: IouKind, threshold: f64) -> Result<Vec<bool>> {
    let gt_groups = group(gts);
    let mut hits = vec![false; preds.len()];
    for (key, pidx) in group(preds) {
        let Some(gidx) = gt_groups.get(&key) else { continue };
        let p: Vec<InstanceRecord> = pidx.iter().map(|&i| preds[i].clone()).collect();
        let g: Vec<InstanceRecord> = gidx.iter().map(|&i| gts[i].clone()).collect();
        for (pi, _, _) in match_instances(&p, &g, kind, threshold)?.pairs {
            hits[pidx[pi]] = true;
        }
    }
    Ok(hits)
}

/// Per-class AP at one threshold; classes without ground truth are skipped.
pub fn per_class_ap(
    preds: &[InstanceRecord],
    gts: &[InstanceRecord],
    kind: IouKind,
    threshold: f64,
    mode: ApInterpolation,
) -> Result<BTreeMap<Label, f64>> {
    let hits = hit_flags(preds, gts, kind, threshold)?;
    let mut out = BTreeMap::new();
    for label in Label::ALL {
        let n_gt = gts.iter().filter(|g| g.label == label).count();
        if n_gt == 0 {
            continue;
        }
        let mut idx: Vec<usize> = (0..preds.len()).filter(|&i| preds[i].label == label).collect();
        idx.sort_by(|&a, &b| preds[b].score.total_cmp(&preds[a].score));
        let ranked: Vec<bool> = idx.iter().map(|&i| hits[i]).collect();
        out.insert(label, ap_from_ranked(&ranked, n_gt, mode)?);
    }
    if out.is_empty() {
        return Err(Error::invalid("average precision needs at least one ground-truth instance"));
    }
    Ok(out)
}

/// Mean over classes of the per-class AP at `threshold`.
pub fn average_precision(
    preds: &[InstanceRecord],
    gts: &[InstanceRecord],
    kind: IouKind,
    threshold: f64,
    mode: ApInterpolation,
) -> Result<f64> {
    let per = per_class_ap(preds, gts, kind, threshold, mode)?;
    Ok(per.values().sum::<f64>() / per.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApSummary {
    /// Mean over thresholds 0.50:0.05:0.95.
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub per_threshold: Vec<(f64, f64)>,
    /// Per-class AP averaged over thresholds.
    pub per_class: BTreeMap<String, f64>,
}

pub fn ap_summary(preds: &[InstanceRecord], gts: &[InstanceRecord], kind: IouKind, mode: ApInterpolation) -> Result<ApSummary> {
    let mut per_threshold = Vec::new();
    let mut per_class: BTreeMap<String, f64> = BTreeMap::new();
    let ts = coco_thresholds();
    for &t in &ts {
        let per = per_class_ap(preds, gts, kind, t, mode)?;
        for (l, v) in &per {
            *per_class.entry(l.as_str().to_string()).or_default() += v / ts.len() as f64;
        }
        per_threshold.push((t, per.values().sum::<f64>() / per.len() as f64));
    }
    let at = |x: f64| per_threshold.iter().find(|(t, _)| (t - x).abs() < 1e-9).map(|p| p.1).unwrap_or(0.0);
    Ok(ApSummary {
        ap: per_threshold.iter().map(|p| p.1).sum::<f64>() / ts.len() as f64,
        ap50: at(0.5),
        ap75: at(0.75),
        per_threshold,
        per_class,
    })
}

/// Tag recorded next to every dataset Dice value.
pub const DICE_AGGREGATION: &str = "matched_mean_missed_gt_zero";

/// Sum of Dice over pairs matched at mask IoU `threshold`, divided by the
/// number of ground-truth instances, so misses count as 0.
pub fn dataset_dice(preds: &[InstanceRecord], gts: &[InstanceRecord], threshold: f64) -> Result<f64> {
    if gts.is_empty() {
        return Err(Error::invalid("dataset dice needs at least one ground-truth instance"));
    }
    let gt_groups = group(gts);
    let mut total = 0.0;
    for (key, pidx) in group(preds) {
        let Some(gidx) = gt_groups.get(&key) else { continue };
        let p: Vec<InstanceRecord> = pidx.iter().map(|&i| preds[i].clone()).collect();
        let g: Vec<InstanceRecord> = gidx.iter().map(|&i| gts[i].clone()).collect();
        for (pi, gi, _) in match_instances(&p, &g, IouKind::Mask, threshold)?.pairs {
            total += dice(&p[pi].mask, &g[gi].mask)?;
        }
    }
    Ok(total / gts.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegEvalReport {
    pub model: String,
    pub segm: ApSummary,
    pub bbox: ApSummary,
    pub dice: f64,
    pub dice_aggregation: String,
    pub interpolation: ApInterpolation,
    pub n_gt: usize,
    pub n_pred: usize,
}

pub fn evaluate(model: &str, preds: &[InstanceRecord], gts: &[InstanceRecord], mode: ApInterpolation) -> Result<SegEvalReport> {
    Ok(SegEvalReport {
        model: model.into(),
        segm: ap_summary(preds, gts, IouKind::Mask, mode)?,
        bbox: ap_summary(preds, gts, IouKind::Bbox, mode)?,
        dice: dataset_dice(preds, gts, 0.5)?,
        dice_aggregation: DICE_AGGREGATION.into(),
        interpolation: mode,
        n_gt: gts.len(),
        n_pred: preds.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn ranked_hand_cases() {
        assert_eq!(ap_from_ranked(&[true, true], 2, ApInterpolation::Coco101).unwrap(), 1.0);
        let tft = [true, false, true];
        assert_abs_diff_eq!(ap_from_ranked(&tft, 2, ApInterpolation::AllPoints).unwrap(), (1.0 + 2.0 / 3.0) / 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(
            ap_from_ranked(&tft, 2, ApInterpolation::Coco101).unwrap(),
            (51.0 + 50.0 * 2.0 / 3.0) / 101.0,
            epsilon = 1e-12
        );
        assert_eq!(ap_from_ranked(&[], 3, ApInterpolation::Coco101).unwrap(), 0.0);
        assert!(ap_from_ranked(&[true], 0, ApInterpolation::Coco101).is_err());
        assert_eq!(coco_thresholds()[5], 0.75);
    }
}
