//! Confusion matrices and the five classification scores.

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gen_metrics::ClassProbMatrix;
use crate::render::{self, Colormap};

/// Clamp used by [`log_loss`].
pub const LOG_LOSS_EPS: f64 = 1e-15;

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Rows are true classes, columns predicted classes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub classes: Vec<String>,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(classes: Vec<String>) -> Self {
        let c = classes.len();
        Self { classes, counts: vec![vec![0; c]; c] }
    }

    pub fn from_counts(classes: Vec<String>, counts: Vec<Vec<u64>>) -> Result<Self> {
        let c = classes.len();
        if counts.len() != c || counts.iter().any(|r| r.len() != c) {
            return Err(Error::shape(format!("confusion counts must be {c}x{c}")));
        }
        Ok(Self { classes, counts })
    }

    /// Tally of index pairs.
    pub fn from_indices(classes: Vec<String>, predicted: &[usize], actual: &[usize]) -> Result<Self> {
        if predicted.len() != actual.len() {
            return Err(Error::shape(format!("{} predictions for {} labels", predicted.len(), actual.len())));
        }
        let mut cm = Self::new(classes);
        let c = cm.num_classes();
        for (&p, &t) in predicted.iter().zip(actual) {
            if t >= c || p >= c {
                return Err(Error::invalid(format!("class index {} outside {c} classes", t.max(p))));
            }
            cm.counts[t][p] += 1;
        }
        Ok(cm)
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn tp(&self, k: usize) -> u64 {
        self.counts[k][k]
    }

    /// Predicted `k` but something else.
    pub fn fp(&self, k: usize) -> u64 {
        (0..self.num_classes()).filter(|&t| t != k).map(|t| self.counts[t][k]).sum()
    }

    /// Truly `k` but predicted otherwise.
    pub fn fn_(&self, k: usize) -> u64 {
        (0..self.num_classes()).filter(|&p| p != k).map(|p| self.counts[k][p]).sum()
    }

    pub fn support(&self, k: usize) -> u64 {
        self.counts[k].iter().sum()
    }

    /// Relabels class `i` as `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let c = self.num_classes();
        let mut seen = vec![false; c];
        if perm.len() != c || perm.iter().any(|&p| p >= c || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::invalid("not a permutation of the class indices"));
        }
        let mut out = Self::new(vec![String::new(); c]);
        for i in 0..c {
            out.classes[perm[i]] = self.classes[i].clone();
            for j in 0..c {
                out.counts[perm[i]][perm[j]] = self.counts[i][j];
            }
        }
        Ok(out)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("true\\predicted");
        for c in &self.classes {
            s.push(',');
            s.push_str(c);
        }
        s.push('\n');
        for (c, row) in self.classes.iter().zip(&self.counts) {
            s.push_str(c);
            for v in row {
                s.push_str(&format!(",{v}"));
            }
            s.push('\n');
        }
        s
    }

    /// Heat grid shaded by row-normalised counts, with counts printed.
    pub fn render(&self, cell: u32) -> RgbImage {
        let c = self.num_classes() as u32;
        let cell = cell.max(16);
        let mut img = RgbImage::from_pixel(c * cell + 2, c * cell + 2, render::WHITE);
        for (t, row) in self.counts.iter().enumerate() {
            let n = row.iter().sum::<u64>().max(1) as f64;
            for (p, &v) in row.iter().enumerate() {
                let frac = v as f64 / n;
                let (x, y) = (1 + p as i64 * i64::from(cell), 1 + t as i64 * i64::from(cell));
                render::fill_rect(&mut img, x, y, cell - 1, cell - 1, Colormap::Inferno.pixel(0.15 + 0.85 * frac));
                let text = v.to_string();
                let ink = if frac > 0.6 { render::BLACK } else { render::WHITE };
                let tx = x + i64::from((cell - render::text_width(&text, 2)) / 2);
                render::draw_text(&mut img, tx, y + i64::from(cell / 2) - 5, &text, 2, ink);
            }
        }
        img
    }
}

/// Argmax of each row against true class indices.
pub fn confusion(preds: &ClassProbMatrix, labels: &[usize], classes: &[String]) -> Result<ConfusionMatrix> {
    if labels.len() != preds.rows() {
        return Err(Error::shape(format!("{} labels for {} prediction rows", labels.len(), preds.rows())));
    }
    if preds.cols() != classes.len() {
        return Err(Error::shape(format!("{} probability columns for {} classes", preds.cols(), classes.len())));
    }
    let predicted: Vec<usize> = (0..preds.rows()).map(|i| argmax(preds.row(i))).collect();
    ConfusionMatrix::from_indices(classes.to_vec(), &predicted, labels)
}

pub fn accuracy(cm: &ConfusionMatrix) -> Result<f64> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::invalid("accuracy of an empty confusion matrix"));
    }
    Ok((0..cm.num_classes()).map(|k| cm.tp(k)).sum::<u64>() as f64 / total as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode", content = "positive_class")]
pub enum Averaging {
    /// Unweighted mean over classes present in labels or predictions.
    #[default]
    Macro,
    /// Pooled counts.
    Micro,
    Binary(usize),
}

impl Averaging {
    pub fn tag(&self) -> String {
        match self {
            Averaging::Macro => "macro".into(),
            Averaging::Micro => "micro".into(),
            Averaging::Binary(k) => format!("binary({k})"),
        }
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn f1_score(p: f64, r: f64) -> f64 {
    if p + r > 0.0 {
        2.0 * p * r / (p + r)
    } else {
        0.0
    }
}

/// Per-class precision and recall; zero denominators give 0.
pub fn class_precision_recall(cm: &ConfusionMatrix, k: usize) -> (f64, f64) {
    (ratio(cm.tp(k), cm.tp(k) + cm.fp(k)), ratio(cm.tp(k), cm.tp(k) + cm.fn_(k)))
}

/// `(precision, recall, f1)`. Under macro averaging F1 is the harmonic mean
/// of the averaged precision and recall.
pub fn precision_recall_f1(cm: &ConfusionMatrix, averaging: Averaging) -> Result<(f64, f64, f64)> {
    if cm.total() == 0 {
        return Err(Error::invalid("precision/recall of an empty confusion matrix"));
    }
    let c = cm.num_classes();
    let (p, r) = match averaging {
        Averaging::Micro => {
            let tp: u64 = (0..c).map(|k| cm.tp(k)).sum();
            let fp: u64 = (0..c).map(|k| cm.fp(k)).sum();
            let fn_: u64 = (0..c).map(|k| cm.fn_(k)).sum();
            (ratio(tp, tp + fp), ratio(tp, tp + fn_))
        }
        Averaging::Macro => {
            let present: Vec<usize> = (0..c).filter(|&k| cm.support(k) + cm.fp(k) > 0).collect();
            let n = present.len() as f64;
            let (sp, sr) = present.iter().fold((0.0, 0.0), |(a, b), &k| {
                let (p, r) = class_precision_recall(cm, k);
                (a + p, b + r)
            });
            (sp / n, sr / n)
        }
        Averaging::Binary(k) => {
            if k >= c {
                return Err(Error::invalid(format!("positive class {k} outside {c} classes")));
            }
            class_precision_recall(cm, k)
        }
    };
    Ok((p, r, f1_score(p, r)))
}

/// Mean negative log probability of the true class.
pub fn log_loss(probs: &ClassProbMatrix, labels: &[usize]) -> Result<f64> {
    if labels.len() != probs.rows() || labels.is_empty() {
        return Err(Error::shape(format!("{} labels for {} rows", labels.len(), probs.rows())));
    }
    let mut s = 0.0;
    for (i, &t) in labels.iter().enumerate() {
        let p = *probs
            .row(i)
            .get(t)
            .ok_or_else(|| Error::invalid(format!("label {t} outside {} classes", probs.cols())))?;
        s -= p.clamp(LOG_LOSS_EPS, 1.0 - LOG_LOSS_EPS).ln();
    }
    Ok(s / labels.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub model: String,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub log_loss: f64,
    pub averaging: String,
    pub per_class: Vec<ClassMetrics>,
    pub confusion: ConfusionMatrix,
    pub n_evaluated: usize,
}

impl ClassificationReport {
    pub fn evaluate(model: &str, probs: &ClassProbMatrix, labels: &[usize], classes: &[String], averaging: Averaging) -> Result<Self> {
        let cm = confusion(probs, labels, classes)?;
        let (precision, recall, f1) = precision_recall_f1(&cm, averaging)?;
        let per_class = (0..cm.num_classes())
            .map(|k| {
                let (p, r) = class_precision_recall(&cm, k);
                ClassMetrics { class: classes[k].clone(), precision: p, recall: r, f1: f1_score(p, r), support: cm.support(k) }
            })
            .collect();
        Ok(Self {
            model: model.into(),
            accuracy: accuracy(&cm)?,
            precision,
            recall,
            f1,
            log_loss: log_loss(probs, labels)?,
            averaging: averaging.tag(),
            per_class,
            n_evaluated: labels.len(),
            confusion: cm,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn names(c: usize) -> Vec<String> {
        (0..c).map(|i| format!("c{i}")).collect()
    }

    #[test]
    fn hand_tally_and_accuracy() {
        let cm = ConfusionMatrix::from_indices(names(2), &[0, 1, 1], &[0, 1, 0]).unwrap();
        assert_eq!(cm.counts, vec![vec![1, 1], vec![0, 1]]);
        assert_abs_diff_eq!(accuracy(&cm).unwrap(), 2.0 / 3.0);
        assert!(accuracy(&ConfusionMatrix::new(names(2))).is_err());
    }

    #[test]
    fn ties_go_low() {
        let p = ClassProbMatrix::new(2, 3, vec![1.0 / 3.0; 6]).unwrap();
        let cm = confusion(&p, &[1, 2], &names(3)).unwrap();
        assert_eq!(cm.counts[1][0] + cm.counts[2][0], 2);
    }

    #[test]
    fn binary_hand_case() {
        let cm = ConfusionMatrix::from_counts(names(2), vec![vec![5, 1], vec![1, 2]]).unwrap();
        let (p, r, f) = precision_recall_f1(&cm, Averaging::Binary(1)).unwrap();
        for v in [p, r, f] {
            assert_abs_diff_eq!(v, 2.0 / 3.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn diagonal_is_perfect() {
        let cm = ConfusionMatrix::from_counts(names(3), vec![vec![4, 0, 0], vec![0, 2, 0], vec![0, 0, 0]]).unwrap();
        for a in [Averaging::Macro, Averaging::Micro, Averaging::Binary(0)] {
            assert_eq!(precision_recall_f1(&cm, a).unwrap(), (1.0, 1.0, 1.0));
        }
    }

    #[test]
    fn log_loss_hand_values() {
        let p = ClassProbMatrix::new(2, 2, vec![0.8, 0.2, 0.6, 0.4]).unwrap();
        assert_abs_diff_eq!(log_loss(&p, &[0, 1]).unwrap(), -(0.8f64.ln() + 0.4f64.ln()) / 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(log_loss(&p, &[0, 1]).unwrap(), 0.5697, epsilon = 1e-4);
        let half = ClassProbMatrix::new(3, 2, vec![0.5; 6]).unwrap();
        assert_abs_diff_eq!(log_loss(&half, &[0, 1, 1]).unwrap(), 2f64.ln(), epsilon = 1e-12);
        let sure = ClassProbMatrix::new(1, 2, vec![1.0, 0.0]).unwrap();
        assert_eq!(log_loss(&sure, &[0]).unwrap(), -(1.0 - LOG_LOSS_EPS).ln());
    }
}
