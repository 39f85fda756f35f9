//! Inception Score over a matrix of per-image class probabilities.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floor on the marginal `p(y)` inside the KL term.
pub const MARGINAL_EPS: f64 = 1e-12;
const ROW_SUM_TOL: f64 = 1e-6;

/// Row-major `n × C` matrix of `p(y|x)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassProbMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl ClassProbMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if cols == 0 {
            return Err(Error::invalid("class probability matrix needs at least one class"));
        }
        if data.len() != rows * cols {
            return Err(Error::shape(format!("{} values for a {rows}x{cols} matrix", data.len())));
        }
        for (i, row) in data.chunks(cols).enumerate() {
            if row.iter().any(|p| !(0.0..=1.0).contains(p)) {
                return Err(Error::invalid(format!("row {i} has an entry outside [0, 1]")));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > ROW_SUM_TOL {
                return Err(Error::invalid(format!("row {i} sums to {s}, not 1")));
            }
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("ragged probability rows"));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

fn kl_score(rows: &[&[f64]], c: usize) -> f64 {
    let n = rows.len() as f64;
    let mut marginal = vec![0.0; c];
    for r in rows {
        for (m, p) in marginal.iter_mut().zip(r.iter()) {
            *m += p / n;
        }
    }
    let mean_kl = rows
        .iter()
        .map(|r| {
            r.iter()
                .zip(&marginal)
                .filter(|(p, _)| **p > 0.0)
                .map(|(p, m)| p * (p.ln() - m.max(MARGINAL_EPS).ln()))
                .sum::<f64>()
        })
        .sum::<f64>()
        / n;
    mean_kl.exp()
}

/// `(mean, std)` of `exp(E_x KL(p(y|x) || p(y)))` over contiguous splits.
///
/// Split sizes differ by at most one; the std is the population std.
pub fn inception_score(probs: &ClassProbMatrix, splits: usize) -> Result<(f64, f64)> {
    if splits == 0 {
        return Err(Error::invalid("splits must be at least 1"));
    }
    let n = probs.rows();
    if n < splits {
        return Err(Error::invalid(format!("{n} rows cannot fill {splits} splits")));
    }
    let (base, extra) = (n / splits, n % splits);
    let mut start = 0;
    let mut scores = Vec::with_capacity(splits);
    for k in 0..splits {
        let len = base + usize::from(k < extra);
        let rows: Vec<&[f64]> = (start..start + len).map(|i| probs.row(i)).collect();
        scores.push(kl_score(&rows, probs.cols()));
        start += len;
    }
    let mean = scores.iter().sum::<f64>() / splits as f64;
    let var = scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / splits as f64;
    Ok((mean, var.sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn uniform_rows_score_one() {
        let p = ClassProbMatrix::new(5, 4, vec![0.25; 20]).unwrap();
        let (m, s) = inception_score(&p, 1).unwrap();
        assert_abs_diff_eq!(m, 1.0, epsilon = 1e-12);
        assert_eq!(s, 0.0);
    }

    #[test]
    fn balanced_one_hot_scores_class_count() {
        for c in [2usize, 3, 5] {
            let rows: Vec<Vec<f64>> = (0..c)
                .map(|i| (0..c).map(|j| f64::from(u8::from(i == j))).collect())
                .collect();
            let p = ClassProbMatrix::from_rows(&rows).unwrap();
            assert_abs_diff_eq!(inception_score(&p, 1).unwrap().0, c as f64, epsilon = 1e-9);
        }
    }

    #[test]
    fn validation_and_split_errors() {
        assert!(ClassProbMatrix::new(1, 2, vec![0.7, 0.7]).is_err());
        assert!(ClassProbMatrix::new(1, 2, vec![1.5, -0.5]).is_err());
        let p = ClassProbMatrix::new(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert!(inception_score(&p, 3).is_err());
        let (m, s) = inception_score(&p, 2).unwrap();
        assert_abs_diff_eq!(m, 1.0, epsilon = 1e-12);
        assert_eq!(s, 0.0);
    }
}
