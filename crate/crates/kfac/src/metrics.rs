//! Accuracy and percentile aggregation shared by the trainer and the CLI.

use crate::linalg::DenseMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("empty input")]
    Empty,
    #[error("logits rows {rows} do not match {labels} labels")]
    LabelMismatch { rows: usize, labels: usize },
}

/// The {5, 25, 50, 75, 95}th percentiles of a value set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PercentileSummary {
    pub p5: f64,
    pub p25: f64,
    pub p50: f64,
    pub p75: f64,
    pub p95: f64,
}

/// Row-wise argmax with ties broken toward the lowest index.
pub fn argmax_row(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate().skip(1) {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Fraction of rows whose argmax matches the label.
pub fn top1_accuracy(logits: &DenseMatrix, labels: &[usize]) -> Result<f64, MetricsError> {
    if logits.rows() == 0 {
        return Err(MetricsError::Empty);
    }
    if logits.rows() != labels.len() {
        return Err(MetricsError::LabelMismatch {
            rows: logits.rows(),
            labels: labels.len(),
        });
    }
    let correct = labels
        .iter()
        .enumerate()
        .filter(|(i, &l)| argmax_row(logits.row(*i)) == l)
        .count();
    Ok(correct as f64 / logits.rows() as f64)
}

fn percentile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    // linear interpolation between closest ranks
    let rank = p / 100.0 * (n - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

/// Percentile summary by linear interpolation on the sorted values.
pub fn percentiles(values: &[f64]) -> Result<PercentileSummary, MetricsError> {
    if values.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("non-finite percentile input"));
    Ok(PercentileSummary {
        p5: percentile_sorted(&sorted, 5.0),
        p25: percentile_sorted(&sorted, 25.0),
        p50: percentile_sorted(&sorted, 50.0),
        p75: percentile_sorted(&sorted, 75.0),
        p95: percentile_sorted(&sorted, 95.0),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn accuracy_onehot_logits() {
        let logits = DenseMatrix::from_rows(&[&[0.0, 1.0], &[1.0, 0.0]]);
        assert_eq!(top1_accuracy(&logits, &[1, 0]).unwrap(), 1.0);
    }

    #[test]
    fn accuracy_tie_break_lowest_index() {
        let logits = DenseMatrix::from_rows(&[&[0.5, 0.5], &[0.5, 0.5]]);
        assert_eq!(top1_accuracy(&logits, &[0, 1]).unwrap(), 0.5);
    }

    #[test]
    fn accuracy_hand_count() {
        let logits = DenseMatrix::from_rows(&[
            &[2.0, 1.0, 0.0],
            &[0.0, 3.0, 1.0],
            &[1.0, 0.0, 2.0],
            &[0.0, 1.0, 5.0],
        ]);
        // labels hit rows 0, 1, 3 only
        assert_eq!(top1_accuracy(&logits, &[0, 1, 1, 2]).unwrap(), 0.75);
    }

    #[test]
    fn accuracy_errors() {
        let logits = DenseMatrix::zeros(0, 2);
        assert_eq!(top1_accuracy(&logits, &[]), Err(MetricsError::Empty));
        let logits = DenseMatrix::zeros(2, 2);
        assert!(top1_accuracy(&logits, &[0]).is_err());
    }

    #[test]
    fn percentile_cases() {
        let single = percentiles(&[7.0]).unwrap();
        assert_eq!(single.p5, 7.0);
        assert_eq!(single.p95, 7.0);

        let vals: Vec<f64> = (1..=100).map(|v| v as f64).collect();
        let s = percentiles(&vals).unwrap();
        assert_relative_eq!(s.p50, 50.5, max_relative = 1e-15);

        let c = percentiles(&[3.0; 9]).unwrap();
        assert_eq!(c.p5, 3.0);
        assert_eq!(c.p75, 3.0);
    }

    #[test]
    fn percentile_empty_is_error() {
        assert_eq!(percentiles(&[]), Err(MetricsError::Empty));
    }

    proptest! {
        #[test]
        fn prop_percentiles_monotone(values in proptest::collection::vec(-100.0f64..100.0, 1..50)) {
            let s = percentiles(&values).unwrap();
            prop_assert!(s.p5 <= s.p25 && s.p25 <= s.p50 && s.p50 <= s.p75 && s.p75 <= s.p95);
        }

        #[test]
        fn prop_accuracy_permutation_invariant(seed in 0u64..500) {
            use rand::seq::SliceRandom;
            let mut rng = crate::rng::stream(&[seed]);
            let logits = DenseMatrix::from_rows(&[
                &[1.0, 0.0], &[0.0, 1.0], &[2.0, 1.0], &[0.3, 0.6],
            ]);
            let labels = [0usize, 0, 1, 1];
            let base = top1_accuracy(&logits, &labels).unwrap();
            let mut order: Vec<usize> = (0..4).collect();
            order.shuffle(&mut rng);
            let mut rows: Vec<Vec<f64>> = Vec::new();
            let mut perm_labels = Vec::new();
            for &i in &order {
                rows.push(logits.row(i).to_vec());
                perm_labels.push(labels[i]);
            }
            let row_refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
            let permuted = DenseMatrix::from_rows(&row_refs);
            prop_assert_eq!(top1_accuracy(&permuted, &perm_labels).unwrap(), base);
        }
    }
}
