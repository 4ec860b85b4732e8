//! OOD evaluation metrics. ID is the positive class and higher scores mean
//! "more ID".
//!
//! Conventions are fixed so independent implementations agree bit for bit:
//! AUROC gives ties half credit, FPR@95 thresholds at a lower order
//! statistic, and AUPR uses step (average-precision) interpolation.

use serde::{Deserialize, Serialize};

use crate::error::{GrodError, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub id_acc: f64,
    pub fpr_at_95: f64,
    pub auroc: f64,
    pub aupr_in: f64,
    pub aupr_out: f64,
}

fn to_sorted<T: Scalar>(v: &[T]) -> Vec<f64> {
    let mut out: Vec<f64> = v.iter().map(|x| x.as_f64()).collect();
    out.sort_by(f64::total_cmp);
    out
}

fn nonempty<T>(v: &[T], which: &'static str) -> Result<()> {
    if v.is_empty() {
        Err(GrodError::EmptyClass(which))
    } else {
        Ok(())
    }
}

/// Index of the first element `≥ x` in an ascending slice.
fn lower_bound(sorted: &[f64], x: f64) -> usize {
    sorted.partition_point(|&v| v < x)
}

fn upper_bound(sorted: &[f64], x: f64) -> usize {
    sorted.partition_point(|&v| v <= x)
}

/// Twice the number of (ID, OOD) pairs ranked correctly, ties counting one.
pub fn auroc_pair_count<T: Scalar>(id_scores: &[T], ood_scores: &[T]) -> u128 {
    let ood = to_sorted(ood_scores);
    id_scores
        .iter()
        .map(|s| {
            let s = s.as_f64();
            let below = lower_bound(&ood, s) as u128;
            let equal = upper_bound(&ood, s) as u128 - below;
            2 * below + equal
        })
        .sum()
}

/// `P(id > ood) + ½·P(id = ood)`.
pub fn auroc<T: Scalar>(id_scores: &[T], ood_scores: &[T]) -> Result<f64> {
    nonempty(id_scores, "ID")?;
    nonempty(ood_scores, "OOD")?;
    let pairs = 2 * id_scores.len() as u128 * ood_scores.len() as u128;
    Ok(auroc_pair_count(id_scores, ood_scores) as f64 / pairs as f64)
}

/// 1-based order statistic used as the threshold for a target TPR.
pub fn threshold_rank(n: usize, tpr: f64) -> usize {
    // the 1e-9 guard keeps e.g. (1 − 0.95)·100 from rounding up to 6
    let k = ((1.0 - tpr) * n as f64 - 1e-9).ceil();
    (k.max(1.0) as usize).min(n)
}

/// Lower-interpolated `(1 − tpr)` quantile of the ID scores, so that at
/// least a `tpr` fraction of them is `≥` the returned threshold.
pub fn pick_threshold<T: Scalar>(id_scores: &[T], tpr: f64) -> Result<T> {
    nonempty(id_scores, "ID")?;
    let mut sorted = id_scores.to_vec();
    sorted.sort_by(|a, b| a.as_f64().total_cmp(&b.as_f64()));
    Ok(sorted[threshold_rank(sorted.len(), tpr) - 1])
}

/// Fraction of OOD scores at or above the ID threshold for `tpr`.
pub fn fpr_at_tpr<T: Scalar>(id_scores: &[T], ood_scores: &[T], tpr: f64) -> Result<f64> {
    nonempty(ood_scores, "OOD")?;
    let thr = pick_threshold(id_scores, tpr)?.as_f64();
    let passed = ood_scores.iter().filter(|s| s.as_f64() >= thr).count();
    Ok(passed as f64 / ood_scores.len() as f64)
}

/// Area under the precision-recall curve for `pos` as the positive class,
/// with step interpolation: `Σₜ (Rₜ − Rₜ₋₁)·Pₜ` over distinct thresholds
/// taken in descending order.
pub fn aupr<T: Scalar>(pos_scores: &[T], neg_scores: &[T]) -> Result<f64> {
    nonempty(pos_scores, "positive")?;
    nonempty(neg_scores, "negative")?;
    let mut all: Vec<(f64, bool)> = pos_scores
        .iter()
        .map(|s| (s.as_f64(), true))
        .chain(neg_scores.iter().map(|s| (s.as_f64(), false)))
        .collect();
    all.sort_by(|a, b| b.0.total_cmp(&a.0));
    let n_pos = pos_scores.len() as f64;
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut prev_tp = 0usize;
    let mut area = 0.0;
    let mut i = 0;
    while i < all.len() {
        let t = all[i].0;
        while i < all.len() && all[i].0 == t {
            if all[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        if tp > prev_tp {
            let precision = tp as f64 / (tp + fp) as f64;
            area += (tp - prev_tp) as f64 * precision;
            prev_tp = tp;
        }
    }
    // normalizing once keeps a perfect ranking at exactly 1
    Ok(area / n_pos)
}

pub fn aupr_in<T: Scalar>(id_scores: &[T], ood_scores: &[T]) -> Result<f64> {
    aupr(id_scores, ood_scores)
}

/// OOD as the positive class; scores are negated.
pub fn aupr_out<T: Scalar>(id_scores: &[T], ood_scores: &[T]) -> Result<f64> {
    let neg_ood: Vec<T> = ood_scores.iter().map(|&s| -s).collect();
    let neg_id: Vec<T> = id_scores.iter().map(|&s| -s).collect();
    aupr(&neg_ood, &neg_id)
}

/// Fraction of correct predictions. With `ood_label = Some(l)`, rows whose
/// true label is `l` are excluded.
pub fn id_accuracy(pred: &[usize], truth: &[usize], ood_label: Option<usize>) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(GrodError::LengthMismatch {
            left: pred.len(),
            right: truth.len(),
        });
    }
    let (mut hit, mut total) = (0usize, 0usize);
    for (&p, &t) in pred.iter().zip(truth) {
        if Some(t) == ood_label {
            continue;
        }
        total += 1;
        if p == t {
            hit += 1;
        }
    }
    if total == 0 {
        return Err(GrodError::EmptyClass("ID"));
    }
    Ok(hit as f64 / total as f64)
}

/// All four detection metrics plus a precomputed ID accuracy.
pub fn summarize<T: Scalar>(id_scores: &[T], ood_scores: &[T], id_acc: f64) -> Result<MetricSummary> {
    Ok(MetricSummary {
        id_acc,
        fpr_at_95: fpr_at_tpr(id_scores, ood_scores, 0.95)?,
        auroc: auroc(id_scores, ood_scores)?,
        aupr_in: aupr_in(id_scores, ood_scores)?,
        aupr_out: aupr_out(id_scores, ood_scores)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&[0.9, 0.8], &[0.1, 0.2]).unwrap(), 1.0);
        assert_eq!(auroc(&[0.9, 0.4], &[0.5, 0.1]).unwrap(), 0.75);
        assert_eq!(auroc(&[0.3, 0.3], &[0.3, 0.3, 0.3]).unwrap(), 0.5);
        assert!(matches!(auroc::<f64>(&[], &[0.1]), Err(GrodError::EmptyClass(_))));
    }

    #[test]
    fn threshold_examples() {
        let hundred: Vec<f64> = (0..100).map(|i| i as f64 * 0.37).collect();
        assert_eq!(pick_threshold(&hundred, 0.95).unwrap(), hundred[4]);
        assert_eq!(pick_threshold(&[2.5; 7], 0.95).unwrap(), 2.5);
        let twenty: Vec<f64> = (1..=20).map(f64::from).collect();
        assert_eq!(pick_threshold(&twenty, 0.95).unwrap(), 1.0);
    }

    #[test]
    fn fpr_examples() {
        assert_eq!(fpr_at_tpr(&[0.9, 0.8, 0.95], &[0.1, 0.2], 0.95).unwrap(), 0.0);
        let twenty: Vec<f64> = (1..=20).map(f64::from).collect();
        let above: Vec<f64> = (0..10).map(|i| 5.0 + i as f64).collect();
        assert_eq!(fpr_at_tpr(&twenty, &above, 0.95).unwrap(), 1.0);
        let same: Vec<f64> = (0..1000).map(|i| i as f64).collect();
        let fpr = fpr_at_tpr(&same, &same, 0.95).unwrap();
        assert!((fpr - 0.95).abs() <= 0.002, "{fpr}");
    }

    #[test]
    fn aupr_examples() {
        assert_eq!(aupr(&[0.9, 0.8], &[0.1, 0.2]).unwrap(), 1.0);
        assert_eq!(aupr_out(&[0.9, 0.8], &[0.1, 0.2]).unwrap(), 1.0);
        // ranking: pos 0.9, neg 0.5, pos 0.4, neg 0.1 → 1·½ + ⅔·½
        let v = aupr(&[0.9, 0.4], &[0.5, 0.1]).unwrap();
        assert!((v - (0.5 + 1.0 / 3.0)).abs() < 1e-15);
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(id_accuracy(&[0, 1, 2], &[0, 1, 2], None).unwrap(), 1.0);
        assert_eq!(id_accuracy(&[1, 0], &[0, 1], None).unwrap(), 0.0);
        let pred = [0, 1, 0, 1, 0, 1, 0, 1, 0, 1];
        let truth = [0, 1, 0, 1, 0, 0, 1, 0, 1, 0];
        assert_eq!(id_accuracy(&pred, &truth, None).unwrap(), 0.5);
        assert_eq!(id_accuracy(&[0, 2, 2], &[0, 1, 2], Some(2)).unwrap(), 0.5);
        assert!(matches!(id_accuracy(&[0], &[0, 1], None), Err(GrodError::LengthMismatch { .. })));
    }
}
