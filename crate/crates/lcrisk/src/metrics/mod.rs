//! ROC curves, AUC, Youden's J threshold selection, and accuracy.
//!
//! The curve is built over the distinct score values in descending order with
//! tied scores grouped, and the area is taken with the trapezoid rule. Under
//! that construction the AUC coincides exactly with the Mann-Whitney
//! statistic (ties counted half), which the test oracle exploits.

mod plot;

pub use plot::{roc_svg, write_roc_csv};
pub(crate) use plot::xml_escape;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("scores and labels disagree in length: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("both classes must be present (got {positives} positives, {negatives} negatives)")]
    SingleClass { positives: usize, negatives: usize },
    #[error("scores must be finite")]
    NonFiniteScore,
}

/// Operating points of a classifier over descending score thresholds.
///
/// `thresholds[0]` is `+inf` (predict nothing positive), anchoring the curve
/// at (0, 0); the final point is (1, 1). FPR and TPR are non-decreasing.
#[derive(Debug, Clone)]
pub struct RocCurve {
    pub thresholds: Vec<f64>,
    pub fpr: Vec<f64>,
    pub tpr: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

/// ROC curve and area under it. Classifying "positive" means score at or
/// above a threshold; tied scores are grouped so their internal order never
/// matters.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<(RocCurve, f64), MetricError> {
    if scores.len() != labels.len() {
        return Err(MetricError::LengthMismatch(scores.len(), labels.len()));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(MetricError::NonFiniteScore);
    }
    let positives = labels.iter().filter(|l| **l == 1).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(MetricError::SingleClass { positives, negatives });
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|a, b| scores[*b].total_cmp(&scores[*a]));

    let mut thresholds = vec![f64::INFINITY];
    let mut fpr = vec![0.0];
    let mut tpr = vec![0.0];
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut i = 0;
    while i < order.len() {
        let score = scores[order[i]];
        while i < order.len() && scores[order[i]] == score {
            if labels[order[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        thresholds.push(score);
        fpr.push(fp as f64 / negatives as f64);
        tpr.push(tp as f64 / positives as f64);
    }

    let mut auc = 0.0;
    for k in 1..fpr.len() {
        auc += (fpr[k] - fpr[k - 1]) * (tpr[k] + tpr[k - 1]) / 2.0;
    }
    Ok((RocCurve { thresholds, fpr, tpr }, auc))
}

/// Threshold maximizing Youden's J = TPR − FPR, with ties broken toward the
/// higher threshold (the more specific classifier).
pub fn youden_threshold(curve: &RocCurve) -> (f64, f64) {
    let mut best_j = f64::NEG_INFINITY;
    let mut best_threshold = f64::INFINITY;
    for k in 0..curve.thresholds.len() {
        let j = curve.tpr[k] - curve.fpr[k];
        if j > best_j {
            best_j = j;
            best_threshold = curve.thresholds[k];
        }
    }
    (best_threshold, best_j)
}

/// Accuracy and confusion counts predicting positive iff `score >= threshold`.
pub fn accuracy_at(scores: &[f64], labels: &[u8], threshold: f64) -> (f64, Confusion) {
    let mut c = Confusion { tp: 0, fp: 0, tn: 0, fn_: 0 };
    for (s, l) in scores.iter().zip(labels) {
        let predicted = *s >= threshold;
        match (predicted, *l == 1) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    let n = scores.len().max(1);
    ((c.tp + c.tn) as f64 / n as f64, c)
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / values.len() as f64;
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// O(n^2) Mann-Whitney pair counting with half-credit for ties.
    fn mann_whitney(scores: &[f64], labels: &[u8]) -> f64 {
        let mut wins = 0.0;
        let mut pairs = 0.0;
        for (i, si) in scores.iter().enumerate() {
            if labels[i] != 1 {
                continue;
            }
            for (j, sj) in scores.iter().enumerate() {
                if labels[j] != 0 {
                    continue;
                }
                pairs += 1.0;
                if si > sj {
                    wins += 1.0;
                } else if si == sj {
                    wins += 0.5;
                }
            }
        }
        wins / pairs
    }

    #[test]
    fn perfectly_separated_scores_give_auc_one() {
        let scores = [0.9, 0.8, 0.2, 0.1];
        let labels = [1, 1, 0, 0];
        let (_, auc) = roc_auc(&scores, &labels).unwrap();
        assert_eq!(auc, 1.0);
    }

    #[test]
    fn identical_scores_give_auc_half() {
        let scores = [0.4; 6];
        let labels = [1, 0, 1, 0, 0, 1];
        let (curve, auc) = roc_auc(&scores, &labels).unwrap();
        assert!((auc - 0.5).abs() < 1e-15);
        let (_, j) = youden_threshold(&curve);
        assert_eq!(j, 0.0);
    }

    #[test]
    fn single_class_is_an_error() {
        assert!(matches!(
            roc_auc(&[0.1, 0.2], &[1, 1]),
            Err(MetricError::SingleClass { .. })
        ));
    }

    #[test]
    fn random_instances_match_pair_counting_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for case in 0..200 {
            let n = rng.random_range(4..40);
            let mut labels = vec![0u8; n];
            labels[0] = 1;
            for l in labels.iter_mut().skip(2) {
                *l = if rng.random_bool(0.4) { 1 } else { 0 };
            }
            // coarse grid of score values forces plenty of ties
            let scores: Vec<f64> =
                (0..n).map(|_| (rng.random_range(0..8) as f64) / 8.0).collect();
            let (_, auc) = roc_auc(&scores, &labels).unwrap();
            let oracle = mann_whitney(&scores, &labels);
            assert!(
                (auc - oracle).abs() <= 1e-9,
                "case {case}: auc {auc} vs oracle {oracle}"
            );
        }
    }

    #[test]
    fn auc_invariant_under_monotone_transform() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        for _ in 0..50 {
            let n = 30;
            let mut labels = vec![0u8; n];
            labels[0] = 1;
            for l in labels.iter_mut().skip(2) {
                *l = if rng.random_bool(0.3) { 1 } else { 0 };
            }
            let scores: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
            let (_, auc) = roc_auc(&scores, &labels).unwrap();
            let squashed: Vec<f64> = scores.iter().map(|s| (2.0 * s + 1.0).tanh()).collect();
            let (_, auc2) = roc_auc(&squashed, &labels).unwrap();
            assert!((auc - auc2).abs() < 1e-12);
        }
    }

    #[test]
    fn auc_of_negated_scores_complements() {
        let scores = [0.9, 0.7, 0.6, 0.3, 0.2, 0.05];
        let labels = [1, 0, 1, 1, 0, 0];
        let (_, auc) = roc_auc(&scores, &labels).unwrap();
        let negated: Vec<f64> = scores.iter().map(|s| -s).collect();
        let (_, auc_n) = roc_auc(&negated, &labels).unwrap();
        assert!((auc + auc_n - 1.0).abs() < 1e-15);
    }

    #[test]
    fn youden_on_perfect_split() {
        let scores = [0.9, 0.1];
        let labels = [1, 0];
        let (curve, _) = roc_auc(&scores, &labels).unwrap();
        let (threshold, j) = youden_threshold(&curve);
        assert_eq!(j, 1.0);
        assert!(threshold > 0.1 && threshold <= 0.9);
    }

    #[test]
    fn youden_matches_exhaustive_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for case in 0..200 {
            let n = rng.random_range(4..30);
            let mut labels = vec![1u8, 0];
            for _ in 2..n {
                labels.push(if rng.random_bool(0.5) { 1 } else { 0 });
            }
            let scores: Vec<f64> =
                (0..n).map(|_| (rng.random_range(0..10) as f64) / 10.0).collect();
            let (curve, _) = roc_auc(&scores, &labels).unwrap();
            let (threshold, j) = youden_threshold(&curve);

            // brute force over every candidate threshold (each score value
            // plus one above the max)
            let mut candidates: Vec<f64> = scores.clone();
            candidates.push(scores.iter().cloned().fold(f64::MIN, f64::max) + 1.0);
            let mut best = f64::NEG_INFINITY;
            for t in &candidates {
                let (_, c) = accuracy_at(&scores, &labels, *t);
                let tpr = c.tp as f64 / (c.tp + c.fn_) as f64;
                let fpr = c.fp as f64 / (c.fp + c.tn) as f64;
                best = best.max(tpr - fpr);
            }
            assert!((j - best).abs() < 1e-12, "case {case}: J {j} vs scan {best}");

            // the returned threshold must realize the same J
            let (_, c) = accuracy_at(&scores, &labels, threshold);
            let tpr = c.tp as f64 / (c.tp + c.fn_) as f64;
            let fpr = c.fp as f64 / (c.fp + c.tn) as f64;
            assert!((tpr - fpr - j).abs() < 1e-12);
        }
    }

    #[test]
    fn threshold_zero_accuracy_is_prevalence() {
        let scores = [0.3, 0.6, 0.8, 0.1, 0.5];
        let labels = [1, 0, 1, 0, 0];
        let (acc, c) = accuracy_at(&scores, &labels, 0.0);
        assert_eq!(acc, 2.0 / 5.0);
        assert_eq!(c.tp, 2);
        assert_eq!(c.fp, 3);
        assert_eq!(c.tn, 0);
        assert_eq!(c.fn_, 0);
    }

    #[test]
    fn perfect_scores_at_youden_threshold_hit_accuracy_one() {
        let scores = [0.95, 0.9, 0.2, 0.15];
        let labels = [1, 1, 0, 0];
        let (curve, _) = roc_auc(&scores, &labels).unwrap();
        let (threshold, _) = youden_threshold(&curve);
        let (acc, _) = accuracy_at(&scores, &labels, threshold);
        assert_eq!(acc, 1.0);
    }

    #[test]
    fn curve_is_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let scores: Vec<f64> = (0..50).map(|_| rng.random_range(0.0..1.0)).collect();
        let mut labels = vec![1u8, 0];
        for _ in 2..50 {
            labels.push(if rng.random_bool(0.5) { 1 } else { 0 });
        }
        let (curve, _) = roc_auc(&scores, &labels).unwrap();
        assert_eq!(curve.fpr[0], 0.0);
        assert_eq!(curve.tpr[0], 0.0);
        assert_eq!(*curve.fpr.last().unwrap(), 1.0);
        assert_eq!(*curve.tpr.last().unwrap(), 1.0);
        for k in 1..curve.fpr.len() {
            assert!(curve.fpr[k] >= curve.fpr[k - 1]);
            assert!(curve.tpr[k] >= curve.tpr[k - 1]);
            assert!(curve.thresholds[k] < curve.thresholds[k - 1]);
        }
    }
}
