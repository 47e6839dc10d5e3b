//! Deterministic label-stratified splitting and fold assignment.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::TrainError;

/// Disjoint, exhaustive train/validation/test partition (patient indices).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

fn class_indices(labels: &[u8]) -> Result<[Vec<usize>; 2], TrainError> {
    let mut by_class: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
    for (i, l) in labels.iter().enumerate() {
        by_class[usize::from(*l == 1)].push(i);
    }
    if by_class[0].is_empty() || by_class[1].is_empty() {
        return Err(TrainError::Stratification(format!(
            "both classes must be present ({} negatives, {} positives)",
            by_class[0].len(),
            by_class[1].len()
        )));
    }
    Ok(by_class)
}

/// Largest-remainder apportionment of `n` items to the given ratios.
fn apportion(n: usize, ratios: &[f64]) -> Vec<usize> {
    let exact: Vec<f64> = ratios.iter().map(|r| r * n as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..ratios.len()).collect();
    order.sort_by(|a, b| {
        let fa = exact[*a] - exact[*a].floor();
        let fb = exact[*b] - exact[*b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(b))
    });
    for part in order.iter().take(n - assigned) {
        counts[*part] += 1;
    }
    counts
}

/// Label-stratified split into train/val/test by the given ratios,
/// deterministic for a fixed seed. Within each class the per-part counts are
/// largest-remainder rounded, so every part's class mix is within one sample
/// of the global mix.
pub fn split(
    labels: &[u8],
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<SplitIndices, TrainError> {
    if labels.is_empty() {
        return Err(TrainError::Stratification("empty cohort".into()));
    }
    let by_class = class_indices(labels)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut parts = SplitIndices { train: Vec::new(), val: Vec::new(), test: Vec::new() };
    for mut members in by_class {
        members.shuffle(&mut rng);
        let counts = apportion(members.len(), &[ratios.0, ratios.1, ratios.2]);
        let (train_end, val_end) = (counts[0], counts[0] + counts[1]);
        parts.train.extend_from_slice(&members[..train_end]);
        parts.val.extend_from_slice(&members[train_end..val_end]);
        parts.test.extend_from_slice(&members[val_end..]);
    }
    parts.train.sort_unstable();
    parts.val.sort_unstable();
    parts.test.sort_unstable();
    Ok(parts)
}

/// Stratified k-fold assignment: per-class shuffle, then round-robin deal, so
/// per-fold class counts differ by at most one.
pub fn fold_assignment(labels: &[u8], folds: usize, seed: u64) -> Result<Vec<usize>, TrainError> {
    if folds < 2 {
        return Err(TrainError::Stratification("need at least 2 folds".into()));
    }
    let by_class = class_indices(labels)?;
    if by_class[1].len() < folds || by_class[0].len() < folds {
        return Err(TrainError::Stratification(format!(
            "each class needs at least {folds} members"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assignment = vec![0usize; labels.len()];
    for mut members in by_class {
        members.shuffle(&mut rng);
        for (pos, idx) in members.iter().enumerate() {
            assignment[*idx] = pos % folds;
        }
    }
    Ok(assignment)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn labels(n: usize, positive_every: usize) -> Vec<u8> {
        (0..n).map(|i| u8::from(i % positive_every == 0)).collect()
    }

    #[test]
    fn thousand_patients_split_750_150_100() {
        let labels = labels(1000, 6);
        let s = split(&labels, (0.75, 0.15, 0.10), 7).unwrap();
        assert!((s.train.len() as i64 - 750).abs() <= 1);
        assert!((s.val.len() as i64 - 150).abs() <= 1);
        assert!((s.test.len() as i64 - 100).abs() <= 1);
        assert_eq!(s.train.len() + s.val.len() + s.test.len(), 1000);
    }

    #[test]
    fn split_is_disjoint_exhaustive_and_deterministic() {
        let labels = labels(313, 5);
        let a = split(&labels, (0.75, 0.15, 0.10), 3).unwrap();
        let b = split(&labels, (0.75, 0.15, 0.10), 3).unwrap();
        assert_eq!(a, b);
        let mut all: Vec<usize> =
            a.train.iter().chain(&a.val).chain(&a.test).cloned().collect();
        all.sort_unstable();
        assert_eq!(all, (0..313).collect::<Vec<_>>());
        let c = split(&labels, (0.75, 0.15, 0.10), 4).unwrap();
        assert_ne!(a, c, "different seed should shuffle differently");
    }

    #[test]
    fn class_ratio_within_one_sample_of_global() {
        // counting oracle over the emitted assignment
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        for trial in 0..50 {
            let n = rng.random_range(40..400);
            let mut labels = vec![0u8; n];
            for l in labels.iter_mut() {
                *l = u8::from(rng.random_bool(0.25));
            }
            if !labels.contains(&1) || !labels.contains(&0) {
                continue;
            }
            let total_pos = labels.iter().filter(|l| **l == 1).count() as f64;
            let ratios = (0.75, 0.15, 0.10);
            let s = split(&labels, ratios, trial).unwrap();
            for (part, ratio) in
                [(&s.train, 0.75f64), (&s.val, 0.15), (&s.test, 0.10)]
            {
                let pos = part.iter().filter(|i| labels[**i] == 1).count() as f64;
                let expected = total_pos * ratio;
                assert!(
                    (pos - expected).abs() <= 1.0 + 1e-9,
                    "trial {trial}: {pos} positives vs expected {expected} (ratio {ratio})"
                );
            }
        }
    }

    #[test]
    fn single_class_cohort_is_a_stratification_error() {
        assert!(split(&[0, 0, 0], (0.75, 0.15, 0.10), 1).is_err());
        assert!(fold_assignment(&[1, 1, 1], 3, 1).is_err());
    }

    #[test]
    fn folds_balance_positives_within_one() {
        let labels = labels(1000, 6);
        let assignment = fold_assignment(&labels, 3, 11).unwrap();
        let mut pos = [0usize; 3];
        let mut neg = [0usize; 3];
        for (i, f) in assignment.iter().enumerate() {
            if labels[i] == 1 {
                pos[*f] += 1;
            } else {
                neg[*f] += 1;
            }
        }
        assert!(pos.iter().max().unwrap() - pos.iter().min().unwrap() <= 1, "{pos:?}");
        assert!(neg.iter().max().unwrap() - neg.iter().min().unwrap() <= 1, "{neg:?}");
    }
}
