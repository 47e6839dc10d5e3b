//! Stratified k-fold cross-validation.
//!
//! Each fold holds out its patients as the test set; the 75:15:10 split is
//! applied inside the remainder to furnish the validation set the plateau
//! schedule needs (the inner test share goes unused). Fold models are
//! independently seeded as `spec.seed + fold`, so folds may run concurrently
//! without changing any number.

use serde::{Deserialize, Serialize};

use super::fit::{fit, EpochLog};
use super::split::{fold_assignment, split};
use super::{score_patients, TrainConfig, TrainError};
use crate::metrics::{accuracy_at, mean_std, roc_auc, youden_threshold, Confusion};
use crate::nn::{Model, ModelSpec};
use crate::preprocess::EncodedCohort;

/// Caveat attached to every metrics report: scores depend on the cohort
/// supplied, and the published reference numbers are tied to data this
/// toolkit cannot ship.
pub const REFERENCE_NOTE: &str = "Metrics reflect the supplied cohort only. The reference \
results on the restricted-access N3C Long COVID cohort (mean AUC 0.75 +/- 0.01 over 3-fold \
stratified cross-validation; 70.48% accuracy at the Youden threshold on the best fold) cannot \
be reproduced without access to that data. This toolkit reproduces the protocol - stratified \
folds, AUC, Youden threshold selection, accuracy at the selected threshold - not those numbers.";

/// Everything produced for one fold.
pub struct FoldOutcome {
    pub fold: usize,
    pub auc: f64,
    pub model: Model,
    pub test_indices: Vec<usize>,
    pub scores: Vec<f64>,
    pub labels: Vec<u8>,
    pub log: Vec<EpochLog>,
}

pub struct CrossValResult {
    pub folds: Vec<FoldOutcome>,
    pub report: CrossValReport,
}

/// Serializable cross-validation summary (the `metrics.json` payload).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CrossValReport {
    pub arch: String,
    pub folds: usize,
    pub per_fold_auc: Vec<f64>,
    pub mean_auc: f64,
    pub std_auc: f64,
    pub best_fold: usize,
    pub youden_threshold: f64,
    pub youden_j: f64,
    pub accuracy_at_best_threshold: f64,
    pub confusion: Confusion,
    pub note: String,
}

fn run_fold(
    cohort: &EncodedCohort,
    spec: &ModelSpec,
    config: &TrainConfig,
    assignment: &[usize],
    fold: usize,
) -> Result<FoldOutcome, TrainError> {
    let test_indices: Vec<usize> = (0..cohort.patients.len())
        .filter(|i| assignment[*i] == fold)
        .collect();
    let rest: Vec<usize> = (0..cohort.patients.len())
        .filter(|i| assignment[*i] != fold)
        .collect();
    let rest_labels: Vec<u8> = rest.iter().map(|i| cohort.patients[*i].label).collect();
    let inner = split(&rest_labels, config.split, config.seed.wrapping_add(fold as u64))?;
    let inner_split = super::split::SplitIndices {
        train: inner.train.iter().map(|i| rest[*i]).collect(),
        val: inner.val.iter().map(|i| rest[*i]).collect(),
        test: inner.test.iter().map(|i| rest[*i]).collect(),
    };

    let mut fold_spec = spec.clone();
    fold_spec.seed = spec.seed.wrapping_add(fold as u64);
    let mut fold_config = config.clone();
    fold_config.seed = config.seed.wrapping_add(fold as u64);

    let model = Model::new(fold_spec, cohort.embedding.weights().clone())?;
    let result = fit(model, cohort, &inner_split, &fold_config)?;

    let scores = score_patients(&result.model, cohort, &test_indices, config.batch_size)?;
    let labels: Vec<u8> = test_indices.iter().map(|i| cohort.patients[*i].label).collect();
    let (_, auc) = roc_auc(&scores, &labels)?;
    Ok(FoldOutcome {
        fold,
        auc,
        model: result.model,
        test_indices,
        scores,
        labels,
        log: result.log,
    })
}

/// Run stratified k-fold cross-validation. With `parallel` the folds run on
/// separate threads; outputs are identical either way by construction.
pub fn cross_validate(
    cohort: &EncodedCohort,
    spec: &ModelSpec,
    config: &TrainConfig,
    parallel: bool,
) -> Result<CrossValResult, TrainError> {
    config.validate()?;
    let labels = cohort.labels();
    let assignment = fold_assignment(&labels, config.folds, config.seed)?;

    let mut folds: Vec<FoldOutcome> = if parallel {
        let results: Vec<Result<FoldOutcome, TrainError>> = std::thread::scope(|scope| {
            let handles: Vec<_> = (0..config.folds)
                .map(|fold| {
                    let assignment = &assignment;
                    scope.spawn(move || run_fold(cohort, spec, config, assignment, fold))
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("fold thread panicked")).collect()
        });
        results.into_iter().collect::<Result<_, _>>()?
    } else {
        (0..config.folds)
            .map(|fold| run_fold(cohort, spec, config, &assignment, fold))
            .collect::<Result<_, _>>()?
    };
    folds.sort_by_key(|f| f.fold);

    let per_fold_auc: Vec<f64> = folds.iter().map(|f| f.auc).collect();
    let (mean_auc, std_auc) = mean_std(&per_fold_auc);
    let best_fold = per_fold_auc
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap().then(b.0.cmp(&a.0)))
        .map(|(i, _)| i)
        .expect("at least two folds");
    let best = &folds[best_fold];
    let (curve, _) = roc_auc(&best.scores, &best.labels)?;
    let (threshold, j) = youden_threshold(&curve);
    let (accuracy, confusion) = accuracy_at(&best.scores, &best.labels, threshold);

    let report = CrossValReport {
        arch: spec.arch.to_string(),
        folds: config.folds,
        per_fold_auc,
        mean_auc,
        std_auc,
        best_fold,
        youden_threshold: threshold,
        youden_j: j,
        accuracy_at_best_threshold: accuracy,
        confusion,
        note: REFERENCE_NOTE.to_string(),
    };
    Ok(CrossValResult { folds, report })
}
