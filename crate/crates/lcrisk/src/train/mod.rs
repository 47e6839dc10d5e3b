//! Training recipe: stratified splits, Adadelta with value clipping, plateau
//! learning-rate decay, and stratified cross-validation.
//!
//! Everything is seeded and single-threaded by default; given the same seed,
//! cohort, and configuration, every logged number is bit-identical across
//! runs. Cross-validation folds are independent and may run concurrently
//! without changing any output.

mod adadelta;
mod config;
mod crossval;
mod fit;
mod schedule;
mod split;

pub use adadelta::{clip_gradients, Adadelta};
pub use config::TrainConfig;
pub use crossval::{cross_validate, CrossValReport, CrossValResult, FoldOutcome, REFERENCE_NOTE};
pub use fit::{fit, write_epoch_log, EpochLog, FitResult};
pub use schedule::PlateauScheduler;
pub use split::{fold_assignment, split, SplitIndices};

use thiserror::Error;

use crate::metrics::MetricError;
use crate::nn::ModelError;
use crate::preprocess::EncodedCohort;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("stratification: {0}")]
    Stratification(String),
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("non-finite gradient for parameter '{param}'")]
    NonFiniteGradient { param: String },
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Positive-class probabilities for the given patients, scored in chunks.
pub fn score_patients(
    model: &crate::nn::Model,
    cohort: &EncodedCohort,
    indices: &[usize],
    chunk: usize,
) -> Result<Vec<f64>, ModelError> {
    let mut scores = Vec::with_capacity(indices.len());
    for block in indices.chunks(chunk.max(1)) {
        let batch: Vec<&[u32]> = block
            .iter()
            .map(|i| cohort.patients[*i].token_ids.as_slice())
            .collect();
        scores.extend(model.predict_proba(&batch)?);
    }
    Ok(scores)
}
