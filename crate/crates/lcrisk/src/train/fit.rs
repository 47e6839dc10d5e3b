//! Mini-batch training loop with best-checkpoint selection.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::adadelta::{clip_gradients, Adadelta};
use super::schedule::PlateauScheduler;
use super::split::SplitIndices;
use super::{TrainConfig, TrainError};
use crate::nn::{Mode, Model};
use crate::preprocess::EncodedCohort;

/// One row of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Learning rate in effect during this epoch's updates.
    pub lr: f64,
}

pub struct FitResult {
    /// The model restored to its best-validation-loss parameters, in eval mode.
    pub model: Model,
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
}

fn batch_views<'a>(
    cohort: &'a EncodedCohort,
    indices: &[usize],
) -> (Vec<&'a [u32]>, Vec<usize>) {
    let batch: Vec<&[u32]> = indices
        .iter()
        .map(|i| cohort.patients[*i].token_ids.as_slice())
        .collect();
    let labels: Vec<usize> = indices
        .iter()
        .map(|i| cohort.patients[*i].label as usize)
        .collect();
    (batch, labels)
}

fn mean_loss_over(
    model: &Model,
    cohort: &EncodedCohort,
    indices: &[usize],
    chunk: usize,
) -> Result<f64, TrainError> {
    if indices.is_empty() {
        return Ok(f64::NAN);
    }
    let mut total = 0.0;
    for block in indices.chunks(chunk) {
        let (batch, labels) = batch_views(cohort, block);
        total += model.mean_loss(&batch, &labels)? * block.len() as f64;
    }
    Ok(total / indices.len() as f64)
}

/// Train on `split.train`, tracking validation loss on `split.val` for the
/// plateau schedule and best-checkpoint selection. Batches are reshuffled
/// each epoch with the config seed; a short final batch is kept. The frozen
/// embedding table is never touched. Aborts with diagnostics on a non-finite
/// loss.
pub fn fit(
    mut model: Model,
    cohort: &EncodedCohort,
    split: &SplitIndices,
    config: &TrainConfig,
) -> Result<FitResult, TrainError> {
    config.validate()?;
    if split.train.is_empty() || split.val.is_empty() {
        return Err(TrainError::Config("train and validation sets must be non-empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut optimizer = Adadelta::new(config.lr, config.adadelta_rho, config.adadelta_eps);
    let mut scheduler = PlateauScheduler::new(config.lr, config.lr_decay, config.patience);
    let clip_abs = config.clip_bounds.0.abs().max(config.clip_bounds.1.abs());

    let mut order = split.train.clone();
    let mut log = Vec::with_capacity(config.max_epochs);
    let mut best_val_loss = f64::INFINITY;
    let mut best_epoch = 0;
    let mut best: Option<Model> = None;

    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng);
        model.set_mode(Mode::Train);
        let mut epoch_loss = 0.0;
        for (batch_no, block) in order.chunks(config.batch_size).enumerate() {
            let (batch, labels) = batch_views(cohort, block);
            let step = model.loss_and_grads(&batch, &labels)?;
            if !step.loss.is_finite() {
                return Err(TrainError::NonFiniteLoss { epoch, batch: batch_no });
            }
            epoch_loss += step.loss * block.len() as f64;
            let mut grads = step.grads;
            clip_gradients(&mut grads, config.clip_bounds);
            for (name, grad) in &grads {
                debug_assert!(
                    grad.max_abs() <= clip_abs,
                    "clipped gradient for {name} exceeds bound"
                );
                let param = model
                    .param_by_name_mut(name)
                    .expect("gradient names come from the model");
                optimizer.step(name, param, grad)?;
            }
            if let Some(stats) = &step.batch_stats {
                model.update_running_stats(stats);
            }
        }
        let train_loss = epoch_loss / order.len() as f64;

        model.set_mode(Mode::Eval);
        let val_loss = mean_loss_over(&model, cohort, &split.val, config.batch_size)?;
        if !val_loss.is_finite() {
            return Err(TrainError::NonFiniteLoss { epoch, batch: usize::MAX });
        }

        log.push(EpochLog { epoch, train_loss, val_loss, lr: optimizer.lr() });
        if val_loss < best_val_loss {
            best_val_loss = val_loss;
            best_epoch = epoch;
            best = Some(model.clone());
        }
        let next_lr = scheduler.observe(val_loss);
        optimizer.set_lr(next_lr);
    }

    let model = best.expect("at least one epoch ran");
    Ok(FitResult { model, log, best_epoch, best_val_loss })
}

/// CSV log with header `epoch,train_loss,val_loss,lr`.
pub fn write_epoch_log(log: &[EpochLog], path: &Path) -> std::io::Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "epoch,train_loss,val_loss,lr")?;
    for row in log {
        writeln!(w, "{},{},{},{}", row.epoch, row.train_loss, row.val_loss, row.lr)?;
    }
    w.flush()
}
