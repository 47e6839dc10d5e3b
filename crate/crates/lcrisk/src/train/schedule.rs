//! Reduce-on-plateau learning-rate schedule.

/// Decays the learning rate by `factor` whenever the best validation loss has
/// not improved for `patience` consecutive epochs. The stall counter resets
/// both on improvement and on decay, so the rate is non-increasing and decays
/// at most once per `patience` epochs.
#[derive(Debug, Clone)]
pub struct PlateauScheduler {
    lr: f64,
    factor: f64,
    patience: usize,
    best: f64,
    stalled: usize,
}

impl PlateauScheduler {
    pub fn new(lr: f64, factor: f64, patience: usize) -> Self {
        PlateauScheduler { lr, factor, patience, best: f64::INFINITY, stalled: 0 }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Record one epoch's validation loss; returns the rate to use next.
    pub fn observe(&mut self, val_loss: f64) -> f64 {
        if val_loss < self.best {
            self.best = val_loss;
            self.stalled = 0;
        } else {
            self.stalled += 1;
            if self.stalled >= self.patience {
                self.lr *= self.factor;
                self.stalled = 0;
            }
        }
        self.lr
    }
}
