//! Adadelta updates with elementwise value clipping.
//!
//! Per coordinate, with accumulators zero-initialized:
//!
//! ```text
//! E[g²]  ← ρ·E[g²] + (1−ρ)·g²
//! Δx     = −( √(E[Δx²]+ε) / √(E[g²]+ε) ) · g
//! E[Δx²] ← ρ·E[Δx²] + (1−ρ)·Δx²
//! θ      ← θ + lr·Δx
//! ```
//!
//! The learning rate scales only the applied update, not the accumulated one.

use std::collections::BTreeMap;

use super::TrainError;
use crate::autodiff::Tensor;

/// Elementwise clamp of every gradient tensor to `[bounds.0, bounds.1]`.
pub fn clip_gradients(grads: &mut [(String, Tensor)], bounds: (f64, f64)) {
    for (_, g) in grads.iter_mut() {
        for v in g.data_mut() {
            *v = v.clamp(bounds.0, bounds.1);
        }
    }
}

pub struct Adadelta {
    lr: f64,
    rho: f64,
    eps: f64,
    state: BTreeMap<String, (Tensor, Tensor)>,
}

impl Adadelta {
    pub fn new(lr: f64, rho: f64, eps: f64) -> Self {
        Adadelta { lr, rho, eps, state: BTreeMap::new() }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    /// Apply one update to `param` in place. Accumulator state is keyed by
    /// parameter name and created lazily.
    pub fn step(
        &mut self,
        name: &str,
        param: &mut Tensor,
        grad: &Tensor,
    ) -> Result<(), TrainError> {
        if !grad.is_finite() {
            return Err(TrainError::NonFiniteGradient { param: name.to_string() });
        }
        let (eg2, edx2) = self
            .state
            .entry(name.to_string())
            .or_insert_with(|| (Tensor::zeros(grad.shape()), Tensor::zeros(grad.shape())));
        let rho = self.rho;
        let eps = self.eps;
        let lr = self.lr;
        for ((p, g), (a, d)) in param
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(eg2.data_mut().iter_mut().zip(edx2.data_mut()))
        {
            *a = rho * *a + (1.0 - rho) * g * g;
            let delta = -((*d + eps).sqrt() / (*a + eps).sqrt()) * g;
            *d = rho * *d + (1.0 - rho) * delta * delta;
            *p += lr * delta;
        }
        Ok(())
    }
}
