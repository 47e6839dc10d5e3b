//! Convolution unit: 1-D convolution, batch normalization, ReLU.
//!
//! The convolution uses kernel size 3 with zero padding 1, so activations
//! stay aligned one-to-one with input positions; token-level attribution
//! depends on that alignment. Batch normalization computes per-channel
//! statistics over whatever is concatenated along the length axis in train
//! mode, and uses running statistics in eval mode.

use rand_chacha::ChaCha8Rng;

use super::init::uniform;
use super::{Mode, ModelError};
use crate::autodiff::{BatchStats, Tape, Tensor, TensorError, Var};

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct ConvUnitParams {
    /// Kernels, `[C_out, C_in, k]`.
    pub kernels: Tensor,
    /// Convolution bias, `[C_out]`.
    pub bias: Tensor,
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub momentum: f64,
    pub eps: f64,
    pub padding: usize,
}

impl ConvUnitParams {
    pub fn init(channels: usize, input_dim: usize, kernel: usize, rng: &mut ChaCha8Rng) -> Self {
        let fan_in = input_dim * kernel;
        let bound = 1.0 / (fan_in as f64).sqrt();
        ConvUnitParams {
            kernels: uniform(rng, &[channels, input_dim, kernel], bound),
            bias: uniform(rng, &[channels], bound),
            gamma: Tensor::filled(&[channels], 1.0),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::filled(&[channels], 1.0),
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
            padding: kernel / 2,
        }
    }

    pub fn channels(&self) -> usize {
        self.kernels.shape()[0]
    }

    pub fn kernel(&self) -> usize {
        self.kernels.shape()[2]
    }

    pub fn learnable_count(&self) -> usize {
        self.kernels.numel() + self.bias.numel() + self.gamma.numel() + self.beta.numel()
    }

    /// Eval-mode normalization folded into per-channel scale and shift.
    pub fn eval_affine(&self) -> (Vec<f64>, Vec<f64>) {
        let c = self.channels();
        let mut scale = vec![0.0; c];
        let mut shift = vec![0.0; c];
        for ch in 0..c {
            let s = self.gamma.data()[ch] / (self.running_var.data()[ch] + self.eps).sqrt();
            scale[ch] = s;
            shift[ch] = self.beta.data()[ch] - self.running_mean.data()[ch] * s;
        }
        (scale, shift)
    }

    /// Exponential update of the running statistics from batch statistics.
    pub fn update_running(&mut self, stats: &BatchStats) {
        let m = self.momentum;
        for (r, b) in self.running_mean.data_mut().iter_mut().zip(&stats.mean) {
            *r = (1.0 - m) * *r + m * b;
        }
        for (r, b) in self.running_var.data_mut().iter_mut().zip(&stats.var_unbiased) {
            *r = (1.0 - m) * *r + m * b;
        }
    }
}

pub(crate) struct ConvVars {
    pub kernels: Var,
    pub bias: Var,
    pub gamma: Var,
    pub beta: Var,
}

impl ConvVars {
    pub fn register(tape: &mut Tape, params: &ConvUnitParams) -> Self {
        ConvVars {
            kernels: tape.leaf(params.kernels.clone()),
            bias: tape.leaf(params.bias.clone()),
            gamma: tape.leaf(params.gamma.clone()),
            beta: tape.leaf(params.beta.clone()),
        }
    }
}

/// Normalization + ReLU applied to an already-computed convolution map
/// `[C, N]`. Returns the activation plus batch statistics when in train mode.
pub(crate) fn normalize_and_relu(
    tape: &mut Tape,
    conv_out: Var,
    params: &ConvUnitParams,
    vars: &ConvVars,
    mode: Mode,
) -> Result<(Var, Option<BatchStats>), TensorError> {
    match mode {
        Mode::Train => {
            let (normed, stats) = tape.batch_norm(conv_out, vars.gamma, vars.beta, params.eps)?;
            Ok((tape.relu(normed), Some(stats)))
        }
        Mode::Eval => {
            let (scale, shift) = params.eval_affine();
            let normed = tape.channel_affine(conv_out, &scale, &shift)?;
            Ok((tape.relu(normed), None))
        }
    }
}

/// Full unit on a single sequence `x [D_in, L]` → `[C, L]`. In train mode the
/// batch statistics are taken over this sequence's length axis.
pub fn conv_unit_forward(
    x: &Tensor,
    params: &ConvUnitParams,
    mode: Mode,
) -> Result<Tensor, ModelError> {
    let (_, len) = x.dims2()?;
    if len + 2 * params.padding < params.kernel() {
        return Err(TensorError::Usage {
            op: "conv_unit_forward",
            msg: format!("sequence length {len} shorter than kernel {}", params.kernel()),
        }
        .into());
    }
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let vars = ConvVars::register(&mut tape, params);
    let conv = tape.conv1d(xv, vars.kernels, vars.bias, params.padding)?;
    let (out, _) = normalize_and_relu(&mut tape, conv, params, &vars, mode)?;
    Ok(tape.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn eval_identity_normalization() {
        // gamma=1, beta=0, running mean 0, running var 1: normalization is a
        // near-identity (up to the eps in the denominator)
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut params = ConvUnitParams::init(3, 2, 3, &mut rng);
        params.kernels = Tensor::zeros(&[3, 2, 3]);
        params.bias = Tensor::from_vec(&[3], vec![1.0, -2.0, 0.5]).unwrap();
        let x = uniform(&mut rng, &[2, 6], 1.0);
        let out = conv_unit_forward(&x, &params, Mode::Eval).unwrap();
        let expected_scale = 1.0 / (1.0f64 + BN_EPS).sqrt();
        for ch in 0..3 {
            let want = (params.bias.data()[ch] * expected_scale).max(0.0);
            for i in 0..6 {
                assert!((out.data()[ch * 6 + i] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn train_mode_centers_each_channel() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let params = ConvUnitParams::init(4, 3, 3, &mut rng);
        let x = uniform(&mut rng, &[3, 10], 1.0);

        let mut tape = Tape::new();
        let xv = tape.leaf(x);
        let vars = ConvVars::register(&mut tape, &params);
        let conv = tape.conv1d(xv, vars.kernels, vars.bias, 1).unwrap();
        let (normed, stats) = tape.batch_norm(conv, vars.gamma, vars.beta, params.eps).unwrap();
        let v = tape.value(normed);
        let (c, n) = v.dims2().unwrap();
        for ch in 0..c {
            let mean: f64 = v.data()[ch * n..(ch + 1) * n].iter().sum::<f64>() / n as f64;
            assert!(mean.abs() < 1e-10, "channel {ch} mean {mean}");
        }
        assert!(stats.var.iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn running_stats_update_uses_momentum() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut params = ConvUnitParams::init(2, 2, 3, &mut rng);
        let stats = BatchStats {
            mean: vec![1.0, -1.0],
            var: vec![4.0, 9.0],
            var_unbiased: vec![5.0, 10.0],
        };
        params.update_running(&stats);
        assert!((params.running_mean.data()[0] - 0.1).abs() < 1e-15);
        assert!((params.running_mean.data()[1] + 0.1).abs() < 1e-15);
        assert!((params.running_var.data()[0] - (0.9 + 0.5)).abs() < 1e-15);
        assert!((params.running_var.data()[1] - (0.9 + 1.0)).abs() < 1e-15);
    }

    #[test]
    fn too_short_sequence_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut params = ConvUnitParams::init(2, 2, 3, &mut rng);
        params.padding = 0;
        let x = Tensor::zeros(&[2, 2]);
        assert!(conv_unit_forward(&x, &params, Mode::Eval).is_err());
    }
}
