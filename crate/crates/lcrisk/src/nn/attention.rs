//! Self-attention pooling over per-position hidden states.
//!
//! Projects each hidden state through `tanh(W h_t + b)`, scores it against a
//! learned context vector, softmax-normalizes the scores over positions, and
//! returns the attention-weighted sum of the hidden states.

use rand_chacha::ChaCha8Rng;

use super::init::uniform;
use super::ModelError;
use crate::autodiff::{Tape, Tensor, TensorError, Var};

#[derive(Debug, Clone)]
pub struct AttentionParams {
    /// Projection, `[2H, A]`.
    pub w: Tensor,
    /// Projection bias, `[A]`.
    pub b: Tensor,
    /// Context vector, `[A, 1]`.
    pub v: Tensor,
}

impl AttentionParams {
    pub fn init(input_dim: usize, width: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound_w = 1.0 / (input_dim as f64).sqrt();
        let bound_v = 1.0 / (width as f64).sqrt();
        AttentionParams {
            w: uniform(rng, &[input_dim, width], bound_w),
            b: uniform(rng, &[width], bound_w),
            v: uniform(rng, &[width, 1], bound_v),
        }
    }

    pub fn param_count(&self) -> usize {
        self.w.numel() + self.b.numel() + self.v.numel()
    }
}

pub(crate) struct AttentionVars {
    pub w: Var,
    pub b: Var,
    pub v: Var,
}

impl AttentionVars {
    pub fn register(tape: &mut Tape, params: &AttentionParams) -> Self {
        AttentionVars {
            w: tape.leaf(params.w.clone()),
            b: tape.leaf(params.b.clone()),
            v: tape.leaf(params.v.clone()),
        }
    }
}

/// Attention over `hidden [M, 2H]` on an existing tape. Returns the pooled
/// summary `[1, 2H]` and the weights `[M, 1]`.
pub(crate) fn attention_on_tape(
    tape: &mut Tape,
    hidden: Var,
    vars: &AttentionVars,
) -> Result<(Var, Var), TensorError> {
    let proj = tape.matmul(hidden, vars.w)?;
    let proj_b = tape.add(proj, vars.b)?;
    let u = tape.tanh(proj_b);
    let scores = tape.matmul(u, vars.v)?;
    let alpha = tape.softmax(scores, 0)?;
    let alpha_row = tape.transpose(alpha)?;
    let summary = tape.matmul(alpha_row, hidden)?;
    Ok((summary, alpha))
}

/// Attention pooling over plain hidden states `[M, 2H]`, returning the
/// summary `[2H]` and the weights `[M]`.
pub fn attention(
    hidden: &Tensor,
    params: &AttentionParams,
) -> Result<(Tensor, Tensor), ModelError> {
    let (m, _) = hidden.dims2()?;
    if m == 0 {
        return Err(ModelError::EmptySequence);
    }
    let mut tape = Tape::new();
    let h = tape.leaf(hidden.clone());
    let vars = AttentionVars::register(&mut tape, params);
    let (summary, alpha) = attention_on_tape(&mut tape, h, &vars)?;
    let s = Tensor::from_vec(
        &[tape.value(summary).numel()],
        tape.value(summary).data().to_vec(),
    )?;
    let a = Tensor::from_vec(&[m], tape.value(alpha).data().to_vec())?;
    Ok((s, a))
}
