//! LSTM cell, directional parameters, and the bidirectional stack.
//!
//! A cell holds three gates (input, forget, output) plus the candidate
//! update. Gate pre-activations are computed in one fused `[B, 4H]` block in
//! the column order `i | f | g | o`:
//!
//! ```text
//! i = sigmoid(x·W_ih[:, 0H..1H] + h·W_hh[:, 0H..1H] + b[0H..1H])
//! f = sigmoid(...)        g = tanh(...)        o = sigmoid(...)
//! c' = f ⊙ c + i ⊙ g      h' = o ⊙ tanh(c')
//! ```

use rand_chacha::ChaCha8Rng;

use super::init::uniform;
use super::ModelError;
use crate::autodiff::{Tape, Tensor, TensorError, Var};

/// Weights for one direction of one LSTM layer.
#[derive(Debug, Clone)]
pub struct LstmDirParams {
    /// Input-to-hidden weights, `[D_in, 4H]`.
    pub w_ih: Tensor,
    /// Hidden-to-hidden weights, `[H, 4H]`.
    pub w_hh: Tensor,
    /// Gate biases, `[4H]`.
    pub bias: Tensor,
    pub hidden: usize,
}

impl LstmDirParams {
    /// Uniform(-1/sqrt(H), 1/sqrt(H)) initialization for all weights and biases.
    pub fn init(input_dim: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        LstmDirParams {
            w_ih: uniform(rng, &[input_dim, 4 * hidden], bound),
            w_hh: uniform(rng, &[hidden, 4 * hidden], bound),
            bias: uniform(rng, &[4 * hidden], bound),
            hidden,
        }
    }

    pub fn zeros(input_dim: usize, hidden: usize) -> Self {
        LstmDirParams {
            w_ih: Tensor::zeros(&[input_dim, 4 * hidden]),
            w_hh: Tensor::zeros(&[hidden, 4 * hidden]),
            bias: Tensor::zeros(&[4 * hidden]),
            hidden,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w_ih.shape()[0]
    }

    pub fn param_count(&self) -> usize {
        self.w_ih.numel() + self.w_hh.numel() + self.bias.numel()
    }
}

/// One LSTM layer: forward direction, plus a backward direction when the
/// architecture is bidirectional.
#[derive(Debug, Clone)]
pub struct LstmLayer {
    pub fwd: LstmDirParams,
    pub bwd: Option<LstmDirParams>,
}

impl LstmLayer {
    pub fn init(input_dim: usize, hidden: usize, bidirectional: bool, rng: &mut ChaCha8Rng) -> Self {
        let fwd = LstmDirParams::init(input_dim, hidden, rng);
        let bwd = bidirectional.then(|| LstmDirParams::init(input_dim, hidden, rng));
        LstmLayer { fwd, bwd }
    }

    pub fn output_dim(&self) -> usize {
        if self.bwd.is_some() {
            2 * self.fwd.hidden
        } else {
            self.fwd.hidden
        }
    }
}

/// Number of learnable scalars in one direction of one layer:
/// `4*(H*D_in + H*H + H)`.
pub fn lstm_direction_param_count(input_dim: usize, hidden: usize) -> usize {
    4 * (hidden * input_dim + hidden * hidden + hidden)
}

/// Direction parameters registered on a tape for one forward pass.
pub(crate) struct DirVars {
    pub w_ih: Var,
    pub w_hh: Var,
    pub bias: Var,
    pub hidden: usize,
}

impl DirVars {
    pub fn register(tape: &mut Tape, params: &LstmDirParams) -> Self {
        DirVars {
            w_ih: tape.leaf(params.w_ih.clone()),
            w_hh: tape.leaf(params.w_hh.clone()),
            bias: tape.leaf(params.bias.clone()),
            hidden: params.hidden,
        }
    }
}

/// One batched cell step: `x [B, D_in]`, `h`/`c [B, H]` → `(h', c')`.
pub(crate) fn lstm_step(
    tape: &mut Tape,
    x: Var,
    h: Var,
    c: Var,
    dir: &DirVars,
) -> Result<(Var, Var), TensorError> {
    let hsz = dir.hidden;
    let xw = tape.matmul(x, dir.w_ih)?;
    let hw = tape.matmul(h, dir.w_hh)?;
    let pre = tape.add(xw, hw)?;
    let gates = tape.add(pre, dir.bias)?;
    let i_pre = tape.slice_cols(gates, 0, hsz)?;
    let f_pre = tape.slice_cols(gates, hsz, hsz)?;
    let g_pre = tape.slice_cols(gates, 2 * hsz, hsz)?;
    let o_pre = tape.slice_cols(gates, 3 * hsz, hsz)?;
    let i = tape.sigmoid(i_pre);
    let f = tape.sigmoid(f_pre);
    let g = tape.tanh(g_pre);
    let o = tape.sigmoid(o_pre);
    let fc = tape.mul(f, c)?;
    let ig = tape.mul(i, g)?;
    let c_new = tape.add(fc, ig)?;
    let c_act = tape.tanh(c_new);
    let h_new = tape.mul(o, c_act)?;
    Ok((h_new, c_new))
}

/// Run one direction over a sequence of `[B, D_in]` inputs from zero state,
/// returning the hidden state after each position (indexed by position, not
/// visit order) plus the final state of the scan.
pub(crate) fn run_direction(
    tape: &mut Tape,
    inputs: &[Var],
    dir: &DirVars,
    batch: usize,
    reverse: bool,
) -> Result<(Vec<Var>, Var), TensorError> {
    let mut h = tape.leaf(Tensor::zeros(&[batch, dir.hidden]));
    let mut c = tape.leaf(Tensor::zeros(&[batch, dir.hidden]));
    let mut states = vec![h; inputs.len()];
    let order: Vec<usize> = if reverse {
        (0..inputs.len()).rev().collect()
    } else {
        (0..inputs.len()).collect()
    };
    for t in order {
        let (h_new, c_new) = lstm_step(tape, inputs[t], h, c, dir)?;
        h = h_new;
        c = c_new;
        states[t] = h;
    }
    Ok((states, h))
}

/// Single LSTM cell step on plain vectors: `x [D_in]`, `h`/`c [H]`.
pub fn lstm_cell(
    x: &Tensor,
    h: &Tensor,
    c: &Tensor,
    params: &LstmDirParams,
) -> Result<(Tensor, Tensor), ModelError> {
    let hsz = params.hidden;
    if x.shape() != [params.input_dim()] {
        return Err(TensorError::ShapeMismatch {
            op: "lstm_cell",
            lhs: x.shape().to_vec(),
            rhs: vec![params.input_dim()],
        }
        .into());
    }
    if h.shape() != [hsz] || c.shape() != [hsz] {
        return Err(TensorError::ShapeMismatch {
            op: "lstm_cell",
            lhs: h.shape().to_vec(),
            rhs: vec![hsz],
        }
        .into());
    }
    let mut tape = Tape::new();
    let xv = tape.leaf(Tensor::from_vec(&[1, x.numel()], x.data().to_vec())?);
    let hv = tape.leaf(Tensor::from_vec(&[1, hsz], h.data().to_vec())?);
    let cv = tape.leaf(Tensor::from_vec(&[1, hsz], c.data().to_vec())?);
    let dir = DirVars::register(&mut tape, params);
    let (h_new, c_new) = lstm_step(&mut tape, xv, hv, cv, &dir)?;
    let h_out = Tensor::from_vec(&[hsz], tape.value(h_new).data().to_vec())?;
    let c_out = Tensor::from_vec(&[hsz], tape.value(c_new).data().to_vec())?;
    Ok((h_out, c_out))
}

/// Bidirectional stack over a single sequence `[L, D_in]`, producing the
/// per-position concatenated hidden states `[L, 2H]` of the last layer.
/// Layer `n+1` consumes layer `n`'s `[L, 2H]` output; initial states are
/// zeros. Every layer must be bidirectional.
pub fn bilstm_forward(seq: &Tensor, layers: &[LstmLayer]) -> Result<Tensor, ModelError> {
    let (len, _) = seq.dims2()?;
    if len == 0 {
        return Err(ModelError::EmptySequence);
    }
    if layers.is_empty() {
        return Err(ModelError::Usage("no LSTM layers".into()));
    }
    let mut tape = Tape::new();
    let seq_var = tape.leaf(seq.clone());
    let mut inputs: Vec<Var> = (0..len)
        .map(|t| tape.row(seq_var, t))
        .collect::<Result<_, _>>()?;
    for layer in layers {
        let bwd = layer
            .bwd
            .as_ref()
            .ok_or_else(|| ModelError::Usage("bilstm_forward requires bidirectional layers".into()))?;
        let fwd_vars = DirVars::register(&mut tape, &layer.fwd);
        let bwd_vars = DirVars::register(&mut tape, bwd);
        let (states_f, _) = run_direction(&mut tape, &inputs, &fwd_vars, 1, false)?;
        let (states_b, _) = run_direction(&mut tape, &inputs, &bwd_vars, 1, true)?;
        inputs = (0..len)
            .map(|t| tape.concat_cols(&[states_f[t], states_b[t]]))
            .collect::<Result<_, _>>()?;
    }
    let stacked = tape.concat_rows(&inputs)?;
    Ok(tape.value(stacked).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn stable_sigmoid(x: f64) -> f64 {
        if x >= 0.0 {
            1.0 / (1.0 + (-x).exp())
        } else {
            x.exp() / (1.0 + x.exp())
        }
    }

    /// Standalone scalar-loop oracle for one cell step, independent of the
    /// tape machinery.
    fn cell_oracle(
        x: &[f64],
        h: &[f64],
        c: &[f64],
        params: &LstmDirParams,
    ) -> (Vec<f64>, Vec<f64>) {
        let hsz = params.hidden;
        let din = params.input_dim();
        let wih = params.w_ih.data();
        let whh = params.w_hh.data();
        let b = params.bias.data();
        let mut gates = vec![0.0; 4 * hsz];
        for j in 0..4 * hsz {
            let mut acc = b[j];
            for (d, xv) in x.iter().enumerate().take(din) {
                acc += xv * wih[d * 4 * hsz + j];
            }
            for (p, hv) in h.iter().enumerate().take(hsz) {
                acc += hv * whh[p * 4 * hsz + j];
            }
            gates[j] = acc;
        }
        let mut h_new = vec![0.0; hsz];
        let mut c_new = vec![0.0; hsz];
        for j in 0..hsz {
            let i = stable_sigmoid(gates[j]);
            let f = stable_sigmoid(gates[hsz + j]);
            let g = gates[2 * hsz + j].tanh();
            let o = stable_sigmoid(gates[3 * hsz + j]);
            c_new[j] = f * c[j] + i * g;
            h_new[j] = o * c_new[j].tanh();
        }
        (h_new, c_new)
    }

    #[test]
    fn zero_params_zero_state_gives_zero() {
        let params = LstmDirParams::zeros(3, 4);
        let x = Tensor::from_vec(&[3], vec![1.0, -2.0, 0.5]).unwrap();
        let h = Tensor::zeros(&[4]);
        let c = Tensor::zeros(&[4]);
        let (h2, c2) = lstm_cell(&x, &h, &c, &params).unwrap();
        assert!(h2.data().iter().all(|v| *v == 0.0));
        assert!(c2.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn zero_weights_unit_cell_state() {
        // sigmoid(0) = 0.5 for every gate, tanh candidate 0:
        // c' = 0.5 * 1 = 0.5, h' = 0.5 * tanh(0.5)
        let params = LstmDirParams::zeros(2, 3);
        let x = Tensor::from_vec(&[2], vec![3.0, -1.0]).unwrap();
        let h = Tensor::zeros(&[3]);
        let c = Tensor::filled(&[3], 1.0);
        let (h2, c2) = lstm_cell(&x, &h, &c, &params).unwrap();
        for j in 0..3 {
            assert!((c2.data()[j] - 0.5).abs() < 1e-15);
            assert!((h2.data()[j] - 0.5 * 0.5f64.tanh()).abs() < 1e-15);
        }
    }

    #[test]
    fn random_cell_matches_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let params = LstmDirParams::init(5, 4, &mut rng);
            let x = uniform(&mut rng, &[5], 1.0);
            let h = uniform(&mut rng, &[4], 1.0);
            let c = uniform(&mut rng, &[4], 1.0);
            let (h2, c2) = lstm_cell(&x, &h, &c, &params).unwrap();
            let (ho, co) = cell_oracle(x.data(), h.data(), c.data(), &params);
            for j in 0..4 {
                assert!((h2.data()[j] - ho[j]).abs() <= 1e-12);
                assert!((c2.data()[j] - co[j]).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn cell_shape_mismatch_is_an_error() {
        let params = LstmDirParams::zeros(3, 4);
        let x = Tensor::zeros(&[2]);
        let h = Tensor::zeros(&[4]);
        let c = Tensor::zeros(&[4]);
        assert!(lstm_cell(&x, &h, &c, &params).is_err());
    }

    #[test]
    fn direction_param_count_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = LstmDirParams::init(200, 128, &mut rng);
        assert_eq!(p.param_count(), lstm_direction_param_count(200, 128));
        assert_eq!(lstm_direction_param_count(200, 128), 4 * (128 * 200 + 128 * 128 + 128));
    }

    #[test]
    fn empty_sequence_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let layers = vec![LstmLayer::init(3, 2, true, &mut rng)];
        let seq = Tensor::zeros(&[0, 3]);
        assert!(matches!(
            bilstm_forward(&seq, &layers),
            Err(ModelError::EmptySequence)
        ));
    }

    #[test]
    fn single_step_sees_both_directions_equally() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let layer = LstmLayer::init(3, 4, true, &mut rng);
        let symmetric = LstmLayer {
            fwd: layer.fwd.clone(),
            bwd: Some(layer.fwd.clone()),
        };
        let seq = uniform(&mut rng, &[1, 3], 1.0);
        let hidden = bilstm_forward(&seq, &[symmetric]).unwrap();
        let (f, b) = hidden.data().split_at(4);
        assert_eq!(f, b, "L=1: both directions see the same single step");
    }

    #[test]
    fn palindrome_with_symmetric_params_mirrors() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let base = LstmDirParams::init(2, 3, &mut rng);
        let layer = LstmLayer { fwd: base.clone(), bwd: Some(base) };
        let len = 5;
        let mut rows = vec![vec![0.0; 2]; len];
        for t in 0..len {
            let v = uniform(&mut rng, &[2], 1.0).into_data();
            rows[t] = v.clone();
            rows[len - 1 - t] = v;
        }
        let seq =
            Tensor::from_vec(&[len, 2], rows.into_iter().flatten().collect()).unwrap();
        let hidden = bilstm_forward(&seq, &[layer]).unwrap();
        let h = hidden.data();
        for t in 0..len {
            for j in 0..3 {
                let fwd_t = h[t * 6 + j];
                let bwd_mirror = h[(len - 1 - t) * 6 + 3 + j];
                assert!(
                    (fwd_t - bwd_mirror).abs() < 1e-12,
                    "t={t} j={j}: {fwd_t} vs {bwd_mirror}"
                );
            }
        }
    }

    #[test]
    fn bidirectional_matches_composed_unidirectional_runs() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let layer = LstmLayer::init(3, 4, true, &mut rng);
        let seq = uniform(&mut rng, &[6, 3], 1.0);
        let hidden = bilstm_forward(&seq, &[layer.clone()]).unwrap();

        // oracle: run the forward direction on the sequence, the backward
        // direction on the reversed sequence, and interleave by hand
        let run_uni = |params: &LstmDirParams, rows: &[Vec<f64>]| -> Vec<Vec<f64>> {
            let mut h = Tensor::zeros(&[4]);
            let mut c = Tensor::zeros(&[4]);
            let mut out = Vec::new();
            for r in rows {
                let x = Tensor::from_vec(&[3], r.clone()).unwrap();
                let (h2, c2) = lstm_cell(&x, &h, &c, params).unwrap();
                h = h2;
                c = c2;
                out.push(h.data().to_vec());
            }
            out
        };
        let rows: Vec<Vec<f64>> = seq.data().chunks(3).map(|r| r.to_vec()).collect();
        let mut reversed = rows.clone();
        reversed.reverse();
        let fwd = run_uni(&layer.fwd, &rows);
        let mut bwd = run_uni(layer.bwd.as_ref().unwrap(), &reversed);
        bwd.reverse();
        for t in 0..6 {
            for j in 0..4 {
                assert!((hidden.data()[t * 8 + j] - fwd[t][j]).abs() < 1e-12);
                assert!((hidden.data()[t * 8 + 4 + j] - bwd[t][j]).abs() < 1e-12);
            }
        }
    }
}
