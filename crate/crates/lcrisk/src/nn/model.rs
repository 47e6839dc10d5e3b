//! Model assembly: embedding lookup, architecture stack, linear head.
//!
//! The embedding table is frozen: token vectors enter the tape as constant
//! leaves, so no gradient path ever reaches the table. All four
//! architectures share the LSTM stack; the CNN variant prepends the
//! convolution unit and max-pool, the attention variant replaces the final
//! hidden state with an attention pool over all positions.
//!
//! Forward passes are batched. Per-sample convolution maps are concatenated
//! along the length axis before batch normalization, so train-mode statistics
//! are taken jointly over batch and length; eval mode uses running statistics
//! and is therefore independent of batch composition.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::attention::{attention_on_tape, AttentionParams, AttentionVars};
use super::conv_unit::{normalize_and_relu, ConvUnitParams, ConvVars};
use super::init::uniform;
use super::lstm::{run_direction, DirVars, LstmLayer};
use super::{Architecture, Mode, ModelError, ModelSpec};
use crate::autodiff::{BatchStats, Tape, Tensor, Var};

pub struct Model {
    spec: ModelSpec,
    embedding: Tensor,
    lstm: Vec<LstmLayer>,
    attention: Option<AttentionParams>,
    conv: Option<ConvUnitParams>,
    head_w: Tensor,
    head_b: Tensor,
    mode: Mode,
}

/// Handles produced by one batched forward pass.
pub struct BatchForward {
    /// `[B, classes]` logits.
    pub logits: Var,
    /// Raw (pre-normalization) convolution maps, one `[C, L]` per sample;
    /// empty for non-CNN architectures.
    pub conv_maps: Vec<Var>,
    /// Learnable parameters as registered on the tape, in declaration order.
    pub param_vars: Vec<(String, Var)>,
    /// Batch-norm statistics (train mode, CNN architecture only).
    pub batch_stats: Option<BatchStats>,
}

/// Loss and parameter gradients for one mini-batch.
pub struct TrainStep {
    pub loss: f64,
    pub grads: Vec<(String, Tensor)>,
    pub batch_stats: Option<BatchStats>,
}

impl Model {
    /// Build a model with freshly initialized parameters over a frozen
    /// embedding table `[V, D]`.
    pub fn new(spec: ModelSpec, embedding: Tensor) -> Result<Self, ModelError> {
        spec.validate()?;
        let (_, dim) = embedding.dims2()?;
        if dim != spec.embed_dim {
            return Err(ModelError::Usage(format!(
                "embedding table is {dim}-dimensional, spec wants {}",
                spec.embed_dim
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let conv = (spec.arch == Architecture::BiLstmCnn).then(|| {
            ConvUnitParams::init(spec.conv_channels, spec.embed_dim, spec.kernel, &mut rng)
        });
        let bidirectional = spec.arch.is_bidirectional();
        let mut lstm = Vec::with_capacity(spec.layers);
        let mut input_dim = if conv.is_some() { spec.conv_channels } else { spec.embed_dim };
        for _ in 0..spec.layers {
            let layer = LstmLayer::init(input_dim, spec.hidden, bidirectional, &mut rng);
            input_dim = layer.output_dim();
            lstm.push(layer);
        }
        let attention = (spec.arch == Architecture::BiLstmAttn)
            .then(|| AttentionParams::init(2 * spec.hidden, spec.attn_width, &mut rng));
        let head_in = input_dim;
        let bound = 1.0 / (head_in as f64).sqrt();
        let head_w = uniform(&mut rng, &[head_in, spec.classes], bound);
        let head_b = uniform(&mut rng, &[spec.classes], bound);
        Ok(Model {
            spec,
            embedding,
            lstm,
            attention,
            conv,
            head_w,
            head_b,
            mode: Mode::Eval,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub fn embedding(&self) -> &Tensor {
        &self.embedding
    }

    pub fn vocab_size(&self) -> usize {
        self.embedding.shape()[0]
    }

    pub fn conv_params(&self) -> Option<&ConvUnitParams> {
        self.conv.as_ref()
    }

    pub fn lstm_layers(&self) -> &[LstmLayer] {
        &self.lstm
    }

    /// Learnable parameters with stable names, in network order. The frozen
    /// embedding table and batch-norm running statistics are not included.
    pub fn named_parameters(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = Vec::new();
        if let Some(conv) = &self.conv {
            out.push(("conv.kernels".into(), &conv.kernels));
            out.push(("conv.bias".into(), &conv.bias));
            out.push(("conv.gamma".into(), &conv.gamma));
            out.push(("conv.beta".into(), &conv.beta));
        }
        for (l, layer) in self.lstm.iter().enumerate() {
            out.push((format!("lstm.{l}.fwd.w_ih"), &layer.fwd.w_ih));
            out.push((format!("lstm.{l}.fwd.w_hh"), &layer.fwd.w_hh));
            out.push((format!("lstm.{l}.fwd.bias"), &layer.fwd.bias));
            if let Some(bwd) = &layer.bwd {
                out.push((format!("lstm.{l}.bwd.w_ih"), &bwd.w_ih));
                out.push((format!("lstm.{l}.bwd.w_hh"), &bwd.w_hh));
                out.push((format!("lstm.{l}.bwd.bias"), &bwd.bias));
            }
        }
        if let Some(attn) = &self.attention {
            out.push(("attn.w".into(), &attn.w));
            out.push(("attn.b".into(), &attn.b));
            out.push(("attn.v".into(), &attn.v));
        }
        out.push(("head.w".into(), &self.head_w));
        out.push(("head.b".into(), &self.head_b));
        out
    }

    /// Non-learnable state that still belongs in checkpoints.
    pub fn named_buffers(&self) -> Vec<(String, &Tensor)> {
        match &self.conv {
            Some(conv) => vec![
                ("conv.running_mean".into(), &conv.running_mean),
                ("conv.running_var".into(), &conv.running_var),
            ],
            None => Vec::new(),
        }
    }

    pub fn param_by_name_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        if let Some(conv) = &mut self.conv {
            match name {
                "conv.kernels" => return Some(&mut conv.kernels),
                "conv.bias" => return Some(&mut conv.bias),
                "conv.gamma" => return Some(&mut conv.gamma),
                "conv.beta" => return Some(&mut conv.beta),
                "conv.running_mean" => return Some(&mut conv.running_mean),
                "conv.running_var" => return Some(&mut conv.running_var),
                _ => {}
            }
        }
        if let Some(rest) = name.strip_prefix("lstm.") {
            let mut it = rest.splitn(3, '.');
            let layer: usize = it.next()?.parse().ok()?;
            let dir = it.next()?;
            let field = it.next()?;
            let layer = self.lstm.get_mut(layer)?;
            let params = match dir {
                "fwd" => &mut layer.fwd,
                "bwd" => layer.bwd.as_mut()?,
                _ => return None,
            };
            return match field {
                "w_ih" => Some(&mut params.w_ih),
                "w_hh" => Some(&mut params.w_hh),
                "bias" => Some(&mut params.bias),
                _ => None,
            };
        }
        if let Some(attn) = &mut self.attention {
            match name {
                "attn.w" => return Some(&mut attn.w),
                "attn.b" => return Some(&mut attn.b),
                "attn.v" => return Some(&mut attn.v),
                _ => {}
            }
        }
        match name {
            "head.w" => Some(&mut self.head_w),
            "head.b" => Some(&mut self.head_b),
            _ => None,
        }
    }

    /// Total learnable scalar count.
    pub fn parameter_count(&self) -> usize {
        self.named_parameters().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn update_running_stats(&mut self, stats: &BatchStats) {
        if let Some(conv) = &mut self.conv {
            conv.update_running(stats);
        }
    }

    fn check_tokens(&self, batch: &[&[u32]]) -> Result<(usize, usize), ModelError> {
        if batch.is_empty() {
            return Err(ModelError::Usage("empty batch".into()));
        }
        let len = batch[0].len();
        if len == 0 {
            return Err(ModelError::EmptySequence);
        }
        let vocab = self.vocab_size();
        for ids in batch {
            if ids.len() != len {
                return Err(ModelError::Usage(format!(
                    "ragged batch: lengths {} and {}",
                    len,
                    ids.len()
                )));
            }
            for &id in *ids {
                if id as usize >= vocab {
                    return Err(ModelError::UnknownToken { token: id, vocab });
                }
            }
        }
        Ok((batch.len(), len))
    }

    /// Embeddings of one sequence laid out as a `[D, L]` convolution input.
    fn conv_input(&self, ids: &[u32]) -> Tensor {
        let d = self.spec.embed_dim;
        let len = ids.len();
        let emb = self.embedding.data();
        let mut data = vec![0.0; d * len];
        for (t, &id) in ids.iter().enumerate() {
            let row = &emb[id as usize * d..(id as usize + 1) * d];
            for (dim, v) in row.iter().enumerate() {
                data[dim * len + t] = *v;
            }
        }
        Tensor::from_vec(&[d, len], data).expect("conv input shape")
    }

    /// Embeddings at position `t` across the batch, `[B, D]`.
    fn embed_step(&self, batch: &[&[u32]], t: usize) -> Tensor {
        let d = self.spec.embed_dim;
        let emb = self.embedding.data();
        let mut data = Vec::with_capacity(batch.len() * d);
        for ids in batch {
            let id = ids[t] as usize;
            data.extend_from_slice(&emb[id * d..(id + 1) * d]);
        }
        Tensor::from_vec(&[batch.len(), d], data).expect("embed step shape")
    }

    /// Batched forward pass. All sequences must share one length.
    pub fn forward_batch(
        &self,
        tape: &mut Tape,
        batch: &[&[u32]],
    ) -> Result<BatchForward, ModelError> {
        let (b, len) = self.check_tokens(batch)?;
        let mut param_vars: Vec<(String, Var)> = Vec::new();

        let mut conv_maps = Vec::new();
        let mut batch_stats = None;
        let mut inputs: Vec<Var>;
        match &self.conv {
            Some(conv) => {
                if len < self.spec.pool {
                    return Err(ModelError::Usage(format!(
                        "sequence length {len} shorter than pool size {}",
                        self.spec.pool
                    )));
                }
                let vars = ConvVars::register(tape, conv);
                param_vars.push(("conv.kernels".into(), vars.kernels));
                param_vars.push(("conv.bias".into(), vars.bias));
                param_vars.push(("conv.gamma".into(), vars.gamma));
                param_vars.push(("conv.beta".into(), vars.beta));
                for ids in batch {
                    let x = tape.leaf(self.conv_input(ids));
                    let map = tape.conv1d(x, vars.kernels, vars.bias, conv.padding)?;
                    conv_maps.push(map);
                }
                let joint = if conv_maps.len() == 1 {
                    conv_maps[0]
                } else {
                    tape.concat_cols(&conv_maps)?
                };
                let (activated, stats) = normalize_and_relu(tape, joint, conv, &vars, self.mode)?;
                batch_stats = stats;
                let l_seq = len / self.spec.pool;
                let mut per_sample = Vec::with_capacity(b);
                for s in 0..b {
                    let slice = tape.slice_cols(activated, s * len, len)?;
                    let pooled = tape.maxpool1d(slice, self.spec.pool)?;
                    per_sample.push(tape.transpose(pooled)?);
                }
                inputs = Vec::with_capacity(l_seq);
                for t in 0..l_seq {
                    let rows: Vec<Var> = per_sample
                        .iter()
                        .map(|feat| tape.row(*feat, t))
                        .collect::<Result<_, _>>()?;
                    inputs.push(if rows.len() == 1 { rows[0] } else { tape.concat_rows(&rows)? });
                }
            }
            None => {
                inputs = (0..len).map(|t| tape.leaf(self.embed_step(batch, t))).collect();
            }
        }

        let mut final_fwd = None;
        let mut final_bwd = None;
        let mut outputs = inputs;
        for (l, layer) in self.lstm.iter().enumerate() {
            let fwd_vars = DirVars::register(tape, &layer.fwd);
            param_vars.push((format!("lstm.{l}.fwd.w_ih"), fwd_vars.w_ih));
            param_vars.push((format!("lstm.{l}.fwd.w_hh"), fwd_vars.w_hh));
            param_vars.push((format!("lstm.{l}.fwd.bias"), fwd_vars.bias));
            let (states_f, last_f) = run_direction(tape, &outputs, &fwd_vars, b, false)?;
            final_fwd = Some(last_f);
            match &layer.bwd {
                Some(bwd) => {
                    let bwd_vars = DirVars::register(tape, bwd);
                    param_vars.push((format!("lstm.{l}.bwd.w_ih"), bwd_vars.w_ih));
                    param_vars.push((format!("lstm.{l}.bwd.w_hh"), bwd_vars.w_hh));
                    param_vars.push((format!("lstm.{l}.bwd.bias"), bwd_vars.bias));
                    let (states_b, last_b) = run_direction(tape, &outputs, &bwd_vars, b, true)?;
                    final_bwd = Some(last_b);
                    outputs = states_f
                        .iter()
                        .zip(&states_b)
                        .map(|(f, bk)| tape.concat_cols(&[*f, *bk]))
                        .collect::<Result<_, _>>()?;
                }
                None => {
                    final_bwd = None;
                    outputs = states_f;
                }
            }
        }

        let head_in = match self.spec.arch {
            Architecture::UniLstm => final_fwd.expect("at least one layer"),
            Architecture::BiLstm | Architecture::BiLstmCnn => {
                // last forward step and last backward step (position 0),
                // concatenated: the full-context state of each direction
                let f = final_fwd.expect("at least one layer");
                let bk = final_bwd.expect("bidirectional");
                tape.concat_cols(&[f, bk])?
            }
            Architecture::BiLstmAttn => {
                let attn = self.attention.as_ref().expect("attention params");
                let vars = AttentionVars::register(tape, attn);
                param_vars.push(("attn.w".into(), vars.w));
                param_vars.push(("attn.b".into(), vars.b));
                param_vars.push(("attn.v".into(), vars.v));
                let mut summaries = Vec::with_capacity(b);
                for s in 0..b {
                    let rows: Vec<Var> = outputs
                        .iter()
                        .map(|o| tape.row(*o, s))
                        .collect::<Result<_, _>>()?;
                    let hidden = if rows.len() == 1 { rows[0] } else { tape.concat_rows(&rows)? };
                    let (summary, _alpha) = attention_on_tape(tape, hidden, &vars)?;
                    summaries.push(summary);
                }
                if summaries.len() == 1 {
                    summaries[0]
                } else {
                    tape.concat_rows(&summaries)?
                }
            }
        };

        let w = tape.leaf(self.head_w.clone());
        let bias = tape.leaf(self.head_b.clone());
        param_vars.push(("head.w".into(), w));
        param_vars.push(("head.b".into(), bias));
        let proj = tape.matmul(head_in, w)?;
        let logits = tape.add(proj, bias)?;

        Ok(BatchForward { logits, conv_maps, param_vars, batch_stats })
    }

    /// Logits for a batch as a plain `[B, classes]` tensor.
    pub fn logits(&self, batch: &[&[u32]]) -> Result<Tensor, ModelError> {
        let mut tape = Tape::new();
        let fwd = self.forward_batch(&mut tape, batch)?;
        Ok(tape.value(fwd.logits).clone())
    }

    /// Positive-class probability per sample.
    pub fn predict_proba(&self, batch: &[&[u32]]) -> Result<Vec<f64>, ModelError> {
        let logits = self.logits(batch)?;
        let (b, c) = logits.dims2()?;
        let mut out = Vec::with_capacity(b);
        for r in 0..b {
            let row = &logits.data()[r * c..(r + 1) * c];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            out.push(exps[1] / z);
        }
        Ok(out)
    }

    /// Mean cross-entropy of a batch without a backward pass.
    pub fn mean_loss(&self, batch: &[&[u32]], labels: &[usize]) -> Result<f64, ModelError> {
        let mut tape = Tape::new();
        let fwd = self.forward_batch(&mut tape, batch)?;
        let loss = tape.cross_entropy_mean(fwd.logits, labels)?;
        Ok(tape.value(loss).item())
    }

    /// Forward + backward for one mini-batch: mean cross-entropy and
    /// gradients for every learnable parameter.
    pub fn loss_and_grads(
        &self,
        batch: &[&[u32]],
        labels: &[usize],
    ) -> Result<TrainStep, ModelError> {
        let mut tape = Tape::new();
        let fwd = self.forward_batch(&mut tape, batch)?;
        let loss_var = tape.cross_entropy_mean(fwd.logits, labels)?;
        let loss = tape.value(loss_var).item();
        let grads = tape.backward(loss_var)?;
        let out = fwd
            .param_vars
            .iter()
            .map(|(name, var)| {
                (name.clone(), grads.get_or_zeros(*var, tape.value(*var).shape()))
            })
            .collect();
        Ok(TrainStep { loss, grads: out, batch_stats: fwd.batch_stats })
    }

    /// Raw convolution activation map `[C, L]` for one sequence, plus the
    /// gradient of the positive-class logit with respect to it.
    pub fn conv_activation_and_grad(
        &self,
        ids: &[u32],
    ) -> Result<(Tensor, Tensor), ModelError> {
        if self.spec.arch != Architecture::BiLstmCnn {
            return Err(ModelError::WrongArchitecture {
                expected: Architecture::BiLstmCnn,
                got: self.spec.arch,
            });
        }
        let mut tape = Tape::new();
        let fwd = self.forward_batch(&mut tape, &[ids])?;
        let target = tape.slice_cols(fwd.logits, 1, 1)?;
        let grads = tape.backward(target)?;
        let map = fwd.conv_maps[0];
        let activation = tape.value(map).clone();
        let gradient = grads.get_or_zeros(map, activation.shape());
        Ok((activation, gradient))
    }

    /// Maximum relative error between the tape gradients of the batch loss
    /// and central differences over every learnable parameter coordinate.
    pub fn grad_check_loss(
        &mut self,
        batch: &[&[u32]],
        labels: &[usize],
        eps: f64,
    ) -> Result<f64, ModelError> {
        use crate::autodiff::relative_error;
        let step = self.loss_and_grads(batch, labels)?;
        let analytic: Vec<(String, Tensor)> = step.grads;
        let mut max_err = 0.0f64;
        for (name, grad) in &analytic {
            for i in 0..grad.numel() {
                let orig = {
                    let p = self
                        .param_by_name_mut(name)
                        .unwrap_or_else(|| panic!("parameter {name} exists"));
                    let orig = p.data()[i];
                    p.data_mut()[i] = orig + eps;
                    orig
                };
                let up = self.mean_loss(batch, labels)?;
                self.param_by_name_mut(name).unwrap().data_mut()[i] = orig - eps;
                let down = self.mean_loss(batch, labels)?;
                self.param_by_name_mut(name).unwrap().data_mut()[i] = orig;
                let numeric = (up - down) / (2.0 * eps);
                max_err = max_err.max(relative_error(grad.data()[i], numeric));
            }
        }
        Ok(max_err)
    }

    /// Overwrite a parameter or buffer from a checkpoint tensor.
    pub(crate) fn load_tensor(&mut self, name: &str, tensor: Tensor) -> Result<(), ModelError> {
        let slot = self
            .param_by_name_mut(name)
            .ok_or_else(|| ModelError::Checkpoint(format!("unknown tensor '{name}'")))?;
        if slot.shape() != tensor.shape() {
            return Err(ModelError::Checkpoint(format!(
                "tensor '{name}' has shape {:?}, expected {:?}",
                tensor.shape(),
                slot.shape()
            )));
        }
        *slot = tensor;
        Ok(())
    }
}

impl Clone for Model {
    fn clone(&self) -> Self {
        Model {
            spec: self.spec.clone(),
            embedding: self.embedding.clone(),
            lstm: self.lstm.clone(),
            attention: self.attention.clone(),
            conv: self.conv.clone(),
            head_w: self.head_w.clone(),
            head_b: self.head_b.clone(),
            mode: self.mode,
        }
    }
}
