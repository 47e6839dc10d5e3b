//! Recorded-operation reverse-mode differentiation.
//!
//! A [`Tape`] is rebuilt for every forward pass. Each operation validates its
//! operand shapes, computes the result eagerly, and records enough
//! information to replay itself in reverse. [`Tape::backward`] walks the
//! recorded nodes from the loss back to the leaves, accumulating gradients
//! additively wherever a node feeds several consumers. Gradients are kept for
//! every node, not just leaves, so intermediate activations (e.g. a
//! convolution map) can be interrogated after the fact.
//!
//! Tapes are single-owner: build, run backward, drop. Record order is the
//! topological order, so the reverse walk needs no extra bookkeeping and two
//! backward runs over the same tape are bit-identical.

use super::tensor::{Result, Tensor, TensorError};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Matmul { a: Var, b: Var },
    Add { a: Var, b: Var },
    /// `a: [m,n]` plus `bias: [n]` broadcast over the leading axis.
    AddBias { a: Var, bias: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, factor: f64 },
    Tanh { a: Var },
    Sigmoid { a: Var },
    Relu { a: Var },
    Softmax { a: Var, axis: usize },
    Conv1d { input: Var, kernels: Var, bias: Var, padding: usize },
    MaxPool1d { a: Var, size: usize, argmax: Vec<usize> },
    CrossEntropy { logits: Var, labels: Vec<usize> },
    Transpose { a: Var },
    ConcatRows { parts: Vec<Var> },
    ConcatCols { parts: Vec<Var> },
    Row { a: Var, index: usize },
    SliceCols { a: Var, start: usize, len: usize },
    SumAll { a: Var },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    /// Per-channel affine with constant coefficients (eval-mode normalization folded).
    ChannelAffine { x: Var, scale: Vec<f64> },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Batch statistics produced by a train-mode batch-norm node.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased (divide by N) variance used for normalization.
    pub var: Vec<f64>,
    /// Unbiased (divide by N-1) variance for running-average updates.
    pub var_unbiased: Vec<f64>,
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `var`, if any path reached it.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads[var.0].as_ref()
    }

    /// Gradient of the loss w.r.t. `var`, zeros when no path reached it.
    pub fn get_or_zeros(&self, var: Var, shape: &[usize]) -> Tensor {
        match &self.grads[var.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(shape),
        }
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Value computed for a node during the forward pass.
    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Register a constant or parameter tensor as a leaf.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    // ── linear algebra ──────────────────────────────────────────────

    /// `a[m×k] · b[k×n] → [m×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, ka) = self.value(a).dims2()?;
        let (kb, n) = self.value(b).dims2()?;
        if ka != kb {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(b).shape().to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        matmul_into(self.value(a).data(), self.value(b).data(), &mut out, m, ka, n);
        let value = Tensor::from_vec(&[m, n], out)?;
        Ok(self.push(value, Op::Matmul { a, b }))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.value(a).dims2()?;
        let src = self.value(a).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let value = Tensor::from_vec(&[n, m], out)?;
        Ok(self.push(value, Op::Transpose { a }))
    }

    // ── elementwise ─────────────────────────────────────────────────

    /// Elementwise sum. When `b` is a vector matching the trailing axis of a
    /// 2-D `a`, it is broadcast over the leading axis (bias add).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.value(a).shape().to_vec();
        let sb = self.value(b).shape().to_vec();
        if sa == sb {
            let data = self
                .value(a)
                .data()
                .iter()
                .zip(self.value(b).data())
                .map(|(x, y)| x + y)
                .collect();
            let value = Tensor::from_vec(&sa, data)?;
            return Ok(self.push(value, Op::Add { a, b }));
        }
        if sa.len() == 2 && sb.len() == 1 && sb[0] == sa[1] {
            let (m, n) = (sa[0], sa[1]);
            let bias = self.value(b).data();
            let mut data = self.value(a).data().to_vec();
            for row in data.chunks_mut(n) {
                for (x, y) in row.iter_mut().zip(bias) {
                    *x += y;
                }
            }
            let _ = m;
            let value = Tensor::from_vec(&sa, data)?;
            return Ok(self.push(value, Op::AddBias { a, bias: b }));
        }
        Err(TensorError::ShapeMismatch { op: "add", lhs: sa, rhs: sb })
    }

    /// Elementwise product; shapes must match exactly.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.value(a).shape().to_vec();
        let sb = self.value(b).shape().to_vec();
        if sa != sb {
            return Err(TensorError::ShapeMismatch { op: "mul", lhs: sa, rhs: sb });
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::from_vec(&sa, data)?;
        Ok(self.push(value, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = Tensor::from_vec(
            self.value(a).shape().to_vec().as_slice(),
            self.value(a).data().iter().map(|x| x * factor).collect(),
        )
        .expect("scale preserves shape");
        self.push(value, Op::Scale { a, factor })
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.map_unary(a, f64::tanh);
        self.push(value, Op::Tanh { a })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.map_unary(a, stable_sigmoid);
        self.push(value, Op::Sigmoid { a })
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.map_unary(a, |x| if x > 0.0 { x } else { 0.0 });
        self.push(value, Op::Relu { a })
    }

    fn map_unary(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::from_vec(
            self.value(a).shape().to_vec().as_slice(),
            self.value(a).data().iter().map(|x| f(*x)).collect(),
        )
        .expect("unary map preserves shape")
    }

    // ── reductions and structured ops ───────────────────────────────

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.value(a).shape().to_vec();
        if axis >= shape.len() {
            return Err(TensorError::Usage {
                op: "softmax",
                msg: format!("axis {} out of range for shape {:?}", axis, shape),
            });
        }
        let mut data = self.value(a).data().to_vec();
        for_each_lane(&shape, axis, |offset, stride, extent| {
            let mut max = f64::NEG_INFINITY;
            for i in 0..extent {
                max = max.max(data[offset + i * stride]);
            }
            let mut sum = 0.0;
            for i in 0..extent {
                let e = (data[offset + i * stride] - max).exp();
                data[offset + i * stride] = e;
                sum += e;
            }
            for i in 0..extent {
                data[offset + i * stride] /= sum;
            }
        });
        let value = Tensor::from_vec(&shape, data)?;
        Ok(self.push(value, Op::Softmax { a, axis }))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll { a })
    }

    /// 1-D convolution: `input[C_in×L]`, `kernels[C_out×C_in×k]`,
    /// `bias[C_out]`, zero padding `p`, stride 1 → `[C_out×(L+2p−k+1)]`.
    pub fn conv1d(&mut self, input: Var, kernels: Var, bias: Var, padding: usize) -> Result<Var> {
        let ishape = self.value(input).shape().to_vec();
        let kshape = self.value(kernels).shape().to_vec();
        let (c_in, len) = match ishape.as_slice() {
            [c, l] => (*c, *l),
            _ => {
                return Err(TensorError::Usage {
                    op: "conv1d",
                    msg: format!("input must be [C_in, L], got {:?}", ishape),
                })
            }
        };
        let (c_out, kc_in, k) = match kshape.as_slice() {
            [o, i, k] => (*o, *i, *k),
            _ => {
                return Err(TensorError::Usage {
                    op: "conv1d",
                    msg: format!("kernels must be [C_out, C_in, k], got {:?}", kshape),
                })
            }
        };
        if kc_in != c_in {
            return Err(TensorError::ShapeMismatch { op: "conv1d", lhs: ishape, rhs: kshape });
        }
        if self.value(bias).shape() != [c_out] {
            return Err(TensorError::ShapeMismatch {
                op: "conv1d",
                lhs: vec![c_out],
                rhs: self.value(bias).shape().to_vec(),
            });
        }
        if k > len + 2 * padding {
            return Err(TensorError::Usage {
                op: "conv1d",
                msg: format!("kernel {} larger than padded input {}", k, len + 2 * padding),
            });
        }
        let l_out = len + 2 * padding - k + 1;
        let padded = pad_rows(self.value(input).data(), c_in, len, padding);
        let l_pad = len + 2 * padding;
        let kern = self.value(kernels).data();
        let bias_data = self.value(bias).data();
        let mut out = vec![0.0; c_out * l_out];
        for co in 0..c_out {
            let out_row = &mut out[co * l_out..(co + 1) * l_out];
            out_row.fill(bias_data[co]);
            for ci in 0..c_in {
                let in_row = &padded[ci * l_pad..(ci + 1) * l_pad];
                for t in 0..k {
                    let w = kern[(co * c_in + ci) * k + t];
                    let window = &in_row[t..t + l_out];
                    for (o, x) in out_row.iter_mut().zip(window) {
                        *o += w * x;
                    }
                }
            }
        }
        let value = Tensor::from_vec(&[c_out, l_out], out)?;
        Ok(self.push(value, Op::Conv1d { input, kernels, bias, padding }))
    }

    /// Non-overlapping max pooling over the length axis; a trailing partial
    /// window is dropped. Ties resolve to the first index.
    pub fn maxpool1d(&mut self, a: Var, size: usize) -> Result<Var> {
        let (var, _) = self.maxpool1d_with_indices(a, size)?;
        Ok(var)
    }

    /// As [`maxpool1d`](Self::maxpool1d), also returning the absolute argmax
    /// position (within each row) per output element.
    pub fn maxpool1d_with_indices(&mut self, a: Var, size: usize) -> Result<(Var, Vec<usize>)> {
        let (c, len) = self.value(a).dims2()?;
        if size == 0 || len < size {
            return Err(TensorError::Usage {
                op: "maxpool1d",
                msg: format!("input length {} shorter than pool size {}", len, size),
            });
        }
        let l_out = len / size;
        let src = self.value(a).data();
        let mut out = vec![0.0; c * l_out];
        let mut argmax = vec![0usize; c * l_out];
        for ch in 0..c {
            let row = &src[ch * len..(ch + 1) * len];
            for w in 0..l_out {
                let start = w * size;
                let mut best = row[start];
                let mut best_i = start;
                for i in start + 1..start + size {
                    if row[i] > best {
                        best = row[i];
                        best_i = i;
                    }
                }
                out[ch * l_out + w] = best;
                argmax[ch * l_out + w] = best_i;
            }
        }
        let value = Tensor::from_vec(&[c, l_out], out)?;
        let var = self.push(value, Op::MaxPool1d { a, size, argmax: argmax.clone() });
        Ok((var, argmax))
    }

    /// `−log softmax(logits)[label]` via log-sum-exp; scalar output.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let shape = self.value(logits).shape();
        let classes = match shape {
            [c] => *c,
            [1, c] => *c,
            _ => {
                return Err(TensorError::Usage {
                    op: "cross_entropy",
                    msg: format!("logits must be a single row, got {:?}", shape),
                })
            }
        };
        if label >= classes {
            return Err(TensorError::Usage {
                op: "cross_entropy",
                msg: format!("label {} out of range for {} classes", label, classes),
            });
        }
        let loss = row_cross_entropy(self.value(logits).data(), label);
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropy { logits, labels: vec![label] }))
    }

    /// Mean `−log softmax(row)[label]` over the rows of `logits[B×C]`.
    pub fn cross_entropy_mean(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (rows, classes) = self.value(logits).dims2()?;
        if labels.len() != rows {
            return Err(TensorError::Usage {
                op: "cross_entropy_mean",
                msg: format!("{} labels for {} rows", labels.len(), rows),
            });
        }
        if let Some(bad) = labels.iter().find(|l| **l >= classes) {
            return Err(TensorError::Usage {
                op: "cross_entropy_mean",
                msg: format!("label {} out of range for {} classes", bad, classes),
            });
        }
        let data = self.value(logits).data();
        let mut total = 0.0;
        for (r, &label) in labels.iter().enumerate() {
            total += row_cross_entropy(&data[r * classes..(r + 1) * classes], label);
        }
        let loss = total / rows as f64;
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropy { logits, labels: labels.to_vec() }))
    }

    // ── shape plumbing ──────────────────────────────────────────────

    /// Stack 2-D blocks with equal column counts along the row axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(TensorError::Usage { op: "concat_rows", msg: "no parts".into() });
        }
        let (_, n) = self.value(parts[0]).dims2()?;
        let mut rows = 0;
        for p in parts {
            let (m, pn) = self.value(*p).dims2()?;
            if pn != n {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_rows",
                    lhs: self.value(parts[0]).shape().to_vec(),
                    rhs: self.value(*p).shape().to_vec(),
                });
            }
            rows += m;
        }
        let mut data = Vec::with_capacity(rows * n);
        for p in parts {
            data.extend_from_slice(self.value(*p).data());
        }
        let value = Tensor::from_vec(&[rows, n], data)?;
        Ok(self.push(value, Op::ConcatRows { parts: parts.to_vec() }))
    }

    /// Stack 2-D blocks with equal row counts along the column axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(TensorError::Usage { op: "concat_cols", msg: "no parts".into() });
        }
        let (m, _) = self.value(parts[0]).dims2()?;
        let mut cols = 0;
        for p in parts {
            let (pm, pn) = self.value(*p).dims2()?;
            if pm != m {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.value(parts[0]).shape().to_vec(),
                    rhs: self.value(*p).shape().to_vec(),
                });
            }
            cols += pn;
        }
        let mut data = vec![0.0; m * cols];
        let mut at = 0;
        for p in parts {
            let (_, pn) = self.value(*p).dims2()?;
            let src = self.value(*p).data();
            for r in 0..m {
                data[r * cols + at..r * cols + at + pn].copy_from_slice(&src[r * pn..(r + 1) * pn]);
            }
            at += pn;
        }
        let value = Tensor::from_vec(&[m, cols], data)?;
        Ok(self.push(value, Op::ConcatCols { parts: parts.to_vec() }))
    }

    /// Row `index` of a 2-D tensor as `[1×n]`.
    pub fn row(&mut self, a: Var, index: usize) -> Result<Var> {
        let (m, n) = self.value(a).dims2()?;
        if index >= m {
            return Err(TensorError::Usage {
                op: "row",
                msg: format!("row {} out of range for {} rows", index, m),
            });
        }
        let data = self.value(a).data()[index * n..(index + 1) * n].to_vec();
        let value = Tensor::from_vec(&[1, n], data)?;
        Ok(self.push(value, Op::Row { a, index }))
    }

    /// Columns `[start, start+len)` of a 2-D tensor.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.value(a).dims2()?;
        if start + len > n {
            return Err(TensorError::Usage {
                op: "slice_cols",
                msg: format!("columns {}..{} out of range for {} columns", start, start + len, n),
            });
        }
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(m * len);
        for r in 0..m {
            data.extend_from_slice(&src[r * n + start..r * n + start + len]);
        }
        let value = Tensor::from_vec(&[m, len], data)?;
        Ok(self.push(value, Op::SliceCols { a, start, len }))
    }

    // ── normalization ───────────────────────────────────────────────

    /// Train-mode batch normalization of `x[C×N]`: per-channel statistics over
    /// the trailing axis, then `gamma[C]`, `beta[C]`. Returns the node plus the
    /// batch statistics for running-average updates.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, BatchStats)> {
        let (c, n) = self.value(x).dims2()?;
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return Err(TensorError::ShapeMismatch {
                op: "batch_norm",
                lhs: vec![c],
                rhs: self.value(gamma).shape().to_vec(),
            });
        }
        if n < 1 {
            return Err(TensorError::Usage { op: "batch_norm", msg: "empty input".into() });
        }
        let src = self.value(x).data();
        let g = self.value(gamma).data().to_vec();
        let b = self.value(beta).data().to_vec();
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        let mut var_unbiased = vec![0.0; c];
        let mut xhat = vec![0.0; c * n];
        let mut inv_std = vec![0.0; c];
        let mut out = vec![0.0; c * n];
        for ch in 0..c {
            let row = &src[ch * n..(ch + 1) * n];
            let mu = row.iter().sum::<f64>() / n as f64;
            let ss: f64 = row.iter().map(|v| (v - mu) * (v - mu)).sum();
            let v = ss / n as f64;
            mean[ch] = mu;
            var[ch] = v;
            var_unbiased[ch] = if n > 1 { ss / (n - 1) as f64 } else { 0.0 };
            let is = 1.0 / (v + eps).sqrt();
            inv_std[ch] = is;
            for (i, value) in row.iter().enumerate() {
                let xh = (value - mu) * is;
                xhat[ch * n + i] = xh;
                out[ch * n + i] = g[ch] * xh + b[ch];
            }
        }
        let value = Tensor::from_vec(&[c, n], out)?;
        let var_id = self.push(value, Op::BatchNorm { x, gamma, beta, xhat, inv_std });
        Ok((var_id, BatchStats { mean, var, var_unbiased }))
    }

    /// Per-channel `x·scale + shift` with constant coefficients; the eval-mode
    /// form of batch normalization with gamma and running stats folded in.
    pub fn channel_affine(&mut self, x: Var, scale: &[f64], shift: &[f64]) -> Result<Var> {
        let (c, n) = self.value(x).dims2()?;
        if scale.len() != c || shift.len() != c {
            return Err(TensorError::ShapeMismatch {
                op: "channel_affine",
                lhs: vec![c],
                rhs: vec![scale.len()],
            });
        }
        let src = self.value(x).data();
        let mut out = vec![0.0; c * n];
        for ch in 0..c {
            for i in 0..n {
                out[ch * n + i] = src[ch * n + i] * scale[ch] + shift[ch];
            }
        }
        let value = Tensor::from_vec(&[c, n], out)?;
        Ok(self.push(value, Op::ChannelAffine { x, scale: scale.to_vec() }))
    }

    // ── backward ────────────────────────────────────────────────────

    /// Reverse pass from a scalar `loss`. Gradients are produced for every
    /// node reachable from the loss; the tape itself is untouched, so
    /// repeated calls yield bit-identical results.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return Err(TensorError::Usage {
                op: "backward",
                msg: format!("loss must be scalar, got shape {:?}", self.value(loss).shape()),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(dy) = grads[idx].take() else { continue };
            self.backward_node(idx, &dy, &mut grads);
            grads[idx] = Some(dy);
        }

        let out = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                g.map(|data| {
                    Tensor::from_vec(self.nodes[i].value.shape(), data)
                        .expect("gradient matches node shape")
                })
            })
            .collect();
        Ok(Gradients { grads: out })
    }

    fn backward_node(&self, idx: usize, dy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (m, k) = self.value(*a).dims2().unwrap();
                let (_, n) = self.value(*b).dims2().unwrap();
                let a_data = self.value(*a).data();
                let b_data = self.value(*b).data();
                // dA = dY · Bᵀ
                {
                    let da = grad_buf(grads, a.0, m * k);
                    for i in 0..m {
                        let dyr = &dy[i * n..(i + 1) * n];
                        let dar = &mut da[i * k..(i + 1) * k];
                        for p in 0..k {
                            let br = &b_data[p * n..(p + 1) * n];
                            let mut acc = 0.0;
                            for (d, bv) in dyr.iter().zip(br) {
                                acc += d * bv;
                            }
                            dar[p] += acc;
                        }
                    }
                }
                // dB = Aᵀ · dY
                {
                    let db = grad_buf(grads, b.0, k * n);
                    for i in 0..m {
                        let dyr = &dy[i * n..(i + 1) * n];
                        for p in 0..k {
                            let av = a_data[i * k + p];
                            if av == 0.0 {
                                continue;
                            }
                            let dbr = &mut db[p * n..(p + 1) * n];
                            for (d, dv) in dbr.iter_mut().zip(dyr) {
                                *d += av * dv;
                            }
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                accumulate(grads, a.0, dy);
                accumulate(grads, b.0, dy);
            }
            Op::AddBias { a, bias } => {
                accumulate(grads, a.0, dy);
                let n = self.value(*bias).numel();
                let db = grad_buf(grads, bias.0, n);
                for row in dy.chunks(n) {
                    for (d, v) in db.iter_mut().zip(row) {
                        *d += v;
                    }
                }
            }
            Op::Mul { a, b } => {
                let a_data = self.value(*a).data();
                let b_data = self.value(*b).data();
                {
                    let da = grad_buf(grads, a.0, a_data.len());
                    for ((d, g), bv) in da.iter_mut().zip(dy).zip(b_data) {
                        *d += g * bv;
                    }
                }
                {
                    let db = grad_buf(grads, b.0, b_data.len());
                    for ((d, g), av) in db.iter_mut().zip(dy).zip(a_data) {
                        *d += g * av;
                    }
                }
            }
            Op::Scale { a, factor } => {
                let da = grad_buf(grads, a.0, dy.len());
                for (d, g) in da.iter_mut().zip(dy) {
                    *d += g * factor;
                }
            }
            Op::Tanh { a } => {
                let y = node.value.data();
                let da = grad_buf(grads, a.0, dy.len());
                for ((d, g), yv) in da.iter_mut().zip(dy).zip(y) {
                    *d += g * (1.0 - yv * yv);
                }
            }
            Op::Sigmoid { a } => {
                let y = node.value.data();
                let da = grad_buf(grads, a.0, dy.len());
                for ((d, g), yv) in da.iter_mut().zip(dy).zip(y) {
                    *d += g * yv * (1.0 - yv);
                }
            }
            Op::Relu { a } => {
                // Gradient at exactly 0 is defined as 0.
                let x = self.value(*a).data();
                let da = grad_buf(grads, a.0, dy.len());
                for ((d, g), xv) in da.iter_mut().zip(dy).zip(x) {
                    if *xv > 0.0 {
                        *d += g;
                    }
                }
            }
            Op::Softmax { a, axis } => {
                let y = node.value.data();
                let shape = node.value.shape();
                let da = grad_buf(grads, a.0, dy.len());
                for_each_lane(shape, *axis, |offset, stride, extent| {
                    let mut dot = 0.0;
                    for i in 0..extent {
                        let pos = offset + i * stride;
                        dot += dy[pos] * y[pos];
                    }
                    for i in 0..extent {
                        let pos = offset + i * stride;
                        da[pos] += y[pos] * (dy[pos] - dot);
                    }
                });
            }
            Op::Conv1d { input, kernels, bias, padding } => {
                self.backward_conv1d(*input, *kernels, *bias, *padding, dy, grads);
            }
            Op::MaxPool1d { a, size, argmax } => {
                let (_, len) = self.value(*a).dims2().unwrap();
                let l_out = len / size;
                let da = grad_buf(grads, a.0, self.value(*a).numel());
                for (w, &src_pos) in argmax.iter().enumerate() {
                    let ch = w / l_out;
                    da[ch * len + src_pos] += dy[w];
                }
            }
            Op::CrossEntropy { logits, labels } => {
                let shape = self.value(*logits).shape();
                let classes = *shape.last().unwrap();
                let rows = labels.len();
                let data = self.value(*logits).data();
                let scale = dy[0] / rows as f64;
                let dl = grad_buf(grads, logits.0, data.len());
                for (r, &label) in labels.iter().enumerate() {
                    let row = &data[r * classes..(r + 1) * classes];
                    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
                    for j in 0..classes {
                        let p = (row[j] - max).exp() / sum;
                        let delta = if j == label { 1.0 } else { 0.0 };
                        dl[r * classes + j] += scale * (p - delta);
                    }
                }
            }
            Op::Transpose { a } => {
                let (m, n) = self.value(*a).dims2().unwrap();
                let da = grad_buf(grads, a.0, m * n);
                for i in 0..m {
                    for j in 0..n {
                        da[i * n + j] += dy[j * m + i];
                    }
                }
            }
            Op::ConcatRows { parts } => {
                let mut at = 0;
                for p in parts {
                    let sz = self.value(*p).numel();
                    accumulate(grads, p.0, &dy[at..at + sz]);
                    at += sz;
                }
            }
            Op::ConcatCols { parts } => {
                let (m, cols) = node.value.dims2().unwrap();
                let mut at = 0;
                for p in parts {
                    let (_, pn) = self.value(*p).dims2().unwrap();
                    let dp = grad_buf(grads, p.0, m * pn);
                    for r in 0..m {
                        for j in 0..pn {
                            dp[r * pn + j] += dy[r * cols + at + j];
                        }
                    }
                    at += pn;
                }
            }
            Op::Row { a, index } => {
                let (_, n) = self.value(*a).dims2().unwrap();
                let da = grad_buf(grads, a.0, self.value(*a).numel());
                for j in 0..n {
                    da[index * n + j] += dy[j];
                }
            }
            Op::SliceCols { a, start, len } => {
                let (m, n) = self.value(*a).dims2().unwrap();
                let da = grad_buf(grads, a.0, m * n);
                for r in 0..m {
                    for j in 0..*len {
                        da[r * n + start + j] += dy[r * len + j];
                    }
                }
            }
            Op::SumAll { a } => {
                let da = grad_buf(grads, a.0, self.value(*a).numel());
                for d in da.iter_mut() {
                    *d += dy[0];
                }
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std } => {
                let (c, n) = self.value(*x).dims2().unwrap();
                let g = self.value(*gamma).data();
                {
                    let mut dgamma = vec![0.0; c];
                    let mut dbeta = vec![0.0; c];
                    for ch in 0..c {
                        let mut sg = 0.0;
                        let mut sb = 0.0;
                        for i in 0..n {
                            sg += dy[ch * n + i] * xhat[ch * n + i];
                            sb += dy[ch * n + i];
                        }
                        dgamma[ch] = sg;
                        dbeta[ch] = sb;
                    }
                    accumulate(grads, gamma.0, &dgamma);
                    accumulate(grads, beta.0, &dbeta);
                }
                {
                    let dx = grad_buf(grads, x.0, c * n);
                    let nf = n as f64;
                    for ch in 0..c {
                        let mut sum_dxhat = 0.0;
                        let mut sum_dxhat_xhat = 0.0;
                        for i in 0..n {
                            let dxh = dy[ch * n + i] * g[ch];
                            sum_dxhat += dxh;
                            sum_dxhat_xhat += dxh * xhat[ch * n + i];
                        }
                        for i in 0..n {
                            let dxh = dy[ch * n + i] * g[ch];
                            dx[ch * n + i] += inv_std[ch] / nf
                                * (nf * dxh - sum_dxhat - xhat[ch * n + i] * sum_dxhat_xhat);
                        }
                    }
                }
            }
            Op::ChannelAffine { x, scale } => {
                let (c, n) = self.value(*x).dims2().unwrap();
                let dx = grad_buf(grads, x.0, c * n);
                for ch in 0..c {
                    for i in 0..n {
                        dx[ch * n + i] += dy[ch * n + i] * scale[ch];
                    }
                }
            }
        }
    }

    fn backward_conv1d(
        &self,
        input: Var,
        kernels: Var,
        bias: Var,
        padding: usize,
        dy: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let (c_in, len) = self.value(input).dims2().unwrap();
        let kshape = self.value(kernels).shape();
        let (c_out, k) = (kshape[0], kshape[2]);
        let l_out = len + 2 * padding - k + 1;
        let l_pad = len + 2 * padding;
        let padded = pad_rows(self.value(input).data(), c_in, len, padding);
        let kern = self.value(kernels).data();

        // bias gradient: row sums of dY
        {
            let db = grad_buf(grads, bias.0, c_out);
            for co in 0..c_out {
                db[co] += dy[co * l_out..(co + 1) * l_out].iter().sum::<f64>();
            }
        }
        // kernel gradient: correlation of dY with the padded input
        {
            let dk = grad_buf(grads, kernels.0, c_out * c_in * k);
            for co in 0..c_out {
                let dyr = &dy[co * l_out..(co + 1) * l_out];
                for ci in 0..c_in {
                    let in_row = &padded[ci * l_pad..(ci + 1) * l_pad];
                    for t in 0..k {
                        let window = &in_row[t..t + l_out];
                        let mut acc = 0.0;
                        for (d, x) in dyr.iter().zip(window) {
                            acc += d * x;
                        }
                        dk[(co * c_in + ci) * k + t] += acc;
                    }
                }
            }
        }
        // input gradient: scatter dY through each kernel tap, then crop padding
        {
            let mut dpad = vec![0.0; c_in * l_pad];
            for co in 0..c_out {
                let dyr = &dy[co * l_out..(co + 1) * l_out];
                for ci in 0..c_in {
                    let drow = &mut dpad[ci * l_pad..(ci + 1) * l_pad];
                    for t in 0..k {
                        let w = kern[(co * c_in + ci) * k + t];
                        if w == 0.0 {
                            continue;
                        }
                        for (pos, d) in dyr.iter().enumerate() {
                            drow[pos + t] += w * d;
                        }
                    }
                }
            }
            let dx = grad_buf(grads, input.0, c_in * len);
            for ci in 0..c_in {
                for pos in 0..len {
                    dx[ci * len + pos] += dpad[ci * l_pad + pos + padding];
                }
            }
        }
    }
}

fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

fn pad_rows(data: &[f64], rows: usize, len: usize, padding: usize) -> Vec<f64> {
    if padding == 0 {
        return data.to_vec();
    }
    let l_pad = len + 2 * padding;
    let mut out = vec![0.0; rows * l_pad];
    for r in 0..rows {
        out[r * l_pad + padding..r * l_pad + padding + len]
            .copy_from_slice(&data[r * len..(r + 1) * len]);
    }
    out
}

fn row_cross_entropy(logits: &[f64], label: usize) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    lse - logits[label]
}

/// Visit every 1-D lane along `axis` of a tensor with the given shape,
/// calling `f(offset, stride, extent)`.
fn for_each_lane(shape: &[usize], axis: usize, mut f: impl FnMut(usize, usize, usize)) {
    let extent = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    for o in 0..outer {
        for i in 0..inner {
            f(o * extent * inner + i, inner, extent);
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], idx: usize, contribution: &[f64]) {
    let buf = grad_buf(grads, idx, contribution.len());
    for (d, c) in buf.iter_mut().zip(contribution) {
        *d += c;
    }
}

fn grad_buf(grads: &mut [Option<Vec<f64>>], idx: usize, len: usize) -> &mut Vec<f64> {
    grads[idx].get_or_insert_with(|| vec![0.0; len])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: usize, cols: usize, data: &[f64]) -> Tensor {
        Tensor::from_vec(&[rows, cols], data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let a = tape.leaf(t2(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let eye = tape.leaf(t2(2, 2, &[1.0, 0.0, 0.0, 1.0]));
        let c = tape.matmul(a, eye).unwrap();
        assert_eq!(tape.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_row_times_col() {
        let mut tape = Tape::new();
        let a = tape.leaf(t2(1, 2, &[1.0, 2.0]));
        let b = tape.leaf(t2(2, 1, &[3.0, 4.0]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.leaf(t2(2, 3, &[0.0; 6]));
        let b = tape.leaf(t2(2, 2, &[0.0; 4]));
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn relu_sign_cases() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(&[3], vec![-1.0, 0.0, 2.0]).unwrap());
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn tanh_sigmoid_at_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(0.0));
        let t = tape.tanh(x);
        let s = tape.sigmoid(x);
        assert_eq!(tape.value(t).item(), 0.0);
        assert_eq!(tape.value(s).item(), 0.5);
    }

    #[test]
    fn softmax_symmetry_and_stability() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(&[2], vec![0.0, 0.0]).unwrap());
        let y = tape.softmax(x, 0).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);

        let big = tape.leaf(Tensor::from_vec(&[2], vec![1000.0, 0.0]).unwrap());
        let yb = tape.softmax(big, 0).unwrap();
        let d = tape.value(yb).data();
        assert!(d.iter().all(|v| v.is_finite()));
        assert!((d[0] - 1.0).abs() < 1e-12 && d[1].abs() < 1e-12);
    }

    #[test]
    fn softmax_sums_to_one_per_lane() {
        let mut tape = Tape::new();
        let x = tape.leaf(t2(3, 4, &[0.3, -2.0, 5.0, 1.0, 0.0, 0.1, -0.1, 9.0, 2.0, 2.0, 2.0, 2.0]));
        for axis in [0usize, 1] {
            let y = tape.softmax(x, axis).unwrap();
            let v = tape.value(y);
            let (m, n) = v.dims2().unwrap();
            if axis == 1 {
                for r in 0..m {
                    let s: f64 = v.data()[r * n..(r + 1) * n].iter().sum();
                    assert!((s - 1.0).abs() < 1e-12);
                }
            } else {
                for c in 0..n {
                    let s: f64 = (0..m).map(|r| v.data()[r * n + c]).sum();
                    assert!((s - 1.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn conv1d_matches_hand_case() {
        // all-ones 1x1x3 kernel, zero bias, no padding over [1,2,3,4] -> [6, 9]
        let mut tape = Tape::new();
        let x = tape.leaf(t2(1, 4, &[1.0, 2.0, 3.0, 4.0]));
        let k = tape.leaf(Tensor::from_vec(&[1, 1, 3], vec![1.0; 3]).unwrap());
        let b = tape.leaf(Tensor::from_vec(&[1], vec![0.0]).unwrap());
        let y = tape.conv1d(x, k, b, 0).unwrap();
        assert_eq!(tape.value(y).data(), &[6.0, 9.0]);
    }

    #[test]
    fn conv1d_same_padding_length() {
        let mut tape = Tape::new();
        let x = tape.leaf(t2(1, 5, &[1.0; 5]));
        let k = tape.leaf(Tensor::from_vec(&[1, 1, 3], vec![1.0; 3]).unwrap());
        let b = tape.leaf(Tensor::from_vec(&[1], vec![0.0]).unwrap());
        let y = tape.conv1d(x, k, b, 1).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 5]);
    }

    #[test]
    fn conv1d_kernel_too_large() {
        let mut tape = Tape::new();
        let x = tape.leaf(t2(1, 2, &[1.0, 2.0]));
        let k = tape.leaf(Tensor::from_vec(&[1, 1, 5], vec![1.0; 5]).unwrap());
        let b = tape.leaf(Tensor::from_vec(&[1], vec![0.0]).unwrap());
        assert!(tape.conv1d(x, k, b, 0).is_err());
    }

    #[test]
    fn maxpool_values_indices_and_ties() {
        let mut tape = Tape::new();
        let x = tape.leaf(t2(1, 4, &[1.0, 3.0, 2.0, 2.0]));
        let (y, idx) = tape.maxpool1d_with_indices(x, 2).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0, 2.0]);
        assert_eq!(idx, vec![1, 2]);

        let c = tape.leaf(t2(1, 4, &[7.0; 4]));
        let (yc, idxc) = tape.maxpool1d_with_indices(c, 2).unwrap();
        assert_eq!(tape.value(yc).data(), &[7.0, 7.0]);
        assert_eq!(idxc, vec![0, 2], "ties go to the first index");

        let short = tape.leaf(t2(1, 1, &[1.0]));
        assert!(tape.maxpool1d(short, 2).is_err());
    }

    #[test]
    fn maxpool_routes_gradient_to_argmax() {
        let mut tape = Tape::new();
        let x = tape.leaf(t2(1, 4, &[1.0, 3.0, 2.0, 2.0]));
        let y = tape.maxpool1d(x, 2).unwrap();
        let s = tape.sum_all(y);
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn cross_entropy_uniform_and_extreme() {
        let mut tape = Tape::new();
        let z = tape.leaf(Tensor::from_vec(&[2], vec![0.0, 0.0]).unwrap());
        let l = tape.cross_entropy(z, 0).unwrap();
        assert!((tape.value(l).item() - std::f64::consts::LN_2).abs() < 1e-12);

        // direct log-sum-exp evaluation: ln(1 + e^-20)
        let z2 = tape.leaf(Tensor::from_vec(&[2], vec![10.0, -10.0]).unwrap());
        let l2 = tape.cross_entropy(z2, 0).unwrap();
        let expected = (1.0f64 + (-20.0f64).exp()).ln();
        assert!((tape.value(l2).item() - expected).abs() < 1e-15);
        assert!(tape.value(l2).item() < 2.07e-9);
    }

    #[test]
    fn cross_entropy_gradient_is_softmax_minus_onehot() {
        let mut tape = Tape::new();
        let z = tape.leaf(Tensor::from_vec(&[2], vec![1.0, -0.5]).unwrap());
        let l = tape.cross_entropy(z, 0).unwrap();
        let grads = tape.backward(l).unwrap();
        let g = grads.get(z).unwrap().data().to_vec();
        let m = 1.0f64.max(-0.5);
        let s: f64 = [(1.0f64 - m).exp(), (-0.5f64 - m).exp()].iter().sum();
        let p0 = (1.0f64 - m).exp() / s;
        let p1 = (-0.5f64 - m).exp() / s;
        assert!((g[0] - (p0 - 1.0)).abs() < 1e-12);
        assert!((g[1] - p1).abs() < 1e-12);
    }

    #[test]
    fn backward_square_and_fanout() {
        // loss = x*x at x=3 -> grad 6
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0));
        let xx = tape.mul(x, x).unwrap();
        let grads = tape.backward(xx).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), 6.0);

        // node feeding two consumers receives the summed gradient
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(1.0));
        let a = tape.scale(x, 2.0);
        let b = tape.scale(x, 3.0);
        let s = tape.add(a, b).unwrap();
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), 5.0);
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap());
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn backward_is_deterministic() {
        let mut tape = Tape::new();
        let a = tape.leaf(t2(2, 3, &[0.3, -1.0, 2.0, 0.7, 0.1, -0.4]));
        let b = tape.leaf(t2(3, 2, &[1.5, -0.2, 0.0, 0.9, -1.1, 0.6]));
        let c = tape.matmul(a, b).unwrap();
        let t = tape.tanh(c);
        let s = tape.sum_all(t);
        let g1 = tape.backward(s).unwrap();
        let g2 = tape.backward(s).unwrap();
        assert_eq!(g1.get(a).unwrap().data(), g2.get(a).unwrap().data());
        assert_eq!(g1.get(b).unwrap().data(), g2.get(b).unwrap().data());
    }

    #[test]
    fn add_bias_broadcast_and_mismatch() {
        let mut tape = Tape::new();
        let a = tape.leaf(t2(2, 3, &[0.0; 6]));
        let bias = tape.leaf(Tensor::from_vec(&[3], vec![1.0, 2.0, 3.0]).unwrap());
        let y = tape.add(a, bias).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);

        let bad = tape.leaf(Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap());
        assert!(tape.add(a, bad).is_err());

        let s = tape.sum_all(y);
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(bias).unwrap().data(), &[2.0, 2.0, 2.0]);
    }
}
