//! Forward implementations and backward rules for every tape operation.

use super::{accumulate, Activation, Op, Tape, TensorId};
use crate::error::{Error, Result};
use crate::special::{normal_cdf, normal_pdf};

/// C[m×n] = A[m×k] · B[k×n], accumulating into `out` (caller zeroes).
fn matmul_kernel(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for j in 0..n {
                out_row[j] += av * b_row[j];
            }
        }
    }
}

/// C[m×k] = A[m×n] · Bᵀ, with B stored as [k×n].
fn matmul_nt_kernel(a: &[f64], b: &[f64], m: usize, n: usize, k: usize, out: &mut [f64]) {
    for i in 0..m {
        let a_row = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let b_row = &b[p * n..(p + 1) * n];
            let mut dot = 0.0;
            for j in 0..n {
                dot += a_row[j] * b_row[j];
            }
            out[i * k + p] += dot;
        }
    }
}

/// C[k×n] = Aᵀ · B, with A stored as [m×k], B as [m×n].
fn matmul_tn_kernel(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            let out_row = &mut out[p * n..(p + 1) * n];
            for j in 0..n {
                out_row[j] += av * b_row[j];
            }
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn apply_activation(x: f64, kind: Activation) -> f64 {
    match kind {
        Activation::Gelu => x * normal_cdf(x),
        Activation::Sigmoid => sigmoid(x),
        Activation::Tanh => x.tanh(),
    }
}

fn activation_derivative(x: f64, kind: Activation) -> f64 {
    match kind {
        Activation::Gelu => normal_cdf(x) + x * normal_pdf(x),
        Activation::Sigmoid => {
            let s = sigmoid(x);
            s * (1.0 - s)
        }
        Activation::Tanh => {
            let t = x.tanh();
            1.0 - t * t
        }
    }
}

/// Row-wise softmax over the columns marked valid; invalid columns get 0.
fn softmax_rows_kernel(
    x: &[f64],
    rows: usize,
    cols: usize,
    valid: Option<&[bool]>,
) -> Result<Vec<f64>> {
    if let Some(v) = valid {
        if v.len() != cols {
            return Err(Error::InvalidArgument(format!(
                "softmax mask length {} != {cols} columns",
                v.len()
            )));
        }
        if !v.iter().any(|&b| b) {
            return Err(Error::InvalidArgument(
                "softmax mask excludes every column".into(),
            ));
        }
    }
    let is_valid = |j: usize| valid.is_none_or(|v| v[j]);
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let mut max = f64::NEG_INFINITY;
        for (j, &v) in row.iter().enumerate() {
            if is_valid(j) && v > max {
                max = v;
            }
        }
        let out_row = &mut out[r * cols..(r + 1) * cols];
        let mut denom = 0.0;
        for (j, &v) in row.iter().enumerate() {
            if is_valid(j) {
                let e = (v - max).exp();
                out_row[j] = e;
                denom += e;
            }
        }
        for o in out_row.iter_mut() {
            *o /= denom;
        }
    }
    Ok(out)
}

impl Tape {
    fn dims2(&self, id: TensorId, op: &'static str) -> Result<(usize, usize)> {
        let shape = self.shape(id);
        if shape.len() == 2 {
            Ok((shape[0], shape[1]))
        } else {
            Err(Error::InvalidArgument(format!(
                "{op} requires a 2-d tensor, got shape {shape:?}"
            )))
        }
    }

    /// Matrix product. Backward: dA += dC·Bᵀ, dB += Aᵀ·dC.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (kb, n) = self.dims2(b, "matmul")?;
        if k != kb {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        matmul_kernel(self.data(a), self.data(b), m, k, n, &mut out);
        self.push(vec![m, n], out, Op::Matmul { a: a.0, b: b.0 })
    }

    pub fn transpose(&mut self, x: TensorId) -> Result<TensorId> {
        let (m, n) = self.dims2(x, "transpose")?;
        let src = self.data(x);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        self.push(vec![n, m], out, Op::Transpose { x: x.0 })
    }

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op: "add",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let data: Vec<f64> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, data, Op::Add { a: a.0, b: b.0 })
    }

    /// Adds a length-n bias vector to every row of an [m×n] tensor.
    pub fn add_bias(&mut self, x: TensorId, bias: TensorId) -> Result<TensorId> {
        let (m, n) = self.dims2(x, "add_bias")?;
        if self.shape(bias) != [n] {
            return Err(Error::ShapeMismatch {
                op: "add_bias",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(bias).to_vec(),
            });
        }
        let b = self.data(bias).to_vec();
        let data: Vec<f64> = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v + b[i % n])
            .collect();
        self.push(vec![m, n], data, Op::AddBias { x: x.0, bias: bias.0 })
    }

    pub fn scale(&mut self, x: TensorId, factor: f64) -> Result<TensorId> {
        let data: Vec<f64> = self.data(x).iter().map(|&v| v * factor).collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, data, Op::Scale { x: x.0, factor })
    }

    pub fn activation(&mut self, x: TensorId, kind: Activation) -> Result<TensorId> {
        let data: Vec<f64> = self
            .data(x)
            .iter()
            .map(|&v| apply_activation(v, kind))
            .collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, data, Op::Activation { x: x.0, kind })
    }

    /// Row-wise softmax with max-subtraction; every output row sums to 1.
    pub fn softmax_rows(&mut self, x: TensorId) -> Result<TensorId> {
        let (m, n) = self.dims2(x, "softmax_rows")?;
        let data = softmax_rows_kernel(self.data(x), m, n, None)?;
        self.push(vec![m, n], data, Op::SoftmaxRows { x: x.0, valid: None })
    }

    /// Softmax restricted to the columns marked valid: excluded columns are
    /// the exact limit of −∞ logits (zero weight, zero gradient).
    pub fn masked_softmax_rows(&mut self, x: TensorId, valid: &[bool]) -> Result<TensorId> {
        let (m, n) = self.dims2(x, "masked_softmax_rows")?;
        let data = softmax_rows_kernel(self.data(x), m, n, Some(valid))?;
        self.push(
            vec![m, n],
            data,
            Op::SoftmaxRows {
                x: x.0,
                valid: Some(valid.to_vec()),
            },
        )
    }

    /// Per-row normalization to mean 0 / population variance 1, then the
    /// affine transform by gamma and beta.
    pub fn layer_norm(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        eps: f64,
    ) -> Result<TensorId> {
        if eps <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "layer_norm eps must be positive, got {eps}"
            )));
        }
        let (m, d) = self.dims2(x, "layer_norm")?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(gamma).to_vec(),
            });
        }
        let src = self.data(x);
        let g = self.data(gamma);
        let b = self.data(beta);
        let mut out = vec![0.0; m * d];
        for r in 0..m {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv_std = 1.0 / (var + eps).sqrt();
            for j in 0..d {
                out[r * d + j] = (row[j] - mean) * inv_std * g[j] + b[j];
            }
        }
        self.push(
            vec![m, d],
            out,
            Op::LayerNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                eps,
            },
        )
    }

    /// Column-wise concatenation of [m×d₁] and [m×d₂] into [m×(d₁+d₂)].
    pub fn concat_features(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.concat_cols(&[a, b])
    }

    pub fn concat_cols(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Error::InvalidArgument("concat of zero tensors".into()));
        }
        let (m, _) = self.dims2(parts[0], "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (mp, np) = self.dims2(p, "concat_cols")?;
            if mp != m {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.shape(parts[0]).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
            widths.push(np);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; m * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.data(p);
            for r in 0..m {
                out[r * total + offset..r * total + offset + w]
                    .copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            offset += w;
        }
        self.push(
            vec![m, total],
            out,
            Op::ConcatCols {
                parts: parts.iter().map(|p| p.0).collect(),
            },
        )
    }

    pub fn concat_rows(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Error::InvalidArgument("concat of zero tensors".into()));
        }
        let (_, n) = self.dims2(parts[0], "concat_rows")?;
        let mut total_rows = 0;
        for &p in parts {
            let (mp, np) = self.dims2(p, "concat_rows")?;
            if np != n {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    lhs: self.shape(parts[0]).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
            total_rows += mp;
        }
        let mut out = Vec::with_capacity(total_rows * n);
        for &p in parts {
            out.extend_from_slice(self.data(p));
        }
        self.push(
            vec![total_rows, n],
            out,
            Op::ConcatRows {
                parts: parts.iter().map(|p| p.0).collect(),
            },
        )
    }

    pub fn slice_rows(&mut self, x: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let (m, n) = self.dims2(x, "slice_rows")?;
        if start + len > m || len == 0 {
            return Err(Error::InvalidArgument(format!(
                "slice_rows [{start}, {}) out of range for {m} rows",
                start + len
            )));
        }
        let data = self.data(x)[start * n..(start + len) * n].to_vec();
        self.push(vec![len, n], data, Op::SliceRows { x: x.0, start, len })
    }

    pub fn slice_cols(&mut self, x: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let (m, n) = self.dims2(x, "slice_cols")?;
        if start + len > n || len == 0 {
            return Err(Error::InvalidArgument(format!(
                "slice_cols [{start}, {}) out of range for {n} columns",
                start + len
            )));
        }
        let src = self.data(x);
        let mut out = Vec::with_capacity(m * len);
        for r in 0..m {
            out.extend_from_slice(&src[r * n + start..r * n + start + len]);
        }
        self.push(vec![m, len], out, Op::SliceCols { x: x.0, start, len })
    }

    /// Gathers rows of an embedding table; backward scatter-adds into it.
    pub fn embedding_lookup(&mut self, table: TensorId, ids: &[usize]) -> Result<TensorId> {
        let (vocab, d) = self.dims2(table, "embedding_lookup")?;
        if ids.is_empty() {
            return Err(Error::InvalidArgument("empty id list".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::InvalidArgument(format!(
                "embedding id {bad} out of range for table with {vocab} rows"
            )));
        }
        let src = self.data(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        self.push(
            vec![ids.len(), d],
            out,
            Op::EmbeddingLookup {
                table: table.0,
                ids: ids.to_vec(),
            },
        )
    }

    /// Elementwise product with a constant mask (used for dropout).
    pub fn mul_mask(&mut self, x: TensorId, mask: Vec<f64>) -> Result<TensorId> {
        if mask.len() != self.data(x).len() {
            return Err(Error::InvalidArgument(format!(
                "mask length {} != tensor length {}",
                mask.len(),
                self.data(x).len()
            )));
        }
        let data: Vec<f64> = self.data(x).iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, data, Op::MulMask { x: x.0, mask })
    }

    pub fn sum(&mut self, x: TensorId) -> Result<TensorId> {
        let total: f64 = self.data(x).iter().sum();
        self.push(vec![1], vec![total], Op::Sum { x: x.0 })
    }

    pub fn mean(&mut self, x: TensorId) -> Result<TensorId> {
        let n = self.data(x).len() as f64;
        let total: f64 = self.data(x).iter().sum();
        self.push(vec![1], vec![total / n], Op::Mean { x: x.0 })
    }

    /// Mean over the batch of −log softmax(logits)[gold], computed through
    /// the max-shifted log-sum-exp.
    pub fn cross_entropy(&mut self, logits: TensorId, gold: &[usize]) -> Result<TensorId> {
        let (batch, classes) = self.dims2(logits, "cross_entropy")?;
        if gold.len() != batch {
            return Err(Error::InvalidArgument(format!(
                "{} gold labels for a batch of {batch}",
                gold.len()
            )));
        }
        if let Some(&bad) = gold.iter().find(|&&g| g >= classes) {
            return Err(Error::LabelOutOfRange {
                id: bad,
                num_labels: classes,
            });
        }
        let src = self.data(logits);
        let mut probs = vec![0.0; batch * classes];
        let mut loss = 0.0;
        for r in 0..batch {
            let row = &src[r * classes..(r + 1) * classes];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for (j, &v) in row.iter().enumerate() {
                let e = (v - max).exp();
                probs[r * classes + j] = e;
                denom += e;
            }
            for p in &mut probs[r * classes..(r + 1) * classes] {
                *p /= denom;
            }
            loss += denom.ln() + max - row[gold[r]];
        }
        loss /= batch as f64;
        self.push(
            vec![1],
            vec![loss],
            Op::CrossEntropy {
                logits: logits.0,
                gold: gold.to_vec(),
                probs,
            },
        )
    }

    /// Mean over batch × labels of binary cross entropy against {0,1}
    /// targets, in the numerically stable logit form
    /// max(z,0) − z·y + ln(1 + e^{−|z|}).
    pub fn bce_with_logits(&mut self, logits: TensorId, targets: &[f64]) -> Result<TensorId> {
        let (batch, labels) = self.dims2(logits, "bce_with_logits")?;
        if targets.len() != batch * labels {
            return Err(Error::InvalidArgument(format!(
                "{} targets for a {batch}×{labels} logit matrix",
                targets.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t != 0.0 && t != 1.0) {
            return Err(Error::InvalidArgument(format!(
                "BCE targets must be 0 or 1, got {bad}"
            )));
        }
        let src = self.data(logits);
        let mut loss = 0.0;
        for (&z, &y) in src.iter().zip(targets) {
            loss += z.max(0.0) - z * y + (1.0 + (-z.abs()).exp()).ln();
        }
        loss /= (batch * labels) as f64;
        self.push(
            vec![1],
            vec![loss],
            Op::BceWithLogits {
                logits: logits.0,
                targets: targets.to_vec(),
            },
        )
    }

    fn stash(&self, upstream: &mut [Option<Vec<f64>>], idx: usize, contribution: Vec<f64>) {
        if !self.nodes[idx].tensor.requires_grad {
            return;
        }
        if let Some(acc) = &mut upstream[idx] {
            accumulate(acc, &contribution);
        } else {
            upstream[idx] = Some(contribution);
        }
    }

    /// Applies one node's local backward rule, pushing contributions to its
    /// inputs' upstream slots.
    pub(crate) fn propagate(
        &self,
        out_idx: usize,
        op: &Op,
        g: &[f64],
        upstream: &mut [Option<Vec<f64>>],
    ) -> Result<()> {
        match op {
            Op::Leaf => {}

            Op::Matmul { a, b } => {
                let m = self.nodes[*a].tensor.shape[0];
                let k = self.nodes[*a].tensor.shape[1];
                let n = self.nodes[*b].tensor.shape[1];
                if self.nodes[*a].tensor.requires_grad {
                    let mut da = vec![0.0; m * k];
                    matmul_nt_kernel(g, &self.nodes[*b].tensor.data, m, n, k, &mut da);
                    self.stash(upstream, *a, da);
                }
                if self.nodes[*b].tensor.requires_grad {
                    let mut db = vec![0.0; k * n];
                    matmul_tn_kernel(&self.nodes[*a].tensor.data, g, m, k, n, &mut db);
                    self.stash(upstream, *b, db);
                }
            }

            Op::Transpose { x } => {
                let rows = self.nodes[*x].tensor.shape[0];
                let cols = self.nodes[*x].tensor.shape[1];
                let mut dx = vec![0.0; rows * cols];
                for i in 0..rows {
                    for j in 0..cols {
                        dx[i * cols + j] = g[j * rows + i];
                    }
                }
                self.stash(upstream, *x, dx);
            }

            Op::Add { a, b } => {
                self.stash(upstream, *a, g.to_vec());
                self.stash(upstream, *b, g.to_vec());
            }

            Op::AddBias { x, bias } => {
                self.stash(upstream, *x, g.to_vec());
                if self.nodes[*bias].tensor.requires_grad {
                    let n = self.nodes[*bias].tensor.data.len();
                    let mut db = vec![0.0; n];
                    for (i, &gv) in g.iter().enumerate() {
                        db[i % n] += gv;
                    }
                    self.stash(upstream, *bias, db);
                }
            }

            Op::Scale { x, factor } => {
                self.stash(upstream, *x, g.iter().map(|&gv| gv * factor).collect());
            }

            Op::Activation { x, kind } => {
                let dx: Vec<f64> = self.nodes[*x]
                    .tensor
                    .data
                    .iter()
                    .zip(g)
                    .map(|(&v, &gv)| gv * activation_derivative(v, *kind))
                    .collect();
                self.stash(upstream, *x, dx);
            }

            Op::SoftmaxRows { x, valid } => {
                // dx_ij = y_ij (g_ij − Σ_k g_ik y_ik); masked-out columns
                // have y = 0 and stay at zero gradient.
                let y = &self.nodes[out_idx].tensor.data;
                let cols = self.nodes[out_idx].tensor.shape[1];
                let rows = self.nodes[out_idx].tensor.shape[0];
                let is_valid = |j: usize| valid.as_ref().is_none_or(|v| v[j]);
                let mut dx = vec![0.0; y.len()];
                for r in 0..rows {
                    let span = r * cols..(r + 1) * cols;
                    let dot: f64 = g[span.clone()]
                        .iter()
                        .zip(&y[span.clone()])
                        .map(|(&gv, &yv)| gv * yv)
                        .sum();
                    for (j, idx) in span.clone().enumerate() {
                        if is_valid(j) {
                            dx[idx] = y[idx] * (g[idx] - dot);
                        }
                    }
                }
                self.stash(upstream, *x, dx);
            }

            Op::LayerNorm { x, gamma, beta, eps } => {
                let d = self.nodes[*gamma].tensor.data.len();
                let rows = self.nodes[*x].tensor.shape[0];
                let src = &self.nodes[*x].tensor.data;
                let gam = &self.nodes[*gamma].tensor.data;
                let mut dx = vec![0.0; src.len()];
                let mut dgamma = vec![0.0; d];
                let mut dbeta = vec![0.0; d];
                for r in 0..rows {
                    let row = &src[r * d..(r + 1) * d];
                    let grow = &g[r * d..(r + 1) * d];
                    let mean = row.iter().sum::<f64>() / d as f64;
                    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                    let inv_std = 1.0 / (var + eps).sqrt();
                    let mut dxhat_mean = 0.0;
                    let mut dxhat_xhat_mean = 0.0;
                    for j in 0..d {
                        let xhat = (row[j] - mean) * inv_std;
                        let dxhat = grow[j] * gam[j];
                        dgamma[j] += grow[j] * xhat;
                        dbeta[j] += grow[j];
                        dxhat_mean += dxhat;
                        dxhat_xhat_mean += dxhat * xhat;
                    }
                    dxhat_mean /= d as f64;
                    dxhat_xhat_mean /= d as f64;
                    for j in 0..d {
                        let xhat = (row[j] - mean) * inv_std;
                        let dxhat = grow[j] * gam[j];
                        dx[r * d + j] = (dxhat - dxhat_mean - xhat * dxhat_xhat_mean) * inv_std;
                    }
                }
                self.stash(upstream, *x, dx);
                self.stash(upstream, *gamma, dgamma);
                self.stash(upstream, *beta, dbeta);
            }

            Op::ConcatCols { parts } => {
                let total = self.nodes[out_idx].tensor.shape[1];
                let rows = self.nodes[out_idx].tensor.shape[0];
                let mut offset = 0;
                for &p in parts {
                    let w = self.nodes[p].tensor.shape[1];
                    if self.nodes[p].tensor.requires_grad {
                        let mut dp = vec![0.0; rows * w];
                        for r in 0..rows {
                            dp[r * w..(r + 1) * w].copy_from_slice(
                                &g[r * total + offset..r * total + offset + w],
                            );
                        }
                        self.stash(upstream, p, dp);
                    }
                    offset += w;
                }
            }

            Op::ConcatRows { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.nodes[p].tensor.data.len();
                    if self.nodes[p].tensor.requires_grad {
                        self.stash(upstream, p, g[offset..offset + len].to_vec());
                    }
                    offset += len;
                }
            }

            Op::SliceRows { x, start, len } => {
                let n = self.nodes[*x].tensor.shape[1];
                let mut dx = vec![0.0; self.nodes[*x].tensor.data.len()];
                dx[start * n..(start + len) * n].copy_from_slice(g);
                self.stash(upstream, *x, dx);
            }

            Op::SliceCols { x, start, len } => {
                let rows = self.nodes[*x].tensor.shape[0];
                let n = self.nodes[*x].tensor.shape[1];
                let mut dx = vec![0.0; rows * n];
                for r in 0..rows {
                    dx[r * n + start..r * n + start + len]
                        .copy_from_slice(&g[r * len..(r + 1) * len]);
                }
                self.stash(upstream, *x, dx);
            }

            Op::EmbeddingLookup { table, ids } => {
                if self.nodes[*table].tensor.requires_grad {
                    let d = self.nodes[*table].tensor.shape[1];
                    let mut dt = vec![0.0; self.nodes[*table].tensor.data.len()];
                    for (row, &id) in ids.iter().enumerate() {
                        accumulate(&mut dt[id * d..(id + 1) * d], &g[row * d..(row + 1) * d]);
                    }
                    self.stash(upstream, *table, dt);
                }
            }

            Op::MulMask { x, mask } => {
                let dx: Vec<f64> = g.iter().zip(mask).map(|(&gv, &m)| gv * m).collect();
                self.stash(upstream, *x, dx);
            }

            Op::Sum { x } => {
                let n = self.nodes[*x].tensor.data.len();
                self.stash(upstream, *x, vec![g[0]; n]);
            }

            Op::Mean { x } => {
                let n = self.nodes[*x].tensor.data.len();
                self.stash(upstream, *x, vec![g[0] / n as f64; n]);
            }

            Op::CrossEntropy { logits, gold, probs } => {
                let batch = gold.len();
                let classes = probs.len() / batch;
                let mut dl = vec![0.0; probs.len()];
                for r in 0..batch {
                    for j in 0..classes {
                        let onehot = if j == gold[r] { 1.0 } else { 0.0 };
                        dl[r * classes + j] = g[0] * (probs[r * classes + j] - onehot) / batch as f64;
                    }
                }
                self.stash(upstream, *logits, dl);
            }

            Op::BceWithLogits { logits, targets } => {
                let total = targets.len() as f64;
                let dl: Vec<f64> = self.nodes[*logits]
                    .tensor
                    .data
                    .iter()
                    .zip(targets)
                    .map(|(&z, &y)| g[0] * (sigmoid(z) - y) / total)
                    .collect();
                self.stash(upstream, *logits, dl);
            }
        }
        Ok(())
    }
}
