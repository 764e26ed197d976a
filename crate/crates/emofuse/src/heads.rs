//! Classification heads: single-label softmax/cross-entropy, multi-label
//! sigmoid/BCE, and the fusion head over two concatenated CLS vectors.

use serde::{Deserialize, Serialize};

use crate::encoder::INIT_STD;
use crate::error::{Error, Result};
use crate::rng::substream;
use crate::tensor::{Tape, Tensor, TensorId};

/// Linear output layer: logits = h · W + b.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl HeadParams {
    /// Fresh head: weight ~ Normal(0, 0.02²) truncated at ±2σ, bias zero.
    /// `in_dim` is the encoder width, or the sum of widths for fusion.
    pub fn init(in_dim: usize, num_labels: usize, seed: u64) -> Result<Self> {
        if in_dim == 0 || num_labels == 0 {
            return Err(Error::InvalidConfig(format!(
                "head dimensions must be positive, got {in_dim}×{num_labels}"
            )));
        }
        let mut rng = substream(seed, "init");
        let data: Vec<f64> = (0..in_dim * num_labels)
            .map(|_| rng.truncated_normal(INIT_STD, 2.0))
            .collect();
        Ok(HeadParams {
            weight: Tensor::new(vec![in_dim, num_labels], data)?,
            bias: Tensor::zeros(vec![num_labels]),
        })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape[0]
    }

    pub fn num_labels(&self) -> usize {
        self.weight.shape[1]
    }
}

/// Tape handles for a registered head.
pub struct TapeHead {
    pub weight: TensorId,
    pub bias: TensorId,
}

pub fn register_head(tape: &mut Tape, head: &HeadParams, trainable: bool) -> Result<TapeHead> {
    let mut w = head.weight.clone();
    let mut b = head.bias.clone();
    w.requires_grad = trainable;
    b.requires_grad = trainable;
    Ok(TapeHead {
        weight: tape.leaf(w)?,
        bias: tape.leaf(b)?,
    })
}

/// Decision rule for [`predict_labels`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TaskKind {
    /// One class per example; softmax + cross-entropy.
    Single,
    /// A set of labels per example; sigmoid + binary cross-entropy.
    Multi,
}

/// Network output with per-mode probabilities.
#[derive(Debug, Clone)]
pub struct Prediction {
    /// Raw logits, row-major [batch × num_labels].
    pub logits: Vec<f64>,
    pub batch: usize,
    pub num_labels: usize,
    /// Softmax rows (single) or per-label sigmoids (multi).
    pub probabilities: Vec<f64>,
    pub task: TaskKind,
}

impl Prediction {
    pub(crate) fn from_logits(tape: &Tape, logits: TensorId, task: TaskKind) -> Self {
        let shape = tape.shape(logits);
        let (batch, num_labels) = (shape[0], shape[1]);
        let raw = tape.data(logits).to_vec();
        let probabilities = match task {
            TaskKind::Single => {
                let mut p = vec![0.0; raw.len()];
                for r in 0..batch {
                    let row = &raw[r * num_labels..(r + 1) * num_labels];
                    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let mut denom = 0.0;
                    for (j, &v) in row.iter().enumerate() {
                        let e = (v - max).exp();
                        p[r * num_labels + j] = e;
                        denom += e;
                    }
                    for v in &mut p[r * num_labels..(r + 1) * num_labels] {
                        *v /= denom;
                    }
                }
                p
            }
            TaskKind::Multi => raw
                .iter()
                .map(|&z| {
                    if z >= 0.0 {
                        1.0 / (1.0 + (-z).exp())
                    } else {
                        let e = z.exp();
                        e / (1.0 + e)
                    }
                })
                .collect(),
        };
        Prediction {
            logits: raw,
            batch,
            num_labels,
            probabilities,
            task,
        }
    }
}

/// Raw linear-layer logits for a feature matrix.
pub fn logits_forward(tape: &mut Tape, features: TensorId, head: &TapeHead) -> Result<TensorId> {
    let raw = tape.matmul(features, head.weight)?;
    tape.add_bias(raw, head.bias)
}

/// Single-label forward: softmax cross-entropy against integer gold labels.
pub fn forward_single(
    tape: &mut Tape,
    cls: TensorId,
    head: &TapeHead,
    gold: &[usize],
) -> Result<(Prediction, TensorId)> {
    let logits = logits_forward(tape, cls, head)?;
    let loss = tape.cross_entropy(logits, gold)?;
    Ok((Prediction::from_logits(tape, logits, TaskKind::Single), loss))
}

/// Multi-label forward: per-label sigmoid BCE against {0,1} target rows.
pub fn forward_multi(
    tape: &mut Tape,
    cls: TensorId,
    head: &TapeHead,
    gold_rows: &[f64],
) -> Result<(Prediction, TensorId)> {
    let logits = logits_forward(tape, cls, head)?;
    let loss = tape.bce_with_logits(logits, gold_rows)?;
    Ok((Prediction::from_logits(tape, logits, TaskKind::Multi), loss))
}

/// Fusion forward: concatenates the two CLS matrices column-wise, then
/// behaves exactly like [`forward_single`]. Gradients flow into both
/// feature branches.
pub fn forward_fusion(
    tape: &mut Tape,
    hmc_cls: TensorId,
    emotion_cls: TensorId,
    head: &TapeHead,
    gold: &[usize],
) -> Result<(Prediction, TensorId)> {
    let fused = tape.concat_features(hmc_cls, emotion_cls)?;
    let fused_dim = tape.shape(fused)[1];
    let head_in = tape.shape(head.weight)[0];
    if head_in != fused_dim {
        return Err(Error::ShapeMismatch {
            op: "forward_fusion",
            lhs: vec![fused_dim],
            rhs: vec![head_in],
        });
    }
    forward_single(tape, fused, head, gold)
}

/// Decision rule: argmax with lowest-index tie-break for single-label,
/// probability ≥ `threshold` for multi-label.
pub fn predict_labels(pred: &Prediction, threshold: f64) -> Vec<Vec<usize>> {
    match pred.task {
        TaskKind::Single => (0..pred.batch)
            .map(|r| {
                let row = &pred.probabilities[r * pred.num_labels..(r + 1) * pred.num_labels];
                let mut best = 0;
                for (j, &p) in row.iter().enumerate() {
                    if p > row[best] {
                        best = j;
                    }
                }
                vec![best]
            })
            .collect(),
        TaskKind::Multi => (0..pred.batch)
            .map(|r| {
                let row = &pred.probabilities[r * pred.num_labels..(r + 1) * pred.num_labels];
                row.iter()
                    .enumerate()
                    .filter(|(_, &p)| p >= threshold)
                    .map(|(j, _)| j)
                    .collect()
            })
            .collect(),
    }
}
