//! Dense `f64` tensors with reverse-mode automatic differentiation.
//!
//! All values live on a [`Tape`]: an append-only arena of nodes where every
//! node's inputs were appended before it, so the creation order is already a
//! topological order and [`Tape::backward`] is a single reverse sweep.
//! Storage is row-major and flat; there is no broadcasting beyond the bias
//! add, which keeps every backward rule short enough to audit by hand.
//!
//! Any NaN or Inf produced by an operation is an error, never a value that
//! propagates.

mod gradcheck;
mod ops;

pub use gradcheck::finite_diff_check;

use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(pub(crate) usize);

/// Elementwise nonlinearity with an analytic derivative.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    /// Exact GELU, x · Φ(x) with the erf-based normal CDF.
    Gelu,
    Sigmoid,
    Tanh,
}

/// A dense value: flat row-major `f64` storage plus shape metadata.
///
/// Tensors either float free (model parameters between steps, constants) or
/// sit on a tape, in which case `tape_id` holds their node handle and `grad`
/// is populated by [`Tape::backward`].
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub grad: Option<Vec<f64>>,
    pub requires_grad: bool,
    pub tape_id: Option<usize>,
}

impl Tensor {
    /// Builds a tensor, validating the shape/data contract and finiteness.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "tensor dimensions must be positive, got {shape:?}"
            )));
        }
        if numel != data.len() {
            return Err(Error::InvalidArgument(format!(
                "shape {shape:?} implies {numel} elements, got {}",
                data.len()
            )));
        }
        check_finite(&data, "tensor construction")?;
        Ok(Tensor {
            shape,
            data,
            grad: None,
            requires_grad: false,
            tape_id: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
            grad: None,
            requires_grad: false,
            tape_id: None,
        }
    }

    pub fn scalar(value: f64) -> Result<Self> {
        Tensor::new(vec![1], vec![value])
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let m = rows.len();
        let n = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::InvalidArgument("ragged rows".into()));
        }
        Tensor::new(vec![m, n], rows.concat())
    }

    pub fn with_requires_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Resets the accumulated gradient, if any.
    pub fn zero_grad(&mut self) {
        self.grad = None;
    }
}

pub(crate) fn check_finite(data: &[f64], context: &str) -> Result<()> {
    if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!(
            "{context} (element {pos} = {})",
            data[pos]
        )));
    }
    Ok(())
}

/// One recorded operation; inputs are node indices into the owning tape.
#[derive(Debug, Clone)]
pub(crate) enum Op {
    Leaf,
    Matmul {
        a: usize,
        b: usize,
    },
    Transpose {
        x: usize,
    },
    Add {
        a: usize,
        b: usize,
    },
    AddBias {
        x: usize,
        bias: usize,
    },
    Scale {
        x: usize,
        factor: f64,
    },
    Activation {
        x: usize,
        kind: Activation,
    },
    /// Row-wise softmax; when `valid` is present, columns marked `false` are
    /// excluded from the normalization entirely (the −∞-logit limit) and
    /// their outputs are exactly zero.
    SoftmaxRows {
        x: usize,
        valid: Option<Vec<bool>>,
    },
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        eps: f64,
    },
    ConcatCols {
        parts: Vec<usize>,
    },
    ConcatRows {
        parts: Vec<usize>,
    },
    SliceRows {
        x: usize,
        start: usize,
        len: usize,
    },
    SliceCols {
        x: usize,
        start: usize,
        len: usize,
    },
    EmbeddingLookup {
        table: usize,
        ids: Vec<usize>,
    },
    /// Elementwise product with a constant (non-differentiated) mask;
    /// carries inverted-dropout scaling when used for dropout.
    MulMask {
        x: usize,
        mask: Vec<f64>,
    },
    Sum {
        x: usize,
    },
    Mean {
        x: usize,
    },
    /// Mean over the batch of −log softmax(logits)[gold]; fused so the
    /// backward rule is the exact (p − onehot)/B form.
    CrossEntropy {
        logits: usize,
        gold: Vec<usize>,
        probs: Vec<f64>,
    },
    /// Mean over batch × labels of the stable-logit binary cross entropy.
    BceWithLogits {
        logits: usize,
        targets: Vec<f64>,
    },
}

pub(crate) struct Node {
    pub tensor: Tensor,
    pub op: Op,
}

/// Append-only autodiff arena. Node order is topological by construction.
#[derive(Default)]
pub struct Tape {
    pub(crate) nodes: Vec<Node>,
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

    /// Places an existing tensor on the tape as a leaf.
    pub fn leaf(&mut self, mut tensor: Tensor) -> Result<TensorId> {
        check_finite(&tensor.data, "leaf")?;
        let id = self.nodes.len();
        tensor.tape_id = Some(id);
        tensor.grad = None;
        self.nodes.push(Node {
            tensor,
            op: Op::Leaf,
        });
        Ok(TensorId(id))
    }

    /// Leaf that participates in gradient computation.
    pub fn var(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<TensorId> {
        self.leaf(Tensor::new(shape, data)?.with_requires_grad())
    }

    /// Leaf excluded from gradient computation.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<TensorId> {
        self.leaf(Tensor::new(shape, data)?)
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].tensor.shape
    }

    pub fn data(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.0].tensor.data
    }

    pub fn requires_grad(&self, id: TensorId) -> bool {
        self.nodes[id.0].tensor.requires_grad
    }

    /// Gradient accumulated on a node, if backward has reached it.
    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.nodes[id.0].tensor.grad.as_deref()
    }

    /// Copies a node out as a free-standing tensor (gradient included).
    pub fn export(&self, id: TensorId) -> Tensor {
        self.nodes[id.0].tensor.clone()
    }

    pub(crate) fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op) -> Result<TensorId> {
        check_finite(&data, op_name(&op))?;
        let requires_grad = op_inputs(&op)
            .iter()
            .any(|&i| self.nodes[i].tensor.requires_grad);
        let id = self.nodes.len();
        self.nodes.push(Node {
            tensor: Tensor {
                shape,
                data,
                grad: None,
                requires_grad,
                tape_id: Some(id),
            },
            op,
        });
        Ok(TensorId(id))
    }

    /// Reverse sweep from a scalar loss, accumulating gradients on every
    /// node that requires them. Detached (non-`requires_grad`) nodes are
    /// left untouched. Calling twice without clearing accumulates.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.nodes[loss.0].tensor.numel() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].tensor.shape
            )));
        }
        // Upstream gradients for this sweep live in a scratch arena so that
        // repeated backward calls accumulate into `tensor.grad` exactly once
        // per sweep per node.
        let n = self.nodes.len();
        let mut upstream: Vec<Option<Vec<f64>>> = vec![None; n];
        upstream[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = upstream[i].take() else {
                continue;
            };
            if !self.nodes[i].tensor.requires_grad {
                continue;
            }
            accumulate(self.nodes[i].tensor.grad.get_or_insert_with(|| {
                vec![0.0; g.len()]
            }), &g);
            let op = self.nodes[i].op.clone();
            self.propagate(i, &op, &g, &mut upstream)?;
        }
        Ok(())
    }
}

pub(crate) fn accumulate(acc: &mut [f64], addend: &[f64]) {
    debug_assert_eq!(acc.len(), addend.len());
    for (a, b) in acc.iter_mut().zip(addend) {
        *a += b;
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Matmul { .. } => "matmul",
        Op::Transpose { .. } => "transpose",
        Op::Add { .. } => "add",
        Op::AddBias { .. } => "add_bias",
        Op::Scale { .. } => "scale",
        Op::Activation { .. } => "activation",
        Op::SoftmaxRows { .. } => "softmax_rows",
        Op::LayerNorm { .. } => "layer_norm",
        Op::ConcatCols { .. } => "concat_cols",
        Op::ConcatRows { .. } => "concat_rows",
        Op::SliceRows { .. } => "slice_rows",
        Op::SliceCols { .. } => "slice_cols",
        Op::EmbeddingLookup { .. } => "embedding_lookup",
        Op::MulMask { .. } => "mul_mask",
        Op::Sum { .. } => "sum",
        Op::Mean { .. } => "mean",
        Op::CrossEntropy { .. } => "cross_entropy",
        Op::BceWithLogits { .. } => "bce_with_logits",
    }
}

fn op_inputs(op: &Op) -> Vec<usize> {
    match op {
        Op::Leaf => vec![],
        Op::Matmul { a, b } | Op::Add { a, b } => vec![*a, *b],
        Op::AddBias { x, bias } => vec![*x, *bias],
        Op::Transpose { x }
        | Op::Scale { x, .. }
        | Op::Activation { x, .. }
        | Op::SoftmaxRows { x, .. }
        | Op::SliceRows { x, .. }
        | Op::SliceCols { x, .. }
        | Op::MulMask { x, .. }
        | Op::Sum { x }
        | Op::Mean { x } => vec![*x],
        Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
        Op::ConcatCols { parts } | Op::ConcatRows { parts } => parts.clone(),
        Op::EmbeddingLookup { table, .. } => vec![*table],
        Op::CrossEntropy { logits, .. } | Op::BceWithLogits { logits, .. } => vec![*logits],
    }
}
