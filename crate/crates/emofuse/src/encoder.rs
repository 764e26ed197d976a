//! Bidirectional transformer encoder with CLS pooling.
//!
//! Post-norm residual layout: embeddings (token + position), then per layer
//! masked multi-head self-attention → add & norm → GELU feed-forward →
//! add & norm. Padded key positions are excluded from attention exactly, so
//! hidden states at real positions are independent of trailing padding.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{substream, RngStream};
use crate::tensor::{Activation, Tape, Tensor, TensorId};
use crate::tokenizer::TokenizedSequence;

/// Layer-norm variance floor.
pub const LN_EPS: f64 = 1e-12;

/// Standard deviation of the truncated-normal weight initialization.
pub const INIT_STD: f64 = 0.02;

/// Architectural hyperparameters of one encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub dropout_rate: f64,
}

impl EncoderConfig {
    /// Default desk-scale preset: gradient-checkable in seconds.
    pub fn toy() -> Self {
        EncoderConfig {
            num_layers: 2,
            hidden_dim: 64,
            num_heads: 4,
            ffn_dim: 256,
            vocab_size: 2000,
            max_len: 64,
            dropout_rate: 0.1,
        }
    }

    /// Even smaller preset for fast experiment grids and gradient checks.
    pub fn micro() -> Self {
        EncoderConfig {
            num_layers: 2,
            hidden_dim: 32,
            num_heads: 2,
            ffn_dim: 64,
            vocab_size: 1000,
            max_len: 32,
            dropout_rate: 0.1,
        }
    }

    /// bert-base-uncased dimensions; used for parameter counting and config
    /// validation, not for desk-scale training.
    pub fn bert_base() -> Self {
        EncoderConfig {
            num_layers: 12,
            hidden_dim: 768,
            num_heads: 12,
            ffn_dim: 3072,
            vocab_size: 30_522,
            max_len: 512,
            dropout_rate: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0
            || self.hidden_dim == 0
            || self.num_heads == 0
            || self.vocab_size < 4
            || self.max_len < 2
        {
            return Err(Error::InvalidConfig(format!("degenerate config {self:?}")));
        }
        if !self.hidden_dim.is_multiple_of(self.num_heads) {
            return Err(Error::InvalidConfig(format!(
                "hidden_dim {} not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        if self.ffn_dim < self.hidden_dim {
            return Err(Error::InvalidConfig(format!(
                "ffn_dim {} smaller than hidden_dim {}",
                self.ffn_dim, self.hidden_dim
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::InvalidConfig(format!(
                "dropout_rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }
}

/// Learnable weights of one encoder layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub attn_query_w: Tensor,
    pub attn_query_b: Tensor,
    pub attn_key_w: Tensor,
    pub attn_key_b: Tensor,
    pub attn_value_w: Tensor,
    pub attn_value_b: Tensor,
    pub attn_out_w: Tensor,
    pub attn_out_b: Tensor,
    pub attn_norm_gamma: Tensor,
    pub attn_norm_beta: Tensor,
    pub ffn_in_w: Tensor,
    pub ffn_in_b: Tensor,
    pub ffn_out_w: Tensor,
    pub ffn_out_b: Tensor,
    pub ffn_norm_gamma: Tensor,
    pub ffn_norm_beta: Tensor,
}

/// All learnable weights of one encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    pub token_embedding: Tensor,
    pub position_embedding: Tensor,
    pub layers: Vec<LayerParams>,
}

fn init_matrix(rng: &mut RngStream, rows: usize, cols: usize) -> Tensor {
    let data: Vec<f64> = (0..rows * cols)
        .map(|_| rng.truncated_normal(INIT_STD, 2.0))
        .collect();
    Tensor {
        shape: vec![rows, cols],
        data,
        grad: None,
        requires_grad: false,
        tape_id: None,
    }
}

impl EncoderParams {
    /// Fresh parameters: weights ~ Normal(0, 0.02²) truncated at ±2σ,
    /// biases zero, layer-norm gamma one / beta zero. Deterministic per
    /// seed (substream label "init").
    pub fn init(config: &EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = substream(seed, "init");
        let d = config.hidden_dim;
        let token_embedding = init_matrix(&mut rng, config.vocab_size, d);
        let position_embedding = init_matrix(&mut rng, config.max_len, d);
        let layers = (0..config.num_layers)
            .map(|_| LayerParams {
                attn_query_w: init_matrix(&mut rng, d, d),
                attn_query_b: Tensor::zeros(vec![d]),
                attn_key_w: init_matrix(&mut rng, d, d),
                attn_key_b: Tensor::zeros(vec![d]),
                attn_value_w: init_matrix(&mut rng, d, d),
                attn_value_b: Tensor::zeros(vec![d]),
                attn_out_w: init_matrix(&mut rng, d, d),
                attn_out_b: Tensor::zeros(vec![d]),
                attn_norm_gamma: Tensor {
                    shape: vec![d],
                    data: vec![1.0; d],
                    grad: None,
                    requires_grad: false,
                    tape_id: None,
                },
                attn_norm_beta: Tensor::zeros(vec![d]),
                ffn_in_w: init_matrix(&mut rng, d, config.ffn_dim),
                ffn_in_b: Tensor::zeros(vec![config.ffn_dim]),
                ffn_out_w: init_matrix(&mut rng, config.ffn_dim, d),
                ffn_out_b: Tensor::zeros(vec![d]),
                ffn_norm_gamma: Tensor {
                    shape: vec![d],
                    data: vec![1.0; d],
                    grad: None,
                    requires_grad: false,
                    tape_id: None,
                },
                ffn_norm_beta: Tensor::zeros(vec![d]),
            })
            .collect();
        Ok(EncoderParams {
            config: config.clone(),
            token_embedding,
            position_embedding,
            layers,
        })
    }

    /// Fixed traversal order shared by checkpoints, the optimizer, and
    /// tape registration.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("token_embedding".to_string(), &self.token_embedding),
            ("position_embedding".to_string(), &self.position_embedding),
        ];
        for (i, layer) in self.layers.iter().enumerate() {
            for (name, t) in layer_fields(layer) {
                out.push((format!("layer{i}.{name}"), t));
            }
        }
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = vec![
            ("token_embedding".to_string(), &mut self.token_embedding),
            (
                "position_embedding".to_string(),
                &mut self.position_embedding,
            ),
        ];
        for (i, layer) in self.layers.iter_mut().enumerate() {
            for (name, t) in layer_fields_mut(layer) {
                out.push((format!("layer{i}.{name}"), t));
            }
        }
        out
    }
}

const LAYER_FIELD_NAMES: [&str; 16] = [
    "attn_query_w",
    "attn_query_b",
    "attn_key_w",
    "attn_key_b",
    "attn_value_w",
    "attn_value_b",
    "attn_out_w",
    "attn_out_b",
    "attn_norm_gamma",
    "attn_norm_beta",
    "ffn_in_w",
    "ffn_in_b",
    "ffn_out_w",
    "ffn_out_b",
    "ffn_norm_gamma",
    "ffn_norm_beta",
];

fn layer_fields(layer: &LayerParams) -> Vec<(&'static str, &Tensor)> {
    vec![
        ("attn_query_w", &layer.attn_query_w),
        ("attn_query_b", &layer.attn_query_b),
        ("attn_key_w", &layer.attn_key_w),
        ("attn_key_b", &layer.attn_key_b),
        ("attn_value_w", &layer.attn_value_w),
        ("attn_value_b", &layer.attn_value_b),
        ("attn_out_w", &layer.attn_out_w),
        ("attn_out_b", &layer.attn_out_b),
        ("attn_norm_gamma", &layer.attn_norm_gamma),
        ("attn_norm_beta", &layer.attn_norm_beta),
        ("ffn_in_w", &layer.ffn_in_w),
        ("ffn_in_b", &layer.ffn_in_b),
        ("ffn_out_w", &layer.ffn_out_w),
        ("ffn_out_b", &layer.ffn_out_b),
        ("ffn_norm_gamma", &layer.ffn_norm_gamma),
        ("ffn_norm_beta", &layer.ffn_norm_beta),
    ]
}

fn layer_fields_mut(layer: &mut LayerParams) -> Vec<(&'static str, &mut Tensor)> {
    vec![
        ("attn_query_w", &mut layer.attn_query_w),
        ("attn_query_b", &mut layer.attn_query_b),
        ("attn_key_w", &mut layer.attn_key_w),
        ("attn_key_b", &mut layer.attn_key_b),
        ("attn_value_w", &mut layer.attn_value_w),
        ("attn_value_b", &mut layer.attn_value_b),
        ("attn_out_w", &mut layer.attn_out_w),
        ("attn_out_b", &mut layer.attn_out_b),
        ("attn_norm_gamma", &mut layer.attn_norm_gamma),
        ("attn_norm_beta", &mut layer.attn_norm_beta),
        ("ffn_in_w", &mut layer.ffn_in_w),
        ("ffn_in_b", &mut layer.ffn_in_b),
        ("ffn_out_w", &mut layer.ffn_out_w),
        ("ffn_out_b", &mut layer.ffn_out_b),
        ("ffn_norm_gamma", &mut layer.ffn_norm_gamma),
        ("ffn_norm_beta", &mut layer.ffn_norm_beta),
    ]
}

/// Closed-form count of learnable scalars for a config.
pub fn count_params(config: &EncoderConfig) -> usize {
    let d = config.hidden_dim;
    let embeddings = config.vocab_size * d + config.max_len * d;
    // QKVO projections with biases, two layer norms, and the FFN pair.
    let per_layer = 4 * (d * d + d) + 4 * d + d * config.ffn_dim
        + config.ffn_dim
        + config.ffn_dim * d
        + d;
    embeddings + config.num_layers * per_layer
}

/// Tape handles for one registered encoder, in traversal order.
pub struct TapeEncoder {
    pub config: EncoderConfig,
    pub ids: Vec<TensorId>,
}

impl TapeEncoder {
    fn tensor(&self, index: usize) -> TensorId {
        self.ids[index]
    }

    fn layer_tensor(&self, layer: usize, field: usize) -> TensorId {
        self.ids[2 + layer * LAYER_FIELD_NAMES.len() + field]
    }
}

/// Copies encoder parameters onto a tape; `trainable` controls whether the
/// leaves participate in backward.
pub fn register_encoder(
    tape: &mut Tape,
    params: &EncoderParams,
    trainable: bool,
) -> Result<TapeEncoder> {
    let mut ids = Vec::new();
    for (_, t) in params.named_tensors() {
        let mut leaf = t.clone();
        leaf.requires_grad = trainable;
        ids.push(tape.leaf(leaf)?);
    }
    Ok(TapeEncoder {
        config: params.config.clone(),
        ids,
    })
}

/// Whether a forward pass applies dropout.
pub enum ForwardMode<'a> {
    Eval,
    Train { dropout: &'a mut RngStream },
}

fn dropout(
    tape: &mut Tape,
    x: TensorId,
    rate: f64,
    mode: &mut ForwardMode,
) -> Result<TensorId> {
    match mode {
        ForwardMode::Train { dropout } if rate > 0.0 => {
            let keep = 1.0 - rate;
            let mask: Vec<f64> = (0..tape.data(x).len())
                .map(|_| {
                    if dropout.bernoulli(keep) {
                        1.0 / keep
                    } else {
                        0.0
                    }
                })
                .collect();
            tape.mul_mask(x, mask)
        }
        _ => Ok(x),
    }
}

/// Hidden states for a batch, stored as one [batch·seq_len × hidden_dim]
/// tape tensor in batch-major row order.
pub struct HiddenStates {
    pub id: TensorId,
    pub batch: usize,
    pub seq_len: usize,
    pub hidden_dim: usize,
}

/// Runs the full encoder stack over a batch of tokenized sequences.
pub fn encode_sequence<B: std::borrow::Borrow<TokenizedSequence>>(
    tape: &mut Tape,
    encoder: &TapeEncoder,
    batch: &[B],
    mode: &mut ForwardMode,
) -> Result<HiddenStates> {
    let batch: Vec<&TokenizedSequence> = batch.iter().map(|b| b.borrow()).collect();
    let config = &encoder.config;
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let seq_len = batch[0].ids.len();
    if batch.iter().any(|s| s.ids.len() != seq_len) {
        return Err(Error::InvalidArgument(
            "batch sequences must share one length".into(),
        ));
    }
    if seq_len > config.max_len {
        return Err(Error::InvalidArgument(format!(
            "sequence length {seq_len} exceeds configured max_len {}",
            config.max_len
        )));
    }
    for seq in &batch {
        if let Some(&bad) = seq.ids.iter().find(|&&id| id as usize >= config.vocab_size) {
            return Err(Error::InvalidArgument(format!(
                "token id {bad} out of range for vocab_size {}",
                config.vocab_size
            )));
        }
    }

    let d = config.hidden_dim;
    let num_heads = config.num_heads;
    let head_dim = config.head_dim();
    let rate = config.dropout_rate;
    let token_table = encoder.tensor(0);
    let position_table = encoder.tensor(1);
    let positions: Vec<usize> = (0..seq_len).collect();

    // Token + position embeddings, concatenated batch-major.
    let mut embedded = Vec::with_capacity(batch.len());
    for seq in &batch {
        let ids: Vec<usize> = seq.ids.iter().map(|&i| i as usize).collect();
        let tok = tape.embedding_lookup(token_table, &ids)?;
        let pos = tape.embedding_lookup(position_table, &positions)?;
        embedded.push(tape.add(tok, pos)?);
    }
    let mut x = tape.concat_rows(&embedded)?;

    let key_masks: Vec<Vec<bool>> = batch.iter().map(|s| s.valid_positions()).collect();

    for layer in 0..config.num_layers {
        let field = |f: usize| encoder.layer_tensor(layer, f);

        // Projections over the whole batch at once.
        let q = tape.matmul(x, field(0))?;
        let q = tape.add_bias(q, field(1))?;
        let k = tape.matmul(x, field(2))?;
        let k = tape.add_bias(k, field(3))?;
        let v = tape.matmul(x, field(4))?;
        let v = tape.add_bias(v, field(5))?;

        // Per-sequence, per-head scaled dot-product attention with the
        // padded key positions masked out of the softmax.
        let mut contexts = Vec::with_capacity(batch.len());
        for (b, valid) in key_masks.iter().enumerate() {
            let q_b = tape.slice_rows(q, b * seq_len, seq_len)?;
            let k_b = tape.slice_rows(k, b * seq_len, seq_len)?;
            let v_b = tape.slice_rows(v, b * seq_len, seq_len)?;
            let mut heads = Vec::with_capacity(num_heads);
            for h in 0..num_heads {
                let q_bh = tape.slice_cols(q_b, h * head_dim, head_dim)?;
                let k_bh = tape.slice_cols(k_b, h * head_dim, head_dim)?;
                let v_bh = tape.slice_cols(v_b, h * head_dim, head_dim)?;
                let k_t = tape.transpose(k_bh)?;
                let scores = tape.matmul(q_bh, k_t)?;
                let scores = tape.scale(scores, 1.0 / (head_dim as f64).sqrt())?;
                let weights = tape.masked_softmax_rows(scores, valid)?;
                let weights = dropout(tape, weights, rate, mode)?;
                heads.push(tape.matmul(weights, v_bh)?);
            }
            contexts.push(tape.concat_cols(&heads)?);
        }
        let context = tape.concat_rows(&contexts)?;
        let attn_out = tape.matmul(context, field(6))?;
        let attn_out = tape.add_bias(attn_out, field(7))?;
        let residual = tape.add(x, attn_out)?;
        x = tape.layer_norm(residual, field(8), field(9), LN_EPS)?;

        let hidden = tape.matmul(x, field(10))?;
        let hidden = tape.add_bias(hidden, field(11))?;
        let hidden = tape.activation(hidden, Activation::Gelu)?;
        let hidden = dropout(tape, hidden, rate, mode)?;
        let ffn_out = tape.matmul(hidden, field(12))?;
        let ffn_out = tape.add_bias(ffn_out, field(13))?;
        let residual = tape.add(x, ffn_out)?;
        x = tape.layer_norm(residual, field(14), field(15), LN_EPS)?;
    }

    Ok(HiddenStates {
        id: x,
        batch: batch.len(),
        seq_len,
        hidden_dim: d,
    })
}

/// Position-0 slice of every sequence: the [batch × hidden_dim] CLS matrix.
/// No pooling layer is applied.
pub fn pool_cls(tape: &mut Tape, hidden: &HiddenStates) -> Result<TensorId> {
    let mut rows = Vec::with_capacity(hidden.batch);
    for b in 0..hidden.batch {
        rows.push(tape.slice_rows(hidden.id, b * hidden.seq_len, 1)?);
    }
    tape.concat_rows(&rows)
}
