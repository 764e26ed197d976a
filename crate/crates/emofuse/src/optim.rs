//! Adam optimization and the fine-tuning loop.
//!
//! Training defaults mirror the evaluation protocol: 3 epochs, batch size
//! 128, learning rate 2e-5, per-epoch shuffling, no weight decay and no
//! learning-rate schedule. Every source of randomness is a labelled
//! substream of the run seed, so a `(model, data, config)` triple always
//! reproduces bitwise-identical parameters.

use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::encoder::ForwardMode;
use crate::error::{Error, Result};
use crate::heads::{Prediction, TaskKind};
use crate::rng::substream;
use crate::tensor::{Tape, Tensor, TensorId};
use crate::tokenizer::{encode, TokenizedSequence, Vocabulary};

pub use crate::rng::{derive_seed, DEFAULT_SEEDS};

/// Hyperparameters of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub shuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 3,
            batch_size: 128,
            lr: 2e-5,
            seed: 1,
            shuffle: true,
        }
    }
}

impl TrainConfig {
    /// PHM2017 runs use a smaller batch.
    pub fn phm2017() -> Self {
        TrainConfig {
            batch_size: 64,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 || self.batch_size < 1 || self.lr <= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "train config needs epochs ≥ 1, batch_size ≥ 1, lr > 0; got {self:?}"
            )));
        }
        Ok(())
    }
}

/// Adam moment state over a fixed parameter list.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub first_moments: Vec<Vec<f64>>,
    pub second_moments: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(lr: f64, param_sizes: &[usize]) -> Self {
        AdamState {
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            first_moments: param_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            second_moments: param_sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }
}

/// One bias-corrected Adam update:
/// m ← β₁m + (1−β₁)g, v ← β₂v + (1−β₂)g², θ ← θ − lr·m̂/(√v̂ + ε).
pub fn adam_step(
    state: &mut AdamState,
    params: &mut [(String, &mut Tensor)],
    grads: &[Vec<f64>],
) -> Result<()> {
    if params.len() != state.first_moments.len() || grads.len() != params.len() {
        return Err(Error::InvalidArgument(format!(
            "adam_step: {} params, {} grads, state over {}",
            params.len(),
            grads.len(),
            state.first_moments.len()
        )));
    }
    for ((name, param), grad) in params.iter().zip(grads) {
        if param.data.len() != grad.len() {
            return Err(Error::InvalidArgument(format!(
                "adam_step: gradient size mismatch for {name}"
            )));
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of {name}")));
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let bias1 = 1.0 - state.beta1.powi(t);
    let bias2 = 1.0 - state.beta2.powi(t);
    for (i, (_, param)) in params.iter_mut().enumerate() {
        let m = &mut state.first_moments[i];
        let v = &mut state.second_moments[i];
        for (j, &g) in grads[i].iter().enumerate() {
            m[j] = state.beta1 * m[j] + (1.0 - state.beta1) * g;
            v[j] = state.beta2 * v[j] + (1.0 - state.beta2) * g * g;
            let m_hat = m[j] / bias1;
            let v_hat = v[j] / bias2;
            param.data[j] -= state.lr * m_hat / (v_hat.sqrt() + state.epsilon);
        }
    }
    Ok(())
}

/// Per-step loss record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossEntry {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossLog {
    pub entries: Vec<LossEntry>,
}

impl LossLog {
    pub fn mean_loss_of_epoch(&self, epoch: usize) -> Option<f64> {
        let losses: Vec<f64> = self
            .entries
            .iter()
            .filter(|e| e.epoch == epoch)
            .map(|e| e.loss)
            .collect();
        if losses.is_empty() {
            None
        } else {
            Some(losses.iter().sum::<f64>() / losses.len() as f64)
        }
    }

    /// Appends `step,epoch,loss` rows (header written when creating).
    pub fn append_csv(&self, path: &Path) -> Result<()> {
        let exists = path.exists();
        let mut file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)?;
        if !exists {
            writeln!(file, "step,epoch,loss")?;
        }
        for e in &self.entries {
            writeln!(file, "{},{},{}", e.step, e.epoch, e.loss)?;
        }
        Ok(())
    }
}

/// A dataset tokenized once, ready for batching.
#[derive(Debug, Clone)]
pub struct PreparedDataset {
    pub sequences: Vec<TokenizedSequence>,
    pub labels: Vec<Vec<usize>>,
    pub task: TaskKind,
    pub num_labels: usize,
}

impl PreparedDataset {
    pub fn from_labeled(
        ds: &LabeledDataset,
        vocab: &Vocabulary,
        seq_len: usize,
    ) -> Result<Self> {
        let mut sequences = Vec::with_capacity(ds.len());
        let mut labels = Vec::with_capacity(ds.len());
        for ex in &ds.examples {
            sequences.push(encode(&ex.text, vocab, seq_len)?);
            labels.push(ex.labels.clone());
        }
        Ok(PreparedDataset {
            sequences,
            labels,
            task: ds.task,
            num_labels: ds.num_labels(),
        })
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    /// Multi-label targets as a flat 0/1 row for the given examples.
    pub fn target_rows(&self, indices: &[usize]) -> Vec<f64> {
        let mut rows = vec![0.0; indices.len() * self.num_labels];
        for (r, &i) in indices.iter().enumerate() {
            for &l in &self.labels[i] {
                rows[r * self.num_labels + l] = 1.0;
            }
        }
        rows
    }
}

/// A model that can produce a scalar loss for a batch and expose its
/// parameters in a fixed order.
pub trait TrainableModel {
    /// Parameters in the same fixed order as the ids returned by
    /// [`TrainableModel::batch_loss`].
    fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)>;

    /// Builds the loss graph for a batch on a fresh tape. Returns the loss
    /// node and the trainable parameter leaves in `named_params_mut` order.
    fn batch_loss(
        &self,
        tape: &mut Tape,
        data: &PreparedDataset,
        indices: &[usize],
        mode: &mut ForwardMode,
    ) -> Result<(TensorId, Vec<TensorId>)>;

    /// Inference on a batch; no gradients.
    fn predict(&self, data: &PreparedDataset, indices: &[usize]) -> Result<Prediction>;
}

/// Minibatch gradient descent with Adam. Shuffles each epoch from the
/// `(seed, "shuffle")` substream, includes the final partial batch, applies
/// dropout from the `(seed, "dropout")` substream, and records the loss at
/// every step.
pub fn train<M: TrainableModel>(
    model: &mut M,
    data: &PreparedDataset,
    cfg: &TrainConfig,
) -> Result<LossLog> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }

    let param_sizes: Vec<usize> = model
        .named_params_mut()
        .iter()
        .map(|(_, t)| t.numel())
        .collect();
    let mut adam = AdamState::new(cfg.lr, &param_sizes);
    let mut shuffle_rng = substream(cfg.seed, "shuffle");
    let mut dropout_rng = substream(cfg.seed, "dropout");

    let mut log = LossLog::default();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        if cfg.shuffle {
            shuffle_rng.shuffle(&mut order);
        }
        for batch in order.chunks(cfg.batch_size) {
            let mut tape = Tape::new();
            let mut mode = ForwardMode::Train {
                dropout: &mut dropout_rng,
            };
            let (loss_id, param_ids) = model.batch_loss(&mut tape, data, batch, &mut mode)?;
            let loss = tape.data(loss_id)[0];
            tape.backward(loss_id)?;
            let grads: Vec<Vec<f64>> = param_ids
                .iter()
                .map(|&id| {
                    tape.grad(id)
                        .map(|g| g.to_vec())
                        .unwrap_or_else(|| vec![0.0; tape.data(id).len()])
                })
                .collect();
            let mut params = model.named_params_mut();
            adam_step(&mut adam, &mut params, &grads)?;
            log.entries.push(LossEntry { step, epoch, loss });
            step += 1;
        }
    }
    Ok(log)
}

/// Batched inference over a whole prepared dataset; returns the predicted
/// label sets under the 0.5 multi-label threshold.
pub fn predict_dataset<M: TrainableModel>(
    model: &M,
    data: &PreparedDataset,
    batch_size: usize,
) -> Result<Vec<Vec<usize>>> {
    let indices: Vec<usize> = (0..data.len()).collect();
    let mut out = Vec::with_capacity(data.len());
    for chunk in indices.chunks(batch_size.max(1)) {
        let pred = model.predict(data, chunk)?;
        out.extend(crate::heads::predict_labels(&pred, 0.5));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn scalar_param(value: f64) -> Tensor {
        Tensor::new(vec![1], vec![value]).unwrap()
    }

    #[test]
    fn first_step_magnitude_is_lr() {
        let mut theta = scalar_param(0.0);
        let mut state = AdamState::new(0.1, &[1]);
        let mut params = vec![("theta".to_string(), &mut theta)];
        adam_step(&mut state, &mut params, &[vec![2.0]]).unwrap();
        assert_abs_diff_eq!(theta.data[0], -0.1, epsilon = 1e-7);
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut theta = scalar_param(3.5);
        let mut state = AdamState::new(0.1, &[1]);
        let mut params = vec![("theta".to_string(), &mut theta)];
        adam_step(&mut state, &mut params, &[vec![0.0]]).unwrap();
        assert_eq!(theta.data[0], 3.5);
    }

    #[test]
    fn zero_lr_is_identity() {
        let mut theta = scalar_param(1.25);
        let mut state = AdamState::new(0.0, &[1]);
        let mut params = vec![("theta".to_string(), &mut theta)];
        adam_step(&mut state, &mut params, &[vec![7.0]]).unwrap();
        assert_eq!(theta.data[0], 1.25);
    }

    #[test]
    fn ten_step_quadratic_matches_scalar_reference() {
        // Hand-rolled scalar Adam, written independently of the struct
        // implementation above.
        let (lr, beta1, beta2, eps) = (0.1, 0.9, 0.999, 1e-8);
        let mut ref_theta: f64 = 1.0;
        let (mut m, mut v) = (0.0, 0.0);
        let mut reference = Vec::new();
        for t in 1..=10 {
            let g = 2.0 * ref_theta;
            m = beta1 * m + (1.0 - beta1) * g;
            v = beta2 * v + (1.0 - beta2) * g * g;
            let m_hat = m / (1.0 - beta1.powi(t));
            let v_hat = v / (1.0 - beta2.powi(t));
            ref_theta -= lr * m_hat / (v_hat.sqrt() + eps);
            reference.push(ref_theta);
        }

        let mut theta = scalar_param(1.0);
        let mut state = AdamState::new(lr, &[1]);
        let mut trajectory = Vec::new();
        for _ in 0..10 {
            let g = 2.0 * theta.data[0];
            let mut params = vec![("theta".to_string(), &mut theta)];
            adam_step(&mut state, &mut params, &[vec![g]]).unwrap();
            trajectory.push(theta.data[0]);
        }
        for (ours, refv) in trajectory.iter().zip(&reference) {
            assert_abs_diff_eq!(ours, refv, epsilon = 1e-12);
        }
    }

    #[test]
    fn update_magnitude_stays_bounded_on_training_like_gradients() {
        let mut rng = substream(3, "adam-bound");
        let lr = 0.01;
        let mut theta = scalar_param(0.5);
        let mut state = AdamState::new(lr, &[1]);
        for _ in 0..200 {
            let g = 2.0 * theta.data[0] + 0.1 * rng.normal();
            let before = theta.data[0];
            let mut params = vec![("theta".to_string(), &mut theta)];
            adam_step(&mut state, &mut params, &[vec![g]]).unwrap();
            assert!((theta.data[0] - before).abs() <= 2.0 * lr);
        }
    }

    #[test]
    fn non_finite_gradient_names_the_parameter() {
        let mut theta = scalar_param(0.0);
        let mut state = AdamState::new(0.1, &[1]);
        let mut params = vec![("encoder.layer0.ffn_in_w".to_string(), &mut theta)];
        let err = adam_step(&mut state, &mut params, &[vec![f64::NAN]]).unwrap_err();
        assert!(err.to_string().contains("encoder.layer0.ffn_in_w"));
    }

    #[test]
    fn train_config_defaults_mirror_protocol() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.epochs, 3);
        assert_eq!(cfg.batch_size, 128);
        assert_abs_diff_eq!(cfg.lr, 2e-5);
        assert!(cfg.shuffle);
        assert_eq!(TrainConfig::phm2017().batch_size, 64);
    }

    #[test]
    fn train_config_validation() {
        let no_epochs = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        assert!(no_epochs.validate().is_err());
        let no_lr = TrainConfig {
            lr: 0.0,
            ..TrainConfig::default()
        };
        assert!(no_lr.validate().is_err());
    }

    #[test]
    fn loss_log_csv_is_append_only() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("loss.csv");
        let log = LossLog {
            entries: vec![LossEntry {
                step: 0,
                epoch: 0,
                loss: 0.5,
            }],
        };
        log.append_csv(&path).unwrap();
        log.append_csv(&path).unwrap();
        let content = std::fs::read_to_string(&path).unwrap();
        assert_eq!(content.lines().count(), 3);
        assert!(content.starts_with("step,epoch,loss"));
    }
}
