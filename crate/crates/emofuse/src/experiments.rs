//! Experiment families and the multi-seed matrix runner.
//!
//! Four families share one cell protocol: split the target dataset, build a
//! tokenizer vocabulary from the training corpora, run the family's stages,
//! and score macro-F1 on the held-out test split.
//!
//! - `baseline`: one encoder fine-tuned directly on the target task.
//! - `intermediate`: fine-tune on a multi-label emotion task first, then
//!   re-initialize a fresh classifier from that encoder and fine-tune on
//!   the target task (emotion head discarded).
//! - `fusion`: fine-tune a task branch and an emotion branch separately,
//!   then train both encoders and a joint linear head over the
//!   concatenated CLS vectors.
//! - `cross_task`: fine-tune on a source task, transfer the encoder to the
//!   target task with a freshly sized head.
//!
//! Every stage derives its randomness from the cell seed through labelled
//! substreams, so a `(plan, seed)` pair is fully reproducible.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{
    filter_negative_emotions, split_dataset, DatasetBundle, EmotionSubset,
};
use crate::encoder::{
    encode_sequence, pool_cls, register_encoder, EncoderConfig, EncoderParams, ForwardMode,
};
use crate::error::{Error, Result};
use crate::heads::{
    forward_fusion, forward_multi, forward_single, logits_forward, register_head, HeadParams,
    Prediction, TaskKind,
};
use crate::metrics::{aggregate_seeds, t_test, ConfusionCounts, SeedAggregate, SignificanceResult};
use crate::optim::{derive_seed, train, LossLog, PreparedDataset, TrainConfig, TrainableModel};
use crate::tensor::{Tape, Tensor, TensorId};
use crate::tokenizer::Vocabulary;

const EVAL_BATCH: usize = 64;

/// Experiment family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Baseline,
    Intermediate,
    Fusion,
    CrossTask,
}

impl std::fmt::Display for Family {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            Family::Baseline => "baseline",
            Family::Intermediate => "intermediate",
            Family::Fusion => "fusion",
            Family::CrossTask => "cross_task",
        };
        f.write_str(name)
    }
}

fn default_seq_len() -> usize {
    32
}

fn default_vocab_size() -> usize {
    500
}

fn default_split_seed() -> u64 {
    42
}

fn default_seeds() -> Vec<u64> {
    crate::rng::DEFAULT_SEEDS.to_vec()
}

/// Declarative description of one experiment row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentPlan {
    pub id: String,
    pub family: Family,
    /// Name of the target dataset in the bundle.
    pub hmc_dataset: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub emotion_dataset: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub negative_subset: Option<EmotionSubset>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_hmc_dataset: Option<String>,
    pub encoder: EncoderConfig,
    /// Target-stage training configuration. The `seed` field is overridden
    /// per cell with a stage-labelled derivation of the cell seed.
    pub train: TrainConfig,
    /// First-stage (emotion or source-task) configuration; defaults to
    /// `train`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage1_train: Option<TrainConfig>,
    #[serde(default = "default_seq_len")]
    pub seq_len: usize,
    #[serde(default = "default_vocab_size")]
    pub vocab_size: usize,
    #[serde(default = "default_split_seed")]
    pub split_seed: u64,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Ablation: start fusion branches from random initialization instead
    /// of fine-tuned checkpoints.
    #[serde(default)]
    pub fusion_from_scratch: bool,
}

impl ExperimentPlan {
    pub fn new(id: impl Into<String>, family: Family, hmc_dataset: impl Into<String>) -> Self {
        ExperimentPlan {
            id: id.into(),
            family,
            hmc_dataset: hmc_dataset.into(),
            emotion_dataset: None,
            negative_subset: None,
            source_hmc_dataset: None,
            encoder: EncoderConfig::toy(),
            train: TrainConfig::default(),
            stage1_train: None,
            seq_len: default_seq_len(),
            vocab_size: default_vocab_size(),
            split_seed: default_split_seed(),
            seeds: default_seeds(),
            fusion_from_scratch: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::InvalidConfig("plan has no seeds".into()));
        }
        if self.seq_len < 2 || self.seq_len > self.encoder.max_len {
            return Err(Error::InvalidConfig(format!(
                "seq_len {} must lie in [2, max_len = {}]",
                self.seq_len, self.encoder.max_len
            )));
        }
        if self.vocab_size > self.encoder.vocab_size {
            return Err(Error::InvalidConfig(format!(
                "tokenizer vocab {} exceeds encoder vocab_size {}",
                self.vocab_size, self.encoder.vocab_size
            )));
        }
        match self.family {
            Family::Baseline => {}
            Family::Intermediate | Family::Fusion => {
                if self.emotion_dataset.is_none() {
                    return Err(Error::InvalidConfig(format!(
                        "{} plans require an emotion dataset",
                        self.family
                    )));
                }
            }
            Family::CrossTask => {
                let source = self.source_hmc_dataset.as_deref().ok_or_else(|| {
                    Error::InvalidConfig("cross_task plans require a source dataset".into())
                })?;
                if source == self.hmc_dataset {
                    return Err(Error::InvalidConfig(
                        "cross_task source and target datasets must differ".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    fn stage1_train(&self) -> TrainConfig {
        self.stage1_train.clone().unwrap_or_else(|| self.train.clone())
    }

    /// SHA-256 over the canonical (sorted-key) JSON encoding, truncated to
    /// 16 hex digits. Any override changes the hash.
    pub fn config_hash(&self) -> String {
        let value = serde_json::to_value(self).expect("plan serializes");
        let mut hasher = Sha256::new();
        hasher.update(canonical_json(&value));
        let digest = hasher.finalize();
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn canonical_json(value: &serde_json::Value) -> String {
    match value {
        serde_json::Value::Object(map) => {
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            let fields: Vec<String> = keys
                .into_iter()
                .map(|k| {
                    format!(
                        "{}:{}",
                        serde_json::to_string(k).unwrap(),
                        canonical_json(&map[k])
                    )
                })
                .collect();
            format!("{{{}}}", fields.join(","))
        }
        serde_json::Value::Array(items) => {
            let parts: Vec<String> = items.iter().map(canonical_json).collect();
            format!("[{}]", parts.join(","))
        }
        other => other.to_string(),
    }
}

/// Single-encoder classifier (baseline, intermediate stages, cross-task
/// stages, emotion models).
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierModel {
    pub encoder: EncoderParams,
    pub head: HeadParams,
    pub task: TaskKind,
}

impl ClassifierModel {
    pub fn init(
        config: &EncoderConfig,
        num_labels: usize,
        task: TaskKind,
        encoder_seed: u64,
        head_seed: u64,
    ) -> Result<Self> {
        Ok(ClassifierModel {
            encoder: EncoderParams::init(config, encoder_seed)?,
            head: HeadParams::init(config.hidden_dim, num_labels, head_seed)?,
            task,
        })
    }
}

impl TrainableModel for ClassifierModel {
    fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = self
            .encoder
            .named_tensors_mut()
            .into_iter()
            .map(|(n, t)| (format!("encoder.{n}"), t))
            .collect();
        out.push(("head.weight".into(), &mut self.head.weight));
        out.push(("head.bias".into(), &mut self.head.bias));
        out
    }

    fn batch_loss(
        &self,
        tape: &mut Tape,
        data: &PreparedDataset,
        indices: &[usize],
        mode: &mut ForwardMode,
    ) -> Result<(TensorId, Vec<TensorId>)> {
        let enc = register_encoder(tape, &self.encoder, true)?;
        let head = register_head(tape, &self.head, true)?;
        let seqs: Vec<&crate::tokenizer::TokenizedSequence> =
            indices.iter().map(|&i| &data.sequences[i]).collect();
        let hidden = encode_sequence(tape, &enc, &seqs, mode)?;
        let cls = pool_cls(tape, &hidden)?;
        let loss = match self.task {
            TaskKind::Single => {
                let gold: Vec<usize> = indices.iter().map(|&i| data.labels[i][0]).collect();
                forward_single(tape, cls, &head, &gold)?.1
            }
            TaskKind::Multi => {
                let targets = data.target_rows(indices);
                forward_multi(tape, cls, &head, &targets)?.1
            }
        };
        let mut ids = enc.ids.clone();
        ids.push(head.weight);
        ids.push(head.bias);
        Ok((loss, ids))
    }

    fn predict(&self, data: &PreparedDataset, indices: &[usize]) -> Result<Prediction> {
        let mut tape = Tape::new();
        let enc = register_encoder(&mut tape, &self.encoder, false)?;
        let head = register_head(&mut tape, &self.head, false)?;
        let seqs: Vec<&crate::tokenizer::TokenizedSequence> =
            indices.iter().map(|&i| &data.sequences[i]).collect();
        let hidden = encode_sequence(&mut tape, &enc, &seqs, &mut ForwardMode::Eval)?;
        let cls = pool_cls(&mut tape, &hidden)?;
        let logits = logits_forward(&mut tape, cls, &head)?;
        Ok(Prediction::from_logits(&tape, logits, self.task))
    }
}

/// Two encoders feeding one linear head over concatenated CLS vectors.
/// All three parts update jointly during training.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionModel {
    pub hmc_encoder: EncoderParams,
    pub emotion_encoder: EncoderParams,
    pub head: HeadParams,
}

impl TrainableModel for FusionModel {
    fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = self
            .hmc_encoder
            .named_tensors_mut()
            .into_iter()
            .map(|(n, t)| (format!("hmc_encoder.{n}"), t))
            .collect();
        out.extend(
            self.emotion_encoder
                .named_tensors_mut()
                .into_iter()
                .map(|(n, t)| (format!("emotion_encoder.{n}"), t)),
        );
        out.push(("head.weight".into(), &mut self.head.weight));
        out.push(("head.bias".into(), &mut self.head.bias));
        out
    }

    fn batch_loss(
        &self,
        tape: &mut Tape,
        data: &PreparedDataset,
        indices: &[usize],
        mode: &mut ForwardMode,
    ) -> Result<(TensorId, Vec<TensorId>)> {
        let hmc_enc = register_encoder(tape, &self.hmc_encoder, true)?;
        let emo_enc = register_encoder(tape, &self.emotion_encoder, true)?;
        let head = register_head(tape, &self.head, true)?;
        let seqs: Vec<&crate::tokenizer::TokenizedSequence> =
            indices.iter().map(|&i| &data.sequences[i]).collect();
        let hmc_hidden = encode_sequence(tape, &hmc_enc, &seqs, mode)?;
        let emo_hidden = encode_sequence(tape, &emo_enc, &seqs, mode)?;
        let hmc_cls = pool_cls(tape, &hmc_hidden)?;
        let emo_cls = pool_cls(tape, &emo_hidden)?;
        let gold: Vec<usize> = indices.iter().map(|&i| data.labels[i][0]).collect();
        let (_, loss) = forward_fusion(tape, hmc_cls, emo_cls, &head, &gold)?;
        let mut ids = hmc_enc.ids.clone();
        ids.extend(emo_enc.ids.iter().copied());
        ids.push(head.weight);
        ids.push(head.bias);
        Ok((loss, ids))
    }

    fn predict(&self, data: &PreparedDataset, indices: &[usize]) -> Result<Prediction> {
        let mut tape = Tape::new();
        let hmc_enc = register_encoder(&mut tape, &self.hmc_encoder, false)?;
        let emo_enc = register_encoder(&mut tape, &self.emotion_encoder, false)?;
        let head = register_head(&mut tape, &self.head, false)?;
        let seqs: Vec<&crate::tokenizer::TokenizedSequence> =
            indices.iter().map(|&i| &data.sequences[i]).collect();
        let hmc_hidden = encode_sequence(&mut tape, &hmc_enc, &seqs, &mut ForwardMode::Eval)?;
        let emo_hidden = encode_sequence(&mut tape, &emo_enc, &seqs, &mut ForwardMode::Eval)?;
        let hmc_cls = pool_cls(&mut tape, &hmc_hidden)?;
        let emo_cls = pool_cls(&mut tape, &emo_hidden)?;
        let fused = tape.concat_features(hmc_cls, emo_cls)?;
        let logits = logits_forward(&mut tape, fused, &head)?;
        Ok(Prediction::from_logits(&tape, logits, TaskKind::Single))
    }
}

/// Copies every encoder parameter of a trained classifier into a new model
/// and attaches a freshly initialized head for the new label space. The
/// old head is discarded; nothing else changes.
pub fn transfer_encoder(
    trained: &ClassifierModel,
    num_labels: usize,
    task: TaskKind,
    head_seed: u64,
) -> Result<ClassifierModel> {
    Ok(ClassifierModel {
        encoder: trained.encoder.clone(),
        head: HeadParams::init(trained.encoder.config.hidden_dim, num_labels, head_seed)?,
        task,
    })
}

/// Per-class precision / recall / F1 row of a result record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub label: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct Timings {
    pub total_secs: f64,
    pub stages: Vec<StageTiming>,
}

/// Everything one `(plan, seed)` cell produces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub seed: u64,
    pub macro_f1: f64,
    pub per_class: Vec<ClassMetrics>,
    pub stage_logs: Vec<(String, LossLog)>,
    pub config_hash: String,
    pub timings: Timings,
}

/// The `result.json` schema written per cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub plan_id: String,
    pub family: Family,
    pub datasets: Vec<String>,
    pub seed: u64,
    pub macro_f1: f64,
    pub per_class: Vec<ClassMetrics>,
    pub config_hash: String,
    pub timings: Timings,
}

impl ResultRecord {
    pub fn from_run(plan: &ExperimentPlan, run: &RunResult) -> Self {
        let mut datasets = vec![plan.hmc_dataset.clone()];
        if let Some(e) = &plan.emotion_dataset {
            datasets.push(e.clone());
        }
        if let Some(s) = &plan.source_hmc_dataset {
            datasets.push(s.clone());
        }
        ResultRecord {
            plan_id: plan.id.clone(),
            family: plan.family,
            datasets,
            seed: run.seed,
            macro_f1: run.macro_f1,
            per_class: run.per_class.clone(),
            config_hash: run.config_hash.clone(),
            timings: run.timings.clone(),
        }
    }
}

/// Splits, vocabulary and tokenized data shared by every seed of a plan.
pub struct PlanData {
    pub vocab: Vocabulary,
    pub hmc_train: PreparedDataset,
    pub hmc_test: PreparedDataset,
    pub hmc_label_names: Vec<String>,
    pub emotion_train: Option<PreparedDataset>,
    pub source_train: Option<PreparedDataset>,
}

/// Splits the bundle datasets, builds the shared vocabulary from the train
/// splits, applies the negative-emotion filter, and tokenizes everything.
pub fn prepare_plan_data(plan: &ExperimentPlan, bundle: &DatasetBundle) -> Result<PlanData> {
    plan.validate()?;
    if bundle.hmc.task != TaskKind::Single {
        return Err(Error::Experiment(format!(
            "'{}' must be a single-label dataset",
            plan.hmc_dataset
        )));
    }
    let needs_emotion = matches!(plan.family, Family::Intermediate | Family::Fusion);
    if needs_emotion {
        match &bundle.emotion {
            None => {
                return Err(Error::Experiment(format!(
                    "plan '{}' needs emotion dataset '{}' in the bundle",
                    plan.id,
                    plan.emotion_dataset.as_deref().unwrap_or("?")
                )))
            }
            Some(e) if e.task != TaskKind::Multi => {
                return Err(Error::Experiment(
                    "emotion dataset must be multi-label".into(),
                ))
            }
            _ => {}
        }
    }
    if plan.family == Family::CrossTask {
        match &bundle.source_hmc {
            None => {
                return Err(Error::Experiment(format!(
                    "plan '{}' needs source dataset '{}' in the bundle",
                    plan.id,
                    plan.source_hmc_dataset.as_deref().unwrap_or("?")
                )))
            }
            Some(s) if s.task != TaskKind::Single => {
                return Err(Error::Experiment(
                    "cross-task source must be single-label".into(),
                ))
            }
            _ => {}
        }
    }

    let hmc_split = split_dataset(&bundle.hmc, plan.split_seed)?;
    let emotion_split = bundle
        .emotion
        .as_ref()
        .map(|e| split_dataset(e, plan.split_seed))
        .transpose()?;
    let source_split = bundle
        .source_hmc
        .as_ref()
        .map(|s| split_dataset(s, plan.split_seed))
        .transpose()?;

    // One vocabulary over every training corpus present in the bundle, so
    // the same tokenizer serves all stages (and stays comparable across
    // families run on the same bundle).
    let mut corpus: Vec<String> = hmc_split.train.texts().map(str::to_string).collect();
    if let Some(e) = &emotion_split {
        corpus.extend(e.train.texts().map(str::to_string));
    }
    if let Some(s) = &source_split {
        corpus.extend(s.train.texts().map(str::to_string));
    }
    let vocab = Vocabulary::build(&corpus, plan.vocab_size)?;

    let emotion_train = match (&emotion_split, needs_emotion) {
        (Some(split), true) => {
            let train = match &plan.negative_subset {
                Some(subset) => filter_negative_emotions(&split.train, subset)?,
                None => split.train.clone(),
            };
            Some(PreparedDataset::from_labeled(&train, &vocab, plan.seq_len)?)
        }
        _ => None,
    };
    let source_train = source_split
        .as_ref()
        .map(|s| PreparedDataset::from_labeled(&s.train, &vocab, plan.seq_len))
        .transpose()?;

    Ok(PlanData {
        hmc_train: PreparedDataset::from_labeled(&hmc_split.train, &vocab, plan.seq_len)?,
        hmc_test: PreparedDataset::from_labeled(&hmc_split.test, &vocab, plan.seq_len)?,
        hmc_label_names: bundle.hmc.label_names.clone(),
        emotion_train,
        source_train,
        vocab,
    })
}

fn test_metrics<M: TrainableModel>(
    model: &M,
    test: &PreparedDataset,
    label_names: &[String],
) -> Result<(f64, Vec<ClassMetrics>)> {
    let preds = crate::optim::predict_dataset(model, test, EVAL_BATCH)?;
    let pred_ids: Vec<usize> = preds.iter().map(|p| p[0]).collect();
    let golds: Vec<usize> = test.labels.iter().map(|l| l[0]).collect();
    let counts = ConfusionCounts::from_predictions(&pred_ids, &golds, test.num_labels)?;
    let per_class = label_names
        .iter()
        .enumerate()
        .map(|(c, label)| {
            let (precision, recall, f1) = counts.class_prf(c);
            ClassMetrics {
                label: label.clone(),
                precision,
                recall,
                f1,
            }
        })
        .collect();
    Ok((counts.macro_f1(), per_class))
}

/// Trains a classifier unless the stage is a zero-epoch ablation, in which
/// case the freshly initialized model is returned untouched.
fn run_stage(
    model: &mut ClassifierModel,
    data: &PreparedDataset,
    cfg: &TrainConfig,
) -> Result<LossLog> {
    if cfg.epochs == 0 {
        return Ok(LossLog::default());
    }
    train(model, data, cfg)
}

fn stage_cfg(base: &TrainConfig, cell_seed: u64, label: &str) -> TrainConfig {
    TrainConfig {
        seed: derive_seed(cell_seed, label),
        ..base.clone()
    }
}

struct CellRunner<'a> {
    plan: &'a ExperimentPlan,
    data: &'a PlanData,
    seed: u64,
    stage_logs: Vec<(String, LossLog)>,
    timings: Timings,
    checkpoints: Vec<(String, ClassifierModel)>,
}

impl<'a> CellRunner<'a> {
    fn new(plan: &'a ExperimentPlan, data: &'a PlanData, seed: u64) -> Self {
        CellRunner {
            plan,
            data,
            seed,
            stage_logs: Vec::new(),
            timings: Timings::default(),
            checkpoints: Vec::new(),
        }
    }

    fn record<T>(&mut self, stage: &str, f: impl FnOnce(&mut Self) -> Result<T>) -> Result<T> {
        let start = Instant::now();
        let out = f(self)?;
        self.timings.stages.push(StageTiming {
            stage: stage.to_string(),
            secs: start.elapsed().as_secs_f64(),
        });
        Ok(out)
    }

    /// Baseline-style target-task classifier, also used as fusion branch A.
    fn baseline_model(&mut self) -> Result<ClassifierModel> {
        let mut model = ClassifierModel::init(
            &self.plan.encoder,
            self.data.hmc_train.num_labels,
            TaskKind::Single,
            derive_seed(self.seed, "baseline-encoder"),
            derive_seed(self.seed, "baseline-head"),
        )?;
        let cfg = stage_cfg(&self.plan.train, self.seed, "baseline-train");
        let log = run_stage(&mut model, &self.data.hmc_train, &cfg)?;
        self.stage_logs.push(("baseline".into(), log));
        Ok(model)
    }

    /// Emotion-task classifier (fusion branch B, intermediate stage 1).
    fn emotion_model(&mut self) -> Result<ClassifierModel> {
        let emotion = self.data.emotion_train.as_ref().ok_or_else(|| {
            Error::Experiment(format!(
                "plan '{}': emotion stage requested without emotion data; run prepare first",
                self.plan.id
            ))
        })?;
        let mut model = ClassifierModel::init(
            &self.plan.encoder,
            emotion.num_labels,
            TaskKind::Multi,
            derive_seed(self.seed, "stage1-encoder"),
            derive_seed(self.seed, "stage1-head"),
        )?;
        let cfg = stage_cfg(&self.plan.stage1_train(), self.seed, "stage1-train");
        let log = run_stage(&mut model, emotion, &cfg)?;
        self.stage_logs.push(("emotion".into(), log));
        Ok(model)
    }

    /// Executes the family's stages; returns the scored result plus the
    /// stage checkpoints for persistence.
    fn run(mut self) -> Result<(RunResult, Vec<(String, ClassifierModel)>)> {
        let start = Instant::now();
        let (macro_f1, per_class) = match self.plan.family {
            Family::Baseline => {
                let model = self.record("baseline", |r| r.baseline_model())?;
                self.checkpoints.push(("stage1".into(), model.clone()));
                test_metrics(&model, &self.data.hmc_test, &self.data.hmc_label_names)?
            }

            Family::Intermediate => {
                let emotion = self.record("stage1-emotion", |r| r.emotion_model())?;
                self.checkpoints.push(("stage1".into(), emotion.clone()));
                let mut target = transfer_encoder(
                    &emotion,
                    self.data.hmc_train.num_labels,
                    TaskKind::Single,
                    derive_seed(self.seed, "stage2-head"),
                )?;
                let cfg = stage_cfg(&self.plan.train, self.seed, "stage2-train");
                let log = self.record("stage2-target", |r| {
                    run_stage(&mut target, &r.data.hmc_train, &cfg)
                })?;
                self.stage_logs.push(("target".into(), log));
                self.checkpoints.push(("stage2".into(), target.clone()));
                test_metrics(&target, &self.data.hmc_test, &self.data.hmc_label_names)?
            }

            Family::Fusion => {
                let (branch_hmc, branch_emotion) = if self.plan.fusion_from_scratch {
                    let hmc = ClassifierModel::init(
                        &self.plan.encoder,
                        self.data.hmc_train.num_labels,
                        TaskKind::Single,
                        derive_seed(self.seed, "baseline-encoder"),
                        derive_seed(self.seed, "baseline-head"),
                    )?;
                    let emotion_labels = self
                        .data
                        .emotion_train
                        .as_ref()
                        .map(|e| e.num_labels)
                        .unwrap_or(1);
                    let emo = ClassifierModel::init(
                        &self.plan.encoder,
                        emotion_labels,
                        TaskKind::Multi,
                        derive_seed(self.seed, "stage1-encoder"),
                        derive_seed(self.seed, "stage1-head"),
                    )?;
                    (hmc, emo)
                } else {
                    let hmc = self.record("stage1-hmc", |r| r.baseline_model())?;
                    let emo = self.record("stage1-emotion", |r| r.emotion_model())?;
                    (hmc, emo)
                };
                self.checkpoints
                    .push(("stage1-hmc".into(), branch_hmc.clone()));
                self.checkpoints
                    .push(("stage1-emotion".into(), branch_emotion.clone()));

                let d = self.plan.encoder.hidden_dim;
                let mut fusion = FusionModel {
                    hmc_encoder: branch_hmc.encoder,
                    emotion_encoder: branch_emotion.encoder,
                    head: HeadParams::init(
                        2 * d,
                        self.data.hmc_train.num_labels,
                        derive_seed(self.seed, "fusion-head"),
                    )?,
                };
                let cfg = stage_cfg(&self.plan.train, self.seed, "fusion-train");
                let log = self.record("stage2-joint", |r| {
                    if cfg.epochs == 0 {
                        Ok(LossLog::default())
                    } else {
                        train(&mut fusion, &r.data.hmc_train, &cfg)
                    }
                })?;
                self.stage_logs.push(("fusion".into(), log));
                self.checkpoints.push((
                    "stage2-hmc".into(),
                    ClassifierModel {
                        encoder: fusion.hmc_encoder.clone(),
                        head: fusion.head.clone(),
                        task: TaskKind::Single,
                    },
                ));
                self.checkpoints.push((
                    "stage2-emotion".into(),
                    ClassifierModel {
                        encoder: fusion.emotion_encoder.clone(),
                        head: fusion.head.clone(),
                        task: TaskKind::Single,
                    },
                ));
                test_metrics(&fusion, &self.data.hmc_test, &self.data.hmc_label_names)?
            }

            Family::CrossTask => {
                let source = self.data.source_train.as_ref().ok_or_else(|| {
                    Error::Experiment(format!(
                        "plan '{}': cross-task stage requested without source data",
                        self.plan.id
                    ))
                })?;
                let mut source_model = ClassifierModel::init(
                    &self.plan.encoder,
                    source.num_labels,
                    TaskKind::Single,
                    derive_seed(self.seed, "stage1-encoder"),
                    derive_seed(self.seed, "stage1-head"),
                )?;
                let cfg1 = stage_cfg(&self.plan.stage1_train(), self.seed, "stage1-train");
                let log = self.record("stage1-source", |_| {
                    run_stage(&mut source_model, source, &cfg1)
                })?;
                self.stage_logs.push(("source".into(), log));
                self.checkpoints
                    .push(("stage1".into(), source_model.clone()));

                let mut target = transfer_encoder(
                    &source_model,
                    self.data.hmc_train.num_labels,
                    TaskKind::Single,
                    derive_seed(self.seed, "stage2-head"),
                )?;
                let cfg2 = stage_cfg(&self.plan.train, self.seed, "stage2-train");
                let log = self.record("stage2-target", |r| {
                    run_stage(&mut target, &r.data.hmc_train, &cfg2)
                })?;
                self.stage_logs.push(("target".into(), log));
                self.checkpoints.push(("stage2".into(), target.clone()));
                test_metrics(&target, &self.data.hmc_test, &self.data.hmc_label_names)?
            }
        };

        self.timings.total_secs = start.elapsed().as_secs_f64();
        let run = RunResult {
            seed: self.seed,
            macro_f1,
            per_class,
            stage_logs: self.stage_logs,
            config_hash: self.plan.config_hash(),
            timings: self.timings,
        };
        Ok((run, self.checkpoints))
    }
}

/// Directory for one cell's artifacts: `<root>/<plan-id>/<seed>/`.
pub fn cell_dir(root: &Path, plan_id: &str, seed: u64) -> PathBuf {
    root.join(plan_id).join(seed.to_string())
}

/// Runs one `(plan, seed)` cell against already-prepared data, optionally
/// writing `stage<k>.ckpt` files, per-stage loss CSVs, and `result.json`
/// under `<root>/<plan-id>/<seed>/`.
pub fn run_prepared_cell(
    plan: &ExperimentPlan,
    data: &PlanData,
    seed: u64,
    out_root: Option<&Path>,
) -> Result<RunResult> {
    let (run, checkpoints) = CellRunner::new(plan, data, seed).run()?;
    if let Some(root) = out_root {
        let dir = cell_dir(root, &plan.id, seed);
        std::fs::create_dir_all(&dir)?;
        for (stage, model) in &checkpoints {
            crate::checkpoint::save_encoder(
                &dir.join(format!("{stage}.ckpt")),
                &model.encoder,
                Some(&model.head),
            )?;
        }
        for (stage, log) in &run.stage_logs {
            log.append_csv(&dir.join(format!("loss-{stage}.csv")))?;
        }
        let record = ResultRecord::from_run(plan, &run);
        std::fs::write(
            dir.join("result.json"),
            serde_json::to_string_pretty(&record)?,
        )?;
    }
    Ok(run)
}

/// Convenience wrapper: prepares the plan data and runs a single cell.
pub fn run_cell(
    plan: &ExperimentPlan,
    bundle: &DatasetBundle,
    seed: u64,
    out_root: Option<&Path>,
) -> Result<RunResult> {
    let data = prepare_plan_data(plan, bundle)?;
    run_prepared_cell(plan, &data, seed, out_root)
}

/// One plan with its resolved datasets.
pub struct MatrixCell {
    pub plan: ExperimentPlan,
    pub bundle: DatasetBundle,
}

/// Outcome of one `(plan, seed)` cell inside a matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedOutcome {
    pub seed: u64,
    pub macro_f1: Option<f64>,
    pub error: Option<String>,
}

/// Aggregated outcome of one plan row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanOutcome {
    pub plan_id: String,
    pub family: Family,
    pub hmc_dataset: String,
    pub cells: Vec<SeedOutcome>,
    pub aggregate: Option<SeedAggregate>,
    /// Welch test against the designated baseline row, when computable.
    pub significance: Option<SignificanceResult>,
}

impl PlanOutcome {
    pub fn failed(&self) -> bool {
        self.cells.iter().any(|c| c.error.is_some())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixReport {
    pub rows: Vec<PlanOutcome>,
    pub baseline_id: Option<String>,
}

impl MatrixReport {
    pub fn all_succeeded(&self) -> bool {
        self.rows.iter().all(|r| !r.failed())
    }
}

/// Executes every `(plan, seed)` cell, aggregates per plan, and marks
/// Welch-test significance against the baseline row. Cell failures are
/// recorded as markers and do not disturb other cells. `jobs = 0` uses the
/// global thread pool.
pub fn run_matrix(
    cells: &[MatrixCell],
    baseline_id: Option<&str>,
    out_root: Option<&Path>,
    jobs: usize,
) -> Result<MatrixReport> {
    if cells.is_empty() {
        return Err(Error::Experiment("empty experiment matrix".into()));
    }
    let execute = || -> Vec<PlanOutcome> {
        cells
            .par_iter()
            .map(|cell| run_plan_outcome(cell, out_root))
            .collect()
    };
    let mut rows = if jobs == 0 {
        execute()
    } else {
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| Error::Experiment(format!("thread pool: {e}")))?
            .install(execute)
    };

    if let Some(base_id) = baseline_id {
        let baseline_scores: Option<Vec<f64>> = rows
            .iter()
            .find(|r| r.plan_id == base_id)
            .and_then(|r| r.aggregate.as_ref().map(|a| a.per_seed.clone()));
        if let Some(base) = baseline_scores {
            for row in rows.iter_mut().filter(|r| r.plan_id != base_id) {
                if let Some(agg) = &row.aggregate {
                    row.significance = t_test(&agg.per_seed, &base).ok();
                }
            }
        }
    }

    Ok(MatrixReport {
        rows,
        baseline_id: baseline_id.map(str::to_string),
    })
}

pub(crate) fn run_plan_outcome(cell: &MatrixCell, out_root: Option<&Path>) -> PlanOutcome {
    let plan = &cell.plan;
    let prepared = match prepare_plan_data(plan, &cell.bundle) {
        Ok(p) => p,
        Err(e) => {
            return PlanOutcome {
                plan_id: plan.id.clone(),
                family: plan.family,
                hmc_dataset: plan.hmc_dataset.clone(),
                cells: plan
                    .seeds
                    .iter()
                    .map(|&seed| SeedOutcome {
                        seed,
                        macro_f1: None,
                        error: Some(e.to_string()),
                    })
                    .collect(),
                aggregate: None,
                significance: None,
            }
        }
    };
    let cells: Vec<SeedOutcome> = plan
        .seeds
        .par_iter()
        .map(|&seed| match run_prepared_cell(plan, &prepared, seed, out_root) {
            Ok(run) => SeedOutcome {
                seed,
                macro_f1: Some(run.macro_f1),
                error: None,
            },
            Err(e) => SeedOutcome {
                seed,
                macro_f1: None,
                error: Some(e.to_string()),
            },
        })
        .collect();
    let scores: Vec<f64> = cells.iter().filter_map(|c| c.macro_f1).collect();
    PlanOutcome {
        plan_id: plan.id.clone(),
        family: plan.family,
        hmc_dataset: plan.hmc_dataset.clone(),
        aggregate: aggregate_seeds(&scores).ok(),
        cells,
        significance: None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_synthetic, SynthSpec};
    use approx::assert_abs_diff_eq;

    fn tiny_spec() -> SynthSpec {
        SynthSpec {
            n: 80,
            theme_words_per_label: 4,
            emotion_words_per_label: 6,
            ..SynthSpec::default()
        }
    }

    fn tiny_encoder() -> EncoderConfig {
        EncoderConfig {
            num_layers: 1,
            hidden_dim: 8,
            num_heads: 2,
            ffn_dim: 16,
            vocab_size: 300,
            max_len: 16,
            dropout_rate: 0.0,
        }
    }

    fn tiny_plan(id: &str, family: Family) -> ExperimentPlan {
        let mut plan = ExperimentPlan::new(id, family, "synthetic-hmc");
        plan.encoder = tiny_encoder();
        plan.seq_len = 16;
        plan.vocab_size = 120;
        plan.seeds = vec![1, 2];
        plan.train = TrainConfig {
            epochs: 1,
            batch_size: 16,
            lr: 1e-3,
            seed: 1,
            shuffle: true,
        };
        if matches!(family, Family::Intermediate | Family::Fusion) {
            plan.emotion_dataset = Some("synthetic-emotion".into());
        }
        plan
    }

    fn tiny_bundle() -> DatasetBundle {
        let pair = make_synthetic(&tiny_spec()).unwrap();
        DatasetBundle {
            hmc: pair.hmc,
            emotion: Some(pair.emotion),
            source_hmc: None,
        }
    }

    #[test]
    fn plan_validation_enforces_family_requirements() {
        let mut plan = tiny_plan("p", Family::Intermediate);
        plan.emotion_dataset = None;
        assert!(plan.validate().is_err());

        let mut plan = tiny_plan("p", Family::CrossTask);
        assert!(plan.validate().is_err());
        plan.source_hmc_dataset = Some("synthetic-hmc".into());
        assert!(plan.validate().is_err(), "source == target must fail");
        plan.source_hmc_dataset = Some("other".into());
        assert!(plan.validate().is_ok());

        let mut plan = tiny_plan("p", Family::Baseline);
        plan.seeds.clear();
        assert!(plan.validate().is_err());
    }

    #[test]
    fn config_hash_tracks_every_field() {
        let plan = tiny_plan("p", Family::Baseline);
        let base = plan.config_hash();
        assert_eq!(base, tiny_plan("p", Family::Baseline).config_hash());
        let mut changed = plan.clone();
        changed.train.lr = 1e-4;
        assert_ne!(base, changed.config_hash());
        let mut changed = plan;
        changed.seq_len += 1;
        assert_ne!(base, changed.config_hash());
    }

    #[test]
    fn transfer_copies_encoder_bitwise_and_redraws_head() {
        let config = tiny_encoder();
        let mut trained =
            ClassifierModel::init(&config, 7, TaskKind::Multi, 11, 12).unwrap();
        // Perturb so the encoder is distinguishable from any fresh init.
        trained.encoder.token_embedding.data[0] = 0.123456;
        trained.head.weight.data[0] = 9.0;

        let transferred = transfer_encoder(&trained, 2, TaskKind::Single, 13).unwrap();
        assert_eq!(transferred.encoder, trained.encoder);
        assert_eq!(transferred.head.num_labels(), 2);
        assert_eq!(transferred.task, TaskKind::Single);
        // Fresh draw, not a copy of any slice of the old head.
        assert!(transferred
            .head
            .weight
            .data
            .iter()
            .zip(&trained.head.weight.data)
            .any(|(a, b)| a != b));
        assert_eq!(
            transferred.head,
            HeadParams::init(config.hidden_dim, 2, 13).unwrap()
        );
    }

    #[test]
    fn fusion_degeneracy_reproduces_baseline_logits() {
        let bundle = tiny_bundle();
        let plan = tiny_plan("p", Family::Fusion);
        let data = prepare_plan_data(&plan, &bundle).unwrap();

        let baseline =
            ClassifierModel::init(&tiny_encoder(), 2, TaskKind::Single, 21, 22).unwrap();
        let emotion_encoder = EncoderParams::init(&tiny_encoder(), 23).unwrap();

        // Fusion head: task-half rows equal the baseline head, emotion-half
        // rows zero.
        let d = tiny_encoder().hidden_dim;
        let mut weight = baseline.head.weight.data.clone();
        weight.extend(std::iter::repeat_n(0.0, d * 2));
        let fusion = FusionModel {
            hmc_encoder: baseline.encoder.clone(),
            emotion_encoder,
            head: HeadParams {
                weight: Tensor::new(vec![2 * d, 2], weight).unwrap(),
                bias: baseline.head.bias.clone(),
            },
        };

        let indices: Vec<usize> = (0..8).collect();
        let base_pred = baseline.predict(&data.hmc_test, &indices).unwrap();
        let fused_pred = fusion.predict(&data.hmc_test, &indices).unwrap();
        for (a, b) in fused_pred.logits.iter().zip(&base_pred.logits) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn cell_is_deterministic_for_every_family() {
        let bundle = tiny_bundle();
        for family in [Family::Baseline, Family::Intermediate, Family::Fusion] {
            let plan = tiny_plan("p", family);
            let data = prepare_plan_data(&plan, &bundle).unwrap();
            let a = run_prepared_cell(&plan, &data, 1, None).unwrap();
            let b = run_prepared_cell(&plan, &data, 1, None).unwrap();
            assert_eq!(a.macro_f1.to_bits(), b.macro_f1.to_bits(), "{family}");
            assert_eq!(a.per_class, b.per_class, "{family}");
            assert_eq!(a.stage_logs, b.stage_logs, "{family}");
        }
    }

    #[test]
    fn intermediate_runs_filtered_stage_one() {
        let bundle = tiny_bundle();
        let mut plan = tiny_plan("p", Family::Intermediate);
        plan.negative_subset = Some(EmotionSubset::GeNegative);
        let data = prepare_plan_data(&plan, &bundle).unwrap();
        // GE-neg keeps 5 of the 7 generator emotions.
        assert_eq!(data.emotion_train.as_ref().unwrap().num_labels, 5);
        let run = run_prepared_cell(&plan, &data, 1, None).unwrap();
        assert!(run.macro_f1 >= 0.0 && run.macro_f1 <= 1.0);
        assert_eq!(run.stage_logs.len(), 2);
    }

    #[test]
    fn cross_task_reshapes_the_head() {
        // Source task has 4 classes, target has 2.
        let source_spec = SynthSpec {
            num_hmc_labels: 4,
            data_seed: Some(99),
            ..tiny_spec()
        };
        let source = make_synthetic(&source_spec).unwrap().hmc;
        let pair = make_synthetic(&tiny_spec()).unwrap();
        let bundle = DatasetBundle {
            hmc: pair.hmc,
            emotion: None,
            source_hmc: Some(source),
        };
        let mut plan = tiny_plan("p", Family::CrossTask);
        plan.source_hmc_dataset = Some("synthetic-hmc-4".into());
        let data = prepare_plan_data(&plan, &bundle).unwrap();
        assert_eq!(data.source_train.as_ref().unwrap().num_labels, 4);
        let run = run_prepared_cell(&plan, &data, 1, None).unwrap();
        assert_eq!(run.per_class.len(), 2);
    }

    #[test]
    fn matrix_aggregates_and_marks_failures() {
        let bundle = tiny_bundle();
        let mut ok_plan = tiny_plan("row-ok", Family::Baseline);
        ok_plan.train.epochs = 0; // untrained control keeps this fast
        let mut bad_plan = tiny_plan("row-bad", Family::Intermediate);
        bad_plan.train.epochs = 0;
        // Intermediate without emotion data in the bundle: every seed fails.
        let bad_bundle = DatasetBundle::hmc_only(bundle.hmc.clone());

        let cells = vec![
            MatrixCell {
                plan: ok_plan,
                bundle: bundle.clone(),
            },
            MatrixCell {
                plan: bad_plan,
                bundle: bad_bundle,
            },
        ];
        let report = run_matrix(&cells, Some("row-ok"), None, 1).unwrap();
        assert!(!report.all_succeeded());
        let ok_row = &report.rows[0];
        assert!(!ok_row.failed());
        let agg = ok_row.aggregate.as_ref().unwrap();
        assert_eq!(agg.per_seed.len(), 2);
        assert_abs_diff_eq!(
            agg.mean,
            agg.per_seed.iter().sum::<f64>() / 2.0,
            epsilon = 1e-15
        );
        let bad_row = &report.rows[1];
        assert!(bad_row.failed());
        assert!(bad_row.cells.iter().all(|c| c.error.is_some()));
        assert!(bad_row.aggregate.is_none());
    }

    #[test]
    fn single_cell_matrix_equals_the_run_result() {
        let bundle = tiny_bundle();
        let mut plan = tiny_plan("solo", Family::Baseline);
        plan.train.epochs = 0;
        plan.seeds = vec![3];
        let data = prepare_plan_data(&plan, &bundle).unwrap();
        let direct = run_prepared_cell(&plan, &data, 3, None).unwrap();
        let report = run_matrix(
            &[MatrixCell {
                plan,
                bundle,
            }],
            None,
            None,
            1,
        )
        .unwrap();
        let agg = report.rows[0].aggregate.as_ref().unwrap();
        assert_eq!(agg.per_seed, vec![direct.macro_f1]);
        assert_abs_diff_eq!(agg.mean, direct.macro_f1, epsilon = 1e-15);
    }

    #[test]
    fn fusion_from_scratch_skips_branch_pretraining() {
        let bundle = tiny_bundle();
        let mut plan = tiny_plan("scratch", Family::Fusion);
        plan.fusion_from_scratch = true;
        let data = prepare_plan_data(&plan, &bundle).unwrap();
        let run = run_prepared_cell(&plan, &data, 1, None).unwrap();
        // Only the joint stage trains; no branch pretraining logs.
        assert_eq!(run.stage_logs.len(), 1);
        assert_eq!(run.stage_logs[0].0, "fusion");

        plan.fusion_from_scratch = false;
        let pretrained = run_prepared_cell(&plan, &data, 1, None).unwrap();
        assert_eq!(pretrained.stage_logs.len(), 3);
    }

    #[test]
    fn untrained_control_scores_near_chance() {
        let spec = SynthSpec {
            n: 400,
            ..SynthSpec::default()
        };
        let pair = make_synthetic(&spec).unwrap();
        let bundle = DatasetBundle::hmc_only(pair.hmc);
        let mut plan = tiny_plan("control", Family::Baseline);
        plan.train.epochs = 0;
        let data = prepare_plan_data(&plan, &bundle).unwrap();
        let run = run_prepared_cell(&plan, &data, 1, None).unwrap();
        // An untrained two-class model cannot be anywhere near separable
        // performance; chance-level macro-F1 lies well below 0.7.
        assert!(
            run.macro_f1 < 0.7,
            "untrained control scored {}",
            run.macro_f1
        );
    }

    #[test]
    fn cell_artifacts_are_written() {
        let bundle = tiny_bundle();
        let mut plan = tiny_plan("artifacts", Family::Fusion);
        plan.seeds = vec![1];
        let dir = tempfile::tempdir().unwrap();
        let data = prepare_plan_data(&plan, &bundle).unwrap();
        run_prepared_cell(&plan, &data, 1, Some(dir.path())).unwrap();
        let cell = cell_dir(dir.path(), "artifacts", 1);
        for file in [
            "stage1-hmc.ckpt",
            "stage1-emotion.ckpt",
            "stage2-hmc.ckpt",
            "stage2-emotion.ckpt",
            "result.json",
        ] {
            assert!(cell.join(file).exists(), "{file} missing");
        }
        let record: ResultRecord =
            serde_json::from_str(&std::fs::read_to_string(cell.join("result.json")).unwrap())
                .unwrap();
        assert_eq!(record.plan_id, "artifacts");
        assert_eq!(record.seed, 1);
        assert_eq!(record.datasets, vec!["synthetic-hmc", "synthetic-emotion"]);
    }
}
