//! Desk-scale transformer training framework for emotion-aware health
//! mention classification experiments.
//!
//! The crate builds everything from first principles on a reverse-mode
//! autodiff tape over dense `f64` tensors: a trainable WordPiece-style
//! tokenizer, a bidirectional transformer encoder with CLS pooling,
//! single-label (softmax/CE) and multi-label (sigmoid/BCE) heads, a fusion
//! head over concatenated CLS features from two encoders, Adam, and the
//! multi-seed evaluation protocol (macro-F1, Welch's t-test).
//!
//! Experiment families:
//! - `baseline`: fine-tune one encoder directly on a health-mention task.
//! - `intermediate`: fine-tune on a multi-label emotion task first, then
//!   restart from those encoder weights with a fresh head.
//! - `fusion`: jointly fine-tune a task encoder and an emotion encoder whose
//!   CLS vectors are concatenated under one linear head.
//! - `cross_task`: transfer an encoder fine-tuned on one health-mention
//!   dataset to another.

pub mod checkpoint;
pub mod data;
pub mod encoder;
pub mod error;
pub mod experiments;
pub mod heads;
pub mod metrics;
pub mod optim;
pub mod report;
pub mod rng;
pub mod special;
pub mod tensor;
pub mod tokenizer;

pub use error::{Error, Result};
