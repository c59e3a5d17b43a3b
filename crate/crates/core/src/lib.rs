//! Explanation-guided bias decoupling for natural language inference.
//!
//! A small transformer encoder is trained with three auxiliary signals derived
//! from human explanations: token-level keyword/bias classification,
//! supervision of a `[CLS]`-centred attention distribution, and alignment of
//! the main prediction with the joint distribution of keyword-only and
//! bias-only sub-inferences.
//!
//! Module map:
//! - [`tensor`]: dense tensors, reverse-mode differentiation, gradient checks.
//! - [`corpus`]: record ingestion, tokenization, token labels and masking.
//! - [`encoder`]: transformer blocks, adaptive token attention and heads.
//! - [`objectives`]: the loss terms and their combination.
//! - [`trainer`]: configuration, optimizer, training loop and checkpoints.
//! - [`evaluator`]: accuracy, token F1, perturbation and attention reports,
//!   plus the synthetic biased-corpus generator.

pub mod corpus;
pub mod encoder;
pub mod evaluator;
pub mod objectives;
pub mod tensor;
pub mod trainer;

pub use corpus::{Label, LabeledSequence, Record, Vocabulary};
pub use encoder::{Encoder, ModelConfig};
pub use objectives::LossBundle;
pub use trainer::{Checkpoint, Model, TrainConfig};
