//! Few-shot concept embedding generation for frozen language models.
//!
//! Given a handful of example sentences that use an unfamiliar word, the
//! encoder produces an input/output embedding pair for a brand-new token.
//! The pair is appended to a frozen autoregressive language model's
//! embedding matrices so the model can read and write the new concept
//! without any fine-tuning. The crate also ships the training loop for the
//! generator (cross-entropy on positive and negative sequences plus hidden
//! state and logit distillation against the base model), a corpus-to-episode
//! data pipeline, baseline embedding providers, and evaluation harnesses for
//! fill-in-the-blank, slang-matching and definition-generation tasks.
//!
//! Models, encoders and providers are plain data without interior
//! mutability: shared references are safe for concurrent read-only scoring,
//! and training mutates the encoder through a single `&mut Trainer`.
//! Augmentation never touches the base model; it builds a new handle.

// position-indexed loops over parallel arrays are the house style in the
// numeric code
#![allow(clippy::needless_range_loop)]

pub mod baselines;
pub mod data;
pub mod encoder;
pub(crate) mod fileio;
pub mod error;
pub mod eval;
pub mod lm;
pub mod models;
pub mod nn;
pub mod synth;
pub mod tensor;
pub mod tok;
pub mod train;

pub use error::{CollegeError, Result};
