//! Desk-scale audio-visual fusion ASR.
//!
//! A from-scratch stack: a verified reverse-mode tensor tape, standard neural
//! layers with LoRA adapters, a sliding-window query-attention fusion module
//! with cross-modal attention, toy encoder/decoder models, knowledge
//! distillation, an AdamW training loop with warmup+cosine scheduling, a
//! synthetic aligned audio/visual task, WER/CER scoring, and an experiment
//! harness that drives it all from config files.

pub mod error;
pub mod util;

pub mod tensor;

pub mod tape;

pub mod gradcheck;

pub mod nn;

pub mod fusion;

pub mod data;

pub mod model;

pub mod eval;

pub mod train;

pub use error::{Error, Result};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
