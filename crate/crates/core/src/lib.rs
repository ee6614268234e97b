//! Multi-channel transformer for asynchronous sequence-to-sequence translation.
//!
//! The crate implements the full pipeline at desk scale: a reverse-mode
//! autodiff tensor engine, per-channel embeddings with batch-norm/soft-sign,
//! channel-wise and multi-channel attention blocks, translation + anchoring
//! losses, Adam training with plateau scheduling and early stopping, greedy
//! and beam-search decoding with length penalty, corpus-level BLEU-4/ROUGE-L,
//! and a bit-exact corpus/checkpoint file format. A deterministic synthetic
//! asynchronous-channel task makes the whole stack verifiable on a laptop.

pub mod error;
pub mod attention;
pub mod checkpoint;
pub mod data;
pub mod embeddings;
pub mod gradcheck;
pub mod decoding;
pub mod metrics;
pub mod model;
pub mod synth;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
