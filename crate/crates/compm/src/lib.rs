//! Emotion recognition in conversation with a context encoder and a
//! GRU-tracked per-speaker memory extractor.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`]: reverse-mode autodiff over f64 tensors, with finite-difference
//!   gradient checking built in.
//! - [`nn`]: embeddings, transformer encoder, GRU tracker, linear heads.
//! - [`data`]: JSONL corpora, tokenizer/vocabulary, speaker tokens, context
//!   assembly, label taxonomies.
//! - [`model`]: the combined context + tracked-memory classifier and its
//!   ablation variants.
//! - [`train`]: AdamW with linear warmup/decay, gradient clipping, masked-token
//!   pretraining, the training loop, and the F1 metric suite.
//! - [`checkpoint`]: versioned binary parameter archives.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor};
