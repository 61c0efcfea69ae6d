//! Attribute-controlled machine translation at desk scale.
//!
//! The crate bundles a small reverse-mode autodiff engine, an encoder-decoder
//! transformer with incremental KV-cached decoding, an attribute classifier
//! over pooled decoder states, classifier-guided decoding that edits the KV
//! cache along the classifier gradient, full-model finetuning, a synthetic
//! multilingual corpus generator and the evaluation metrics used to compare
//! the two control styles.

pub mod attrclf;
pub mod diff;
pub mod evalkit;
mod error;
pub mod guidance;
pub mod pipeline;
pub mod seed;
pub mod seq2seq;
pub mod toylang;
pub mod train;

pub use diff::{Graph, Tensor, Var};
pub use error::{Error, Result};
