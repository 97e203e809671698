//! Desk-scale bidirectional image–text generation.
//!
//! Two model families share one numeric core:
//!
//! * **AugVAE** — a hierarchical vector-quantized autoencoder whose four
//!   quantization sites share a single EMA codebook (`augvae`, `quantizer`),
//!   plus the surgery that turns the trained multi-level model into a
//!   single-level one.
//! * **BiART** — a decoder-only transformer with REF/GEN segment embeddings,
//!   trained on `text -> image` and `image -> text` orderings alternately
//!   (`biart`), with rerank-based sampling on top (`sampler`).
//!
//! The `harness` module supplies dataset ingestion, the training loops,
//! plateau learning-rate scheduling, checkpointing, and evaluation reports;
//! `tokenizer` is a byte-level BPE with merge dropout.
//!
//! All numeric code is generic over [`scalar::Scalar`] (`f32` or `f64`);
//! the aliases below fix the single-precision profile used by training and
//! the CLI.

pub mod augvae;
pub mod biart;
pub mod error;
pub mod harness;
pub mod quantizer;
pub mod tokenizer;
pub mod nn;
pub mod rng;
pub mod sampler;
pub mod scalar;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;

// Re-exported so downstream users (the CLI) stay on the same versions.
pub use image;
pub use ndarray;

/// Single-precision aliases for the shipped training/CLI profile.
pub type Tape32 = tensor::Tape<f32>;
pub type Var32 = tensor::Var<f32>;
