//! Desk-scale workbench for comparing the internal computation of a tiny
//! autoregressive transformer against a masked-diffusion variant
//! post-trained from the same weights.
//!
//! The crate covers the full pipeline: tensor/tape numerics with reverse-mode
//! gradients, the shared model runtime (causal and full-attention modes),
//! task generators, training, edge-attribution circuit discovery with an
//! exact-patching oracle, circuit comparison metrics, and logit-lens /
//! neuron-level interpretation.

pub mod error;
pub mod graph;
pub mod model;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};

/// Reserved padding token id (excluded from attention and loss).
pub const PAD_TOKEN: usize = 0;
/// Reserved mask placeholder id used by the masked-diffusion mode.
pub const MASK_TOKEN: usize = 1;
