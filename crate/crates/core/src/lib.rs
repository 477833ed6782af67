//! Token-indexed static sparsity for transformer feed-forward layers.
//!
//! The crate contains a small reverse-mode autodiff engine, the FFN variants
//! (SwiGLU, STEM, STEM with a token-indexed gate, additive STEM†, top-r MoE and
//! hash-routed MoE), a decoder model with per-layer placement of those
//! variants, an AdamW trainer, the analytic cost model, an offload/LFU cache
//! simulator, address-vector geometry analysis, table-level knowledge editing
//! and a small evaluation harness.

pub mod analysis;
pub mod cost_model;
pub mod data;
pub mod editing;
pub mod error;
pub mod eval_harness;
pub mod layers;
pub mod memory_sim;
pub mod model;
pub mod numerics;
pub mod training;

pub use error::{Error, Result};

#[cfg(test)]
mod testutil;
