//! Simultaneous machine translation at desk scale.
//!
//! The crate bundles a wait-k transformer with a causal source encoder,
//! prefix-to-prefix training (single path and multi-path), greedy online
//! decoding with ensembling, an ASR+MT cascade controller driven by a
//! simulated streaming recognizer, and the latency/quality metrics used to
//! chart trade-off curves (corpus BLEU and Average Lagging).
//!
//! Data-parallel loops (batch gradients, sweep points, per-sentence decoding)
//! go through [`par`], which uses rayon when the `parallel` feature is on and
//! falls back to plain iteration otherwise. Both paths produce bit-identical
//! results because work is split into fixed chunks and reduced in order.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::too_many_arguments)]

pub mod cascade;
pub mod data;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod online;
pub mod par;
pub mod training;

pub use error::{Error, Result};

/// Dense integer id of a vocabulary entry.
pub type TokenId = u32;
