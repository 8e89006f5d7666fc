//! Toy transformer encoder-decoder for wait-k translation.
//!
//! The source encoder is causal: position `i` attends only to positions
//! `<= i`, so encodings of a prefix never change as more source arrives and
//! can be cached across READs. Encoder-decoder attention at target step `t`
//! is restricted to the first `z_t` source positions.
//!
//! All math is `f64`. Every batched kernel is a loop over the same per-row
//! kernel used by incremental inference, so the batched teacher-forced
//! forward pass and step-by-step decoding agree bit for bit.

mod checkpoint;
mod graph;
mod infer;
pub(crate) mod ops;
mod params;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use graph::{forward_teacher_forced, DecoderGraph, EncoderGraph};
pub use infer::{decode_step, encode_prefix, DecoderState, EncoderState};
pub use params::{Gradients, ModelConfig, Parameters, Tensor};
