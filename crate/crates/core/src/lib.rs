//! Simultaneous speech-to-unit translation at desk scale.
//!
//! The crate is organised bottom-up:
//!
//! - [`numerics`]: `f64` tensors, reverse-mode autodiff, Adam, checkpoints.
//! - [`ctc`]: collapsing, CTC loss, greedy decoding, prefix token counts.
//! - [`toyspeech`]: synthetic parallel corpora (frames, source tokens, target tokens, units).
//! - [`model`]: chunk-streaming Conformer encoder, CTC probes, AR text decoder,
//!   non-autoregressive text-to-unit generator, multi-task loss and training.
//! - [`policy`]: the CTC-alignment READ/WRITE policy, wait-k, offline decoding,
//!   and emission traces.
//! - [`evalkit`]: latency, computation-aware latency, streaming-degree and BLEU metrics.

pub mod ctc;
pub mod evalkit;
pub mod model;
pub mod numerics;
pub mod policy;
pub mod rng;
pub mod toyspeech;
pub mod vocab;
