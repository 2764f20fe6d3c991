//! Text and time-series fusion for small autoregressive language models.
//!
//! Two ways of conditioning a decoder on numeric signals are provided: soft
//! prompts (patch embeddings projected into the token embedding space and
//! spliced between text segments) and gated cross-attention (a perceiver
//! resampler summarises each series into a fixed set of latents that the
//! text attends to through zero-initialised gates).

pub mod alloc;
pub mod backbone;
pub mod checkpoint;
pub mod cli;
pub mod crossattn;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod model;
pub mod ops;
pub mod params;
pub mod softprompt;
pub mod timeseries;
pub mod tokenizer;
pub mod train;

pub use error::{Result, TslmError};
