//! Streaming decoder-only speech recognition at desk scale.
//!
//! The pipeline: audio features are stacked and split into fixed-size chunks,
//! a block-causal encoder with bounded lookahead produces frame encodings and
//! CTC logits, the transcript is segmented per chunk via CTC forced alignment,
//! and a decoder-only transformer consumes chunk audio interleaved with text
//! tokens under a windowed attention mask. Inference is chunk-synchronous beam
//! search with chunk-granular cache eviction, which keeps per-token cost flat
//! in utterance length.

pub mod ctcalign;
pub mod data;
pub mod evalbench;
pub mod model;
pub mod numcore;
pub mod runconfig;
pub mod search;
pub mod train;

mod binio;
mod error;

pub use error::{Error, Result};
