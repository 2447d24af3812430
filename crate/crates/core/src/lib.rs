//! Multilingual multi-speaker text-to-speech over discrete sound units.
//!
//! Text is mapped to frame-rate unit sequences by a non-autoregressive model
//! with a duration predictor, and units are turned into audio by a
//! speaker-conditioned decoder. Units come from k-means over log mel-band
//! features, so every stage can be trained from scratch.

pub mod aligner;
pub mod corpus;
mod error;
pub mod eval;
pub mod features;
pub mod optim;
pub mod records;
pub mod t2u;
pub mod text;
pub mod units;
pub mod vocoder;

pub use error::{Error, Result};
