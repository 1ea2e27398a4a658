#![allow(clippy::needless_range_loop)]

//! Multi-modal (speech + text) dysarthria detection and severity assessment.
//!
//! The crate is organized around the stages of the pipeline:
//!
//! * [`tensor`] — dense-tensor engine with reverse-mode automatic
//!   differentiation; every learnable computation is built from it.
//! * [`audio`] — WAV ingestion, silence trimming, and 80-band log-mel
//!   feature extraction.
//! * [`text`] — character-level tokenization of isolated keywords.
//! * [`model`] — speech encoder, text encoder, cross-attention fusion and
//!   classification heads, plus the speech-only baseline.
//! * [`training`] — losses, Adam, plateau scheduling, early stopping, and
//!   the epoch loop.
//! * [`harness`] — dataset manifests, the SD/SID-1/SID-2/severity split
//!   protocols, the Bayes decision-rule oracle, the synthetic verification
//!   corpus, and report aggregation.

pub mod audio;
pub mod error;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod text;
pub mod training;

pub use error::CoreError;

/// Convenience result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, CoreError>;
