//! Keyword spotting with a filterbank front-end learned jointly with a
//! residual CNN acoustic model.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`] and [`graph`]: dense tensors and reverse-mode differentiation,
//!   checked against finite differences by [`gradcheck`].
//! * [`dsp`]: power spectrograms, Mel filterbanks and log compression.
//! * [`frontend`]: the trainable filterbank layer and batch normalization.
//! * [`model`]: the dilated residual CNN, decisions and multiplication counts.
//! * [`data`]: WAV ingestion, SNR mixing, manifests and a synthetic corpus.
//! * [`train`]: cross-entropy, Adam and early-stopped training runs.
//! * [`eval`]: accuracy tables, Welch t-tests, energy ratios and spectra.

pub mod atomic;
pub mod checkpoint;
pub mod data;
pub mod dsp;
pub mod error;
pub mod eval;
pub mod frontend;
pub mod gradcheck;
pub mod graph;
pub mod model;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Graph, NodeId};
pub use tensor::Tensor;

/// Sampling rate of every clip handled by the pipeline.
pub const SAMPLE_RATE: u32 = 16_000;
/// Samples per clip after normalization (one second).
pub const CLIP_LEN: usize = 16_000;
/// Number of keyword classes plus the filler class.
pub const NUM_CLASSES: usize = 11;
