//! Cross-modal continuous emotion regression from speech.
//!
//! The pipeline aligns a speech-embedding space to a text-embedding space
//! (adversarial phase plus orthogonal Procrustes refinement), extracts
//! paralinguistic frames with a raw-waveform CNN and semantic frames from
//! mapped word embeddings, fuses the two with a disentangled attention
//! block, and regresses arousal, valence and liking with an LSTM trained
//! on the concordance correlation loss.

pub mod alignment;
pub mod embeddings;
pub mod error;
pub mod features;
pub mod fusion;
pub mod harness;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
