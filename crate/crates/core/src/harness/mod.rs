//! Synthetic data, training, evaluation and checkpointing.

pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod dataset;
pub mod eval;
pub mod gradsuite;
pub mod synthetic;
pub mod train;

pub use config::{ClipScope, RunConfig};
pub use corpus::{Corpus, Manifest, Segment, Split, Splits};
pub use dataset::{FeatureBank, FeatureNorm};
pub use eval::{evaluate, score, Score};
pub use synthetic::{generate, SyntheticSpec};
pub use train::{fallback_map, EpochMetrics, Pipeline, TrainState, Trainer};
