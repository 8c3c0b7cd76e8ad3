use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::paralinguistic_rate;
use crate::fusion::ModelConfig;

/// Which gradients the norm clip applies to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClipScope {
    /// Recurrent weights only.
    Lstm,
    /// Every trainable parameter.
    Global,
}

impl std::str::FromStr for ClipScope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lstm" => Ok(Self::Lstm),
            "global" => Ok(Self::Global),
            other => Err(Error::Argument(format!("unknown clip scope {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub learning_rate: f64,
    /// Sequences per optimizer step.
    pub batch_size: usize,
    /// Training sequence length in label frames; longer segments are cut
    /// into consecutive chunks.
    pub sequence_length: usize,
    pub label_rate: f64,
    pub epochs: usize,
    pub seed: u64,
    pub grad_clip: f64,
    pub clip_scope: ClipScope,
    pub model: ModelConfig,
    /// Back-propagate into the waveform CNN. Off by default: the CNN then
    /// acts as a fixed random feature extractor and its frames are cached.
    pub train_cnn: bool,
    /// Seed for the CNN weights; falls back to `seed`.
    pub cnn_seed: Option<u64>,
    /// Standardize paralinguistic channels with training-split statistics.
    pub standardize: bool,
    pub data_dir: Option<PathBuf>,
    pub map_path: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            batch_size: 4,
            sequence_length: 100,
            label_rate: 10.0,
            epochs: 20,
            seed: 0,
            grad_clip: 5.0,
            clip_scope: ClipScope::Lstm,
            model: ModelConfig::default(),
            train_cnn: false,
            cnn_seed: None,
            standardize: true,
            data_dir: None,
            map_path: None,
            out_dir: None,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Argument("learning_rate must be a nonnegative number".into()));
        }
        if self.batch_size == 0 || self.sequence_length < 2 {
            return Err(Error::Argument(
                "batch_size must be positive and sequence_length at least 2".into(),
            ));
        }
        if !(self.label_rate > 0.0 && self.label_rate <= paralinguistic_rate()) {
            return Err(Error::Argument(format!(
                "label_rate must lie in (0, {}]",
                paralinguistic_rate()
            )));
        }
        if !(self.grad_clip > 0.0) {
            return Err(Error::Argument("grad_clip must be positive".into()));
        }
        self.model.validate()
    }

    pub fn cnn_seed(&self) -> u64 {
        self.cnn_seed.unwrap_or(self.seed)
    }

    /// Read a JSON file; absent fields keep their defaults.
    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        read_json(path.as_ref())
    }
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Load any config type from JSON, or its defaults when no file is given.
pub fn load_config<T: serde::de::DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        Some(p) => read_json(p),
        None => Ok(T::default()),
    }
}
