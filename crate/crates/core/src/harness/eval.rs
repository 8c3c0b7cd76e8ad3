use serde::{Deserialize, Serialize};

use super::corpus::{Corpus, Split};
use super::dataset::FeatureBank;
use super::train::Pipeline;
use crate::error::{Error, Result};
use crate::fusion::{ccc_per_dimension, AFFECT_DIMS};
use crate::tensor::Tensor;

/// Per-dimension concordance over a set of frames. A dimension whose
/// concordance is undefined scores 0 and is listed in `degenerate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Score {
    pub arousal: f64,
    pub valence: f64,
    pub liking: f64,
    pub mean: f64,
    pub frames: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub degenerate: Vec<String>,
}

impl Score {
    pub fn dims(&self) -> [f64; 3] {
        [self.arousal, self.valence, self.liking]
    }
}

pub fn score(pred: &Tensor, gold: &Tensor) -> Result<Score> {
    let mut values = [0.0; 3];
    let mut degenerate = Vec::new();
    for (d, r) in ccc_per_dimension(pred, gold).into_iter().enumerate() {
        match r {
            Ok(v) => values[d] = v,
            Err(Error::Degenerate(m)) => {
                log::warn!("{m}; reporting 0");
                degenerate.push(AFFECT_DIMS[d].to_string());
            }
            Err(e) => return Err(e),
        }
    }
    Ok(Score {
        arousal: values[0],
        valence: values[1],
        liking: values[2],
        mean: values.iter().sum::<f64>() / 3.0,
        frames: pred.rows(),
        degenerate,
    })
}

/// Evaluation-mode predictions over the valid frames of every segment in
/// `ids`, scored against gold as one concatenated series.
pub fn score_segments(pipeline: &Pipeline, corpus: &Corpus, bank: &FeatureBank, ids: &[String]) -> Result<Score> {
    let mut preds = Vec::with_capacity(ids.len());
    let mut golds = Vec::with_capacity(ids.len());
    for id in ids {
        let feats = bank.get(id)?;
        if feats.valid == 0 {
            continue;
        }
        let segment = corpus
            .segment(id)
            .ok_or_else(|| Error::Data(format!("unknown segment {id:?}")))?;
        preds.push(pipeline.predict_segment(segment, feats)?);
        golds.push(feats.labels.slice_rows(0, feats.valid)?);
    }
    if preds.is_empty() {
        return Err(Error::Data("no valid frames to score".into()));
    }
    let pred = Tensor::vstack(&preds.iter().collect::<Vec<_>>())?;
    let gold = Tensor::vstack(&golds.iter().collect::<Vec<_>>())?;
    score(&pred, &gold)
}

/// Score a checkpointed pipeline on one split of a corpus.
pub fn evaluate(pipeline: &Pipeline, corpus: &Corpus, split: Split) -> Result<Score> {
    let ids = corpus.manifest.splits.ids(split).to_vec();
    if ids.is_empty() {
        return Err(Error::io(
            format!("manifest.json#{split}"),
            std::io::Error::new(std::io::ErrorKind::NotFound, format!("split {split} has no segments")),
        ));
    }
    corpus.split(split)?;
    let bank = pipeline.feature_bank(corpus, &ids)?;
    score_segments(pipeline, corpus, &bank, &ids)
}
