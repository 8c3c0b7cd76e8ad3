//! Label-rate model inputs per segment, cached so the frozen CNN runs once.

use std::collections::BTreeMap;

use super::corpus::{Corpus, Segment};
use crate::alignment::LinearMap;
use crate::error::{Error, Result};
use crate::features::{
    bin_edges, extract_paralinguistic, extract_semantic, frame_times, paralinguistic_rate, resample_to_label_rate,
    target_len, ParalinguisticCnn, CNN_DOWNSAMPLE, PARALINGUISTIC_DIM, SEGMENT_SAMPLES,
};
use crate::rng::SeedStream;
use crate::tensor::{Tensor, Var};

/// Inputs and gold for one segment at the label rate. Rows past `valid`
/// are padding.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentFeatures {
    pub semantic: Tensor,
    /// Unstandardized; absent when the CNN is trained and frames must be
    /// recomputed from the waveform.
    pub paralinguistic: Option<Tensor>,
    pub labels: Tensor,
    pub valid: usize,
}

/// The CNN every run with this seed starts from.
pub fn initial_cnn(cnn_seed: u64) -> ParalinguisticCnn {
    ParalinguisticCnn::new(&mut SeedStream::new(cnn_seed).fork("cnn"))
}

/// Paralinguistic frames of one segment at `label_rate`, plus the number
/// of leading valid frames.
pub fn paralinguistic_frames(segment: &Segment, cnn: &ParalinguisticCnn, label_rate: f64) -> Result<(Tensor, usize)> {
    let seq = resample_to_label_rate(&extract_paralinguistic(&segment.waveform, cnn)?, label_rate)?;
    let valid = seq.mask().iter().take_while(|&&m| m).count();
    Ok((seq.into_frames(), valid))
}

/// Features for one segment. Semantic frames sit at `i / label_rate`.
pub fn segment_features(
    corpus: &Corpus,
    segment: &Segment,
    map: &LinearMap,
    cnn: Option<&ParalinguisticCnn>,
    label_rate: f64,
) -> Result<SegmentFeatures> {
    let source = SEGMENT_SAMPLES / CNN_DOWNSAMPLE;
    let frames = target_len(source, paralinguistic_rate(), label_rate);
    let edges = bin_edges(source, frames);
    let audio_valid = (0..frames)
        .take_while(|&i| edges[i] * CNN_DOWNSAMPLE < segment.waveform.valid_len())
        .count();
    let paralinguistic = match cnn {
        Some(cnn) => Some(paralinguistic_frames(segment, cnn, label_rate)?.0),
        None => None,
    };
    let semantic = extract_semantic(
        &segment.words,
        &corpus.speech,
        map,
        &frame_times(frames, label_rate),
        label_rate,
    )?
    .into_frames();
    let gold = &segment.labels;
    if gold.cols() != 3 {
        return Err(Error::shape("segment labels", gold.shape(), &[gold.rows(), 3]));
    }
    let valid = audio_valid.min(gold.rows());
    let mut labels = Tensor::zeros(&[frames, 3]);
    for i in 0..valid {
        labels.row_mut(i).copy_from_slice(gold.row(i));
    }
    Ok(SegmentFeatures {
        semantic,
        paralinguistic,
        labels,
        valid,
    })
}

/// Per-segment features keyed by segment id, built for one map and CNN.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBank {
    pub label_rate: f64,
    pub cnn_seed: u64,
    pub map: LinearMap,
    pub has_paralinguistic: bool,
    features: BTreeMap<String, SegmentFeatures>,
}

impl FeatureBank {
    /// With `with_paralinguistic`, frames come from the initial CNN for
    /// `cnn_seed`; otherwise only semantic frames and labels are stored.
    pub fn build(
        corpus: &Corpus,
        ids: &[String],
        map: &LinearMap,
        cnn_seed: u64,
        with_paralinguistic: bool,
        label_rate: f64,
    ) -> Result<Self> {
        let cnn = with_paralinguistic.then(|| initial_cnn(cnn_seed));
        let mut features = BTreeMap::new();
        for id in ids {
            if features.contains_key(id) {
                continue;
            }
            let segment = corpus
                .segment(id)
                .ok_or_else(|| Error::Data(format!("unknown segment {id:?}")))?;
            log::debug!("extracting features for {id}");
            features.insert(
                id.clone(),
                segment_features(corpus, segment, map, cnn.as_ref(), label_rate)?,
            );
        }
        Ok(Self {
            label_rate,
            cnn_seed,
            map: map.clone(),
            has_paralinguistic: with_paralinguistic,
            features,
        })
    }

    pub fn get(&self, id: &str) -> Result<&SegmentFeatures> {
        self.features
            .get(id)
            .ok_or_else(|| Error::Data(format!("no cached features for segment {id:?}")))
    }

    pub fn contains(&self, id: &str) -> bool {
        self.features.contains_key(id)
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }
}

/// Channel standardization `(x − mean) · scale`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureNorm {
    pub mean: Tensor,
    pub scale: Tensor,
}

/// Channels with a smaller standard deviation are centred but not scaled.
const MIN_STD: f64 = 1e-8;

impl FeatureNorm {
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: Tensor::zeros(&[dim]),
            scale: Tensor::full(&[dim], 1.0),
        }
    }

    /// Statistics over the valid rows of every given frame matrix.
    pub fn fit<'a>(parts: impl IntoIterator<Item = (&'a Tensor, usize)>) -> Result<Self> {
        let mut sum: Vec<f64> = Vec::new();
        let mut sq: Vec<f64> = Vec::new();
        let mut n = 0usize;
        for (frames, valid) in parts {
            if sum.is_empty() {
                sum = vec![0.0; frames.cols()];
                sq = vec![0.0; frames.cols()];
            }
            if frames.cols() != sum.len() {
                return Err(Error::shape("FeatureNorm::fit", frames.shape(), &[valid, sum.len()]));
            }
            for i in 0..valid.min(frames.rows()) {
                for (k, &v) in frames.row(i).iter().enumerate() {
                    sum[k] += v;
                    sq[k] += v * v;
                }
            }
            n += valid.min(frames.rows());
        }
        if n == 0 {
            return Err(Error::Data("no valid frames to standardize".into()));
        }
        let nf = n as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / nf).collect();
        let scale = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| {
                let std = (q / nf - m * m).max(0.0).sqrt();
                if std < MIN_STD {
                    1.0
                } else {
                    1.0 / std
                }
            })
            .collect();
        Ok(Self {
            mean: Tensor::vector(mean),
            scale: Tensor::vector(scale),
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.numel()
    }

    pub fn apply(&self, frames: &Tensor) -> Result<Tensor> {
        if frames.rank() != 2 || frames.cols() != self.dim() {
            return Err(Error::shape(
                "FeatureNorm::apply",
                frames.shape(),
                &[frames.rows(), self.dim()],
            ));
        }
        let mut out = frames.clone();
        let (m, s) = (self.mean.data(), self.scale.data());
        for i in 0..out.rows() {
            for (k, v) in out.row_mut(i).iter_mut().enumerate() {
                *v = (*v - m[k]) * s[k];
            }
        }
        Ok(out)
    }

    pub fn apply_var<'t>(&self, frames: Var<'t>) -> Result<Var<'t>> {
        let tape = frames.tape();
        frames
            .sub(tape.constant(self.mean.clone()))?
            .mul(tape.constant(self.scale.clone()))
    }
}

impl Default for FeatureNorm {
    fn default() -> Self {
        Self::identity(PARALINGUISTIC_DIM)
    }
}

/// A contiguous run of valid frames from one segment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Chunk {
    pub id: String,
    pub start: usize,
    pub len: usize,
}

/// Cut each segment's valid prefix into pieces of at most `length` frames.
/// Pieces shorter than two frames carry no concordance signal and are
/// dropped.
pub fn chunk_segments(bank: &FeatureBank, ids: &[String], length: usize) -> Result<Vec<Chunk>> {
    let mut chunks = Vec::new();
    for id in ids {
        let valid = bank.get(id)?.valid;
        let mut start = 0;
        while start < valid {
            let len = length.min(valid - start);
            if len >= 2 {
                chunks.push(Chunk {
                    id: id.clone(),
                    start,
                    len,
                });
            }
            start += length;
        }
    }
    Ok(chunks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::synthetic::{generate, SyntheticSpec};
    use proptest::prelude::{prop_assert, proptest};

    fn small_corpus() -> Corpus {
        generate(&SyntheticSpec {
            vocab_size: 40,
            speech_dim: 4,
            text_dim: 4,
            segments: 3,
            seed: 2,
            ..SyntheticSpec::default()
        })
        .unwrap()
    }

    #[test]
    fn features_have_label_rate_shapes() {
        let corpus = small_corpus();
        let ids: Vec<String> = corpus.segments.iter().map(|s| s.id.clone()).collect();
        let map = LinearMap::identity(4, 4);
        let bank = FeatureBank::build(&corpus, &ids[..1], &map, 0, true, 10.0).unwrap();
        let f = bank.get(&ids[0]).unwrap();
        assert_eq!(f.semantic.shape(), &[100, 4]);
        assert_eq!(f.paralinguistic.as_ref().unwrap().shape(), &[100, PARALINGUISTIC_DIM]);
        assert_eq!(f.labels.shape(), &[100, 3]);
        assert_eq!(f.valid, 100);
        assert!(bank.get(&ids[1]).is_err());
    }

    #[test]
    fn semantic_only_bank_matches_full_bank() {
        let corpus = small_corpus();
        let ids: Vec<String> = vec![corpus.segments[0].id.clone()];
        let map = LinearMap::identity(4, 4);
        let with = FeatureBank::build(&corpus, &ids, &map, 0, true, 10.0).unwrap();
        let without = FeatureBank::build(&corpus, &ids, &map, 0, false, 10.0).unwrap();
        let (a, b) = (with.get(&ids[0]).unwrap(), without.get(&ids[0]).unwrap());
        assert_eq!(a.semantic, b.semantic);
        assert_eq!(a.labels, b.labels);
        assert_eq!(a.valid, b.valid);
        assert!(b.paralinguistic.is_none());
    }

    #[test]
    fn padded_segment_has_short_valid_prefix() {
        let mut corpus = small_corpus();
        let seg = &mut corpus.segments[0];
        let mut samples = seg.waveform.samples().to_vec();
        samples[110_250..].fill(0.0);
        seg.waveform = crate::features::WaveformSegment::padded(samples, 110_250).unwrap();
        let id = seg.id.clone();
        let bank = FeatureBank::build(
            &corpus,
            std::slice::from_ref(&id),
            &LinearMap::identity(4, 4),
            0,
            true,
            10.0,
        )
        .unwrap();
        let f = bank.get(&id).unwrap();
        assert_eq!(f.valid, 50);
        assert!(f.labels.row(60).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn norm_standardizes_valid_rows() {
        let a = Tensor::matrix(3, 2, vec![1.0, 5.0, 3.0, 5.0, 100.0, 100.0]).unwrap();
        let norm = FeatureNorm::fit([(&a, 2)]).unwrap();
        assert_eq!(norm.mean.data(), &[2.0, 5.0]);
        assert_eq!(norm.scale.data(), &[1.0, 1.0]);
        let out = norm.apply(&a).unwrap();
        assert_eq!(out.row(0), &[-1.0, 0.0]);
        assert_eq!(out.row(1), &[1.0, 0.0]);
        let tape = crate::tensor::Tape::new();
        let v = norm.apply_var(tape.constant(a.clone())).unwrap();
        assert_eq!(*v.value(), out);
        assert!(FeatureNorm::fit([(&a, 0)]).is_err());
    }

    proptest! {
        #[test]
        fn chunks_tile_the_valid_prefix(valid in 0usize..120, length in 2usize..40) {
            let corpus = small_corpus();
            let id = corpus.segments[0].id.clone();
            let mut bank = FeatureBank::build(&corpus, std::slice::from_ref(&id), &LinearMap::identity(4, 4), 0, false, 10.0).unwrap();
            bank.features.get_mut(&id).unwrap().valid = valid;
            let chunks = chunk_segments(&bank, &[id], length).unwrap();
            let covered: usize = chunks.iter().map(|c| c.len).sum();
            prop_assert!(covered <= valid && valid - covered <= 1);
            for c in &chunks {
                prop_assert!(c.len >= 2 && c.len <= length && c.start + c.len <= valid);
            }
        }
    }
}
