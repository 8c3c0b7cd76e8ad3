//! Synthetic corpus with known ground truth.
//!
//! Text embeddings are random unit rows; speech embeddings are the same
//! rows rotated by a hidden orthogonal matrix plus noise, so the map that
//! alignment should recover is known. Arousal modulates the waveform
//! amplitude; valence and liking steer which words are spoken.

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::corpus::{Corpus, Manifest, ManifestSegment, Segment, Splits, MANIFEST_VERSION};
use crate::embeddings::EmbeddingTable;
use crate::error::{Error, Result};
use crate::features::{WaveformSegment, WordEvent, SAMPLE_RATE, SEGMENT_SAMPLES, SEGMENT_SECONDS};
use crate::rng::{Rng, SeedStream};
use crate::tensor::Tensor;

/// Vocabulary bins per affect axis when picking tokens.
const AFFECT_BINS: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub vocab_size: usize,
    pub speech_dim: usize,
    pub text_dim: usize,
    /// Standard deviation of the noise added to rotated speech rows.
    pub noise: f64,
    pub segments: usize,
    /// Upper bound (Hz) on the affect sinusoid frequencies.
    pub max_frequency: f64,
    /// Amplitude-modulated signal over background noise, in dB.
    pub snr_db: f64,
    pub label_rate: f64,
    pub dev_fraction: f64,
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            vocab_size: 1000,
            speech_dim: 50,
            text_dim: 50,
            noise: 0.01,
            segments: 64,
            max_frequency: 0.3,
            snr_db: 20.0,
            label_rate: 10.0,
            dev_fraction: 0.2,
            test_fraction: 0.2,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < AFFECT_BINS * AFFECT_BINS {
            return Err(Error::Argument(format!(
                "vocab_size must be at least {}",
                AFFECT_BINS * AFFECT_BINS
            )));
        }
        if self.speech_dim == 0 || self.segments == 0 {
            return Err(Error::Argument("speech_dim and segments must be positive".into()));
        }
        if self.speech_dim != self.text_dim {
            return Err(Error::Argument(
                "a rotation ground truth needs speech_dim == text_dim".into(),
            ));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Argument("noise must be nonnegative".into()));
        }
        if !(self.max_frequency > 0.0) || !(self.label_rate > 0.0) || !self.snr_db.is_finite() {
            return Err(Error::Argument("max_frequency and label_rate must be positive".into()));
        }
        let (d, t) = (self.dev_fraction, self.test_fraction);
        if !(d >= 0.0 && t >= 0.0 && d + t < 1.0) {
            return Err(Error::Argument(
                "split fractions must be nonnegative and sum below 1".into(),
            ));
        }
        Ok(())
    }
}

/// Sum of three random sinusoids normalized by total amplitude.
#[derive(Debug, Clone)]
struct Trajectory {
    terms: [(f64, f64, f64); 3],
}

impl Trajectory {
    fn new(max_frequency: f64, rng: &mut Rng) -> Self {
        let mut terms = [(0.0, 0.0, 0.0); 3];
        for t in &mut terms {
            *t = (
                rng.random_range(0.3..1.0),
                rng.random_range(0.02..max_frequency.max(0.021)),
                rng.random_range(0.0..std::f64::consts::TAU),
            );
        }
        Self { terms }
    }

    fn at(&self, time: f64) -> f64 {
        let total: f64 = self.terms.iter().map(|t| t.0).sum();
        let v: f64 = self
            .terms
            .iter()
            .map(|&(a, f, p)| a * (std::f64::consts::TAU * f * time + p).sin())
            .sum();
        (v / total).clamp(-1.0, 1.0)
    }
}

fn unit_rows(n: usize, d: usize, rng: &mut Rng) -> Tensor {
    let mut t = Tensor::randn(&[n, d], 1.0, rng);
    for i in 0..n {
        let row = t.row_mut(i);
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        row.iter_mut().for_each(|v| *v /= norm);
    }
    t
}

/// Haar-distributed orthogonal matrix: QR of a Gaussian matrix via
/// modified Gram–Schmidt, with column signs fixed by R's diagonal.
pub fn random_orthogonal(d: usize, rng: &mut Rng) -> Tensor {
    let g = Tensor::randn(&[d, d], 1.0, rng);
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(d);
    for j in 0..d {
        let mut v = g.column(j);
        for _ in 0..2 {
            for c in &cols {
                let dp: f64 = c.iter().zip(&v).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(c).for_each(|(x, y)| *x -= dp * y);
            }
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        cols.push(v.into_iter().map(|x| x / n).collect());
    }
    let mut q = Tensor::zeros(&[d, d]);
    for (j, c) in cols.iter().enumerate() {
        for (i, &x) in c.iter().enumerate() {
            q.set(i, j, x);
        }
    }
    q
}

/// `AFFECT_BINS²` token groups: valence quantile, then liking quantile
/// within it.
fn affect_bins(text: &Tensor, rng: &mut Rng) -> Vec<Vec<Vec<usize>>> {
    let d = text.cols();
    let dirs = unit_rows(2, d, rng);
    let (u_v, u_l) = (dirs.row(0).to_vec(), dirs.row(1).to_vec());
    let score = |i: usize, u: &[f64]| text.row(i).iter().zip(u).map(|(a, b)| a * b).sum::<f64>();
    let mut by_valence: Vec<usize> = (0..text.rows()).collect();
    by_valence.sort_by(|&a, &b| score(a, &u_v).total_cmp(&score(b, &u_v)));
    let n = by_valence.len();
    (0..AFFECT_BINS)
        .map(|b| {
            let mut group = by_valence[b * n / AFFECT_BINS..(b + 1) * n / AFFECT_BINS].to_vec();
            group.sort_by(|&x, &y| score(x, &u_l).total_cmp(&score(y, &u_l)));
            let m = group.len();
            (0..AFFECT_BINS)
                .map(|k| group[k * m / AFFECT_BINS..(k + 1) * m / AFFECT_BINS].to_vec())
                .collect()
        })
        .collect()
}

fn bin_of(value: f64) -> usize {
    (((value + 1.0) / 2.0 * AFFECT_BINS as f64) as usize).min(AFFECT_BINS - 1)
}

/// Round onto the 16-bit grid so the corpus survives a WAV round trip.
fn quantize(x: f64) -> f64 {
    (x * 32768.0).round().clamp(-32768.0, 32767.0) / 32768.0
}

fn synth_segment(
    id: String,
    spec: &SyntheticSpec,
    words: &[String],
    bins: &[Vec<Vec<usize>>],
    seeds: &SeedStream,
) -> Result<Segment> {
    let mut rng = seeds.fork("affect");
    let traj: Vec<Trajectory> = (0..3).map(|_| Trajectory::new(spec.max_frequency, &mut rng)).collect();

    let frames = (SEGMENT_SECONDS * spec.label_rate).round() as usize;
    let mut labels = Tensor::zeros(&[frames, 3]);
    for i in 0..frames {
        let t = i as f64 / spec.label_rate;
        for (d, tr) in traj.iter().enumerate() {
            labels.set(i, d, tr.at(t));
        }
    }

    let mut audio_rng = seeds.fork("audio");
    let sr = f64::from(SAMPLE_RATE);
    let mut samples = Vec::with_capacity(SEGMENT_SAMPLES);
    let mut env_sq = 0.0;
    for n in 0..SEGMENT_SAMPLES {
        let env = 0.05 + 0.35 * (traj[0].at(n as f64 / sr) + 1.0) / 2.0;
        env_sq += env * env;
        samples.push(env * audio_rng.random_range(-1.0..1.0));
    }
    // Uniform carrier has variance 1/3.
    let signal_rms = (env_sq / SEGMENT_SAMPLES as f64 / 3.0).sqrt();
    let noise_std = signal_rms / 10f64.powf(spec.snr_db / 20.0);
    for s in &mut samples {
        let bg: f64 = StandardNormal.sample(&mut audio_rng);
        *s = quantize((*s + noise_std * bg).clamp(-1.0, 1.0));
    }

    let mut word_rng = seeds.fork("words");
    let mut events = Vec::new();
    let mut start = word_rng.random_range(0.0..0.3);
    loop {
        let dur = word_rng.random_range(0.25..0.6);
        if start + dur > SEGMENT_SECONDS {
            break;
        }
        let group = &bins[bin_of(traj[1].at(start))][bin_of(traj[2].at(start))];
        let token = group[word_rng.random_range(0..group.len())];
        events.push(WordEvent {
            token: words[token].clone(),
            start,
            end: start + dur,
        });
        start += dur + word_rng.random_range(0.05..0.3);
    }

    Ok(Segment {
        id,
        waveform: WaveformSegment::new(samples)?,
        words: events,
        labels,
    })
}

/// Zipf-like counts, strictly decreasing with rank.
fn zipf_counts(n: usize) -> Vec<u64> {
    (0..n).map(|r| 1_000_000 / (r as u64 + 1) + (n - r) as u64).collect()
}

/// Reorder rows so counts are descending, ties by token.
fn sorted_table(words: &[String], counts: &[u64], rows: &Tensor) -> Result<EmbeddingTable> {
    let mut order: Vec<usize> = (0..words.len()).collect();
    order.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then_with(|| words[a].cmp(&words[b])));
    let data: Vec<Vec<f64>> = order.iter().map(|&i| rows.row(i).to_vec()).collect();
    EmbeddingTable::new(
        order.iter().map(|&i| words[i].clone()).collect(),
        order.iter().map(|&i| counts[i]).collect(),
        Tensor::from_rows(&data)?,
    )
}

pub fn generate(spec: &SyntheticSpec) -> Result<Corpus> {
    spec.validate()?;
    let seeds = SeedStream::new(spec.seed);
    let (n, d) = (spec.vocab_size, spec.text_dim);
    let width = (n - 1).to_string().len();
    let words: Vec<String> = (0..n).map(|i| format!("w{i:0width$}")).collect();

    let mut emb_rng = seeds.fork("embeddings");
    let text_rows = unit_rows(n, d, &mut emb_rng);
    let rotation = random_orthogonal(d, &mut emb_rng);
    // Row convention: s = Rᵀt + noise, so S = T·R + N and W = R maps back.
    let noise = Tensor::randn(&[n, d], spec.noise, &mut emb_rng);
    let speech_rows = text_rows.matmul(&rotation)?.add(&noise)?;

    let text_counts = zipf_counts(n);
    let speech_counts: Vec<u64> = text_counts
        .iter()
        .map(|&c| ((c as f64) * emb_rng.random_range(0.5..1.5)).round().max(1.0) as u64)
        .collect();
    let text = sorted_table(&words, &text_counts, &text_rows)?;
    let speech = sorted_table(&words, &speech_counts, &speech_rows)?;

    let bins = affect_bins(&text_rows, &mut seeds.fork("bins"));
    let ids: Vec<String> = (0..spec.segments).map(|i| format!("seg{i:03}")).collect();
    let segments = ids
        .iter()
        .enumerate()
        .map(|(i, id)| synth_segment(id.clone(), spec, &words, &bins, &seeds.child("segment", i as u64)))
        .collect::<Result<Vec<_>>>()?;

    let mut shuffled = ids.clone();
    shuffled.shuffle(&mut seeds.fork("splits"));
    let n_test = (spec.segments as f64 * spec.test_fraction).round() as usize;
    let n_dev = (spec.segments as f64 * spec.dev_fraction).round() as usize;
    let sorted = |s: &[String]| {
        let mut v = s.to_vec();
        v.sort();
        v
    };
    let splits = Splits {
        test: sorted(&shuffled[..n_test]),
        dev: sorted(&shuffled[n_test..n_test + n_dev]),
        train: sorted(&shuffled[n_test + n_dev..]),
    };

    let manifest = Manifest {
        version: MANIFEST_VERSION,
        label_rate: spec.label_rate,
        splits,
        segments: ids
            .iter()
            .map(|id| ManifestSegment {
                id: id.clone(),
                audio: format!("audio/{id}.wav"),
            })
            .collect(),
        rotation: Some((0..d).map(|i| rotation.row(i).to_vec()).collect()),
        synthetic: Some(spec.clone()),
    };
    Ok(Corpus {
        manifest,
        speech,
        text,
        segments,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::alignment::{procrustes_refine, svd::orthogonality_defect};
    use crate::embeddings::{gather, Dictionary, Side};

    fn small(seed: u64) -> SyntheticSpec {
        SyntheticSpec {
            vocab_size: 60,
            speech_dim: 8,
            text_dim: 8,
            segments: 3,
            seed,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn noiseless_rotation_recovered_by_procrustes() {
        let spec = SyntheticSpec { noise: 0.0, ..small(1) };
        let c = generate(&spec).unwrap();
        let dict = Dictionary::shared_tokens(&c.speech, &c.text);
        let s = gather(&c.speech, &dict, Side::Speech).unwrap();
        let t = gather(&c.text, &dict, Side::Text).unwrap();
        let w = procrustes_refine(&s, &t).unwrap();
        let r = c.rotation().unwrap();
        assert!(orthogonality_defect(&r) < 1e-12);
        assert!(w.matrix().sub(&r).unwrap().frobenius_norm() < 1e-6);
    }

    #[test]
    fn labels_bounded_and_words_valid() {
        let c = generate(&small(2)).unwrap();
        for s in &c.segments {
            assert_eq!(s.labels.shape(), &[100, 3]);
            assert!(s.labels.data().iter().all(|v| (-1.0..=1.0).contains(v)));
            crate::features::validate_events(&s.words, SEGMENT_SECONDS).unwrap();
            assert!(!s.words.is_empty());
            assert!(s.waveform.samples().iter().all(|v| v.abs() <= 1.0));
        }
    }

    #[test]
    fn splits_partition_segments() {
        let spec = SyntheticSpec {
            segments: 10,
            ..small(3)
        };
        let c = generate(&spec).unwrap();
        let sp = &c.manifest.splits;
        assert_eq!((sp.train.len(), sp.dev.len(), sp.test.len()), (6, 2, 2));
        let mut all: Vec<&String> = sp.train.iter().chain(&sp.dev).chain(&sp.test).collect();
        all.sort();
        all.dedup();
        assert_eq!(all.len(), 10);
    }

    #[test]
    fn amplitude_follows_arousal() {
        let c = generate(&small(4)).unwrap();
        let s = &c.segments[0];
        // Per label frame RMS of the waveform versus arousal.
        let hop = SEGMENT_SAMPLES / 100;
        let rms: Vec<f64> = (0..100)
            .map(|i| {
                let w = &s.waveform.samples()[i * hop..(i + 1) * hop];
                (w.iter().map(|v| v * v).sum::<f64>() / hop as f64).sqrt()
            })
            .collect();
        let arousal = s.labels.column(0);
        let corr = crate::fusion::ccc(&rms, &arousal).unwrap();
        let pearson = {
            let n = rms.len() as f64;
            let (mx, my) = (rms.iter().sum::<f64>() / n, arousal.iter().sum::<f64>() / n);
            let cov: f64 = rms.iter().zip(&arousal).map(|(a, b)| (a - mx) * (b - my)).sum();
            let vx: f64 = rms.iter().map(|a| (a - mx) * (a - mx)).sum();
            let vy: f64 = arousal.iter().map(|b| (b - my) * (b - my)).sum();
            cov / (vx * vy).sqrt()
        };
        assert!(pearson > 0.9, "pearson {pearson} (ccc {corr})");
    }

    #[test]
    fn same_seed_same_corpus() {
        assert_eq!(generate(&small(5)).unwrap(), generate(&small(5)).unwrap());
        assert_ne!(generate(&small(5)).unwrap().text, generate(&small(6)).unwrap().text);
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(generate(&SyntheticSpec {
            text_dim: 7,
            ..small(1)
        })
        .is_err());
        assert!(generate(&SyntheticSpec {
            noise: -1.0,
            ..small(1)
        })
        .is_err());
    }
}
