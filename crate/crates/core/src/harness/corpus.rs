//! On-disk dataset layout.
//!
//! ```text
//! manifest.json           splits, segment list, optional ground-truth map
//! speech.vec, speech.freq speech-side embeddings and token counts
//! text.vec, text.freq     text-side embeddings and token counts
//! words.csv               segment_id,token,start,end
//! labels.csv              segment_id,frame_index,arousal,valence,liking
//! audio/<segment>.wav     16-bit mono, 22050 Hz, at most 10 s
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::synthetic::SyntheticSpec;
use crate::embeddings::{load_table, EmbeddingTable};
use crate::error::{Error, Result};
use crate::features::{
    load_waveform, read_word_events, validate_events, write_wav, write_word_events, WaveformSegment, WordEvent,
    SAMPLE_RATE, SEGMENT_SAMPLES, SEGMENT_SECONDS,
};
use crate::tensor::Tensor;

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Self::Train),
            "dev" => Ok(Self::Dev),
            "test" => Ok(Self::Test),
            other => Err(Error::Argument(format!("unknown split {other:?}"))),
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Train => "train",
            Self::Dev => "dev",
            Self::Test => "test",
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<String>,
    pub dev: Vec<String>,
    pub test: Vec<String>,
}

impl Splits {
    pub fn ids(&self, split: Split) -> &[String] {
        match split {
            Split::Train => &self.train,
            Split::Dev => &self.dev,
            Split::Test => &self.test,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestSegment {
    pub id: String,
    /// Relative to the dataset directory.
    pub audio: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub label_rate: f64,
    pub splits: Splits,
    pub segments: Vec<ManifestSegment>,
    /// Ground-truth speech→text map (rows of `W`), when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rotation: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticSpec>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub id: String,
    pub waveform: WaveformSegment,
    pub words: Vec<WordEvent>,
    /// `T × 3` gold (arousal, valence, liking) at the label rate.
    pub labels: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub manifest: Manifest,
    pub speech: EmbeddingTable,
    pub text: EmbeddingTable,
    pub segments: Vec<Segment>,
}

#[derive(Debug, Serialize, Deserialize)]
struct LabelRecord {
    segment_id: String,
    frame_index: usize,
    arousal: f64,
    valence: f64,
    liking: f64,
}

impl Corpus {
    pub fn segment(&self, id: &str) -> Option<&Segment> {
        self.segments.iter().find(|s| s.id == id)
    }

    pub fn split(&self, split: Split) -> Result<Vec<&Segment>> {
        self.manifest
            .splits
            .ids(split)
            .iter()
            .map(|id| {
                self.segment(id)
                    .ok_or_else(|| Error::Data(format!("{split} split names unknown segment {id:?}")))
            })
            .collect()
    }

    pub fn rotation(&self) -> Option<Tensor> {
        self.manifest
            .rotation
            .as_ref()
            .and_then(|rows| Tensor::from_rows(rows).ok())
    }

    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        let audio_dir = dir.join("audio");
        std::fs::create_dir_all(&audio_dir).map_err(|e| Error::io(&audio_dir, e))?;

        let manifest_path = dir.join("manifest.json");
        let json = serde_json::to_string_pretty(&self.manifest)?;
        std::fs::write(&manifest_path, json + "\n").map_err(|e| Error::io(&manifest_path, e))?;

        self.speech.save_word2vec_text(dir.join("speech.vec"))?;
        self.speech.save_frequencies(dir.join("speech.freq"))?;
        self.text.save_word2vec_text(dir.join("text.vec"))?;
        self.text.save_frequencies(dir.join("text.freq"))?;

        let words: BTreeMap<String, Vec<WordEvent>> =
            self.segments.iter().map(|s| (s.id.clone(), s.words.clone())).collect();
        write_word_events(dir.join("words.csv"), &words)?;

        let labels_path = dir.join("labels.csv");
        let mut writer = csv::Writer::from_path(&labels_path)?;
        for s in &self.segments {
            for i in 0..s.labels.rows() {
                let r = s.labels.row(i);
                writer.serialize(LabelRecord {
                    segment_id: s.id.clone(),
                    frame_index: i,
                    arousal: r[0],
                    valence: r[1],
                    liking: r[2],
                })?;
            }
        }
        writer.flush().map_err(|e| Error::io(&labels_path, e))?;

        for (entry, s) in self.manifest.segments.iter().zip(&self.segments) {
            let samples = &s.waveform.samples()[..s.waveform.valid_len()];
            write_wav(dir.join(&entry.audio), samples, SAMPLE_RATE)?;
        }
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest_path = dir.join("manifest.json");
        let text = std::fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        if manifest.version != MANIFEST_VERSION {
            return Err(Error::Data(format!(
                "manifest version {} (expected {MANIFEST_VERSION})",
                manifest.version
            )));
        }

        let sidecar = |name: &str| {
            let p = dir.join(name);
            p.exists().then_some(p)
        };
        let speech = load_table(&dir.join("speech.vec"), sidecar("speech.freq").as_deref())?;
        let text = load_table(&dir.join("text.vec"), sidecar("text.freq").as_deref())?;

        let mut words = read_word_events(dir.join("words.csv"))?;
        let labels = read_labels(&dir.join("labels.csv"))?;

        let mut segments = Vec::with_capacity(manifest.segments.len());
        for entry in &manifest.segments {
            let samples = load_waveform(dir.join(&entry.audio))?;
            if samples.len() > SEGMENT_SAMPLES {
                return Err(Error::Data(format!(
                    "segment {} has {} samples; at most {SEGMENT_SAMPLES} allowed",
                    entry.id,
                    samples.len()
                )));
            }
            let valid = samples.len();
            let mut padded = samples;
            padded.resize(SEGMENT_SAMPLES, 0.0);
            let waveform = WaveformSegment::padded(padded, valid)?;
            let events = words.remove(&entry.id).unwrap_or_default();
            validate_events(&events, SEGMENT_SECONDS).map_err(|e| Error::Data(format!("segment {}: {e}", entry.id)))?;
            let labels = labels
                .get(&entry.id)
                .cloned()
                .ok_or_else(|| Error::Data(format!("no labels for segment {}", entry.id)))?;
            segments.push(Segment {
                id: entry.id.clone(),
                waveform,
                words: events,
                labels,
            });
        }
        let corpus = Self {
            manifest,
            speech,
            text,
            segments,
        };
        for split in [Split::Train, Split::Dev, Split::Test] {
            corpus.split(split)?;
        }
        Ok(corpus)
    }
}

fn read_labels(path: &Path) -> Result<BTreeMap<String, Tensor>> {
    let mut reader = csv::Reader::from_path(path)?;
    let mut rows: BTreeMap<String, Vec<Vec<f64>>> = BTreeMap::new();
    for (i, record) in reader.deserialize::<LabelRecord>().enumerate() {
        let line = i + 2;
        let r = record.map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line,
            message: e.to_string(),
        })?;
        let values = vec![r.arousal, r.valence, r.liking];
        if values.iter().any(|v| !(-1.0..=1.0).contains(v)) {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line,
                message: "labels must lie in [-1, 1]".into(),
            });
        }
        let seq = rows.entry(r.segment_id).or_default();
        if r.frame_index != seq.len() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line,
                message: format!("expected frame index {}, found {}", seq.len(), r.frame_index),
            });
        }
        seq.push(values);
    }
    rows.into_iter()
        .map(|(id, r)| Ok((id, Tensor::from_rows(&r)?)))
        .collect()
}
