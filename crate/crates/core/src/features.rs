//! Per-frame paralinguistic and semantic features.
//!
//! Paralinguistic frames come from a raw-waveform CNN whose convolutions are
//! same-padded, so only the three pooling layers shrink the time axis (by
//! 10·5·5 = 250). Semantic frames hold the mapped embedding of the most
//! recently started word.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::alignment::LinearMap;
use crate::embeddings::EmbeddingTable;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::kernels::{self, Conv1dGeometry};
use crate::tensor::{BoundParams, Padding, ParamSet, Tensor, Var};

pub const SAMPLE_RATE: u32 = 22_050;
pub const SEGMENT_SECONDS: f64 = 10.0;
pub const SEGMENT_SAMPLES: usize = 220_500;
/// Product of the pooling strides.
pub const CNN_DOWNSAMPLE: usize = 250;
pub const PARALINGUISTIC_DIM: usize = 125;

/// One fixed-length stretch of mono audio.
#[derive(Debug, Clone, PartialEq)]
pub struct WaveformSegment {
    samples: Vec<f64>,
    valid_len: usize,
}

impl WaveformSegment {
    /// A full segment; every sample counts as valid.
    pub fn new(samples: Vec<f64>) -> Result<Self> {
        let n = samples.len();
        Self::padded(samples, n)
    }

    /// `samples` must already be `SEGMENT_SAMPLES` long; only the first
    /// `valid_len` are real audio.
    pub fn padded(samples: Vec<f64>, valid_len: usize) -> Result<Self> {
        if samples.len() != SEGMENT_SAMPLES {
            return Err(Error::Argument(format!(
                "segment needs {SEGMENT_SAMPLES} samples, got {}",
                samples.len()
            )));
        }
        if valid_len == 0 || valid_len > SEGMENT_SAMPLES {
            return Err(Error::Argument(format!("valid length {valid_len} out of range")));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite() || s.abs() > 1.0) {
            return Err(Error::Argument(format!("sample {i} = {} outside [-1, 1]", samples[i])));
        }
        Ok(Self { samples, valid_len })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn valid_len(&self) -> usize {
        self.valid_len
    }

    pub fn valid_duration(&self) -> f64 {
        self.valid_len as f64 / f64::from(SAMPLE_RATE)
    }
}

/// Cut a recording into 10 s segments, zero-padding the last one.
pub fn segment_waveform(samples: &[f64]) -> Result<Vec<WaveformSegment>> {
    if samples.is_empty() {
        return Err(Error::Argument("empty waveform".into()));
    }
    samples
        .chunks(SEGMENT_SAMPLES)
        .map(|chunk| {
            let mut buf = chunk.to_vec();
            buf.resize(SEGMENT_SAMPLES, 0.0);
            WaveformSegment::padded(buf, chunk.len())
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WordEvent {
    pub token: String,
    pub start: f64,
    pub end: f64,
}

/// Events must lie in `[0, duration]`, be sorted, and not overlap.
pub fn validate_events(events: &[WordEvent], duration: f64) -> Result<()> {
    let mut prev_end = 0.0;
    for (i, e) in events.iter().enumerate() {
        if !(e.start >= 0.0 && e.start < e.end && e.end <= duration) {
            return Err(Error::Data(format!(
                "word {i} ({:?}) has bad span [{}, {}]",
                e.token, e.start, e.end
            )));
        }
        if e.start < prev_end {
            return Err(Error::Data(format!(
                "word {i} ({:?}) overlaps its predecessor",
                e.token
            )));
        }
        prev_end = e.end;
    }
    Ok(())
}

/// A `T × d` frame matrix with a per-frame validity mask. Masked frames
/// are held at zero.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSequence {
    frames: Tensor,
    frame_rate: f64,
    mask: Vec<bool>,
}

impl FrameSequence {
    pub fn new(mut frames: Tensor, frame_rate: f64, mask: Vec<bool>) -> Result<Self> {
        if frames.rank() != 2 {
            return Err(Error::Argument(format!(
                "frames must be T × d, got {:?}",
                frames.shape()
            )));
        }
        if mask.len() != frames.rows() {
            return Err(Error::Argument(format!(
                "mask has {} entries for {} frames",
                mask.len(),
                frames.rows()
            )));
        }
        if !(frame_rate > 0.0 && frame_rate.is_finite()) {
            return Err(Error::Argument(format!("bad frame rate {frame_rate}")));
        }
        for (i, &valid) in mask.iter().enumerate() {
            if !valid {
                frames.row_mut(i).fill(0.0);
            }
        }
        Ok(Self {
            frames,
            frame_rate,
            mask,
        })
    }

    /// Every frame valid.
    pub fn dense(frames: Tensor, frame_rate: f64) -> Result<Self> {
        let n = frames.rows();
        Self::new(frames, frame_rate, vec![true; n])
    }

    pub fn frames(&self) -> &Tensor {
        &self.frames
    }

    pub fn into_frames(self) -> Tensor {
        self.frames
    }

    pub fn frame_rate(&self) -> f64 {
        self.frame_rate
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn len(&self) -> usize {
        self.frames.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.frames.cols()
    }

    pub fn duration(&self) -> f64 {
        self.len() as f64 / self.frame_rate
    }

    pub fn with_mask(self, mask: Vec<bool>) -> Result<Self> {
        Self::new(self.frames, self.frame_rate, mask)
    }
}

/// (input channels, output channels, kernel, pool size) per block.
const BLOCKS: [(usize, usize, usize, usize); 3] = [(1, 50, 8, 10), (50, 125, 6, 5), (125, 125, 6, 5)];

/// Three conv → ReLU → max-pool blocks over the raw waveform.
#[derive(Debug, Clone, PartialEq)]
pub struct ParalinguisticCnn {
    params: ParamSet,
}

impl ParalinguisticCnn {
    /// He-normal kernels, zero biases.
    pub fn new(rng: &mut Rng) -> Self {
        let mut params = ParamSet::new();
        for (b, &(c_in, c_out, k, _)) in BLOCKS.iter().enumerate() {
            let std = (2.0 / (c_in * k) as f64).sqrt();
            params
                .insert(
                    format!("cnn.conv{}.w", b + 1),
                    Tensor::randn(&[c_out, c_in, k], std, rng),
                )
                .unwrap();
            params
                .insert(format!("cnn.conv{}.b", b + 1), Tensor::zeros(&[c_out, 1]))
                .unwrap();
        }
        Self { params }
    }

    pub fn from_params(params: ParamSet) -> Result<Self> {
        for (b, &(c_in, c_out, k, _)) in BLOCKS.iter().enumerate() {
            for (name, shape) in [
                (format!("cnn.conv{}.w", b + 1), vec![c_out, c_in, k]),
                (format!("cnn.conv{}.b", b + 1), vec![c_out, 1]),
            ] {
                match params.get(&name) {
                    Some(t) if t.shape() == shape.as_slice() => {}
                    Some(t) => return Err(Error::shape("ParalinguisticCnn", t.shape(), &shape)),
                    None => return Err(Error::Argument(format!("missing CNN parameter {name}"))),
                }
            }
        }
        Ok(Self { params })
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn into_params(self) -> ParamSet {
        self.params
    }

    /// Forward pass without a tape. Returns time-major `⌊L/250⌋ × 125`
    /// frames for an input of `L` samples.
    pub fn forward_frozen(&self, samples: &[f64]) -> Result<Tensor> {
        let mut x = samples.to_vec();
        let mut len = samples.len();
        for (b, &(c_in, c_out, kernel, pool)) in BLOCKS.iter().enumerate() {
            if len < kernel || len < pool {
                return Err(Error::Argument(format!(
                    "input of {} samples too short for block {}",
                    samples.len(),
                    b + 1
                )));
            }
            let w = self.params.get(&format!("cnn.conv{}.w", b + 1)).unwrap();
            let bias = self.params.get(&format!("cnn.conv{}.b", b + 1)).unwrap();
            let pad_left = (kernel - 1) / 2;
            let geom = Conv1dGeometry {
                c_in,
                c_out,
                len,
                kernel,
                stride: 1,
                pad_left,
                pad_right: kernel - 1 - pad_left,
            };
            let mut y = kernels::conv1d_forward(&x, w.data(), &geom);
            for (row, &bv) in y.chunks_mut(len).zip(bias.data()) {
                row.iter_mut().for_each(|v| *v = (*v + bv).max(0.0));
            }
            let (pooled, _) = kernels::maxpool1d_forward(&y, c_out, len, pool, pool);
            len = pooled.len() / c_out;
            x = pooled;
        }
        let frames = Tensor::from_parts(vec![PARALINGUISTIC_DIM, len], x).transpose()?;
        frames.require_finite("ParalinguisticCnn")?;
        Ok(frames)
    }

    /// Differentiable forward: `[1 × L]` waveform to `[⌊L/250⌋ × 125]`.
    pub fn forward<'t>(&self, bound: &BoundParams<'t>, waveform: Var<'t>) -> Result<Var<'t>> {
        let mut x = waveform;
        for (b, &(_, _, _, pool)) in BLOCKS.iter().enumerate() {
            let w = bound.var(&format!("cnn.conv{}.w", b + 1));
            let bias = bound.var(&format!("cnn.conv{}.b", b + 1));
            x = x
                .conv1d(w, 1, Padding::Same)?
                .add(bias)?
                .relu()?
                .maxpool1d(pool, pool)?;
        }
        x.transpose()
    }
}

/// 882 × 125 frames at 88.2 Hz; frames past the segment's valid audio
/// are masked.
pub fn extract_paralinguistic(segment: &WaveformSegment, cnn: &ParalinguisticCnn) -> Result<FrameSequence> {
    let frames = cnn.forward_frozen(segment.samples())?;
    let mask = paralinguistic_mask(segment.valid_len(), frames.rows());
    FrameSequence::new(frames, paralinguistic_rate(), mask)
}

pub fn paralinguistic_rate() -> f64 {
    f64::from(SAMPLE_RATE) / CNN_DOWNSAMPLE as f64
}

fn paralinguistic_mask(valid_samples: usize, frames: usize) -> Vec<bool> {
    (0..frames).map(|j| j * CNN_DOWNSAMPLE < valid_samples).collect()
}

/// Frame `i` sits at time `i / frame_rate`.
pub fn frame_times(frames: usize, frame_rate: f64) -> Vec<f64> {
    (0..frames).map(|i| i as f64 / frame_rate).collect()
}

/// Hold-last-word broadcasting of mapped speech embeddings over frames.
/// Tokens missing from the table are skipped with a warning.
pub fn extract_semantic(
    events: &[WordEvent],
    speech: &EmbeddingTable,
    map: &LinearMap,
    frame_times: &[f64],
    frame_rate: f64,
) -> Result<FrameSequence> {
    if map.speech_dim() != speech.dim() {
        return Err(Error::shape("extract_semantic", &[speech.dim()], map.matrix().shape()));
    }
    let mut known = Vec::with_capacity(events.len());
    for e in events {
        match speech.vector(&e.token) {
            Some(v) => known.push((e.start, map.apply(v))),
            None => log::warn!("skipping unknown token {:?}", e.token),
        }
    }
    let d = map.text_dim();
    let mut frames = Tensor::zeros(&[frame_times.len().max(1), d]);
    if frame_times.is_empty() {
        return Err(Error::Argument("no frame times".into()));
    }
    let mut current: Option<&Vec<f64>> = None;
    let mut next = 0;
    for (i, &t) in frame_times.iter().enumerate() {
        while next < known.len() && known[next].0 <= t {
            current = Some(&known[next].1);
            next += 1;
        }
        if let Some(v) = current {
            frames.row_mut(i).copy_from_slice(v);
        }
    }
    FrameSequence::dense(frames, frame_rate)
}

/// Bin `i` of `target` covers source frames `⌊i·T/T'⌋ .. ⌊(i+1)·T/T'⌋`.
pub fn bin_edges(source: usize, target: usize) -> Vec<usize> {
    (0..=target).map(|i| i * source / target).collect()
}

/// Row-stochastic `T' × T` mean-pooling matrix over `bin_edges`.
pub fn pooling_matrix(source: usize, target: usize) -> Tensor {
    let edges = bin_edges(source, target);
    let mut p = Tensor::zeros(&[target, source]);
    for i in 0..target {
        let (a, b) = (edges[i], edges[i + 1]);
        let w = 1.0 / (b - a) as f64;
        for j in a..b {
            p.set(i, j, w);
        }
    }
    p
}

/// Number of frames at `label_rate` covering the same duration.
pub fn target_len(frames: usize, frame_rate: f64, label_rate: f64) -> usize {
    (frames as f64 * label_rate / frame_rate).round() as usize
}

/// Mean-pool contiguous bins down to `label_rate`. An output frame is valid
/// when the first source frame of its bin is.
pub fn resample_to_label_rate(seq: &FrameSequence, label_rate: f64) -> Result<FrameSequence> {
    if !(label_rate > 0.0) || label_rate > seq.frame_rate() {
        return Err(Error::Argument(format!(
            "label rate {label_rate} must be positive and at most the frame rate {}",
            seq.frame_rate()
        )));
    }
    let (t, d) = (seq.len(), seq.dim());
    let target = target_len(t, seq.frame_rate(), label_rate).max(1);
    let edges = bin_edges(t, target);
    let mut out = Tensor::zeros(&[target, d]);
    let mut mask = Vec::with_capacity(target);
    for i in 0..target {
        let (a, b) = (edges[i], edges[i + 1]);
        let row = out.row_mut(i);
        for j in a..b {
            for (acc, &v) in row.iter_mut().zip(seq.frames().row(j)) {
                *acc += v;
            }
        }
        let n = (b - a) as f64;
        row.iter_mut().for_each(|v| *v /= n);
        mask.push(seq.mask()[a]);
    }
    FrameSequence::new(out, label_rate, mask)
}

/// Mono WAV as samples in `[-1, 1]` plus the sample rate. Accepts 16-bit
/// integer and 32-bit float encodings.
pub fn read_wav(path: impl AsRef<Path>) -> Result<(Vec<f64>, u32)> {
    let reader = hound::WavReader::open(path.as_ref())?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::Data(format!(
            "{}: expected mono audio, found {} channels",
            path.as_ref().display(),
            spec.channels
        )));
    }
    let samples = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .into_samples::<i16>()
            .map(|s| s.map(|v| f64::from(v) / 32768.0))
            .collect::<std::result::Result<Vec<_>, _>>()?,
        (hound::SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<std::result::Result<Vec<_>, _>>()?,
        (format, bits) => {
            return Err(Error::Data(format!(
                "{}: unsupported encoding {format:?}/{bits}",
                path.as_ref().display()
            )))
        }
    };
    Ok((samples, spec.sample_rate))
}

/// 16-bit PCM mono. Samples are scaled by 32768 and saturated, the exact
/// inverse of `read_wav` on the 16-bit grid.
pub fn write_wav(path: impl AsRef<Path>, samples: &[f64], sample_rate: u32) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path.as_ref(), spec)?;
    for &s in samples {
        writer.write_sample((s * 32768.0).round().clamp(-32768.0, 32767.0) as i16)?;
    }
    writer.finalize()?;
    Ok(())
}

/// Headerless little-endian `f32` samples.
pub fn read_raw_f32(path: impl AsRef<Path>) -> Result<Vec<f64>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::Data(format!(
            "{}: {} bytes is not a whole number of f32 samples",
            path.display(),
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
        .collect())
}

pub fn write_raw_f32(path: impl AsRef<Path>, samples: &[f64]) -> Result<()> {
    let path = path.as_ref();
    let bytes: Vec<u8> = samples.iter().flat_map(|&s| (s as f32).to_le_bytes()).collect();
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Load a waveform by extension: `.wav` or raw `f32`. The sample rate must
/// be 22050 Hz.
pub fn load_waveform(path: impl AsRef<Path>) -> Result<Vec<f64>> {
    let path = path.as_ref();
    let is_wav = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("wav"));
    if is_wav {
        let (samples, rate) = read_wav(path)?;
        if rate != SAMPLE_RATE {
            return Err(Error::Data(format!(
                "{}: sample rate {rate} Hz, expected {SAMPLE_RATE}",
                path.display()
            )));
        }
        Ok(samples)
    } else {
        read_raw_f32(path)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct WordRecord {
    segment_id: String,
    token: String,
    start: f64,
    end: f64,
}

/// CSV with header `segment_id,token,start,end`, grouped by segment.
pub fn read_word_events(path: impl AsRef<Path>) -> Result<BTreeMap<String, Vec<WordEvent>>> {
    let path = path.as_ref();
    let mut reader = csv::Reader::from_path(path)?;
    let mut out: BTreeMap<String, Vec<WordEvent>> = BTreeMap::new();
    for (i, record) in reader.deserialize::<WordRecord>().enumerate() {
        let r = record.map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 2,
            message: e.to_string(),
        })?;
        out.entry(r.segment_id).or_default().push(WordEvent {
            token: r.token,
            start: r.start,
            end: r.end,
        });
    }
    Ok(out)
}

pub fn write_word_events(path: impl AsRef<Path>, events: &BTreeMap<String, Vec<WordEvent>>) -> Result<()> {
    let mut writer = csv::Writer::from_path(path.as_ref())?;
    for (segment, list) in events {
        for e in list {
            writer.serialize(WordRecord {
                segment_id: segment.clone(),
                token: e.token.clone(),
                start: e.start,
                end: e.end,
            })?;
        }
    }
    writer.flush().map_err(|e| Error::io(path.as_ref(), e))
}
