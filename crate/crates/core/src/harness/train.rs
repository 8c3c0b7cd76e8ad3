//! Training loop, pipeline state and resumable checkpoints.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::checkpoint;
use super::config::{ClipScope, RunConfig};
use super::corpus::{Corpus, Segment, Split};
use super::dataset::{
    chunk_segments, initial_cnn, paralinguistic_frames, Chunk, FeatureBank, FeatureNorm, SegmentFeatures,
};
use super::eval::{score_segments, Score};
use crate::alignment::{refine_from_frequent, LinearMap};
use crate::embeddings::EmbeddingTable;
use crate::error::{Error, Result};
use crate::features::{pooling_matrix, ParalinguisticCnn, PARALINGUISTIC_DIM};
use crate::fusion::{ccc_loss, AffectModel};
use crate::rng::{Rng, RngState, SeedStream};
use crate::tensor::{clip_grad_norm, AdamState, ParamSet, Tape, Tensor, Var};

/// Shared tokens used when training has to derive its own map.
pub const FALLBACK_DICTIONARY: usize = 500;

/// Map for runs without a precomputed one: Procrustes over the most
/// frequent shared tokens, or a zero-padded identity when the dimensions
/// differ.
pub fn fallback_map(speech: &EmbeddingTable, text: &EmbeddingTable) -> Result<LinearMap> {
    if speech.dim() != text.dim() {
        log::warn!(
            "speech dim {} differs from text dim {}; using the padded identity map",
            speech.dim(),
            text.dim()
        );
        return Ok(LinearMap::identity(text.dim(), speech.dim()));
    }
    log::warn!("no map given; refining over the {FALLBACK_DICTIONARY} most frequent shared tokens");
    Ok(refine_from_frequent(speech, text, FALLBACK_DICTIONARY)?.0)
}

/// Everything needed to turn a segment into predictions.
#[derive(Debug, Clone, PartialEq)]
pub struct Pipeline {
    pub config: RunConfig,
    pub map: LinearMap,
    pub cnn: ParalinguisticCnn,
    pub norm: FeatureNorm,
    pub model: AffectModel,
}

impl Pipeline {
    /// Cached features for `ids` consistent with this pipeline. Paralinguistic
    /// frames are cached only while the CNN stays frozen.
    pub fn feature_bank(&self, corpus: &Corpus, ids: &[String]) -> Result<FeatureBank> {
        FeatureBank::build(
            corpus,
            ids,
            &self.map,
            self.config.cnn_seed(),
            !self.config.train_cnn,
            self.config.label_rate,
        )
    }

    /// Standardized `T × 125` paralinguistic frames.
    pub fn paralinguistic(&self, segment: &Segment, feats: &SegmentFeatures) -> Result<Tensor> {
        match (&feats.paralinguistic, self.config.train_cnn) {
            (Some(p), false) => self.norm.apply(p),
            _ => self
                .norm
                .apply(&paralinguistic_frames(segment, &self.cnn, self.config.label_rate)?.0),
        }
    }

    /// Evaluation-mode `valid × 3` predictions for one segment.
    pub fn predict_segment(&self, segment: &Segment, feats: &SegmentFeatures) -> Result<Tensor> {
        let para = self.paralinguistic(segment, feats)?.slice_rows(0, feats.valid)?;
        let sem = feats.semantic.slice_rows(0, feats.valid)?;
        self.model.predict(&sem, &para)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(TrainState::load(path)?.pipeline)
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Mean training-mode batch loss.
    pub train_loss: f64,
    pub batches: usize,
    /// Batches skipped because a gold dimension was constant.
    pub skipped_batches: usize,
    pub train: Score,
    pub dev: Option<Score>,
    /// Whether this epoch set a new best selection score.
    pub best: bool,
}

impl EpochMetrics {
    /// Dev mean concordance, or train when there is no dev split.
    pub fn selection_score(&self) -> f64 {
        self.dev.as_ref().unwrap_or(&self.train).mean
    }
}

/// The complete resumable state of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub pipeline: Pipeline,
    pub model_adam: AdamState,
    pub cnn_adam: Option<AdamState>,
    pub rng: Rng,
    /// Completed epochs.
    pub epoch: usize,
    pub best_score: Option<f64>,
    pub history: Vec<EpochMetrics>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: RunConfig,
    semantic_dim: usize,
    paralinguistic_dim: usize,
    epoch: usize,
    best_score: Option<f64>,
    history: Vec<EpochMetrics>,
    rng: RngState,
    model_adam: AdamState,
    cnn_adam: Option<AdamState>,
}

fn insert_prefixed(out: &mut ParamSet, prefix: &str, names: &[String], tensors: &[Tensor]) -> Result<()> {
    for (name, t) in names.iter().zip(tensors) {
        out.insert(format!("{prefix}/{name}"), t.clone())?;
    }
    Ok(())
}

fn take_prefixed(all: &ParamSet, prefix: &str) -> Result<ParamSet> {
    let mut out = ParamSet::new();
    let lead = format!("{prefix}/");
    for (name, t) in all.iter() {
        if let Some(rest) = name.strip_prefix(&lead) {
            out.insert(rest, t.clone())?;
        }
    }
    Ok(out)
}

fn take_tensor(all: &ParamSet, name: &str) -> Result<Tensor> {
    all.get(name)
        .cloned()
        .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))
}

fn moments_in_order(all: &ParamSet, prefix: &str, names: &[String]) -> Result<Vec<Tensor>> {
    names
        .iter()
        .map(|n| take_tensor(all, &format!("{prefix}/{n}")))
        .collect()
}

fn restore_adam(mut hyper: AdamState, all: &ParamSet, prefix: &str, params: &ParamSet) -> Result<AdamState> {
    hyper.m = moments_in_order(all, &format!("{prefix}.m"), params.names())?;
    hyper.v = moments_in_order(all, &format!("{prefix}.v"), params.names())?;
    for ((m, v), p) in hyper.m.iter().zip(&hyper.v).zip(params.tensors()) {
        if m.shape() != p.shape() || v.shape() != p.shape() {
            return Err(Error::shape("optimizer moment", m.shape(), p.shape()));
        }
    }
    Ok(hyper)
}

impl TrainState {
    fn parts(&self) -> Result<(Header, ParamSet)> {
        let p = &self.pipeline;
        let mut tensors = ParamSet::new();
        insert_prefixed(
            &mut tensors,
            "model",
            p.model.params().names(),
            p.model.params().tensors(),
        )?;
        insert_prefixed(&mut tensors, "cnn", p.cnn.params().names(), p.cnn.params().tensors())?;
        tensors.insert("map/w", p.map.matrix().clone())?;
        tensors.insert("norm/mean", p.norm.mean.clone())?;
        tensors.insert("norm/scale", p.norm.scale.clone())?;
        let model_names = p.model.params().names();
        insert_prefixed(&mut tensors, "adam.model.m", model_names, &self.model_adam.m)?;
        insert_prefixed(&mut tensors, "adam.model.v", model_names, &self.model_adam.v)?;
        if let Some(a) = &self.cnn_adam {
            insert_prefixed(&mut tensors, "adam.cnn.m", p.cnn.params().names(), &a.m)?;
            insert_prefixed(&mut tensors, "adam.cnn.v", p.cnn.params().names(), &a.v)?;
        }
        let header = Header {
            config: p.config.clone(),
            semantic_dim: p.model.semantic_dim(),
            paralinguistic_dim: p.model.paralinguistic_dim(),
            epoch: self.epoch,
            best_score: self.best_score,
            history: self.history.clone(),
            rng: RngState::capture(&self.rng),
            model_adam: self.model_adam.clone(),
            cnn_adam: self.cnn_adam.clone(),
        };
        Ok((header, tensors))
    }

    fn from_parts(header: Header, tensors: ParamSet) -> Result<Self> {
        let model_params = take_prefixed(&tensors, "model")?;
        let model = AffectModel::from_params(
            header.config.model.clone(),
            header.semantic_dim,
            header.paralinguistic_dim,
            model_params,
        )?;
        let cnn = ParalinguisticCnn::from_params(take_prefixed(&tensors, "cnn")?)?;
        let map = LinearMap::new(take_tensor(&tensors, "map/w")?)?;
        if map.text_dim() != header.semantic_dim {
            return Err(Error::Checkpoint(format!(
                "map output dim {} does not match model input {}",
                map.text_dim(),
                header.semantic_dim
            )));
        }
        let norm = FeatureNorm {
            mean: take_tensor(&tensors, "norm/mean")?,
            scale: take_tensor(&tensors, "norm/scale")?,
        };
        if norm.scale.shape() != norm.mean.shape() || norm.dim() != header.paralinguistic_dim {
            return Err(Error::shape("feature norm", norm.mean.shape(), norm.scale.shape()));
        }
        let model_adam = restore_adam(header.model_adam, &tensors, "adam.model", model.params())?;
        let cnn_adam = match header.cnn_adam {
            Some(h) => Some(restore_adam(h, &tensors, "adam.cnn", cnn.params())?),
            None => None,
        };
        Ok(Self {
            pipeline: Pipeline {
                config: header.config,
                map,
                cnn,
                norm,
                model,
            },
            model_adam,
            cnn_adam,
            rng: header.rng.restore(),
            epoch: header.epoch,
            best_score: header.best_score,
            history: header.history,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let (h, t) = self.parts()?;
        checkpoint::encode(&h, &t)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (h, t) = checkpoint::decode(bytes)?;
        Self::from_parts(h, t)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let (h, t) = self.parts()?;
        checkpoint::save(path, &h, &t)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let (h, t) = checkpoint::load(path)?;
        Self::from_parts(h, t)
    }
}

/// Clip either the recurrent gradients or all of them to `max_norm`.
/// Returns the pre-clip norm of the clipped group.
fn clip_gradients(
    model_grads: &mut [Tensor],
    cnn_grads: &mut [Tensor],
    model_names: &[String],
    scope: ClipScope,
    max_norm: f64,
) -> Result<f64> {
    let placeholder = || Tensor::scalar(0.0);
    let mut slots: Vec<&mut Tensor> = match scope {
        ClipScope::Lstm => model_grads
            .iter_mut()
            .zip(model_names)
            .filter(|(_, n)| n.starts_with("lstm."))
            .map(|(g, _)| g)
            .collect(),
        ClipScope::Global => model_grads.iter_mut().chain(cnn_grads.iter_mut()).collect(),
    };
    let mut group: Vec<Tensor> = slots
        .iter_mut()
        .map(|g| std::mem::replace(&mut **g, placeholder()))
        .collect();
    let norm = clip_grad_norm(&mut group, max_norm)?;
    for (slot, g) in slots.into_iter().zip(group) {
        *slot = g;
    }
    Ok(norm)
}

/// Runs epochs over a corpus and keeps the resumable state.
pub struct Trainer<'c> {
    corpus: &'c Corpus,
    bank: FeatureBank,
    state: TrainState,
    train_ids: Vec<String>,
    dev_ids: Vec<String>,
    chunks: Vec<Chunk>,
    /// Standardized paralinguistic frames while the CNN is frozen.
    standardized: BTreeMap<String, Tensor>,
}

impl<'c> Trainer<'c> {
    /// Fresh run. A supplied bank must have been built with the same map,
    /// CNN seed and label rate; otherwise one is built here.
    pub fn new(config: RunConfig, corpus: &'c Corpus, map: LinearMap, bank: Option<FeatureBank>) -> Result<Self> {
        config.validate()?;
        if map.speech_dim() != corpus.speech.dim() {
            return Err(Error::shape("map input", &[map.speech_dim()], &[corpus.speech.dim()]));
        }
        let seeds = SeedStream::new(config.seed);
        let cnn = initial_cnn(config.cnn_seed());
        let model = AffectModel::new(
            config.model.clone(),
            map.text_dim(),
            PARALINGUISTIC_DIM,
            &mut seeds.fork("model"),
        )?;
        let model_adam = AdamState::new(config.learning_rate, model.params().tensors());
        let cnn_adam = config
            .train_cnn
            .then(|| AdamState::new(config.learning_rate, cnn.params().tensors()));
        let state = TrainState {
            pipeline: Pipeline {
                norm: FeatureNorm::identity(PARALINGUISTIC_DIM),
                config,
                map,
                cnn,
                model,
            },
            model_adam,
            cnn_adam,
            rng: seeds.fork("train"),
            epoch: 0,
            best_score: None,
            history: Vec::new(),
        };
        let mut trainer = Self::assemble(corpus, state, bank)?;
        if trainer.state.pipeline.config.standardize {
            trainer.state.pipeline.norm = trainer.fit_norm()?;
            trainer.standardize_cache()?;
        }
        Ok(trainer)
    }

    /// Continue from a saved state.
    pub fn resume(state: TrainState, corpus: &'c Corpus, bank: Option<FeatureBank>) -> Result<Self> {
        state.pipeline.config.validate()?;
        Self::assemble(corpus, state, bank)
    }

    fn assemble(corpus: &'c Corpus, state: TrainState, bank: Option<FeatureBank>) -> Result<Self> {
        let train_ids = corpus.manifest.splits.train.clone();
        let dev_ids = corpus.manifest.splits.dev.clone();
        if train_ids.is_empty() {
            return Err(Error::Data("training split is empty".into()));
        }
        corpus.split(Split::Train)?;
        corpus.split(Split::Dev)?;
        let config = &state.pipeline.config;
        let needed: Vec<String> = train_ids.iter().chain(&dev_ids).cloned().collect();
        let bank = match bank {
            Some(b) => {
                let compatible = b.label_rate == config.label_rate
                    && b.cnn_seed == config.cnn_seed()
                    && b.map == state.pipeline.map
                    && (b.has_paralinguistic || config.train_cnn)
                    && needed.iter().all(|id| b.contains(id));
                if !compatible {
                    return Err(Error::Argument(
                        "feature bank was built for a different map, CNN seed, label rate or split".into(),
                    ));
                }
                b
            }
            None => state.pipeline.feature_bank(corpus, &needed)?,
        };
        let chunks = chunk_segments(&bank, &train_ids, config.sequence_length)?;
        if chunks.is_empty() {
            return Err(Error::Data("no training sequence has two valid frames".into()));
        }
        let mut trainer = Self {
            corpus,
            bank,
            state,
            train_ids,
            dev_ids,
            chunks,
            standardized: BTreeMap::new(),
        };
        trainer.standardize_cache()?;
        Ok(trainer)
    }

    fn fit_norm(&self) -> Result<FeatureNorm> {
        let p = &self.state.pipeline;
        let mut frames = Vec::with_capacity(self.train_ids.len());
        for id in &self.train_ids {
            let feats = self.bank.get(id)?;
            let raw = match (&feats.paralinguistic, p.config.train_cnn) {
                (Some(t), false) => t.clone(),
                _ => {
                    let segment = self.corpus.segment(id).expect("split checked");
                    paralinguistic_frames(segment, &p.cnn, p.config.label_rate)?.0
                }
            };
            frames.push((raw, feats.valid));
        }
        FeatureNorm::fit(frames.iter().map(|(t, v)| (t, *v)))
    }

    fn standardize_cache(&mut self) -> Result<()> {
        self.standardized.clear();
        if self.state.pipeline.config.train_cnn {
            return Ok(());
        }
        for id in &self.train_ids {
            let raw = self.bank.get(id)?.paralinguistic.as_ref().expect("bank checked");
            self.standardized
                .insert(id.clone(), self.state.pipeline.norm.apply(raw)?);
        }
        Ok(())
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn into_state(self) -> TrainState {
        self.state
    }

    pub fn bank(&self) -> &FeatureBank {
        &self.bank
    }

    pub fn chunks(&self) -> &[Chunk] {
        &self.chunks
    }

    pub fn set_epochs(&mut self, epochs: usize) {
        self.state.pipeline.config.epochs = epochs;
    }

    /// Score the current pipeline on the training split, in evaluation mode.
    pub fn train_score(&self) -> Result<Score> {
        score_segments(&self.state.pipeline, self.corpus, &self.bank, &self.train_ids)
    }

    pub fn dev_score(&self) -> Result<Option<Score>> {
        if self.dev_ids.is_empty() {
            return Ok(None);
        }
        score_segments(&self.state.pipeline, self.corpus, &self.bank, &self.dev_ids).map(Some)
    }

    /// Mean batch loss of the current parameters over all training chunks
    /// in a fixed order, with dropout off and no update.
    pub fn eval_loss(&self) -> Result<f64> {
        let p = &self.state.pipeline;
        let mut total = 0.0;
        let mut n = 0;
        for batch in self.chunks.chunks(p.config.batch_size) {
            let tape = Tape::new();
            let bound = p.model.params().bind(&tape, |_| false);
            let mut unused = SeedStream::new(0).fork("unused");
            let mut preds = Vec::new();
            let mut golds = Vec::new();
            for c in batch {
                let (sem, para, gold) = self.chunk_inputs(&tape, c, None)?;
                preds.push(p.model.forward(&bound, sem, para, false, &mut unused)?);
                golds.push(gold);
            }
            let gold = Tensor::vstack(&golds.iter().collect::<Vec<_>>())?;
            match ccc_loss(Var::concat(&preds, 0)?, &gold) {
                Ok(l) => {
                    total += l.value().item();
                    n += 1;
                }
                Err(Error::Degenerate(_)) => {}
                Err(e) => return Err(e),
            }
        }
        if n == 0 {
            return Err(Error::Data("every batch has a constant gold dimension".into()));
        }
        Ok(total / n as f64)
    }

    fn chunk_inputs<'t>(
        &self,
        tape: &'t Tape,
        c: &Chunk,
        cnn: Option<&crate::tensor::BoundParams<'t>>,
    ) -> Result<(Var<'t>, Var<'t>, Tensor)> {
        let p = &self.state.pipeline;
        let feats = self.bank.get(&c.id)?;
        let sem = tape.constant(feats.semantic.slice_rows(c.start, c.len)?);
        let para = match (self.standardized.get(&c.id), cnn) {
            (Some(t), None) => tape.constant(t.slice_rows(c.start, c.len)?),
            _ => {
                let segment = self.corpus.segment(&c.id).expect("split checked");
                let samples = segment.waveform.samples();
                let wave = tape.constant(Tensor::new(vec![1, samples.len()], samples.to_vec())?);
                let frames = match cnn {
                    Some(bound) => p.cnn.forward(bound, wave)?,
                    None => tape.constant(p.cnn.forward_frozen(samples)?),
                };
                let pool = pooling_matrix(frames.shape()[0], feats.labels.rows());
                let pooled = tape.constant(pool).matmul(frames)?;
                p.norm.apply_var(pooled)?.narrow(0, c.start, c.len)?
            }
        };
        Ok((sem, para, feats.labels.slice_rows(c.start, c.len)?))
    }

    /// One optimizer step; `None` when the batch had a constant gold
    /// dimension and was skipped.
    fn step(&mut self, batch: &[usize]) -> Result<Option<f64>> {
        let tape = Tape::new();
        let p = &self.state.pipeline;
        let bound = p.model.params().bind(&tape, |_| true);
        let cnn_bound = p.config.train_cnn.then(|| p.cnn.params().bind(&tape, |_| true));
        let mut preds = Vec::with_capacity(batch.len());
        let mut golds = Vec::with_capacity(batch.len());
        let mut rng = self.state.rng.clone();
        for &ci in batch {
            let (sem, para, gold) = self.chunk_inputs(&tape, &self.chunks[ci], cnn_bound.as_ref())?;
            preds.push(p.model.forward(&bound, sem, para, true, &mut rng)?);
            golds.push(gold);
        }
        self.state.rng = rng;
        let gold = Tensor::vstack(&golds.iter().collect::<Vec<_>>())?;
        let loss = match ccc_loss(Var::concat(&preds, 0)?, &gold) {
            Ok(l) => l,
            Err(Error::Degenerate(m)) => {
                log::warn!("skipping batch: {m}");
                return Ok(None);
            }
            Err(e) => return Err(e),
        };
        let value = loss.value().item();
        if !value.is_finite() {
            return Err(Error::NonFinite("ccc_loss"));
        }
        let grads = tape.backward(loss)?;
        let mut model_grads = bound.grads(&grads);
        let mut cnn_grads = cnn_bound.as_ref().map(|b| b.grads(&grads)).unwrap_or_default();
        let (scope, clip) = (p.config.clip_scope, p.config.grad_clip);
        let names = p.model.params().names().to_vec();
        clip_gradients(&mut model_grads, &mut cnn_grads, &names, scope, clip)?;
        let state = &mut self.state;
        state
            .model_adam
            .step(state.pipeline.model.params_mut().tensors_mut(), &model_grads)?;
        if let Some(adam) = &mut state.cnn_adam {
            adam.step(state.pipeline.cnn.params_mut().tensors_mut(), &cnn_grads)?;
        }
        Ok(Some(value))
    }

    /// Shuffle, step through every batch, then score train and dev.
    pub fn run_epoch(&mut self) -> Result<EpochMetrics> {
        let epoch = self.state.epoch + 1;
        let mut order: Vec<usize> = (0..self.chunks.len()).collect();
        order.shuffle(&mut self.state.rng);
        let batch_size = self.state.pipeline.config.batch_size;
        let (mut total, mut batches, mut skipped) = (0.0, 0, 0);
        for (b, batch) in order.chunks(batch_size).enumerate() {
            match self.step(batch) {
                Ok(Some(v)) => {
                    total += v;
                    batches += 1;
                }
                Ok(None) => skipped += 1,
                Err(e @ (Error::NonFinite(_) | Error::Diverged(_))) => {
                    return Err(Error::Diverged(format!("epoch {epoch} batch {b}: {e}")));
                }
                Err(e) => return Err(e),
            }
        }
        if batches == 0 {
            return Err(Error::Data("every batch had a constant gold dimension".into()));
        }
        let train = self.train_score()?;
        let dev = self.dev_score()?;
        let mut metrics = EpochMetrics {
            epoch,
            train_loss: total / batches as f64,
            batches,
            skipped_batches: skipped,
            train,
            dev,
            best: false,
        };
        let selection = metrics.selection_score();
        if self.state.best_score.is_none_or(|b| selection > b) {
            self.state.best_score = Some(selection);
            metrics.best = true;
        }
        self.state.epoch = epoch;
        self.state.history.push(metrics.clone());
        Ok(metrics)
    }

    /// Run until `config.epochs`. With `out_dir`, writes `metrics.jsonl`,
    /// `last.ckpt` after every epoch and `best.ckpt` whenever the selection
    /// score improves.
    pub fn train(&mut self, out_dir: Option<&Path>) -> Result<Vec<EpochMetrics>> {
        let mut log_file = match out_dir {
            Some(dir) => {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                let path = dir.join("metrics.jsonl");
                let mut f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
                for m in &self.state.history {
                    writeln!(f, "{}", serde_json::to_string(m)?).map_err(|e| Error::io(&path, e))?;
                }
                Some((f, path))
            }
            None => None,
        };
        let mut produced = Vec::new();
        while self.state.epoch < self.state.pipeline.config.epochs {
            let m = self.run_epoch()?;
            log::info!(
                "epoch {} loss {:.4} train {:.4} dev {}",
                m.epoch,
                m.train_loss,
                m.train.mean,
                m.dev.as_ref().map_or("-".to_string(), |d| format!("{:.4}", d.mean))
            );
            if let (Some(dir), Some((f, path))) = (out_dir, log_file.as_mut()) {
                writeln!(f, "{}", serde_json::to_string(&m)?).map_err(|e| Error::io(&*path, e))?;
                f.flush().map_err(|e| Error::io(&*path, e))?;
                self.state.save(dir.join("last.ckpt"))?;
                if m.best {
                    self.state.save(dir.join("best.ckpt"))?;
                }
            }
            produced.push(m);
        }
        Ok(produced)
    }
}
