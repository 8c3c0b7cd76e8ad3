use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::LinearMap;
use crate::embeddings::EmbeddingTable;
use crate::error::{Error, Result};
use crate::rng::{Rng, SeedStream};
use crate::tensor::{sgd_step, BoundParams, ParamSet, Tape, Tensor, Var};

/// Probabilities are clamped into `[PROB_FLOOR, 1 − PROB_FLOOR]` before logs.
const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlignmentConfig {
    /// Generator (map) updates.
    pub steps: usize,
    pub discriminator_steps: usize,
    pub batch_size: usize,
    pub discriminator_lr: f64,
    pub map_lr: f64,
    pub label_smoothing: f64,
    pub orthogonality_beta: f64,
    pub hidden: usize,
    pub input_dropout: f64,
    pub leaky_slope: f64,
    /// Refinement dictionary size `k`.
    pub dictionary_size: usize,
    /// Only the most frequent rows are sampled for adversarial batches
    /// (0 = whole vocabulary).
    pub max_rank: usize,
    pub log_every: usize,
    /// Rows per side withheld from training to measure discriminator accuracy.
    pub eval_samples: usize,
    pub seed: u64,
}

impl Default for AlignmentConfig {
    fn default() -> Self {
        Self {
            steps: 5000,
            discriminator_steps: 5,
            batch_size: 32,
            discriminator_lr: 0.1,
            map_lr: 0.1,
            label_smoothing: 0.1,
            orthogonality_beta: 0.01,
            hidden: 512,
            input_dropout: 0.1,
            leaky_slope: 0.2,
            dictionary_size: 500,
            max_rank: 0,
            log_every: 100,
            eval_samples: 100,
            seed: 0,
        }
    }
}

impl AlignmentConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("discriminator_steps", self.discriminator_steps),
            ("batch_size", self.batch_size),
            ("hidden", self.hidden),
            ("dictionary_size", self.dictionary_size),
            ("log_every", self.log_every),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Argument(format!("{name} must be positive")));
            }
        }
        if !(0.0..0.5).contains(&self.label_smoothing) {
            return Err(Error::Argument(format!(
                "label_smoothing {} outside [0, 0.5)",
                self.label_smoothing
            )));
        }
        if !(0.0..1.0).contains(&self.input_dropout) {
            return Err(Error::Argument("input_dropout outside [0, 1)".into()));
        }
        for (name, v) in [
            ("discriminator_lr", self.discriminator_lr),
            ("map_lr", self.map_lr),
            ("orthogonality_beta", self.orthogonality_beta),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Argument(format!("{name} must be a nonnegative number")));
            }
        }
        Ok(())
    }
}

/// Two affine layers with a leaky ReLU between; outputs the probability
/// that a vector is a mapped speech embedding.
#[derive(Debug, Clone)]
pub struct Discriminator {
    params: ParamSet,
    slope: f64,
    input_dropout: f64,
}

impl Discriminator {
    pub fn new(dim: usize, hidden: usize, slope: f64, input_dropout: f64, rng: &mut Rng) -> Self {
        let mut params = ParamSet::new();
        let b1 = (6.0 / (dim + hidden) as f64).sqrt();
        let b2 = (6.0 / (hidden + 1) as f64).sqrt();
        params.insert("w1", Tensor::uniform(&[dim, hidden], b1, rng)).unwrap();
        params.insert("b1", Tensor::zeros(&[hidden])).unwrap();
        params.insert("w2", Tensor::uniform(&[hidden, 1], b2, rng)).unwrap();
        params.insert("b2", Tensor::zeros(&[1])).unwrap();
        Self {
            params,
            slope,
            input_dropout,
        }
    }

    pub fn from_params(params: ParamSet, slope: f64, input_dropout: f64) -> Result<Self> {
        for name in ["w1", "b1", "w2", "b2"] {
            if params.get(name).is_none() {
                return Err(Error::Argument(format!("discriminator missing {name}")));
            }
        }
        Ok(Self {
            params,
            slope,
            input_dropout,
        })
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn input_dim(&self) -> usize {
        self.params.get("w1").unwrap().rows()
    }

    fn forward<'t>(&self, bound: &BoundParams<'t>, z: Var<'t>, train: bool, rng: &mut Rng) -> Result<Var<'t>> {
        let z = z.dropout(self.input_dropout, train, rng)?;
        let h = z
            .matmul(bound.var("w1"))?
            .add(bound.var("b1"))?
            .leaky_relu(self.slope)?;
        h.matmul(bound.var("w2"))?.add(bound.var("b2"))?.sigmoid()
    }

    /// Evaluation-mode probabilities for the rows of `z`.
    pub fn probabilities(&self, z: &Tensor) -> Result<Vec<f64>> {
        let tape = Tape::new();
        let bound = self.params.bind(&tape, |_| false);
        let mut unused = SeedStream::new(0).fork("unused");
        let p = self.forward(&bound, tape.constant(z.clone()), false, &mut unused)?;
        Ok(p.value().data().to_vec())
    }
}

/// `−mean[y ln p + (1−y) ln(1−p)]` over clamped probabilities.
fn binary_cross_entropy<'t>(p: Var<'t>, target: f64) -> Result<Var<'t>> {
    let p = p.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR)?;
    let mut terms = Vec::new();
    if target > 0.0 {
        terms.push(p.ln()?.mean()?.scale(-target)?);
    }
    if target < 1.0 {
        let q = p.scale(-1.0)?.add_scalar(1.0)?;
        terms.push(q.ln()?.mean()?.scale(-(1.0 - target))?);
    }
    match terms.as_slice() {
        [a] => Ok(*a),
        [a, b] => a.add(*b),
        _ => unreachable!("target in [0, 1]"),
    }
}

fn check_batches(speech: &Tensor, text: &Tensor) -> Result<()> {
    if speech.rank() != 2 || text.rank() != 2 {
        return Err(Error::Argument("batches must be matrices".into()));
    }
    Ok(())
}

/// Discriminator objective: mapped speech labelled 1, text labelled 0,
/// with targets smoothed to `1 − ε` and `ε`.
pub fn discriminator_loss(
    disc: &Discriminator,
    map: &LinearMap,
    speech_batch: &Tensor,
    text_batch: &Tensor,
    smoothing: f64,
) -> Result<f64> {
    check_batches(speech_batch, text_batch)?;
    let tape = Tape::new();
    let bound = disc.params.bind(&tape, |_| false);
    let mut rng = SeedStream::new(0).fork("unused");
    let zs = tape.constant(map.apply_rows(speech_batch)?);
    let zt = tape.constant(text_batch.clone());
    let ps = disc.forward(&bound, zs, false, &mut rng)?;
    let pt = disc.forward(&bound, zt, false, &mut rng)?;
    let loss = binary_cross_entropy(ps, 1.0 - smoothing)?.add(binary_cross_entropy(pt, smoothing)?)?;
    Ok(loss.value().item())
}

/// Generator objective: the same classifier with labels flipped.
pub fn generator_loss(
    disc: &Discriminator,
    map: &LinearMap,
    speech_batch: &Tensor,
    text_batch: &Tensor,
) -> Result<f64> {
    check_batches(speech_batch, text_batch)?;
    let tape = Tape::new();
    let bound = disc.params.bind(&tape, |_| false);
    let mut rng = SeedStream::new(0).fork("unused");
    let zs = tape.constant(map.apply_rows(speech_batch)?);
    let zt = tape.constant(text_batch.clone());
    let ps = disc.forward(&bound, zs, false, &mut rng)?;
    let pt = disc.forward(&bound, zt, false, &mut rng)?;
    let loss = binary_cross_entropy(ps, 0.0)?.add(binary_cross_entropy(pt, 1.0)?)?;
    Ok(loss.value().item())
}

/// Metrics recorded every `log_every` generator steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingCheckpoint {
    pub step: usize,
    pub discriminator_loss: f64,
    pub generator_loss: f64,
    /// Accuracy on withheld rows, mapped speech and text weighted equally.
    pub discriminator_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct AdversarialOutcome {
    pub map: LinearMap,
    pub discriminator: Discriminator,
    pub checkpoints: Vec<TrainingCheckpoint>,
}

fn gather_rows(table: &EmbeddingTable, rows: &[usize]) -> Tensor {
    let d = table.dim();
    let mut data = Vec::with_capacity(rows.len() * d);
    for &r in rows {
        data.extend_from_slice(table.row(r));
    }
    Tensor::from_parts(vec![rows.len(), d], data)
}

/// Split a table's row indices into (trainable pool, withheld rows).
fn partition(table: &EmbeddingTable, config: &AlignmentConfig, rng: &mut Rng) -> (Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..table.len()).collect();
    // Highest frequency first; stable on ties by position.
    order.sort_by(|&a, &b| table.frequencies()[b].cmp(&table.frequencies()[a]));
    if config.max_rank > 0 {
        order.truncate(config.max_rank.min(order.len()));
    }
    order.shuffle(rng);
    let held = config.eval_samples.min(order.len() / 5);
    let withheld = order[..held].to_vec();
    let pool = order[held..].to_vec();
    (pool, withheld)
}

fn sample(pool: &[usize], n: usize, rng: &mut Rng) -> Vec<usize> {
    (0..n).map(|_| pool[rng.random_range(0..pool.len())]).collect()
}

fn accuracy(disc: &Discriminator, map: &LinearMap, speech: &Tensor, text: &Tensor) -> Result<f64> {
    let ps = disc.probabilities(&map.apply_rows(speech)?)?;
    let pt = disc.probabilities(text)?;
    let hit_s = ps.iter().filter(|&&p| p > 0.5).count() as f64 / ps.len() as f64;
    let hit_t = pt.iter().filter(|&&p| p < 0.5).count() as f64 / pt.len() as f64;
    Ok(0.5 * (hit_s + hit_t))
}

/// `W ← (1+β)W − β(WWᵀ)W`.
fn orthogonality_pullback(w: &mut Tensor, beta: f64) -> Result<()> {
    let wwt_w = w.matmul(&w.transpose()?)?.matmul(w)?;
    for (x, y) in w.data_mut().iter_mut().zip(wwt_w.data()) {
        *x = (1.0 + beta) * *x - beta * y;
    }
    Ok(())
}

/// Alternate `discriminator_steps` discriminator updates with one map
/// update, starting from the (zero-padded) identity map.
pub fn adversarial_train(
    speech: &EmbeddingTable,
    text: &EmbeddingTable,
    config: &AlignmentConfig,
) -> Result<AdversarialOutcome> {
    config.validate()?;
    let seeds = SeedStream::new(config.seed);
    let mut init_rng = seeds.fork("adversarial/init");
    let mut rng = seeds.fork("adversarial/batches");
    let mut drop_rng = seeds.fork("adversarial/dropout");

    let mut map = LinearMap::identity(text.dim(), speech.dim());
    let mut disc = Discriminator::new(
        text.dim(),
        config.hidden,
        config.leaky_slope,
        config.input_dropout,
        &mut init_rng,
    );
    let (speech_pool, speech_held) = partition(speech, config, &mut init_rng);
    let (text_pool, text_held) = partition(text, config, &mut init_rng);
    if speech_pool.is_empty() || text_pool.is_empty() {
        return Err(Error::Argument("embedding tables are too small to sample".into()));
    }
    let held_s = (!speech_held.is_empty()).then(|| gather_rows(speech, &speech_held));
    let held_t = (!text_held.is_empty()).then(|| gather_rows(text, &text_held));

    let mut checkpoints = Vec::new();
    let mut last_d = f64::NAN;
    for step in 0..config.steps {
        for _ in 0..config.discriminator_steps {
            let sb = gather_rows(speech, &sample(&speech_pool, config.batch_size, &mut rng));
            let tb = gather_rows(text, &sample(&text_pool, config.batch_size, &mut rng));
            let tape = Tape::new();
            let bound = disc.params.bind(&tape, |_| true);
            let zs = tape.constant(map.apply_rows(&sb)?);
            let zt = tape.constant(tb);
            let ps = disc.forward(&bound, zs, true, &mut drop_rng)?;
            let pt = disc.forward(&bound, zt, true, &mut drop_rng)?;
            let loss = binary_cross_entropy(ps, 1.0 - config.label_smoothing)?
                .add(binary_cross_entropy(pt, config.label_smoothing)?)?;
            last_d = loss.value().item();
            if !last_d.is_finite() {
                return Err(Error::Diverged(format!("discriminator loss at step {step}")));
            }
            let grads = bound.grads(&tape.backward(loss)?);
            sgd_step(disc.params.tensors_mut(), &grads, config.discriminator_lr)?;
        }

        let sb = gather_rows(speech, &sample(&speech_pool, config.batch_size, &mut rng));
        let tb = gather_rows(text, &sample(&text_pool, config.batch_size, &mut rng));
        let tape = Tape::new();
        let bound = disc.params.bind(&tape, |_| false);
        let w = tape.param(map.matrix().clone());
        let zs = tape.constant(sb).matmul(w.transpose()?)?;
        let zt = tape.constant(tb);
        let ps = disc.forward(&bound, zs, false, &mut drop_rng)?;
        let pt = disc.forward(&bound, zt, false, &mut drop_rng)?;
        let loss = binary_cross_entropy(ps, 0.0)?.add(binary_cross_entropy(pt, 1.0)?)?;
        let last_g = loss.value().item();
        if !last_g.is_finite() {
            return Err(Error::Diverged(format!("generator loss at step {step}")));
        }
        let grad = tape.backward(loss)?.wrt(w);
        let mut wm = map.matrix().clone();
        sgd_step(std::slice::from_mut(&mut wm), &[grad], config.map_lr)?;
        if wm.rows() == wm.cols() && config.orthogonality_beta > 0.0 {
            orthogonality_pullback(&mut wm, config.orthogonality_beta)?;
        }
        if !wm.is_finite() {
            return Err(Error::Diverged(format!("map became non-finite at step {step}")));
        }
        map = LinearMap::new(wm)?;

        if (step + 1) % config.log_every == 0 || step + 1 == config.steps {
            let acc = match (&held_s, &held_t) {
                (Some(s), Some(t)) => accuracy(&disc, &map, s, t)?,
                _ => f64::NAN,
            };
            log::debug!(
                "adversarial step {}: D {last_d:.4} G {last_g:.4} acc {acc:.3}",
                step + 1
            );
            checkpoints.push(TrainingCheckpoint {
                step: step + 1,
                discriminator_loss: last_d,
                generator_loss: last_g,
                discriminator_accuracy: acc,
            });
        }
    }
    Ok(AdversarialOutcome {
        map,
        discriminator: disc,
        checkpoints,
    })
}


#[cfg(test)]
mod trend {
    use super::*;
    use crate::alignment::translation_precision;
    use crate::embeddings::Dictionary;

    /// Clustered unit rows in low dimension, so the point cloud has
    /// structure a distribution-matching adversary can lock onto.
    fn clustered(n: usize, d: usize, clusters: usize, rng: &mut Rng) -> Tensor {
        let centers = Tensor::randn(&[clusters, d], 1.0, rng);
        let mut rows = Vec::with_capacity(n);
        for i in 0..n {
            let c = centers.row(i % clusters);
            let jitter = Tensor::randn(&[d], 0.25, rng);
            rows.push(c.iter().zip(jitter.data()).map(|(a, b)| a + b).collect::<Vec<_>>());
        }
        Tensor::from_rows(&rows).unwrap()
    }

    #[test]
    fn adversarial_phase_beats_chance_on_rotated_clusters() {
        // Planar task: in higher dimensions with this budget the adversary
        // often settles in a wrong local optimum of the rotation group.
        let (d, n) = (2, 300);
        let mut rng = SeedStream::new(11).fork("task");
        let words: Vec<String> = (0..n).map(|i| format!("w{i}")).collect();
        let speech = EmbeddingTable::new(
            words.clone(),
            EmbeddingTable::rank_frequencies(n),
            clustered(n, d, 6, &mut rng),
        )
        .unwrap()
        .normalize()
        .unwrap();
        let r = crate::alignment::tests::random_rotation(d, 12);
        let noise = Tensor::randn(&[n, d], 0.01, &mut rng);
        let t = speech
            .matrix()
            .matmul(&r.transpose().unwrap())
            .unwrap()
            .add(&noise)
            .unwrap();
        let text = EmbeddingTable::new(words, EmbeddingTable::rank_frequencies(n), t)
            .unwrap()
            .normalize()
            .unwrap();
        let gold = Dictionary::shared_tokens(&speech, &text);
        let config = AlignmentConfig {
            steps: 2000,
            hidden: 64,
            log_every: 100,
            seed: 3,
            ..AlignmentConfig::default()
        };
        let out = adversarial_train(&speech, &text, &config).unwrap();
        let p = translation_precision(&out.map, &speech, &text, &gold, 1).unwrap();
        assert!(p > 1.0 / n as f64, "p@1 {p}");

        let first = out.checkpoints.first().unwrap().discriminator_accuracy;
        let last = out.checkpoints.last().unwrap().discriminator_accuracy;
        assert!(last < first, "accuracy {first} -> {last}");
    }

    #[test]
    fn training_is_deterministic() {
        let mut rng = SeedStream::new(5).fork("task");
        let words: Vec<String> = (0..40).map(|i| format!("w{i}")).collect();
        let s = EmbeddingTable::new(
            words.clone(),
            EmbeddingTable::rank_frequencies(40),
            clustered(40, 3, 4, &mut rng),
        )
        .unwrap();
        let t = EmbeddingTable::new(
            words,
            EmbeddingTable::rank_frequencies(40),
            clustered(40, 3, 4, &mut rng),
        )
        .unwrap();
        let config = AlignmentConfig {
            steps: 20,
            hidden: 16,
            log_every: 5,
            ..AlignmentConfig::default()
        };
        let a = adversarial_train(&s, &t, &config).unwrap();
        let b = adversarial_train(&s, &t, &config).unwrap();
        assert_eq!(a.map, b.map);
        assert_eq!(a.checkpoints, b.checkpoints);
        assert_eq!(a.checkpoints.len(), 4);
    }
}
