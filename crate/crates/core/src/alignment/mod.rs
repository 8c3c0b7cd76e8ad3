//! Speech-to-text embedding alignment.
//!
//! A linear map `W` (text dim × speech dim) is first learned adversarially
//! against a discriminator, then refined in closed form by orthogonal
//! Procrustes over a frequent-word dictionary. Embeddings are rows
//! throughout; the map is applied as `s · Wᵀ`.

mod adversarial;
mod procrustes;
pub mod svd;

pub use adversarial::{
    adversarial_train, discriminator_loss, generator_loss, AdversarialOutcome, AlignmentConfig, Discriminator,
    TrainingCheckpoint,
};
pub use procrustes::{procrustes_objective, procrustes_refine, refine_from_frequent};
pub use svd::{orthogonality_defect, svd, Svd};

use std::io::Write;
use std::path::Path;

use crate::embeddings::{Dictionary, EmbeddingTable};
use crate::error::{Error, Result};
use crate::tensor::{kernels, Tensor};

/// The alignment matrix `W ∈ ℝ^{d_t × d_s}`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearMap {
    w: Tensor,
}

impl LinearMap {
    pub fn new(w: Tensor) -> Result<Self> {
        if w.rank() != 2 {
            return Err(Error::Argument(format!("map must be a matrix, got {:?}", w.shape())));
        }
        w.require_finite("LinearMap")?;
        Ok(Self { w })
    }

    /// Identity, zero-padded when the dimensions differ.
    pub fn identity(text_dim: usize, speech_dim: usize) -> Self {
        let mut w = Tensor::zeros(&[text_dim, speech_dim]);
        for i in 0..text_dim.min(speech_dim) {
            w.set(i, i, 1.0);
        }
        Self { w }
    }

    pub fn matrix(&self) -> &Tensor {
        &self.w
    }

    pub fn into_matrix(self) -> Tensor {
        self.w
    }

    pub fn text_dim(&self) -> usize {
        self.w.rows()
    }

    pub fn speech_dim(&self) -> usize {
        self.w.cols()
    }

    pub fn is_square(&self) -> bool {
        self.text_dim() == self.speech_dim()
    }

    /// Map a single speech vector: `W · s`.
    pub fn apply(&self, s: &[f64]) -> Vec<f64> {
        (0..self.text_dim()).map(|i| kernels::dot(self.w.row(i), s)).collect()
    }

    /// Map rows: `S · Wᵀ`.
    pub fn apply_rows(&self, rows: &Tensor) -> Result<Tensor> {
        if rows.cols() != self.speech_dim() {
            return Err(Error::shape("LinearMap::apply_rows", rows.shape(), self.w.shape()));
        }
        rows.matmul(&self.w.transpose()?)
    }

    /// `‖WᵀW − I‖_max`.
    pub fn orthogonality_defect(&self) -> f64 {
        orthogonality_defect(&self.w)
    }

    /// Text format: a `"<d_t> <d_s>"` header then one row per line.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = Vec::new();
        self.write(&mut out).map_err(|e| Error::io(path, e))?;
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn write(&self, w: &mut impl Write) -> std::io::Result<()> {
        writeln!(w, "{} {}", self.text_dim(), self.speech_dim())?;
        for i in 0..self.text_dim() {
            let row: Vec<String> = self.w.row(i).iter().map(|v| v.to_string()).collect();
            writeln!(w, "{}", row.join(" "))?;
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let err = |line: usize, message: String| Error::Parse {
            path: origin.to_path_buf(),
            line,
            message,
        };
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines.next().ok_or_else(|| err(1, "empty map file".into()))?;
        let dims: Vec<usize> = header
            .split_whitespace()
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| err(1, "header must be \"<d_t> <d_s>\"".into()))?;
        let [rows, cols] = dims[..] else {
            return Err(err(1, "header must be \"<d_t> <d_s>\"".into()));
        };
        let mut data = Vec::with_capacity(rows * cols);
        let mut seen = 0;
        for (i, line) in lines {
            let before = data.len();
            for field in line.split_whitespace() {
                data.push(
                    field
                        .parse::<f64>()
                        .map_err(|_| err(i + 1, format!("non-numeric field {field:?}")))?,
                );
            }
            if data.len() - before != cols {
                return Err(err(i + 1, format!("expected {cols} values")));
            }
            seen += 1;
        }
        if seen != rows {
            return Err(err(rows + 2, format!("expected {rows} rows, found {seen}")));
        }
        Self::new(Tensor::new(vec![rows, cols], data)?)
    }
}

/// Fraction of gold pairs whose mapped speech vector has the gold text
/// vector among its `k_nn` nearest text rows by cosine similarity.
pub fn translation_precision(
    map: &LinearMap,
    speech: &EmbeddingTable,
    text: &EmbeddingTable,
    gold: &Dictionary,
    k_nn: usize,
) -> Result<f64> {
    if gold.is_empty() {
        return Err(Error::Argument("gold dictionary is empty".into()));
    }
    if k_nn == 0 {
        return Err(Error::Argument("k_nn must be ≥ 1".into()));
    }
    let text_norms: Vec<f64> = (0..text.len())
        .map(|j| kernels::dot(text.row(j), text.row(j)).sqrt().max(1e-300))
        .collect();
    let mut hits = 0usize;
    for &(s, t) in gold.pairs() {
        let mapped = map.apply(speech.row(s));
        let scores: Vec<f64> = (0..text.len())
            .map(|j| kernels::dot(&mapped, text.row(j)) / text_norms[j])
            .collect();
        let target = scores[t];
        let better = scores.iter().filter(|&&v| v > target).count();
        if better < k_nn {
            hits += 1;
        }
    }
    Ok(hits as f64 / gold.len() as f64)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::rng::SeedStream;

    pub(crate) fn random_rotation(d: usize, seed: u64) -> Tensor {
        let mut rng = SeedStream::new(seed).fork("rotation");
        let g = Tensor::randn(&[d, d], 1.0, &mut rng);
        let s = svd(&g).unwrap();
        s.u.matmul(&s.v.transpose().unwrap()).unwrap()
    }

    #[test]
    fn identity_init_pads_with_zeros() {
        let m = LinearMap::identity(3, 2);
        assert_eq!(m.matrix().data(), &[1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn map_file_round_trip_is_exact() {
        let w = random_rotation(5, 3);
        let m = LinearMap::new(w).unwrap();
        let mut buf = Vec::new();
        m.write(&mut buf).unwrap();
        let back = LinearMap::parse(std::str::from_utf8(&buf).unwrap(), Path::new("mem")).unwrap();
        assert_eq!(back, m);
        assert!(LinearMap::parse("2 2\n1 0\n", Path::new("mem")).is_err());
    }

    fn tables(rows: &Tensor, mapped: &Tensor) -> (EmbeddingTable, EmbeddingTable) {
        let n = rows.rows();
        let words: Vec<String> = (0..n).map(|i| format!("w{i}")).collect();
        (
            EmbeddingTable::new(words.clone(), EmbeddingTable::rank_frequencies(n), rows.clone()).unwrap(),
            EmbeddingTable::new(words, EmbeddingTable::rank_frequencies(n), mapped.clone()).unwrap(),
        )
    }

    #[test]
    fn exact_rotation_has_perfect_precision() {
        let r = random_rotation(6, 1);
        let mut rng = SeedStream::new(2).fork("emb");
        let s = Tensor::randn(&[40, 6], 1.0, &mut rng);
        let t = s.matmul(&r.transpose().unwrap()).unwrap();
        let (speech, text) = tables(&s, &t);
        let gold = Dictionary::shared_tokens(&speech, &text);
        let map = LinearMap::new(r).unwrap();
        assert_eq!(translation_precision(&map, &speech, &text, &gold, 1).unwrap(), 1.0);
    }

    #[test]
    fn precision_at_five_dominates_precision_at_one() {
        let mut rng = SeedStream::new(4).fork("emb");
        let s = Tensor::randn(&[60, 4], 1.0, &mut rng);
        let t = Tensor::randn(&[60, 4], 1.0, &mut rng);
        let (speech, text) = tables(&s, &t);
        let gold = Dictionary::shared_tokens(&speech, &text);
        let map = LinearMap::new(Tensor::randn(&[4, 4], 1.0, &mut rng)).unwrap();
        let p1 = translation_precision(&map, &speech, &text, &gold, 1).unwrap();
        let p5 = translation_precision(&map, &speech, &text, &gold, 5).unwrap();
        assert!(p5 >= p1);
    }

    #[test]
    fn random_map_is_near_chance() {
        // Chance estimate over 10 seeds: mean hit rate ≈ k/|V|, with the
        // binomial standard error of the 10-seed average as tolerance.
        let (n, d, k) = (300, 20, 5);
        let mut rates = Vec::new();
        for seed in 0..10 {
            let mut rng = SeedStream::new(100 + seed).fork("chance");
            let s = Tensor::randn(&[n, d], 1.0, &mut rng);
            let t = Tensor::randn(&[n, d], 1.0, &mut rng);
            let (speech, text) = tables(&s, &t);
            let gold = Dictionary::shared_tokens(&speech, &text);
            let map = LinearMap::new(Tensor::randn(&[d, d], 1.0, &mut rng)).unwrap();
            rates.push(translation_precision(&map, &speech, &text, &gold, k).unwrap());
        }
        let mean = rates.iter().sum::<f64>() / rates.len() as f64;
        let p = k as f64 / n as f64;
        let std = (p * (1.0 - p) / (n as f64 * rates.len() as f64)).sqrt();
        assert!((mean - p).abs() < 3.0 * std, "mean {mean} vs chance {p} ± {std}");
    }
}
