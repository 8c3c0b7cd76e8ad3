//! Feature fusion, the recurrent regressor and the concordance loss.
//!
//! All frame-level operations work on row matrices (`T × d`), so a whole
//! sequence is fused in one pass.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{BoundParams, ParamSet, Tape, Tensor, Var};

pub const AFFECT_DIMS: [&str; 3] = ["arousal", "valence", "liking"];

/// Denominators below this make the concordance undefined.
const CCC_DEGENERATE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    Concat,
    Disentangled,
}

impl std::str::FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "concat" => Ok(Self::Concat),
            "disentangled" => Ok(Self::Disentangled),
            other => Err(Error::Argument(format!(
                "unknown fusion mode {other:?} (expected concat or disentangled)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub fusion: FusionMode,
    /// Shared projection width `d_u`.
    pub shared_dim: usize,
    pub hidden: usize,
    /// One query for every attention branch instead of one per branch.
    pub shared_query: bool,
    /// Dropout on the fused frame features.
    pub fusion_dropout: f64,
    /// Dropout on the recurrent outputs before the head.
    pub lstm_dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            fusion: FusionMode::Disentangled,
            shared_dim: 128,
            hidden: 128,
            shared_query: false,
            fusion_dropout: 0.5,
            lstm_dropout: 0.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.shared_dim == 0 || self.hidden == 0 {
            return Err(Error::Argument("shared_dim and hidden must be positive".into()));
        }
        for (name, p) in [
            ("fusion_dropout", self.fusion_dropout),
            ("lstm_dropout", self.lstm_dropout),
        ] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::Argument(format!("{name} {p} outside [0, 1)")));
            }
        }
        Ok(())
    }
}

/// `[x_s, x_p]` per frame.
pub fn concat_fuse<'t>(x_s: Var<'t>, x_p: Var<'t>) -> Result<Var<'t>> {
    let axis = x_s.shape().len() - 1;
    Var::concat(&[x_s, x_p], axis)
}

/// Scaled dot-product attention over two branches. Rows of `u` and `w`
/// are frames; returns the fused rows and the `T × 2` weights.
pub fn attention_pair_weights<'t>(u: Var<'t>, w: Var<'t>, q_u: Var<'t>, q_w: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
    let (su, sw) = (u.shape(), w.shape());
    if su != sw || su.len() != 2 {
        return Err(Error::shape("attention_pair", &su, &sw));
    }
    let d = su[1];
    for q in [q_u, q_w] {
        if q.shape() != [d] {
            return Err(Error::shape("attention_pair query", &q.shape(), &[d]));
        }
    }
    let scale = 1.0 / (d as f64).sqrt();
    let lu = u.matmul(q_u.reshape(&[d, 1])?)?.scale(scale)?;
    let lw = w.matmul(q_w.reshape(&[d, 1])?)?.scale(scale)?;
    let alpha = Var::concat(&[lu, lw], 1)?.softmax()?;
    let a1 = alpha.narrow(1, 0, 1)?;
    let a2 = alpha.narrow(1, 1, 1)?;
    let out = a1.mul(u)?.add(a2.mul(w)?)?;
    Ok((out, alpha))
}

/// `α₁u + α₂w` with `α = softmax(u·q_u/√d, w·q_w/√d)`. Accepts single
/// vectors or `T × d` row matrices.
pub fn attention_pair<'t>(u: Var<'t>, w: Var<'t>, q_u: Var<'t>, q_w: Var<'t>) -> Result<Var<'t>> {
    let shape = u.shape();
    if shape.len() == 1 {
        if w.shape() != shape {
            return Err(Error::shape("attention_pair", &shape, &w.shape()));
        }
        let d = shape[0];
        let (out, _) = attention_pair_weights(u.reshape(&[1, d])?, w.reshape(&[1, d])?, q_u, q_w)?;
        return out.reshape(&[d]);
    }
    Ok(attention_pair_weights(u, w, q_u, q_w)?.0)
}

/// Handles to every fusion parameter on one tape.
#[derive(Debug, Clone, Copy)]
pub struct FusionVars<'t> {
    pub w_s: Var<'t>,
    pub b_s: Var<'t>,
    pub w_p: Var<'t>,
    pub b_p: Var<'t>,
    pub w_a: Var<'t>,
    pub b_a: Var<'t>,
    pub w_v: Var<'t>,
    pub b_v: Var<'t>,
    pub w_l: Var<'t>,
    pub b_l: Var<'t>,
    /// Queries in order: (semantic, paralinguistic), (arousal, liking),
    /// (arousal–liking mix, valence).
    pub queries: [Var<'t>; 6],
}

/// Attention weights from the three layers of a disentangled fusion.
#[derive(Debug, Clone)]
pub struct FusionTrace {
    pub alphas: [Tensor; 3],
}

/// Project both feature sets to the shared space, attend between them,
/// split into arousal / valence / liking projections, then recombine.
pub fn disentangled_fuse_traced<'t>(x_s: Var<'t>, x_p: Var<'t>, p: &FusionVars<'t>) -> Result<(Var<'t>, FusionTrace)> {
    let xs = x_s.matmul(p.w_s)?.add(p.b_s)?;
    let xp = x_p.matmul(p.w_p)?.add(p.b_p)?;
    let q = &p.queries;
    let (x_sp, a0) = attention_pair_weights(xs, xp, q[0], q[1])?;
    let a = x_sp.matmul(p.w_a)?.add(p.b_a)?;
    let v = x_sp.matmul(p.w_v)?.add(p.b_v)?;
    let l = x_sp.matmul(p.w_l)?.add(p.b_l)?;
    let (z, a1) = attention_pair_weights(a, l, q[2], q[3])?;
    let (fused, a2) = attention_pair_weights(z, v, q[4], q[5])?;
    let trace = FusionTrace {
        alphas: [(*a0.value()).clone(), (*a1.value()).clone(), (*a2.value()).clone()],
    };
    Ok((fused, trace))
}

pub fn disentangled_fuse<'t>(x_s: Var<'t>, x_p: Var<'t>, p: &FusionVars<'t>) -> Result<Var<'t>> {
    Ok(disentangled_fuse_traced(x_s, x_p, p)?.0)
}

/// Fusion, a one-layer LSTM and an affine head to three affect outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct AffectModel {
    config: ModelConfig,
    semantic_dim: usize,
    paralinguistic_dim: usize,
    params: ParamSet,
}

const QUERY_NAMES: [&str; 6] = [
    "fusion.q_s",
    "fusion.q_p",
    "fusion.q_a",
    "fusion.q_l",
    "fusion.q_z",
    "fusion.q_v",
];

fn xavier(rows: usize, cols: usize, rng: &mut Rng) -> Tensor {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    Tensor::uniform(&[rows, cols], bound, rng)
}

impl AffectModel {
    pub fn new(config: ModelConfig, semantic_dim: usize, paralinguistic_dim: usize, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::new();
        let du = config.shared_dim;
        let lstm_in = match config.fusion {
            FusionMode::Concat => semantic_dim + paralinguistic_dim,
            FusionMode::Disentangled => {
                params.insert("fusion.w_s", xavier(semantic_dim, du, rng))?;
                params.insert("fusion.b_s", Tensor::zeros(&[du]))?;
                params.insert("fusion.w_p", xavier(paralinguistic_dim, du, rng))?;
                params.insert("fusion.b_p", Tensor::zeros(&[du]))?;
                for k in ["a", "v", "l"] {
                    params.insert(format!("fusion.w_{k}"), xavier(du, du, rng))?;
                    params.insert(format!("fusion.b_{k}"), Tensor::zeros(&[du]))?;
                }
                if config.shared_query {
                    params.insert("fusion.q", Tensor::zeros(&[du]))?;
                } else {
                    for name in QUERY_NAMES {
                        params.insert(name, Tensor::zeros(&[du]))?;
                    }
                }
                du
            }
        };
        let h = config.hidden;
        let bound = 1.0 / (h as f64).sqrt();
        params.insert("lstm.w_ih", Tensor::uniform(&[lstm_in, 4 * h], bound, rng))?;
        params.insert("lstm.w_hh", Tensor::uniform(&[h, 4 * h], bound, rng))?;
        let mut bias = Tensor::zeros(&[4 * h]);
        // Gate order i, f, g, o: open the forget gate at the start.
        bias.data_mut()[h..2 * h].fill(1.0);
        params.insert("lstm.bias", bias)?;
        params.insert("head.w", Tensor::uniform(&[h, 3], bound, rng))?;
        params.insert("head.b", Tensor::zeros(&[3]))?;
        Ok(Self {
            config,
            semantic_dim,
            paralinguistic_dim,
            params,
        })
    }

    /// Rebuild around saved parameters, checking names and shapes against
    /// a fresh model.
    pub fn from_params(
        config: ModelConfig,
        semantic_dim: usize,
        paralinguistic_dim: usize,
        params: ParamSet,
    ) -> Result<Self> {
        let mut scratch = crate::rng::SeedStream::new(0).fork("shape-template");
        let template = Self::new(config.clone(), semantic_dim, paralinguistic_dim, &mut scratch)?;
        if template.params.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "model expects {} parameters, found {}",
                template.params.len(),
                params.len()
            )));
        }
        for (name, t) in template.params.iter() {
            match params.get(name) {
                Some(p) if p.shape() == t.shape() => {}
                Some(p) => return Err(Error::shape("AffectModel parameter", p.shape(), t.shape())),
                None => return Err(Error::Checkpoint(format!("missing parameter {name}"))),
            }
        }
        Ok(Self {
            config,
            semantic_dim,
            paralinguistic_dim,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn semantic_dim(&self) -> usize {
        self.semantic_dim
    }

    pub fn paralinguistic_dim(&self) -> usize {
        self.paralinguistic_dim
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn fusion_vars<'t>(&self, bound: &BoundParams<'t>) -> Option<FusionVars<'t>> {
        if self.config.fusion != FusionMode::Disentangled {
            return None;
        }
        let queries = if self.config.shared_query {
            [bound.var("fusion.q"); 6]
        } else {
            QUERY_NAMES.map(|n| bound.var(n))
        };
        Some(FusionVars {
            w_s: bound.var("fusion.w_s"),
            b_s: bound.var("fusion.b_s"),
            w_p: bound.var("fusion.w_p"),
            b_p: bound.var("fusion.b_p"),
            w_a: bound.var("fusion.w_a"),
            b_a: bound.var("fusion.b_a"),
            w_v: bound.var("fusion.w_v"),
            b_v: bound.var("fusion.b_v"),
            w_l: bound.var("fusion.w_l"),
            b_l: bound.var("fusion.b_l"),
            queries,
        })
    }

    /// `T × d_s` semantic and `T × d_p` paralinguistic frames to `T × 3`.
    pub fn forward<'t>(
        &self,
        bound: &BoundParams<'t>,
        semantic: Var<'t>,
        paralinguistic: Var<'t>,
        train: bool,
        rng: &mut Rng,
    ) -> Result<Var<'t>> {
        let (ss, sp) = (semantic.shape(), paralinguistic.shape());
        if ss.len() != 2
            || sp.len() != 2
            || ss[0] != sp[0]
            || ss[1] != self.semantic_dim
            || sp[1] != self.paralinguistic_dim
        {
            return Err(Error::shape("AffectModel::forward", &ss, &sp));
        }
        let fused = match self.fusion_vars(bound) {
            Some(vars) => disentangled_fuse(semantic, paralinguistic, &vars)?,
            None => concat_fuse(semantic, paralinguistic)?,
        };
        let fused = fused.dropout(self.config.fusion_dropout, train, rng)?;
        let h = fused.lstm(bound.var("lstm.w_ih"), bound.var("lstm.w_hh"), bound.var("lstm.bias"))?;
        let h = h.dropout(self.config.lstm_dropout, train, rng)?;
        h.matmul(bound.var("head.w"))?.add(bound.var("head.b"))
    }

    /// Evaluation-mode predictions.
    pub fn predict(&self, semantic: &Tensor, paralinguistic: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let bound = self.params.bind(&tape, |_| false);
        let mut unused = crate::rng::SeedStream::new(0).fork("unused");
        let out = self.forward(
            &bound,
            tape.constant(semantic.clone()),
            tape.constant(paralinguistic.clone()),
            false,
            &mut unused,
        )?;
        Ok((*out.value()).clone())
    }
}

/// Concordance correlation with population moments.
pub fn ccc(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Argument(format!(
            "series lengths differ: {} vs {}",
            x.len(),
            y.len()
        )));
    }
    if x.len() < 2 {
        return Err(Error::Argument("concordance needs at least 2 frames".into()));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut vx, mut vy, mut cov) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        vx += dx * dx;
        vy += dy * dy;
        cov += dx * dy;
    }
    let (vx, vy, cov) = (vx / n, vy / n, cov / n);
    let denom = vx + vy + (mx - my) * (mx - my);
    if denom < CCC_DEGENERATE {
        return Err(Error::Degenerate(format!(
            "concordance denominator {denom:.3e} below {CCC_DEGENERATE:e}"
        )));
    }
    Ok(2.0 * cov / denom)
}

/// Differentiable concordance of one `N × 1` column against gold values.
fn ccc_column<'t>(pred: Var<'t>, gold: &[f64], dim: &str) -> Result<Var<'t>> {
    let tape = pred.tape();
    let n = gold.len() as f64;
    let my = gold.iter().sum::<f64>() / n;
    let centered: Vec<f64> = gold.iter().map(|g| g - my).collect();
    let vy = centered.iter().map(|v| v * v).sum::<f64>() / n;

    let mx = pred.mean()?;
    let dx = pred.sub(mx)?;
    let dy = tape.constant(Tensor::new(vec![gold.len(), 1], centered)?);
    let cov = dx.mul(dy)?.mean()?;
    let vx = dx.square()?.mean()?;
    let gap = mx.add_scalar(-my)?.square()?;
    let denom = vx.add(gap)?.add_scalar(vy)?;
    if denom.value().item() < CCC_DEGENERATE {
        return Err(Error::Degenerate(format!("{dim}: concordance denominator vanishes")));
    }
    cov.scale(2.0)?.div(denom)
}

/// Mean over the three dimensions of `1 − ccc`, on `N × 3` predictions.
pub fn ccc_loss<'t>(pred: Var<'t>, gold: &Tensor) -> Result<Var<'t>> {
    let shape = pred.shape();
    if shape.len() != 2 || shape[1] != 3 || gold.shape() != shape.as_slice() {
        return Err(Error::shape("ccc_loss", &shape, gold.shape()));
    }
    if shape[0] < 2 {
        return Err(Error::Argument("ccc_loss needs at least 2 frames".into()));
    }
    let mut total: Option<Var<'t>> = None;
    for (d, name) in AFFECT_DIMS.iter().enumerate() {
        let rho = ccc_column(pred.narrow(1, d, 1)?, &gold.column(d), name)?;
        let term = rho.scale(-1.0)?.add_scalar(1.0)?;
        total = Some(match total {
            Some(t) => t.add(term)?,
            None => term,
        });
    }
    total.expect("three dimensions").scale(1.0 / 3.0)
}

/// Per-dimension concordance of `N × 3` predictions against gold.
pub fn ccc_per_dimension(pred: &Tensor, gold: &Tensor) -> [Result<f64>; 3] {
    [0, 1, 2].map(|d| {
        if pred.shape() != gold.shape() || pred.rank() != 2 || pred.cols() != 3 {
            return Err(Error::shape("ccc_per_dimension", pred.shape(), gold.shape()));
        }
        ccc(&pred.column(d), &gold.column(d)).map_err(|e| match e {
            Error::Degenerate(m) => Error::Degenerate(format!("{}: {m}", AFFECT_DIMS[d])),
            other => other,
        })
    })
}
