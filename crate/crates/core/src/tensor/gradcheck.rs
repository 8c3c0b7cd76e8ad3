//! Central finite-difference gradient checking.
//!
//! The numeric side only ever evaluates forward passes, so it shares no
//! code path with the analytic backward rules it checks.

use super::{Tape, Tensor, Var};
use crate::error::Result;
use crate::rng::Rng;

/// Default step for central differences in f64.
pub const DEFAULT_STEP: f64 = 1e-5;

/// `‖a − n‖ / max(‖a‖, ‖n‖)`, zero when both vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n) * (a - n))
        .sum::<f64>()
        .sqrt();
    let na = analytic.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|v| v * v).sum::<f64>().sqrt();
    let denom = na.max(nn);
    if denom < 1e-12 {
        diff
    } else {
        diff / denom
    }
}

/// Compare the tape gradient of `Σ R ⊙ f(inputs)` against central
/// differences, where `R` is a fixed random projection drawn from `rng`.
/// Only inputs flagged in `differentiate` are perturbed. Returns the worst
/// relative error across those inputs.
pub fn check<F>(f: F, inputs: &[Tensor], differentiate: &[bool], step: f64, rng: &mut Rng) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let projection = {
        let tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let shape = f(&tape, &vars)?.shape();
        Tensor::randn(&shape, 1.0, rng)
    };

    let evaluate = |values: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&tape, &vars)?.value();
        Ok(out.data().iter().zip(projection.data()).map(|(a, b)| a * b).sum())
    };

    let tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .zip(differentiate)
        .map(|(t, &d)| {
            if d {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        })
        .collect();
    let out = f(&tape, &vars)?;
    let r = tape.constant(projection.clone());
    let loss = out.mul(r)?.sum()?;
    let grads = tape.backward(loss)?;

    let mut worst: f64 = 0.0;
    let mut values = inputs.to_vec();
    for (k, &d) in differentiate.iter().enumerate() {
        if !d {
            continue;
        }
        let analytic = grads.wrt(vars[k]);
        let mut numeric = vec![0.0; values[k].numel()];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let orig = values[k].data()[i];
            values[k].data_mut()[i] = orig + step;
            let plus = evaluate(&values)?;
            values[k].data_mut()[i] = orig - step;
            let minus = evaluate(&values)?;
            values[k].data_mut()[i] = orig;
            *slot = (plus - minus) / (2.0 * step);
        }
        worst = worst.max(relative_error(analytic.data(), &numeric));
    }
    Ok(worst)
}

/// Outcome of checking one operation over many random cases.
#[derive(Debug, Clone, serde::Serialize)]
pub struct CheckReport {
    pub name: String,
    pub cases: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}
