//! One-sided (Hestenes) Jacobi SVD for small dense matrices.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAX_SWEEPS: usize = 100;
const TOLERANCE: f64 = 1e-15;

/// Full decomposition `M = U · diag(Σ) · Vᵀ`.
#[derive(Debug, Clone)]
pub struct Svd {
    /// `p × p`, orthogonal.
    pub u: Tensor,
    /// `min(p, q)` values, nonnegative and descending.
    pub sigma: Vec<f64>,
    /// `q × q`, orthogonal.
    pub v: Tensor,
}

impl Svd {
    /// `U[:, :r] · diag(Σ) · V[:, :r]ᵀ`.
    pub fn reconstruct(&self) -> Tensor {
        let (p, q, r) = (self.u.rows(), self.v.rows(), self.sigma.len());
        let mut out = Tensor::zeros(&[p, q]);
        for i in 0..p {
            for j in 0..q {
                let mut acc = 0.0;
                for k in 0..r {
                    acc += self.u.at(i, k) * self.sigma[k] * self.v.at(j, k);
                }
                out.set(i, j, acc);
            }
        }
        out
    }
}

pub fn svd(m: &Tensor) -> Result<Svd> {
    if m.rank() != 2 {
        return Err(Error::Argument(format!("svd expects a matrix, got {:?}", m.shape())));
    }
    m.require_finite("svd")?;
    let (p, q) = (m.rows(), m.cols());
    if p >= q {
        let (u, sigma, v) = jacobi_tall(m)?;
        Ok(Svd { u, sigma, v })
    } else {
        // Mᵀ = U' Σ V'ᵀ  ⇒  M = V' Σ U'ᵀ.
        let (u, sigma, v) = jacobi_tall(&m.transpose()?)?;
        Ok(Svd { u: v, sigma, v: u })
    }
}

/// SVD of a `p × q` matrix with `p ≥ q`.
fn jacobi_tall(m: &Tensor) -> Result<(Tensor, Vec<f64>, Tensor)> {
    let (p, q) = (m.rows(), m.cols());
    // Column-major working copies.
    let mut a: Vec<Vec<f64>> = (0..q).map(|j| m.column(j)).collect();
    let mut v: Vec<Vec<f64>> = (0..q).map(|j| (0..q).map(|i| f64::from(i == j)).collect()).collect();

    // Columns below this squared norm are numerically null; rotating them
    // against each other only churns rounding noise.
    let floor = a.iter().map(|c| norm_sq(c)).sum::<f64>() * 1e-32;
    let mut converged = false;
    let mut residual = 0.0;
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        residual = 0.0f64;
        for i in 0..q {
            for j in i + 1..q {
                let alpha = norm_sq(&a[i]);
                let beta = norm_sq(&a[j]);
                let gamma = dot(&a[i], &a[j]);
                if alpha <= floor || beta <= floor {
                    continue;
                }
                let coupling = gamma.abs() / (alpha * beta).sqrt();
                residual = residual.max(coupling);
                if coupling <= TOLERANCE {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut a, i, j, c, s);
                rotate(&mut v, i, j, c, s);
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::Numeric {
            message: format!("Jacobi SVD did not converge in {MAX_SWEEPS} sweeps"),
            residual,
        });
    }

    let mut order: Vec<usize> = (0..q).collect();
    let norms: Vec<f64> = a.iter().map(|c| norm_sq(c).sqrt()).collect();
    order.sort_by(|&x, &y| norms[y].total_cmp(&norms[x]));
    let sigma: Vec<f64> = order.iter().map(|&k| norms[k]).collect();
    let smax = sigma.first().copied().unwrap_or(0.0);
    let null_threshold = smax * 1e-13;

    let mut u_cols: Vec<Vec<f64>> = Vec::with_capacity(p);
    for (&k, &s) in order.iter().zip(&sigma) {
        if s > null_threshold && s > 0.0 {
            u_cols.push(a[k].iter().map(|x| x / s).collect());
        } else {
            break;
        }
    }
    complete_basis(&mut u_cols, p);

    let mut u = Tensor::zeros(&[p, p]);
    for (j, col) in u_cols.iter().enumerate() {
        for (i, &x) in col.iter().enumerate() {
            u.set(i, j, x);
        }
    }
    let mut vt = Tensor::zeros(&[q, q]);
    for (j, &k) in order.iter().enumerate() {
        for i in 0..q {
            vt.set(i, j, v[k][i]);
        }
    }
    Ok((u, sigma, vt))
}

fn rotate(cols: &mut [Vec<f64>], i: usize, j: usize, c: f64, s: f64) {
    let (lo, hi) = cols.split_at_mut(j);
    let (ci, cj) = (&mut lo[i], &mut hi[0]);
    for (x, y) in ci.iter_mut().zip(cj.iter_mut()) {
        let (xi, yj) = (*x, *y);
        *x = c * xi - s * yj;
        *y = s * xi + c * yj;
    }
}

/// Extend orthonormal columns to a basis of ℝⁿ with twice-orthogonalized
/// standard basis vectors.
fn complete_basis(cols: &mut Vec<Vec<f64>>, n: usize) {
    let project = |cols: &[Vec<f64>], e: usize| {
        let mut x = vec![0.0; n];
        x[e] = 1.0;
        for _ in 0..2 {
            for c in cols {
                let d = dot(c, &x);
                for (xi, ci) in x.iter_mut().zip(c) {
                    *xi -= d * ci;
                }
            }
        }
        let norm = norm_sq(&x).sqrt();
        (norm, x)
    };
    // A rejected candidate only loses mass as columns are added, so the
    // sequential scan never needs to revisit it.
    let mut next = 0;
    while cols.len() < n {
        let mut chosen = None;
        while next < n {
            let (norm, x) = project(cols, next);
            next += 1;
            if norm > 0.5 {
                chosen = Some((norm, x));
                break;
            }
        }
        let (norm, x) = match chosen {
            Some(c) => c,
            None => (0..n)
                .map(|e| project(cols, e))
                .max_by(|a, b| a.0.total_cmp(&b.0))
                .expect("n > 0"),
        };
        cols.push(x.into_iter().map(|xi| xi / norm).collect());
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm_sq(a: &[f64]) -> f64 {
    dot(a, a)
}

/// `‖QᵀQ − I‖_max`.
pub fn orthogonality_defect(q: &Tensor) -> f64 {
    let (r, c) = (q.rows(), q.cols());
    let mut worst: f64 = 0.0;
    for i in 0..c {
        for j in 0..c {
            let s: f64 = (0..r).map(|k| q.at(k, i) * q.at(k, j)).sum();
            worst = worst.max((s - f64::from(i == j)).abs());
        }
    }
    worst
}
