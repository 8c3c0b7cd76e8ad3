//! Dense f64 tensors with a reverse-mode autodiff tape.
//!
//! [`Tensor`] is a plain row-major value. Differentiable computation goes
//! through a [`Tape`], whose [`Var`] handles record every operation so that
//! [`Tape::backward`] can replay them in reverse.

pub mod gradcheck;
pub mod kernels;
mod optim;
mod params;
mod tape;

pub use optim::{adam_step, clip_grad_norm, global_norm, sgd_step, AdamState};
pub use params::{BoundParams, ParamSet};
pub use tape::{Gradients, Padding, Tape, Var};

use crate::error::{Error, Result};
use rand_distr::{Distribution, StandardNormal};

/// Dense row-major tensor of 64-bit floats.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::Argument(format!(
                "tensor dimensions must be positive, got {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape("Tensor::new", &shape, &[data.len()]));
        }
        Ok(Self { shape, data })
    }

    /// Constructor for callers that have already validated the layout.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::from_parts(shape.to_vec(), vec![0.0; shape.iter().product()])
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self::from_parts(shape.to_vec(), vec![value; shape.iter().product()])
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_parts(vec![1], vec![value])
    }

    /// Rank-1 tensor. Panics on empty input.
    pub fn vector(data: Vec<f64>) -> Self {
        assert!(!data.is_empty(), "empty vector");
        Self::from_parts(vec![data.len()], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    /// Build a matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::Argument("ragged rows".into()));
        }
        Self::new(vec![r, c], rows.concat())
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn randn(shape: &[usize], std: f64, rng: &mut impl rand::Rng) -> Self {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| std * Distribution::<f64>::sample(&StandardNormal, rng))
            .collect::<Vec<f64>>();
        Self::from_parts(shape.to_vec(), data)
    }

    pub fn uniform(shape: &[usize], bound: f64, rng: &mut impl rand::Rng) -> Self {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect::<Vec<f64>>();
        Self::from_parts(shape.to_vec(), data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Trailing extent (columns for a matrix, length for a vector).
    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap()
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        let c = self.cols();
        self.data[i * c + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::shape("reshape", &self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn require_finite(&self, op: &'static str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(op))
        }
    }

    fn require_matrix(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            _ => Err(Error::Argument(format!(
                "{op} expects a matrix, got shape {:?}",
                self.shape
            ))),
        }
    }

    /// Plain (untracked) matrix product.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.require_matrix("matmul")?;
        let (k2, n) = other.require_matrix("matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", &self.shape, &other.shape));
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul(&self.data, &other.data, &mut out, m, k, n);
        Ok(Tensor::from_parts(vec![m, n], out))
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = self.require_matrix("transpose")?;
        Ok(Tensor::from_parts(vec![c, r], kernels::transpose(&self.data, r, c)))
    }

    pub fn scale(&self, s: f64) -> Tensor {
        Tensor::from_parts(self.shape.clone(), self.data.iter().map(|v| v * s).collect())
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::shape("sub", &self.shape, &other.shape));
        }
        Ok(Tensor::from_parts(
            self.shape.clone(),
            self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect(),
        ))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::shape("add", &self.shape, &other.shape));
        }
        Ok(Tensor::from_parts(
            self.shape.clone(),
            self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(),
        ))
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Rows `start..start+len` of a matrix.
    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Tensor> {
        let (r, c) = self.require_matrix("slice_rows")?;
        if len == 0 || start + len > r {
            return Err(Error::Argument(format!(
                "row range {start}..{} out of bounds for {r} rows",
                start + len
            )));
        }
        Ok(Tensor::from_parts(
            vec![len, c],
            self.data[start * c..(start + len) * c].to_vec(),
        ))
    }

    /// Stack matrices with equal column counts on top of each other.
    pub fn vstack(parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Argument("vstack of nothing".into()))?;
        let (_, c) = first.require_matrix("vstack")?;
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let (r, c2) = p.require_matrix("vstack")?;
            if c2 != c {
                return Err(Error::shape("vstack", first.shape(), p.shape()));
            }
            rows += r;
            data.extend_from_slice(&p.data);
        }
        Ok(Tensor::from_parts(vec![rows, c], data))
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows()).map(|i| self.at(i, j)).collect()
    }
}
