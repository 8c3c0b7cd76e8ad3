use std::cell::RefCell;
use std::rc::Rc;

use super::kernels::{self, Conv1dGeometry, LstmCache};
use super::Tensor;
use crate::error::{Error, Result};

/// Append-only record of a forward computation.
///
/// Nodes are pushed in evaluation order, so every node's inputs precede it
/// and a reverse sweep is a valid topological order for backward.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Unary {
    Relu,
    LeakyRelu(f64),
    Tanh,
    Sigmoid,
    Exp,
    Ln,
    Sqrt,
    Square,
}

enum Op {
    Leaf,
    MatMul(usize, usize),
    Binary(Binary, usize, usize),
    Scale(usize, f64),
    Unary(Unary, usize),
    Clamp(usize, f64, f64),
    Softmax(usize),
    Concat {
        inputs: Vec<usize>,
        axis: usize,
    },
    Narrow {
        input: usize,
        axis: usize,
        start: usize,
    },
    Transpose(usize),
    Reshape(usize),
    Sum(usize),
    Mean(usize),
    Dropout {
        input: usize,
        mask: Vec<f64>,
    },
    Conv1d {
        input: usize,
        kernel: usize,
        geom: Conv1dGeometry,
    },
    MaxPool1d {
        input: usize,
        argmax: Vec<usize>,
    },
    Lstm {
        input: usize,
        w_ih: usize,
        w_hh: usize,
        bias: usize,
        cache: LstmCache,
    },
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    /// Gradient for `var`, zeros when the loss does not depend on it.
    pub fn wrt(&self, var: Var<'_>) -> Tensor {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[var.id]))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Trainable leaf.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Non-differentiable leaf.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    fn record(&self, op: &'static str, value: Tensor, kind: Op, inputs: &[usize]) -> Result<Var<'_>> {
        value.require_finite(op)?;
        let rg = inputs.iter().any(|&i| self.requires_grad(i));
        Ok(self.push(value, kind, rg))
    }

    /// Reverse sweep from a scalar `loss`, seeded with 1.0.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let n = nodes.len();
        if nodes[loss.id].value.numel() != 1 {
            return Err(Error::Argument(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.id] = Some(vec![1.0]);

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                grads[id] = Some(g);
                continue;
            }
            let contributions = local_backward(&nodes, node, &g);
            grads[id] = Some(g);
            for (input, delta) in contributions {
                if !nodes[input].requires_grad {
                    continue;
                }
                match &mut grads[input] {
                    Some(acc) => {
                        for (a, d) in acc.iter_mut().zip(&delta) {
                            *a += d;
                        }
                    }
                    slot @ None => *slot = Some(delta),
                }
            }
        }

        let shapes: Vec<Vec<usize>> = nodes.iter().map(|nd| nd.value.shape().to_vec()).collect();
        let grads = grads
            .into_iter()
            .zip(nodes.iter())
            .map(|(g, nd)| {
                g.filter(|_| nd.requires_grad)
                    .map(|data| Tensor::from_parts(nd.value.shape().to_vec(), data))
            })
            .collect();
        Ok(Gradients { grads, shapes })
    }
}

fn local_backward(nodes: &[Node], node: &Node, g: &[f64]) -> Vec<(usize, Vec<f64>)> {
    let val = |i: usize| &*nodes[i].value;
    let out = &*node.value;
    match &node.op {
        Op::Leaf => vec![],
        Op::MatMul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let (m, k, n) = (av.rows(), av.cols(), bv.cols());
            let mut ga = vec![0.0; m * k];
            kernels::matmul_nt(g, bv.data(), &mut ga, m, k, n);
            let mut gb = vec![0.0; k * n];
            kernels::matmul_tn(av.data(), g, &mut gb, m, k, n);
            vec![(*a, ga), (*b, gb)]
        }
        Op::Binary(kind, a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let mut ga = vec![0.0; av.numel()];
            let mut gb = vec![0.0; bv.numel()];
            let map = BroadcastMap::new(av.shape(), bv.shape()).expect("validated in forward");
            map.for_each(|o, ia, ib| {
                let (x, y) = (av.data()[ia], bv.data()[ib]);
                let (dx, dy) = match kind {
                    Binary::Add => (1.0, 1.0),
                    Binary::Sub => (1.0, -1.0),
                    Binary::Mul => (y, x),
                    Binary::Div => (1.0 / y, -x / (y * y)),
                };
                ga[ia] += g[o] * dx;
                gb[ib] += g[o] * dy;
            });
            vec![(*a, ga), (*b, gb)]
        }
        Op::Scale(a, s) => vec![(*a, g.iter().map(|v| v * s).collect())],
        Op::Unary(kind, a) => {
            let x = val(*a).data();
            let y = out.data();
            let d: Vec<f64> = (0..g.len())
                .map(|i| {
                    let local = match kind {
                        Unary::Relu => f64::from(x[i] > 0.0),
                        Unary::LeakyRelu(s) => {
                            if x[i] > 0.0 {
                                1.0
                            } else {
                                *s
                            }
                        }
                        Unary::Tanh => 1.0 - y[i] * y[i],
                        Unary::Sigmoid => y[i] * (1.0 - y[i]),
                        Unary::Exp => y[i],
                        Unary::Ln => 1.0 / x[i],
                        Unary::Sqrt => 0.5 / y[i],
                        Unary::Square => 2.0 * x[i],
                    };
                    g[i] * local
                })
                .collect();
            vec![(*a, d)]
        }
        Op::Clamp(a, lo, hi) => {
            let x = val(*a).data();
            let d = x
                .iter()
                .zip(g)
                .map(|(&xv, &gv)| if xv >= *lo && xv <= *hi { gv } else { 0.0 })
                .collect();
            vec![(*a, d)]
        }
        Op::Softmax(a) => {
            let w = out.cols();
            let y = out.data();
            let mut d = vec![0.0; y.len()];
            for ((yr, gr), dr) in y.chunks(w).zip(g.chunks(w)).zip(d.chunks_mut(w)) {
                let inner = kernels::dot(yr, gr);
                for j in 0..w {
                    dr[j] = yr[j] * (gr[j] - inner);
                }
            }
            vec![(*a, d)]
        }
        Op::Concat { inputs, axis } => {
            let (outer, _, inner) = split_axis(out.shape(), *axis);
            let total = out.shape()[*axis];
            let mut offset = 0;
            inputs
                .iter()
                .map(|&i| {
                    let len = val(i).shape()[*axis];
                    let mut d = Vec::with_capacity(val(i).numel());
                    for o in 0..outer {
                        let base = (o * total + offset) * inner;
                        d.extend_from_slice(&g[base..base + len * inner]);
                    }
                    offset += len;
                    (i, d)
                })
                .collect()
        }
        Op::Narrow { input, axis, start } => {
            let src = val(*input);
            let (outer, total, inner) = split_axis(src.shape(), *axis);
            let len = out.shape()[*axis];
            let mut d = vec![0.0; src.numel()];
            for o in 0..outer {
                let dst = (o * total + start) * inner;
                d[dst..dst + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
            }
            vec![(*input, d)]
        }
        Op::Transpose(a) => {
            let (r, c) = (out.rows(), out.cols());
            vec![(*a, kernels::transpose(g, r, c))]
        }
        Op::Reshape(a) => vec![(*a, g.to_vec())],
        Op::Sum(a) => vec![(*a, vec![g[0]; val(*a).numel()])],
        Op::Mean(a) => {
            let n = val(*a).numel();
            vec![(*a, vec![g[0] / n as f64; n])]
        }
        Op::Dropout { input, mask } => {
            vec![(*input, g.iter().zip(mask).map(|(a, b)| a * b).collect())]
        }
        Op::Conv1d { input, kernel, geom } => {
            let (gx, gw) = kernels::conv1d_backward(val(*input).data(), val(*kernel).data(), g, geom);
            vec![(*input, gx), (*kernel, gw)]
        }
        Op::MaxPool1d { input, argmax } => {
            let mut d = vec![0.0; val(*input).numel()];
            for (&idx, &gv) in argmax.iter().zip(g) {
                d[idx] += gv;
            }
            vec![(*input, d)]
        }
        Op::Lstm {
            input,
            w_ih,
            w_hh,
            bias,
            cache,
        } => {
            let x = val(*input);
            let (steps, dim) = (x.rows(), x.cols());
            let hidden = out.cols();
            let (gx, gwi, gwh, gb) = kernels::lstm_backward(
                x.data(),
                val(*w_ih).data(),
                val(*w_hh).data(),
                cache,
                g,
                steps,
                dim,
                hidden,
            );
            vec![(*input, gx), (*w_ih, gwi), (*w_hh, gwh), (*bias, gb)]
        }
    }
}

/// `(outer, axis extent, inner)` for viewing a shape around one axis.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// NumPy-style broadcast of two shapes, right-aligned.
struct BroadcastMap {
    out: Vec<usize>,
    a_strides: Vec<usize>,
    b_strides: Vec<usize>,
}

impl BroadcastMap {
    fn new(a: &[usize], b: &[usize]) -> Option<Self> {
        let rank = a.len().max(b.len());
        let pad = |s: &[usize]| {
            let mut v = vec![1; rank - s.len()];
            v.extend_from_slice(s);
            v
        };
        let (pa, pb) = (pad(a), pad(b));
        let mut out = Vec::with_capacity(rank);
        for (&x, &y) in pa.iter().zip(&pb) {
            out.push(match (x, y) {
                _ if x == y => x,
                (1, _) => y,
                (_, 1) => x,
                _ => return None,
            });
        }
        let strides = |p: &[usize]| {
            let mut s = vec![0; rank];
            let mut acc = 1;
            for d in (0..rank).rev() {
                s[d] = if p[d] == 1 { 0 } else { acc };
                acc *= p[d];
            }
            s
        };
        Some(Self {
            a_strides: strides(&pa),
            b_strides: strides(&pb),
            out,
        })
    }

    fn numel(&self) -> usize {
        self.out.iter().product()
    }

    /// Calls `f(out_index, a_index, b_index)` for every output element.
    fn for_each(&self, mut f: impl FnMut(usize, usize, usize)) {
        let rank = self.out.len();
        let mut idx = vec![0usize; rank];
        let (mut ia, mut ib) = (0usize, 0usize);
        for o in 0..self.numel() {
            f(o, ia, ib);
            for d in (0..rank).rev() {
                idx[d] += 1;
                ia += self.a_strides[d];
                ib += self.b_strides[d];
                if idx[d] < self.out[d] {
                    break;
                }
                ia -= self.a_strides[d] * idx[d];
                ib -= self.b_strides[d] * idx[d];
                idx[d] = 0;
            }
        }
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad(self.id)
    }

    fn same_tape(&self, other: &Var<'_>) {
        assert!(std::ptr::eq(self.tape, other.tape), "vars from different tapes");
    }

    fn unary(self, name: &'static str, kind: Unary, f: impl Fn(f64) -> f64) -> Result<Var<'t>> {
        let v = self.value();
        let out = Tensor::from_parts(v.shape().to_vec(), v.data().iter().map(|&x| f(x)).collect());
        self.tape.record(name, out, Op::Unary(kind, self.id), &[self.id])
    }

    fn binary(self, name: &'static str, kind: Binary, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&other);
        let (a, b) = (self.value(), other.value());
        let out = if a.shape() == b.shape() {
            let data = a
                .data()
                .iter()
                .zip(b.data())
                .map(|(&x, &y)| apply_binary(kind, x, y))
                .collect();
            Tensor::from_parts(a.shape().to_vec(), data)
        } else {
            let map =
                BroadcastMap::new(a.shape(), b.shape()).ok_or_else(|| Error::shape(name, a.shape(), b.shape()))?;
            let mut data = vec![0.0; map.numel()];
            map.for_each(|o, ia, ib| data[o] = apply_binary(kind, a.data()[ia], b.data()[ib]));
            Tensor::from_parts(map.out.clone(), data)
        };
        self.tape
            .record(name, out, Op::Binary(kind, self.id, other.id), &[self.id, other.id])
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary("add", Binary::Add, other)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary("sub", Binary::Sub, other)
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary("mul", Binary::Mul, other)
    }

    pub fn div(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary("div", Binary::Div, other)
    }

    pub fn scale(self, s: f64) -> Result<Var<'t>> {
        let v = self.value();
        self.tape.record("scale", v.scale(s), Op::Scale(self.id, s), &[self.id])
    }

    /// `self + c` for a constant scalar.
    pub fn add_scalar(self, c: f64) -> Result<Var<'t>> {
        let k = self.tape.constant(Tensor::scalar(c));
        self.add(k)
    }

    pub fn relu(self) -> Result<Var<'t>> {
        self.unary("relu", Unary::Relu, |x| x.max(0.0))
    }

    pub fn leaky_relu(self, slope: f64) -> Result<Var<'t>> {
        self.unary("leaky_relu", Unary::LeakyRelu(slope), move |x| {
            if x > 0.0 {
                x
            } else {
                slope * x
            }
        })
    }

    pub fn tanh(self) -> Result<Var<'t>> {
        self.unary("tanh", Unary::Tanh, f64::tanh)
    }

    pub fn sigmoid(self) -> Result<Var<'t>> {
        self.unary("sigmoid", Unary::Sigmoid, kernels::sigmoid)
    }

    pub fn exp(self) -> Result<Var<'t>> {
        self.unary("exp", Unary::Exp, f64::exp)
    }

    pub fn ln(self) -> Result<Var<'t>> {
        self.unary("ln", Unary::Ln, f64::ln)
    }

    pub fn sqrt(self) -> Result<Var<'t>> {
        self.unary("sqrt", Unary::Sqrt, f64::sqrt)
    }

    pub fn square(self) -> Result<Var<'t>> {
        self.unary("square", Unary::Square, |x| x * x)
    }

    pub fn clamp(self, lo: f64, hi: f64) -> Result<Var<'t>> {
        let v = self.value();
        let out = Tensor::from_parts(v.shape().to_vec(), v.data().iter().map(|x| x.clamp(lo, hi)).collect());
        self.tape.record("clamp", out, Op::Clamp(self.id, lo, hi), &[self.id])
    }

    /// Softmax along the last axis.
    pub fn softmax(self) -> Result<Var<'t>> {
        let v = self.value();
        let w = v.cols();
        let out = Tensor::from_parts(v.shape().to_vec(), kernels::softmax_rows(v.data(), w));
        self.tape.record("softmax", out, Op::Softmax(self.id), &[self.id])
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&other);
        let out = self.value().matmul(&other.value())?;
        self.tape
            .record("matmul", out, Op::MatMul(self.id, other.id), &[self.id, other.id])
    }

    pub fn transpose(self) -> Result<Var<'t>> {
        let out = self.value().transpose()?;
        self.tape.record("transpose", out, Op::Transpose(self.id), &[self.id])
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let out = (*self.value()).clone().reshape(shape)?;
        self.tape.record("reshape", out, Op::Reshape(self.id), &[self.id])
    }

    pub fn sum(self) -> Result<Var<'t>> {
        let s = self.value().sum();
        self.tape.record("sum", Tensor::scalar(s), Op::Sum(self.id), &[self.id])
    }

    pub fn mean(self) -> Result<Var<'t>> {
        let v = self.value();
        let m = v.sum() / v.numel() as f64;
        self.tape
            .record("mean", Tensor::scalar(m), Op::Mean(self.id), &[self.id])
    }

    /// Concatenate along `axis`; all other extents must agree.
    pub fn concat(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Argument("concat of nothing".into()))?;
        let values: Vec<Rc<Tensor>> = parts.iter().map(Var::value).collect();
        let base = values[0].shape().to_vec();
        if axis >= base.len() {
            return Err(Error::Argument(format!("concat axis {axis} out of range")));
        }
        let mut total = 0;
        for (part, v) in parts.iter().zip(&values) {
            first.same_tape(part);
            let s = v.shape();
            let compatible =
                s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(Error::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in &values {
                let len = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        first.tape.record(
            "concat",
            Tensor::from_parts(shape, data),
            Op::Concat {
                inputs: ids.clone(),
                axis,
            },
            &ids,
        )
    }

    /// Slice `start..start+len` along `axis`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let v = self.value();
        let shape = v.shape();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::Argument(format!(
                "narrow {start}..{} on axis {axis} of {shape:?}",
                start + len
            )));
        }
        let (outer, total, inner) = split_axis(shape, axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * total + start) * inner;
            data.extend_from_slice(&v.data()[base..base + len * inner]);
        }
        let mut out_shape = shape.to_vec();
        out_shape[axis] = len;
        self.tape.record(
            "narrow",
            Tensor::from_parts(out_shape, data),
            Op::Narrow {
                input: self.id,
                axis,
                start,
            },
            &[self.id],
        )
    }

    /// Inverted dropout: identity when `train` is false or `p == 0`.
    pub fn dropout(self, p: f64, train: bool, rng: &mut impl rand::Rng) -> Result<Var<'t>> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Argument(format!("dropout p={p} outside [0,1)")));
        }
        if !train || p == 0.0 {
            return Ok(self);
        }
        let v = self.value();
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..v.numel())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let out = Tensor::from_parts(
            v.shape().to_vec(),
            v.data().iter().zip(&mask).map(|(a, b)| a * b).collect(),
        );
        self.tape
            .record("dropout", out, Op::Dropout { input: self.id, mask }, &[self.id])
    }

    /// 1-D cross-correlation of `[C_in × L]` with `[C_out × C_in × K]` kernels.
    pub fn conv1d(self, kernel: Var<'t>, stride: usize, padding: Padding) -> Result<Var<'t>> {
        self.same_tape(&kernel);
        let (x, w) = (self.value(), kernel.value());
        let geom = conv_geometry(x.shape(), w.shape(), stride, padding)?;
        let out = kernels::conv1d_forward(x.data(), w.data(), &geom);
        self.tape.record(
            "conv1d",
            Tensor::from_parts(vec![geom.c_out, geom.out_len()], out),
            Op::Conv1d {
                input: self.id,
                kernel: kernel.id,
                geom,
            },
            &[self.id, kernel.id],
        )
    }

    /// Max-pool each row of a `[C × L]` input.
    pub fn maxpool1d(self, kernel: usize, stride: usize) -> Result<Var<'t>> {
        let x = self.value();
        let (c, l) = pool_geometry(x.shape(), kernel, stride)?;
        let (out, argmax) = kernels::maxpool1d_forward(x.data(), c, l, kernel, stride);
        let lo = out.len() / c;
        self.tape.record(
            "maxpool1d",
            Tensor::from_parts(vec![c, lo], out),
            Op::MaxPool1d { input: self.id, argmax },
            &[self.id],
        )
    }

    /// One-layer LSTM over `[T × D]` rows. Returns hidden states `[T × H]`.
    pub fn lstm(self, w_ih: Var<'t>, w_hh: Var<'t>, bias: Var<'t>) -> Result<Var<'t>> {
        let (x, wi, wh, b) = (self.value(), w_ih.value(), w_hh.value(), bias.value());
        let (steps, dim) = match x.shape() {
            [t, d] => (*t, *d),
            s => return Err(Error::shape("lstm input", s, &[0, 0])),
        };
        let hidden = wh.rows();
        if wi.shape() != [dim, 4 * hidden] {
            return Err(Error::shape("lstm w_ih", wi.shape(), &[dim, 4 * hidden]));
        }
        if wh.shape() != [hidden, 4 * hidden] {
            return Err(Error::shape("lstm w_hh", wh.shape(), &[hidden, 4 * hidden]));
        }
        if b.numel() != 4 * hidden {
            return Err(Error::shape("lstm bias", b.shape(), &[4 * hidden]));
        }
        let cache = kernels::lstm_forward(x.data(), wi.data(), wh.data(), b.data(), steps, dim, hidden);
        let out = Tensor::from_parts(vec![steps, hidden], cache.hidden.clone());
        self.tape.record(
            "lstm",
            out,
            Op::Lstm {
                input: self.id,
                w_ih: w_ih.id,
                w_hh: w_hh.id,
                bias: bias.id,
                cache,
            },
            &[self.id, w_ih.id, w_hh.id, bias.id],
        )
    }
}

fn apply_binary(kind: Binary, x: f64, y: f64) -> f64 {
    match kind {
        Binary::Add => x + y,
        Binary::Sub => x - y,
        Binary::Mul => x * y,
        Binary::Div => x / y,
    }
}

/// Convolution boundary handling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    /// Zero-pad `K-1` samples in total, `(K-1)/2` on the left.
    Same,
    Valid,
}

pub(crate) fn conv_geometry(x: &[usize], w: &[usize], stride: usize, padding: Padding) -> Result<Conv1dGeometry> {
    let (c_in, len) = match x {
        [c, l] => (*c, *l),
        _ => return Err(Error::shape("conv1d input", x, &[0, 0])),
    };
    let (c_out, wc, kernel) = match w {
        [o, c, k] => (*o, *c, *k),
        _ => return Err(Error::shape("conv1d kernel", w, &[0, 0, 0])),
    };
    if wc != c_in {
        return Err(Error::shape("conv1d", x, w));
    }
    if stride == 0 {
        return Err(Error::Argument("conv1d stride must be ≥ 1".into()));
    }
    let (pad_left, pad_right) = match padding {
        Padding::Same => ((kernel - 1) / 2, kernel - 1 - (kernel - 1) / 2),
        Padding::Valid => (0, 0),
    };
    if kernel > len + pad_left + pad_right {
        return Err(Error::shape("conv1d (kernel longer than padded input)", x, w));
    }
    Ok(Conv1dGeometry {
        c_in,
        c_out,
        len,
        kernel,
        stride,
        pad_left,
        pad_right,
    })
}

pub(crate) fn pool_geometry(x: &[usize], kernel: usize, stride: usize) -> Result<(usize, usize)> {
    let (c, l) = match x {
        [c, l] => (*c, *l),
        _ => return Err(Error::shape("maxpool1d input", x, &[0, 0])),
    };
    if kernel == 0 || stride == 0 {
        return Err(Error::Argument("maxpool1d kernel and stride must be ≥ 1".into()));
    }
    if kernel > l {
        return Err(Error::shape("maxpool1d (kernel longer than input)", x, &[kernel]));
    }
    Ok((c, l))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedStream;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn sum_of_squares_gradient() {
        let tape = Tape::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        let loss = x.square().unwrap().sum().unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(x).data(), &[2.0, 4.0]);
    }

    #[test]
    fn matmul_gradient_example() {
        let tape = Tape::new();
        let a = tape.param(t(&[1, 2], &[1.0, 1.0]));
        let b = tape.constant(t(&[2, 1], &[2.0, 5.0]));
        let loss = a.matmul(b).unwrap().sum().unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(a).data(), &[2.0, 5.0]);
    }

    #[test]
    fn disconnected_parameter_gets_zero_gradient() {
        let tape = Tape::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        let unused = tape.param(t(&[3], &[1.0, 1.0, 1.0]));
        let loss = x.sum().unwrap();
        let g = tape.backward(loss).unwrap();
        assert!(g.get(unused).is_none());
        assert_eq!(g.wrt(unused).data(), &[0.0; 3]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let tape = Tape::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(Error::Argument(_))));
    }

    #[test]
    fn relu_values() {
        let tape = Tape::new();
        let x = tape.constant(t(&[3], &[-1.0, 0.0, 2.0]));
        assert_eq!(x.relu().unwrap().value().data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn softmax_values() {
        let tape = Tape::new();
        let s = |d: &[f64]| tape.constant(t(&[d.len()], d)).softmax().unwrap().value();
        assert_eq!(s(&[0.0, 0.0]).data(), &[0.5, 0.5]);
        let v = s(&[1.0, 0.0]);
        assert!((v.data()[0] - 0.731_058_578_630_004_9).abs() < 1e-12);
        assert!((v.data()[1] - 0.268_941_421_369_995_1).abs() < 1e-12);
        let v = s(&[1000.0, 0.0]);
        assert!((v.data()[0] - 1.0).abs() < 1e-12 && v.data()[1].abs() < 1e-12);
    }

    #[test]
    fn conv_examples() {
        let tape = Tape::new();
        let x = tape.constant(t(&[1, 4], &[1.0, 2.0, 3.0, 4.0]));
        let w = tape.constant(t(&[1, 1, 3], &[1.0, 0.0, -1.0]));
        let y = x.conv1d(w, 1, Padding::Same).unwrap();
        assert_eq!(y.value().data(), &[-2.0, -2.0, -2.0, 3.0]);
        let y = x.conv1d(w, 1, Padding::Valid).unwrap();
        assert_eq!(y.value().data(), &[-2.0, -2.0]);

        let zeros = tape.constant(Tensor::zeros(&[2, 9]));
        let k = tape.constant(Tensor::full(&[3, 2, 4], 0.7));
        assert!(zeros
            .conv1d(k, 2, Padding::Same)
            .unwrap()
            .value()
            .data()
            .iter()
            .all(|&v| v == 0.0));

        let long = tape.constant(Tensor::zeros(&[1, 5, 7]));
        assert!(matches!(
            x.conv1d(long.reshape(&[5, 1, 7]).unwrap(), 1, Padding::Valid),
            Err(Error::Shape { .. })
        ));
        let kernel7 = tape.constant(Tensor::zeros(&[1, 1, 7]));
        assert!(matches!(x.conv1d(kernel7, 1, Padding::Valid), Err(Error::Shape { .. })));
    }

    #[test]
    fn maxpool_examples_and_tie_gradient() {
        let tape = Tape::new();
        let x = tape.constant(t(&[1, 4], &[1.0, 3.0, 2.0, 5.0]));
        assert_eq!(x.maxpool1d(2, 2).unwrap().value().data(), &[3.0, 5.0]);

        let tie = tape.param(t(&[1, 2], &[7.0, 7.0]));
        let y = tie.maxpool1d(2, 2).unwrap();
        assert_eq!(y.value().data(), &[7.0]);
        let g = tape.backward(y.sum().unwrap()).unwrap();
        assert_eq!(g.wrt(tie).data(), &[1.0, 0.0]);

        assert!(matches!(x.maxpool1d(5, 1), Err(Error::Shape { .. })));
    }

    #[test]
    fn pooling_chain_to_length_one() {
        let tape = Tape::new();
        let mut rng = SeedStream::new(1).fork("pool");
        let x = tape.constant(Tensor::randn(&[1, 250], 1.0, &mut rng));
        let y = x
            .maxpool1d(10, 10)
            .and_then(|v| v.maxpool1d(5, 5))
            .and_then(|v| v.maxpool1d(5, 5))
            .unwrap();
        assert_eq!(y.shape(), vec![1, 1]);
    }

    #[test]
    fn dropout_identity_cases() {
        let tape = Tape::new();
        let mut rng = SeedStream::new(3).fork("drop");
        let x = tape.constant(t(&[4], &[1.0, -2.0, 3.0, 4.0]));
        assert_eq!(x.dropout(0.0, true, &mut rng).unwrap().value().data(), x.value().data());
        assert_eq!(
            x.dropout(0.5, false, &mut rng).unwrap().value().data(),
            x.value().data()
        );
        assert!(x.dropout(1.0, true, &mut rng).is_err());
    }

    #[test]
    fn dropout_scales_survivors() {
        let tape = Tape::new();
        let mut rng = SeedStream::new(3).fork("drop");
        let x = tape.constant(Tensor::full(&[1000], 1.0));
        let y = x.dropout(0.5, true, &mut rng).unwrap().value();
        assert!(y.data().iter().all(|&v| v == 0.0 || v == 2.0));
        let kept = y.data().iter().filter(|&&v| v > 0.0).count();
        assert!((400..600).contains(&kept), "{kept}");
    }

    #[test]
    fn broadcast_add_row_and_column() {
        let tape = Tape::new();
        let m = tape.param(t(&[2, 3], &[0.0; 6]));
        let row = tape.param(t(&[3], &[1.0, 2.0, 3.0]));
        let col = tape.param(t(&[2, 1], &[10.0, 20.0]));
        let y = m.add(row).unwrap().add(col).unwrap();
        assert_eq!(y.value().data(), &[11.0, 12.0, 13.0, 21.0, 22.0, 23.0]);
        let g = tape.backward(y.sum().unwrap()).unwrap();
        assert_eq!(g.wrt(row).data(), &[2.0, 2.0, 2.0]);
        assert_eq!(g.wrt(col).data(), &[3.0, 3.0]);
        let bad = tape.constant(t(&[2], &[1.0, 1.0]));
        assert!(matches!(m.add(bad), Err(Error::Shape { .. })));
    }

    #[test]
    fn non_finite_rejected_at_op_boundary() {
        let tape = Tape::new();
        let x = tape.constant(t(&[1], &[0.0]));
        assert!(matches!(x.ln(), Err(Error::NonFinite("ln"))));
    }
}
