//! Raw forward/backward loops over flat row-major buffers.
//!
//! The tape calls these for differentiable ops; frozen feature extraction
//! calls the forward halves directly to avoid recording anything.

/// `out += a[m×k] · b[k×n]`.
pub fn matmul(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aip * bv;
            }
        }
    }
}

/// `out[m×k] += g[m×n] · b[k×n]ᵀ`.
pub fn matmul_nt(g: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let g_row = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let b_row = &b[p * n..(p + 1) * n];
            out[i * k + p] += dot(g_row, b_row);
        }
    }
}

/// `out[k×n] += a[m×k]ᵀ · g[m×n]`.
pub fn matmul_tn(a: &[f64], g: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let g_row = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let out_row = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in out_row.iter_mut().zip(g_row) {
                *o += aip * gv;
            }
        }
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

/// Geometry of a 1-D convolution over `[C_in × L]` with `[C_out × C_in × K]` kernels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv1dGeometry {
    pub c_in: usize,
    pub c_out: usize,
    pub len: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad_left: usize,
    pub pad_right: usize,
}

impl Conv1dGeometry {
    pub fn padded_len(&self) -> usize {
        self.len + self.pad_left + self.pad_right
    }

    pub fn out_len(&self) -> usize {
        (self.padded_len() - self.kernel) / self.stride + 1
    }
}

fn pad_input(x: &[f64], g: &Conv1dGeometry) -> Vec<f64> {
    let pl = g.padded_len();
    let mut padded = vec![0.0; g.c_in * pl];
    for c in 0..g.c_in {
        padded[c * pl + g.pad_left..c * pl + g.pad_left + g.len].copy_from_slice(&x[c * g.len..(c + 1) * g.len]);
    }
    padded
}

/// Cross-correlation, no bias. Returns `[C_out × L_out]`.
pub fn conv1d_forward(x: &[f64], w: &[f64], g: &Conv1dGeometry) -> Vec<f64> {
    let pl = g.padded_len();
    let lo = g.out_len();
    let xp = pad_input(x, g);
    let mut out = vec![0.0; g.c_out * lo];
    for o in 0..g.c_out {
        let out_row = &mut out[o * lo..(o + 1) * lo];
        for c in 0..g.c_in {
            let x_row = &xp[c * pl..(c + 1) * pl];
            for k in 0..g.kernel {
                let wv = w[(o * g.c_in + c) * g.kernel + k];
                if g.stride == 1 {
                    for (dst, &src) in out_row.iter_mut().zip(&x_row[k..k + lo]) {
                        *dst += wv * src;
                    }
                } else {
                    for (j, dst) in out_row.iter_mut().enumerate() {
                        *dst += wv * x_row[j * g.stride + k];
                    }
                }
            }
        }
    }
    out
}

/// Returns `(dx, dw)` given the upstream gradient `gy` of shape `[C_out × L_out]`.
pub fn conv1d_backward(x: &[f64], w: &[f64], gy: &[f64], g: &Conv1dGeometry) -> (Vec<f64>, Vec<f64>) {
    let pl = g.padded_len();
    let lo = g.out_len();
    let xp = pad_input(x, g);
    let mut gxp = vec![0.0; g.c_in * pl];
    let mut gw = vec![0.0; w.len()];
    for o in 0..g.c_out {
        let gy_row = &gy[o * lo..(o + 1) * lo];
        for c in 0..g.c_in {
            let x_row = &xp[c * pl..(c + 1) * pl];
            let gx_row = &mut gxp[c * pl..(c + 1) * pl];
            for k in 0..g.kernel {
                let widx = (o * g.c_in + c) * g.kernel + k;
                let wv = w[widx];
                if g.stride == 1 {
                    gw[widx] += dot(gy_row, &x_row[k..k + lo]);
                    for (dst, &gv) in gx_row[k..k + lo].iter_mut().zip(gy_row) {
                        *dst += wv * gv;
                    }
                } else {
                    let mut acc = 0.0;
                    for (j, &gv) in gy_row.iter().enumerate() {
                        acc += gv * x_row[j * g.stride + k];
                        gx_row[j * g.stride + k] += wv * gv;
                    }
                    gw[widx] += acc;
                }
            }
        }
    }
    let mut gx = vec![0.0; g.c_in * g.len];
    for c in 0..g.c_in {
        gx[c * g.len..(c + 1) * g.len].copy_from_slice(&gxp[c * pl + g.pad_left..c * pl + g.pad_left + g.len]);
    }
    (gx, gw)
}

/// Max-pool over rows of a `[C × L]` buffer. Returns values and the flat
/// arg-max index of each window (first occurrence on ties).
pub fn maxpool1d_forward(
    x: &[f64],
    channels: usize,
    len: usize,
    kernel: usize,
    stride: usize,
) -> (Vec<f64>, Vec<usize>) {
    let lo = (len - kernel) / stride + 1;
    let mut out = Vec::with_capacity(channels * lo);
    let mut arg = Vec::with_capacity(channels * lo);
    for c in 0..channels {
        let row = &x[c * len..(c + 1) * len];
        for j in 0..lo {
            let start = j * stride;
            let mut best = start;
            for i in start + 1..start + kernel {
                if row[i] > row[best] {
                    best = i;
                }
            }
            out.push(row[best]);
            arg.push(c * len + best);
        }
    }
    (out, arg)
}

/// Softmax along contiguous rows of width `width`, max-subtracted.
pub fn softmax_rows(x: &[f64], width: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (src, dst) in x.chunks(width).zip(out.chunks_mut(width)) {
        let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = (s - max).exp();
            total += *d;
        }
        for d in dst.iter_mut() {
            *d /= total;
        }
    }
    out
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Saved activations of a whole-sequence LSTM pass.
#[derive(Debug, Clone)]
pub struct LstmCache {
    /// Post-nonlinearity gates `[T × 4H]`, order i, f, g, o.
    pub gates: Vec<f64>,
    /// Cell states `[T × H]`.
    pub cells: Vec<f64>,
    /// Hidden states `[T × H]`.
    pub hidden: Vec<f64>,
}

/// One-layer LSTM with zero initial state.
///
/// `x` is `[T × D]`, `w_ih` is `[D × 4H]`, `w_hh` is `[H × 4H]`, `bias` is `[4H]`.
pub fn lstm_forward(
    x: &[f64],
    w_ih: &[f64],
    w_hh: &[f64],
    bias: &[f64],
    steps: usize,
    input: usize,
    hidden: usize,
) -> LstmCache {
    let g4 = 4 * hidden;
    let mut pre = vec![0.0; steps * g4];
    for t in 0..steps {
        pre[t * g4..(t + 1) * g4].copy_from_slice(bias);
    }
    matmul(x, w_ih, &mut pre, steps, input, g4);

    let mut gates = vec![0.0; steps * g4];
    let mut cells = vec![0.0; steps * hidden];
    let mut hs = vec![0.0; steps * hidden];
    for t in 0..steps {
        let z = &mut pre[t * g4..(t + 1) * g4];
        if t > 0 {
            let h_prev = &hs[(t - 1) * hidden..t * hidden];
            matmul(h_prev, w_hh, z, 1, hidden, g4);
        }
        let gt = &mut gates[t * g4..(t + 1) * g4];
        for j in 0..hidden {
            gt[j] = sigmoid(z[j]);
            gt[hidden + j] = sigmoid(z[hidden + j]);
            gt[2 * hidden + j] = z[2 * hidden + j].tanh();
            gt[3 * hidden + j] = sigmoid(z[3 * hidden + j]);
        }
        for j in 0..hidden {
            let c_prev = if t > 0 { cells[(t - 1) * hidden + j] } else { 0.0 };
            let c = gt[hidden + j] * c_prev + gt[j] * gt[2 * hidden + j];
            cells[t * hidden + j] = c;
            hs[t * hidden + j] = gt[3 * hidden + j] * c.tanh();
        }
    }
    LstmCache {
        gates,
        cells,
        hidden: hs,
    }
}

/// Backpropagation through time. Returns `(dx, dw_ih, dw_hh, dbias)`.
#[allow(clippy::too_many_arguments)]
pub fn lstm_backward(
    x: &[f64],
    w_ih: &[f64],
    w_hh: &[f64],
    cache: &LstmCache,
    grad_hidden: &[f64],
    steps: usize,
    input: usize,
    hidden: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
    let g4 = 4 * hidden;
    let mut dz_all = vec![0.0; steps * g4];
    let mut dh_next = vec![0.0; hidden];
    let mut dc_next = vec![0.0; hidden];
    let mut gw_hh = vec![0.0; w_hh.len()];

    for t in (0..steps).rev() {
        let gt = &cache.gates[t * g4..(t + 1) * g4];
        let dz = &mut dz_all[t * g4..(t + 1) * g4];
        for j in 0..hidden {
            let (i, f, g, o) = (gt[j], gt[hidden + j], gt[2 * hidden + j], gt[3 * hidden + j]);
            let c = cache.cells[t * hidden + j];
            let c_prev = if t > 0 { cache.cells[(t - 1) * hidden + j] } else { 0.0 };
            let tc = c.tanh();
            let dh = grad_hidden[t * hidden + j] + dh_next[j];
            let d_o = dh * tc;
            let dc = dh * o * (1.0 - tc * tc) + dc_next[j];
            dz[j] = dc * g * i * (1.0 - i);
            dz[hidden + j] = dc * c_prev * f * (1.0 - f);
            dz[2 * hidden + j] = dc * i * (1.0 - g * g);
            dz[3 * hidden + j] = d_o * o * (1.0 - o);
            dc_next[j] = dc * f;
        }
        dh_next.iter_mut().for_each(|v| *v = 0.0);
        if t > 0 {
            let h_prev = &cache.hidden[(t - 1) * hidden..t * hidden];
            matmul_nt(dz, w_hh, &mut dh_next, 1, hidden, g4);
            matmul_tn(h_prev, dz, &mut gw_hh, 1, hidden, g4);
        }
    }

    let mut gx = vec![0.0; steps * input];
    matmul_nt(&dz_all, w_ih, &mut gx, steps, input, g4);
    let mut gw_ih = vec![0.0; w_ih.len()];
    matmul_tn(x, &dz_all, &mut gw_ih, steps, input, g4);
    let mut gb = vec![0.0; g4];
    for row in dz_all.chunks(g4) {
        for (b, &v) in gb.iter_mut().zip(row) {
            *b += v;
        }
    }
    (gx, gw_ih, gw_hh, gb)
}
