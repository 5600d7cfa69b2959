//! Forward/backward pairs for the pieces of a transformer block. All buffers
//! are row-major `[rows, cols]` slices.

use crate::tensor::{matmul, matmul_nt, matmul_tn};

use super::model::{LayerNorm, Linear};

pub const LAYER_NORM_EPS: f64 = 1e-5;

const GELU_C: f64 = 0.797_884_560_802_865_4; // √(2/π)
const GELU_A: f64 = 0.044_715;

pub fn linear_forward(layer: &Linear, x: &[f64], rows: usize) -> Vec<f64> {
    let (fan_in, fan_out) = (layer.fan_in(), layer.fan_out());
    let mut y = matmul(x, layer.weight.data(), rows, fan_in, fan_out);
    let bias = layer.bias.data();
    for row in y.chunks_exact_mut(fan_out) {
        for (v, b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
    y
}

/// Accumulates parameter gradients into `grad` and returns `dL/dx`.
pub fn linear_backward(layer: &Linear, grad: &mut Linear, x: &[f64], dy: &[f64], rows: usize) -> Vec<f64> {
    let (fan_in, fan_out) = (layer.fan_in(), layer.fan_out());
    let dw = matmul_tn(x, dy, rows, fan_in, fan_out);
    for (g, d) in grad.weight.data_mut().iter_mut().zip(&dw) {
        *g += d;
    }
    let db = grad.bias.data_mut();
    for row in dy.chunks_exact(fan_out) {
        for (g, d) in db.iter_mut().zip(row) {
            *g += d;
        }
    }
    matmul_nt(dy, layer.weight.data(), rows, fan_out, fan_in)
}

pub struct LayerNormCache {
    pub xhat: Vec<f64>,
    pub inv_std: Vec<f64>,
}

pub fn layer_norm_forward(norm: &LayerNorm, x: &[f64], cols: usize) -> (Vec<f64>, LayerNormCache) {
    let rows = x.len() / cols;
    let mut xhat = vec![0.0; x.len()];
    let mut inv_std = Vec::with_capacity(rows);
    let mut y = vec![0.0; x.len()];
    let (gamma, beta) = (norm.gamma.data(), norm.beta.data());
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let mean = row.iter().sum::<f64>() / cols as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
        let s = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        inv_std.push(s);
        for c in 0..cols {
            let h = (row[c] - mean) * s;
            xhat[r * cols + c] = h;
            y[r * cols + c] = gamma[c] * h + beta[c];
        }
    }
    (y, LayerNormCache { xhat, inv_std })
}

pub fn layer_norm_backward(
    norm: &LayerNorm,
    grad: &mut LayerNorm,
    cache: &LayerNormCache,
    dy: &[f64],
    cols: usize,
) -> Vec<f64> {
    let rows = dy.len() / cols;
    let gamma = norm.gamma.data();
    let mut dx = vec![0.0; dy.len()];
    let mut dxhat = vec![0.0; cols];
    for r in 0..rows {
        let span = r * cols..(r + 1) * cols;
        let (dy_row, xhat) = (&dy[span.clone()], &cache.xhat[span.clone()]);
        {
            let dg = grad.gamma.data_mut();
            for c in 0..cols {
                dg[c] += dy_row[c] * xhat[c];
            }
        }
        {
            let db = grad.beta.data_mut();
            for c in 0..cols {
                db[c] += dy_row[c];
            }
        }
        for c in 0..cols {
            dxhat[c] = dy_row[c] * gamma[c];
        }
        let mean_d = dxhat.iter().sum::<f64>() / cols as f64;
        let mean_dx = dxhat.iter().zip(xhat).map(|(a, b)| a * b).sum::<f64>() / cols as f64;
        let s = cache.inv_std[r];
        for (c, out) in dx[span].iter_mut().enumerate() {
            *out = s * (dxhat[c] - mean_d - xhat[c] * mean_dx);
        }
    }
    dx
}

/// Tanh-approximated GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Row-wise softmax in place.
pub fn softmax_rows(x: &mut [f64], cols: usize) {
    for row in x.chunks_exact_mut(cols) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

/// Given softmax output `a` and `dL/da`, returns `dL/dscores`.
pub fn softmax_rows_backward(a: &[f64], da: &[f64], cols: usize) -> Vec<f64> {
    let mut ds = vec![0.0; a.len()];
    for ((a_row, da_row), ds_row) in a.chunks_exact(cols).zip(da.chunks_exact(cols)).zip(ds.chunks_exact_mut(cols)) {
        let dot: f64 = a_row.iter().zip(da_row).map(|(x, y)| x * y).sum();
        for c in 0..cols {
            ds_row[c] = a_row[c] * (da_row[c] - dot);
        }
    }
    ds
}

/// Copies columns `[start, start + width)` of a `[rows, cols]` buffer.
pub fn take_columns(x: &[f64], cols: usize, start: usize, width: usize) -> Vec<f64> {
    x.chunks_exact(cols)
        .flat_map(|row| row[start..start + width].iter().copied())
        .collect()
}

/// Adds a `[rows, width]` block into columns `[start, start + width)`.
pub fn add_columns(dst: &mut [f64], cols: usize, start: usize, src: &[f64], width: usize) {
    for (dst_row, src_row) in dst.chunks_exact_mut(cols).zip(src.chunks_exact(width)) {
        for (d, s) in dst_row[start..start + width].iter_mut().zip(src_row) {
            *d += s;
        }
    }
}
