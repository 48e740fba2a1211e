//! Dense kernels over row-major `f64` slices, each with its backward pass.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `y[r, :] = W x[r, :] + b` for `rows` inputs of width `in_dim`; `W` is
/// `out_dim x in_dim`.
pub fn linear(x: &[f64], in_dim: usize, w: &[f64], b: &[f64]) -> Vec<f64> {
    let out_dim = b.len();
    debug_assert_eq!(w.len(), out_dim * in_dim);
    let rows = x.len() / in_dim;
    let mut y = Vec::with_capacity(rows * out_dim);
    for r in 0..rows {
        let xr = &x[r * in_dim..(r + 1) * in_dim];
        for o in 0..out_dim {
            y.push(dot(xr, &w[o * in_dim..(o + 1) * in_dim]) + b[o]);
        }
    }
    y
}

/// Accumulates the gradients of [`linear`]. `dx` may be `None` when the
/// input is not differentiated.
pub fn linear_backward(
    x: &[f64],
    in_dim: usize,
    w: &[f64],
    dy: &[f64],
    dx: Option<&mut [f64]>,
    dw: &mut [f64],
    db: &mut [f64],
) {
    let out_dim = db.len();
    let rows = x.len() / in_dim;
    for r in 0..rows {
        let xr = &x[r * in_dim..(r + 1) * in_dim];
        for o in 0..out_dim {
            let g = dy[r * out_dim + o];
            if g != 0.0 {
                axpy(g, xr, &mut dw[o * in_dim..(o + 1) * in_dim]);
                db[o] += g;
            }
        }
    }
    if let Some(dx) = dx {
        for r in 0..rows {
            let dxr = &mut dx[r * in_dim..(r + 1) * in_dim];
            for o in 0..out_dim {
                let g = dy[r * out_dim + o];
                if g != 0.0 {
                    axpy(g, &w[o * in_dim..(o + 1) * in_dim], dxr);
                }
            }
        }
    }
}

/// Normalized inputs and reciprocal standard deviations of a layer norm.
#[derive(Debug, Clone)]
pub struct LayerNormCache {
    pub xhat: Vec<f64>,
    pub rstd: Vec<f64>,
}

pub fn layer_norm(x: &[f64], dim: usize, gamma: &[f64], beta: &[f64]) -> (Vec<f64>, LayerNormCache) {
    let rows = x.len() / dim;
    let mut y = Vec::with_capacity(x.len());
    let mut xhat = Vec::with_capacity(x.len());
    let mut rstd = Vec::with_capacity(rows);
    for r in 0..rows {
        let xr = &x[r * dim..(r + 1) * dim];
        let mean = xr.iter().sum::<f64>() / dim as f64;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / dim as f64;
        let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        rstd.push(rs);
        for j in 0..dim {
            let h = (xr[j] - mean) * rs;
            xhat.push(h);
            y.push(gamma[j] * h + beta[j]);
        }
    }
    (y, LayerNormCache { xhat, rstd })
}

/// Adds the layer-norm input gradient to `dx`.
pub fn layer_norm_backward(
    cache: &LayerNormCache,
    dim: usize,
    gamma: &[f64],
    dy: &[f64],
    dx: &mut [f64],
    dgamma: &mut [f64],
    dbeta: &mut [f64],
) {
    let rows = cache.rstd.len();
    let mut dxhat = vec![0.0; dim];
    for r in 0..rows {
        let range = r * dim..(r + 1) * dim;
        let xh = &cache.xhat[range.clone()];
        let dyr = &dy[range.clone()];
        for j in 0..dim {
            dgamma[j] += dyr[j] * xh[j];
            dbeta[j] += dyr[j];
            dxhat[j] = dyr[j] * gamma[j];
        }
        let mean_d = dxhat.iter().sum::<f64>() / dim as f64;
        let mean_dx = dot(&dxhat, xh) / dim as f64;
        let rs = cache.rstd[r];
        for (j, d) in dx[range].iter_mut().enumerate() {
            *d += rs * (dxhat[j] - mean_d - xh[j] * mean_dx);
        }
    }
}

/// Standard normal CDF.
#[inline]
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

/// Exact GELU, `x * Phi(x)`.
#[inline]
pub fn gelu(x: f64) -> f64 {
    x * normal_cdf(x)
}

#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    normal_cdf(x) + x * (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// In-place softmax of each `width`-long row.
pub fn softmax_rows(x: &mut [f64], width: usize) {
    for row in x.chunks_mut(width) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}
