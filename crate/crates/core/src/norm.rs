//! Feature normalization: the shared affine map over batch or per-example
//! statistics.
//!
//! Both variants compute `gamma * (z - mu) / sqrt(var + eps) + beta`; they
//! differ only in which slice of a `[B, n]` activation matrix the mean and
//! population variance are taken over. Batch statistics run down each column
//! (over the batch), per-example statistics run across each row (over
//! features). Batch statistics are always the current batch's own; there is no
//! running-average mode.
//!
//! Backward passes recompute statistics from the saved input rather than
//! caching them, trading a little arithmetic for a smaller tape.

use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;

/// Default variance-floor epsilon used by the model builder. Kept small so
/// rescaling all weights of a normalized layer moves its output by well under
/// 1e-6; double precision keeps the division stable at this floor.
pub const NORM_EPS: f64 = 1e-8;

/// Per-example normalization of `x` (`b x n` row-major): each row is
/// standardized over its `n` features, then scaled by `gamma` and shifted by
/// `beta` (both length `n`).
pub fn layer_norm_forward(x: &[f64], b: usize, n: usize, gamma: &[f64], beta: &[f64], eps: f64) -> Vec<f64> {
    debug_assert_eq!(x.len(), b * n);
    debug_assert_eq!(gamma.len(), n);
    debug_assert_eq!(beta.len(), n);
    let mut out = vec![0.0; b * n];
    for i in 0..b {
        let row = &x[i * n..(i + 1) * n];
        let (mean, var) = mean_var(row);
        let inv = 1.0 / (var + eps).sqrt();
        for j in 0..n {
            out[i * n + j] = gamma[j] * (row[j] - mean) * inv + beta[j];
        }
    }
    out
}

/// Gradients of [`layer_norm_forward`]. Returns `(dx, dgamma, dbeta)`.
pub fn layer_norm_backward(
    x: &[f64],
    b: usize,
    n: usize,
    gamma: &[f64],
    eps: f64,
    grad_out: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    debug_assert_eq!(x.len(), b * n);
    debug_assert_eq!(grad_out.len(), b * n);
    let mut dx = vec![0.0; b * n];
    let mut dgamma = vec![0.0; n];
    let mut dbeta = vec![0.0; n];
    for i in 0..b {
        let row = &x[i * n..(i + 1) * n];
        let g_row = &grad_out[i * n..(i + 1) * n];
        let (mean, var) = mean_var(row);
        let inv = 1.0 / (var + eps).sqrt();

        // dxhat for this row, plus the two reduction terms of the chain rule.
        let mut sum_dxhat = 0.0;
        let mut sum_dxhat_xhat = 0.0;
        for j in 0..n {
            let xhat = (row[j] - mean) * inv;
            let dxhat = g_row[j] * gamma[j];
            dgamma[j] += g_row[j] * xhat;
            dbeta[j] += g_row[j];
            sum_dxhat += dxhat;
            sum_dxhat_xhat += dxhat * xhat;
        }
        let mean_dxhat = sum_dxhat / n as f64;
        let mean_dxhat_xhat = sum_dxhat_xhat / n as f64;
        for j in 0..n {
            let xhat = (row[j] - mean) * inv;
            let dxhat = g_row[j] * gamma[j];
            dx[i * n + j] = inv * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
        }
    }
    (dx, dgamma, dbeta)
}

/// Batch normalization of `x` (`b x n` row-major): each column is standardized
/// over the `b` rows of the current batch, then scaled and shifted.
pub fn batch_norm_forward(x: &[f64], b: usize, n: usize, gamma: &[f64], beta: &[f64], eps: f64) -> Vec<f64> {
    debug_assert_eq!(x.len(), b * n);
    debug_assert_eq!(gamma.len(), n);
    debug_assert_eq!(beta.len(), n);
    let mut out = vec![0.0; b * n];
    for j in 0..n {
        let (mean, var) = column_mean_var(x, b, n, j);
        let inv = 1.0 / (var + eps).sqrt();
        for i in 0..b {
            out[i * n + j] = gamma[j] * (x[i * n + j] - mean) * inv + beta[j];
        }
    }
    out
}

/// Gradients of [`batch_norm_forward`]. Returns `(dx, dgamma, dbeta)`.
pub fn batch_norm_backward(
    x: &[f64],
    b: usize,
    n: usize,
    gamma: &[f64],
    eps: f64,
    grad_out: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    debug_assert_eq!(x.len(), b * n);
    debug_assert_eq!(grad_out.len(), b * n);
    let mut dx = vec![0.0; b * n];
    let mut dgamma = vec![0.0; n];
    let mut dbeta = vec![0.0; n];
    for j in 0..n {
        let (mean, var) = column_mean_var(x, b, n, j);
        let inv = 1.0 / (var + eps).sqrt();

        let mut sum_dxhat = 0.0;
        let mut sum_dxhat_xhat = 0.0;
        for i in 0..b {
            let xhat = (x[i * n + j] - mean) * inv;
            let dxhat = grad_out[i * n + j] * gamma[j];
            dgamma[j] += grad_out[i * n + j] * xhat;
            dbeta[j] += grad_out[i * n + j];
            sum_dxhat += dxhat;
            sum_dxhat_xhat += dxhat * xhat;
        }
        let mean_dxhat = sum_dxhat / b as f64;
        let mean_dxhat_xhat = sum_dxhat_xhat / b as f64;
        for i in 0..b {
            let xhat = (x[i * n + j] - mean) * inv;
            let dxhat = grad_out[i * n + j] * gamma[j];
            dx[i * n + j] = inv * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
        }
    }
    (dx, dgamma, dbeta)
}

/// Mean and population variance of a slice.
fn mean_var(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var)
}

/// Mean and population variance of column `j` of a `b x n` row-major buffer.
fn column_mean_var(x: &[f64], b: usize, n: usize, j: usize) -> (f64, f64) {
    let bf = b as f64;
    let mut mean = 0.0;
    for i in 0..b {
        mean += x[i * n + j];
    }
    mean /= bf;
    let mut var = 0.0;
    for i in 0..b {
        let d = x[i * n + j] - mean;
        var += d * d;
    }
    (mean, var / bf)
}
