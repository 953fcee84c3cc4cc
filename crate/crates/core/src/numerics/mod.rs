//! Dense kernels, activations, normalization, seeded randomness and the
//! central-difference gradient oracle shared by the rest of the crate.

mod gradcheck;
mod matrix;
mod rng;

pub use gradcheck::{finite_diff_grad, grad_check, rel_error, GradCheckReport};
pub use matrix::Matrix;
pub use rng::RngStream;

use serde::{Deserialize, Serialize};

/// Train mode enables dropout; eval mode is deterministic.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
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

#[inline]
pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

/// d/dx silu(x) = σ(x)(1 + x(1 − σ(x))).
#[inline]
pub fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// Statistics kept from a layer-norm forward pass.
#[derive(Debug, Clone)]
pub struct LayerNormCache {
    pub x_hat: Vec<f64>,
    pub mean: f64,
    pub var: f64,
    pub inv_std: f64,
}

pub fn layer_norm_forward(
    v: &[f64],
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
) -> (Vec<f64>, LayerNormCache) {
    let d = v.len() as f64;
    let mean = v.iter().sum::<f64>() / d;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / d;
    let inv_std = 1.0 / (var + eps).sqrt();
    let x_hat: Vec<f64> = v.iter().map(|x| (x - mean) * inv_std).collect();
    let out = x_hat
        .iter()
        .zip(gamma)
        .zip(beta)
        .map(|((xh, g), b)| g * xh + b)
        .collect();
    (
        out,
        LayerNormCache {
            x_hat,
            mean,
            var,
            inv_std,
        },
    )
}

/// Returns the input gradient and accumulates into `d_gamma` / `d_beta`.
pub fn layer_norm_backward(
    cache: &LayerNormCache,
    gamma: &[f64],
    upstream: &[f64],
    d_gamma: &mut [f64],
    d_beta: &mut [f64],
) -> Vec<f64> {
    let d = upstream.len() as f64;
    let mut dxhat = Vec::with_capacity(upstream.len());
    for k in 0..upstream.len() {
        d_gamma[k] += upstream[k] * cache.x_hat[k];
        d_beta[k] += upstream[k];
        dxhat.push(upstream[k] * gamma[k]);
    }
    let sum_dxhat: f64 = dxhat.iter().sum();
    let sum_dxhat_xhat: f64 = dxhat.iter().zip(&cache.x_hat).map(|(a, b)| a * b).sum();
    dxhat
        .iter()
        .zip(&cache.x_hat)
        .map(|(g, xh)| cache.inv_std / d * (d * g - sum_dxhat - xh * sum_dxhat_xhat))
        .collect()
}

/// Inverted dropout. Returns the output and the per-element scale mask
/// (`0` or `1/(1-rate)`); eval mode and `rate == 0` return `None` and the
/// input unchanged.
pub fn dropout_forward(
    m: &Matrix,
    rate: f64,
    mode: Mode,
    rng: &RngStream,
) -> (Matrix, Option<Vec<f64>>) {
    assert!((0.0..1.0).contains(&rate), "dropout rate must be in [0, 1)");
    if mode == Mode::Eval || rate == 0.0 {
        return (m.clone(), None);
    }
    let keep = 1.0 / (1.0 - rate);
    let mask: Vec<f64> = rng
        .uniforms(m.as_slice().len())
        .into_iter()
        .map(|u| if u < rate { 0.0 } else { keep })
        .collect();
    let data = m.as_slice().iter().zip(&mask).map(|(v, k)| v * k).collect();
    let out = Matrix::new(m.rows(), m.cols(), data).expect("same shape");
    (out, Some(mask))
}

pub fn dropout_backward(upstream: &Matrix, mask: Option<&[f64]>) -> Matrix {
    match mask {
        None => upstream.clone(),
        Some(mask) => {
            let data = upstream
                .as_slice()
                .iter()
                .zip(mask)
                .map(|(g, k)| g * k)
                .collect();
            Matrix::new(upstream.rows(), upstream.cols(), data).expect("same shape")
        }
    }
}
