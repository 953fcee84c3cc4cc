//! Surrogate losses, the per-channel error bound `Ω`, the MAX regularizer and
//! the analytic gradient of the total objective.
//!
//! With `r_α = Ŝ_α - S̃_α` and `r_β = Ŝ_β - S̃_β` per window:
//!
//! ```text
//! E_α^i   = mean_{b,h} r_α[b,h,i]^2              (likewise E_β^i)
//! Ω_i     = 2 (E_α^i + E_β^i) / (w_α^i + w_β^i)^2
//! L_bound = mean_i max(Ω_i, E_ori^i)
//! L_total = (mean_i E_α^i + mean_i E_β^i) / 2 + λ L_bound
//! ```
//!
//! Gradients reach the trainable parameters through four routes: the input
//! surrogates (via the forecaster's vector-Jacobian product), the target
//! surrogates (directly, with a negative sign), the `(w_α + w_β)` factor of
//! `Ω`, and the λ scaling. `E_ori` is a detached constant.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::WindowBatch;
use crate::error::{Error, Result};
use crate::forecaster::{input_grad_channels, predict_channels, Forecaster};
use crate::numerics::{Matrix, Mode, RngStream};
use crate::surrogate::{
    DualSurrogateModel, SurrogateParams, SurrogateWeights, Variant, WindowSurrogates,
};

fn check_pair(a: &[Matrix], b: &[Matrix]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::shape("metric batch size", a.len(), b.len()));
    }
    for (x, y) in a.iter().zip(b) {
        if x.shape() != y.shape() {
            return Err(Error::shape(
                "metric window",
                format!("{:?}", x.shape()),
                format!("{:?}", y.shape()),
            ));
        }
    }
    Ok(())
}

fn mean_of(a: &[Matrix], b: &[Matrix], f: impl Fn(f64) -> f64) -> Result<f64> {
    check_pair(a, b)?;
    let mut sum = 0.0;
    let mut n = 0usize;
    for (x, y) in a.iter().zip(b) {
        for (u, v) in x.as_slice().iter().zip(y.as_slice()) {
            sum += f(u - v);
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Invalid("metric over an empty batch".into()));
    }
    Ok(sum / n as f64)
}

/// Mean squared error over every element of a batch of matrices.
pub fn mse(a: &[Matrix], b: &[Matrix]) -> Result<f64> {
    mean_of(a, b, |d| d * d)
}

/// Mean absolute error over every element of a batch of matrices.
pub fn mae(a: &[Matrix], b: &[Matrix]) -> Result<f64> {
    mean_of(a, b, f64::abs)
}

fn per_channel(a: &[Matrix], b: &[Matrix], f: impl Fn(f64) -> f64) -> Result<Vec<f64>> {
    check_pair(a, b)?;
    let cols = a.first().map_or(0, Matrix::cols);
    let mut sums = vec![0.0; cols];
    let mut rows = 0usize;
    for (x, y) in a.iter().zip(b) {
        for t in 0..x.rows() {
            for (c, (u, v)) in x.row(t).iter().zip(y.row(t)).enumerate() {
                sums[c] += f(u - v);
            }
        }
        rows += x.rows();
    }
    if rows == 0 {
        return Err(Error::Invalid("metric over an empty batch".into()));
    }
    Ok(sums.into_iter().map(|s| s / rows as f64).collect())
}

/// Per-channel MSE, averaged over batch and horizon.
pub fn per_channel_mse(a: &[Matrix], b: &[Matrix]) -> Result<Vec<f64>> {
    per_channel(a, b, |d| d * d)
}

pub fn per_channel_mae(a: &[Matrix], b: &[Matrix]) -> Result<Vec<f64>> {
    per_channel(a, b, f64::abs)
}

fn channel_mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurrogateLosses {
    pub l_alpha: f64,
    pub l_beta: f64,
    pub e_alpha: Vec<f64>,
    pub e_beta: Vec<f64>,
}

/// Channel-averaged surrogate MSEs, keeping the per-channel values for `Ω`.
pub fn surrogate_losses(
    pred_alpha: &[Matrix],
    target_alpha: &[Matrix],
    pred_beta: &[Matrix],
    target_beta: &[Matrix],
) -> Result<SurrogateLosses> {
    let e_alpha = per_channel_mse(pred_alpha, target_alpha)?;
    let e_beta = per_channel_mse(pred_beta, target_beta)?;
    Ok(SurrogateLosses {
        l_alpha: channel_mean(&e_alpha),
        l_beta: channel_mean(&e_beta),
        e_alpha,
        e_beta,
    })
}

/// `Ω_i = 2 (E_α^i + E_β^i) / (w_α^i + w_β^i)^2`.
pub fn omega(weights: &SurrogateWeights, e_alpha: &[f64], e_beta: &[f64]) -> Result<Vec<f64>> {
    let denominators = weights.denominators()?;
    if e_alpha.len() != denominators.len() || e_beta.len() != denominators.len() {
        return Err(Error::shape(
            "omega",
            denominators.len(),
            e_alpha.len().max(e_beta.len()),
        ));
    }
    Ok(denominators
        .iter()
        .zip(e_alpha.iter().zip(e_beta))
        .map(|(s, (a, b))| 2.0 * (a + b) / (s * s))
        .collect())
}

/// Channels on which the `Ω` branch of the MAX is taken (ties included).
pub fn bound_active(omega: &[f64], e_ori: &[f64]) -> Vec<bool> {
    omega.iter().zip(e_ori).map(|(o, e)| o >= e).collect()
}

/// `mean_i max(Ω_i, E_ori^i)`.
pub fn l_bound(omega: &[f64], e_ori: &[f64]) -> Result<f64> {
    if omega.len() != e_ori.len() || omega.is_empty() {
        return Err(Error::shape("l_bound", omega.len(), e_ori.len()));
    }
    Ok(channel_mean(
        &omega
            .iter()
            .zip(e_ori)
            .map(|(o, e)| o.max(*e))
            .collect::<Vec<_>>(),
    ))
}

pub fn total_loss(l_alpha: f64, l_beta: f64, l_bound: f64, lambda: f64) -> f64 {
    (l_alpha + l_beta) / 2.0 + lambda * l_bound
}

/// Loss terms for one batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_alpha: f64,
    pub l_beta: f64,
    pub e_alpha: Vec<f64>,
    pub e_beta: Vec<f64>,
    pub omega: Vec<f64>,
    pub e_ori: Vec<f64>,
    pub l_bound: f64,
    /// Weight applied to `l_bound` in `l_total` (zero when the regularizer is off).
    pub lambda: f64,
    pub l_total: f64,
}

impl LossBreakdown {
    /// Element-wise mean of several breakdowns (used for epoch summaries).
    pub fn mean(items: &[LossBreakdown]) -> Option<LossBreakdown> {
        let first = items.first()?;
        let n = items.len() as f64;
        let avg = |f: &dyn Fn(&LossBreakdown) -> f64| items.iter().map(f).sum::<f64>() / n;
        let avg_vec = |f: &dyn Fn(&LossBreakdown) -> &Vec<f64>| -> Vec<f64> {
            (0..f(first).len())
                .map(|k| items.iter().map(|b| f(b)[k]).sum::<f64>() / n)
                .collect()
        };
        Some(LossBreakdown {
            l_alpha: avg(&|b| b.l_alpha),
            l_beta: avg(&|b| b.l_beta),
            e_alpha: avg_vec(&|b| &b.e_alpha),
            e_beta: avg_vec(&|b| &b.e_beta),
            omega: avg_vec(&|b| &b.omega),
            e_ori: avg_vec(&|b| &b.e_ori),
            l_bound: avg(&|b| b.l_bound),
            lambda: first.lambda,
            l_total: avg(&|b| b.l_total),
        })
    }
}

/// Frozen-forecaster predictions on the raw inputs and their per-channel MSE.
/// Carries no gradient.
#[derive(Debug, Clone)]
pub struct ChannelBaseline {
    pub y_hat_ori: Vec<Matrix>,
    pub e_ori: Vec<f64>,
}

impl ChannelBaseline {
    pub fn compute<F: Forecaster + ?Sized>(forecaster: &F, batch: &WindowBatch) -> Result<Self> {
        let y_hat_ori = batch
            .x
            .par_iter()
            .map(|x| predict_channels(forecaster, x))
            .collect::<Result<Vec<_>>>()?;
        let e_ori = per_channel_mse(&y_hat_ori, &batch.y)?;
        Ok(Self { y_hat_ori, e_ori })
    }
}

/// Loss, gradient and the bytes held by forward caches for one batch.
#[derive(Debug, Clone)]
pub struct BatchGrads {
    pub loss: LossBreakdown,
    pub grads: SurrogateParams,
    pub cache_bytes: usize,
}

struct Forwarded {
    windows: Vec<WindowSurrogates>,
    res_alpha: Vec<Matrix>,
    res_beta: Vec<Matrix>,
    loss: LossBreakdown,
    /// `∂L/∂E_α^i`, `∂L/∂E_β^i` and the direct `∂L/∂(w_α^i + w_β^i)`.
    coef_alpha: Vec<f64>,
    coef_beta: Vec<f64>,
    d_denominator: Vec<f64>,
}

fn forward_losses(
    model: &DualSurrogateModel,
    batch: &WindowBatch,
    baseline: &ChannelBaseline,
    lambda: f64,
    mode: Mode,
    rng: &RngStream,
) -> Result<Forwarded> {
    if batch.is_empty() {
        return Err(Error::Invalid("empty batch".into()));
    }
    let c = model.channels();
    if baseline.e_ori.len() != c || baseline.y_hat_ori.len() != batch.len() {
        return Err(Error::Invalid(
            "baseline was not computed for this batch (missing cache)".into(),
        ));
    }
    let sb = model.surrogate_batch(&batch.x, &batch.y, mode, rng)?;
    let windows = sb.windows;
    let res_alpha: Vec<Matrix> = windows
        .iter()
        .map(|w| w.pred_alpha.sub(&w.target_alpha))
        .collect::<Result<_>>()?;
    let zero_e = vec![0.0; c];
    let n = (batch.len() * model.forecaster.horizon()) as f64;
    let sq_per_channel = |res: &[Matrix]| {
        let mut e = vec![0.0; c];
        for r in res {
            for t in 0..r.rows() {
                for (k, v) in r.row(t).iter().enumerate() {
                    e[k] += v * v;
                }
            }
        }
        e.into_iter().map(|s| s / n).collect::<Vec<f64>>()
    };
    let e_alpha = sq_per_channel(&res_alpha);
    let cf = c as f64;

    if model.variant == Variant::Single {
        let l_alpha = channel_mean(&e_alpha);
        return Ok(Forwarded {
            windows,
            res_alpha,
            res_beta: Vec::new(),
            loss: LossBreakdown {
                l_alpha,
                l_beta: 0.0,
                e_alpha,
                e_beta: zero_e,
                omega: Vec::new(),
                e_ori: baseline.e_ori.clone(),
                l_bound: 0.0,
                lambda: 0.0,
                l_total: l_alpha,
            },
            coef_alpha: vec![1.0 / cf; c],
            coef_beta: vec![0.0; c],
            d_denominator: vec![0.0; c],
        });
    }

    let res_beta: Vec<Matrix> = windows
        .iter()
        .map(|w| w.pred_beta.sub(&w.target_beta))
        .collect::<Result<_>>()?;
    let e_beta = sq_per_channel(&res_beta);
    let omega_v = omega(&model.params.weights, &e_alpha, &e_beta)?;
    let l_bound_v = l_bound(&omega_v, &baseline.e_ori)?;
    let l_alpha = channel_mean(&e_alpha);
    let l_beta = channel_mean(&e_beta);
    let active = bound_active(&omega_v, &baseline.e_ori);
    let denominators = model.params.weights.denominators()?;

    let mut coef_alpha = vec![0.0; c];
    let mut coef_beta = vec![0.0; c];
    let mut d_denominator = vec![0.0; c];
    for i in 0..c {
        let reg = if active[i] { lambda / cf } else { 0.0 };
        let s = denominators[i];
        coef_alpha[i] = 1.0 / (2.0 * cf) + reg * 2.0 / (s * s);
        coef_beta[i] = coef_alpha[i];
        d_denominator[i] = -reg * 2.0 * omega_v[i] / s;
    }
    Ok(Forwarded {
        windows,
        res_alpha,
        res_beta,
        loss: LossBreakdown {
            l_alpha,
            l_beta,
            e_alpha,
            e_beta,
            omega: omega_v,
            e_ori: baseline.e_ori.clone(),
            l_bound: l_bound_v,
            lambda,
            l_total: total_loss(l_alpha, l_beta, l_bound_v, lambda),
        },
        coef_alpha,
        coef_beta,
        d_denominator,
    })
}

/// Loss terms only (no backward pass).
pub fn batch_loss(
    model: &DualSurrogateModel,
    batch: &WindowBatch,
    baseline: &ChannelBaseline,
    lambda: f64,
    mode: Mode,
    rng: &RngStream,
) -> Result<LossBreakdown> {
    Ok(forward_losses(model, batch, baseline, lambda, mode, rng)?.loss)
}

/// Scales each column `i` of `m` by `k[i]`.
fn scale_columns(m: &Matrix, k: &[f64]) -> Matrix {
    Matrix::from_fn(m.rows(), m.cols(), |t, c| m[(t, c)] * k[c])
}

/// Loss breakdown and analytic gradients with respect to every trainable
/// tensor. `lambda` is the effective regularizer weight.
pub fn batch_grads(
    model: &DualSurrogateModel,
    batch: &WindowBatch,
    baseline: &ChannelBaseline,
    lambda: f64,
    mode: Mode,
    rng: &RngStream,
) -> Result<BatchGrads> {
    let fw = forward_losses(model, batch, baseline, lambda, mode, rng)?;
    let c = model.channels();
    let n = (batch.len() * model.forecaster.horizon()) as f64;
    let k_alpha: Vec<f64> = fw.coef_alpha.iter().map(|v| 2.0 * v / n).collect();
    let k_beta: Vec<f64> = fw.coef_beta.iter().map(|v| 2.0 * v / n).collect();
    let dual = model.variant == Variant::Dual;
    let forecaster = model.forecaster.as_ref();
    let params = &model.params;

    let per_window: Vec<SurrogateParams> = (0..batch.len())
        .into_par_iter()
        .map(|b| {
            let w = &fw.windows[b];
            let (x, y) = (&batch.x[b], &batch.y[b]);
            let mut g = params.zeros_like();
            // ∂L/∂Ŝ_α; the target surrogate receives the negative.
            let g_alpha = scale_columns(&fw.res_alpha[b], &k_alpha);
            let ds_alpha = input_grad_channels(forecaster, &w.s_alpha, &g_alpha)?;
            let mut d_fx = ds_alpha.clone();
            let mut d_fy = g_alpha.scale(-1.0);
            for i in 0..c {
                let mut acc = 0.0;
                for t in 0..x.rows() {
                    acc += ds_alpha[(t, i)] * x[(t, i)];
                }
                for h in 0..y.rows() {
                    acc -= g_alpha[(h, i)] * y[(h, i)];
                }
                g.weights.w_alpha[i] += acc;
            }
            if dual {
                let g_beta = scale_columns(&fw.res_beta[b], &k_beta);
                let ds_beta = input_grad_channels(forecaster, &w.s_beta, &g_beta)?;
                d_fx.add_assign(&ds_beta)?;
                d_fy.add_assign(&g_beta.scale(-1.0))?;
                for i in 0..c {
                    // S_β = f - w_β ⊙ X and S̃_β = f - w_β ⊙ Y flip both signs.
                    let mut acc = 0.0;
                    for t in 0..x.rows() {
                        acc -= ds_beta[(t, i)] * x[(t, i)];
                    }
                    for h in 0..y.rows() {
                        acc += g_beta[(h, i)] * y[(h, i)];
                    }
                    g.weights.w_beta[i] += acc;
                }
            }
            params.fusion.backward(&w.cache_x, &d_fx, &mut g.fusion)?;
            params.fusion.backward(&w.cache_y, &d_fy, &mut g.fusion)?;
            Ok(g)
        })
        .collect::<Result<_>>()?;

    let mut grads = params.zeros_like();
    for g in &per_window {
        grads.accumulate(g);
    }
    for i in 0..c {
        grads.weights.w_alpha[i] += fw.d_denominator[i];
        grads.weights.w_beta[i] += fw.d_denominator[i];
    }
    let cache_bytes = fw
        .windows
        .iter()
        .map(|w| {
            w.cache_x.bytes()
                + w.cache_y.bytes()
                + 8 * (w.s_alpha.as_slice().len() * 2
                    + w.target_alpha.as_slice().len() * 2
                    + w.pred_alpha.as_slice().len() * 2)
        })
        .sum();
    Ok(BatchGrads {
        loss: fw.loss,
        grads,
        cache_bytes,
    })
}
