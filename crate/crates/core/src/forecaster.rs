//! Frozen univariate forecasters.
//!
//! These stand in for a pretrained univariate model: they map a length-`L`
//! history to a length-`H` forecast and expose a vector-Jacobian product so
//! surrogate losses can be differentiated through them. Parameters are fixed
//! at construction; nothing here offers mutable access.

use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{windows, MultivariateSeries};
use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// Contract every frozen forecaster satisfies.
pub trait Forecaster: Send + Sync {
    fn lookback(&self) -> usize;
    fn horizon(&self) -> usize;
    /// True iff `predict(-x) == -predict(x)` for every `x`.
    fn odd_linear(&self) -> bool;
    fn predict(&self, x: &[f64]) -> Result<Vec<f64>>;
    /// `J(x)^T upstream`, where `J` is the Jacobian of `predict` at `x`.
    fn input_grad(&self, x: &[f64], upstream: &[f64]) -> Result<Vec<f64>>;
}

/// Each channel of `x` (`L x C`) forecast independently into an `H x C` matrix.
pub fn predict_channels<F: Forecaster + ?Sized>(model: &F, x: &Matrix) -> Result<Matrix> {
    let mut out = Matrix::zeros(model.horizon(), x.cols());
    for c in 0..x.cols() {
        out.set_col(c, &model.predict(&x.col(c))?);
    }
    Ok(out)
}

/// Channel-wise vector-Jacobian product: `upstream` is `H x C`, result `L x C`.
pub fn input_grad_channels<F: Forecaster + ?Sized>(
    model: &F,
    x: &Matrix,
    upstream: &Matrix,
) -> Result<Matrix> {
    let mut out = Matrix::zeros(model.lookback(), x.cols());
    for c in 0..x.cols() {
        out.set_col(c, &model.input_grad(&x.col(c), &upstream.col(c))?);
    }
    Ok(out)
}

fn check_len(context: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::shape(context, expected, actual));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RidgeArParams {
    pub order: usize,
    /// `H x p`; column `k` multiplies `x[L - p + k]`.
    pub coefficients: Matrix,
    pub ridge_lambda: f64,
    /// Per-horizon intercept. `None` keeps the map odd.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub intercept: Option<Vec<f64>>,
}

/// Serializable frozen forecaster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FrozenForecaster {
    Persistence {
        lookback: usize,
        horizon: usize,
    },
    SeasonalNaive {
        lookback: usize,
        horizon: usize,
        season: usize,
    },
    RidgeAr {
        lookback: usize,
        horizon: usize,
        params: RidgeArParams,
    },
}

impl FrozenForecaster {
    pub fn persistence(lookback: usize, horizon: usize) -> Result<Self> {
        if lookback == 0 || horizon == 0 {
            return Err(Error::Invalid("lookback and horizon must be >= 1".into()));
        }
        Ok(Self::Persistence { lookback, horizon })
    }

    pub fn seasonal_naive(lookback: usize, horizon: usize, season: usize) -> Result<Self> {
        if season == 0 || season > lookback || horizon == 0 {
            return Err(Error::Invalid(format!(
                "season must be in 1..={lookback}, got {season}"
            )));
        }
        Ok(Self::SeasonalNaive {
            lookback,
            horizon,
            season,
        })
    }

    pub fn ridge_ar(lookback: usize, params: RidgeArParams) -> Result<Self> {
        let (h, p) = params.coefficients.shape();
        if p != params.order || p == 0 || p > lookback || h == 0 {
            return Err(Error::Invalid(format!(
                "ridge-AR order {} incompatible with {h}x{p} coefficients and lookback {lookback}",
                params.order
            )));
        }
        if !params.coefficients.is_finite() {
            return Err(Error::Invalid(
                "ridge-AR coefficients must be finite".into(),
            ));
        }
        if let Some(b) = &params.intercept {
            check_len("ridge-AR intercept", h, b.len())?;
        }
        Ok(Self::RidgeAr {
            lookback,
            horizon: h,
            params,
        })
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Self::Persistence { .. } => "persistence",
            Self::SeasonalNaive { .. } => "seasonal_naive",
            Self::RidgeAr { .. } => "ridge_ar",
        }
    }

    /// SHA-256 over the canonical JSON encoding.
    pub fn digest(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("forecaster serializes");
        hex::encode(Sha256::digest(&bytes))
    }
}

impl Forecaster for FrozenForecaster {
    fn lookback(&self) -> usize {
        match self {
            Self::Persistence { lookback, .. }
            | Self::SeasonalNaive { lookback, .. }
            | Self::RidgeAr { lookback, .. } => *lookback,
        }
    }

    fn horizon(&self) -> usize {
        match self {
            Self::Persistence { horizon, .. }
            | Self::SeasonalNaive { horizon, .. }
            | Self::RidgeAr { horizon, .. } => *horizon,
        }
    }

    fn odd_linear(&self) -> bool {
        match self {
            Self::RidgeAr { params, .. } => params.intercept.is_none(),
            _ => true,
        }
    }

    fn predict(&self, x: &[f64]) -> Result<Vec<f64>> {
        let l = self.lookback();
        check_len("predict input", l, x.len())?;
        Ok(match self {
            Self::Persistence { horizon, .. } => vec![x[l - 1]; *horizon],
            Self::SeasonalNaive {
                horizon, season, ..
            } => (0..*horizon).map(|h| x[l - season + h % season]).collect(),
            Self::RidgeAr { params, .. } => {
                let tail = &x[l - params.order..];
                (0..params.coefficients.rows())
                    .map(|h| {
                        let dot: f64 = params
                            .coefficients
                            .row(h)
                            .iter()
                            .zip(tail)
                            .map(|(a, b)| a * b)
                            .sum();
                        dot + params.intercept.as_ref().map_or(0.0, |b| b[h])
                    })
                    .collect()
            }
        })
    }

    fn input_grad(&self, x: &[f64], upstream: &[f64]) -> Result<Vec<f64>> {
        let l = self.lookback();
        check_len("input_grad input", l, x.len())?;
        check_len("input_grad upstream", self.horizon(), upstream.len())?;
        let mut grad = vec![0.0; l];
        match self {
            Self::Persistence { .. } => grad[l - 1] = upstream.iter().sum(),
            Self::SeasonalNaive { season, .. } => {
                for (h, u) in upstream.iter().enumerate() {
                    grad[l - season + h % season] += u;
                }
            }
            Self::RidgeAr { params, .. } => {
                let offset = l - params.order;
                for (h, u) in upstream.iter().enumerate() {
                    for (k, a) in params.coefficients.row(h).iter().enumerate() {
                        grad[offset + k] += a * u;
                    }
                }
            }
        }
        Ok(grad)
    }
}

/// Direct multi-step ridge autoregression pooled over every channel of the
/// training rows, mirroring channel-independent pretraining.
///
/// Each horizon step `h` gets its own coefficient row solving
/// `(A^T A + λI) w_h = A^T y_h`, where the rows of `A` are the last `order`
/// values of every training lookback window.
pub fn fit_ridge_ar(
    series: &MultivariateSeries,
    range: Range<usize>,
    order: usize,
    ridge_lambda: f64,
    lookback: usize,
    horizon: usize,
) -> Result<FrozenForecaster> {
    fit_ridge_ar_impl(series, range, order, ridge_lambda, lookback, horizon, false)
}

/// Like [`fit_ridge_ar`] plus a per-horizon intercept, penalized like the
/// other coefficients. The result is not odd.
pub fn fit_ridge_ar_with_intercept(
    series: &MultivariateSeries,
    range: Range<usize>,
    order: usize,
    ridge_lambda: f64,
    lookback: usize,
    horizon: usize,
) -> Result<FrozenForecaster> {
    fit_ridge_ar_impl(series, range, order, ridge_lambda, lookback, horizon, true)
}

fn fit_ridge_ar_impl(
    series: &MultivariateSeries,
    range: Range<usize>,
    order: usize,
    ridge_lambda: f64,
    lookback: usize,
    horizon: usize,
    intercept: bool,
) -> Result<FrozenForecaster> {
    if order == 0 || order > lookback {
        return Err(Error::Invalid(format!(
            "order must be in 1..={lookback}, got {order}"
        )));
    }
    if ridge_lambda < 0.0 {
        return Err(Error::Invalid("ridge_lambda must be >= 0".into()));
    }
    let ws = windows(series, range, lookback, horizon, 1);
    if ws.is_empty() {
        return Err(Error::Invalid(
            "training range too short for a single window".into(),
        ));
    }
    let width = order + usize::from(intercept);
    let mut gram = DMatrix::<f64>::zeros(width, width);
    let mut cross = DMatrix::<f64>::zeros(width, horizon);
    let mut feature = DVector::<f64>::zeros(width);
    for w in &ws {
        for c in 0..series.channels() {
            for k in 0..order {
                feature[k] = w.x[(lookback - order + k, c)];
            }
            if intercept {
                feature[order] = 1.0;
            }
            gram.ger(1.0, &feature, &feature, 1.0);
            for h in 0..horizon {
                let y = w.y[(h, c)];
                for k in 0..width {
                    cross[(k, h)] += feature[k] * y;
                }
            }
        }
    }
    for k in 0..width {
        gram[(k, k)] += ridge_lambda;
    }
    let chol = gram.cholesky().ok_or(Error::Singular)?;
    let solution = chol.solve(&cross);
    if solution.iter().any(|v| !v.is_finite()) {
        return Err(Error::Singular);
    }
    let coefficients = Matrix::from_fn(horizon, order, |h, k| solution[(k, h)]);
    let intercept = intercept.then(|| (0..horizon).map(|h| solution[(order, h)]).collect());
    FrozenForecaster::ridge_ar(
        lookback,
        RidgeArParams {
            order,
            coefficients,
            ridge_lambda,
            intercept,
        },
    )
}
