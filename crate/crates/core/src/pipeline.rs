//! End-to-end plumbing: split, standardize, window, fit and freeze the
//! forecaster, adapt, and evaluate against the channel-independent baseline.

use std::ops::Range;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::data::{fit_scaler, windows, MultivariateSeries, ScalerState, SplitSpec, WindowBatch};
use crate::error::{Error, Result};
use crate::forecaster::{fit_ridge_ar, fit_ridge_ar_with_intercept, FrozenForecaster};
use crate::fusion::FusionSpec;
use crate::numerics::{Matrix, Mode, RngStream};
use crate::objective::{mae, mse, omega, per_channel_mae, per_channel_mse};
use crate::surrogate::{DualSurrogateModel, SurrogateParams, Variant};
use crate::trainer::{grid_search, train, GridOutcome, TrainConfig, TrainData};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ForecasterKind {
    RidgeAr,
    Persistence,
    SeasonalNaive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ForecasterSpec {
    pub kind: ForecasterKind,
    pub order: usize,
    pub ridge_lambda: f64,
    pub season: usize,
    /// Adds a per-horizon intercept to ridge-AR (breaks oddness).
    pub intercept: bool,
}

impl Default for ForecasterSpec {
    fn default() -> Self {
        Self {
            kind: ForecasterKind::RidgeAr,
            order: 4,
            ridge_lambda: 1e-3,
            season: 24,
            intercept: false,
        }
    }
}

impl ForecasterSpec {
    /// Fits on `range` of an already standardized series; the result is frozen.
    pub fn build(
        &self,
        series: &MultivariateSeries,
        range: Range<usize>,
        lookback: usize,
        horizon: usize,
    ) -> Result<FrozenForecaster> {
        match self.kind {
            ForecasterKind::RidgeAr if self.intercept => fit_ridge_ar_with_intercept(
                series,
                range,
                self.order,
                self.ridge_lambda,
                lookback,
                horizon,
            ),
            ForecasterKind::RidgeAr => fit_ridge_ar(
                series,
                range,
                self.order,
                self.ridge_lambda,
                lookback,
                horizon,
            ),
            ForecasterKind::Persistence => FrozenForecaster::persistence(lookback, horizon),
            ForecasterKind::SeasonalNaive => {
                FrozenForecaster::seasonal_naive(lookback, horizon, self.season)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub lookback: usize,
    pub horizon: usize,
    pub train_frac: f64,
    pub val_frac: f64,
    /// Stride between consecutive training windows (validation/test use 1).
    pub stride: usize,
    pub forecaster: ForecasterSpec,
    pub fusion: FusionSpec,
    pub train: TrainConfig,
    /// Sweep `train.lr_grid`; otherwise train once at `train.lr`.
    pub search_lr: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            lookback: 96,
            horizon: 24,
            train_frac: 0.7,
            val_frac: 0.1,
            stride: 1,
            forecaster: ForecasterSpec::default(),
            fusion: FusionSpec::default(),
            train: TrainConfig::default(),
            search_lr: true,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lookback == 0 || self.horizon == 0 || self.stride == 0 {
            return Err(Error::Invalid(
                "lookback, horizon and stride must be >= 1".into(),
            ));
        }
        let fracs_ok =
            self.train_frac > 0.0 && self.val_frac > 0.0 && self.train_frac + self.val_frac < 1.0;
        if !fracs_ok {
            return Err(Error::Invalid(
                "need train_frac, val_frac > 0 with sum < 1".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.fusion.dropout) {
            return Err(Error::Invalid("dropout must lie in [0, 1)".into()));
        }
        self.train.validate()
    }

    pub fn split(&self, total: usize) -> Result<SplitSpec> {
        let split = SplitSpec::from_fractions(total, self.train_frac, self.val_frac);
        split.validate(total, self.lookback, self.horizon)?;
        Ok(split)
    }
}

/// A standardized series with its split, frozen forecaster and windows.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub series: MultivariateSeries,
    pub split: SplitSpec,
    pub scaler: ScalerState,
    pub forecaster: Arc<FrozenForecaster>,
    pub train: WindowBatch,
    pub val: WindowBatch,
    pub test: WindowBatch,
}

/// Splits, standardizes with train-only statistics, and windows `raw`.
/// Returns the standardized series, split and scaler.
pub fn standardize(
    raw: &MultivariateSeries,
    cfg: &PipelineConfig,
) -> Result<(MultivariateSeries, SplitSpec, ScalerState)> {
    cfg.validate()?;
    let split = cfg.split(raw.len())?;
    let scaler = fit_scaler(raw, split.train_range())?;
    Ok((scaler.apply(raw)?, split, scaler))
}

/// Windows an already standardized series against a given frozen forecaster.
pub fn prepare_with(
    series: MultivariateSeries,
    split: SplitSpec,
    scaler: ScalerState,
    forecaster: Arc<FrozenForecaster>,
    cfg: &PipelineConfig,
) -> Result<Prepared> {
    let (l, h) = (cfg.lookback, cfg.horizon);
    let batch =
        |r: Range<usize>, stride| WindowBatch::from_windows(&windows(&series, r, l, h, stride));
    let train = batch(split.train_range(), cfg.stride);
    let val = batch(split.val_range(), 1);
    let test = batch(split.test_range(), 1);
    Ok(Prepared {
        series,
        split,
        scaler,
        forecaster,
        train,
        val,
        test,
    })
}

/// Standardizes, fits and freezes the forecaster on the training rows, and
/// windows every split.
pub fn prepare(raw: &MultivariateSeries, cfg: &PipelineConfig) -> Result<Prepared> {
    let (series, split, scaler) = standardize(raw, cfg)?;
    let forecaster =
        cfg.forecaster
            .build(&series, split.train_range(), cfg.lookback, cfg.horizon)?;
    prepare_with(series, split, scaler, Arc::new(forecaster), cfg)
}

/// Fresh model in its initialization state; every call returns identical parameters.
pub fn build_model(prepared: &Prepared, cfg: &PipelineConfig) -> Result<DualSurrogateModel> {
    let c = prepared.series.channels();
    DualSurrogateModel::new(
        SurrogateParams::init(&cfg.fusion, c, cfg.train.seed),
        prepared.forecaster.clone(),
        cfg.train.variant,
    )
}

/// Trains per `cfg` (grid or single learning rate) and returns every report.
pub fn fit(
    prepared: &Prepared,
    cfg: &PipelineConfig,
    log: Option<&mut dyn std::io::Write>,
) -> Result<GridOutcome> {
    let data = TrainData::new(
        prepared.forecaster.as_ref(),
        prepared.train.clone(),
        prepared.val.clone(),
    )?;
    if cfg.search_lr {
        grid_search(|| build_model(prepared, cfg), &data, &cfg.train, log)
    } else {
        let out = train(build_model(prepared, cfg)?, &data, &cfg.train, log)?;
        Ok(GridOutcome {
            reports: vec![out.report.clone()],
            best_index: 0,
            best: out,
        })
    }
}

/// Original-space metrics for the baseline and the adapted model, with the
/// per-channel bound and the sufficient-condition verdict `Ω_i ≤ E_ori^i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub windows: usize,
    pub channels: usize,
    pub baseline_mse: f64,
    pub baseline_mae: f64,
    pub mse: f64,
    pub mae: f64,
    pub baseline_channel_mse: Vec<f64>,
    pub baseline_channel_mae: Vec<f64>,
    pub channel_mse: Vec<f64>,
    pub channel_mae: Vec<f64>,
    pub omega: Vec<f64>,
    pub condition: Vec<bool>,
}

impl EvalReport {
    /// `(baseline - ours) / baseline` for MSE.
    pub fn mse_gain(&self) -> f64 {
        (self.baseline_mse - self.mse) / self.baseline_mse
    }

    /// MSE averaged over a subset of channels, for the adapted model and the baseline.
    pub fn channel_subset_mse(&self, channels: Range<usize>) -> (f64, f64) {
        let n = channels.len() as f64;
        let ours = self.channel_mse[channels.clone()].iter().sum::<f64>() / n;
        let base = self.baseline_channel_mse[channels].iter().sum::<f64>() / n;
        (ours, base)
    }
}

pub fn evaluate(model: &DualSurrogateModel, batch: &WindowBatch) -> Result<EvalReport> {
    if model.variant == Variant::Single {
        return Err(Error::Unsupported(
            "the single variant has no original-space reconstruction",
        ));
    }
    if batch.is_empty() {
        return Err(Error::Invalid(
            "evaluation split produced no windows".into(),
        ));
    }
    if let Some(x) = batch.x.first() {
        if x.cols() != model.channels() {
            return Err(Error::shape(
                "evaluation channels",
                model.channels(),
                x.cols(),
            ));
        }
    }
    let base = model.baseline(&batch.x)?;
    let sb = model.surrogate_batch(
        &batch.x,
        &batch.y,
        Mode::Eval,
        &RngStream::new("dropout", 0),
    )?;
    let y_hat = model.predict(&batch.x)?;
    let pick = |f: fn(&crate::surrogate::WindowSurrogates) -> &Matrix| -> Vec<Matrix> {
        sb.windows.iter().map(|w| f(w).clone()).collect()
    };
    let e_alpha = per_channel_mse(&pick(|w| &w.pred_alpha), &pick(|w| &w.target_alpha))?;
    let e_beta = per_channel_mse(&pick(|w| &w.pred_beta), &pick(|w| &w.target_beta))?;
    let omega_v = omega(&model.params.weights, &e_alpha, &e_beta)?;
    let baseline_channel_mse = per_channel_mse(&base, &batch.y)?;
    let condition = omega_v
        .iter()
        .zip(&baseline_channel_mse)
        .map(|(o, e)| o <= e)
        .collect();
    Ok(EvalReport {
        windows: batch.len(),
        channels: model.channels(),
        baseline_mse: mse(&base, &batch.y)?,
        baseline_mae: mae(&base, &batch.y)?,
        mse: mse(&y_hat, &batch.y)?,
        mae: mae(&y_hat, &batch.y)?,
        baseline_channel_mae: per_channel_mae(&base, &batch.y)?,
        channel_mse: per_channel_mse(&y_hat, &batch.y)?,
        channel_mae: per_channel_mae(&y_hat, &batch.y)?,
        baseline_channel_mse,
        omega: omega_v,
        condition,
    })
}

/// Prepared data, training outcome and test-set evaluation of one run.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub prepared: Prepared,
    pub grid: GridOutcome,
    pub test: EvalReport,
}

pub fn run(prepared: Prepared, cfg: &PipelineConfig) -> Result<RunResult> {
    let grid = fit(&prepared, cfg, None)?;
    let test = evaluate(&grid.best.best, &prepared.test)?;
    Ok(RunResult {
        prepared,
        grid,
        test,
    })
}
