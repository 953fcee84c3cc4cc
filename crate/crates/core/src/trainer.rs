//! Optimization loop: AdamW with decoupled weight decay, a per-epoch cosine
//! schedule, early stopping on validation error, learning-rate grid search and
//! a per-tensor gradient-stability tracker.
//!
//! Everything that goes into a [`TrainReport`] is a pure function of the
//! inputs and the seed; wall-clock timings travel separately in
//! [`TrainOutcome::epoch_seconds`] so reports stay byte-identical across runs.

use std::collections::BTreeMap;
use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::WindowBatch;
use crate::error::{Error, Result};
use crate::forecaster::Forecaster;
use crate::numerics::{Matrix, Mode, RngStream};
use crate::objective::{
    batch_grads, batch_loss, mae, mse, per_channel_mse, ChannelBaseline, LossBreakdown,
};
use crate::surrogate::{DualSurrogateModel, ModelCheckpoint, SurrogateParams, Variant};

/// Steps per aggregation bucket in the gradient-stability series.
pub const STABILITY_WINDOW: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub lambda: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub t_max: usize,
    pub eta_min: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub lr_grid: Vec<f64>,
    pub use_bound_reg: bool,
    pub variant: Variant,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            epochs: 10,
            patience: 3,
            batch_size: 32,
            lambda: 1.0,
            beta1: 0.9,
            beta2: 0.95,
            weight_decay: 1e-3,
            t_max: 10,
            eta_min: 1e-8,
            adam_eps: 1e-8,
            seed: 0,
            lr_grid: vec![1e-1, 1e-2, 1e-3, 1e-4],
            use_bound_reg: true,
            variant: Variant::Dual,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Invalid(m.to_string()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda must be non-negative");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.t_max == 0 {
            return bad("t_max must be at least 1");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must lie in [0, 1)");
        }
        if self.lr_grid.iter().any(|v| !(*v > 0.0)) {
            return bad("every lr_grid entry must be positive");
        }
        Ok(())
    }

    /// λ actually applied to `L_bound` (zero in the unregularized ablation arm).
    pub fn effective_lambda(&self) -> f64 {
        if self.use_bound_reg {
            self.lambda
        } else {
            0.0
        }
    }
}

/// `η = η_min + (η_0 - η_min)(1 + cos(π min(e, T) / T)) / 2`.
pub fn cosine_lr(epoch: usize, lr0: f64, t_max: usize, eta_min: f64) -> f64 {
    if epoch == 0 {
        return lr0;
    }
    if epoch >= t_max {
        return eta_min;
    }
    let phase = std::f64::consts::PI * epoch as f64 / t_max as f64;
    eta_min + (lr0 - eta_min) * (1.0 + phase.cos()) / 2.0
}

/// First and second moments in `SurrogateParams::flatten` order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamWState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamWState {
    pub fn new(params: &SurrogateParams) -> Self {
        let n = params.param_count();
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }

    pub fn bytes(&self) -> usize {
        8 * (self.m.len() + self.v.len())
    }
}

/// One decoupled AdamW update, in place. Fails before touching anything if a
/// gradient is non-finite.
pub fn adamw_step(
    state: &mut AdamWState,
    params: &mut SurrogateParams,
    grads: &SurrogateParams,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    if state.m.len() != params.param_count() || grads.param_count() != params.param_count() {
        return Err(Error::shape(
            "adamw buffers",
            params.param_count(),
            grads.param_count(),
        ));
    }
    for (name, g) in grads.tensors() {
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                tensor: name.to_string(),
            });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let mut offset = 0;
    for ((_, p), (_, g)) in params.tensors_mut().into_iter().zip(grads.tensors()) {
        for (k, (p, g)) in p.iter_mut().zip(g).enumerate() {
            let m = &mut state.m[offset + k];
            let v = &mut state.v[offset + k];
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p = *p - lr * m_hat / (v_hat.sqrt() + cfg.adam_eps) - lr * cfg.weight_decay * *p;
        }
        offset += g.len();
    }
    Ok(())
}

/// `‖g_t - g_{t-1}‖₂` per named tensor.
pub fn grad_stability_log(
    current: &SurrogateParams,
    previous: &SurrogateParams,
) -> Vec<(String, f64)> {
    current
        .tensors()
        .into_iter()
        .zip(previous.tensors())
        .map(|((name, a), (_, b))| {
            let d = a
                .iter()
                .zip(b)
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt();
            (name.to_string(), d)
        })
        .collect()
}

/// Means over consecutive buckets of `window` values; a partial tail bucket
/// is averaged over its own length.
pub fn aggregate_mean(series: &[f64], window: usize) -> Vec<f64> {
    series
        .chunks(window.max(1))
        .map(|c| c.iter().sum::<f64>() / c.len() as f64)
        .collect()
}

/// Raw and bucketed gradient distances per tensor.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GradStability {
    pub raw: BTreeMap<String, Vec<f64>>,
    pub aggregated: BTreeMap<String, Vec<f64>>,
}

impl GradStability {
    fn push(&mut self, distances: Vec<(String, f64)>) {
        for (name, d) in distances {
            self.raw.entry(name).or_default().push(d);
        }
    }

    fn finish(&mut self) {
        self.aggregated = self
            .raw
            .iter()
            .map(|(k, v)| (k.clone(), aggregate_mean(v, STABILITY_WINDOW)))
            .collect();
    }

    /// Mean of every aggregated value across all tensors.
    pub fn overall_mean(&self) -> Option<f64> {
        let all: Vec<f64> = self.aggregated.values().flatten().copied().collect();
        (!all.is_empty()).then(|| all.iter().sum::<f64>() / all.len() as f64)
    }
}

/// Metrics after an epoch; epoch 0 is the initialization state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: Option<f64>,
    pub train_loss: Option<LossBreakdown>,
    /// Reconstructed-forecast errors; absent for the single variant.
    pub val_mse: Option<f64>,
    pub val_mae: Option<f64>,
    pub val_surrogate_loss: f64,
    /// The value early stopping and model selection act on.
    pub selection_metric: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbortInfo {
    pub epoch: usize,
    pub step: u64,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub config: TrainConfig,
    pub init_digest: String,
    pub forecaster_digest: String,
    pub train_windows: usize,
    pub val_windows: usize,
    pub baseline_val_mse: f64,
    pub baseline_val_mae: f64,
    pub baseline_val_channel_mse: Vec<f64>,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_selection_metric: f64,
    pub best_params_digest: String,
    pub steps: u64,
    pub stopped_early: bool,
    pub aborted: Option<AbortInfo>,
    pub grad_stability: GradStability,
    pub peak_buffer_bytes: usize,
}

impl TrainReport {
    pub fn best(&self) -> &EpochRecord {
        &self.epochs[self.best_epoch]
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// A report plus the selected model and out-of-band artifacts.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub report: TrainReport,
    pub best: DualSurrogateModel,
    /// Parameters at the moment a run was aborted, for diagnosis.
    pub diagnostic: Option<ModelCheckpoint>,
    pub epoch_seconds: Vec<f64>,
}

/// Training and validation windows, with the frozen forecaster's predictions
/// on the raw inputs cached once (the forecaster never changes).
pub struct TrainData {
    pub train: WindowBatch,
    pub val: WindowBatch,
    train_baseline: Vec<Matrix>,
    val_baseline: ChannelBaseline,
}

impl TrainData {
    pub fn new<F: Forecaster + ?Sized>(
        forecaster: &F,
        train: WindowBatch,
        val: WindowBatch,
    ) -> Result<Self> {
        if val.is_empty() {
            return Err(Error::Invalid(
                "validation split produced no windows".into(),
            ));
        }
        let train_baseline = if train.is_empty() {
            Vec::new()
        } else {
            ChannelBaseline::compute(forecaster, &train)?.y_hat_ori
        };
        let val_baseline = ChannelBaseline::compute(forecaster, &val)?;
        Ok(Self {
            train,
            val,
            train_baseline,
            val_baseline,
        })
    }

    fn batch(&self, idx: &[usize]) -> Result<(WindowBatch, ChannelBaseline)> {
        let batch = WindowBatch {
            x: idx.iter().map(|&i| self.train.x[i].clone()).collect(),
            y: idx.iter().map(|&i| self.train.y[i].clone()).collect(),
            start_indices: idx.iter().map(|&i| self.train.start_indices[i]).collect(),
        };
        let y_hat_ori: Vec<Matrix> = idx
            .iter()
            .map(|&i| self.train_baseline[i].clone())
            .collect();
        let e_ori = per_channel_mse(&y_hat_ori, &batch.y)?;
        Ok((batch, ChannelBaseline { y_hat_ori, e_ori }))
    }
}

fn evaluate(
    model: &DualSurrogateModel,
    data: &TrainData,
    lambda: f64,
) -> Result<(Option<f64>, Option<f64>, f64)> {
    let surrogate = batch_loss(
        model,
        &data.val,
        &data.val_baseline,
        lambda,
        Mode::Eval,
        &RngStream::new("dropout", 0),
    )?
    .l_total;
    match model.variant {
        Variant::Dual => {
            let y_hat = model.predict(&data.val.x)?;
            Ok((
                Some(mse(&y_hat, &data.val.y)?),
                Some(mae(&y_hat, &data.val.y)?),
                surrogate,
            ))
        }
        Variant::Single => Ok((None, None, surrogate)),
    }
}

fn record(
    epoch: usize,
    lr: Option<f64>,
    train_loss: Option<LossBreakdown>,
    m: (Option<f64>, Option<f64>, f64),
) -> EpochRecord {
    EpochRecord {
        epoch,
        lr,
        train_loss,
        val_mse: m.0,
        val_mae: m.1,
        val_surrogate_loss: m.2,
        selection_metric: m.0.unwrap_or(m.2),
    }
}

/// Trains `model` in place of a copy and returns the best-by-validation state.
///
/// Each optimizer step appends one JSON object (`epoch`, `step`, `lr` and the
/// [`LossBreakdown`]) to `log` when given.
pub fn train(
    model: DualSurrogateModel,
    data: &TrainData,
    cfg: &TrainConfig,
    mut log: Option<&mut dyn Write>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if model.variant != cfg.variant {
        return Err(Error::Invalid(
            "model variant differs from the configured variant".into(),
        ));
    }
    let lambda = cfg.effective_lambda();
    let forecaster_digest = model.forecaster.digest();
    let init_digest = model.params.digest();
    let base_pred = data.val_baseline.y_hat_ori.clone();

    let mut current = model;
    let mut adam = AdamWState::new(&current.params);
    let param_bytes = 8 * current.params.param_count();
    let mut peak = 2 * param_bytes + adam.bytes();

    let mut epochs = vec![record(0, None, None, evaluate(&current, data, lambda)?)];
    let mut best_epoch = 0;
    let mut best = current.clone();
    let mut since_best = 0usize;
    let mut stopped_early = false;
    let mut aborted = None;
    let mut diagnostic = None;
    let mut stability = GradStability::default();
    let mut previous: Option<SurrogateParams> = None;
    let mut step = 0u64;
    let mut epoch_seconds = Vec::new();

    let shuffle = RngStream::new("data", cfg.seed);
    let dropout = RngStream::new("dropout", cfg.seed);

    'epochs: for e in 0..cfg.epochs {
        let started = Instant::now();
        let lr = cosine_lr(e, cfg.lr, cfg.t_max, cfg.eta_min);
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        order.shuffle(&mut shuffle.at(e as u64).rng());
        let mut losses = Vec::new();
        for chunk in order.chunks(cfg.batch_size) {
            let (batch, baseline) = data.batch(chunk)?;
            let out = batch_grads(
                &current,
                &batch,
                &baseline,
                lambda,
                Mode::Train,
                &dropout.at(step),
            )?;
            peak = peak.max(2 * param_bytes + adam.bytes() + out.cache_bytes);
            if let Some(w) = log.as_deref_mut() {
                let line = serde_json::json!({ "base_lr": cfg.lr, "epoch": e + 1, "step": step, "lr": lr, "loss": out.loss });
                writeln!(w, "{line}").map_err(|err| Error::io("<training log>", err))?;
            }
            if let Some(prev) = &previous {
                stability.push(grad_stability_log(&out.grads, prev));
            }
            adamw_step(&mut adam, &mut current.params, &out.grads, lr, cfg)?;
            step += 1;
            losses.push(out.loss);
            previous = Some(out.grads);
            if let Err(err) = current.params.weights.denominators() {
                aborted = Some(AbortInfo {
                    epoch: e + 1,
                    step,
                    reason: err.to_string(),
                });
                diagnostic = Some(current.checkpoint());
                epoch_seconds.push(started.elapsed().as_secs_f64());
                break 'epochs;
            }
        }
        let rec = record(
            e + 1,
            Some(lr),
            LossBreakdown::mean(&losses),
            evaluate(&current, data, lambda)?,
        );
        epoch_seconds.push(started.elapsed().as_secs_f64());
        if rec.selection_metric < epochs[best_epoch].selection_metric {
            best_epoch = epochs.len();
            best = current.clone();
            since_best = 0;
        } else {
            since_best += 1;
        }
        epochs.push(rec);
        if since_best >= cfg.patience && e + 1 < cfg.epochs {
            stopped_early = true;
            break;
        }
    }
    stability.finish();
    if best.forecaster.digest() != forecaster_digest {
        return Err(Error::Invalid(
            "frozen forecaster changed during training".into(),
        ));
    }

    let report = TrainReport {
        config: cfg.clone(),
        init_digest,
        forecaster_digest,
        train_windows: data.train.len(),
        val_windows: data.val.len(),
        baseline_val_mse: mse(&base_pred, &data.val.y)?,
        baseline_val_mae: mae(&base_pred, &data.val.y)?,
        baseline_val_channel_mse: data.val_baseline.e_ori.clone(),
        best_selection_metric: epochs[best_epoch].selection_metric,
        best_params_digest: best.params.digest(),
        epochs,
        best_epoch,
        steps: step,
        stopped_early,
        aborted,
        grad_stability: stability,
        peak_buffer_bytes: peak,
    };
    Ok(TrainOutcome {
        report,
        best,
        diagnostic,
        epoch_seconds,
    })
}

/// Result of a learning-rate sweep; `reports[best_index]` belongs to `best`.
#[derive(Debug, Clone)]
pub struct GridOutcome {
    pub reports: Vec<TrainReport>,
    pub best_index: usize,
    pub best: TrainOutcome,
}

/// One run per learning rate from identical initial states; keeps the run
/// with the lowest best-epoch selection metric (first wins on ties).
pub fn grid_search(
    factory: impl Fn() -> Result<DualSurrogateModel>,
    data: &TrainData,
    cfg: &TrainConfig,
    mut log: Option<&mut dyn Write>,
) -> Result<GridOutcome> {
    if cfg.lr_grid.is_empty() {
        return Err(Error::Invalid("lr_grid is empty".into()));
    }
    let mut reports = Vec::with_capacity(cfg.lr_grid.len());
    let mut best: Option<(usize, TrainOutcome)> = None;
    for (k, &lr) in cfg.lr_grid.iter().enumerate() {
        let run_cfg = TrainConfig { lr, ..cfg.clone() };
        let sink = log.as_mut().map(|w| &mut **w as &mut dyn Write);
        let outcome = train(factory()?, data, &run_cfg, sink)?;
        reports.push(outcome.report.clone());
        let better = best.as_ref().is_none_or(|(_, b)| {
            outcome.report.best_selection_metric < b.report.best_selection_metric
        });
        if better {
            best = Some((k, outcome));
        }
    }
    let (best_index, best) = best.expect("grid is non-empty");
    Ok(GridOutcome {
        reports,
        best_index,
        best,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_coupled_ar, windows, Window};
    use crate::forecaster::{fit_ridge_ar, FrozenForecaster};
    use crate::fusion::{FusionKind, FusionSpec};
    use std::sync::Arc;

    #[test]
    fn adamw_first_step_matches_hand_value() {
        let mut params = SurrogateParams::init(&FusionSpec::default(), 1, 0);
        for (_, t) in params.tensors_mut() {
            t.iter_mut().for_each(|v| *v = 1.0);
        }
        let mut grads = params.clone();
        for (_, t) in grads.tensors_mut() {
            t.iter_mut().for_each(|v| *v = 1.0);
        }
        let mut state = AdamWState::new(&params);
        adamw_step(
            &mut state,
            &mut params,
            &grads,
            0.1,
            &TrainConfig::default(),
        )
        .unwrap();
        let expected = 1.0 - 0.1 / (1.0 + 1e-8) - 0.1 * 1e-3;
        assert!(params
            .flatten()
            .iter()
            .all(|p| (p - expected).abs() < 1e-12));
        assert_eq!(state.step, 1);
    }

    #[test]
    fn adamw_zero_gradient_without_decay_is_identity() {
        let mut params = SurrogateParams::init(&FusionSpec::default(), 3, 1);
        let before = params.clone();
        let grads = params.zeros_like();
        let cfg = TrainConfig {
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        let mut state = AdamWState::new(&params);
        for _ in 0..3 {
            adamw_step(&mut state, &mut params, &grads, 0.1, &cfg).unwrap();
        }
        assert_eq!(params, before);
    }

    #[test]
    fn adamw_rejects_non_finite_gradient_by_name() {
        let mut params = SurrogateParams::init(&FusionSpec::default(), 2, 0);
        let mut grads = params.zeros_like();
        grads.weights.w_beta[1] = f64::NAN;
        let before = params.clone();
        let mut state = AdamWState::new(&params);
        let err = adamw_step(
            &mut state,
            &mut params,
            &grads,
            0.1,
            &TrainConfig::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::NonFinite { ref tensor } if tensor == "w_beta"));
        assert_eq!(params, before);
        assert_eq!(state.step, 0);
    }

    #[test]
    fn cosine_schedule_anchors() {
        assert_eq!(cosine_lr(0, 0.1, 10, 1e-8), 0.1);
        assert_eq!(cosine_lr(10, 0.1, 10, 1e-8), 1e-8);
        assert_eq!(cosine_lr(25, 0.1, 10, 1e-8), 1e-8);
        assert!((cosine_lr(5, 0.1, 10, 1e-8) - (0.1 + 1e-8) / 2.0).abs() < 1e-15);
        for e in 0..10 {
            assert!(cosine_lr(e + 1, 0.1, 10, 1e-8) < cosine_lr(e, 0.1, 10, 1e-8));
        }
    }

    #[test]
    fn stability_distances() {
        let mut a = SurrogateParams::init(&FusionSpec::default(), 2, 3);
        for (_, t) in a.tensors_mut() {
            t.iter_mut()
                .enumerate()
                .for_each(|(k, v)| *v = k as f64 - 1.5);
        }
        assert!(grad_stability_log(&a, &a).iter().all(|(_, d)| *d == 0.0));
        let mut neg = a.clone();
        for (_, t) in neg.tensors_mut() {
            t.iter_mut().for_each(|v| *v = -*v);
        }
        for ((name, d), (_, g)) in grad_stability_log(&a, &neg).iter().zip(a.tensors()) {
            let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((d - 2.0 * norm).abs() < 1e-12, "{name}");
        }
        assert_eq!(
            aggregate_mean(&[1.0, 2.0, 3.0, 4.0, 10.0], 4),
            vec![2.5, 10.0]
        );
    }

    fn split(w: Vec<Window>) -> WindowBatch {
        WindowBatch::from_windows(&w)
    }

    fn setup(variant: Variant) -> (TrainData, impl Fn() -> Result<DualSurrogateModel>) {
        let series = gen_coupled_ar(7, 900, 3, 0.8, 0.9, 1.0).unwrap();
        let (l, h) = (24, 8);
        let forecaster = Arc::new(fit_ridge_ar(&series, 0..600, 4, 1e-3, l, h).unwrap());
        let data = TrainData::new(
            forecaster.as_ref(),
            split(windows(&series, 0..600, l, h, 4)),
            split(windows(&series, 600..900, l, h, 4)),
        )
        .unwrap();
        let factory = move || {
            let spec = FusionSpec {
                kind: FusionKind::Mlp,
                hidden: None,
                dropout: 0.1,
            };
            DualSurrogateModel::new(
                SurrogateParams::init(&spec, 3, 11),
                forecaster.clone(),
                variant,
            )
        };
        (data, factory)
    }

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            lr: 1e-2,
            epochs: 3,
            seed: 5,
            lr_grid: vec![1e-2],
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_epochs_reports_initial_state() {
        let (data, factory) = setup(Variant::Dual);
        let cfg = TrainConfig {
            epochs: 0,
            ..small_cfg()
        };
        let out = train(factory().unwrap(), &data, &cfg, None).unwrap();
        assert_eq!(out.report.epochs.len(), 1);
        assert_eq!(out.report.best_epoch, 0);
        assert_eq!(out.report.steps, 0);
        // Zero-initialized fusion with an odd-linear forecaster reproduces the baseline.
        let v = out.report.epochs[0].val_mse.unwrap();
        assert!((v - out.report.baseline_val_mse).abs() < 1e-9);
    }

    #[test]
    fn training_is_deterministic_and_logs_each_step() {
        let (data, factory) = setup(Variant::Dual);
        let mut log_a = Vec::new();
        let a = train(factory().unwrap(), &data, &small_cfg(), Some(&mut log_a)).unwrap();
        let mut log_b = Vec::new();
        let b = train(factory().unwrap(), &data, &small_cfg(), Some(&mut log_b)).unwrap();
        assert_eq!(a.report.to_json().unwrap(), b.report.to_json().unwrap());
        assert_eq!(log_a, log_b);
        assert_eq!(
            String::from_utf8(log_a).unwrap().lines().count() as u64,
            a.report.steps
        );
        assert_eq!(a.best.params, b.best.params);
        for rec in &a.report.epochs[1..] {
            let l = rec.train_loss.as_ref().unwrap();
            assert!(
                (l.l_total - ((l.l_alpha + l.l_beta) / 2.0 + l.lambda * l.l_bound)).abs() < 1e-12
            );
        }
    }

    #[test]
    fn best_epoch_is_argmin_and_forecaster_untouched() {
        let (data, factory) = setup(Variant::Dual);
        let model = factory().unwrap();
        let digest = model.forecaster.digest();
        let out = train(model, &data, &small_cfg(), None).unwrap();
        let min = out
            .report
            .epochs
            .iter()
            .map(|e| e.selection_metric)
            .fold(f64::INFINITY, f64::min);
        assert_eq!(out.report.best_selection_metric, min);
        assert_eq!(out.best.forecaster.digest(), digest);
        assert_eq!(out.best.params.digest(), out.report.best_params_digest);
        assert!(out.report.peak_buffer_bytes > 0);
    }

    #[test]
    fn early_stopping_fires_after_patience() {
        // With an odd-linear forecaster the reconstruction never moves, so the
        // validation metric never strictly improves.
        let (data, factory) = setup(Variant::Dual);
        let cfg = TrainConfig {
            epochs: 10,
            patience: 3,
            ..small_cfg()
        };
        let out = train(factory().unwrap(), &data, &cfg, None).unwrap();
        assert!(out.report.stopped_early);
        assert_eq!(out.report.epochs.len(), 4);
        assert_eq!(out.report.best_epoch, 0);
    }

    #[test]
    fn bound_toggle_only_matters_when_lambda_positive() {
        let (data, factory) = setup(Variant::Dual);
        let on = TrainConfig {
            lambda: 0.0,
            ..small_cfg()
        };
        let off = TrainConfig {
            use_bound_reg: false,
            ..on.clone()
        };
        let a = train(factory().unwrap(), &data, &on, None).unwrap();
        let b = train(factory().unwrap(), &data, &off, None).unwrap();
        assert_eq!(a.report.epochs, b.report.epochs);
        assert_eq!(a.best.params, b.best.params);
    }

    #[test]
    fn single_variant_trains_on_surrogate_loss() {
        let (data, factory) = setup(Variant::Single);
        let cfg = TrainConfig {
            variant: Variant::Single,
            ..small_cfg()
        };
        let out = train(factory().unwrap(), &data, &cfg, None).unwrap();
        assert!(out.report.epochs.iter().all(|e| e.val_mse.is_none()));
        assert!(!out.report.grad_stability.aggregated.is_empty());
    }

    #[test]
    fn grid_search_selects_argmin_with_shared_init() {
        let (data, factory) = setup(Variant::Dual);
        let cfg = TrainConfig {
            lr_grid: vec![1e-1, 1e-3],
            epochs: 2,
            ..small_cfg()
        };
        let grid = grid_search(&factory, &data, &cfg, None).unwrap();
        assert_eq!(grid.reports.len(), 2);
        assert_eq!(grid.reports[0].init_digest, grid.reports[1].init_digest);
        let argmin = grid
            .reports
            .iter()
            .enumerate()
            .min_by(|a, b| {
                a.1.best_selection_metric
                    .total_cmp(&b.1.best_selection_metric)
            })
            .unwrap()
            .0;
        assert_eq!(grid.best_index, argmin);

        let single = TrainConfig {
            lr_grid: vec![1e-2],
            ..small_cfg()
        };
        let g = grid_search(&factory, &data, &single, None).unwrap();
        let t = train(factory().unwrap(), &data, &single, None).unwrap();
        assert_eq!(g.best.report, t.report);
    }

    #[test]
    fn collapsed_denominator_aborts_with_diagnostic() {
        let (data, factory) = setup(Variant::Dual);
        let model = factory().unwrap();
        // lr * weight_decay = 1 wipes every parameter in one step, collapsing
        // w_alpha + w_beta to the size of the (negligible) Adam term.
        let cfg = TrainConfig {
            lr: 1e-12,
            weight_decay: 1e12,
            ..small_cfg()
        };
        let out = train(model, &data, &cfg, None).unwrap();
        let aborted = out.report.aborted.expect("expected an abort");
        assert!(aborted.reason.contains("collapsed"));
        assert!(out.diagnostic.is_some());
        assert!(out.best.params.weights.denominators().is_ok());
    }

    #[test]
    fn mismatched_variant_is_rejected() {
        let (data, factory) = setup(Variant::Single);
        assert!(train(factory().unwrap(), &data, &small_cfg(), None).is_err());
    }

    #[test]
    fn frozen_forecaster_baseline_example() {
        let f = FrozenForecaster::persistence(4, 2).unwrap();
        let val = WindowBatch {
            x: vec![Matrix::filled(4, 1, 1.0)],
            y: vec![Matrix::filled(2, 1, 3.0)],
            start_indices: vec![0],
        };
        let data = TrainData::new(&f, WindowBatch::from_windows(&[]), val).unwrap();
        assert_eq!(data.val_baseline.e_ori, vec![4.0]);
    }
}
