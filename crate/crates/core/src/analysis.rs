//! Cross-time cross-variate correlation, surrogate-space predictability
//! profiles, and the noise-injection and channel-scaling experiment drivers.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{inject_noise_channels, take_first_channels, MultivariateSeries, WindowBatch};
use crate::error::{Error, Result};
use crate::forecaster::predict_channels;
use crate::numerics::{Matrix, Mode, RngStream};
use crate::pipeline::{prepare_with, run, standardize, PipelineConfig};
use crate::surrogate::DualSurrogateModel;

pub const DEFAULT_MIN_STD: f64 = 1e-8;
pub const ROLLING_WINDOW: usize = 100;

fn patch_stats(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// `R(t, t', P) = (1/P) Σ_{k=0..P} z_i(t+k) z_j(t'+k)`, each patch of `P + 1`
/// points standardized by its own mean and sample standard deviation.
///
/// Returns `Ok(None)` when either patch is (numerically) constant.
pub fn ctcv_corr(
    series: &MultivariateSeries,
    i: usize,
    j: usize,
    t: usize,
    t_prime: usize,
    patch: usize,
    min_std: f64,
) -> Result<Option<f64>> {
    let c = series.channels();
    if i >= c || j >= c {
        return Err(Error::ChannelRange {
            requested: i.max(j) + 1,
            available: c,
        });
    }
    if patch < 2 {
        return Err(Error::Invalid(format!(
            "patch size must be >= 2, got {patch}"
        )));
    }
    if t.max(t_prime) + patch >= series.len() {
        return Err(Error::Invalid(format!(
            "patch [{}, {}] exceeds series length {}",
            t.max(t_prime),
            t.max(t_prime) + patch,
            series.len()
        )));
    }
    let a: Vec<f64> = (0..=patch).map(|k| series.values[(t + k, i)]).collect();
    let b: Vec<f64> = (0..=patch)
        .map(|k| series.values[(t_prime + k, j)])
        .collect();
    let (ma, sa) = patch_stats(&a);
    let (mb, sb) = patch_stats(&b);
    if !(sa >= min_std && sb >= min_std) {
        return Ok(None);
    }
    let sum: f64 = a
        .iter()
        .zip(&b)
        .map(|(x, y)| (x - ma) / sa * ((y - mb) / sb))
        .sum();
    Ok(Some(sum / patch as f64))
}

/// Where patches are taken from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Offsets {
    /// `count` uniformly drawn `(i, j, t, t')` tuples per patch size.
    Sampled { count: usize, seed: u64 },
    /// Every listed `(t, t')` for every channel pair.
    Grid(Vec<(usize, usize)>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorrelationSpec {
    pub patch_sizes: Vec<usize>,
    pub offsets: Offsets,
    /// Ordered channel pairs; all `i != j` when absent.
    pub pairs: Option<Vec<(usize, usize)>>,
    pub min_std: f64,
}

impl Default for CorrelationSpec {
    fn default() -> Self {
        Self {
            patch_sizes: vec![32, 64, 96, 128],
            offsets: Offsets::Sampled {
                count: 2000,
                seed: 0,
            },
            pairs: None,
            min_std: DEFAULT_MIN_STD,
        }
    }
}

/// Magnitude of the mean signed `R` per patch size, and their average.
/// Averaging signed values lets independent pairs cancel toward zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub per_patch: BTreeMap<usize, f64>,
    pub used: BTreeMap<usize, usize>,
    pub skipped: BTreeMap<usize, usize>,
    pub average: f64,
}

pub fn dataset_corr(
    series: &MultivariateSeries,
    spec: &CorrelationSpec,
) -> Result<CorrelationReport> {
    let c = series.channels();
    let pairs: Vec<(usize, usize)> = match &spec.pairs {
        Some(p) => p.iter().copied().filter(|(i, j)| i != j).collect(),
        None => (0..c)
            .flat_map(|i| (0..c).filter(move |j| *j != i).map(move |j| (i, j)))
            .collect(),
    };
    if pairs.is_empty() {
        return Err(Error::NoPairs);
    }
    if spec.patch_sizes.is_empty() {
        return Err(Error::Invalid("no patch sizes given".into()));
    }
    let mut report = CorrelationReport {
        per_patch: BTreeMap::new(),
        used: BTreeMap::new(),
        skipped: BTreeMap::new(),
        average: 0.0,
    };
    for &p in &spec.patch_sizes {
        if p < 2 || p + 1 > series.len() {
            return Err(Error::Invalid(format!(
                "patch size {p} does not fit a series of length {}",
                series.len()
            )));
        }
        let last_start = series.len() - p - 1;
        let tuples: Vec<(usize, usize, usize, usize)> = match &spec.offsets {
            Offsets::Sampled { count, seed } => {
                let mut rng = RngStream::new("correlation", *seed).lane(p as u64).rng();
                (0..*count)
                    .map(|_| {
                        let (i, j) = pairs[rng.random_range(0..pairs.len())];
                        (
                            i,
                            j,
                            rng.random_range(0..=last_start),
                            rng.random_range(0..=last_start),
                        )
                    })
                    .collect()
            }
            Offsets::Grid(grid) => pairs
                .iter()
                .flat_map(|&(i, j)| grid.iter().map(move |&(t, tp)| (i, j, t, tp)))
                .collect(),
        };
        let values = tuples
            .par_iter()
            .map(|&(i, j, t, tp)| ctcv_corr(series, i, j, t, tp, p, spec.min_std))
            .collect::<Result<Vec<_>>>()?;
        let kept: Vec<f64> = values.into_iter().flatten().collect();
        report.skipped.insert(p, tuples.len() - kept.len());
        report.used.insert(p, kept.len());
        if !kept.is_empty() {
            report
                .per_patch
                .insert(p, (kept.iter().sum::<f64>() / kept.len() as f64).abs());
        }
    }
    if report.per_patch.is_empty() {
        return Err(Error::NoPairs);
    }
    report.average = report.per_patch.values().sum::<f64>() / report.per_patch.len() as f64;
    Ok(report)
}

/// Trailing mean over `window` values; length `n - window + 1` (empty if shorter).
pub fn rolling_mean(series: &[f64], window: usize) -> Vec<f64> {
    if window == 0 || series.len() < window {
        return Vec::new();
    }
    let mut out = Vec::with_capacity(series.len() - window + 1);
    let mut sum: f64 = series[..window].iter().sum();
    out.push(sum / window as f64);
    for k in window..series.len() {
        sum += series[k] - series[k - window];
        out.push(sum / window as f64);
    }
    out
}

/// Per-step errors (one step per evaluation window, in time order) and their
/// rolling means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorProfile {
    pub squared: Vec<f64>,
    pub absolute: Vec<f64>,
    pub rolling_squared: Vec<f64>,
    pub rolling_absolute: Vec<f64>,
}

impl ErrorProfile {
    /// Each window's error is averaged over every pair of `(prediction, target)`
    /// matrices in its group.
    pub fn from_groups(groups: &[Vec<(&Matrix, &Matrix)>]) -> Self {
        let mut squared = Vec::with_capacity(groups.len());
        let mut absolute = Vec::with_capacity(groups.len());
        for g in groups {
            let (mut s2, mut s1, mut n) = (0.0, 0.0, 0usize);
            for (p, t) in g {
                for (a, b) in p.as_slice().iter().zip(t.as_slice()) {
                    s2 += (a - b) * (a - b);
                    s1 += (a - b).abs();
                    n += 1;
                }
            }
            squared.push(s2 / n as f64);
            absolute.push(s1 / n as f64);
        }
        Self {
            rolling_squared: rolling_mean(&squared, ROLLING_WINDOW),
            rolling_absolute: rolling_mean(&absolute, ROLLING_WINDOW),
            squared,
            absolute,
        }
    }

    pub fn mse(&self) -> f64 {
        self.squared.iter().sum::<f64>() / self.squared.len() as f64
    }

    pub fn mae(&self) -> f64 {
        self.absolute.iter().sum::<f64>() / self.absolute.len() as f64
    }
}

/// `(orig - surr) / orig`; zero when both are zero.
pub fn relative_reduction(orig: f64, surr: f64) -> f64 {
    if orig == 0.0 {
        0.0
    } else {
        (orig - surr) / orig
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictabilityReport {
    pub original: ErrorProfile,
    pub surrogate: ErrorProfile,
    pub mse_reduction: f64,
    pub mae_reduction: f64,
}

/// Forecastability of the original series versus the learned surrogates
/// under the same frozen forecaster; the two surrogate families are pooled.
pub fn surrogate_predictability(
    model: &DualSurrogateModel,
    test: &WindowBatch,
) -> Result<PredictabilityReport> {
    if test.is_empty() {
        return Err(Error::Invalid("no evaluation windows".into()));
    }
    let forecaster = model.forecaster.as_ref();
    let original_pred = test
        .x
        .par_iter()
        .map(|x| predict_channels(forecaster, x))
        .collect::<Result<Vec<_>>>()?;
    let sb = model.surrogate_batch(&test.x, &test.y, Mode::Eval, &RngStream::new("dropout", 0))?;
    let original_groups: Vec<Vec<(&Matrix, &Matrix)>> = original_pred
        .iter()
        .zip(&test.y)
        .map(|(p, y)| vec![(p, y)])
        .collect();
    let surrogate_groups: Vec<Vec<(&Matrix, &Matrix)>> = sb
        .windows
        .iter()
        .map(|w| {
            let mut g = vec![(&w.pred_alpha, &w.target_alpha)];
            if !w.pred_beta.as_slice().is_empty() {
                g.push((&w.pred_beta, &w.target_beta));
            }
            g
        })
        .collect();
    let original = ErrorProfile::from_groups(&original_groups);
    let surrogate = ErrorProfile::from_groups(&surrogate_groups);
    Ok(PredictabilityReport {
        mse_reduction: relative_reduction(original.mse(), surrogate.mse()),
        mae_reduction: relative_reduction(original.mae(), surrogate.mae()),
        original,
        surrogate,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseRow {
    pub k: usize,
    pub channels: usize,
    pub baseline_mse: f64,
    pub mse: f64,
    pub mae: f64,
    pub best_lr: f64,
}

/// Adds `k` pure-noise channels for each `k`, adapts, and scores only the
/// original channels on the test split.
///
/// Noise is appended after standardization, and the forecaster is fitted
/// once on the clean training channels so that every arm shares it.
pub fn noise_sweep(
    raw: &MultivariateSeries,
    k_list: &[usize],
    cfg: &PipelineConfig,
) -> Result<Vec<NoiseRow>> {
    if k_list.is_empty() || k_list[0] != 0 || k_list.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Invalid(
            "k_list must start at 0 and be strictly increasing".into(),
        ));
    }
    let (series, split, scaler) = standardize(raw, cfg)?;
    let forecaster =
        Arc::new(
            cfg.forecaster
                .build(&series, split.train_range(), cfg.lookback, cfg.horizon)?,
        );
    let base = series.channels();
    k_list
        .iter()
        .map(|&k| {
            let noisy = inject_noise_channels(&series, k, cfg.train.seed);
            let mut arm_scaler = scaler.clone();
            arm_scaler.mean.extend(std::iter::repeat_n(0.0, k));
            arm_scaler.std.extend(std::iter::repeat_n(1.0, k));
            let prepared = prepare_with(noisy, split, arm_scaler, forecaster.clone(), cfg)?;
            let result = run(prepared, cfg)?;
            let (mse, baseline_mse) = result.test.channel_subset_mse(0..base);
            let n = base as f64;
            Ok(NoiseRow {
                k,
                channels: base + k,
                baseline_mse,
                mse,
                mae: result.test.channel_mae[..base].iter().sum::<f64>() / n,
                best_lr: result.grid.best.report.config.lr,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleRow {
    pub n: usize,
    pub baseline_mse: f64,
    pub mse: f64,
    pub gain: f64,
    pub best_lr: f64,
}

/// Keeps the first `N` channels for each `N` and reports the relative MSE
/// gain over the channel-independent baseline. The forecaster is fitted once
/// on the full panel's training rows.
pub fn scale_sweep(
    raw: &MultivariateSeries,
    n_list: &[usize],
    cfg: &PipelineConfig,
) -> Result<Vec<ScaleRow>> {
    if n_list.is_empty() {
        return Err(Error::Invalid("n_list is empty".into()));
    }
    let (series, split, scaler) = standardize(raw, cfg)?;
    let forecaster =
        Arc::new(
            cfg.forecaster
                .build(&series, split.train_range(), cfg.lookback, cfg.horizon)?,
        );
    let mut sorted = n_list.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    sorted
        .iter()
        .map(|&n| {
            let trimmed = take_first_channels(&series, n)?;
            let mut arm_scaler = scaler.clone();
            arm_scaler.mean.truncate(n);
            arm_scaler.std.truncate(n);
            let prepared = prepare_with(trimmed, split, arm_scaler, forecaster.clone(), cfg)?;
            let result = run(prepared, cfg)?;
            Ok(ScaleRow {
                n,
                baseline_mse: result.test.baseline_mse,
                mse: result.test.mse,
                gain: result.test.mse_gain(),
                best_lr: result.grid.best.report.config.lr,
            })
        })
        .collect()
}

/// Writes serializable rows as CSV with a header.
pub fn write_table<T: Serialize>(rows: &[T], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::io(path, e.into()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_coupled_ar;
    use crate::pipeline::{build_model, prepare};
    use crate::trainer::TrainConfig;
    use rand_distr::StandardNormal;

    fn noise_panel(len: usize, c: usize, seed: u64) -> MultivariateSeries {
        let mut rng = RngStream::new("test", seed).rng();
        MultivariateSeries::unnamed(Matrix::from_fn(len, c, |_, _| rng.sample(StandardNormal)))
            .unwrap()
    }

    #[test]
    fn self_correlation_is_exactly_one() {
        let s = noise_panel(300, 2, 0);
        for p in [2, 32, 128] {
            for t in [0, 17, 100] {
                let r = ctcv_corr(&s, 1, 1, t, t, p, DEFAULT_MIN_STD)
                    .unwrap()
                    .unwrap();
                assert!((r - 1.0).abs() < 1e-12, "P={p}: {r}");
            }
        }
    }

    #[test]
    fn sign_flip_gives_minus_one() {
        let a = noise_panel(200, 1, 1);
        let s = MultivariateSeries::unnamed(Matrix::from_fn(200, 2, |t, c| {
            if c == 0 {
                a.values[(t, 0)]
            } else {
                -a.values[(t, 0)]
            }
        }))
        .unwrap();
        let r = ctcv_corr(&s, 0, 1, 10, 10, 32, DEFAULT_MIN_STD)
            .unwrap()
            .unwrap();
        assert!((r + 1.0).abs() < 1e-12);
    }

    #[test]
    fn correlation_is_bounded_and_degenerate_patches_are_skipped() {
        let s = noise_panel(400, 3, 2);
        let mut rng = RngStream::new("test", 3).rng();
        let p = 32;
        for _ in 0..200 {
            let (t, tp) = (
                rng.random_range(0..400 - p - 1),
                rng.random_range(0..400 - p - 1),
            );
            let r = ctcv_corr(&s, 0, 2, t, tp, p, DEFAULT_MIN_STD)
                .unwrap()
                .unwrap();
            assert!(r.abs() <= (p + 1) as f64 / p as f64 + 1e-12);
        }
        let flat = MultivariateSeries::unnamed(Matrix::filled(100, 2, 3.0)).unwrap();
        assert_eq!(
            ctcv_corr(&flat, 0, 1, 0, 5, 32, DEFAULT_MIN_STD).unwrap(),
            None
        );
        assert!(ctcv_corr(&flat, 0, 1, 0, 80, 32, DEFAULT_MIN_STD).is_err());
        let flat_spec = CorrelationSpec {
            patch_sizes: vec![32],
            ..CorrelationSpec::default()
        };
        assert!(matches!(
            dataset_corr(&flat, &flat_spec),
            Err(Error::NoPairs)
        ));
    }

    #[test]
    fn independent_null_is_small() {
        let s = noise_panel(3000, 2, 4);
        let mut rng = RngStream::new("test", 5).rng();
        let mut acc = 0.0;
        for _ in 0..1000 {
            let (t, tp) = (
                rng.random_range(0..3000 - 33),
                rng.random_range(0..3000 - 33),
            );
            acc += ctcv_corr(&s, 0, 1, t, tp, 32, DEFAULT_MIN_STD)
                .unwrap()
                .unwrap();
        }
        // Signed mean of the null distribution.
        assert!((acc / 1000.0).abs() < 0.05);
    }

    #[test]
    fn lag_coupled_pair_at_right_offset() {
        let s = gen_coupled_ar(1, 2000, 2, 0.8, 1.0, 1.0).unwrap();
        let spec = CorrelationSpec {
            pairs: Some(vec![(1, 0)]),
            offsets: Offsets::Grid((1..1800).step_by(7).map(|t| (t, t - 1)).collect()),
            ..CorrelationSpec::default()
        };
        let r = dataset_corr(&s, &spec).unwrap();
        assert!(r.per_patch.values().all(|v| *v > 0.9), "{r:?}");
    }

    #[test]
    fn dataset_corr_shrinks_with_sampling_and_needs_pairs() {
        let s = noise_panel(4000, 4, 6);
        let at = |count| {
            dataset_corr(
                &s,
                &CorrelationSpec {
                    offsets: Offsets::Sampled { count, seed: 1 },
                    ..CorrelationSpec::default()
                },
            )
            .unwrap()
            .average
        };
        assert!(at(4000) <= at(500) + 0.01);
        assert!(at(2000) < 0.02);
        let one = noise_panel(500, 1, 7);
        assert!(matches!(
            dataset_corr(&one, &CorrelationSpec::default()),
            Err(Error::NoPairs)
        ));
    }

    #[test]
    fn rolling_means() {
        let x: Vec<f64> = (0..250).map(|v| v as f64).collect();
        let r = rolling_mean(&x, 100);
        assert_eq!(r.len(), 151);
        assert_eq!(r[0], 49.5);
        assert_eq!(r[150], 199.5);
        assert!(rolling_mean(&x[..50], 100).is_empty());
        assert_eq!(relative_reduction(2.0, 2.0), 0.0);
        assert_eq!(relative_reduction(4.0, 1.0), 0.75);
    }

    fn small_cfg() -> PipelineConfig {
        PipelineConfig {
            lookback: 24,
            horizon: 8,
            stride: 4,
            search_lr: false,
            train: TrainConfig {
                epochs: 1,
                lr: 1e-2,
                ..TrainConfig::default()
            },
            ..PipelineConfig::default()
        }
    }

    #[test]
    fn zero_init_surrogates_are_as_predictable_as_originals() {
        let raw = gen_coupled_ar(2, 800, 3, 0.8, 0.9, 1.0).unwrap();
        let p = prepare(&raw, &small_cfg()).unwrap();
        let model = build_model(&p, &small_cfg()).unwrap();
        let r = surrogate_predictability(&model, &p.test).unwrap();
        assert!((r.original.mse() - r.surrogate.mse()).abs() < 1e-9);
        assert!(r.mse_reduction.abs() < 1e-9);
        assert_eq!(
            r.original.rolling_squared.len(),
            r.original.squared.len() - 99
        );
    }

    #[test]
    fn noise_sweep_rows_and_k0_matches_plain_run() {
        let raw = gen_coupled_ar(3, 800, 3, 0.8, 0.9, 1.0).unwrap();
        let cfg = small_cfg();
        let rows = noise_sweep(&raw, &[0, 2], &cfg).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[1].channels, 5);
        let plain = run(prepare(&raw, &cfg).unwrap(), &cfg).unwrap();
        assert_eq!(rows[0].mse, plain.test.channel_subset_mse(0..3).0);
        assert!((rows[0].mse - plain.test.mse).abs() < 1e-12);
        assert!(noise_sweep(&raw, &[1, 2], &cfg).is_err());
        let again = noise_sweep(&raw, &[0, 2], &cfg).unwrap();
        assert_eq!(rows, again);
    }

    #[test]
    fn scale_sweep_orders_rows_and_full_n_matches_full_run() {
        let raw = gen_coupled_ar(4, 800, 4, 0.8, 0.9, 1.0).unwrap();
        let cfg = small_cfg();
        let rows = scale_sweep(&raw, &[4, 1], &cfg).unwrap();
        assert_eq!(rows.iter().map(|r| r.n).collect::<Vec<_>>(), vec![1, 4]);
        assert!(rows[0].gain >= -0.02);
        let full = run(prepare(&raw, &cfg).unwrap(), &cfg).unwrap();
        assert_eq!(rows[1].gain, full.test.mse_gain());
    }

    #[test]
    fn table_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        let rows = vec![ScaleRow {
            n: 1,
            baseline_mse: 0.5,
            mse: 0.25,
            gain: 0.5,
            best_lr: 0.01,
        }];
        write_table(&rows, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(
            text,
            "n,baseline_mse,mse,gain,best_lr\n1,0.5,0.25,0.5,0.01\n"
        );
    }
}
