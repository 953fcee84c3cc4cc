//! Command implementations behind the `weave` binary.
//!
//! Every command writes into one output directory guarded by a lock file and
//! described by a manifest (resolved config, seed, timestamps, digests).
//! Exit codes: 0 success, 1 validation or I/O error, 2 numerical failure.

pub mod config;
pub mod gradcheck;
pub mod manifest;

use std::fmt;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::Serialize;
use weave_core::analysis::{
    dataset_corr, noise_sweep, scale_sweep, write_table, CorrelationReport, NoiseRow, ScaleRow,
};
use weave_core::data::{windows, write_csv, MultivariateSeries, WindowBatch};
use weave_core::forecaster::Forecaster;
use weave_core::pipeline::{evaluate, fit, prepare, standardize, EvalReport};
use weave_core::surrogate::{ModelCheckpoint, Variant};
use weave_core::trainer::TrainReport;

use crate::config::{DataSource, ExperimentConfig};
use crate::manifest::{RunDir, RunManifest};

pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_NUMERICAL: i32 = 2;
pub const DEFAULT_OUTPUT_ROOT: &str = "runs";

/// A numerical check failed (as opposed to bad input).
#[derive(Debug)]
pub struct NumericalFailure(pub String);

impl fmt::Display for NumericalFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for NumericalFailure {}

/// Maps an error chain to the process exit code.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if cause.downcast_ref::<NumericalFailure>().is_some() {
            return EXIT_NUMERICAL;
        }
        if let Some(e) = cause.downcast_ref::<weave_core::Error>() {
            if matches!(
                e,
                weave_core::Error::NonFinite { .. } | weave_core::Error::DenominatorFloor { .. }
            ) {
                return EXIT_NUMERICAL;
            }
        }
    }
    EXIT_VALIDATION
}

/// Where a command writes and whether it may replace existing files.
#[derive(Debug, Clone)]
pub struct OutputOptions {
    pub out_dir: Option<PathBuf>,
    pub output_root: PathBuf,
    pub overwrite: bool,
}

impl Default for OutputOptions {
    fn default() -> Self {
        Self {
            out_dir: None,
            output_root: PathBuf::from(DEFAULT_OUTPUT_ROOT),
            overwrite: false,
        }
    }
}

impl OutputOptions {
    /// `--out-dir`, then the config's `output_dir`, then `<root>/<command>`.
    pub fn resolve(&self, cfg: Option<&ExperimentConfig>, command: &str) -> PathBuf {
        self.out_dir
            .clone()
            .or_else(|| cfg.and_then(|c| c.output_dir.clone()))
            .unwrap_or_else(|| self.output_root.join(command))
    }
}

fn open_run(cfg: &ExperimentConfig, out: &OutputOptions, command: &str) -> anyhow::Result<RunDir> {
    let dir = out.resolve(Some(cfg), command);
    RunDir::open(
        &dir,
        out.overwrite,
        command,
        cfg.seed,
        serde_json::to_value(cfg)?,
    )
}

/// Runs `body` inside an opened run directory, finalizing the manifest as
/// failed if it errors.
fn with_run<T>(
    cfg: &ExperimentConfig,
    out: &OutputOptions,
    command: &str,
    body: impl FnOnce(&mut RunDir) -> anyhow::Result<T>,
) -> anyhow::Result<(T, RunManifest, PathBuf)> {
    cfg.validate()?;
    let mut run = open_run(cfg, out, command)?;
    let root = run.root().to_path_buf();
    match body(&mut run) {
        Ok(v) => {
            let m = run.finish(true)?;
            Ok((v, m, root))
        }
        Err(e) => {
            let _ = run.finish(false);
            Err(e)
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ChannelSummary {
    pub name: String,
    pub mean: f64,
    pub std: f64,
}

pub struct SynthOutput {
    pub data_path: PathBuf,
    pub summary: Vec<ChannelSummary>,
    pub manifest: RunManifest,
}

fn summarize(series: &MultivariateSeries) -> Vec<ChannelSummary> {
    (0..series.channels())
        .map(|c| {
            let col = series.channel(c);
            let n = col.len() as f64;
            let mean = col.iter().sum::<f64>() / n;
            let std = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
            ChannelSummary {
                name: series.channel_names[c].clone(),
                mean,
                std,
            }
        })
        .collect()
}

pub fn cmd_synth(cfg: &ExperimentConfig, out: &OutputOptions) -> anyhow::Result<SynthOutput> {
    let DataSource::Synthetic(spec) = &cfg.data else {
        bail!("synth needs a synthetic data source");
    };
    let (summary, manifest, root) = with_run(cfg, out, "synth", |run| {
        let series = spec.generate()?;
        write_csv(&series, run.path("data.csv"))?;
        run.track("data.csv");
        let summary = summarize(&series);
        run.write_json("summary.json", &summary)?;
        Ok(summary)
    })?;
    Ok(SynthOutput {
        data_path: root.join("data.csv"),
        summary,
        manifest,
    })
}

pub struct TrainOutput {
    pub dir: PathBuf,
    pub report: TrainReport,
    pub grid: Vec<TrainReport>,
    pub test: Option<EvalReport>,
    pub manifest: RunManifest,
}

/// Fits and freezes the forecaster, adapts (grid or single lr), and writes
/// `report.json`, `checkpoint.json`, `train_log.jsonl` and the manifest, plus
/// `grid.json`, `timing.json`, `scaler.json` and (dual variant) `test_eval.json`.
pub fn cmd_train(cfg: &ExperimentConfig, out: &OutputOptions) -> anyhow::Result<TrainOutput> {
    let (res, manifest, dir) = with_run(cfg, out, "train", |run| {
        let raw = cfg.load_data()?;
        let prepared = prepare(&raw, &cfg.pipeline)?;
        let log_path = run.path("train_log.jsonl");
        let mut log = BufWriter::new(
            File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?,
        );
        let grid = fit(&prepared, &cfg.pipeline, Some(&mut log))?;
        drop(log);
        run.track("train_log.jsonl");
        let best = &grid.best;
        run.write_json("report.json", &best.report)?;
        run.write_json("grid.json", &grid.reports)?;
        run.write_json("scaler.json", &prepared.scaler)?;
        run.write_json(
            "timing.json",
            &serde_json::json!({ "epoch_seconds": best.epoch_seconds }),
        )?;
        best.best.checkpoint().save(run.path("checkpoint.json"))?;
        run.track("checkpoint.json");
        if let Some(diag) = &best.diagnostic {
            diag.save(run.path("diagnostic_checkpoint.json"))?;
            run.track("diagnostic_checkpoint.json");
        }
        let test = match cfg.pipeline.train.variant {
            Variant::Dual => {
                let t = evaluate(&best.best, &prepared.test)?;
                run.write_json("test_eval.json", &t)?;
                Some(t)
            }
            Variant::Single => None,
        };
        Ok((best.report.clone(), grid.reports.clone(), test))
    })?;
    let (report, grid, test) = res;
    if let Some(a) = &report.aborted {
        return Err(NumericalFailure(format!(
            "training aborted at epoch {} step {}: {}; diagnostic checkpoint in {}",
            a.epoch,
            a.step,
            a.reason,
            dir.display()
        ))
        .into());
    }
    Ok(TrainOutput {
        dir,
        report,
        grid,
        test,
        manifest,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Evaluates a checkpoint on one split of the configured dataset, standardized
/// with the training-split statistics.
pub fn cmd_eval(
    cfg: &ExperimentConfig,
    checkpoint: &Path,
    split: Split,
    out: &OutputOptions,
) -> anyhow::Result<(EvalReport, PathBuf)> {
    let (report, _, dir) = with_run(cfg, out, "eval", |run| {
        let model = ModelCheckpoint::load(checkpoint)
            .with_context(|| format!("loading checkpoint {}", checkpoint.display()))?
            .into_model()?;
        let raw = cfg.load_data()?;
        if raw.channels() != model.channels() {
            bail!(
                "checkpoint expects {} channels but the dataset has {}",
                model.channels(),
                raw.channels()
            );
        }
        let (series, spec, _) = standardize(&raw, &cfg.pipeline)?;
        let range = match split {
            Split::Train => spec.train_range(),
            Split::Val => spec.val_range(),
            Split::Test => spec.test_range(),
        };
        let (l, h) = (model.forecaster.lookback(), model.forecaster.horizon());
        let batch = WindowBatch::from_windows(&windows(&series, range, l, h, 1));
        let report = evaluate(&model, &batch)?;
        run.write_json("eval.json", &report)?;
        let mut rows =
            String::from("channel,name,baseline_mse,baseline_mae,mse,mae,omega,condition\n");
        for c in 0..report.channels {
            rows += &format!(
                "{c},{},{},{},{},{},{},{}\n",
                series.channel_names[c],
                report.baseline_channel_mse[c],
                report.baseline_channel_mae[c],
                report.channel_mse[c],
                report.channel_mae[c],
                report.omega[c],
                report.condition[c]
            );
        }
        run.write("eval_channels.csv", rows)?;
        Ok(report)
    })?;
    Ok((report, dir))
}

/// Runs the finite-difference suites; a breach is a numerical failure.
pub fn cmd_gradcheck(
    inst: &gradcheck::TinyInstance,
    corrupt: bool,
) -> anyhow::Result<gradcheck::GradcheckReport> {
    Ok(gradcheck::run(inst, corrupt)?)
}

pub fn cmd_correlate(
    cfg: &ExperimentConfig,
    out: &OutputOptions,
) -> anyhow::Result<(CorrelationReport, PathBuf)> {
    let (r, _, dir) = with_run(cfg, out, "correlate", |run| {
        let series = cfg.load_data()?;
        let report = dataset_corr(&series, &cfg.analysis.correlation)?;
        run.write_json("correlation.json", &report)?;
        Ok(report)
    })?;
    Ok((r, dir))
}

pub fn cmd_noise_sweep(
    cfg: &ExperimentConfig,
    out: &OutputOptions,
) -> anyhow::Result<(Vec<NoiseRow>, PathBuf)> {
    let (r, _, dir) = with_run(cfg, out, "noise-sweep", |run| {
        let rows = noise_sweep(&cfg.load_data()?, &cfg.analysis.k_list, &cfg.pipeline)?;
        write_table(&rows, run.path("noise_sweep.csv"))?;
        run.track("noise_sweep.csv");
        Ok(rows)
    })?;
    Ok((r, dir))
}

pub fn cmd_scale_sweep(
    cfg: &ExperimentConfig,
    out: &OutputOptions,
) -> anyhow::Result<(Vec<ScaleRow>, PathBuf)> {
    let (r, _, dir) = with_run(cfg, out, "scale-sweep", |run| {
        let rows = scale_sweep(&cfg.load_data()?, &cfg.analysis.n_list, &cfg.pipeline)?;
        write_table(&rows, run.path("scale_sweep.csv"))?;
        run.track("scale_sweep.csv");
        Ok(rows)
    })?;
    Ok((r, dir))
}
