use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::bail;
use clap::{Args, Parser, Subcommand};
use weave_cli::config::{DataSource, ExperimentConfig};
use weave_cli::gradcheck::TinyInstance;
use weave_cli::manifest::verify;
use weave_cli::{
    cmd_correlate, cmd_eval, cmd_gradcheck, cmd_noise_sweep, cmd_scale_sweep, cmd_synth, cmd_train,
    exit_code, NumericalFailure, OutputOptions, Split, DEFAULT_OUTPUT_ROOT,
};
use weave_core::fusion::FusionKind;
use weave_core::surrogate::Variant;

#[derive(Parser)]
#[command(
    name = "weave",
    version,
    about = "Adapt frozen univariate forecasters to multivariate panels"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct OutArgs {
    /// Output directory (default: <output-root>/<command>).
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Root for default output directories.
    #[arg(long, env = "WEAVE_OUTPUT_ROOT", default_value = DEFAULT_OUTPUT_ROOT)]
    output_root: PathBuf,
    /// Replace the contents of a non-empty output directory.
    #[arg(long)]
    overwrite: bool,
}

impl From<&OutArgs> for OutputOptions {
    fn from(a: &OutArgs) -> Self {
        OutputOptions {
            out_dir: a.out_dir.clone(),
            output_root: a.output_root.clone(),
            overwrite: a.overwrite,
        }
    }
}

/// Config file plus the overrides shared by data-driven commands.
#[derive(Args, Clone)]
struct ConfigArgs {
    /// JSON experiment config; omitted fields take documented defaults.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Read the dataset from this CSV instead of the configured source.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Clone)]
struct TrainArgs {
    /// Drop the error-bound regularizer from the objective.
    #[arg(long)]
    no_bound_reg: bool,
    /// Train once at this learning rate instead of sweeping the grid.
    #[arg(long)]
    lr: Option<f64>,
    /// Train once at the configured lr instead of sweeping the grid.
    #[arg(long)]
    no_grid: bool,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long, value_parser = parse_fusion)]
    fusion: Option<FusionKind>,
    #[arg(long, value_parser = parse_variant)]
    variant: Option<Variant>,
}

fn parse_fusion(s: &str) -> Result<FusionKind, String> {
    match s {
        "mlp" => Ok(FusionKind::Mlp),
        "cnn" => Ok(FusionKind::Cnn),
        _ => Err(format!("unknown fusion '{s}' (mlp|cnn)")),
    }
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    match s {
        "dual" => Ok(Variant::Dual),
        "single" => Ok(Variant::Single),
        _ => Err(format!("unknown variant '{s}' (dual|single)")),
    }
}

fn parse_list(s: &str) -> Result<Vec<usize>, String> {
    s.split(',')
        .map(|t| t.trim().parse::<usize>().map_err(|e| format!("'{t}': {e}")))
        .collect()
}

#[derive(Subcommand)]
enum Command {
    /// Generate a coupled-AR panel (optionally with pure-noise channels).
    Synth {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        len: Option<usize>,
        #[arg(long)]
        channels: Option<usize>,
        #[arg(long)]
        phi: Option<f64>,
        #[arg(long)]
        coupling: Option<f64>,
        #[arg(long)]
        noise_std: Option<f64>,
        #[arg(long)]
        noise_channels: Option<usize>,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Fit the frozen forecaster and adapt the surrogate pair.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        train: TrainArgs,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Score a checkpoint against the channel-independent baseline.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: Split,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Compare every analytic gradient with central differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write the report as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
        /// Perturb one analytic coordinate (exercises the failure path).
        #[arg(long, hide = true)]
        corrupt_gradient: bool,
    },
    /// Cross-time cross-variate correlation summary.
    Correlate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_parser = parse_list)]
        patch_sizes: Option<Vec<usize>>,
        #[arg(long)]
        samples: Option<usize>,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Inject pure-noise channels and track error on the original channels.
    NoiseSweep {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long, value_parser = parse_list)]
        k_list: Option<Vec<usize>>,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Keep the first N channels and track the gain over the baseline.
    ScaleSweep {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long, value_parser = parse_list)]
        n_list: Option<Vec<usize>>,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Recompute the digests recorded in a run manifest.
    Verify { dir: PathBuf },
    /// Print the default experiment config.
    DefaultConfig,
}

fn load_config(a: &ConfigArgs) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = match &a.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(p) = &a.data {
        cfg.data = DataSource::Csv { path: p.clone() };
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn apply_train(cfg: &mut ExperimentConfig, t: &TrainArgs) {
    let tc = &mut cfg.pipeline.train;
    if t.no_bound_reg {
        tc.use_bound_reg = false;
    }
    if let Some(lr) = t.lr {
        tc.lr = lr;
        cfg.pipeline.search_lr = false;
    }
    if t.no_grid {
        cfg.pipeline.search_lr = false;
    }
    if let Some(v) = t.epochs {
        tc.epochs = v;
    }
    if let Some(v) = t.patience {
        tc.patience = v;
    }
    if let Some(v) = t.lambda {
        tc.lambda = v;
    }
    if let Some(v) = t.variant {
        tc.variant = v;
    }
    if let Some(k) = t.fusion {
        cfg.pipeline.fusion.kind = k;
    }
}

fn print_json<T: serde::Serialize>(v: &T) -> anyhow::Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Synth {
            cfg,
            len,
            channels,
            phi,
            coupling,
            noise_std,
            noise_channels,
            out,
        } => {
            let mut c = load_config(&cfg)?;
            let DataSource::Synthetic(s) = &mut c.data else {
                bail!("synth needs a synthetic data source, not a CSV");
            };
            s.len = len.unwrap_or(s.len);
            s.channels = channels.unwrap_or(s.channels);
            s.phi = phi.unwrap_or(s.phi);
            s.coupling = coupling.unwrap_or(s.coupling);
            s.noise_std = noise_std.unwrap_or(s.noise_std);
            s.noise_channels = noise_channels.unwrap_or(s.noise_channels);
            let r = cmd_synth(&c.resolve(), &(&out).into())?;
            println!("wrote {}", r.data_path.display());
            for ch in &r.summary {
                println!(
                    "{:>12}  mean {:>9.4}  std {:>8.4}",
                    ch.name, ch.mean, ch.std
                );
            }
        }
        Command::Train { cfg, train, out } => {
            let mut c = load_config(&cfg)?;
            apply_train(&mut c, &train);
            let r = cmd_train(&c.resolve(), &(&out).into())?;
            let best = r.report.best();
            println!("run directory: {}", r.dir.display());
            println!(
                "best epoch {} (lr {}), selection metric {:.6}, baseline val MSE {:.6}",
                r.report.best_epoch,
                r.report.config.lr,
                best.selection_metric,
                r.report.baseline_val_mse
            );
            if let Some(t) = &r.test {
                println!(
                    "test MSE {:.6} / MAE {:.6}  (baseline {:.6} / {:.6})",
                    t.mse, t.mae, t.baseline_mse, t.baseline_mae
                );
            }
        }
        Command::Eval {
            cfg,
            checkpoint,
            split,
            out,
        } => {
            let c = load_config(&cfg)?.resolve();
            let (r, dir) = cmd_eval(&c, &checkpoint, split, &(&out).into())?;
            println!("wrote {}", dir.join("eval.json").display());
            println!("channel  baseline_mse        mse      omega  condition");
            for k in 0..r.channels {
                println!(
                    "{k:>7}  {:>12.6}  {:>9.6}  {:>9.6}  {}",
                    r.baseline_channel_mse[k], r.channel_mse[k], r.omega[k], r.condition[k]
                );
            }
            println!("overall  {:>12.6}  {:>9.6}", r.baseline_mse, r.mse);
        }
        Command::Gradcheck {
            seed,
            json,
            corrupt_gradient,
        } => {
            let inst = TinyInstance {
                seed,
                ..TinyInstance::default()
            };
            let r = cmd_gradcheck(&inst, corrupt_gradient)?;
            for e in &r.entries {
                println!(
                    "{:<30} {:<14} {:>10.3e}  {}",
                    e.suite,
                    e.tensor,
                    e.max_rel_error,
                    if e.passed { "ok" } else { "FAIL" }
                );
            }
            if let Some(p) = json {
                std::fs::write(&p, serde_json::to_string_pretty(&r)?)?;
            }
            if !r.passed {
                return Err(NumericalFailure(format!(
                    "gradient check failed: max relative error {:.3e} >= {:.0e}",
                    r.max_rel_error(),
                    r.threshold
                ))
                .into());
            }
            println!("all gradients within {:.0e}", r.threshold);
        }
        Command::Correlate {
            cfg,
            patch_sizes,
            samples,
            out,
        } => {
            let mut c = load_config(&cfg)?;
            if let Some(p) = patch_sizes {
                c.analysis.correlation.patch_sizes = p;
            }
            if let Some(n) = samples {
                c.analysis.correlation.offsets =
                    weave_core::analysis::Offsets::Sampled { count: n, seed: 0 };
            }
            let (r, dir) = cmd_correlate(&c.resolve(), &(&out).into())?;
            print_json(&r)?;
            eprintln!("wrote {}", dir.join("correlation.json").display());
        }
        Command::NoiseSweep {
            cfg,
            train,
            k_list,
            out,
        } => {
            let mut c = load_config(&cfg)?;
            apply_train(&mut c, &train);
            if let Some(k) = k_list {
                c.analysis.k_list = k;
            }
            let (rows, dir) = cmd_noise_sweep(&c.resolve(), &(&out).into())?;
            println!(
                "{:>4} {:>9} {:>12} {:>10}",
                "k", "channels", "baseline_mse", "mse"
            );
            for r in &rows {
                println!(
                    "{:>4} {:>9} {:>12.6} {:>10.6}",
                    r.k, r.channels, r.baseline_mse, r.mse
                );
            }
            eprintln!("wrote {}", dir.join("noise_sweep.csv").display());
        }
        Command::ScaleSweep {
            cfg,
            train,
            n_list,
            out,
        } => {
            let mut c = load_config(&cfg)?;
            apply_train(&mut c, &train);
            if let Some(n) = n_list {
                c.analysis.n_list = n;
            }
            let (rows, dir) = cmd_scale_sweep(&c.resolve(), &(&out).into())?;
            println!(
                "{:>4} {:>12} {:>10} {:>8}",
                "N", "baseline_mse", "mse", "gain"
            );
            for r in &rows {
                println!(
                    "{:>4} {:>12.6} {:>10.6} {:>7.2}%",
                    r.n,
                    r.baseline_mse,
                    r.mse,
                    100.0 * r.gain
                );
            }
            eprintln!("wrote {}", dir.join("scale_sweep.csv").display());
        }
        Command::Verify { dir } => {
            let (m, bad) = verify(&dir)?;
            for b in &bad {
                println!("{}: {}", b.path, b.problem);
            }
            if !bad.is_empty() {
                bail!(
                    "{} of {} outputs do not match the manifest",
                    bad.len(),
                    m.outputs.len()
                );
            }
            println!("{} outputs verified", m.outputs.len());
        }
        Command::DefaultConfig => print_json(&ExperimentConfig::default())?,
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
