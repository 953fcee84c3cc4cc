//! Experiment configuration: a JSON document whose every field has a default.
//!
//! The top-level `seed` is fanned out into the synthetic generator, the
//! trainer and the correlation sampler by [`ExperimentConfig::resolve`].

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};
use weave_core::analysis::{CorrelationSpec, Offsets};
use weave_core::data::{gen_coupled_ar, inject_noise_channels, load_csv, MultivariateSeries};
use weave_core::pipeline::PipelineConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DataSource {
    Csv { path: PathBuf },
    Synthetic(SyntheticSpec),
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synthetic(SyntheticSpec::default())
    }
}

/// Coupled-AR generator parameters; `seed` is overwritten by the top-level seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub len: usize,
    pub channels: usize,
    pub phi: f64,
    pub coupling: f64,
    pub noise_std: f64,
    pub noise_channels: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            len: 2000,
            channels: 5,
            phi: 0.8,
            coupling: 0.9,
            noise_std: 1.0,
            noise_channels: 0,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn generate(&self) -> weave_core::Result<MultivariateSeries> {
        let base = gen_coupled_ar(
            self.seed,
            self.len,
            self.channels,
            self.phi,
            self.coupling,
            self.noise_std,
        )?;
        Ok(inject_noise_channels(&base, self.noise_channels, self.seed))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnalysisSpec {
    pub correlation: CorrelationSpec,
    pub k_list: Vec<usize>,
    pub n_list: Vec<usize>,
}

impl Default for AnalysisSpec {
    fn default() -> Self {
        Self {
            correlation: CorrelationSpec::default(),
            k_list: vec![0, 2, 4, 6, 8, 10],
            n_list: vec![1, 2, 5],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub data: DataSource,
    pub pipeline: PipelineConfig,
    pub analysis: AnalysisSpec,
    pub output_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: DataSource::default(),
            pipeline: PipelineConfig::default(),
            analysis: AnalysisSpec::default(),
            output_dir: None,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    /// Propagates the top-level seed into every named stream's owner.
    pub fn resolve(mut self) -> Self {
        self.pipeline.train.seed = self.seed;
        if let DataSource::Synthetic(s) = &mut self.data {
            s.seed = self.seed;
        }
        if let Offsets::Sampled { seed, .. } = &mut self.analysis.correlation.offsets {
            *seed = self.seed;
        }
        self
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        if let DataSource::Csv { path } = &self.data {
            if !path.is_file() {
                bail!("data file {} does not exist", path.display());
            }
        }
        self.pipeline.validate()?;
        Ok(())
    }

    pub fn load_data(&self) -> anyhow::Result<MultivariateSeries> {
        Ok(match &self.data {
            DataSource::Csv { path } => load_csv(path)?,
            DataSource::Synthetic(s) => s.generate()?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_and_partial_documents_fill_in() {
        let cfg = ExperimentConfig::default();
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(
            serde_json::from_str::<ExperimentConfig>(&text).unwrap(),
            cfg
        );
        let partial: ExperimentConfig = serde_json::from_str(
            r#"{"seed": 9, "pipeline": {"lookback": 48, "train": {"epochs": 2}}}"#,
        )
        .unwrap();
        let r = partial.resolve();
        assert_eq!(r.pipeline.lookback, 48);
        assert_eq!(r.pipeline.horizon, 24);
        assert_eq!(r.pipeline.train.epochs, 2);
        assert_eq!(r.pipeline.train.seed, 9);
        assert!(matches!(r.data, DataSource::Synthetic(ref s) if s.seed == 9));
    }

    #[test]
    fn missing_csv_fails_validation() {
        let cfg = ExperimentConfig {
            data: DataSource::Csv {
                path: "/definitely/not/here.csv".into(),
            },
            ..ExperimentConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
