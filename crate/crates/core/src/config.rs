//! Run configuration, read from TOML with namespaced keys such as
//! `dataset.kind` or `sampler.eta`. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::DatasetSpec;
use crate::diffusion::TrainConfig;
use crate::error::{Error, Result};
use crate::sampler::SamplerConfig;
use crate::schedule::ScheduleKind;

/// Fibonacci schedules longer than this underflow the cumulative product.
pub const FIBONACCI_MAX_STEPS: usize = 100;

pub const DEFAULT_GRID: [f64; 9] = [0.01, 0.05, 0.1, 0.25, 0.5, 0.75, 0.9, 0.99, 0.999];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub grid: Vec<f64>,
    pub samples_per_point: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            grid: DEFAULT_GRID.to_vec(),
            samples_per_point: 256,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    /// Step counts `N` to compare at.
    pub steps: Vec<usize>,
    /// Size and seed of the held-out data batch samples are scored against.
    pub holdout_size: usize,
    pub holdout_seed: u64,
    /// Runs longer than this skip writing per-step traces.
    pub trace_max_steps: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            steps: vec![6, 10, 20, 50, 100],
            holdout_size: 2000,
            holdout_seed: 12_345,
            trace_max_steps: 100,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CheckpointPaths {
    /// Defaults to `<output_dir>/denoiser.nesd`.
    pub denoiser: Option<PathBuf>,
    /// Defaults to `<output_dir>/estimator.nesd`.
    pub estimator: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub output_dir: PathBuf,
    pub seeds: Vec<u64>,
    pub dataset: DatasetSpec,
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
    pub eval: EvalConfig,
    pub bench: BenchConfig,
    pub checkpoints: CheckpointPaths,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            output_dir: PathBuf::from("runs/default"),
            seeds: (0..10).collect(),
            dataset: DatasetSpec::default(),
            train: TrainConfig::default(),
            sampler: SamplerConfig::default(),
            eval: EvalConfig::default(),
            bench: BenchConfig::default(),
            checkpoints: CheckpointPaths::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.train.validate()?;
        self.sampler.validate()?;
        if self.eval.grid.is_empty() || self.eval.grid.iter().any(|a| !(*a > 0.0 && *a < 1.0)) {
            return Err(Error::Config("eval.grid must be a non-empty list of levels in (0, 1)".into()));
        }
        if self.eval.samples_per_point == 0 {
            return Err(Error::Config("eval.samples_per_point must be positive".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        if self.bench.steps.is_empty() || self.bench.steps.contains(&0) || self.bench.holdout_size == 0 {
            return Err(Error::Config("bench.steps must be positive step counts and holdout_size positive".into()));
        }
        if self.sampler.family == ScheduleKind::Fibonacci {
            let longest = self.bench.steps.iter().chain([&self.sampler.steps]).max().copied().unwrap_or(0);
            if longest > FIBONACCI_MAX_STEPS {
                return Err(Error::Config(format!(
                    "fibonacci schedules support at most {FIBONACCI_MAX_STEPS} steps, got {longest}"
                )));
            }
        }
        for &n in &self.bench.steps {
            SamplerConfig {
                steps: n,
                adjust: None,
                ..self.sampler.clone()
            }
            .validate()?;
        }
        Ok(())
    }

    pub fn denoiser_path(&self) -> PathBuf {
        self.checkpoints
            .denoiser
            .clone()
            .unwrap_or_else(|| self.output_dir.join("denoiser.nesd"))
    }

    pub fn estimator_path(&self) -> PathBuf {
        self.checkpoints
            .estimator
            .clone()
            .unwrap_or_else(|| self.output_dir.join("estimator.nesd"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::DatasetKind;
    use crate::sampler::UpdateRule;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(RunConfig::from_toml_str("").unwrap(), RunConfig::default());
    }

    #[test]
    fn dotted_keys_parse() {
        let cfg = RunConfig::from_toml_str(
            r#"
output_dir = "out"
dataset.kind = "swiss_roll_2d"
dataset.size = 500
sampler.eta = 0.5
sampler.update_rule = "ddpm"
sampler.adjust = [1, 3]
train.total_steps = 10
eval.grid = [0.5, 0.9]
"#,
        )
        .unwrap();
        assert_eq!(cfg.dataset.kind, DatasetKind::SwissRoll2d);
        assert_eq!(cfg.sampler.eta, 0.5);
        assert_eq!(cfg.sampler.update_rule, UpdateRule::Ddpm);
        assert_eq!(cfg.sampler.adjust, Some(vec![1, 3]));
        assert_eq!(cfg.denoiser_path(), PathBuf::from("out/denoiser.nesd"));
    }

    #[test]
    fn unknown_keys_are_config_errors() {
        for text in ["sampler.etaa = 1.0", "bogus = 1", "dataset.kind = \"cube\""] {
            let err = RunConfig::from_toml_str(text).unwrap_err();
            assert!(err.is_config(), "{text}: {err}");
        }
    }

    #[test]
    fn invalid_values_are_config_errors() {
        for text in [
            "sampler.steps = 0",
            "sampler.eta = -1.0",
            "sampler.adjust = [9]",
            "sampler.beta0 = 0.5",
            "eval.grid = [1.5]",
            "dataset.size = 0",
            "sampler.family = \"fibonacci\"\nbench.steps = [1000]",
        ] {
            assert!(RunConfig::from_toml_str(text).unwrap_err().is_config(), "{text}");
        }
    }

    #[test]
    fn toml_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.sampler.adjust = Some(vec![2]);
        cfg.checkpoints.denoiser = Some("d.nesd".into());
        let back = RunConfig::from_toml_str(&cfg.to_toml_string().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn missing_file_names_path() {
        let err = RunConfig::load(Path::new("/nonexistent/run.toml")).unwrap_err();
        assert!(err.is_config() && err.to_string().contains("/nonexistent/run.toml"));
    }
}
