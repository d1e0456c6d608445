//! JSON run configuration.

use std::path::{Path, PathBuf};

use erkg::eval::TiePolicy;
use erkg::model::ModelKind;
use erkg::regularizer::RegularizerSpec;
use erkg::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub const DEFAULT_LEARNING_RATES: [f64; 6] = [0.5, 0.1, 0.05, 0.01, 0.005, 0.001];
pub const DEFAULT_LAMBDAS: [f64; 6] = [0.001, 0.005, 0.01, 0.05, 0.1, 0.5];

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub train: Option<PathBuf>,
    pub valid: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub categories: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub output: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub dim: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
    pub eval_every: usize,
    pub adagrad_eps: f64,
    pub early_stopping_patience: Option<usize>,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            dim: t.dim,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            epochs: t.epochs,
            seed: t.seed,
            eval_every: t.eval_every,
            adagrad_eps: t.adagrad_eps,
            early_stopping_patience: t.early_stopping_patience,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationSection {
    pub tie_policy: TiePolicy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSection {
    pub learning_rates: Vec<f64>,
    pub lambdas: Vec<f64>,
}

impl Default for GridSection {
    fn default() -> Self {
        GridSection {
            learning_rates: DEFAULT_LEARNING_RATES.to_vec(),
            lambdas: DEFAULT_LAMBDAS.to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub paths: Paths,
    pub model: ModelKind,
    pub train: TrainSection,
    pub regularizer: RegularizerSpec,
    pub evaluation: EvaluationSection,
    pub threads: usize,
    /// Add inverse relations so head queries become tail queries.
    pub reciprocal: bool,
    pub grid: GridSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            paths: Paths::default(),
            model: ModelKind::ComplEx,
            train: TrainSection::default(),
            regularizer: RegularizerSpec::default(),
            evaluation: EvaluationSection::default(),
            threads: 1,
            reciprocal: true,
            grid: GridSection::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        serde_json::from_str(text).map_err(|e| CliError::Usage(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let mut config = Self::from_json(&text)?;
        config.resolve_relative_to(path.parent().unwrap_or(Path::new(".")));
        Ok(config)
    }

    /// Makes relative paths relative to the config file's directory.
    fn resolve_relative_to(&mut self, base: &Path) {
        let p = &mut self.paths;
        for slot in [
            &mut p.train,
            &mut p.valid,
            &mut p.test,
            &mut p.categories,
            &mut p.checkpoint,
            &mut p.output,
        ] {
            if let Some(path) = slot {
                if path.is_relative() {
                    *path = base.join(&*path);
                }
            }
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            model: self.model,
            dim: t.dim,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            epochs: t.epochs,
            seed: t.seed,
            regularizer: self.regularizer.clone(),
            eval_every: t.eval_every,
            adagrad_eps: t.adagrad_eps,
            early_stopping_patience: t.early_stopping_patience,
            tie_policy: self.evaluation.tie_policy,
            threads: self.threads,
        }
    }

    /// Checks numeric settings and that every referenced input file exists.
    pub fn validate(&self) -> Result<(), CliError> {
        self.train_config().validate()?;
        for (name, path) in [
            ("train", &self.paths.train),
            ("valid", &self.paths.valid),
            ("test", &self.paths.test),
        ] {
            match path {
                None => return Err(CliError::Usage(format!("paths.{name} is required"))),
                Some(p) if !p.is_file() => {
                    return Err(CliError::Usage(format!("paths.{name}: {} does not exist", p.display())))
                }
                _ => {}
            }
        }
        if let Some(p) = &self.paths.categories {
            if !p.is_file() {
                return Err(CliError::Usage(format!("paths.categories: {} does not exist", p.display())));
            }
        }
        if self.grid.learning_rates.is_empty() || self.grid.lambdas.is_empty() {
            return Err(CliError::Usage("grid axes must be non-empty".into()));
        }
        Ok(())
    }

    pub fn output_dir(&self) -> PathBuf {
        self.paths.output.clone().unwrap_or_else(|| PathBuf::from("."))
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.paths
            .checkpoint
            .clone()
            .unwrap_or_else(|| self.output_dir().join("model.ckpt"))
    }
}
