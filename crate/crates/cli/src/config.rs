use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use astgode::data::DEFAULT_SPLIT;
use astgode::model::DEFAULT_HIDDEN;
use astgode::odeint::{IntegratorConfig, Method};
use astgode::training::{GradientMode, LossConfig, TrainConfig};
use serde::{Deserialize, Serialize};

/// Which chronological part an evaluation runs on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Val,
    Test,
}

/// Flat run configuration. Every key is optional in the JSON file and
/// unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Binary archive produced by `ingest`.
    pub archive: Option<PathBuf>,
    /// `from,to,cost` distance list; without one the graph has no edges.
    pub distances: Option<PathBuf>,
    pub out_dir: PathBuf,
    /// Checkpoint for `evaluate` / `ablate-fusion`; defaults to `<out_dir>/best.ckpt`.
    pub checkpoint: Option<PathBuf>,

    /// Gaussian kernel width; defaults to the std of all distances.
    pub sigma: Option<f64>,
    pub adjacency_epsilon: f64,
    pub split: [f64; 3],
    pub hidden: usize,

    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    pub seed: u64,
    pub gradient_mode: GradientMode,
    pub alpha: f64,
    pub method: Method,
    pub substeps: usize,

    pub eval_split: SplitName,
    pub horizons_minutes: Vec<u32>,
    /// Pool steps `0..=h` instead of reporting step `h` alone.
    pub windowed_metrics: bool,
    /// Evenly thinned subset of training anchors, for desk-scale runs.
    pub max_train_anchors: Option<usize>,
    pub max_eval_anchors: Option<usize>,
    /// When false the epoch log records 0 seconds so reruns compare bitwise.
    pub log_wall_time: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        let integ = IntegratorConfig::default();
        Self {
            archive: None,
            distances: None,
            out_dir: PathBuf::from("astgode-out"),
            checkpoint: None,
            sigma: None,
            adjacency_epsilon: 0.1,
            split: DEFAULT_SPLIT,
            hidden: DEFAULT_HIDDEN,
            learning_rate: train.learning_rate,
            epochs: train.epochs,
            batch_size: train.batch_size,
            beta1: train.beta1,
            beta2: train.beta2,
            adam_epsilon: train.epsilon,
            seed: train.seed,
            gradient_mode: train.gradient_mode,
            alpha: LossConfig::default().alpha,
            method: integ.method,
            substeps: integ.substeps,
            eval_split: SplitName::Test,
            horizons_minutes: vec![15, 30, 60],
            windowed_metrics: false,
            max_train_anchors: None,
            max_eval_anchors: None,
            log_wall_time: true,
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            epochs: self.epochs,
            batch_size: self.batch_size,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.adam_epsilon,
            seed: self.seed,
            gradient_mode: self.gradient_mode,
            log_wall_time: self.log_wall_time,
        }
    }

    pub fn loss(&self) -> Result<LossConfig> {
        Ok(LossConfig::new(self.alpha)?)
    }

    pub fn integrator(&self) -> Result<IntegratorConfig> {
        Ok(IntegratorConfig::new(self.method, self.substeps)?)
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.checkpoint.clone().unwrap_or_else(|| self.out_dir.join("best.ckpt"))
    }

    /// Writes the effective configuration next to the outputs.
    pub fn dump(&self, dir: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(dir.join("config.json"), text + "\n")?;
        Ok(())
    }
}
