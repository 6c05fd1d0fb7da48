mod commands;
mod config;

use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use crate::config::{RunConfig, SplitName};

#[derive(Parser)]
#[command(name = "astgode", version, about = "Spatio-temporal graph neural ODE traffic forecasting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Convert a CSV matrix or binary archive into the canonical archive file.
    Ingest {
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Number of sensors (CSV input only).
        #[arg(long)]
        vertices: Option<usize>,
        #[arg(long, default_value_t = 1)]
        features: usize,
        #[arg(long, default_value_t = 5)]
        cadence: u32,
    },
    /// Train a model and write checkpoints, the epoch log and a summary.
    Train(RunArgs),
    /// Per-horizon RMSE/MAE of a checkpoint, plus the historical-average baseline.
    Evaluate {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum)]
        split: Option<SplitName>,
    },
    /// Horizon curves of each branch decoded on its own and of the fused output.
    AblateFusion {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum)]
        split: Option<SplitName>,
    },
    /// Train twice from the same seed, with tape and with adjoint gradients.
    CompareAdjoint(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    /// JSON configuration; omitted keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::load(self.config.as_deref())?;
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(out) = &self.out {
            cfg.out_dir = out.clone();
        }
        Ok(cfg)
    }
}

fn with_eval_overrides(run: &RunArgs, checkpoint: &Option<PathBuf>, split: Option<SplitName>) -> Result<RunConfig> {
    let mut cfg = run.resolve()?;
    if let Some(c) = checkpoint {
        cfg.checkpoint = Some(c.clone());
    }
    if let Some(s) = split {
        cfg.eval_split = s;
    }
    Ok(cfg)
}

fn init_threads() -> Result<()> {
    if let Ok(value) = std::env::var("ASTGODE_THREADS") {
        let n: usize = value
            .parse()
            .with_context(|| format!("ASTGODE_THREADS must be a positive integer, got {value:?}"))?;
        anyhow::ensure!(n > 0, "ASTGODE_THREADS must be positive");
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    init_threads()?;
    match Cli::parse().command {
        Command::Ingest {
            input,
            out,
            vertices,
            features,
            cadence,
        } => commands::ingest(&commands::IngestArgs {
            input,
            out_dir: out,
            vertices,
            features,
            cadence_minutes: cadence,
        }),
        Command::Train(run) => commands::cmd_train(&run.resolve()?),
        Command::Evaluate { run, checkpoint, split } => {
            commands::cmd_evaluate(&with_eval_overrides(&run, &checkpoint, split)?)
        }
        Command::AblateFusion { run, checkpoint, split } => {
            commands::cmd_ablate_fusion(&with_eval_overrides(&run, &checkpoint, split)?)
        }
        Command::CompareAdjoint(run) => commands::cmd_compare_adjoint(&run.resolve()?),
    }
}
