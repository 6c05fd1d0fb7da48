use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use astgode::checkpoint::{read_checkpoint, write_checkpoint};
use astgode::data::{
    chronological_split, enumerate_valid_anchors, fit_normalizer, load_archive, read_csv_archive, write_archive,
    Branch, CsvLayout, NormalizationStats, SplitRanges, TrafficArchive,
};
use astgode::graph::{build_adjacency, cheb_basis, read_distance_list, scaled_laplacian, ChebBasis, SensorGraph};
use astgode::model::{ModelDims, ModelParams, CHEB_ORDER};
use astgode::training::{
    evaluate, evaluate_historical_average, train, write_log_csv, EpochRecord, GradientMode, Horizon,
    MetricsReport, Problem, TrainOutcome,
};
use serde::Serialize;

use crate::config::{RunConfig, SplitName};

pub struct IngestArgs {
    pub input: PathBuf,
    pub out_dir: PathBuf,
    pub vertices: Option<usize>,
    pub features: usize,
    pub cadence_minutes: u32,
}

pub const ARCHIVE_FILE: &str = "archive.astg";

/// Converts a CSV matrix (or re-validates a binary archive) into the
/// canonical binary archive.
pub fn ingest(args: &IngestArgs) -> Result<()> {
    let mut head = [0u8; 4];
    let is_binary = fs::File::open(&args.input)
        .and_then(|mut f| std::io::Read::read_exact(&mut f, &mut head))
        .map(|_| &head == b"ASTG")
        .unwrap_or(false);
    let archive = if is_binary {
        load_archive(&args.input)?
    } else {
        let vertices = args
            .vertices
            .context("--vertices is required when ingesting a CSV matrix")?;
        let layout = CsvLayout {
            vertices,
            features: args.features,
            cadence_minutes: args.cadence_minutes,
        };
        read_csv_archive(&args.input, layout)?
    };
    fs::create_dir_all(&args.out_dir)?;
    let out = args.out_dir.join(ARCHIVE_FILE);
    write_archive(&out, &archive)?;
    println!(
        "T={} N={} F={} missing={}",
        archive.steps(),
        archive.vertices(),
        archive.features(),
        archive.missing_fraction()
    );
    println!("wrote {}", out.display());
    Ok(())
}

/// Archive, graph basis, splits and normalization shared by every command.
struct Experiment {
    archive: TrafficArchive,
    basis: ChebBasis,
    splits: SplitRanges,
    stats: NormalizationStats,
}

impl Experiment {
    fn load(cfg: &RunConfig) -> Result<Self> {
        let path = cfg.archive.as_ref().context("config key `archive` is required")?;
        let archive = load_archive(path).with_context(|| format!("loading archive {}", path.display()))?;
        let n = archive.vertices();
        let graph = match &cfg.distances {
            Some(p) => {
                let records = read_distance_list(p).with_context(|| format!("loading distances {}", p.display()))?;
                build_adjacency(n, &records, cfg.sigma, cfg.adjacency_epsilon)?
            }
            None => {
                log::warn!("no distance list configured; using an edgeless graph");
                SensorGraph::empty(n)
            }
        };
        let basis = cheb_basis(&scaled_laplacian(&graph)?, CHEB_ORDER)?;
        let splits = chronological_split(&archive, cfg.split)?;
        let stats = fit_normalizer(&archive, splits.train.clone())?;
        Ok(Self {
            archive,
            basis,
            splits,
            stats,
        })
    }

    fn problem(&self, cfg: &RunConfig) -> Result<Problem<'_>> {
        Ok(Problem {
            archive: &self.archive,
            stats: &self.stats,
            basis: &self.basis,
            integrator: cfg.integrator()?,
            loss: cfg.loss()?,
        })
    }

    fn anchors(&self, split: SplitName, limit: Option<usize>) -> Vec<usize> {
        let range = match split {
            SplitName::Train => &self.splits.train,
            SplitName::Val => &self.splits.val,
            SplitName::Test => &self.splits.test,
        };
        thin(enumerate_valid_anchors(&self.archive, range.clone()), limit)
    }

    fn dims(&self, hidden: usize) -> ModelDims {
        ModelDims {
            vertices: self.archive.vertices(),
            features: self.archive.features(),
            steps: self.archive.periods().hour,
            hidden,
        }
    }

    fn horizons(&self, minutes: &[u32]) -> Result<Vec<Horizon>> {
        let cadence = self
            .archive
            .cadence_minutes()
            .context("the archive has no cadence, so horizons in minutes are undefined")?;
        Ok(minutes
            .iter()
            .map(|&m| Horizon::from_minutes(m, cadence))
            .collect::<astgode::Result<_>>()?)
    }
}

/// Evenly spaced subset of at most `limit` anchors.
fn thin(anchors: Vec<usize>, limit: Option<usize>) -> Vec<usize> {
    match limit {
        Some(k) if k < anchors.len() => (0..k).map(|i| anchors[i * anchors.len() / k]).collect(),
        _ => anchors,
    }
}

fn prepare_out(cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(&cfg.out_dir).with_context(|| format!("creating {}", cfg.out_dir.display()))?;
    cfg.dump(&cfg.out_dir)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn ensure_finite_log(log: &[EpochRecord]) -> Result<()> {
    for r in log {
        ensure!(
            r.train_loss.is_finite() && r.val_rmse.is_finite() && r.val_mae.is_finite(),
            "epoch {} produced non-finite metrics",
            r.epoch
        );
    }
    Ok(())
}

#[derive(Serialize)]
struct TrainSummary {
    best_epoch: usize,
    initial_train_loss: f64,
    final_train_loss: f64,
    best_val_rmse: f64,
    train_anchors: usize,
    val_anchors: usize,
    adjoint_peak_states: usize,
    adjoint_peak_tape_nodes: usize,
    adjoint_vjp_evaluations: usize,
}

fn run_training(exp: &Experiment, cfg: &RunConfig, mode: GradientMode, dir: &Path) -> Result<TrainOutcome> {
    fs::create_dir_all(dir)?;
    let problem = exp.problem(cfg)?;
    let train_anchors = exp.anchors(SplitName::Train, cfg.max_train_anchors);
    let val_anchors = exp.anchors(SplitName::Val, cfg.max_eval_anchors);
    let init = ModelParams::init(exp.dims(cfg.hidden), cfg.seed)?;
    let mut train_cfg = cfg.train();
    train_cfg.gradient_mode = mode;
    log::info!(
        "training on {} anchors ({} validation), {:?} gradients",
        train_anchors.len(),
        val_anchors.len(),
        mode
    );
    let outcome = train(&problem, init, &train_anchors, &val_anchors, &train_cfg)?;
    ensure_finite_log(&outcome.log)?;
    write_checkpoint(dir.join("best.ckpt"), &outcome.best, None)?;
    write_checkpoint(dir.join("last.ckpt"), &outcome.last, Some(&outcome.optimizer))?;
    write_log_csv(dir.join("epochs.csv"), &outcome.log)?;
    let first = outcome.log.first().expect("epoch 0 row");
    let last = outcome.log.last().expect("epoch 0 row");
    let summary = TrainSummary {
        best_epoch: outcome.best_epoch,
        initial_train_loss: first.train_loss,
        final_train_loss: last.train_loss,
        best_val_rmse: outcome.log[outcome.best_epoch].val_rmse,
        train_anchors: train_anchors.len(),
        val_anchors: val_anchors.len(),
        adjoint_peak_states: outcome.adjoint.peak_states,
        adjoint_peak_tape_nodes: outcome.adjoint.peak_tape_nodes,
        adjoint_vjp_evaluations: outcome.adjoint.vjp_evaluations,
    };
    write_json(&dir.join("summary.json"), &summary)?;
    Ok(outcome)
}

pub fn cmd_train(cfg: &RunConfig) -> Result<()> {
    prepare_out(cfg)?;
    let exp = Experiment::load(cfg)?;
    let outcome = run_training(&exp, cfg, cfg.gradient_mode, &cfg.out_dir)?;
    let last = outcome.log.last().expect("epoch 0 row");
    println!(
        "best epoch {} of {}; final train loss {:.6}, val RMSE {:.4}",
        outcome.best_epoch,
        cfg.epochs,
        last.train_loss,
        outcome.log[outcome.best_epoch].val_rmse
    );
    println!("wrote {}", cfg.out_dir.display());
    Ok(())
}

#[derive(Serialize)]
struct EvalOutput {
    split: SplitName,
    anchors: usize,
    checkpoint: PathBuf,
    model: MetricsReport,
    historical_average: MetricsReport,
}

fn load_params(exp: &Experiment, cfg: &RunConfig) -> Result<(PathBuf, ModelParams)> {
    let path = cfg.checkpoint_path();
    let params = read_checkpoint(&path)
        .with_context(|| format!("loading checkpoint {}", path.display()))?
        .params;
    let d = params.dims();
    let want = exp.dims(d.hidden);
    if d != want {
        bail!("checkpoint dimensions {d:?} do not match the archive ({want:?})");
    }
    Ok((path, params))
}

pub fn cmd_evaluate(cfg: &RunConfig) -> Result<()> {
    prepare_out(cfg)?;
    let exp = Experiment::load(cfg)?;
    let (checkpoint, params) = load_params(&exp, cfg)?;
    let horizons = exp.horizons(&cfg.horizons_minutes)?;
    let anchors = exp.anchors(cfg.eval_split, cfg.max_eval_anchors);
    let problem = exp.problem(cfg)?;
    let eval = evaluate(&problem, &params, &anchors)?;
    let model = eval.fused.report(&horizons, cfg.windowed_metrics)?;
    let ha = evaluate_historical_average(&exp.archive, &exp.stats, &anchors)?.report(&horizons, cfg.windowed_metrics)?;
    ensure!(
        model.overall.rmse.is_finite() && model.overall.mae.is_finite(),
        "evaluation produced non-finite metrics"
    );
    for h in &model.horizons {
        println!("{:>3} min: RMSE {:.4}  MAE {:.4}", h.minutes, h.summary.rmse, h.summary.mae);
    }
    println!("overall: RMSE {:.4}  MAE {:.4}", model.overall.rmse, model.overall.mae);
    let out = EvalOutput {
        split: cfg.eval_split,
        anchors: anchors.len(),
        checkpoint,
        model,
        historical_average: ha,
    };
    write_json(&cfg.out_dir.join("metrics.json"), &out)
}

pub fn cmd_ablate_fusion(cfg: &RunConfig) -> Result<()> {
    prepare_out(cfg)?;
    let exp = Experiment::load(cfg)?;
    let (_, params) = load_params(&exp, cfg)?;
    let anchors = exp.anchors(cfg.eval_split, cfg.max_eval_anchors);
    let problem = exp.problem(cfg)?;
    let eval = evaluate(&problem, &params, &anchors)?;
    let path = cfg.out_dir.join("ablation.csv");
    let mut out = std::io::BufWriter::new(fs::File::create(&path)?);
    writeln!(out, "horizon_step,branch,rmse,mae")?;
    let mut columns: Vec<(&str, _)> = Branch::ALL
        .iter()
        .map(|b| (b.name(), &eval.branches[b.index()]))
        .collect();
    columns.push(("fused", &eval.fused));
    for step in 0..eval.fused.steps() {
        for (name, acc) in &columns {
            let s = acc.step(step);
            ensure!(s.rmse.is_finite() && s.mae.is_finite(), "non-finite {name} metrics at step {}", step + 1);
            writeln!(out, "{},{},{},{}", step + 1, name, s.rmse, s.mae)?;
        }
    }
    out.flush()?;
    println!("wrote {}", path.display());
    Ok(())
}

#[derive(Serialize)]
struct ModeSummary {
    final_val_rmse: f64,
    final_val_mae: f64,
    best_epoch: usize,
    initial_train_loss: f64,
    final_train_loss: f64,
    /// Largest change in validation RMSE between consecutive epochs.
    max_val_rmse_oscillation: f64,
}

impl ModeSummary {
    fn new(outcome: &TrainOutcome) -> Self {
        let log = &outcome.log;
        let last = log.last().expect("epoch 0 row");
        let osc = log
            .windows(2)
            .map(|w| (w[1].val_rmse - w[0].val_rmse).abs())
            .fold(0.0, f64::max);
        Self {
            final_val_rmse: last.val_rmse,
            final_val_mae: last.val_mae,
            best_epoch: outcome.best_epoch,
            initial_train_loss: log[0].train_loss,
            final_train_loss: last.train_loss,
            max_val_rmse_oscillation: osc,
        }
    }
}

#[derive(Serialize)]
struct CompareSummary {
    tape: ModeSummary,
    adjoint: ModeSummary,
    /// Largest absolute difference between the two logs over loss and metric columns.
    max_log_difference: f64,
}

pub fn cmd_compare_adjoint(cfg: &RunConfig) -> Result<()> {
    prepare_out(cfg)?;
    let exp = Experiment::load(cfg)?;
    let tape = run_training(&exp, cfg, GradientMode::Tape, &cfg.out_dir.join("tape"))?;
    let adjoint = run_training(&exp, cfg, GradientMode::Adjoint, &cfg.out_dir.join("adjoint"))?;
    let max_log_difference = tape
        .log
        .iter()
        .zip(&adjoint.log)
        .flat_map(|(a, b)| {
            [
                (a.train_loss - b.train_loss).abs(),
                (a.val_rmse - b.val_rmse).abs(),
                (a.val_mae - b.val_mae).abs(),
            ]
        })
        .fold(0.0, f64::max);
    let summary = CompareSummary {
        tape: ModeSummary::new(&tape),
        adjoint: ModeSummary::new(&adjoint),
        max_log_difference,
    };
    println!(
        "tape: val RMSE {:.4}; adjoint: val RMSE {:.4}; max log difference {:.3e}",
        summary.tape.final_val_rmse, summary.adjoint.final_val_rmse, max_log_difference
    );
    write_json(&cfg.out_dir.join("compare.json"), &summary)
}
