//! Composite loss, Adam, masked metrics, and the training / evaluation loops.

mod adam;
mod baseline;
mod grad;
mod loss;
mod metrics;

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use adam::{adam_step, AdamConfig, AdamState};
pub use baseline::historical_average;
pub use grad::{sample_gradient, sample_loss, GradientMode, SampleGradient};
pub use loss::{composite_loss, masked_mse, masked_mse_value, LossConfig, MaskedLoss};
pub use metrics::{ErrorSummary, Horizon, HorizonMetrics, MetricsAccumulator, MetricsReport};

use crate::data::{extract_bundle, NormalizationStats, TrafficArchive};
use crate::error::{Error, Result};
use crate::graph::ChebBasis;
use crate::model::{model_forward, ModelParams};
use crate::odeint::{AdjointStats, IntegratorConfig};
use crate::rng;
use crate::tensor::Tensor;

/// Everything fixed across a training or evaluation run.
#[derive(Debug, Clone, Copy)]
pub struct Problem<'a> {
    pub archive: &'a TrafficArchive,
    pub stats: &'a NormalizationStats,
    pub basis: &'a ChebBasis,
    pub integrator: IntegratorConfig,
    pub loss: LossConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
    pub gradient_mode: GradientMode,
    /// When false the log records 0 seconds per epoch so runs compare bitwise.
    pub log_wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            epochs: 50,
            batch_size: 32,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
            gradient_mode: GradientMode::Tape,
            log_wall_time: true,
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        let ok = self.learning_rate >= 0.0
            && self.learning_rate.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0;
        if !ok {
            return Err(Error::invalid(format!("invalid optimizer settings: {self:?}")));
        }
        Ok(())
    }
}

/// One row of the training log. Epoch 0 describes the initial parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_rmse: f64,
    pub val_mae: f64,
    pub wall_seconds: f64,
}

pub const LOG_HEADER: &str = "epoch,train_loss,val_rmse,val_mae,wall_seconds";

pub fn write_log_csv(path: impl AsRef<Path>, log: &[EpochRecord]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "{LOG_HEADER}")?;
    for r in log {
        writeln!(
            out,
            "{},{},{},{},{}",
            r.epoch, r.train_loss, r.val_rmse, r.val_mae, r.wall_seconds
        )?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters with the lowest validation RMSE (earliest on ties).
    pub best: ModelParams,
    pub best_epoch: usize,
    pub last: ModelParams,
    pub optimizer: AdamState,
    pub log: Vec<EpochRecord>,
    /// Peak adjoint memory figures over the run; zero in tape mode.
    pub adjoint: AdjointStats,
}

/// Mean composite loss and mean gradient over `anchors`.
///
/// Per-sample work runs in parallel; the reduction is sequential in anchor
/// order, so the result does not depend on the thread count.
pub fn batch_gradient(
    problem: &Problem,
    params: &ModelParams,
    anchors: &[usize],
    mode: GradientMode,
) -> Result<(f64, ModelParams, AdjointStats)> {
    if anchors.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let per_sample: Vec<SampleGradient> = anchors
        .par_iter()
        .map(|&a| {
            let bundle = extract_bundle(problem.archive, a, problem.stats)?;
            sample_gradient(params, &bundle, problem.basis, problem.integrator, &problem.loss, mode)
        })
        .collect::<Result<_>>()?;
    let mut loss = 0.0;
    let mut sum = ModelParams::zeros(params.dims());
    let mut stats = AdjointStats::default();
    for s in &per_sample {
        loss += s.loss;
        for (acc, (_, g)) in sum.values_mut().into_iter().zip(s.grads.entries()) {
            acc.add_assign(g)?;
        }
        stats.peak_states = stats.peak_states.max(s.adjoint.peak_states);
        stats.peak_tape_nodes = stats.peak_tape_nodes.max(s.adjoint.peak_tape_nodes);
        stats.vjp_evaluations += s.adjoint.vjp_evaluations;
    }
    let inv = 1.0 / anchors.len() as f64;
    let mean = sum.map(|_, t| t.scale(inv));
    if !mean.is_finite() {
        return Err(Error::NonFinite { op: "batch gradient" });
    }
    Ok((loss * inv, mean, stats))
}

/// Mean composite loss over `anchors` without gradients.
pub fn mean_loss(problem: &Problem, params: &ModelParams, anchors: &[usize]) -> Result<f64> {
    if anchors.is_empty() {
        return Ok(f64::NAN);
    }
    let losses: Vec<f64> = anchors
        .par_iter()
        .map(|&a| {
            let bundle = extract_bundle(problem.archive, a, problem.stats)?;
            sample_loss(params, &bundle, problem.basis, problem.integrator, &problem.loss)
        })
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / anchors.len() as f64)
}

/// Mini-batch Adam over shuffled training anchors, validating after every
/// epoch and keeping the best parameters by validation RMSE.
pub fn train(
    problem: &Problem,
    init: ModelParams,
    train_anchors: &[usize],
    val_anchors: &[usize],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_anchors.is_empty() {
        return Err(Error::invalid("no training anchors"));
    }
    let adam_cfg = cfg.adam();
    let mut params = init;
    let mut optimizer = AdamState::new(params.entries().into_iter().map(|(_, t)| t));
    let mut shuffle = rng::stream(cfg.seed, rng::SHUFFLE_STREAM);
    let mut order = train_anchors.to_vec();
    let mut log = Vec::with_capacity(cfg.epochs + 1);
    let mut adjoint = AdjointStats::default();

    let started = Instant::now();
    let initial_loss = mean_loss(problem, &params, train_anchors)?;
    let val = validation_summary(problem, &params, val_anchors)?;
    log.push(record(0, initial_loss, val, started, cfg));
    let mut best = params.clone();
    let mut best_epoch = 0;
    let mut best_rmse = val.rmse;

    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        order.shuffle(&mut shuffle);
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let (loss, grads, stats) = batch_gradient(problem, &params, batch, cfg.gradient_mode)?;
            loss_sum += loss * batch.len() as f64;
            adjoint.peak_states = adjoint.peak_states.max(stats.peak_states);
            adjoint.peak_tape_nodes = adjoint.peak_tape_nodes.max(stats.peak_tape_nodes);
            adjoint.vjp_evaluations += stats.vjp_evaluations;
            let grad_refs: Vec<&Tensor> = grads.entries().into_iter().map(|(_, t)| t).collect();
            adam_step(&mut params.values_mut(), &grad_refs, &mut optimizer, &adam_cfg)?;
        }
        if !params.is_finite() {
            return Err(Error::NonFinite { op: "adam update" });
        }
        let train_loss = loss_sum / order.len() as f64;
        let val = validation_summary(problem, &params, val_anchors)?;
        let row = record(epoch, train_loss, val, started, cfg);
        log::info!(
            "epoch {epoch}: train loss {:.6}, val rmse {:.4}, val mae {:.4}",
            row.train_loss,
            row.val_rmse,
            row.val_mae
        );
        log.push(row);
        let improved = if val_anchors.is_empty() { true } else { val.rmse < best_rmse || best_rmse.is_nan() };
        if improved {
            best = params.clone();
            best_epoch = epoch;
            best_rmse = val.rmse;
        }
    }

    Ok(TrainOutcome {
        best,
        best_epoch,
        last: params,
        optimizer,
        log,
        adjoint,
    })
}

fn record(epoch: usize, train_loss: f64, val: ErrorSummary, started: Instant, cfg: &TrainConfig) -> EpochRecord {
    EpochRecord {
        epoch,
        train_loss,
        val_rmse: val.rmse,
        val_mae: val.mae,
        wall_seconds: if cfg.log_wall_time { started.elapsed().as_secs_f64() } else { 0.0 },
    }
}

fn validation_summary(problem: &Problem, params: &ModelParams, anchors: &[usize]) -> Result<ErrorSummary> {
    Ok(evaluate(problem, params, anchors)?.fused.overall())
}

/// Denormalized error accumulators for the fused forecast and for each
/// branch decoded on its own.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub fused: MetricsAccumulator,
    /// Indexed by [`crate::data::Branch::index`].
    pub branches: [MetricsAccumulator; 3],
    pub anchors: usize,
}

const EVAL_CHUNK: usize = 256;

pub fn evaluate(problem: &Problem, params: &ModelParams, anchors: &[usize]) -> Result<Evaluation> {
    let steps = problem.archive.periods().hour;
    let mut out = Evaluation {
        fused: MetricsAccumulator::new(steps),
        branches: [0; 3].map(|_| MetricsAccumulator::new(steps)),
        anchors: anchors.len(),
    };
    for chunk in anchors.chunks(EVAL_CHUNK) {
        let parts: Vec<(MetricsAccumulator, [MetricsAccumulator; 3])> = chunk
            .par_iter()
            .map(|&a| {
                let bundle = extract_bundle(problem.archive, a, problem.stats)?;
                let pred = model_forward(&bundle, params, problem.basis, problem.integrator)?;
                let target = problem.stats.denormalize(&bundle.predicted.values);
                let mask = &bundle.predicted.mask;
                let mut fused = MetricsAccumulator::new(steps);
                fused.add(&problem.stats.denormalize(&pred.fused), &target, mask)?;
                let mut branches = [0; 3].map(|_| MetricsAccumulator::new(steps));
                for (acc, p) in branches.iter_mut().zip(&pred.branch_finals) {
                    acc.add(&problem.stats.denormalize(p), &target, mask)?;
                }
                Ok((fused, branches))
            })
            .collect::<Result<_>>()?;
        for (fused, branches) in &parts {
            out.fused.merge(fused);
            for (acc, b) in out.branches.iter_mut().zip(branches) {
                acc.merge(b);
            }
        }
    }
    Ok(out)
}

/// Historical-average forecast errors over `anchors`, in raw units.
pub fn evaluate_historical_average(
    archive: &TrafficArchive,
    stats: &NormalizationStats,
    anchors: &[usize],
) -> Result<MetricsAccumulator> {
    let steps = archive.periods().hour;
    let mut acc = MetricsAccumulator::new(steps);
    for &a in anchors {
        let bundle = extract_bundle(archive, a, stats)?;
        let pred = historical_average(archive, a, stats)?;
        let target = stats.denormalize(&bundle.predicted.values);
        acc.add(&pred, &target, &bundle.predicted.mask)?;
    }
    Ok(acc)
}
