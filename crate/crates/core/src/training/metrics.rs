use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Running squared / absolute error sums per horizon step.
///
/// Entries are visited in row-major `[step, vertex, feature]` order and only
/// counted where the mask is nonzero.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsAccumulator {
    sq: Vec<f64>,
    abs: Vec<f64>,
    count: Vec<usize>,
}

impl MetricsAccumulator {
    pub fn new(steps: usize) -> Self {
        Self {
            sq: vec![0.0; steps],
            abs: vec![0.0; steps],
            count: vec![0; steps],
        }
    }

    pub fn steps(&self) -> usize {
        self.sq.len()
    }

    /// Adds one `[T_h, N, F]` prediction against its target.
    pub fn add(&mut self, pred: &Tensor, target: &Tensor, mask: &Tensor) -> Result<()> {
        pred.require_same_shape(target, "metrics")?;
        pred.require_same_shape(mask, "metrics")?;
        if pred.shape().first() != Some(&self.steps()) {
            return Err(Error::invalid(format!(
                "metrics expect {} leading steps, got {:?}",
                self.steps(),
                pred.shape()
            )));
        }
        let per_step = pred.len() / self.steps();
        for (i, ((p, t), m)) in pred.data().iter().zip(target.data()).zip(mask.data()).enumerate() {
            if *m != 0.0 {
                let s = i / per_step;
                let e = p - t;
                self.sq[s] += e * e;
                self.abs[s] += e.abs();
                self.count[s] += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &MetricsAccumulator) {
        for s in 0..self.steps() {
            self.sq[s] += other.sq[s];
            self.abs[s] += other.abs[s];
            self.count[s] += other.count[s];
        }
    }

    fn pooled(&self, steps: std::ops::RangeInclusive<usize>) -> ErrorSummary {
        let (mut sq, mut abs, mut count) = (0.0, 0.0, 0);
        for s in steps {
            sq += self.sq[s];
            abs += self.abs[s];
            count += self.count[s];
        }
        ErrorSummary::from_sums(sq, abs, count)
    }

    pub fn step(&self, s: usize) -> ErrorSummary {
        ErrorSummary::from_sums(self.sq[s], self.abs[s], self.count[s])
    }

    pub fn overall(&self) -> ErrorSummary {
        self.pooled(0..=self.steps() - 1)
    }

    /// Summaries at requested step indices; `windowed` pools steps `0..=index`.
    pub fn report(&self, horizons: &[Horizon], windowed: bool) -> Result<MetricsReport> {
        let mut out = Vec::with_capacity(horizons.len());
        for h in horizons {
            if h.step >= self.steps() {
                return Err(Error::invalid(format!("horizon step {} beyond {} steps", h.step, self.steps())));
            }
            let summary = if windowed { self.pooled(0..=h.step) } else { self.step(h.step) };
            out.push(HorizonMetrics {
                minutes: h.minutes,
                step: h.step,
                summary,
            });
        }
        Ok(MetricsReport {
            per_step: (0..self.steps()).map(|s| self.step(s)).collect(),
            horizons: out,
            overall: self.overall(),
            windowed,
        })
    }
}

/// RMSE and MAE over `count` observed entries (NaN when `count == 0`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ErrorSummary {
    pub rmse: f64,
    pub mae: f64,
    pub count: usize,
}

impl ErrorSummary {
    fn from_sums(sq: f64, abs: f64, count: usize) -> Self {
        if count == 0 {
            return Self {
                rmse: f64::NAN,
                mae: f64::NAN,
                count,
            };
        }
        Self {
            rmse: (sq / count as f64).sqrt(),
            mae: abs / count as f64,
            count,
        }
    }
}

/// A forecast horizon in minutes and its 0-based step in the predicted segment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Horizon {
    pub minutes: u32,
    pub step: usize,
}

impl Horizon {
    /// `minutes / cadence - 1`; the horizon must be a whole number of steps.
    pub fn from_minutes(minutes: u32, cadence_minutes: u32) -> Result<Self> {
        if cadence_minutes == 0 || minutes == 0 || !minutes.is_multiple_of(cadence_minutes) {
            return Err(Error::invalid(format!(
                "horizon of {minutes} min is not a positive multiple of the {cadence_minutes} min cadence"
            )));
        }
        Ok(Self {
            minutes,
            step: (minutes / cadence_minutes) as usize - 1,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HorizonMetrics {
    pub minutes: u32,
    pub step: usize,
    #[serde(flatten)]
    pub summary: ErrorSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub per_step: Vec<ErrorSummary>,
    pub horizons: Vec<HorizonMetrics>,
    pub overall: ErrorSummary,
    pub windowed: bool,
}
