//! Seeded synthetic archives with daily and weekly periodicity.

use std::f64::consts::TAU;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::data::{Periods, TrafficArchive};
use crate::error::{Error, Result};
use crate::graph::DistanceRecord;
use crate::rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub vertices: usize,
    pub features: usize,
    pub steps: usize,
    pub periods: Periods,
    pub cadence_minutes: Option<u32>,
    pub daily_amplitude: f64,
    pub weekly_amplitude: f64,
    pub noise_std: f64,
    /// Probability that an entry is replaced by a missing value.
    pub missing_fraction: f64,
    pub seed: u64,
}

impl SyntheticConfig {
    /// `weeks` weeks of data at the given cadence.
    pub fn weeks(vertices: usize, cadence_minutes: u32, weeks: usize, seed: u64) -> Result<Self> {
        let periods = Periods::from_cadence(cadence_minutes)?;
        Ok(Self {
            vertices,
            features: 1,
            steps: weeks * periods.week,
            periods,
            cadence_minutes: Some(cadence_minutes),
            daily_amplitude: 1.0,
            weekly_amplitude: 0.5,
            noise_std: 0.05,
            missing_fraction: 0.0,
            seed,
        })
    }
}

/// `x[t, v, f] = 2 + f/2 + a_d sin(2 pi t / T_d + phi_v) + a_w sin(2 pi t / T_w + psi_v) + noise`,
/// with per-vertex phases drawn from the seed.
pub fn periodic_archive(cfg: &SyntheticConfig) -> Result<TrafficArchive> {
    if cfg.vertices == 0 || cfg.features == 0 || cfg.steps == 0 {
        return Err(Error::invalid("synthetic archive dimensions must be positive"));
    }
    if !(0.0..1.0).contains(&cfg.missing_fraction) {
        return Err(Error::invalid("missing fraction must lie in [0, 1)"));
    }
    let noise = Normal::new(0.0, cfg.noise_std).map_err(|e| Error::invalid(e.to_string()))?;
    let mut rng = rng::stream(cfg.seed, rng::DATA_STREAM);
    let phases: Vec<(f64, f64)> = (0..cfg.vertices)
        .map(|_| (rng.gen_range(0.0..TAU), rng.gen_range(0.0..TAU)))
        .collect();
    let (n, f) = (cfg.vertices, cfg.features);
    let day = cfg.periods.day as f64;
    let week = cfg.periods.week as f64;
    let series = Tensor::from_fn(&[cfg.steps, n, f], |i| {
        let t = (i / (n * f)) as f64;
        let (v, feat) = ((i / f) % n, i % f);
        let (phi, psi) = phases[v];
        let clean = 2.0
            + feat as f64 * 0.5
            + cfg.daily_amplitude * (TAU * t / day + phi).sin()
            + cfg.weekly_amplitude * (TAU * t / week + psi).sin();
        let value = clean + noise.sample(&mut rng);
        if cfg.missing_fraction > 0.0 && rng.gen::<f64>() < cfg.missing_fraction {
            f64::NAN
        } else {
            value
        }
    });
    TrafficArchive::new(series, cfg.periods, cfg.cadence_minutes)
}

/// A chain of sensors `0 - 1 - ... - (n-1)` with unit spacing plus a few
/// longer skip links, listed in both directions.
pub fn chain_distances(n: usize) -> Vec<DistanceRecord> {
    let mut out = Vec::new();
    for i in 0..n {
        for (j, d) in [(i + 1, 1.0), (i + 2, 2.0)] {
            if j < n {
                out.push(DistanceRecord { from: i, to: j, distance: d });
                out.push(DistanceRecord { from: j, to: i, distance: d });
            }
        }
    }
    out
}
