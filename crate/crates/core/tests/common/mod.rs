#![allow(dead_code)]

pub mod linear;

use astgode::data::{
    chronological_split, enumerate_valid_anchors, extract_bundle, fit_normalizer, NormalizationStats, Periods,
    SampleBundle, SplitRanges, TrafficArchive,
};
use astgode::graph::{build_adjacency, cheb_basis, scaled_laplacian, ChebBasis, DistanceRecord};
use astgode::model::{ModelDims, ModelParams, CHEB_ORDER};
use astgode::odeint::IntegratorConfig;
use astgode::synthetic::{chain_distances, periodic_archive, SyntheticConfig};
use astgode::training::{LossConfig, Problem};
use astgode::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// `||a - b|| / max(||a||, ||b||)`, or the absolute gap when both are tiny.
pub fn rel_err(a: &Tensor, b: &Tensor) -> f64 {
    let diff = a.sub(b).expect("same shape").norm();
    let scale = a.norm().max(b.norm());
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

/// Central differences of `f` with respect to every entry of `point[which]`,
/// step `1e-6 * max(1, |x|)`.
pub fn fd_gradient(f: &dyn Fn(&[Tensor]) -> f64, point: &[Tensor], which: usize) -> Tensor {
    let mut probe = point.to_vec();
    let mut out = Tensor::zeros(point[which].shape());
    for i in 0..point[which].len() {
        let x = point[which].data()[i];
        let h = 1e-6 * x.abs().max(1.0);
        probe[which].data_mut()[i] = x + h;
        let up = f(&probe);
        probe[which].data_mut()[i] = x - h;
        let down = f(&probe);
        probe[which].data_mut()[i] = x;
        out.data_mut()[i] = (up - down) / (2.0 * h);
    }
    out
}

/// Finite-difference gradient of a scalar function of the model parameters.
pub fn fd_params(f: &dyn Fn(&ModelParams) -> f64, params: &ModelParams) -> ModelParams {
    let mut probe = params.clone();
    let mut grads = ModelParams::zeros(params.dims());
    let n = params.len();
    for k in 0..n {
        let len = params.entries()[k].1.len();
        for i in 0..len {
            let x = params.entries()[k].1.data()[i];
            let h = 1e-6 * x.abs().max(1.0);
            probe.values_mut()[k].data_mut()[i] = x + h;
            let up = f(&probe);
            probe.values_mut()[k].data_mut()[i] = x - h;
            let down = f(&probe);
            probe.values_mut()[k].data_mut()[i] = x;
            grads.values_mut()[k].data_mut()[i] = (up - down) / (2.0 * h);
        }
    }
    grads
}

/// Random symmetric distance records over `n` vertices, each pair present
/// with probability `density`.
pub fn random_distances(rng: &mut ChaCha8Rng, n: usize, density: f64) -> Vec<DistanceRecord> {
    let mut out = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            if rng.gen::<f64>() < density {
                let d = rng.gen_range(0.1..3.0);
                out.push(DistanceRecord { from: i, to: j, distance: d });
                out.push(DistanceRecord { from: j, to: i, distance: d });
            }
        }
    }
    out
}

pub fn basis_from(n: usize, records: &[DistanceRecord]) -> ChebBasis {
    let g = build_adjacency(n, records, None, 0.0).expect("adjacency");
    cheb_basis(&scaled_laplacian(&g).expect("laplacian"), CHEB_ORDER).expect("basis")
}

/// The gradient-check fixture: 4 sensors, `T_h = 3`, 2 features,
/// hidden width 4, everything seeded from 7.
pub struct Fixture {
    pub params: ModelParams,
    pub bundle: SampleBundle,
    pub basis: ChebBasis,
}

pub fn fixture() -> Fixture {
    let seed = 7;
    let dims = ModelDims {
        vertices: 4,
        features: 2,
        steps: 3,
        hidden: 4,
    };
    let mut r = rng(seed);
    let records = vec![
        DistanceRecord { from: 0, to: 1, distance: 1.0 },
        DistanceRecord { from: 1, to: 2, distance: 1.5 },
        DistanceRecord { from: 2, to: 3, distance: 0.7 },
        DistanceRecord { from: 0, to: 3, distance: 2.2 },
        DistanceRecord { from: 0, to: 2, distance: 2.9 },
    ];
    let basis = basis_from(dims.vertices, &records);
    let periods = Periods::new(3, 6).expect("periods");
    let steps = periods.week + 2 * periods.hour;
    let series = uniform(&mut r, &[steps, dims.vertices, dims.features], 0.0, 5.0);
    let archive = TrafficArchive::new(series, periods, None).expect("archive");
    let stats = fit_normalizer(&archive, 0..steps).expect("stats");
    let bundle = extract_bundle(&archive, periods.week, &stats).expect("bundle");
    // Nonzero biases so the fixture is not sitting on the zero-bias init.
    let params = ModelParams::init(dims, seed).expect("init").map(|name, t| {
        if name.ends_with(".bias") {
            uniform(&mut r, t.shape(), -0.1, 0.1)
        } else {
            t.clone()
        }
    });
    Fixture { params, bundle, basis }
}

/// Per-parameter relative errors between two gradient sets, worst first.
pub fn param_errors(a: &ModelParams, b: &ModelParams) -> Vec<(String, f64)> {
    let mut out: Vec<(String, f64)> = a
        .entries()
        .into_iter()
        .zip(b.entries())
        .map(|((name, x), (_, y))| (name, rel_err(x, y)))
        .collect();
    out.sort_by(|x, y| y.1.total_cmp(&x.1));
    out
}

pub fn to_na(t: &Tensor) -> nalgebra::DMatrix<f64> {
    let s = t.shape();
    nalgebra::DMatrix::from_row_slice(s[0], s[1], t.data())
}

pub fn from_na(m: &nalgebra::DMatrix<f64>) -> Tensor {
    Tensor::from_fn(&[m.nrows(), m.ncols()], |i| m[(i / m.ncols(), i % m.ncols())])
}

/// A seeded periodic archive on a sensor chain, at a 20-minute cadence
/// (`T_h = 3`, day 72 steps, week 504 steps).
pub struct Synthetic {
    pub archive: TrafficArchive,
    pub stats: NormalizationStats,
    pub basis: ChebBasis,
    pub splits: SplitRanges,
}

pub fn synthetic(vertices: usize, weeks: usize, seed: u64, noise_std: f64) -> Synthetic {
    let mut cfg = SyntheticConfig::weeks(vertices, 20, weeks, seed).expect("config");
    cfg.noise_std = noise_std;
    synthetic_from(&cfg)
}

pub fn synthetic_from(cfg: &SyntheticConfig) -> Synthetic {
    let vertices = cfg.vertices;
    let archive = periodic_archive(cfg).expect("archive");
    let splits = chronological_split(&archive, [0.7, 0.1, 0.2]).expect("split");
    let stats = fit_normalizer(&archive, splits.train.clone()).expect("stats");
    let basis = basis_from(vertices, &chain_distances(vertices));
    Synthetic { archive, stats, basis, splits }
}

impl Synthetic {
    pub fn problem(&self, integrator: IntegratorConfig) -> Problem<'_> {
        Problem {
            archive: &self.archive,
            stats: &self.stats,
            basis: &self.basis,
            integrator,
            loss: LossConfig::default(),
        }
    }

    pub fn anchors(&self, range: std::ops::Range<usize>, count: usize) -> Vec<usize> {
        let all = enumerate_valid_anchors(&self.archive, range);
        let stride = (all.len() / count).max(1);
        all.into_iter().step_by(stride).take(count).collect()
    }

    pub fn dims(&self, hidden: usize) -> ModelDims {
        ModelDims {
            vertices: self.archive.vertices(),
            features: self.archive.features(),
            steps: self.archive.periods().hour,
            hidden,
        }
    }
}
