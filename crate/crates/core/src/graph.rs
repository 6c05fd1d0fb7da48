//! Sensor graph, scaled Laplacian and Chebyshev polynomial basis.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One row of a distance list: an edge between two sensors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistanceRecord {
    pub from: usize,
    pub to: usize,
    pub distance: f64,
}

/// Undirected weighted sensor graph with a dense symmetric weight matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SensorGraph {
    n_vertices: usize,
    edges: Vec<DistanceRecord>,
    weights: Tensor,
}

impl SensorGraph {
    /// Wraps an explicit weight matrix, checking symmetry and sign.
    pub fn from_weights(weights: Tensor) -> Result<Self> {
        let n = square_extent(&weights)?;
        for i in 0..n {
            for j in 0..n {
                let w = weights.at(&[i, j]);
                if !(w >= 0.0) || !w.is_finite() {
                    return Err(Error::invalid(format!("weight ({i}, {j}) = {w} is not a finite nonnegative value")));
                }
                if (w - weights.at(&[j, i])).abs() > 1e-12 {
                    return Err(Error::NotSymmetric(i, j));
                }
            }
        }
        Ok(Self {
            n_vertices: n,
            edges: Vec::new(),
            weights,
        })
    }

    /// A graph with `n` vertices and no edges.
    pub fn empty(n: usize) -> Self {
        Self {
            n_vertices: n,
            edges: Vec::new(),
            weights: Tensor::zeros(&[n, n]),
        }
    }

    pub fn n_vertices(&self) -> usize {
        self.n_vertices
    }

    pub fn edges(&self) -> &[DistanceRecord] {
        &self.edges
    }

    pub fn weights(&self) -> &Tensor {
        &self.weights
    }
}

fn square_extent(m: &Tensor) -> Result<usize> {
    match m.shape() {
        [a, b] if a == b => Ok(*a),
        s => Err(Error::invalid(format!("expected a square matrix, got {s:?}"))),
    }
}

/// Gaussian-kernel adjacency from a distance list.
///
/// `w_ij = exp(-d^2 / sigma^2)`, kept when `w_ij >= epsilon` and zeroed
/// otherwise, then symmetrized by elementwise max. When `sigma` is `None`
/// it defaults to the population standard deviation of all distances.
/// Self-records are ignored so the diagonal stays zero.
pub fn build_adjacency(
    n_vertices: usize,
    records: &[DistanceRecord],
    sigma: Option<f64>,
    epsilon: f64,
) -> Result<SensorGraph> {
    if !(0.0..1.0).contains(&epsilon) {
        return Err(Error::invalid(format!("epsilon must lie in [0, 1), got {epsilon}")));
    }
    for r in records {
        for index in [r.from, r.to] {
            if index >= n_vertices {
                return Err(Error::VertexOutOfRange { index, n_vertices });
            }
        }
        if !(r.distance >= 0.0) || !r.distance.is_finite() {
            return Err(Error::invalid(format!("negative or non-finite distance {}", r.distance)));
        }
    }
    let sigma = match sigma {
        Some(s) if s > 0.0 && s.is_finite() => s,
        Some(s) => return Err(Error::invalid(format!("sigma must be positive, got {s}"))),
        None => {
            let n = records.len() as f64;
            let mean = records.iter().map(|r| r.distance).sum::<f64>() / n;
            let var = records.iter().map(|r| (r.distance - mean).powi(2)).sum::<f64>() / n;
            if records.is_empty() || var.sqrt() == 0.0 {
                return Err(Error::invalid(
                    "cannot derive sigma: distances are absent or have zero spread",
                ));
            }
            var.sqrt()
        }
    };

    let mut weights = Tensor::zeros(&[n_vertices, n_vertices]);
    for r in records {
        if r.from == r.to {
            continue;
        }
        let w = (-(r.distance / sigma).powi(2)).exp();
        let w = if w >= epsilon { w } else { 0.0 };
        for (i, j) in [(r.from, r.to), (r.to, r.from)] {
            if w > weights.at(&[i, j]) {
                weights.set(&[i, j], w);
            }
        }
    }
    Ok(SensorGraph {
        n_vertices,
        edges: records.to_vec(),
        weights,
    })
}

/// Reads a `from,to,cost` distance list with one header row.
pub fn read_distance_list(path: impl AsRef<Path>) -> Result<Vec<DistanceRecord>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header.split(',').count() == 3 => {}
        _ => return Err(Error::format(path, "missing `from,to,cost` header")),
    }
    let mut records = Vec::new();
    for (lineno, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |what: &str| Error::format(path, format!("line {}: {what}", lineno + 1));
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 3 {
            return Err(bad("expected 3 fields"));
        }
        records.push(DistanceRecord {
            from: fields[0].parse().map_err(|_| bad("bad `from` vertex id"))?,
            to: fields[1].parse().map_err(|_| bad("bad `to` vertex id"))?,
            distance: fields[2].parse().map_err(|_| bad("bad cost"))?,
        });
    }
    Ok(records)
}

/// Largest eigenvalue of a symmetric positive semi-definite matrix by power
/// iteration; `None` when 100 iterations do not reach a relative change
/// below 1e-9.
pub fn power_iteration(m: &Tensor) -> Result<Option<f64>> {
    let n = square_extent(m)?;
    // Deterministic start vector with no special alignment to graph structure.
    let mut v = Tensor::from_fn(&[n, 1], |i| 1.0 + ((i * 7919 + 13) % 101) as f64 / 101.0);
    v = v.scale(1.0 / v.norm());
    let mut previous = f64::NAN;
    for _ in 0..100 {
        let w = m.matmul(&v)?;
        let lambda = v.dot(&w)?;
        let norm = w.norm();
        if norm == 0.0 {
            return Ok(Some(0.0));
        }
        if (lambda - previous).abs() <= 1e-9 * lambda.abs() {
            return Ok(Some(lambda));
        }
        previous = lambda;
        v = w.scale(1.0 / norm);
    }
    Ok(None)
}

/// Symmetric normalized Laplacian `I - D^{-1/2} W D^{-1/2}`; isolated
/// vertices contribute `D^{-1/2} = 0`.
pub fn normalized_laplacian(g: &SensorGraph) -> Result<Tensor> {
    let w = g.weights();
    let n = square_extent(w)?;
    for i in 0..n {
        for j in i + 1..n {
            if (w.at(&[i, j]) - w.at(&[j, i])).abs() > 1e-12 {
                return Err(Error::NotSymmetric(i, j));
            }
        }
    }
    let inv_sqrt_deg: Vec<f64> = (0..n)
        .map(|i| {
            let d: f64 = (0..n).map(|j| w.at(&[i, j])).sum();
            if d > 0.0 {
                1.0 / d.sqrt()
            } else {
                0.0
            }
        })
        .collect();
    let mut l = Tensor::eye(n);
    for i in 0..n {
        for j in 0..n {
            let v = l.at(&[i, j]) - inv_sqrt_deg[i] * w.at(&[i, j]) * inv_sqrt_deg[j];
            l.set(&[i, j], v);
        }
    }
    Ok(l)
}

/// `L~ = (2 / lambda_max) L - I`, with `lambda_max` from power iteration
/// (falling back to 2 when it does not converge).
pub fn scaled_laplacian(g: &SensorGraph) -> Result<Tensor> {
    let l = normalized_laplacian(g)?;
    let n = g.n_vertices();
    let lambda_max = match power_iteration(&l)? {
        Some(v) if v > 0.0 => v,
        _ => {
            log::warn!("power iteration did not converge; using lambda_max = 2");
            2.0
        }
    };
    let mut scaled = l.scale(2.0 / lambda_max);
    for i in 0..n {
        let v = scaled.at(&[i, i]) - 1.0;
        scaled.set(&[i, i], v);
    }
    Ok(scaled)
}

/// Chebyshev polynomials `T_0..T_K` of the scaled Laplacian.
#[derive(Debug, Clone, PartialEq)]
pub struct ChebBasis {
    polys: Vec<Tensor>,
}

impl ChebBasis {
    /// Highest polynomial order `K`.
    pub fn order(&self) -> usize {
        self.polys.len() - 1
    }

    pub fn polys(&self) -> &[Tensor] {
        &self.polys
    }

    pub fn n_vertices(&self) -> usize {
        self.polys[0].shape()[0]
    }
}

/// Three-term recurrence `T_k = 2 L~ T_{k-1} - T_{k-2}`.
pub fn cheb_basis(scaled: &Tensor, order: usize) -> Result<ChebBasis> {
    let n = square_extent(scaled)?;
    for i in 0..n {
        for j in i + 1..n {
            if (scaled.at(&[i, j]) - scaled.at(&[j, i])).abs() > 1e-9 {
                return Err(Error::NotSymmetric(i, j));
            }
        }
    }
    let mut polys = vec![Tensor::eye(n)];
    if order >= 1 {
        polys.push(scaled.clone());
    }
    for k in 2..=order {
        let next = scaled.matmul(&polys[k - 1])?.scale(2.0).sub(&polys[k - 2])?;
        polys.push(next);
    }
    Ok(ChebBasis { polys })
}
