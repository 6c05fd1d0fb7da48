//! Dense row-major `f64` arrays and the raw kernels the tape builds on.

use std::fmt;

use crate::error::{Error, Result};

/// A dense row-major array of `f64`.
///
/// An empty shape denotes a scalar. Every extent in a non-empty shape is
/// positive, and `data.len()` always equals the product of the extents.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::invalid(format!(
                "tensor extents must be positive, got {shape:?}"
            )));
        }
        if numel(&shape) != data.len() {
            return Err(Error::invalid(format!(
                "shape {shape:?} needs {} values, got {}",
                numel(&shape),
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        assert!(shape.iter().all(|&d| d > 0), "zero extent in {shape:?}");
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel(shape)],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let mut t = Self::zeros(shape);
        for (i, v) in t.data.iter_mut().enumerate() {
            *v = f(i);
        }
        t
    }

    /// 1-D tensor from a vector.
    pub fn vector(data: Vec<f64>) -> Self {
        let n = data.len();
        Self::new(vec![n], data).expect("non-empty vector")
    }

    /// 2-D tensor from rows of equal length.
    pub fn matrix(rows: &[&[f64]]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        assert!(rows.iter().all(|row| row.len() == c), "ragged rows");
        let data = rows.iter().flat_map(|row| row.iter().copied()).collect();
        Self::new(vec![r, c], data).expect("non-empty matrix")
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn at(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: f64) {
        let off = self.offset(index);
        self.data[off] = value;
    }

    fn offset(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.shape.len(), "index rank");
        let mut off = 0;
        for (&i, &d) in index.iter().zip(&self.shape) {
            assert!(i < d, "index {index:?} out of bounds for {:?}", self.shape);
            off = off * d + i;
        }
        off
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.require_same_shape(other, op)?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub(crate) fn require_same_shape(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(())
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.map(|v| v * c)
    }

    /// In-place `self += other`; shapes must match.
    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        self.require_same_shape(other, "add_assign")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// In-place `self += c * other`.
    pub fn axpy(&mut self, c: f64, other: &Tensor) -> Result<()> {
        self.require_same_shape(other, "axpy")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += c * b;
        }
        Ok(())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        self.require_same_shape(other, "dot")?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.data.len() || shape.contains(&0) {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&self, axes: &[usize]) -> Result<Tensor> {
        let nd = self.ndim();
        let mut seen = vec![false; nd];
        if axes.len() != nd || axes.iter().any(|&a| a >= nd || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::invalid(format!(
                "permute: {axes:?} is not a permutation of {nd} axes"
            )));
        }
        let in_strides = strides(&self.shape);
        let out_shape: Vec<usize> = axes.iter().map(|&a| self.shape[a]).collect();
        let perm_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
        let mut out = Vec::with_capacity(self.data.len());
        let mut idx = vec![0usize; nd];
        for _ in 0..self.data.len() {
            let src: usize = idx.iter().zip(&perm_strides).map(|(i, s)| i * s).sum();
            out.push(self.data[src]);
            for ax in (0..nd).rev() {
                idx[ax] += 1;
                if idx[ax] < out_shape[ax] {
                    break;
                }
                idx[ax] = 0;
            }
        }
        Ok(Tensor {
            shape: out_shape,
            data: out,
        })
    }

    /// Swaps the two trailing axes.
    pub fn transpose(&self) -> Result<Tensor> {
        let nd = self.ndim();
        if nd < 2 {
            return Err(Error::invalid(format!(
                "transpose needs at least 2 axes, got {:?}",
                self.shape
            )));
        }
        let mut axes: Vec<usize> = (0..nd).collect();
        axes.swap(nd - 2, nd - 1);
        self.permute(&axes)
    }

    /// Batched matrix product over the two trailing axes.
    ///
    /// Leading (batch) axes must either match or be absent on one side, in
    /// which case that operand is shared across the batch.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let mismatch = || Error::ShapeMismatch {
            op: "matmul",
            lhs: self.shape.clone(),
            rhs: other.shape.clone(),
        };
        if self.ndim() < 2 || other.ndim() < 2 {
            return Err(mismatch());
        }
        let (ab, am) = self.shape.split_at(self.ndim() - 2);
        let (bb, bm) = other.shape.split_at(other.ndim() - 2);
        let (m, k) = (am[0], am[1]);
        let (k2, n) = (bm[0], bm[1]);
        if k != k2 {
            return Err(mismatch());
        }
        if bb.is_empty() {
            // Fold lhs batch into rows.
            let rows = numel(ab) * m;
            let data = gemm(&self.data, &other.data, rows, k, n);
            let mut shape = ab.to_vec();
            shape.extend([m, n]);
            return Ok(Tensor { shape, data });
        }
        if !ab.is_empty() && ab != bb {
            return Err(mismatch());
        }
        let batch = numel(bb);
        let mut data = Vec::with_capacity(batch * m * n);
        for b in 0..batch {
            let lhs = if ab.is_empty() {
                &self.data[..]
            } else {
                &self.data[b * m * k..(b + 1) * m * k]
            };
            let rhs = &other.data[b * k * n..(b + 1) * k * n];
            data.extend(gemm(lhs, rhs, m, k, n));
        }
        let mut shape = bb.to_vec();
        shape.extend([m, n]);
        Ok(Tensor { shape, data })
    }

    /// Sums leading axes away until the shape equals `target`, which must be
    /// a suffix of `self.shape()`.
    pub fn sum_to_suffix(&self, target: &[usize]) -> Result<Tensor> {
        if !self.shape.ends_with(target) {
            return Err(Error::ShapeMismatch {
                op: "sum_to_suffix",
                lhs: self.shape.clone(),
                rhs: target.to_vec(),
            });
        }
        let inner = numel(target);
        let mut data = vec![0.0; inner];
        for chunk in self.data.chunks(inner) {
            for (d, v) in data.iter_mut().zip(chunk) {
                *d += v;
            }
        }
        Ok(Tensor {
            shape: target.to_vec(),
            data,
        })
    }

    /// Sum over one axis; the axis is removed.
    pub fn sum_axis(&self, axis: usize) -> Result<Tensor> {
        let (outer, len, inner) = self.axis_split(axis)?;
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..len {
                let base = (o * len + a) * inner;
                for i in 0..inner {
                    data[o * inner + i] += self.data[base + i];
                }
            }
        }
        let mut shape = self.shape.clone();
        shape.remove(axis);
        Ok(Tensor { shape, data })
    }

    /// Inserts `axis` with extent `len`, repeating values along it.
    pub(crate) fn broadcast_axis(&self, axis: usize, len: usize) -> Tensor {
        let mut shape = self.shape.clone();
        shape.insert(axis, len);
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            for _ in 0..len {
                data.extend_from_slice(&self.data[o * inner..(o + 1) * inner]);
            }
        }
        Tensor { shape, data }
    }

    /// `(outer, axis_len, inner)` decomposition used by axis-wise kernels.
    pub(crate) fn axis_split(&self, axis: usize) -> Result<(usize, usize, usize)> {
        if axis >= self.ndim() {
            return Err(Error::invalid(format!(
                "axis {axis} out of range for shape {:?}",
                self.shape
            )));
        }
        let outer = self.shape[..axis].iter().product();
        let inner = self.shape[axis + 1..].iter().product();
        Ok((outer, self.shape[axis], inner))
    }

    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        let (outer, len, inner) = self.axis_split(axis)?;
        let mut out = self.data.clone();
        for o in 0..outer {
            for i in 0..inner {
                let at = |a: usize| (o * len + a) * inner + i;
                let max = (0..len).map(|a| self.data[at(a)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for a in 0..len {
                    let e = (self.data[at(a)] - max).exp();
                    out[at(a)] = e;
                    total += e;
                }
                for a in 0..len {
                    out[at(a)] /= total;
                }
            }
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: out,
        })
    }

    pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        for p in parts {
            let compatible = p.ndim() == first.ndim()
                && axis < p.ndim()
                && p.shape.iter().zip(&first.shape).enumerate().all(|(ax, (a, b))| ax == axis || a == b);
            if !compatible {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: first.shape.clone(),
                    rhs: p.shape.clone(),
                });
            }
        }
        let outer: usize = first.shape[..axis].iter().product();
        let inner: usize = first.shape[axis + 1..].iter().product();
        let mut shape = first.shape.clone();
        shape[axis] = parts.iter().map(|p| p.shape[axis]).sum();
        let mut data = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for p in parts {
                let block = p.shape[axis] * inner;
                data.extend_from_slice(&p.data[o * block..(o + 1) * block]);
            }
        }
        Ok(Tensor { shape, data })
    }

    /// Inverse of [`Tensor::concat`]: splits along `axis` into pieces of the given extents.
    pub fn split(&self, axis: usize, sizes: &[usize]) -> Result<Vec<Tensor>> {
        let (outer, len, inner) = self.axis_split(axis)?;
        if sizes.iter().sum::<usize>() != len {
            return Err(Error::invalid(format!(
                "split sizes {sizes:?} do not cover axis of length {len}"
            )));
        }
        let mut parts = Vec::with_capacity(sizes.len());
        let mut start = 0;
        for &s in sizes {
            let mut shape = self.shape.clone();
            shape[axis] = s;
            let mut data = Vec::with_capacity(outer * s * inner);
            for o in 0..outer {
                let base = (o * len + start) * inner;
                data.extend_from_slice(&self.data[base..base + s * inner]);
            }
            parts.push(Tensor::new(shape, data)?);
            start += s;
        }
        Ok(parts)
    }
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Row-major `[m, k] x [k, n]`, i-k-j loop order.
fn gemm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aik = a[i * k + p];
            if aik == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cij, bpj) in row.iter_mut().zip(brow) {
                *cij += aik * bpj;
            }
        }
    }
    c
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_matmul() {
        let m = Tensor::matrix(&[&[1.5, -2.0], &[0.25, 7.0]]);
        assert_eq!(Tensor::eye(2).matmul(&m).unwrap(), m);
        assert_eq!(m.matmul(&Tensor::eye(2)).unwrap(), m);
    }

    #[test]
    fn batched_matmul_shares_unbatched_operand() {
        let a = Tensor::from_fn(&[3, 2, 4], |i| i as f64 * 0.5 - 3.0);
        let b = Tensor::from_fn(&[4, 5], |i| (i as f64).sin());
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.shape(), &[3, 2, 5]);
        for batch in 0..3 {
            for i in 0..2 {
                for j in 0..5 {
                    let want: f64 = (0..4).map(|p| a.at(&[batch, i, p]) * b.at(&[p, j])).sum();
                    assert!((c.at(&[batch, i, j]) - want).abs() < 1e-12);
                }
            }
        }
        let left = Tensor::from_fn(&[2, 3], |i| i as f64);
        let right = Tensor::from_fn(&[4, 3, 2], |i| 1.0 / (1.0 + i as f64));
        let d = left.matmul(&right).unwrap();
        assert_eq!(d.shape(), &[4, 2, 2]);
        assert!(Tensor::from_fn(&[2, 3], |_| 0.0).matmul(&Tensor::zeros(&[2, 3])).is_err());
    }

    #[test]
    fn permute_round_trip_is_exact() {
        let t = Tensor::from_fn(&[2, 3, 4], |i| i as f64 * 1.1);
        let p = t.permute(&[2, 0, 1]).unwrap();
        assert_eq!(p.shape(), &[4, 2, 3]);
        assert_eq!(p.at(&[3, 1, 2]), t.at(&[1, 2, 3]));
        assert_eq!(p.permute(&[1, 2, 0]).unwrap(), t);
        assert!(t.permute(&[0, 0, 1]).is_err());
    }

    #[test]
    fn axis_reductions() {
        let t = Tensor::from_fn(&[2, 3], |i| i as f64);
        assert_eq!(t.sum_axis(0).unwrap().data(), &[3.0, 5.0, 7.0]);
        assert_eq!(t.sum_axis(1).unwrap().data(), &[3.0, 12.0]);
        assert_eq!(t.sum_to_suffix(&[3]).unwrap().data(), &[3.0, 5.0, 7.0]);
        let b = Tensor::vector(vec![1.0, 2.0]).broadcast_axis(1, 3);
        assert_eq!(b.data(), &[1.0, 1.0, 1.0, 2.0, 2.0, 2.0]);
    }

    #[test]
    fn concat_then_split() {
        let a = Tensor::from_fn(&[2, 2], |i| i as f64);
        let b = Tensor::from_fn(&[2, 3], |i| 10.0 + i as f64);
        let c = Tensor::concat(&[&a, &b], 1).unwrap();
        assert_eq!(c.data(), &[0.0, 1.0, 10.0, 11.0, 12.0, 2.0, 3.0, 13.0, 14.0, 15.0]);
        let parts = c.split(1, &[2, 3]).unwrap();
        assert_eq!(parts[0], a);
        assert_eq!(parts[1], b);
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(vec![0, 2], vec![]).is_err());
        let err = Tensor::zeros(&[2]).add(&Tensor::zeros(&[3])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2]") && msg.contains("[3]"), "{msg}");
    }
}
