//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] records every operation applied to its [`Var`]s in execution
//! order. [`Tape::backward`] and [`Tape::backward_from`] sweep the record in
//! exact reverse order, so gradient accumulation order (and therefore every
//! bit of the result) is fixed by the forward program alone.
//!
//! Operations check their outputs: a non-finite value produced from finite
//! inputs is reported as [`Error::NonFinite`] at the op that made it.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

impl Var {
    pub fn index(self) -> usize {
        self.index
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    /// rhs shape is a suffix of lhs shape and is repeated over the leading axes.
    AddSuffix(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    MatMul(usize, usize),
    Permute(usize, Vec<usize>),
    Reshape(usize),
    Concat(Vec<usize>, usize),
    SumAxis(usize, usize),
    MeanAxis(usize, usize),
    SumAll(usize),
    MeanAll(usize),
    Relu(usize),
    Sigmoid(usize),
    Tanh(usize),
    Softmax(usize, usize),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddSuffix(..) => "add_broadcast",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::MatMul(..) => "matmul",
            Op::Permute(..) => "permute",
            Op::Reshape(..) => "reshape",
            Op::Concat(..) => "concat",
            Op::SumAxis(..) => "sum_axis",
            Op::MeanAxis(..) => "mean_axis",
            Op::SumAll(..) => "sum",
            Op::MeanAll(..) => "mean",
            Op::Relu(..) => "relu",
            Op::Sigmoid(..) => "sigmoid",
            Op::Tanh(..) => "tanh",
            Op::Softmax(..) => "softmax",
        }
    }

    fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddSuffix(a, b) | Op::MatMul(a, b) => {
                vec![*a, *b]
            }
            Op::Concat(xs, _) => xs.clone(),
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Permute(a, _)
            | Op::Reshape(a)
            | Op::SumAxis(a, _)
            | Op::MeanAxis(a, _)
            | Op::SumAll(a)
            | Op::MeanAll(a)
            | Op::Relu(a)
            | Op::Sigmoid(a)
            | Op::Tanh(a)
            | Op::Softmax(a, _) => vec![*a],
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of primitive operations.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    /// Number of recorded nodes (leaves included).
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, false)
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::ForeignVariable);
        }
        Ok(v.index)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        assert_eq!(v.tape, self.id, "variable belongs to another tape");
        &self.nodes[v.index].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.index].requires_grad
    }

    fn push(&mut self, op: Op, value: Tensor) -> Result<Var> {
        let inputs = op.inputs();
        let inputs_finite = inputs.iter().all(|&i| self.nodes[i].value.is_finite());
        if inputs_finite && !value.is_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        })
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        make: fn(usize, usize) -> Op,
        f: impl Fn(&Tensor, &Tensor) -> Result<Tensor>,
    ) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let value = f(&self.nodes[ia].value, &self.nodes[ib].value)?;
        self.push(make(ia, ib), value)
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(&Tensor) -> Result<Tensor>) -> Result<Var> {
        let ia = self.idx(a)?;
        let value = f(&self.nodes[ia].value)?;
        self.push(op, value)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add, Tensor::add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub, Tensor::sub)
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul, Tensor::mul)
    }

    /// `a + b` where `b`'s shape is a suffix of `a`'s (bias-style broadcast).
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::AddSuffix, |x, y| {
            if !x.shape().ends_with(y.shape()) {
                return Err(Error::ShapeMismatch {
                    op: "add_broadcast",
                    lhs: x.shape().to_vec(),
                    rhs: y.shape().to_vec(),
                });
            }
            let inner = y.len();
            let mut out = x.clone();
            for chunk in out.data_mut().chunks_mut(inner) {
                for (o, v) in chunk.iter_mut().zip(y.data()) {
                    *o += v;
                }
            }
            Ok(out)
        })
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary(a, Op::Scale(a.index, c), |x| Ok(x.scale(c)))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary(a, Op::AddScalar(a.index), |x| Ok(x.map(|v| v + c)))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::MatMul, Tensor::matmul)
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        self.unary(a, Op::Permute(a.index, axes.to_vec()), |x| x.permute(axes))
    }

    /// Swaps the two trailing axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let nd = self.value(a).ndim();
        if nd < 2 {
            return Err(Error::invalid("transpose needs at least 2 axes"));
        }
        let mut axes: Vec<usize> = (0..nd).collect();
        axes.swap(nd - 2, nd - 1);
        self.permute(a, &axes)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.unary(a, Op::Reshape(a.index), |x| x.reshape(shape))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let idx = parts.iter().map(|&p| self.idx(p)).collect::<Result<Vec<_>>>()?;
        let values: Vec<&Tensor> = idx.iter().map(|&i| &self.nodes[i].value).collect();
        let value = Tensor::concat(&values, axis)?;
        self.push(Op::Concat(idx, axis), value)
    }

    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.unary(a, Op::SumAxis(a.index, axis), |x| x.sum_axis(axis))
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.unary(a, Op::MeanAxis(a.index, axis), |x| {
            let n = x.axis_split(axis)?.1 as f64;
            Ok(x.sum_axis(axis)?.scale(1.0 / n))
        })
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::SumAll(a.index), |x| Ok(Tensor::scalar(x.sum())))
    }

    /// Mean of all elements, as a scalar.
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::MeanAll(a.index), |x| Ok(Tensor::scalar(x.sum() / x.len() as f64)))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Relu(a.index), |x| Ok(x.map(|v| v.max(0.0))))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Sigmoid(a.index), |x| Ok(x.map(sigmoid)))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Tanh(a.index), |x| Ok(x.map(f64::tanh)))
    }

    /// Max-stabilized softmax along `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.unary(a, Op::Softmax(a.index, axis), |x| x.softmax(axis))
    }

    /// Gradient of a scalar `root` with respect to every node.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let i = self.idx(root)?;
        let value = &self.nodes[i].value;
        if value.len() != 1 {
            return Err(Error::NotScalar(value.shape().to_vec()));
        }
        let seed = Tensor::full(value.shape(), 1.0);
        self.backward_from(&[(root, &seed)])
    }

    /// Vector-Jacobian product: seeds each output with its cotangent and
    /// sweeps backward once. Seeds on the same output accumulate.
    pub fn backward_from(&self, seeds: &[(Var, &Tensor)]) -> Result<Gradients> {
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        let mut last = 0;
        for &(v, cot) in seeds {
            let i = self.idx(v)?;
            let shape = self.nodes[i].value.shape();
            if cot.shape() != shape {
                return Err(Error::ShapeMismatch {
                    op: "cotangent",
                    lhs: shape.to_vec(),
                    rhs: cot.shape().to_vec(),
                });
            }
            accumulate(&mut grads[i], cot.clone());
            last = last.max(i + 1);
        }

        for i in (0..last).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }

        for g in grads.iter().flatten() {
            if !g.is_finite() {
                return Err(Error::NonFinite { op: "backward" });
            }
        }
        Ok(Gradients {
            tape: self.id,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
            grads,
        })
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[i];
        let val = |j: usize| &self.nodes[j].value;
        let wants = |j: usize| self.nodes[j].requires_grad;
        let mut send = |j: usize, t: Tensor| {
            if wants(j) {
                accumulate(&mut grads[j], t);
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                send(*a, g.clone());
                send(*b, g.clone());
            }
            Op::Sub(a, b) => {
                send(*a, g.clone());
                send(*b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    send(*a, g.mul(val(*b))?);
                }
                if wants(*b) {
                    send(*b, g.mul(val(*a))?);
                }
            }
            Op::AddSuffix(a, b) => {
                send(*a, g.clone());
                if wants(*b) {
                    send(*b, g.sum_to_suffix(val(*b).shape())?);
                }
            }
            Op::Scale(a, c) => send(*a, g.scale(*c)),
            Op::AddScalar(a) => send(*a, g.clone()),
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                if wants(*a) {
                    let ga = g.matmul(&bv.transpose()?)?;
                    send(*a, ga.sum_to_suffix(av.shape())?);
                }
                if wants(*b) {
                    let gb = if bv.ndim() == 2 && av.ndim() > 2 {
                        // lhs batch folds into rows: A^T G over all rows.
                        let k = av.shape()[av.ndim() - 1];
                        let n = g.shape()[g.ndim() - 1];
                        let a2 = av.reshape(&[av.len() / k, k])?;
                        let g2 = g.reshape(&[g.len() / n, n])?;
                        a2.transpose()?.matmul(&g2)?
                    } else {
                        av.transpose()?.matmul(g)?.sum_to_suffix(bv.shape())?
                    };
                    send(*b, gb);
                }
            }
            Op::Permute(a, axes) => {
                let mut inverse = vec![0; axes.len()];
                for (out_ax, &in_ax) in axes.iter().enumerate() {
                    inverse[in_ax] = out_ax;
                }
                send(*a, g.permute(&inverse)?);
            }
            Op::Reshape(a) => send(*a, g.reshape(val(*a).shape())?),
            Op::Concat(parts, axis) => {
                let sizes: Vec<usize> = parts.iter().map(|&p| val(p).shape()[*axis]).collect();
                for (&p, piece) in parts.iter().zip(g.split(*axis, &sizes)?) {
                    send(p, piece);
                }
            }
            Op::SumAxis(a, axis) => {
                let len = val(*a).shape()[*axis];
                send(*a, g.broadcast_axis(*axis, len));
            }
            Op::MeanAxis(a, axis) => {
                let len = val(*a).shape()[*axis];
                send(*a, g.broadcast_axis(*axis, len).scale(1.0 / len as f64));
            }
            Op::SumAll(a) => send(*a, Tensor::full(val(*a).shape(), g.item())),
            Op::MeanAll(a) => {
                let x = val(*a);
                send(*a, Tensor::full(x.shape(), g.item() / x.len() as f64));
            }
            Op::Relu(a) => send(*a, g.zip_map(val(*a), "relu", |gi, x| if x > 0.0 { gi } else { 0.0 })?),
            Op::Sigmoid(a) => send(*a, g.zip_map(&node.value, "sigmoid", |gi, y| gi * y * (1.0 - y))?),
            Op::Tanh(a) => send(*a, g.zip_map(&node.value, "tanh", |gi, y| gi * (1.0 - y * y))?),
            Op::Softmax(a, axis) => send(*a, softmax_backward(&node.value, g, *axis)?),
        }
        Ok(())
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// dx = y * (g - sum_axis(g * y)).
fn softmax_backward(y: &Tensor, g: &Tensor, axis: usize) -> Result<Tensor> {
    let (outer, len, inner) = y.axis_split(axis)?;
    let (yd, gd) = (y.data(), g.data());
    let mut out = vec![0.0; yd.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |a: usize| (o * len + a) * inner + i;
            let dot: f64 = (0..len).map(|a| gd[at(a)] * yd[at(a)]).sum();
            for a in 0..len {
                out[at(a)] = yd[at(a)] * (gd[at(a)] - dot);
            }
        }
    }
    Tensor::new(y.shape().to_vec(), out)
}

fn accumulate(slot: &mut Option<Tensor>, t: Tensor) {
    match slot {
        Some(acc) => acc.add_assign(&t).expect("gradient shapes agree by construction"),
        None => *slot = Some(t),
    }
}

/// Result of a backward sweep.
#[derive(Debug)]
pub struct Gradients {
    tape: u64,
    shapes: Vec<Vec<usize>>,
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `v`; zeros when `v` was not reached from the seeds.
    pub fn get(&self, v: Var) -> Tensor {
        assert_eq!(v.tape, self.tape, "variable belongs to another tape");
        self.grads[v.index]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.index]))
    }

    pub fn is_reached(&self, v: Var) -> bool {
        self.grads[v.index].is_some()
    }
}

/// Vector-Jacobian product of a tape-recorded map.
///
/// Records `f` once on a fresh tape with `point` as differentiable leaves,
/// then sweeps backward from `cotangent`. Returns the output value and
/// `cotangent^T J` for each input.
pub fn vjp<F>(f: F, point: &[Tensor], cotangent: &Tensor) -> Result<(Tensor, Vec<Tensor>)>
where
    F: FnOnce(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let inputs: Vec<Var> = point.iter().map(|p| tape.leaf(p.clone())).collect();
    let out = f(&mut tape, &inputs)?;
    let grads = tape.backward_from(&[(out, cotangent)])?;
    let value = tape.value(out).clone();
    Ok((value, inputs.iter().map(|&v| grads.get(v)).collect()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn product_rule() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(2.0));
        let y = tape.leaf(Tensor::scalar(3.0));
        let z = tape.mul(x, y).unwrap();
        let g = tape.backward(z).unwrap();
        assert_eq!(g.get(x).item(), 3.0);
        assert_eq!(g.get(y).item(), 2.0);
    }

    #[test]
    fn square_and_sum() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0));
        let sq = tape.mul(x, x).unwrap();
        assert_eq!(tape.backward(sq).unwrap().get(x).item(), 6.0);

        let v = tape.leaf(Tensor::vector(vec![1.0, -2.0, 5.0]));
        let s = tape.sum(v).unwrap();
        assert_eq!(tape.backward(s).unwrap().get(v).data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn mean_of_values() {
        let mut tape = Tape::new();
        let v = tape.constant(Tensor::vector(vec![1.0, 2.0, 3.0, 6.0]));
        let m = tape.mean(v).unwrap();
        assert_eq!(tape.value(m).item(), 3.0);
    }

    #[test]
    fn unreached_leaf_gets_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        let unused = tape.leaf(Tensor::zeros(&[2, 2]));
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert!(!g.is_reached(unused));
        assert_eq!(g.get(unused), Tensor::zeros(&[2, 2]));
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(Error::NotScalar(_))));
    }

    #[test]
    fn foreign_variable_is_rejected() {
        let mut a = Tape::new();
        let mut b = Tape::new();
        let x = a.leaf(Tensor::scalar(1.0));
        let y = b.leaf(Tensor::scalar(1.0));
        assert!(matches!(b.add(x, y), Err(Error::ForeignVariable)));
    }

    #[test]
    fn overflow_is_reported_at_the_op() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(1e200));
        let err = tape.mul(x, x).unwrap_err();
        assert!(matches!(err, Error::NonFinite { op: "mul" }), "{err}");
    }

    #[test]
    fn masked_nan_inputs_pass_through() {
        let mut tape = Tape::new();
        let raw = tape.constant(Tensor::vector(vec![f64::NAN, 1.0]));
        let y = tape.scale(raw, 2.0).unwrap();
        assert!(tape.value(y).data()[0].is_nan());
    }

    #[test]
    fn softmax_values() {
        let t = Tensor::vector(vec![0.0, 0.0, 0.0]).softmax(0).unwrap();
        for v in t.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let t = Tensor::vector(vec![1000.0, 1000.0]).softmax(0).unwrap();
        assert_eq!(t.data(), &[0.5, 0.5]);
        let t = Tensor::vector(vec![0.0, 3f64.ln()]).softmax(0).unwrap();
        assert!((t.data()[0] - 0.25).abs() < 1e-15);
        assert!((t.data()[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn vjp_of_identity_and_linear_map() {
        let x = Tensor::vector(vec![0.5, -1.0]).reshape(&[2, 1]).unwrap();
        let v = Tensor::vector(vec![3.0, 4.0]).reshape(&[2, 1]).unwrap();
        let (_, g) = vjp(|t, xs| t.scale(xs[0], 1.0), std::slice::from_ref(&x), &v).unwrap();
        assert_eq!(g[0], v);

        let a = Tensor::matrix(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let (_, g) = vjp(
            |t, xs| {
                let am = t.constant(a.clone());
                t.matmul(am, xs[0])
            },
            &[x],
            &v,
        )
        .unwrap();
        assert_eq!(g[0], a.transpose().unwrap().matmul(&v).unwrap());
    }

    #[test]
    fn vjp_rejects_wrong_cotangent_shape() {
        let x = Tensor::vector(vec![1.0, 2.0]);
        let bad = Tensor::vector(vec![1.0, 2.0, 3.0]);
        assert!(vjp(|t, xs| t.scale(xs[0], 1.0), &[x], &bad).is_err());
    }
}
