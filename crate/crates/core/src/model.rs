//! The forecasting network: shared encoder, three independent ODE branches
//! (temporal attention, spatial attention, attention-modulated Chebyshev
//! convolution), fusion layer and shared decoder.
//!
//! Hidden states are laid out `[T_h, N, d_h]` (time, vertex, channel).

use rand::Rng as _;

use crate::autodiff::{Tape, Var};
use crate::data::{Branch, SampleBundle};
use crate::error::{Error, Result};
use crate::graph::ChebBasis;
use crate::odeint::{self, IntegratorConfig, VectorField};
use crate::rng;
use crate::tensor::Tensor;

/// Chebyshev order used by the branch dynamics.
pub const CHEB_ORDER: usize = 3;
/// Forward passes per branch.
pub const N_ADVANCES: usize = 3;
pub const DEFAULT_HIDDEN: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    pub vertices: usize,
    pub features: usize,
    /// Steps per segment, `T_h`.
    pub steps: usize,
    pub hidden: usize,
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        if self.vertices == 0 || self.features == 0 || self.steps == 0 || self.hidden == 0 {
            return Err(Error::invalid(format!("all model dimensions must be positive: {self:?}")));
        }
        Ok(())
    }
}

/// Per-position affine map `y = W x + b` with `W` of shape `[out, in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Affine<T> {
    pub weight: T,
    pub bias: T,
}

/// Bilinear attention scoring parameters.
///
/// Spatial attention: `w1: [T_h]`, `w2: [d_h, T_h]`, `w3: [d_h]`,
/// `bias, v: [N, N]`. Temporal attention swaps the roles of time and
/// vertex: `w1: [N]`, `w2: [d_h, N]`, `w3: [d_h]`, `bias, v: [T_h, T_h]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Attention<T> {
    pub w1: T,
    pub w2: T,
    pub w3: T,
    pub bias: T,
    pub v: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BranchParams<T> {
    pub spatial: Attention<T>,
    pub temporal: Attention<T>,
    /// Channel mixes `Theta_0..Theta_3`, each `[d_h, d_h]`.
    pub theta: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Params<T> {
    pub encoder: Affine<T>,
    /// Indexed by [`Branch::index`].
    pub branches: [BranchParams<T>; 3],
    pub fusion: Affine<T>,
    pub decoder: Affine<T>,
}

pub type ModelParams = Params<Tensor>;

impl<T> Affine<T> {
    fn entries<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a T)>) {
        out.push((format!("{prefix}.weight"), &self.weight));
        out.push((format!("{prefix}.bias"), &self.bias));
    }

    fn entries_mut<'a>(&'a mut self, out: &mut Vec<&'a mut T>) {
        out.push(&mut self.weight);
        out.push(&mut self.bias);
    }

    fn build(it: &mut impl Iterator<Item = T>) -> Self {
        Self {
            weight: it.next().expect("weight"),
            bias: it.next().expect("bias"),
        }
    }
}

impl<T> Attention<T> {
    fn entries<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a T)>) {
        for (name, t) in [("w1", &self.w1), ("w2", &self.w2), ("w3", &self.w3), ("bias", &self.bias), ("v", &self.v)] {
            out.push((format!("{prefix}.{name}"), t));
        }
    }

    fn entries_mut<'a>(&'a mut self, out: &mut Vec<&'a mut T>) {
        out.extend([&mut self.w1, &mut self.w2, &mut self.w3, &mut self.bias, &mut self.v]);
    }

    fn build(it: &mut impl Iterator<Item = T>) -> Self {
        let mut next = || it.next().expect("attention parameter");
        Self {
            w1: next(),
            w2: next(),
            w3: next(),
            bias: next(),
            v: next(),
        }
    }
}

impl<T> BranchParams<T> {
    fn entries<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a T)>) {
        self.spatial.entries(&format!("{prefix}.spatial"), out);
        self.temporal.entries(&format!("{prefix}.temporal"), out);
        for (k, t) in self.theta.iter().enumerate() {
            out.push((format!("{prefix}.theta{k}"), t));
        }
    }

    fn entries_mut<'a>(&'a mut self, out: &mut Vec<&'a mut T>) {
        self.spatial.entries_mut(out);
        self.temporal.entries_mut(out);
        out.extend(self.theta.iter_mut());
    }

    fn build(it: &mut impl Iterator<Item = T>) -> Self {
        Self {
            spatial: Attention::build(it),
            temporal: Attention::build(it),
            theta: (0..=CHEB_ORDER).map(|_| it.next().expect("theta")).collect(),
        }
    }

    /// Flat canonical order, as consumed by [`BranchField`].
    pub fn to_vec(&self) -> Vec<T>
    where
        T: Clone,
    {
        let mut out = Vec::new();
        self.entries("", &mut out);
        out.into_iter().map(|(_, t)| t.clone()).collect()
    }

    pub fn from_vec(items: Vec<T>) -> Result<Self> {
        let expected = 10 + CHEB_ORDER + 1;
        if items.len() != expected {
            return Err(Error::invalid(format!("branch needs {expected} parameters, got {}", items.len())));
        }
        Ok(Self::build(&mut items.into_iter()))
    }
}

impl<T> Params<T> {
    /// Named parameters in canonical order.
    pub fn entries(&self) -> Vec<(String, &T)> {
        let mut out = Vec::new();
        self.encoder.entries("encoder", &mut out);
        for b in Branch::ALL {
            self.branches[b.index()].entries(b.name(), &mut out);
        }
        self.fusion.entries("fusion", &mut out);
        self.decoder.entries("decoder", &mut out);
        out
    }

    /// Mutable parameters in the same order as [`Params::entries`].
    pub fn values_mut(&mut self) -> Vec<&mut T> {
        let mut out = Vec::new();
        self.encoder.entries_mut(&mut out);
        for b in self.branches.iter_mut() {
            b.entries_mut(&mut out);
        }
        self.fusion.entries_mut(&mut out);
        self.decoder.entries_mut(&mut out);
        out
    }

    /// Rebuilds from values in canonical order.
    pub fn from_values(values: impl IntoIterator<Item = T>) -> Self {
        let it = &mut values.into_iter();
        Self {
            encoder: Affine::build(it),
            branches: [BranchParams::build(it), BranchParams::build(it), BranchParams::build(it)],
            fusion: Affine::build(it),
            decoder: Affine::build(it),
        }
    }

    pub fn map<U>(&self, mut f: impl FnMut(&str, &T) -> U) -> Params<U> {
        Params::from_values(self.entries().into_iter().map(|(n, t)| f(&n, t)).collect::<Vec<_>>())
    }

    pub fn try_map<U, E>(&self, mut f: impl FnMut(&str, &T) -> Result<U, E>) -> Result<Params<U>, E> {
        let values = self
            .entries()
            .into_iter()
            .map(|(n, t)| f(&n, t))
            .collect::<Result<Vec<_>, E>>()?;
        Ok(Params::from_values(values))
    }

    pub fn len(&self) -> usize {
        self.entries().len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

impl ModelParams {
    pub fn dims(&self) -> ModelDims {
        let enc = self.encoder.weight.shape();
        let spatial = &self.branches[0].spatial;
        ModelDims {
            vertices: spatial.v.shape()[0],
            features: enc[1],
            steps: spatial.w1.shape()[0],
            hidden: enc[0],
        }
    }

    /// Zero-valued parameters of the given dimensions.
    pub fn zeros(dims: ModelDims) -> Self {
        Self::from_values(param_shapes(dims).iter().map(|s| Tensor::zeros(s)).collect::<Vec<_>>())
    }

    /// Glorot-uniform weights, zero biases, all-ones attention `v` matrices.
    pub fn init(dims: ModelDims, seed: u64) -> Result<Self> {
        dims.validate()?;
        let mut rng = rng::stream(seed, rng::INIT_STREAM);
        let template = Self::zeros(dims);
        Ok(template.map(|name, t| {
            let shape = t.shape();
            if name.ends_with(".bias") {
                Tensor::zeros(shape)
            } else if name.ends_with(".v") {
                Tensor::ones(shape)
            } else {
                let (fan_a, fan_b) = match shape {
                    [n] => (*n, 1),
                    [a, b] => (*a, *b),
                    _ => unreachable!("parameters are 1-D or 2-D"),
                };
                let bound = (6.0 / (fan_a + fan_b) as f64).sqrt();
                Tensor::from_fn(shape, |_| rng.gen_range(-bound..=bound))
            }
        }))
    }

    pub fn is_finite(&self) -> bool {
        self.entries().iter().all(|(_, t)| t.is_finite())
    }

    pub fn max_abs_diff(&self, other: &ModelParams) -> f64 {
        self.entries()
            .iter()
            .zip(other.entries())
            .map(|((_, a), (_, b))| a.sub(b).map(|d| d.max_abs()).unwrap_or(f64::INFINITY))
            .fold(0.0, f64::max)
    }
}

fn param_shapes(d: ModelDims) -> Vec<Vec<usize>> {
    let (n, f, t, h) = (d.vertices, d.features, d.steps, d.hidden);
    let mut shapes = vec![vec![h, f], vec![h]];
    for _ in Branch::ALL {
        shapes.extend([vec![t], vec![h, t], vec![h], vec![n, n], vec![n, n]]);
        shapes.extend([vec![n], vec![h, n], vec![h], vec![t, t], vec![t, t]]);
        shapes.extend((0..=CHEB_ORDER).map(|_| vec![h, h]));
    }
    shapes.extend([vec![h, 3 * h], vec![h], vec![f, h], vec![f]]);
    shapes
}

/// Records parameters as differentiable leaves.
pub fn leaves(tape: &mut Tape, params: &ModelParams) -> Params<Var> {
    params.map(|_, t| tape.leaf(t.clone()))
}

/// Records parameters as constants.
pub fn constants(tape: &mut Tape, params: &ModelParams) -> Params<Var> {
    params.map(|_, t| tape.constant(t.clone()))
}

/// `x W^T + b` over the trailing axis.
pub fn affine(tape: &mut Tape, p: &Affine<Var>, x: Var) -> Result<Var> {
    let wt = tape.transpose(p.weight)?;
    let y = tape.matmul(x, wt)?;
    tape.add_broadcast(y, p.bias)
}

/// `relu(W x + b)` per (time, vertex) position.
pub fn encode(tape: &mut Tape, p: &Affine<Var>, segment: Var) -> Result<Var> {
    if tape.value(segment).data().iter().any(|v| v.is_nan()) {
        return Err(Error::invalid("encoder input contains NaN; impute missing values first"));
    }
    let y = affine(tape, p, segment)?;
    tape.relu(y)
}

/// Linear read-out `W h + b` per (time, vertex) position.
pub fn decode(tape: &mut Tape, p: &Affine<Var>, hidden: Var) -> Result<Var> {
    affine(tape, p, hidden)
}

/// Concatenates the branch states along the channel axis and applies the
/// fusion map.
pub fn fuse(tape: &mut Tape, p: &Affine<Var>, states: [Var; 3]) -> Result<Var> {
    let s0 = tape.value(states[0]).shape().to_vec();
    for s in &states[1..] {
        let other = tape.value(*s).shape();
        if other != s0.as_slice() {
            return Err(Error::ShapeMismatch {
                op: "fuse",
                lhs: s0,
                rhs: other.to_vec(),
            });
        }
    }
    let cat = tape.concat(&states, 2)?;
    affine(tape, p, cat)
}

fn hidden_dims(tape: &Tape, h: Var) -> Result<(usize, usize, usize)> {
    match tape.value(h).shape() {
        [t, n, d] => Ok((*t, *n, *d)),
        s => Err(Error::invalid(format!("hidden state must be [T_h, N, d_h], got {s:?}"))),
    }
}

/// Pre-softmax spatial score `V_s sigmoid((H x_t w1) w2 (w3 x_c H)^T + bias)`, `[N, N]`.
pub fn spatial_scores(tape: &mut Tape, p: &Attention<Var>, h: Var) -> Result<Var> {
    let (t, n, d) = hidden_dims(tape, h)?;
    let w1 = tape.reshape(p.w1, &[t, 1])?;
    let w3 = tape.reshape(p.w3, &[d, 1])?;
    let hp = tape.permute(h, &[1, 2, 0])?; // [N, d, T]
    let lhs = tape.matmul(hp, w1)?;
    let lhs = tape.reshape(lhs, &[n, d])?;
    let lhs = tape.matmul(lhs, p.w2)?; // [N, T]
    let rhs = tape.matmul(h, w3)?;
    let rhs = tape.reshape(rhs, &[t, n])?; // [T, N]
    let prod = tape.matmul(lhs, rhs)?;
    let prod = tape.add(prod, p.bias)?;
    let gate = tape.sigmoid(prod)?;
    tape.matmul(p.v, gate)
}

/// Pre-softmax temporal score, `[T_h, T_h]`.
pub fn temporal_scores(tape: &mut Tape, p: &Attention<Var>, h: Var) -> Result<Var> {
    let (t, n, d) = hidden_dims(tape, h)?;
    let w1 = tape.reshape(p.w1, &[n, 1])?;
    let w3 = tape.reshape(p.w3, &[d, 1])?;
    let hp = tape.permute(h, &[0, 2, 1])?; // [T, d, N]
    let lhs = tape.matmul(hp, w1)?;
    let lhs = tape.reshape(lhs, &[t, d])?;
    let lhs = tape.matmul(lhs, p.w2)?; // [T, N]
    let rhs = tape.matmul(h, w3)?;
    let rhs = tape.reshape(rhs, &[t, n])?;
    let rhs = tape.transpose(rhs)?; // [N, T]
    let prod = tape.matmul(lhs, rhs)?;
    let prod = tape.add(prod, p.bias)?;
    let gate = tape.sigmoid(prod)?;
    tape.matmul(p.v, gate)
}

/// Row-stochastic spatial attention `A_S`, `[N, N]`.
pub fn spatial_attention(tape: &mut Tape, p: &Attention<Var>, h: Var) -> Result<Var> {
    let s = spatial_scores(tape, p, h)?;
    tape.softmax(s, 1)
}

/// Row-stochastic temporal attention `A_T`, `[T_h, T_h]`.
pub fn temporal_attention(tape: &mut Tape, p: &Attention<Var>, h: Var) -> Result<Var> {
    let s = temporal_scores(tape, p, h)?;
    tape.softmax(s, 1)
}

/// `dH/dtau`: temporal re-mixing, then
/// `relu(sum_k ((T_k ⊙ A_S) H') Theta_k)`.
pub fn dynamics(tape: &mut Tape, p: &BranchParams<Var>, basis: &ChebBasis, h: Var) -> Result<Var> {
    let (t, n, d) = hidden_dims(tape, h)?;
    if basis.n_vertices() != n {
        return Err(Error::invalid(format!(
            "Chebyshev basis is {0}x{0} but the state has {n} vertices",
            basis.n_vertices()
        )));
    }
    if basis.order() != CHEB_ORDER || p.theta.len() != CHEB_ORDER + 1 {
        return Err(Error::invalid(format!("dynamics need a Chebyshev basis of order {CHEB_ORDER}")));
    }
    let a_t = temporal_attention(tape, &p.temporal, h)?;
    let a_s = spatial_attention(tape, &p.spatial, h)?;
    let flat = tape.reshape(h, &[t, n * d])?;
    let mixed = tape.matmul(a_t, flat)?;
    let mixed = tape.reshape(mixed, &[t, n, d])?;
    let mut acc: Option<Var> = None;
    for (poly, theta) in basis.polys().iter().zip(&p.theta) {
        let tk = tape.constant(poly.clone());
        let filt = tape.mul(tk, a_s)?;
        let conv = tape.matmul(filt, mixed)?; // [T, N, d]
        let term = tape.matmul(conv, *theta)?;
        acc = Some(match acc {
            None => term,
            Some(a) => tape.add(a, term)?,
        });
    }
    tape.relu(acc.expect("at least one Chebyshev term"))
}

/// One branch's dynamics as an integrable vector field.
pub struct BranchField<'a> {
    pub basis: &'a ChebBasis,
}

impl VectorField for BranchField<'_> {
    fn record(&self, tape: &mut Tape, state: Var, params: &[Var]) -> Result<Var> {
        let p = BranchParams::from_vec(params.to_vec())?;
        dynamics(tape, &p, self.basis, state)
    }
}

/// Three forward passes of one branch: returns `[H_1, H_2, H_3]`.
pub fn ode_block_forward(
    tape: &mut Tape,
    p: &BranchParams<Var>,
    basis: &ChebBasis,
    h0: Var,
    cfg: IntegratorConfig,
) -> Result<Vec<Var>> {
    let field = BranchField { basis };
    odeint::record_integration(tape, &field, h0, &p.to_vec(), N_ADVANCES, cfg)
}

/// Decoded outputs recorded on a tape.
#[derive(Debug, Clone, Copy)]
pub struct HeadVars {
    /// `decode(H^{t_b + k dt_b})` for `k = 1, 2`, indexed `[branch][k - 1]`.
    pub intermediate: [[Var; 2]; 3],
    /// `decode(H^{t_p, b})`, the per-branch predictions without fusion.
    pub branch_finals: [Var; 3],
    pub fused_hidden: Var,
    /// `decode(fuse(H^{t_p,w}, H^{t_p,d}, H^{t_p,r}))`.
    pub fused: Var,
}

/// Decoder and fusion applied to the per-branch checkpoints
/// `checkpoints[b] = [H_1, H_2, H_3]`.
pub fn record_head(
    tape: &mut Tape,
    params: &Params<Var>,
    checkpoints: &[[Var; 3]; 3],
) -> Result<HeadVars> {
    let mut intermediate = Vec::with_capacity(3);
    let mut finals = Vec::with_capacity(3);
    for cps in checkpoints {
        let a = decode(tape, &params.decoder, cps[0])?;
        let b = decode(tape, &params.decoder, cps[1])?;
        intermediate.push([a, b]);
        finals.push(decode(tape, &params.decoder, cps[2])?);
    }
    let fused_hidden = fuse(
        tape,
        &params.fusion,
        [checkpoints[0][2], checkpoints[1][2], checkpoints[2][2]],
    )?;
    let fused = decode(tape, &params.decoder, fused_hidden)?;
    Ok(HeadVars {
        intermediate: [intermediate[0], intermediate[1], intermediate[2]],
        branch_finals: [finals[0], finals[1], finals[2]],
        fused_hidden,
        fused,
    })
}

/// Full forward pass recorded on a tape.
#[derive(Debug, Clone, Copy)]
pub struct ForwardVars {
    /// `[H_0, H_1, H_2, H_3]` per branch.
    pub hidden: [[Var; 4]; 3],
    pub head: HeadVars,
}

pub fn record_forward(
    tape: &mut Tape,
    params: &Params<Var>,
    inputs: &[Tensor; 3],
    basis: &ChebBasis,
    cfg: IntegratorConfig,
) -> Result<ForwardVars> {
    let mut hidden = Vec::with_capacity(3);
    for b in Branch::ALL {
        let x = tape.constant(inputs[b.index()].clone());
        let h0 = encode(tape, &params.encoder, x)?;
        let cps = ode_block_forward(tape, &params.branches[b.index()], basis, h0, cfg)?;
        hidden.push([h0, cps[0], cps[1], cps[2]]);
    }
    let checkpoints = [0, 1, 2].map(|b| [hidden[b][1], hidden[b][2], hidden[b][3]]);
    let head = record_head(tape, params, &checkpoints)?;
    Ok(ForwardVars {
        hidden: [hidden[0], hidden[1], hidden[2]],
        head,
    })
}

/// Decoded predictions (normalized units).
#[derive(Debug, Clone, PartialEq)]
pub struct Predictions {
    pub fused: Tensor,
    pub intermediate: [[Tensor; 2]; 3],
    pub branch_finals: [Tensor; 3],
}

impl Predictions {
    pub fn from_tape(tape: &Tape, head: &HeadVars) -> Self {
        let v = |x: Var| tape.value(x).clone();
        Self {
            fused: v(head.fused),
            intermediate: head.intermediate.map(|pair| pair.map(v)),
            branch_finals: head.branch_finals.map(v),
        }
    }
}

fn check_bundle(params: &ModelParams, bundle: &SampleBundle) -> Result<()> {
    let d = params.dims();
    let want = [d.steps, d.vertices, d.features];
    for x in &bundle.inputs {
        if x.shape() != want {
            return Err(Error::ShapeMismatch {
                op: "model_forward",
                lhs: want.to_vec(),
                rhs: x.shape().to_vec(),
            });
        }
    }
    Ok(())
}

/// Forward pass without gradient bookkeeping.
pub fn model_forward(
    bundle: &SampleBundle,
    params: &ModelParams,
    basis: &ChebBasis,
    cfg: IntegratorConfig,
) -> Result<Predictions> {
    check_bundle(params, bundle)?;
    let mut tape = Tape::new();
    let vars = constants(&mut tape, params);
    let fwd = record_forward(&mut tape, &vars, &bundle.inputs, basis, cfg)?;
    Ok(Predictions::from_tape(&tape, &fwd.head))
}
