//! Fixed-step integration of autonomous vector fields, with gradients either
//! by differentiating the recorded solver steps or by a checkpointed adjoint
//! sweep.
//!
//! Time is dimensionless: one *advance* covers `tau` in `[k, k + 1]` and is
//! split into `substeps` equal solver steps.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Euler,
    Rk4,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IntegratorConfig {
    pub method: Method,
    pub substeps: usize,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        Self {
            method: Method::Euler,
            substeps: 1,
        }
    }
}

impl IntegratorConfig {
    pub fn new(method: Method, substeps: usize) -> Result<Self> {
        if substeps == 0 {
            return Err(Error::invalid("substeps must be at least 1"));
        }
        Ok(Self { method, substeps })
    }

    pub fn euler(substeps: usize) -> Self {
        Self::new(Method::Euler, substeps).expect("positive substeps")
    }

    pub fn rk4(substeps: usize) -> Self {
        Self::new(Method::Rk4, substeps).expect("positive substeps")
    }

    fn dt(&self) -> f64 {
        1.0 / self.substeps as f64
    }
}

/// An autonomous field `dh/dtau = f(h; theta)` that can record itself on a tape.
///
/// `params` are the field's parameters as tape variables, in the field's own
/// canonical order.
pub trait VectorField: Sync {
    fn record(&self, tape: &mut Tape, state: Var, params: &[Var]) -> Result<Var>;
}

fn at_tau<T>(tau: f64, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::NonFinite { .. } => Error::NonFiniteState { tau },
        other => other,
    })
}

fn record_step<F: VectorField + ?Sized>(
    tape: &mut Tape,
    field: &F,
    h: Var,
    params: &[Var],
    dt: f64,
    method: Method,
) -> Result<Var> {
    match method {
        Method::Euler => {
            let k = field.record(tape, h, params)?;
            let dk = tape.scale(k, dt)?;
            tape.add(h, dk)
        }
        Method::Rk4 => {
            let k1 = field.record(tape, h, params)?;
            let s1 = tape.scale(k1, dt / 2.0)?;
            let h2 = tape.add(h, s1)?;
            let k2 = field.record(tape, h2, params)?;
            let s2 = tape.scale(k2, dt / 2.0)?;
            let h3 = tape.add(h, s2)?;
            let k3 = field.record(tape, h3, params)?;
            let s3 = tape.scale(k3, dt)?;
            let h4 = tape.add(h, s3)?;
            let k4 = field.record(tape, h4, params)?;
            let k23 = tape.add(k2, k3)?;
            let k23 = tape.scale(k23, 2.0)?;
            let sum = tape.add(k1, k23)?;
            let sum = tape.add(sum, k4)?;
            let incr = tape.scale(sum, dt / 6.0)?;
            tape.add(h, incr)
        }
    }
}

/// Records `n_advances` unit advances from `h0` and returns the states at
/// integer `tau = 1..=n_advances`.
pub fn record_integration<F: VectorField + ?Sized>(
    tape: &mut Tape,
    field: &F,
    h0: Var,
    params: &[Var],
    n_advances: usize,
    cfg: IntegratorConfig,
) -> Result<Vec<Var>> {
    let dt = cfg.dt();
    let mut h = h0;
    let mut checkpoints = Vec::with_capacity(n_advances);
    for advance in 0..n_advances {
        for sub in 0..cfg.substeps {
            let tau = advance as f64 + (sub + 1) as f64 * dt;
            h = at_tau(tau, record_step(tape, field, h, params, dt, cfg.method))?;
            if !tape.value(h).is_finite() {
                return Err(Error::NonFiniteState { tau });
            }
        }
        checkpoints.push(h);
    }
    Ok(checkpoints)
}

/// Value-only integration over `[start, start + 1]`, keeping every substep state.
fn integrate_advance<F: VectorField + ?Sized>(
    field: &F,
    params: &[Tensor],
    h0: &Tensor,
    cfg: IntegratorConfig,
    start: f64,
) -> Result<Vec<Tensor>> {
    let dt = cfg.dt();
    let mut states = Vec::with_capacity(cfg.substeps + 1);
    states.push(h0.clone());
    for sub in 0..cfg.substeps {
        let tau = start + (sub + 1) as f64 * dt;
        let mut tape = Tape::new();
        let h = tape.constant(states[sub].clone());
        let p: Vec<Var> = params.iter().map(|t| tape.constant(t.clone())).collect();
        let next = at_tau(tau, record_step(&mut tape, field, h, &p, dt, cfg.method))?;
        let next = tape.value(next).clone();
        if !next.is_finite() {
            return Err(Error::NonFiniteState { tau });
        }
        states.push(next);
    }
    Ok(states)
}

/// Integrates without retaining a tape; returns states at `tau = 1..=n_advances`.
pub fn integrate<F: VectorField + ?Sized>(
    field: &F,
    params: &[Tensor],
    h0: &Tensor,
    n_advances: usize,
    cfg: IntegratorConfig,
) -> Result<Vec<Tensor>> {
    let mut h = h0.clone();
    let mut checkpoints = Vec::with_capacity(n_advances);
    for advance in 0..n_advances {
        let mut states = integrate_advance(field, params, &h, cfg, advance as f64)?;
        h = states.pop().expect("at least the initial state");
        checkpoints.push(h.clone());
    }
    Ok(checkpoints)
}

/// Gradients with respect to the initial state and the field parameters.
#[derive(Debug, Clone)]
pub struct StateGradients {
    pub loss: f64,
    pub d_state: Tensor,
    pub d_params: Vec<Tensor>,
}

/// Discretize-then-optimize: records the whole solve, applies `loss` to the
/// checkpoints `H_1..H_n`, and backpropagates through every solver step.
pub fn grad_via_tape<F, L>(
    field: &F,
    params: &[Tensor],
    h0: &Tensor,
    n_advances: usize,
    cfg: IntegratorConfig,
    loss: L,
) -> Result<StateGradients>
where
    F: VectorField + ?Sized,
    L: FnOnce(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let h = tape.leaf(h0.clone());
    let p: Vec<Var> = params.iter().map(|t| tape.leaf(t.clone())).collect();
    let checkpoints = record_integration(&mut tape, field, h, &p, n_advances, cfg)?;
    let l = loss(&mut tape, &checkpoints)?;
    let grads = tape.backward(l)?;
    Ok(StateGradients {
        loss: tape.value(l).item(),
        d_state: grads.get(h),
        d_params: p.iter().map(|&v| grads.get(v)).collect(),
    })
}

/// Memory accounting for one adjoint sweep.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct AdjointStats {
    /// Largest number of full states held at once (checkpoints plus the
    /// re-integrated substep buffer of the current interval).
    pub peak_states: usize,
    /// Largest tape used by any single vector-Jacobian product.
    pub peak_tape_nodes: usize,
    pub vjp_evaluations: usize,
}

#[derive(Debug, Clone)]
pub struct AdjointGradients {
    pub d_state: Tensor,
    pub d_params: Vec<Tensor>,
    pub stats: AdjointStats,
}

struct FieldVjp {
    value: Tensor,
    d_state: Tensor,
    d_params: Vec<Tensor>,
}

fn field_vjp<F: VectorField + ?Sized>(
    field: &F,
    params: &[Tensor],
    h: &Tensor,
    cotangent: &Tensor,
    stats: &mut AdjointStats,
) -> Result<FieldVjp> {
    let mut tape = Tape::new();
    let hv = tape.leaf(h.clone());
    let p: Vec<Var> = params.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = field.record(&mut tape, hv, &p)?;
    let grads = tape.backward_from(&[(out, cotangent)])?;
    stats.peak_tape_nodes = stats.peak_tape_nodes.max(tape.len());
    stats.vjp_evaluations += 1;
    Ok(FieldVjp {
        value: tape.value(out).clone(),
        d_state: grads.get(hv),
        d_params: p.iter().map(|&v| grads.get(v)).collect(),
    })
}

fn axpy_all(acc: &mut [Tensor], c: f64, xs: &[Tensor]) -> Result<()> {
    for (a, x) in acc.iter_mut().zip(xs) {
        a.axpy(c, x)?;
    }
    Ok(())
}

/// One backward solver step of the adjoint system from `tau` to `tau - dt`.
///
/// Euler evaluates the Jacobian at the stored left state, which makes the
/// result identical to differentiating the forward Euler step. RK4 solves
/// the augmented system `(h, a, g)` backward from the stored right state
/// with the classical four-stage rule.
#[allow(clippy::too_many_arguments)]
fn adjoint_step<F: VectorField + ?Sized>(
    field: &F,
    params: &[Tensor],
    h_left: &Tensor,
    h_right: &Tensor,
    a: &mut Tensor,
    g: &mut [Tensor],
    dt: f64,
    method: Method,
    stats: &mut AdjointStats,
) -> Result<()> {
    match method {
        Method::Euler => {
            let v = field_vjp(field, params, h_left, a, stats)?;
            a.axpy(dt, &v.d_state)?;
            axpy_all(g, dt, &v.d_params)
        }
        Method::Rk4 => {
            let s1 = field_vjp(field, params, h_right, a, stats)?;
            let mut h2 = h_right.clone();
            h2.axpy(-dt / 2.0, &s1.value)?;
            let mut a2 = a.clone();
            a2.axpy(dt / 2.0, &s1.d_state)?;
            let s2 = field_vjp(field, params, &h2, &a2, stats)?;
            let mut h3 = h_right.clone();
            h3.axpy(-dt / 2.0, &s2.value)?;
            let mut a3 = a.clone();
            a3.axpy(dt / 2.0, &s2.d_state)?;
            let s3 = field_vjp(field, params, &h3, &a3, stats)?;
            let mut h4 = h_right.clone();
            h4.axpy(-dt, &s3.value)?;
            let mut a4 = a.clone();
            a4.axpy(dt, &s3.d_state)?;
            let s4 = field_vjp(field, params, &h4, &a4, stats)?;
            for (w, s) in [(1.0, &s1), (2.0, &s2), (2.0, &s3), (1.0, &s4)] {
                a.axpy(w * dt / 6.0, &s.d_state)?;
                axpy_all(g, w * dt / 6.0, &s.d_params)?;
            }
            Ok(())
        }
    }
}

/// Checkpointed adjoint sweep.
///
/// `checkpoints` holds `H_0..H_n` from the forward solve and `cotangents[k-1]`
/// is `dL/dH_k` (or `None` where the loss ignores `H_k`). The adjoint starts
/// at `tau = n` with the last cotangent, jumps by each earlier cotangent as it
/// passes `tau = k`, and between checkpoints re-integrates the forward states
/// from `H_{k-1}` before stepping backward through them.
pub fn grad_via_adjoint<F: VectorField + ?Sized>(
    field: &F,
    params: &[Tensor],
    checkpoints: &[Tensor],
    cotangents: &[Option<Tensor>],
    cfg: IntegratorConfig,
) -> Result<AdjointGradients> {
    let n = cotangents.len();
    if n == 0 {
        return Err(Error::invalid("adjoint needs at least one advance"));
    }
    if checkpoints.len() < n + 1 {
        return Err(Error::MissingCheckpoint(checkpoints.len()));
    }
    let shape = checkpoints[0].shape().to_vec();
    let mut a = Tensor::zeros(&shape);
    let mut g: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
    let mut stats = AdjointStats::default();
    let dt = cfg.dt();

    for k in (1..=n).rev() {
        if let Some(c) = &cotangents[k - 1] {
            a.add_assign(c)?;
        }
        let states = integrate_advance(field, params, &checkpoints[k - 1], cfg, (k - 1) as f64)?;
        stats.peak_states = stats.peak_states.max(checkpoints.len() + states.len());
        for j in (0..cfg.substeps).rev() {
            let tau = (k - 1) as f64 + j as f64 * dt;
            adjoint_step(field, params, &states[j], &states[j + 1], &mut a, &mut g, dt, cfg.method, &mut stats)
                .map_err(|e| match e {
                    Error::NonFinite { .. } => Error::NonFiniteAdjoint { tau },
                    other => other,
                })?;
            if !a.is_finite() || g.iter().any(|t| !t.is_finite()) {
                return Err(Error::NonFiniteAdjoint { tau });
            }
        }
    }
    Ok(AdjointGradients {
        d_state: a,
        d_params: g,
        stats,
    })
}
