use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::data::{Branch, SampleBundle};
use crate::error::Result;
use crate::graph::ChebBasis;
use crate::model::{self, Affine, BranchField, ModelParams, N_ADVANCES};
use crate::odeint::{self, AdjointStats, IntegratorConfig};
use crate::tensor::Tensor;

use super::loss::{composite_loss, LossConfig};

/// How parameter gradients are obtained through the ODE blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GradientMode {
    /// Backpropagate through every recorded solver step.
    #[default]
    Tape,
    /// Checkpointed adjoint sweep per branch.
    Adjoint,
}

#[derive(Debug, Clone)]
pub struct SampleGradient {
    pub loss: f64,
    pub grads: ModelParams,
    /// Summed over branches; zero in tape mode.
    pub adjoint: AdjointStats,
}

/// Composite loss and its gradient for a single anchor.
pub fn sample_gradient(
    params: &ModelParams,
    bundle: &SampleBundle,
    basis: &ChebBasis,
    integrator: IntegratorConfig,
    loss: &LossConfig,
    mode: GradientMode,
) -> Result<SampleGradient> {
    match mode {
        GradientMode::Tape => tape_gradient(params, bundle, basis, integrator, loss),
        GradientMode::Adjoint => adjoint_gradient(params, bundle, basis, integrator, loss),
    }
}

/// Composite loss without gradients.
pub fn sample_loss(
    params: &ModelParams,
    bundle: &SampleBundle,
    basis: &ChebBasis,
    integrator: IntegratorConfig,
    loss: &LossConfig,
) -> Result<f64> {
    let mut tape = Tape::new();
    let vars = model::constants(&mut tape, params);
    let fwd = model::record_forward(&mut tape, &vars, &bundle.inputs, basis, integrator)?;
    let l = composite_loss(&mut tape, &fwd.head, bundle, loss)?;
    Ok(tape.value(l).item())
}

fn tape_gradient(
    params: &ModelParams,
    bundle: &SampleBundle,
    basis: &ChebBasis,
    integrator: IntegratorConfig,
    loss: &LossConfig,
) -> Result<SampleGradient> {
    let mut tape = Tape::new();
    let vars = model::leaves(&mut tape, params);
    let fwd = model::record_forward(&mut tape, &vars, &bundle.inputs, basis, integrator)?;
    let l = composite_loss(&mut tape, &fwd.head, bundle, loss)?;
    let g = tape.backward(l)?;
    Ok(SampleGradient {
        loss: tape.value(l).item(),
        grads: vars.map(|_, &v| g.get(v)),
        adjoint: AdjointStats::default(),
    })
}

/// Encoder on its own tape, value-only ODE solves, head on a second tape
/// with the checkpoints as leaves, then one adjoint sweep per branch whose
/// initial-state cotangent is pulled back through the encoder.
fn adjoint_gradient(
    params: &ModelParams,
    bundle: &SampleBundle,
    basis: &ChebBasis,
    integrator: IntegratorConfig,
    loss: &LossConfig,
) -> Result<SampleGradient> {
    let field = BranchField { basis };

    let mut enc_tape = Tape::new();
    let enc = Affine {
        weight: enc_tape.leaf(params.encoder.weight.clone()),
        bias: enc_tape.leaf(params.encoder.bias.clone()),
    };
    let mut h0_vars = Vec::with_capacity(3);
    let mut trajectories = Vec::with_capacity(3);
    let mut branch_params = Vec::with_capacity(3);
    for b in Branch::ALL {
        let x = enc_tape.constant(bundle.inputs[b.index()].clone());
        let h0 = model::encode(&mut enc_tape, &enc, x)?;
        let theta = params.branches[b.index()].to_vec();
        let h0_value = enc_tape.value(h0).clone();
        let mut states = odeint::integrate(&field, &theta, &h0_value, N_ADVANCES, integrator)?;
        states.insert(0, h0_value);
        h0_vars.push(h0);
        trajectories.push(states);
        branch_params.push(theta);
    }

    let mut head_tape = Tape::new();
    let head_vars = model::leaves(&mut head_tape, params);
    let cps: Vec<[Var; 3]> = trajectories
        .iter()
        .map(|states| [1, 2, 3].map(|k| head_tape.leaf(states[k].clone())))
        .collect();
    let cps = [cps[0], cps[1], cps[2]];
    let head = model::record_head(&mut head_tape, &head_vars, &cps)?;
    let l = composite_loss(&mut head_tape, &head, bundle, loss)?;
    let hg = head_tape.backward(l)?;
    let mut grads = head_vars.map(|_, &v| hg.get(v));

    let mut stats = AdjointStats::default();
    let mut seeds = Vec::with_capacity(3);
    for b in Branch::ALL {
        let i = b.index();
        let cot: Vec<Option<Tensor>> = cps[i].iter().map(|&v| Some(hg.get(v))).collect();
        let adj = odeint::grad_via_adjoint(&field, &branch_params[i], &trajectories[i], &cot, integrator)?;
        stats.peak_states = stats.peak_states.max(adj.stats.peak_states);
        stats.peak_tape_nodes = stats.peak_tape_nodes.max(adj.stats.peak_tape_nodes);
        stats.vjp_evaluations += adj.stats.vjp_evaluations;
        grads.branches[i] = model::BranchParams::from_vec(adj.d_params)?;
        seeds.push(adj.d_state);
    }

    let seed_refs: Vec<(Var, &Tensor)> = h0_vars.iter().copied().zip(seeds.iter()).collect();
    let eg = enc_tape.backward_from(&seed_refs)?;
    grads.encoder = Affine {
        weight: eg.get(enc.weight),
        bias: eg.get(enc.bias),
    };

    Ok(SampleGradient {
        loss: head_tape.value(l).item(),
        grads,
        adjoint: stats,
    })
}
