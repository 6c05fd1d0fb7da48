use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First and second moment estimates, one tensor per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let m: Vec<Tensor> = params.into_iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            step: 0,
            v: m.clone(),
            m,
        }
    }
}

/// One bias-corrected Adam update:
/// `p -= lr * m_hat / (sqrt(v_hat) + eps)`.
pub fn adam_step(params: &mut [&mut Tensor], grads: &[&Tensor], state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::invalid(format!(
            "adam: {} parameters, {} gradients, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (((p, g), m), v) in params.iter_mut().zip(grads).zip(state.m.iter_mut()).zip(state.v.iter_mut()) {
        p.require_same_shape(g, "adam")?;
        let pd = p.data_mut();
        for (i, &gi) in g.data().iter().enumerate() {
            let mi = cfg.beta1 * m.data()[i] + (1.0 - cfg.beta1) * gi;
            let vi = cfg.beta2 * v.data()[i] + (1.0 - cfg.beta2) * gi * gi;
            m.data_mut()[i] = mi;
            v.data_mut()[i] = vi;
            let m_hat = mi / bc1;
            let v_hat = vi / bc2;
            pd[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
        }
    }
    Ok(())
}
