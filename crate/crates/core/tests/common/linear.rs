//! Linear dynamics `dh/dtau = A h` with the matrix-exponential oracle.

use astgode::odeint::{grad_via_adjoint, integrate, IntegratorConfig, VectorField};
use astgode::{Result, Tape, Tensor, Var};
use nalgebra::DMatrix;

use super::{from_na, rng, to_na, uniform};

/// `dh/dtau = A h`, with `A` the only parameter.
pub struct Linear;

impl VectorField for Linear {
    fn record(&self, tape: &mut Tape, state: Var, params: &[Var]) -> Result<Var> {
        tape.matmul(params[0], state)
    }
}

pub const T: f64 = 3.0;

/// A 2x2 matrix with spectral norm 0.8.
pub fn contraction(seed: u64) -> Tensor {
    let a = uniform(&mut rng(seed), &[2, 2], -1.0, 1.0);
    let norm = to_na(&a).singular_values().max();
    a.scale(0.8 / norm)
}

pub fn h0() -> Tensor {
    Tensor::new(vec![2, 1], vec![1.0, -0.5]).unwrap()
}

/// `exp(tau A) h`.
pub fn exact_state(a: &Tensor, h: &Tensor, tau: f64) -> Tensor {
    from_na(&((to_na(a) * tau).exp() * to_na(h)))
}

/// Gradient of `0.5 ||exp(T A) h0||^2` with respect to `h0` and `A`.
/// The `A` part uses the Frechet derivative of the exponential, read off the
/// upper-right block of `exp([[T A, T E_ij], [0, T A]])`.
pub fn analytic_gradient(a: &Tensor, h: &Tensor) -> (Tensor, Tensor) {
    let ta = to_na(a) * T;
    let e = ta.clone().exp();
    let hn = to_na(h);
    let final_state = &e * &hn;
    let d_h = e.transpose() * &final_state;
    let mut d_a = DMatrix::zeros(2, 2);
    for i in 0..2 {
        for j in 0..2 {
            let mut block = DMatrix::zeros(4, 4);
            block.view_mut((0, 0), (2, 2)).copy_from(&ta);
            block.view_mut((2, 2), (2, 2)).copy_from(&ta);
            block[(i, 2 + j)] = T;
            let frechet = block.exp().view((0, 2), (2, 2)).into_owned();
            d_a[(i, j)] = (final_state.transpose() * frechet * &hn)[(0, 0)];
        }
    }
    (from_na(&d_h), from_na(&d_a))
}

/// Adjoint gradient of the terminal quadratic loss: `(d h0, d A)`.
pub fn adjoint_gradient(a: &Tensor, h: &Tensor, cfg: IntegratorConfig) -> (Tensor, Tensor) {
    let mut cps = vec![h.clone()];
    cps.extend(integrate(&Linear, std::slice::from_ref(a), h, 3, cfg).unwrap());
    let cot = vec![None, None, Some(cps[3].clone())];
    let g = grad_via_adjoint(&Linear, std::slice::from_ref(a), &cps, &cot, cfg).unwrap();
    (g.d_state, g.d_params[0].clone())
}
