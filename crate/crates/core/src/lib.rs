//! Attention-based spatio-temporal graph neural ODE forecasting.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`] and [`autodiff`]: dense `f64` arrays and a define-by-run tape.
//! - [`graph`]: sensor adjacency, scaled Laplacian and Chebyshev basis.
//! - [`data`]: traffic archives, chronological splits, normalization and
//!   the weekly/daily/recent segment bundles.
//! - [`model`]: encoder, per-branch attention + Chebyshev dynamics, fusion
//!   and decoder.
//! - [`odeint`]: fixed-step integration and the two gradient paths (tape and
//!   checkpointed adjoint).
//! - [`training`]: composite loss, Adam, masked metrics, training and
//!   evaluation loops.

pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod graph;
pub mod model;
pub mod odeint;
pub mod rng;
pub mod synthetic;
pub mod tensor;
pub mod training;

pub use autodiff::{vjp, Gradients, Tape, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
