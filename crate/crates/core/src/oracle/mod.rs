//! Double-precision ground truth used to verify the flow and the samplers.

mod energy;
mod gmm;
mod jacobian;

pub use energy::{energy_distance, ks_statistic, EnergyDistance};
pub use gmm::{gmm_logpdf_noised, gmm_score_noised, GaussianMixture};
pub use jacobian::{block_jacobian_logdet, brute_jacobian_logdet, stack_jacobian_logdet, MAX_JACOBIAN_DIM};

use thiserror::Error;

use crate::autodiff::TensorError;
use crate::flow::FlowError;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("invalid mixture: {0}")]
    Mixture(String),
    #[error("Jacobian of dimension {0} exceeds the brute-force limit of {MAX_JACOBIAN_DIM}")]
    TooLarge(usize),
    #[error("map is not square: {inputs} inputs, {outputs} outputs")]
    NotSquare { inputs: usize, outputs: usize },
    #[error("Jacobian is singular (log|det| = {0})")]
    Singular(f64),
    #[error("invalid sample sets: {0}")]
    Samples(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Flow(#[from] FlowError),
}

pub type Result<T> = std::result::Result<T, OracleError>;

/// Exact solution of `dx/dt = t·x / (s² + t²)` from `t_max` down to `t_min`,
/// the probability-flow ODE of `N(0, s²)` data.
pub fn ode_closed_form_gaussian(x0: f64, s: f64, t_max: f64, t_min: f64) -> f64 {
    assert!(s > 0.0, "data scale must be positive");
    x0 * ((s * s + t_min * t_min) / (s * s + t_max * t_max)).sqrt()
}
