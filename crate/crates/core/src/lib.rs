//! Noise-amortized transformer autoregressive normalizing flows.

// `!(x > 0.0)` rejects NaN along with the out-of-range values.
#![allow(
    clippy::neg_cmp_op_on_partial_ord,
    clippy::should_implement_trait,
    clippy::type_complexity
)]

pub mod autodiff;
pub mod eval;
pub mod flow;
pub mod io;
pub mod oracle;
pub mod sampler;
pub mod trainer;
