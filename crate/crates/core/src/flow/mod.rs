//! Causal-transformer autoregressive affine flow.
//!
//! A [`FlowStack`] is `L` causal blocks separated by token-order flips. Block
//! `ℓ` maps its input `x` to `z_n = (x_n - μ_n) / σ_n` where `(μ_n, log σ_n)`
//! are produced by a causal transformer that only sees `x_{<n}`, the class
//! embedding and the time embedding of `log t`. The log-determinant of a block
//! is therefore `-Σ log σ_n`, and the inverse is a sequential scan over tokens.

mod api;
mod forward;
mod infer;
mod params;

pub(crate) use api::flip_rows;
pub use api::{AffineParams, ClassId};
pub(crate) use infer::invert_token;
pub use infer::BlockCache;
pub use params::{FlowConfig, FlowStack, NamedTensor};

use thiserror::Error;

use crate::autodiff::TensorError;

/// Bound applied to predicted `log σ` through `LOG_SIGMA_BOUND · tanh(raw / LOG_SIGMA_BOUND)`.
pub const LOG_SIGMA_BOUND: f64 = 7.0;

#[derive(Debug, Error)]
pub enum FlowError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("non-finite value in {stage} of block {block}{}", token.map(|t| format!(" at token {t}")).unwrap_or_default())]
    NonFinite {
        stage: &'static str,
        block: usize,
        token: Option<usize>,
    },
    #[error("invalid flow configuration: {0}")]
    Config(String),
    #[error("token sequence has shape {got:?}, model expects {expected:?}")]
    Shape {
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("class {class} out of range for a model with {num_classes} classes")]
    Class { class: usize, num_classes: usize },
    #[error("noise level must be positive and finite, got {0}")]
    NoiseLevel(f64),
    #[error("batch arguments disagree: {0}")]
    Batch(String),
}

pub type Result<T> = std::result::Result<T, FlowError>;

/// Sequence of `N` tokens of dimension `d`, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    tokens: usize,
    dim: usize,
    data: Vec<f64>,
}

impl TokenSequence {
    pub fn new(tokens: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if tokens == 0 || dim == 0 || data.len() != tokens * dim {
            return Err(FlowError::Shape {
                expected: (tokens, dim),
                got: (data.len() / dim.max(1), dim),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(FlowError::NonFinite {
                stage: "token sequence",
                block: 0,
                token: data.iter().position(|v| !v.is_finite()).map(|i| i / dim),
            });
        }
        Ok(Self { tokens, dim, data })
    }

    pub fn zeros(tokens: usize, dim: usize) -> Self {
        Self {
            tokens,
            dim,
            data: vec![0.0; tokens * dim],
        }
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Total dimension `D = N·d`.
    pub fn total_dim(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn token(&self, n: usize) -> &[f64] {
        &self.data[n * self.dim..(n + 1) * self.dim]
    }

    pub fn max_abs_diff(&self, other: &TokenSequence) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Token-order flip `π(n) = N - n + 1`. Token contents are untouched.
pub fn permute(seq: &TokenSequence) -> TokenSequence {
    let mut data = Vec::with_capacity(seq.data.len());
    for n in (0..seq.tokens).rev() {
        data.extend_from_slice(seq.token(n));
    }
    TokenSequence {
        tokens: seq.tokens,
        dim: seq.dim,
        data,
    }
}

/// `[sin(ω_k log t)…, cos(ω_k log t)…]` with `dim / 2` frequencies
/// log-spaced over `[1, 1000]`.
pub fn fourier_time_embedding(t: f64, dim: usize) -> Result<Vec<f64>> {
    if !(t > 0.0) || !t.is_finite() {
        return Err(FlowError::NoiseLevel(t));
    }
    if dim == 0 || !dim.is_multiple_of(2) {
        return Err(FlowError::Config(format!(
            "time embedding dimension must be even and positive, got {dim}"
        )));
    }
    let half = dim / 2;
    let lt = t.ln();
    let freq = |k: usize| {
        if half == 1 {
            1.0
        } else {
            1000f64.powf(k as f64 / (half - 1) as f64)
        }
    };
    let mut out = Vec::with_capacity(dim);
    out.extend((0..half).map(|k| (freq(k) * lt).sin()));
    out.extend((0..half).map(|k| (freq(k) * lt).cos()));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(vals: &[f64], dim: usize) -> TokenSequence {
        TokenSequence::new(vals.len() / dim, dim, vals.to_vec()).unwrap()
    }

    #[test]
    fn flip_reverses_token_order() {
        let s = seq(&[1.0, 1.5, 2.0, 2.5, 3.0, 3.5], 2);
        assert_eq!(permute(&s).data(), &[3.0, 3.5, 2.0, 2.5, 1.0, 1.5]);
        assert_eq!(permute(&permute(&s)), s);
        let single = seq(&[4.0, 5.0], 2);
        assert_eq!(permute(&single), single);
    }

    #[test]
    fn time_embedding_at_unit_noise() {
        let e = fourier_time_embedding(1.0, 8).unwrap();
        assert_eq!(e.len(), 8);
        assert!(e[..4].iter().all(|&v| v == 0.0));
        assert!(e[4..].iter().all(|&v| v == 1.0));
    }

    #[test]
    fn time_embedding_distinguishes_levels() {
        let a = fourier_time_embedding(0.01, 16).unwrap();
        let b = fourier_time_embedding(0.5, 16).unwrap();
        assert!(a.iter().zip(&b).any(|(x, y)| (x - y).abs() > 0.1));
    }

    #[test]
    fn time_embedding_rejects_bad_input() {
        assert!(matches!(fourier_time_embedding(0.0, 8), Err(FlowError::NoiseLevel(_))));
        assert!(fourier_time_embedding(-1.0, 8).is_err());
        assert!(fourier_time_embedding(0.5, 7).is_err());
    }

    #[test]
    fn token_sequence_validates() {
        assert!(TokenSequence::new(2, 2, vec![0.0; 3]).is_err());
        assert!(TokenSequence::new(1, 1, vec![f64::NAN]).is_err());
    }
}

#[cfg(test)]
mod flow_tests;
