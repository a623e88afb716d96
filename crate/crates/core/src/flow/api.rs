use super::forward::Conditioning;
use super::params::FlowStack;
use super::{FlowError, Result, TokenSequence};
use crate::autodiff::{Graph, Real};

/// Class label; `None` is the null class used for unconditional evaluation.
pub type ClassId = Option<usize>;

/// Per-token affine parameters of one block.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineParams {
    pub mu: TokenSequence,
    pub log_sigma: TokenSequence,
}

/// Largest batch evaluated on a single graph.
const CHUNK: usize = 1024;

fn check_t(t: f64) -> Result<()> {
    if t > 0.0 && t.is_finite() {
        Ok(())
    } else {
        Err(FlowError::NoiseLevel(t))
    }
}

pub(crate) fn flip_rows<T: Copy>(data: &[T], dim: usize) -> Vec<T> {
    data.chunks(dim).rev().flatten().copied().collect()
}

impl<T: Real> FlowStack<T> {
    fn check_seq(&self, x: &TokenSequence) -> Result<()> {
        let cfg = self.config();
        if x.tokens() != cfg.tokens || x.dim() != cfg.token_dim {
            return Err(FlowError::Shape {
                expected: (cfg.tokens, cfg.token_dim),
                got: (x.tokens(), x.dim()),
            });
        }
        Ok(())
    }

    fn check_block(&self, block: usize) -> Result<()> {
        if block < self.config().num_blocks() {
            Ok(())
        } else {
            Err(FlowError::Config(format!(
                "block {block} out of range for {} blocks",
                self.config().num_blocks()
            )))
        }
    }

    pub(crate) fn conditioning(&self, t: &[f64], y: &[ClassId]) -> Result<Conditioning> {
        if t.len() != y.len() || t.is_empty() {
            return Err(FlowError::Batch(format!(
                "{} noise levels for {} class labels",
                t.len(),
                y.len()
            )));
        }
        for &ti in t {
            check_t(ti)?;
        }
        let rows = y.iter().map(|&c| self.class_row(c)).collect::<Result<_>>()?;
        Ok(Conditioning { rows, t: t.to_vec() })
    }

    fn sequence(&self, data: Vec<f64>) -> TokenSequence {
        let cfg = self.config();
        TokenSequence {
            tokens: cfg.tokens,
            dim: cfg.token_dim,
            data,
        }
    }

    fn to_model(data: &[f64]) -> Vec<T> {
        data.iter().map(|&v| T::lit(v)).collect()
    }

    fn from_model(data: &[T]) -> Vec<f64> {
        data.iter().map(|v| v.to_f64_lossless()).collect()
    }

    fn single_block(
        &self,
        block: usize,
        x: &TokenSequence,
        t: f64,
        y: ClassId,
    ) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>, f64)> {
        self.check_seq(x)?;
        self.check_block(block)?;
        let cond = self.conditioning(&[t], &[y])?;
        let cfg = self.config();
        let g = Graph::<T>::new();
        let bound = self.bind(&g, &cond, false)?;
        let xv = g.constant(vec![1, cfg.tokens, cfg.token_dim], Self::to_model(x.data()))?;
        let out = self.graph_block(&bound, &cond, block, xv)?;
        Ok((
            Self::from_model(&out.z.value()),
            Self::from_model(&out.mu.value()),
            Self::from_model(&out.log_sigma.value()),
            out.neg_log_sigma.item().to_f64_lossless(),
        ))
    }

    /// `z_n = (x_n - μ_n) / σ_n` for one block, with its `-Σ log σ`.
    pub fn block_forward(&self, block: usize, x: &TokenSequence, t: f64, y: ClassId) -> Result<(TokenSequence, f64)> {
        let (z, _, _, nls) = self.single_block(block, x, t, y)?;
        Ok((self.sequence(z), nls))
    }

    /// Affine parameters that `block` assigns to each position of `x`.
    pub fn block_affine_params(&self, block: usize, x: &TokenSequence, t: f64, y: ClassId) -> Result<AffineParams> {
        let (_, mu, ls, _) = self.single_block(block, x, t, y)?;
        Ok(AffineParams {
            mu: self.sequence(mu),
            log_sigma: self.sequence(ls),
        })
    }

    pub fn block_inverse(&self, block: usize, z: &TokenSequence, t: f64, y: ClassId) -> Result<TokenSequence> {
        self.check_seq(z)?;
        check_t(t)?;
        let x = self.rows_block_inverse(block, &Self::to_model(z.data()), t, y)?;
        Ok(self.sequence(Self::from_model(&x)))
    }

    /// Inverse that recomputes every prefix from scratch. Quadratic in `N`;
    /// kept as a reference for the cached inverse.
    pub fn block_inverse_naive(&self, block: usize, z: &TokenSequence, t: f64, y: ClassId) -> Result<TokenSequence> {
        self.check_seq(z)?;
        check_t(t)?;
        let x = self.rows_block_inverse_naive(block, &Self::to_model(z.data()), t, y)?;
        Ok(self.sequence(Self::from_model(&x)))
    }

    /// Full forward map. Returns `z` and `log|det ∂z/∂x|`.
    pub fn stack_forward(&self, x: &TokenSequence, t: f64, y: ClassId) -> Result<(TokenSequence, f64)> {
        self.check_seq(x)?;
        let cond = self.conditioning(&[t], &[y])?;
        let cfg = self.config();
        let g = Graph::<T>::new();
        let bound = self.bind(&g, &cond, false)?;
        let xv = g.constant(vec![1, cfg.tokens, cfg.token_dim], Self::to_model(x.data()))?;
        let (z, ld) = self.graph_stack(&bound, &cond, xv)?;
        Ok((self.sequence(Self::from_model(&z.value())), ld.item().to_f64_lossless()))
    }

    /// Sequential inverse of the whole stack in model precision.
    pub(crate) fn rows_stack_inverse(&self, z: &[T], t: f64, y: ClassId) -> Result<Vec<T>> {
        let d = self.config().token_dim;
        let mut h = z.to_vec();
        for block in (0..self.config().num_blocks()).rev() {
            h = self.rows_block_inverse(block, &h, t, y)?;
            if block > 0 {
                h = flip_rows(&h, d);
            }
        }
        Ok(h)
    }

    pub fn stack_inverse(&self, z: &TokenSequence, t: f64, y: ClassId) -> Result<TokenSequence> {
        self.check_seq(z)?;
        check_t(t)?;
        let x = self.rows_stack_inverse(&Self::to_model(z.data()), t, y)?;
        Ok(self.sequence(Self::from_model(&x)))
    }

    /// Exact `log p(x | t, y)`, Gaussian constant included.
    pub fn log_likelihood(&self, x: &TokenSequence, t: f64, y: ClassId) -> Result<f64> {
        self.check_seq(x)?;
        Ok(self.log_likelihood_batch(x.data(), &[t], &[y])?[0])
    }

    /// `∇_x log p(x | t, y)`.
    pub fn score(&self, x: &TokenSequence, t: f64, y: ClassId) -> Result<TokenSequence> {
        self.check_seq(x)?;
        Ok(self.sequence(self.score_batch(x.data(), &[t], &[y])?))
    }

    fn check_batch(&self, xs: &[f64], t: &[f64]) -> Result<()> {
        let dim = self.config().total_dim();
        if xs.len() != t.len() * dim {
            return Err(FlowError::Batch(format!(
                "{} values do not form {} samples of dimension {dim}",
                xs.len(),
                t.len()
            )));
        }
        if xs.iter().any(|v| !v.is_finite()) {
            return Err(FlowError::NonFinite {
                stage: "input",
                block: 0,
                token: None,
            });
        }
        Ok(())
    }

    /// Log-likelihoods of a flat batch of samples, `t.len()` rows of `D` values.
    pub fn log_likelihood_batch(&self, xs: &[f64], t: &[f64], y: &[ClassId]) -> Result<Vec<f64>> {
        self.conditioning(t, y)?;
        self.check_batch(xs, t)?;
        let cfg = self.config();
        let dim = cfg.total_dim();
        let mut out = Vec::with_capacity(t.len());
        for start in (0..t.len()).step_by(CHUNK) {
            let end = (start + CHUNK).min(t.len());
            let cond = self.conditioning(&t[start..end], &y[start..end])?;
            let g = Graph::<T>::new();
            let bound = self.bind(&g, &cond, false)?;
            let xv = g.constant(
                vec![end - start, cfg.tokens, cfg.token_dim],
                Self::to_model(&xs[start * dim..end * dim]),
            )?;
            let ll = self.graph_log_likelihood(&bound, &cond, xv)?;
            out.extend(Self::from_model(&ll.value()));
        }
        Ok(out)
    }

    /// Scores of a flat batch; one reverse pass per chunk. Samples are
    /// independent, so the gradient of the summed log-likelihood gives every
    /// per-sample score at once.
    pub fn score_batch(&self, xs: &[f64], t: &[f64], y: &[ClassId]) -> Result<Vec<f64>> {
        self.conditioning(t, y)?;
        self.check_batch(xs, t)?;
        let cfg = self.config();
        let dim = cfg.total_dim();
        let mut out = Vec::with_capacity(xs.len());
        for start in (0..t.len()).step_by(CHUNK) {
            let end = (start + CHUNK).min(t.len());
            let cond = self.conditioning(&t[start..end], &y[start..end])?;
            let g = Graph::<T>::new();
            let bound = self.bind(&g, &cond, false)?;
            let xv = g.variable(
                vec![end - start, cfg.tokens, cfg.token_dim],
                Self::to_model(&xs[start * dim..end * dim]),
            )?;
            let ll = self.graph_log_likelihood(&bound, &cond, xv)?.sum();
            let grad = g.gradient(ll, &[xv])?.remove(0);
            out.extend(Self::from_model(&grad));
        }
        Ok(out)
    }
}
