use rand::distr::weighted::WeightedIndex;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{OracleError, Result};

/// Mixture of isotropic Gaussians.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMixture {
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    variances: Vec<f64>,
    dim: usize,
}

impl GaussianMixture {
    pub fn new(weights: Vec<f64>, means: Vec<Vec<f64>>, variances: Vec<f64>) -> Result<Self> {
        let k = weights.len();
        if k == 0 || means.len() != k || variances.len() != k {
            return Err(OracleError::Mixture(format!(
                "{k} weights, {} means, {} variances",
                means.len(),
                variances.len()
            )));
        }
        if weights.iter().any(|&w| !(w > 0.0) || !w.is_finite()) {
            return Err(OracleError::Mixture("weights must be positive".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(OracleError::Mixture(format!("weights sum to {total}, not 1")));
        }
        if variances.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err(OracleError::Mixture("variances must be positive".into()));
        }
        let dim = means[0].len();
        if dim == 0 || means.iter().any(|m| m.len() != dim || m.iter().any(|v| !v.is_finite())) {
            return Err(OracleError::Mixture("means must share a positive dimension".into()));
        }
        Ok(Self {
            weights,
            means,
            variances,
            dim,
        })
    }

    /// One-dimensional mixture from means and standard deviations.
    pub fn scalar(weights: &[f64], means: &[f64], sds: &[f64]) -> Result<Self> {
        Self::new(
            weights.to_vec(),
            means.iter().map(|&m| vec![m]).collect(),
            sds.iter().map(|s| s * s).collect(),
        )
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_components(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[Vec<f64>] {
        &self.means
    }

    pub fn variances(&self) -> &[f64] {
        &self.variances
    }

    /// Component `i` on its own, as a one-component mixture.
    pub fn component(&self, i: usize) -> Self {
        Self {
            weights: vec![1.0],
            means: vec![self.means[i].clone()],
            variances: vec![self.variances[i]],
            dim: self.dim,
        }
    }

    /// Mixture convolved with `N(0, t²I)`.
    pub fn noised(&self, t: f64) -> Self {
        Self {
            variances: self.variances.iter().map(|v| v + t * t).collect(),
            ..self.clone()
        }
    }

    /// Draws `n` points (flat, `n × dim`) together with their component labels.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, n: usize) -> (Vec<f64>, Vec<usize>) {
        let pick = WeightedIndex::new(&self.weights).expect("weights validated at construction");
        let mut points = Vec::with_capacity(n * self.dim);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let k = pick.sample(rng);
            let s = self.variances[k].sqrt();
            for &m in &self.means[k] {
                let e: f64 = StandardNormal.sample(rng);
                points.push(m + s * e);
            }
            labels.push(k);
        }
        (points, labels)
    }

    /// Per-component `log w_i + log N(x; m_i, v_i I)` with `v_i = s_i² + t²`.
    fn component_terms(&self, x: &[f64], t: f64) -> Vec<f64> {
        assert_eq!(x.len(), self.dim, "point dimension does not match mixture");
        let d = self.dim as f64;
        (0..self.weights.len())
            .map(|i| {
                let v = self.variances[i] + t * t;
                let sq: f64 = x.iter().zip(&self.means[i]).map(|(a, m)| (a - m) * (a - m)).sum();
                self.weights[i].ln() - 0.5 * d * (2.0 * std::f64::consts::PI * v).ln() - 0.5 * sq / v
            })
            .collect()
    }
}

fn log_sum_exp(terms: &[f64]) -> (f64, f64) {
    let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let total: f64 = terms.iter().map(|&v| (v - max).exp()).sum();
    (max + total.ln(), max)
}

/// `log p_t(x)` of the mixture convolved with `N(0, t²I)`.
pub fn gmm_logpdf_noised(x: &[f64], t: f64, gmm: &GaussianMixture) -> f64 {
    assert!(t >= 0.0, "noise level must be non-negative");
    log_sum_exp(&gmm.component_terms(x, t)).0
}

/// `∇_x log p_t(x)`: responsibility-weighted `-(x - m_i) / (s_i² + t²)`.
pub fn gmm_score_noised(x: &[f64], t: f64, gmm: &GaussianMixture) -> Vec<f64> {
    assert!(t >= 0.0, "noise level must be non-negative");
    let terms = gmm.component_terms(x, t);
    let (lse, _) = log_sum_exp(&terms);
    let mut out = vec![0.0; x.len()];
    for (i, &lt) in terms.iter().enumerate() {
        let r = (lt - lse).exp();
        let v = gmm.variances[i] + t * t;
        for ((o, &xi), &m) in out.iter_mut().zip(x).zip(&gmm.means[i]) {
            *o -= r * (xi - m) / v;
        }
    }
    out
}
