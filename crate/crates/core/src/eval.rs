//! Comparisons of a trained flow against an analytic Gaussian-mixture target.
//!
//! A labelled task is class-conditional on the component index: class `k`
//! models component `k`, and generation splits a sample budget across classes
//! in proportion to the mixture weights. An unlabelled task models the whole
//! mixture under the null class.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};

use crate::flow::{ClassId, FlowStack};
use crate::oracle::{
    energy_distance, gmm_logpdf_noised, gmm_score_noised, EnergyDistance, GaussianMixture, OracleError,
};
use crate::sampler::{ar_generate, denoise_ode, tweedie_batch, MixtureScore, SampleError, SampleRequest, ScoreModel};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error(transparent)]
    Sample(#[from] SampleError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Flow(#[from] crate::flow::FlowError),
    #[error("{0}")]
    Mismatch(String),
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// Analytic target and how the model was conditioned on it.
#[derive(Debug, Clone)]
pub struct MixtureTarget {
    pub mixture: GaussianMixture,
    pub labelled: bool,
}

impl MixtureTarget {
    pub fn new(mixture: GaussianMixture, labelled: bool) -> Self {
        Self { mixture, labelled }
    }

    pub fn dim(&self) -> usize {
        self.mixture.dim()
    }

    /// Density the model should match under class `y`.
    fn target(&self, y: ClassId) -> GaussianMixture {
        match y {
            Some(k) => self.mixture.component(k),
            None => self.mixture.clone(),
        }
    }

    /// Sample budget per class: largest-remainder split by weight, or
    /// everything under the null class.
    pub fn class_counts(&self, n: usize) -> Vec<(ClassId, usize)> {
        if !self.labelled {
            return vec![(None, n)];
        }
        let w = self.mixture.weights();
        let exact: Vec<f64> = w.iter().map(|wi| wi * n as f64).collect();
        let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
        let mut order: Vec<usize> = (0..w.len()).collect();
        order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())));
        let short = n - counts.iter().sum::<usize>();
        for &i in order.iter().take(short) {
            counts[i] += 1;
        }
        counts.into_iter().enumerate().map(|(k, c)| (Some(k), c)).collect()
    }

    /// `n` clean draws from the mixture.
    pub fn clean(&self, n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.mixture.sample(&mut rng, n).0
    }

    /// Exact draws from the noised class densities at level `t`, in
    /// [`class_counts`](Self::class_counts) order.
    pub fn noised_exact(&self, n: usize, t: f64, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::with_capacity(n * self.dim());
        for (y, c) in self.class_counts(n) {
            out.extend(self.target(y).noised(t).sample(&mut rng, c).0);
        }
        out
    }
}

/// Mean negative log-likelihood in nats/dim of the model and of the exact
/// noised density, on noised draws with `t ~ U[t_min, t_max]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NllReport {
    pub model: f64,
    pub oracle: f64,
}

impl NllReport {
    pub fn gap(&self) -> f64 {
        (self.model - self.oracle).abs()
    }
}

pub fn nll_vs_oracle(
    model: &FlowStack<f32>,
    target: &MixtureTarget,
    t_range: (f64, f64),
    n: usize,
    seed: u64,
) -> Result<NllReport> {
    let d = target.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let uniform = Uniform::new(t_range.0, t_range.1).map_err(|e| EvalError::Mismatch(e.to_string()))?;
    let (clean, labels) = target.mixture.sample(&mut rng, n);
    let mut xs = Vec::with_capacity(n * d);
    let mut ts = Vec::with_capacity(n);
    let mut ys = Vec::with_capacity(n);
    let mut oracle = 0.0;
    for i in 0..n {
        let t = uniform.sample(&mut rng);
        let y = target.labelled.then_some(labels[i]);
        let point: Vec<f64> = clean[i * d..(i + 1) * d]
            .iter()
            .map(|v| v + t * Distribution::<f64>::sample(&StandardNormal, &mut rng))
            .collect();
        oracle -= gmm_logpdf_noised(&point, t, &target.target(y));
        xs.extend(point);
        ts.push(t);
        ys.push(y);
    }
    let ll = model.log_likelihood_batch(&xs, &ts, &ys)?;
    let model_nll = -ll.iter().sum::<f64>();
    let norm = (n * d) as f64;
    Ok(NllReport {
        model: model_nll / norm,
        oracle: oracle / norm,
    })
}

/// Cosine similarity between the stacked model and exact scores on `n`
/// draws from the noised class densities at level `t`.
pub fn score_cosine(model: &FlowStack<f32>, target: &MixtureTarget, t: f64, n: usize, seed: u64) -> Result<f64> {
    let xs = target.noised_exact(n, t, seed);
    let d = target.dim();
    let mut ys = Vec::with_capacity(n);
    let mut exact = Vec::with_capacity(n * d);
    let mut offset = 0;
    for (y, c) in target.class_counts(n) {
        let g = target.target(y);
        for i in offset..offset + c {
            exact.extend(gmm_score_noised(&xs[i * d..(i + 1) * d], t, &g));
        }
        ys.extend(std::iter::repeat_n(y, c));
        offset += c;
    }
    let got = model.score_batch(&xs, &vec![t; n], &ys)?;
    let dot: f64 = got.iter().zip(&exact).map(|(a, b)| a * b).sum();
    let na = got.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nb = exact.iter().map(|b| b * b).sum::<f64>().sqrt();
    Ok(dot / (na * nb))
}

/// Autoregressive samples at `request.t_max` for every class of the budget.
pub fn generate(model: &FlowStack<f32>, target: &MixtureTarget, request: &SampleRequest, n: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(n * target.dim());
    for (i, (y, c)) in target.class_counts(n).into_iter().enumerate() {
        let req = SampleRequest {
            count: c,
            class: y,
            seed: request.seed.wrapping_add(i as u64),
            ..request.clone()
        };
        out.extend(ar_generate(&req, model)?);
    }
    Ok(out)
}

/// Denoises class-ordered samples with the ODE, each class under its own label.
pub fn denoise<M: ScoreModel + ?Sized>(
    x: &[f64],
    target: &MixtureTarget,
    request: &SampleRequest,
    model: &M,
) -> Result<Vec<f64>> {
    let d = target.dim();
    let mut out = Vec::with_capacity(x.len());
    let mut offset = 0;
    for (y, c) in target.class_counts(x.len() / d) {
        let req = SampleRequest {
            class: y,
            ..request.clone()
        };
        out.extend(denoise_ode(&x[offset * d..(offset + c) * d], &req, model)?);
        offset += c;
    }
    Ok(out)
}

/// Single Tweedie step at `t` for class-ordered samples.
pub fn tweedie<M: ScoreModel + ?Sized>(x: &[f64], target: &MixtureTarget, t: f64, model: &M) -> Result<Vec<f64>> {
    let d = target.dim();
    let mut out = Vec::with_capacity(x.len());
    let mut offset = 0;
    for (y, c) in target.class_counts(x.len() / d) {
        out.extend(tweedie_batch(&x[offset * d..(offset + c) * d], t, y, model)?);
        offset += c;
    }
    Ok(out)
}

/// Energy distance of the analytic pipeline: exact noised draws at `t_max`
/// denoised with the exact score. The reference for a trained model.
pub fn analytic_floor(
    target: &MixtureTarget,
    request: &SampleRequest,
    n: usize,
    reference: &[f64],
    seed: u64,
) -> Result<EnergyDistance> {
    let noisy = target.noised_exact(n, request.t_max, seed);
    let exact = MixtureScore {
        mixture: target.mixture.clone(),
    };
    let clean = denoise(&noisy, target, request, &exact)?;
    Ok(energy_distance(&clean, reference, target.dim())?)
}
