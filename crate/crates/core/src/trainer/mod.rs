//! Noise-amortized maximum-likelihood training.
//!
//! Each example is corrupted as `x_t = x + t·ε` with its own `t ~ U[t_min, t_max]`
//! and the model minimizes `−γ_t log p(x_t | t, y) / D` with `γ_t = t`, so a
//! single network learns the whole family of noised densities.

mod optim;
mod patch;
mod run;

pub use optim::{optimizer_step, AdamW, OptimizerState};
pub use patch::{patchify, unpatchify, Image};
pub use run::{schedule_len, train, train_for, MetricsRow, TrainObserver, TrainState};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Graph, Real, TensorError};
use crate::flow::{ClassId, FlowConfig, FlowError, FlowStack, TokenSequence};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("{0}")]
    Patch(String),
    #[error("optimizer state does not match parameters: {0}")]
    Optimizer(String),
    #[error("non-finite loss at t = {t}")]
    NonFiniteLoss { t: f64 },
    #[error("training diverged at step {step} (t = {t}, lr = {lr:e})")]
    Diverged { step: u64, t: f64, lr: f64 },
    #[error("dataset: {0}")]
    Dataset(String),
    #[error("output sink: {0}")]
    Sink(String),
    #[error(transparent)]
    Flow(#[from] FlowError),
}

impl From<TensorError> for TrainError {
    fn from(e: TensorError) -> Self {
        TrainError::Flow(e.into())
    }
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// Range of training noise levels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSpec {
    pub t_min: f64,
    pub t_max: f64,
}

impl NoiseSpec {
    pub fn new(t_min: f64, t_max: f64) -> Result<Self> {
        if !(t_min > 0.0) || !(t_max > t_min) || !t_max.is_finite() {
            return Err(TrainError::Config(format!(
                "need 0 < t_min < t_max, got t_min = {t_min}, t_max = {t_max}"
            )));
        }
        Ok(Self { t_min, t_max })
    }

    pub fn draw_t(&self, rng: &mut ChaCha8Rng) -> f64 {
        let u: f64 = rng.random();
        self.t_min + u * (self.t_max - self.t_min)
    }
}

/// `x_t = x + t·ε` with explicit `t` and `ε`.
pub fn noise_draw_with(x: &TokenSequence, t: f64, eps: &[f64]) -> Result<TokenSequence> {
    if eps.len() != x.total_dim() {
        return Err(TrainError::Config(format!(
            "{} noise values for a sample of dimension {}",
            eps.len(),
            x.total_dim()
        )));
    }
    let data = x.data().iter().zip(eps).map(|(a, e)| a + t * e).collect();
    Ok(TokenSequence::new(x.tokens(), x.dim(), data)?)
}

/// Draws one `t` for the whole sample and i.i.d. standard-normal `ε`.
pub fn noise_draw(x: &TokenSequence, spec: &NoiseSpec, rng: &mut ChaCha8Rng) -> Result<(TokenSequence, f64)> {
    let t = spec.draw_t(rng);
    let eps: Vec<f64> = (0..x.total_dim()).map(|_| rng.sample(StandardNormal)).collect();
    Ok((noise_draw_with(x, t, &eps)?, t))
}

/// Learning rate at `step`: linear warmup from `base` to `peak` over
/// `warmup_steps`, then cosine decay back to `base` at `total_steps`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub base: f64,
    pub peak: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self { base: 1e-6, peak: 1e-4 }
    }
}

impl LrSchedule {
    pub fn at(&self, step: usize, total_steps: usize, warmup_steps: usize) -> f64 {
        let step = step.min(total_steps);
        if step < warmup_steps {
            return self.base + (self.peak - self.base) * step as f64 / warmup_steps as f64;
        }
        let span = total_steps.saturating_sub(warmup_steps);
        if span == 0 {
            return self.peak;
        }
        let progress = (step - warmup_steps) as f64 / span as f64;
        self.base + (self.peak - self.base) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// [`LrSchedule::at`] with the default `1e-6 → 1e-4 → 1e-6` schedule.
pub fn lr_at(step: usize, total_steps: usize, warmup_steps: usize) -> f64 {
    LrSchedule::default().at(step, total_steps, warmup_steps)
}

/// Architecture shape: attention layers per block and channel width.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchPreset {
    pub layers: Vec<usize>,
    pub width: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub time_dim: usize,
}

impl ArchPreset {
    pub const NAMES: [&'static str; 4] = ["tiny", "desk", "small", "base"];

    /// Two single-layer blocks; for tests and quick experiments.
    pub fn tiny() -> Self {
        Self::shaped(vec![1, 1], 16, 2)
    }

    /// Deep-shallow layout at desk scale.
    pub fn desk() -> Self {
        Self::shaped(vec![1, 1, 1, 3], 64, 4)
    }

    pub fn small() -> Self {
        Self::shaped(vec![2, 2, 2, 12], 128, 4)
    }

    pub fn base() -> Self {
        Self::shaped(vec![4, 4, 4, 24], 192, 6)
    }

    fn shaped(layers: Vec<usize>, width: usize, heads: usize) -> Self {
        Self {
            layers,
            width,
            heads,
            mlp_ratio: 4,
            time_dim: 16,
        }
    }

    pub fn by_name(name: &str) -> Option<Self> {
        match name {
            "tiny" => Some(Self::tiny()),
            "desk" => Some(Self::desk()),
            "small" => Some(Self::small()),
            "base" => Some(Self::base()),
            _ => None,
        }
    }

    pub fn flow_config(&self, tokens: usize, token_dim: usize, num_classes: usize) -> FlowConfig {
        FlowConfig {
            tokens,
            token_dim,
            layers: self.layers.clone(),
            width: self.width,
            heads: self.heads,
            mlp_ratio: self.mlp_ratio,
            time_dim: self.time_dim,
            num_classes,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub t_min: f64,
    pub t_max: f64,
    /// Multiplier `c` in `γ_t = c·t`.
    pub gamma_scale: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Optimizer steps per epoch; `0` derives it from the dataset size.
    pub steps_per_epoch: usize,
    pub lr: LrSchedule,
    /// Warmup length; `None` warms up over the first epoch.
    pub warmup_steps: Option<usize>,
    pub optimizer: AdamW,
    pub label_dropout: f64,
    pub patch_size: usize,
    pub arch: ArchPreset,
    pub seed: u64,
    /// Checkpoint cadence in steps; `0` disables periodic checkpoints.
    pub checkpoint_every: usize,
    /// Record real elapsed time in the metrics. Off by default so that
    /// metrics files are reproducible byte for byte.
    pub log_wallclock: bool,
}

impl TrainConfig {
    pub fn new(t_max: f64) -> Self {
        Self {
            t_min: 0.01,
            t_max,
            gamma_scale: 1.0,
            batch_size: 64,
            epochs: 10,
            steps_per_epoch: 0,
            lr: LrSchedule::default(),
            warmup_steps: None,
            optimizer: AdamW::default(),
            label_dropout: 0.1,
            patch_size: 1,
            arch: ArchPreset::desk(),
            seed: 0,
            checkpoint_every: 0,
            log_wallclock: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        NoiseSpec::new(self.t_min, self.t_max)?;
        let fail = |m: String| Err(TrainError::Config(m));
        if !(self.gamma_scale > 0.0) || !self.gamma_scale.is_finite() {
            return fail(format!("gamma_scale must be positive, got {}", self.gamma_scale));
        }
        if self.batch_size == 0 {
            return fail("batch_size must be positive".into());
        }
        // 1.0 is accepted so that a run can ignore labels entirely.
        if !(0.0..=1.0).contains(&self.label_dropout) {
            return fail(format!("label_dropout must lie in [0, 1], got {}", self.label_dropout));
        }
        if !(self.lr.base >= 0.0 && self.lr.peak >= self.lr.base && self.lr.peak.is_finite()) {
            return fail(format!(
                "need 0 <= lr base <= peak, got {} and {}",
                self.lr.base, self.lr.peak
            ));
        }
        let o = &self.optimizer;
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) {
            return fail(format!("betas must lie in [0, 1), got ({}, {})", o.beta1, o.beta2));
        }
        if !(o.eps > 0.0) || !(o.weight_decay >= 0.0) {
            return fail("eps must be positive and weight_decay non-negative".into());
        }
        if self.patch_size == 0 {
            return fail("patch_size must be positive".into());
        }
        Ok(())
    }

    pub fn noise(&self) -> NoiseSpec {
        NoiseSpec {
            t_min: self.t_min,
            t_max: self.t_max,
        }
    }
}

/// Training data as flat `D`-dimensional examples with optional labels.
pub trait Dataset {
    fn tokens(&self) -> usize;
    fn token_dim(&self) -> usize;
    fn num_classes(&self) -> usize;
    /// Examples per epoch.
    fn len(&self) -> usize;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
    /// Writes example `index` into `out` and returns its label. Procedural
    /// datasets ignore `index` and draw from `rng`.
    fn example(&self, index: usize, rng: &mut ChaCha8Rng, out: &mut [f64]) -> Option<usize>;
}

/// Clean examples, flat `B × D`, with their labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub x: Vec<f64>,
    pub y: Vec<ClassId>,
}

/// Loss value, unweighted nats per dimension and parameter gradients.
pub struct LossOutput<T: Real> {
    pub loss: f64,
    pub nats_per_dim: f64,
    pub grads: Vec<Vec<T>>,
}

/// `mean_b(−γ_b · log p(x_t,b | t_b, y_b) / D)` for already-noised inputs,
/// with its gradient with respect to every parameter.
pub fn loss_gradient<T: Real>(
    model: &FlowStack<T>,
    x_t: &[f64],
    t: &[f64],
    y: &[ClassId],
    gamma_scale: f64,
) -> Result<LossOutput<T>> {
    let cond = model.conditioning(t, y)?;
    let cfg = model.config();
    let (b, dim) = (t.len(), cfg.total_dim());
    if x_t.len() != b * dim {
        return Err(TrainError::Config(format!(
            "{} values for {b} samples of dimension {dim}",
            x_t.len()
        )));
    }
    let g = Graph::<T>::new();
    let bound = model.bind(&g, &cond, true)?;
    let xv = g.constant(
        vec![b, cfg.tokens, cfg.token_dim],
        x_t.iter().map(|&v| T::lit(v)).collect(),
    )?;
    let ll = match model.graph_log_likelihood(&bound, &cond, xv) {
        Ok(ll) => ll,
        Err(FlowError::NonFinite { .. }) => return Err(offending_t(model, x_t, t, y)),
        Err(e) => return Err(e.into()),
    };
    let weights: Vec<T> = t
        .iter()
        .map(|&ti| T::lit(-gamma_scale * ti / (dim * b) as f64))
        .collect();
    let w = g.constant(vec![b], weights)?;
    let loss = ll.mul(w)?.sum();
    let value = loss.item().to_f64_lossless();
    if !value.is_finite() {
        return Err(offending_t(model, x_t, t, y));
    }
    let nats_per_dim = -ll.value().iter().map(|v| v.to_f64_lossless()).sum::<f64>() / (dim * b) as f64;
    let grads = g.gradient(loss, &bound.vars)?;
    Ok(LossOutput {
        loss: value,
        nats_per_dim,
        grads,
    })
}

fn offending_t<T: Real>(model: &FlowStack<T>, x_t: &[f64], t: &[f64], y: &[ClassId]) -> TrainError {
    let dim = model.config().total_dim();
    for (i, &ti) in t.iter().enumerate() {
        let ok = model
            .log_likelihood_batch(&x_t[i * dim..(i + 1) * dim], &[ti], &[y[i]])
            .map(|v| v[0].is_finite())
            .unwrap_or(false);
        if !ok {
            return TrainError::NonFiniteLoss { t: ti };
        }
    }
    TrainError::NonFiniteLoss { t: f64::NAN }
}

/// Weighted loss for already-noised inputs.
pub fn loss_on_noised<T: Real>(
    model: &FlowStack<T>,
    x_t: &[f64],
    t: &[f64],
    y: &[ClassId],
    gamma_scale: f64,
) -> Result<f64> {
    let cfg = model.config();
    let ll = match model.log_likelihood_batch(x_t, t, y) {
        Ok(ll) => ll,
        Err(FlowError::NonFinite { .. }) => return Err(offending_t(model, x_t, t, y)),
        Err(e) => return Err(e.into()),
    };
    let dim = cfg.total_dim() as f64;
    let b = t.len() as f64;
    let value: f64 = ll.iter().zip(t).map(|(l, ti)| -gamma_scale * ti * l / (dim * b)).sum();
    if !value.is_finite() {
        return Err(offending_t(model, x_t, t, y));
    }
    Ok(value)
}

/// Noise, label dropout and weighting applied to a clean batch, drawn from `rng`.
pub fn corrupt_batch(
    batch: &Batch,
    dim: usize,
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> (Vec<f64>, Vec<f64>, Vec<ClassId>) {
    let spec = config.noise();
    let n = batch.y.len();
    let mut x_t = Vec::with_capacity(batch.x.len());
    let mut t = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let ti = spec.draw_t(rng);
        for &v in &batch.x[i * dim..(i + 1) * dim] {
            let e: f64 = rng.sample(StandardNormal);
            x_t.push(v + ti * e);
        }
        t.push(ti);
        let drop = rng.random::<f64>() < config.label_dropout;
        y.push(if drop { None } else { batch.y[i] });
    }
    (x_t, t, y)
}

/// Loss of a clean batch under a fresh noise and label-dropout draw.
pub fn loss<T: Real>(model: &FlowStack<T>, batch: &Batch, config: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<f64> {
    if batch.y.is_empty() {
        return Err(TrainError::Config("empty batch".into()));
    }
    let (x_t, t, y) = corrupt_batch(batch, model.config().total_dim(), config, rng);
    loss_on_noised(model, &x_t, &t, &y, config.gamma_scale)
}

#[cfg(test)]
mod tests;
