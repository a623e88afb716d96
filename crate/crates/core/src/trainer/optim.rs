use super::{Result, TrainError};
use crate::autodiff::Real;
use crate::flow::NamedTensor;

/// AdamW hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// First and second moments of every parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T: Real = f32> {
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(params: &[NamedTensor<T>]) -> Self {
        Self {
            step: 0,
            m: params.iter().map(|p| vec![T::zero(); p.tensor.len()]).collect(),
            v: params.iter().map(|p| vec![T::zero(); p.tensor.len()]).collect(),
        }
    }

    /// Moments must mirror the parameter shapes.
    pub fn matches(&self, params: &[NamedTensor<T>]) -> bool {
        self.m.len() == params.len()
            && self.v.len() == params.len()
            && params
                .iter()
                .zip(self.m.iter().zip(&self.v))
                .all(|(p, (m, v))| m.len() == p.tensor.len() && v.len() == p.tensor.len())
    }
}

/// One AdamW update. Weight decay is decoupled and applied before the
/// bias-corrected adaptive step: `θ ← θ(1 − lr·wd) − lr·m̂ / (√v̂ + eps)`.
pub fn optimizer_step<T: Real>(
    params: &mut [NamedTensor<T>],
    grads: &[Vec<T>],
    state: &mut OptimizerState<T>,
    lr: f64,
    opt: &AdamW,
) -> Result<()> {
    if grads.len() != params.len() || !state.matches(params) {
        return Err(TrainError::Optimizer(format!(
            "{} parameters, {} gradients, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    if let Some((p, g)) = params.iter().zip(grads).find(|(p, g)| p.tensor.len() != g.len()) {
        return Err(TrainError::Optimizer(format!(
            "gradient for {} has {} entries, expected {}",
            p.name,
            g.len(),
            p.tensor.len()
        )));
    }
    state.step += 1;
    let t = state.step as f64;
    let c1 = T::lit(1.0 - opt.beta1.powf(t));
    let c2 = T::lit(1.0 - opt.beta2.powf(t));
    let (b1, b2) = (T::lit(opt.beta1), T::lit(opt.beta2));
    let (one, lr_t, eps) = (T::one(), T::lit(lr), T::lit(opt.eps));
    let decay = T::lit(1.0 - lr * opt.weight_decay);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, w) in p.tensor.data_mut().iter_mut().enumerate() {
            let gj = g[j];
            m[j] = b1 * m[j] + (one - b1) * gj;
            v[j] = b2 * v[j] + (one - b2) * gj * gj;
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            *w = *w * decay - lr_t * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
