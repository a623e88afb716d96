use super::{Graph, Real, Result, Tensor, TensorError, Var};

/// A scalar-valued map that can be evaluated at any precision.
pub trait Differentiable {
    fn eval<'g, T: Real>(&self, x: Var<'g, T>) -> Result<Var<'g, T>>;
}

/// Largest relative disagreement between the reverse-mode gradient of `f`
/// at `x` (computed in precision `T`) and central differences with the given
/// `step` (always computed in `f64`):
/// `max_i |analytic_i - fd_i| / (|fd_i| + 1e-8)`.
pub fn finite_difference_check<T: Real, F: Differentiable>(f: &F, x: &Tensor<f64>, step: f64) -> Result<f64> {
    if step <= 0.0 || !step.is_finite() {
        return Err(TensorError::InvalidArgument {
            op: "finite_difference_check",
            detail: format!("step must be positive, got {step}"),
        });
    }
    let analytic = {
        let g = Graph::<T>::new();
        let xv = g.leaf(&x.cast::<T>().with_grad());
        let y = f.eval(xv)?;
        g.gradient(y, &[xv])?.remove(0)
    };
    let eval_at = |data: Vec<f64>| -> Result<f64> {
        let g = Graph::<f64>::new();
        let xv = g.constant(x.shape().to_vec(), data)?;
        let y = f.eval(xv)?;
        if y.numel() != 1 {
            return Err(TensorError::NonScalar(y.shape()));
        }
        Ok(y.item())
    };
    let mut worst = 0.0f64;
    for (i, a) in analytic.iter().enumerate() {
        let mut plus = x.data().to_vec();
        let mut minus = x.data().to_vec();
        plus[i] += step;
        minus[i] -= step;
        let fd = (eval_at(plus)? - eval_at(minus)?) / (2.0 * step);
        let rel = (a.to_f64_lossless() - fd).abs() / (fd.abs() + 1e-8);
        worst = worst.max(rel);
    }
    Ok(worst)
}
