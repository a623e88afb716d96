use itarflow::autodiff::{finite_difference_check, Differentiable, Graph, Real, Result, Tensor, Var};
use proptest::prelude::*;

type R<'g, T> = Result<Var<'g, T>>;

/// Broadcast residual block: sum(layer_norm(x @ w + b) * gelu(x)).
struct Block {
    w: Vec<f64>,
    b: Vec<f64>,
}

impl Differentiable for Block {
    fn eval<'g, T: Real>(&self, x: Var<'g, T>) -> R<'g, T> {
        let g = x.graph();
        let lit = |v: &[f64]| v.iter().map(|&a| T::lit(a)).collect::<Vec<_>>();
        let w = g.constant(vec![3, 3], lit(&self.w))?;
        let b = g.constant(vec![3], lit(&self.b))?;
        let h = x.matmul(w)?.add(b)?;
        let gamma = g.constant(vec![3], lit(&[1.0, 0.5, 2.0]))?;
        let beta = g.constant(vec![3], lit(&[0.0, 0.1, -0.2]))?;
        let n = h.layer_norm(gamma, beta, 1, T::lit(1e-5))?;
        Ok(n.mul(x.gelu())?.sum())
    }
}

/// Attention-like map: sum(softmax(x x^T, axis 1) @ tanh(x)).
struct Attend;

impl Differentiable for Attend {
    fn eval<'g, T: Real>(&self, x: Var<'g, T>) -> R<'g, T> {
        let scores = x.matmul(x.transpose()?)?.scale(T::lit(0.5));
        Ok(scores.softmax(1)?.matmul(x.tanh())?.sum())
    }
}

/// Reductions and elementwise division: mean over rows of exp(x) / (1 + x^2).
struct Ratio;

impl Differentiable for Ratio {
    fn eval<'g, T: Real>(&self, x: Var<'g, T>) -> R<'g, T> {
        let den = x.mul(x)?.add_scalar(T::lit(1.0));
        Ok(x.exp().div(den)?.mean_axis(0)?.sum())
    }
}

fn input() -> impl Strategy<Value = Tensor<f64>> {
    prop::collection::vec(-1.5f64..1.5, 12).prop_map(|v| Tensor::new(vec![4, 3], v).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn block_gradient(x in input(), w in prop::collection::vec(-1.0f64..1.0, 9), b in prop::collection::vec(-0.5f64..0.5, 3)) {
        let err = finite_difference_check::<f64, _>(&Block { w, b }, &x, 1e-5).unwrap();
        prop_assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn attention_gradient(x in input()) {
        let err = finite_difference_check::<f64, _>(&Attend, &x, 1e-5).unwrap();
        prop_assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn ratio_gradient(x in input()) {
        let err = finite_difference_check::<f64, _>(&Ratio, &x, 1e-5).unwrap();
        prop_assert!(err < 1e-5, "relative error {err}");
    }
}

#[test]
fn single_precision_gradients_agree_loosely() {
    let x = Tensor::new(vec![4, 3], (0..12).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
    assert!(finite_difference_check::<f32, _>(&Attend, &x, 1e-4).unwrap() < 1e-2);
}

#[test]
fn gradient_of_shared_subexpressions_accumulates() {
    let g = Graph::<f64>::new();
    let x = g.leaf(&Tensor::new(vec![2], vec![0.5, -2.0]).unwrap().with_grad());
    let y = x.mul(x).unwrap().add(x).unwrap().sum();
    let grad = g.gradient(y, &[x]).unwrap().remove(0);
    assert_eq!(grad, vec![2.0, -3.0]);
}
