use nalgebra::DMatrix;

use super::{OracleError, Result};
use crate::autodiff::{Graph, Var};
use crate::flow::{ClassId, FlowStack, TokenSequence};

/// Largest dimension accepted by [`brute_jacobian_logdet`].
pub const MAX_JACOBIAN_DIM: usize = 16;

/// `log|det ∂f/∂x|` at `x` from the full Jacobian: one reverse pass per
/// output coordinate, then a pivoted LU factorization.
pub fn brute_jacobian_logdet<F>(map: F, x: &[f64]) -> Result<f64>
where
    F: for<'g> Fn(Var<'g, f64>) -> Result<Var<'g, f64>>,
{
    let dim = x.len();
    if dim > MAX_JACOBIAN_DIM {
        return Err(OracleError::TooLarge(dim));
    }
    let g = Graph::<f64>::new();
    let xv = g.variable(vec![dim], x.to_vec())?;
    let out = map(xv)?;
    if out.numel() != dim {
        return Err(OracleError::NotSquare {
            inputs: dim,
            outputs: out.numel(),
        });
    }
    let flat = out.reshape(vec![dim])?;
    let mut jac = DMatrix::<f64>::zeros(dim, dim);
    for i in 0..dim {
        let yi = flat.slice(0, i, i + 1)?.sum();
        let row = g.gradient(yi, &[xv])?.remove(0);
        for (j, v) in row.into_iter().enumerate() {
            jac[(i, j)] = v;
        }
    }
    let lu = jac.lu();
    let u = lu.u();
    let log_det: f64 = (0..dim).map(|i| u[(i, i)].abs().ln()).sum();
    if !(log_det > 1e-300f64.ln()) {
        return Err(OracleError::Singular(log_det));
    }
    Ok(log_det)
}

/// Brute-force log-determinant of the whole stack at `x`.
pub fn stack_jacobian_logdet(model: &FlowStack<f64>, x: &TokenSequence, t: f64, y: ClassId) -> Result<f64> {
    let cond = model.conditioning(&[t], &[y])?;
    let cfg = model.config();
    let shape = vec![1, cfg.tokens, cfg.token_dim];
    brute_jacobian_logdet(
        |xv| {
            let bound = model.bind(xv.graph(), &cond, false)?;
            let (z, _) = model.graph_stack(&bound, &cond, xv.reshape(shape.clone())?)?;
            Ok(z)
        },
        x.data(),
    )
}

/// Brute-force log-determinant of a single block at `x`.
pub fn block_jacobian_logdet(
    model: &FlowStack<f64>,
    block: usize,
    x: &TokenSequence,
    t: f64,
    y: ClassId,
) -> Result<f64> {
    let cond = model.conditioning(&[t], &[y])?;
    let cfg = model.config();
    let shape = vec![1, cfg.tokens, cfg.token_dim];
    brute_jacobian_logdet(
        |xv| {
            let bound = model.bind(xv.graph(), &cond, false)?;
            Ok(model.graph_block(&bound, &cond, block, xv.reshape(shape.clone())?)?.z)
        },
        x.data(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_map_has_zero_logdet() {
        let v = brute_jacobian_logdet(|x| Ok(x), &[0.3, -1.0, 2.0]).unwrap();
        assert!(v.abs() < 1e-15);
    }

    #[test]
    fn diagonal_scaling() {
        let v = brute_jacobian_logdet(
            |x| {
                let s = x.graph().constant(vec![2], vec![2.0, 4.0])?;
                Ok(x.mul(s)?)
            },
            &[1.0, 1.0],
        )
        .unwrap();
        assert!((v - 8f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn nonlinear_map() {
        // f(x) = (x0·x1, x1³): det = x1 · 3x1² = 3x1³.
        let v = brute_jacobian_logdet(
            |x| {
                let a = x.slice(0, 0, 1)?;
                let b = x.slice(0, 1, 2)?;
                let g = x.graph();
                Ok(g.concat(&[a.mul(b)?, b.powf(3.0)?], 0)?)
            },
            &[0.7, 1.3],
        )
        .unwrap();
        assert!((v - (3.0 * 1.3f64.powi(3)).ln()).abs() < 1e-12);
    }

    #[test]
    fn singular_and_oversized_inputs() {
        assert!(matches!(
            brute_jacobian_logdet(|x| Ok(x.scale(0.0)), &[1.0, 2.0]),
            Err(OracleError::Singular(_))
        ));
        let big = vec![0.0; MAX_JACOBIAN_DIM + 1];
        assert!(matches!(
            brute_jacobian_logdet(|x| Ok(x), &big),
            Err(OracleError::TooLarge(_))
        ));
        assert!(matches!(
            brute_jacobian_logdet(|x| Ok(x.sum()), &[1.0, 2.0]),
            Err(OracleError::NotSquare { .. })
        ));
    }
}
