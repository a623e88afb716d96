//! Invariant checks on a checkpoint.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use itarflow::flow::TokenSequence;
use itarflow::io::Checkpoint;
use itarflow::oracle::{stack_jacobian_logdet, MAX_JACOBIAN_DIM};

use crate::CliError;

const ROUND_TRIP_TOL: f64 = 1e-3;
const LOGDET_TOL: f64 = 1e-5;
const SCORE_TOL: f64 = 1e-3;
/// Coordinates and positions probed on large models.
const PROBES: usize = 16;

struct Check {
    name: &'static str,
    pass: bool,
    detail: String,
}

fn normal(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

pub fn run(path: &Path, seed: u64) -> Result<(), CliError> {
    let ckpt = Checkpoint::load(path)?;
    let checks = checks(&ckpt, seed)?;
    let mut failed = 0;
    for c in &checks {
        println!("{} {:<18} {}", if c.pass { "PASS" } else { "FAIL" }, c.name, c.detail);
        failed += usize::from(!c.pass);
    }
    if failed > 0 {
        return Err(CliError {
            code: 3,
            message: format!("{failed} of {} checks failed", checks.len()),
        });
    }
    println!("all {} checks pass", checks.len());
    Ok(())
}

fn checks(ckpt: &Checkpoint, seed: u64) -> Result<Vec<Check>, CliError> {
    let model = &ckpt.model;
    let wide = model.cast::<f64>();
    let cfg = model.config().clone();
    let (n, d) = (cfg.tokens, cfg.token_dim);
    let dim = cfg.total_dim();
    let t_max = ckpt.meta_f64("t_max").unwrap_or(0.5);
    let t_min = ckpt.meta_f64("t_min").unwrap_or(0.01);
    let levels = [t_min, 0.5 * (t_min + t_max), t_max];
    let classes: Vec<Option<usize>> = if cfg.num_classes > 0 {
        vec![None, Some(0)]
    } else {
        vec![None]
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    let mut worst = 0.0f64;
    for &t in &levels {
        for &y in &classes {
            let x = TokenSequence::new(n, d, normal(&mut rng, dim))?;
            let (z, _) = model.stack_forward(&x, t, y)?;
            worst = worst.max(model.stack_inverse(&z, t, y)?.max_abs_diff(&x));
        }
    }
    out.push(Check {
        name: "round trip",
        pass: worst < ROUND_TRIP_TOL,
        detail: format!("max |inverse(forward(x)) - x| = {worst:.3e} (tol {ROUND_TRIP_TOL:e})"),
    });

    let z = TokenSequence::new(n, d, normal(&mut rng, dim))?;
    let mut same = true;
    for b in 0..cfg.num_blocks() {
        same &=
            model.block_inverse(b, &z, t_max, classes[0])? == model.block_inverse_naive(b, &z, t_max, classes[0])?;
    }
    out.push(Check {
        name: "cached inverse",
        pass: same,
        detail: format!(
            "cached and from-scratch inverses bitwise equal on {} blocks: {same}",
            cfg.num_blocks()
        ),
    });

    let x = TokenSequence::new(n, d, normal(&mut rng, dim))?;
    let log_det = model.stack_forward(&x, t_max, classes[0])?.1 + 0.0;
    if dim <= MAX_JACOBIAN_DIM {
        let (_, ld) = wide.stack_forward(&x, t_max, classes[0])?;
        let brute = stack_jacobian_logdet(&wide, &x, t_max, classes[0])?;
        let err = (ld - brute).abs();
        out.push(Check {
            name: "jacobian",
            pass: err < LOGDET_TOL,
            detail: format!("log_det = {log_det:.6}, brute force {brute:.6}, |diff| = {err:.3e} (tol {LOGDET_TOL:e})"),
        });
    } else {
        let mut h = x.clone();
        let mut total = 0.0;
        for b in 0..cfg.num_blocks() {
            let (z, ld) = wide.block_forward(b, &h, t_max, classes[0])?;
            total += ld;
            h = if b + 1 < cfg.num_blocks() {
                itarflow::flow::permute(&z)
            } else {
                z
            };
        }
        let (_, ld) = wide.stack_forward(&x, t_max, classes[0])?;
        let err = (ld - total).abs();
        out.push(Check {
            name: "jacobian",
            pass: err < LOGDET_TOL * dim as f64,
            detail: format!(
                "log_det = {log_det:.6}; dimension {dim} exceeds {MAX_JACOBIAN_DIM}, so checked as the sum of block terms (|diff| = {err:.3e})"
            ),
        });
    }

    let mut violations = 0;
    let x = TokenSequence::new(n, d, normal(&mut rng, dim))?;
    for b in 0..cfg.num_blocks() {
        let base = model.block_affine_params(b, &x, t_max, classes[0])?;
        for m in (0..n).take(PROBES) {
            let mut data = x.data().to_vec();
            for v in &mut data[m * d..(m + 1) * d] {
                *v += 1.0;
            }
            let p = model.block_affine_params(b, &TokenSequence::new(n, d, data)?, t_max, classes[0])?;
            for k in 0..=m {
                if p.mu.token(k) != base.mu.token(k) || p.log_sigma.token(k) != base.log_sigma.token(k) {
                    violations += 1;
                }
            }
        }
    }
    out.push(Check {
        name: "causality",
        pass: violations == 0,
        detail: format!("{violations} positions changed by a perturbation at or after them"),
    });

    let x: Vec<f64> = normal(&mut rng, dim).iter().map(|v| v * t_max).collect();
    let t = levels[1];
    let y = *classes.last().unwrap();
    let s = wide.score_batch(&x, &[t], &[y])?;
    let ll = |v: &[f64]| wide.log_likelihood_batch(v, &[t], &[y]).map(|r| r[0]);
    let h = 1e-5;
    let (mut err, mut norm) = (0.0, 0.0);
    for i in (0..dim).take(PROBES) {
        let (mut a, mut b) = (x.clone(), x.clone());
        a[i] += h;
        b[i] -= h;
        let fd = (ll(&a)? - ll(&b)?) / (2.0 * h);
        err += (s[i] - fd) * (s[i] - fd);
        norm += fd * fd;
    }
    let rel = if norm > 0.0 { (err / norm).sqrt() } else { err.sqrt() };
    out.push(Check {
        name: "score",
        pass: rel < SCORE_TOL,
        detail: format!("relative error vs finite differences {rel:.3e} (tol {SCORE_TOL:e})"),
    });
    Ok(out)
}
