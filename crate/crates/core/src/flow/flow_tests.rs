use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::*;
use crate::oracle::{block_jacobian_logdet, stack_jacobian_logdet};

fn config(tokens: usize, dim: usize, blocks: usize) -> FlowConfig {
    FlowConfig {
        tokens,
        token_dim: dim,
        layers: vec![1; blocks],
        width: 16,
        heads: 2,
        mlp_ratio: 2,
        time_dim: 8,
        num_classes: 3,
    }
}

fn random_seq(rng: &mut ChaCha8Rng, tokens: usize, dim: usize) -> TokenSequence {
    let data = (0..tokens * dim).map(|_| rng.sample(StandardNormal)).collect();
    TokenSequence::new(tokens, dim, data).unwrap()
}

#[test]
fn identity_block_and_stack() {
    let m = FlowStack::<f32>::new(config(3, 2, 3), 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = random_seq(&mut rng, 3, 2);
    let (z, nls) = m.block_forward(0, &x, 0.2, Some(1)).unwrap();
    assert!(z.max_abs_diff(&x) < 1e-6);
    assert_eq!(nls, 0.0);
    assert!(m.block_inverse(0, &z, 0.2, Some(1)).unwrap().max_abs_diff(&x) < 1e-6);
    // Three blocks, two flips: the net permutation is the identity.
    let (z, ld) = m.stack_forward(&x, 0.2, None).unwrap();
    assert!(z.max_abs_diff(&x) < 1e-6);
    assert_eq!(ld, 0.0);
    let m2 = FlowStack::<f32>::new(config(3, 2, 2), 1).unwrap();
    let (z, _) = m2.stack_forward(&x, 0.2, None).unwrap();
    assert!(z.max_abs_diff(&permute(&x)) < 1e-6);
}

#[test]
fn identity_log_likelihood_is_standard_normal() {
    let m = FlowStack::<f64>::new(config(2, 2, 2), 5).unwrap();
    let zero = TokenSequence::zeros(2, 2);
    let ll = m.log_likelihood(&zero, 0.1, Some(0)).unwrap();
    assert!((ll + 2.0 * (2.0 * std::f64::consts::PI).ln()).abs() < 1e-12);
    assert!((ll + 3.675_754_132_818_691).abs() < 1e-9);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..5 {
        let x = random_seq(&mut rng, 2, 2);
        let sq: f64 = x.data().iter().map(|v| v * v).sum();
        let exact = -0.5 * sq - 2.0 * (2.0 * std::f64::consts::PI).ln();
        assert!((m.log_likelihood(&x, 0.3, None).unwrap() - exact).abs() < 1e-5);
    }
}

#[test]
fn identity_score_is_minus_x() {
    let m = FlowStack::<f32>::new(config(4, 1, 2), 2).unwrap();
    let x = TokenSequence::new(4, 1, vec![0.5, -1.25, 2.0, 0.0]).unwrap();
    let s = m.score(&x, 0.4, Some(2)).unwrap();
    for (a, b) in s.data().iter().zip(x.data()) {
        assert_eq!(*a, -*b);
    }
}

#[test]
fn block_round_trip_single_precision() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for seed in 0..5 {
        let m = FlowStack::<f32>::random(config(6, 3, 1), seed, 0.2).unwrap();
        let x = random_seq(&mut rng, 6, 3);
        let (z, _) = m.block_forward(0, &x, 0.05, Some(0)).unwrap();
        let back = m.block_inverse(0, &z, 0.05, Some(0)).unwrap();
        assert!(back.max_abs_diff(&x) < 1e-4, "{}", back.max_abs_diff(&x));
    }
}

#[test]
fn stack_round_trip_four_blocks() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let m = FlowStack::<f32>::random(config(8, 4, 4), 9, 0.2).unwrap();
    let x = random_seq(&mut rng, 8, 4);
    let (z, _) = m.stack_forward(&x, 0.3, Some(1)).unwrap();
    let back = m.stack_inverse(&z, 0.3, Some(1)).unwrap();
    assert!(back.max_abs_diff(&x) < 1e-3);
}

#[test]
fn cached_inverse_equals_naive_bitwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let m = FlowStack::<f32>::random(config(7, 2, 2), 11, 0.3).unwrap();
    for block in 0..2 {
        let z = random_seq(&mut rng, 7, 2);
        let a = m.block_inverse(block, &z, 0.1, Some(2)).unwrap();
        let b = m.block_inverse_naive(block, &z, 0.1, Some(2)).unwrap();
        assert_eq!(a.data(), b.data());
    }
}

#[test]
fn block_logdet_matches_brute_jacobian() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let m = FlowStack::<f64>::random(config(3, 2, 1), 13, 0.3).unwrap();
    let x = random_seq(&mut rng, 3, 2);
    let (_, nls) = m.block_forward(0, &x, 0.2, Some(0)).unwrap();
    let brute = block_jacobian_logdet(&m, 0, &x, 0.2, Some(0)).unwrap();
    assert!(nls.abs() > 1e-3, "head should be non-trivial");
    assert!((nls - brute).abs() < 1e-6, "{nls} vs {brute}");
}

#[test]
fn stack_logdet_matches_brute_jacobian() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let m = FlowStack::<f64>::random(config(3, 2, 2), 17, 0.3).unwrap();
    let x = random_seq(&mut rng, 3, 2);
    let (_, ld) = m.stack_forward(&x, 0.2, Some(1)).unwrap();
    let brute = stack_jacobian_logdet(&m, &x, 0.2, Some(1)).unwrap();
    assert!((ld - brute).abs() < 1e-5, "{ld} vs {brute}");
}

#[test]
fn affine_params_are_causal_bitwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let m = FlowStack::<f32>::random(config(8, 2, 1), 19, 0.3).unwrap();
    let x = random_seq(&mut rng, 8, 2);
    let base = m.block_affine_params(0, &x, 0.2, Some(0)).unwrap();
    for pos in 0..8 {
        let mut data = x.data().to_vec();
        data[pos * 2] += 0.75;
        data[pos * 2 + 1] -= 0.5;
        let y = TokenSequence::new(8, 2, data).unwrap();
        let p = m.block_affine_params(0, &y, 0.2, Some(0)).unwrap();
        for n in 0..=pos {
            assert_eq!(p.mu.token(n), base.mu.token(n), "μ at {n} after perturbing {pos}");
            assert_eq!(p.log_sigma.token(n), base.log_sigma.token(n));
        }
        if pos + 1 < 8 {
            assert_ne!(p.mu.token(pos + 1), base.mu.token(pos + 1));
        }
    }
}

#[test]
fn extra_flip_pair_is_neutral() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let m = FlowStack::<f64>::random(config(4, 2, 2), 23, 0.3).unwrap();
    let x = random_seq(&mut rng, 4, 2);
    let (z0, ld0) = m.block_forward(0, &x, 0.2, None).unwrap();
    let h = permute(&permute(&permute(&z0)));
    let (z1, ld1) = m.block_forward(1, &h, 0.2, None).unwrap();
    let sq: f64 = z1.data().iter().map(|v| v * v).sum();
    let ll = -0.5 * sq - 4.0 * (2.0 * std::f64::consts::PI).ln() + ld0 + ld1;
    assert!((ll - m.log_likelihood(&x, 0.2, None).unwrap()).abs() < 1e-6);
}

#[test]
fn score_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let m = FlowStack::<f64>::random(config(3, 2, 2), 29, 0.3).unwrap();
    let x = random_seq(&mut rng, 3, 2);
    let s = m.score(&x, 0.25, Some(2)).unwrap();
    let h = 1e-5;
    for i in 0..6 {
        let mut p = x.data().to_vec();
        let mut q = x.data().to_vec();
        p[i] += h;
        q[i] -= h;
        let lp = m
            .log_likelihood(&TokenSequence::new(3, 2, p).unwrap(), 0.25, Some(2))
            .unwrap();
        let lq = m
            .log_likelihood(&TokenSequence::new(3, 2, q).unwrap(), 0.25, Some(2))
            .unwrap();
        let fd = (lp - lq) / (2.0 * h);
        assert!(
            (fd - s.data()[i]).abs() / (fd.abs() + 1e-8) < 1e-3,
            "{fd} vs {}",
            s.data()[i]
        );
    }
}

#[test]
fn batch_matches_single() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let m = FlowStack::<f64>::random(config(2, 2, 2), 31, 0.3).unwrap();
    let a = random_seq(&mut rng, 2, 2);
    let b = random_seq(&mut rng, 2, 2);
    let flat: Vec<f64> = a.data().iter().chain(b.data()).copied().collect();
    let ll = m.log_likelihood_batch(&flat, &[0.1, 0.4], &[Some(0), None]).unwrap();
    assert!((ll[0] - m.log_likelihood(&a, 0.1, Some(0)).unwrap()).abs() < 1e-12);
    assert!((ll[1] - m.log_likelihood(&b, 0.4, None).unwrap()).abs() < 1e-12);
}

#[test]
fn class_changes_likelihood() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let m = FlowStack::<f32>::random(config(3, 1, 2), 37, 0.3).unwrap();
    let mut differ = 0;
    for _ in 0..100 {
        let x = random_seq(&mut rng, 3, 1);
        let a = m.log_likelihood(&x, 0.2, Some(0)).unwrap();
        let b = m.log_likelihood(&x, 0.2, Some(1)).unwrap();
        differ += usize::from(a != b);
    }
    assert!(differ >= 99);
}

#[test]
fn errors_are_reported() {
    let mut m = FlowStack::<f32>::random(config(3, 1, 2), 41, 0.3).unwrap();
    let x = TokenSequence::new(3, 1, vec![0.1, 0.2, 0.3]).unwrap();
    assert!(matches!(
        m.log_likelihood(&x, 0.2, Some(3)),
        Err(FlowError::Class { class: 3, .. })
    ));
    assert!(matches!(m.log_likelihood(&x, 0.0, None), Err(FlowError::NoiseLevel(_))));
    let wrong = TokenSequence::zeros(2, 1);
    assert!(matches!(
        m.stack_forward(&wrong, 0.2, None),
        Err(FlowError::Shape { .. })
    ));
    m.find_mut("block1.head.bias").unwrap().data_mut()[0] = f32::NAN;
    match m.stack_forward(&x, 0.2, None) {
        Err(FlowError::NonFinite { block, .. }) => assert_eq!(block, 1),
        other => panic!("expected a non-finite error, got {other:?}"),
    }
    match m.stack_inverse(&x, 0.2, None) {
        Err(FlowError::NonFinite { block, token, .. }) => {
            assert_eq!(block, 1);
            assert_eq!(token, Some(0));
        }
        other => panic!("expected a non-finite error, got {other:?}"),
    }
}
