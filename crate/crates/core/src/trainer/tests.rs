use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::*;
use crate::oracle::ks_statistic;

/// Labelled 1D two-component mixture; the label is the component.
struct TwoGaussians;

impl Dataset for TwoGaussians {
    fn tokens(&self) -> usize {
        1
    }
    fn token_dim(&self) -> usize {
        1
    }
    fn num_classes(&self) -> usize {
        2
    }
    fn len(&self) -> usize {
        1024
    }
    fn example(&self, _: usize, rng: &mut ChaCha8Rng, out: &mut [f64]) -> Option<usize> {
        let k = usize::from(rng.random::<f64>() < 0.6);
        let (m, s) = [(-1.0, 0.2), (1.0, 0.3)][k];
        out[0] = m + s * rng.sample::<f64, _>(StandardNormal);
        Some(k)
    }
}

fn tiny_config() -> TrainConfig {
    TrainConfig {
        batch_size: 32,
        epochs: 2,
        steps_per_epoch: 5,
        arch: ArchPreset::tiny(),
        seed: 7,
        lr: LrSchedule { base: 1e-6, peak: 1e-3 },
        ..TrainConfig::new(0.5)
    }
}

#[test]
fn injected_zero_noise_is_identity() {
    let x = TokenSequence::new(2, 2, vec![0.1, -0.2, 0.3, 0.4]).unwrap();
    let x_t = noise_draw_with(&x, 0.01, &[0.0; 4]).unwrap();
    assert_eq!(x_t, x);
}

#[test]
fn noise_variance_at_fixed_level() {
    let spec = NoiseSpec::new(0.5, 0.5 + 1e-12).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = TokenSequence::zeros(1, 1);
    let n = 100_000;
    let mut sum = 0.0;
    let mut sq = 0.0;
    for _ in 0..n {
        let (x_t, _) = noise_draw(&x, &spec, &mut rng).unwrap();
        let d = x_t.data()[0];
        sum += d;
        sq += d * d;
    }
    let var = sq / n as f64 - (sum / n as f64).powi(2);
    assert!((var - 0.25).abs() < 0.01, "{var}");
}

#[test]
fn noise_levels_are_uniform() {
    let spec = NoiseSpec::new(0.01, 0.5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = TokenSequence::zeros(2, 1);
    let t: Vec<f64> = (0..100_000)
        .map(|_| noise_draw(&x, &spec, &mut rng).unwrap().1)
        .collect();
    assert!(t.iter().all(|&v| (0.01..=0.5).contains(&v)));
    let ks = ks_statistic(&t, |v| ((v - 0.01) / 0.49).clamp(0.0, 1.0));
    assert!(ks < 0.01, "{ks}");
}

#[test]
fn noise_spec_validation() {
    assert!(NoiseSpec::new(0.0, 0.5).is_err());
    assert!(NoiseSpec::new(0.5, 0.5).is_err());
    assert!(NoiseSpec::new(0.01, 0.3).is_ok());
}

#[test]
fn schedule_endpoints() {
    assert_eq!(lr_at(0, 1000, 100), 1e-6);
    assert!((lr_at(100, 1000, 100) - 1e-4).abs() < 1e-18);
    assert!((lr_at(1000, 1000, 100) - 1e-6).abs() < 1e-12);
    assert!((lr_at(50, 1000, 100) - (1e-6 + 0.5 * (1e-4 - 1e-6))).abs() < 1e-18);
    let mid = lr_at(550, 1000, 100);
    assert!((mid - (1e-6 + 1e-4) / 2.0).abs() < 1e-15);
    for s in 100..1000 {
        assert!(lr_at(s + 1, 1000, 100) <= lr_at(s, 1000, 100));
    }
}

#[test]
fn identity_loss_at_origin() {
    let cfg = ArchPreset::tiny().flow_config(2, 2, 1);
    let m = FlowStack::<f32>::new(cfg, 0).unwrap();
    let v = loss_on_noised(&m, &[0.0; 8], &[1.0, 1.0], &[Some(0), None], 1.0).unwrap();
    assert!((v - 0.918_938_533).abs() < 1e-6, "{v}");
}

#[test]
fn loss_is_linear_in_gamma() {
    let cfg = ArchPreset::tiny().flow_config(3, 1, 2);
    let m = FlowStack::<f32>::random(cfg, 1, 0.2).unwrap();
    let x = [0.3, -0.1, 0.8, 1.2, 0.0, -0.7];
    let t = [0.2, 0.45];
    let y = [Some(1), None];
    let a = loss_on_noised(&m, &x, &t, &y, 1.0).unwrap();
    let b = loss_on_noised(&m, &x, &t, &y, 2.0).unwrap();
    assert!((b - 2.0 * a).abs() <= 1e-6 * a.abs());
    let g = loss_gradient(&m, &x, &t, &y, 1.0).unwrap();
    assert!((g.loss - a).abs() < 1e-6);
}

#[test]
fn loss_gradient_matches_finite_differences() {
    let arch = ArchPreset {
        layers: vec![1, 1],
        width: 8,
        heads: 2,
        mlp_ratio: 2,
        time_dim: 4,
    };
    let m = FlowStack::<f64>::random(arch.flow_config(3, 2, 2), 3, 0.3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x: Vec<f64> = (0..12).map(|_| rng.sample(StandardNormal)).collect();
    let t = [0.1, 0.4];
    let y = [Some(0), Some(1)];
    let out = loss_gradient(&m, &x, &t, &y, 1.0).unwrap();
    let h = 1e-6;
    let mut checked = 0;
    for (pi, p) in m.params().iter().enumerate() {
        // A few entries of every tensor keeps the check fast.
        for j in (0..p.tensor.len()).step_by(p.tensor.len().div_ceil(3)) {
            let eval = |delta: f64| {
                let mut mm = m.clone();
                mm.params_mut()[pi].tensor.data_mut()[j] += delta;
                loss_on_noised(&mm, &x, &t, &y, 1.0).unwrap()
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let a = out.grads[pi][j];
            let err = (a - fd).abs() / (fd.abs() + 1e-8);
            assert!(err < 1e-3 || (a - fd).abs() < 1e-9, "{} [{j}]: {a} vs {fd}", p.name);
            checked += 1;
        }
    }
    assert!(checked > 40);
}

#[test]
fn batch_loss_requires_examples() {
    let cfg = ArchPreset::tiny().flow_config(1, 1, 1);
    let m = FlowStack::<f32>::new(cfg, 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let empty = Batch { x: vec![], y: vec![] };
    assert!(loss(&m, &empty, &TrainConfig::new(0.5), &mut rng).is_err());
    let one = Batch {
        x: vec![0.2],
        y: vec![Some(0)],
    };
    assert!(loss(&m, &one, &TrainConfig::new(0.5), &mut rng).unwrap().is_finite());
}

#[test]
fn config_validation() {
    let mut c = TrainConfig::new(0.5);
    assert!(c.validate().is_ok());
    c.t_max = 0.005;
    assert!(c.validate().is_err());
    let mut c = TrainConfig::new(0.5);
    c.label_dropout = 1.5;
    assert!(c.validate().is_err());
    c.label_dropout = 1.0;
    assert!(c.validate().is_ok());
}

struct Recorder {
    rows: Vec<MetricsRow>,
    states: Vec<TrainState>,
}

impl TrainObserver for Recorder {
    fn metrics(&mut self, row: &MetricsRow) -> Result<()> {
        self.rows.push(row.clone());
        Ok(())
    }
    fn checkpoint(&mut self, state: &TrainState) -> Result<()> {
        self.states.push(state.clone());
        Ok(())
    }
}

fn recorder() -> Recorder {
    Recorder {
        rows: vec![],
        states: vec![],
    }
}

#[test]
fn training_is_reproducible() {
    let cfg = tiny_config();
    let mut a = recorder();
    let mut b = recorder();
    let sa = train(&cfg, &TwoGaussians, &mut a, None).unwrap();
    let sb = train(&cfg, &TwoGaussians, &mut b, None).unwrap();
    assert_eq!(sa.model.params(), sb.model.params());
    assert_eq!(sa.optimizer, sb.optimizer);
    assert_eq!(a.rows, b.rows);
    assert_eq!(a.rows.len(), 10);
    assert_eq!(a.rows[0].lr, 1e-6);
    assert!(a.rows.iter().all(|r| r.wallclock_ms == 0));
    assert_eq!(a.rows[9].epoch, 1);
}

#[test]
fn resumed_run_matches_uninterrupted() {
    let cfg = TrainConfig {
        checkpoint_every: 4,
        ..tiny_config()
    };
    let mut full = recorder();
    let end = train(&cfg, &TwoGaussians, &mut full, None).unwrap();
    let mid = full.states[0].clone();
    assert_eq!(mid.step, 4);
    let mut rest = recorder();
    let resumed = train(&cfg, &TwoGaussians, &mut rest, Some(mid)).unwrap();
    assert_eq!(resumed.model.params(), end.model.params());
    assert_eq!(rest.rows[..], full.rows[4..]);
}

#[test]
fn zero_epochs_keeps_identity_model() {
    let cfg = TrainConfig {
        epochs: 0,
        ..tiny_config()
    };
    let s = train(&cfg, &TwoGaussians, &mut (), None).unwrap();
    assert_eq!(s.step, 0);
    let x = TokenSequence::new(1, 1, vec![0.4]).unwrap();
    assert_eq!(s.model.stack_forward(&x, 0.1, None).unwrap().1, 0.0);
}

#[test]
fn full_label_dropout_leaves_classes_unused() {
    let cfg = TrainConfig {
        label_dropout: 1.0,
        epochs: 4,
        ..tiny_config()
    };
    let s = train(&cfg, &TwoGaussians, &mut (), None).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..20 {
        let x = TokenSequence::new(1, 1, vec![rng.sample(StandardNormal)]).unwrap();
        let c = s.model.log_likelihood(&x, 0.2, Some(1)).unwrap();
        let u = s.model.log_likelihood(&x, 0.2, None).unwrap();
        assert!((c - u).abs() < 1e-2);
    }
}
