//! Browser demo: the noised 1-D mixture, denoising with its exact score, and
//! a small flow trained in the page.

use wasm_bindgen::prelude::*;

use itarflow::eval::{self, MixtureTarget};
use itarflow::io::{gmm1d_mixture, MixtureData};
use itarflow::oracle::{energy_distance, gmm_logpdf_noised, gmm_score_noised};
use itarflow::sampler::{MixtureScore, SampleRequest};
use itarflow::trainer::{
    train_for, ArchPreset, LrSchedule, MetricsRow, TrainConfig, TrainError, TrainObserver, TrainState,
};

/// Plot range of every curve and histogram.
pub const X_RANGE: (f64, f64) = (-2.5, 2.5);
const TRAIN_T_MAX: f64 = 0.5;

fn err(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

fn target() -> MixtureTarget {
    MixtureTarget::new(gmm1d_mixture(), true)
}

/// `n` evenly spaced points over [`X_RANGE`].
#[wasm_bindgen]
pub fn grid(n: usize) -> Vec<f64> {
    let (lo, hi) = X_RANGE;
    (0..n)
        .map(|i| lo + (hi - lo) * i as f64 / (n.max(2) - 1) as f64)
        .collect()
}

/// Density of the mixture blurred to noise level `t`, on [`grid`].
#[wasm_bindgen]
pub fn noised_density(t: f64, n: usize) -> Vec<f64> {
    let m = gmm1d_mixture();
    grid(n).iter().map(|&x| gmm_logpdf_noised(&[x], t, &m).exp()).collect()
}

/// Exact score of the noised mixture on [`grid`].
#[wasm_bindgen]
pub fn noised_score(t: f64, n: usize) -> Vec<f64> {
    let m = gmm1d_mixture();
    grid(n).iter().map(|&x| gmm_score_noised(&[x], t, &m)[0]).collect()
}

/// Normalized histogram of `values` over [`X_RANGE`].
pub fn histogram(values: &[f64], bins: usize) -> Vec<f64> {
    let (lo, hi) = X_RANGE;
    let width = (hi - lo) / bins as f64;
    let mut h = vec![0.0; bins];
    for &v in values {
        let i = ((v - lo) / width).floor();
        if i >= 0.0 && (i as usize) < bins {
            h[i as usize] += 1.0;
        }
    }
    let scale = 1.0 / (values.len().max(1) as f64 * width);
    h.iter_mut().for_each(|c| *c *= scale);
    h
}

/// Noisy draws at `t` denoised by the ODE and by one Tweedie step, both with
/// the exact score, against clean data.
#[wasm_bindgen]
pub struct DenoiseReport {
    noisy: Vec<f64>,
    ode: Vec<f64>,
    tweedie: Vec<f64>,
    distances: Vec<f64>,
}

#[wasm_bindgen]
impl DenoiseReport {
    pub fn noisy_hist(&self, bins: usize) -> Vec<f64> {
        histogram(&self.noisy, bins)
    }
    pub fn ode_hist(&self, bins: usize) -> Vec<f64> {
        histogram(&self.ode, bins)
    }
    pub fn tweedie_hist(&self, bins: usize) -> Vec<f64> {
        histogram(&self.tweedie, bins)
    }
    /// Energy distances to clean data: noisy, ODE, Tweedie.
    pub fn distances(&self) -> Vec<f64> {
        self.distances.clone()
    }
}

#[wasm_bindgen]
pub fn denoise(t: f64, steps: usize, n: usize, seed: u64) -> Result<DenoiseReport, JsError> {
    let target = target();
    let exact = MixtureScore {
        mixture: target.mixture.clone(),
    };
    let request = SampleRequest {
        steps: steps.max(1),
        t_min: (0.01f64).min(0.5 * t),
        ..SampleRequest::new(n, t)
    };
    let noisy = target.noised_exact(n, t, seed);
    let ode = eval::denoise(&noisy, &target, &request, &exact).map_err(err)?;
    let tweedie = eval::tweedie(&noisy, &target, t, &exact).map_err(err)?;
    let clean = target.clean(n, seed.wrapping_add(1));
    let distances = [&noisy, &ode, &tweedie]
        .iter()
        .map(|x| energy_distance(x, &clean, 1).map(|e| e.value))
        .collect::<Result<Vec<_>, _>>()
        .map_err(err)?;
    Ok(DenoiseReport {
        noisy,
        ode,
        tweedie,
        distances,
    })
}

struct LastLoss(Vec<f64>);

impl TrainObserver for LastLoss {
    fn metrics(&mut self, row: &MetricsRow) -> Result<(), TrainError> {
        self.0.push(row.loss);
        Ok(())
    }
    fn checkpoint(&mut self, _: &TrainState) -> Result<(), TrainError> {
        Ok(())
    }
}

/// Small class-conditional flow fitted to the mixture a few steps at a time.
#[wasm_bindgen]
pub struct Trainer {
    config: TrainConfig,
    data: MixtureData,
    state: Option<TrainState>,
    losses: Vec<f64>,
}

#[wasm_bindgen]
impl Trainer {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u64, total_steps: usize) -> Trainer {
        let config = TrainConfig {
            arch: ArchPreset::tiny(),
            batch_size: 128,
            epochs: 1,
            steps_per_epoch: total_steps.max(1),
            warmup_steps: Some(20),
            lr: LrSchedule { base: 1e-6, peak: 3e-3 },
            seed,
            ..TrainConfig::new(TRAIN_T_MAX)
        };
        Trainer {
            config,
            data: MixtureData::new(gmm1d_mixture(), 8192, true),
            state: None,
            losses: Vec::new(),
        }
    }

    /// Runs up to `steps` optimizer steps and returns the mean loss over them.
    pub fn step(&mut self, steps: u32) -> Result<f64, JsError> {
        let mut obs = LastLoss(Vec::new());
        let state = train_for(&self.config, &self.data, &mut obs, self.state.take(), steps as u64).map_err(err)?;
        self.state = Some(state);
        self.losses.extend(&obs.0);
        Ok(obs.0.iter().sum::<f64>() / obs.0.len().max(1) as f64)
    }

    pub fn steps_done(&self) -> u64 {
        self.state.as_ref().map_or(0, |s| s.step)
    }

    pub fn losses(&self) -> Vec<f64> {
        self.losses.clone()
    }

    /// Model density at noise level `t` on [`grid`]: the class densities
    /// weighted by the mixture weights.
    pub fn density(&self, t: f64, n: usize) -> Result<Vec<f64>, JsError> {
        let Some(state) = &self.state else {
            return Ok(grid(n)
                .iter()
                .map(|x| (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt())
                .collect());
        };
        let xs = grid(n);
        let mut out = vec![0.0; n];
        for (k, w) in gmm1d_mixture().weights().iter().enumerate() {
            let ll = state
                .model
                .log_likelihood_batch(&xs, &vec![t; n], &vec![Some(k); n])
                .map_err(err)?;
            for (o, l) in out.iter_mut().zip(ll) {
                *o += w * l.exp();
            }
        }
        Ok(out)
    }

    /// Histogram of `n` generated and denoised samples.
    pub fn sample_hist(&self, n: usize, steps: usize, bins: usize, seed: u64) -> Result<Vec<f64>, JsError> {
        let Some(state) = &self.state else {
            return Err(JsError::new("train first"));
        };
        let target = target();
        let request = SampleRequest {
            steps: steps.max(1),
            seed,
            ..SampleRequest::new(n, TRAIN_T_MAX)
        };
        let noisy = eval::generate(&state.model, &target, &request, n).map_err(err)?;
        let clean = eval::denoise(&noisy, &target, &request, &state.model).map_err(err)?;
        Ok(histogram(&clean, bins))
    }
}
