use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{
    corrupt_batch, loss_gradient, optimizer_step, Batch, Dataset, OptimizerState, Result, TrainConfig, TrainError,
};
use crate::flow::FlowStack;

/// One line of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    pub epoch: u64,
    pub loss: f64,
    pub nats_per_dim: f64,
    pub lr: f64,
    pub mean_t: f64,
    pub wallclock_ms: u64,
}

/// Everything needed to continue a run.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: FlowStack<f32>,
    pub optimizer: OptimizerState<f32>,
    /// Completed optimizer steps.
    pub step: u64,
    /// Position of the noise stream, so a resumed run draws the same noise.
    pub rng_word_pos: u128,
}

impl TrainState {
    /// Identity-initialized model with fresh optimizer state.
    pub fn init(config: &TrainConfig, dataset: &dyn Dataset) -> Result<Self> {
        let flow = config
            .arch
            .flow_config(dataset.tokens(), dataset.token_dim(), dataset.num_classes());
        let model = FlowStack::<f32>::new(flow, config.seed)?;
        let optimizer = OptimizerState::new(model.params());
        Ok(Self {
            model,
            optimizer,
            step: 0,
            rng_word_pos: 0,
        })
    }
}

/// Receives metrics and periodic checkpoints while training runs.
pub trait TrainObserver {
    fn metrics(&mut self, row: &MetricsRow) -> Result<()>;
    fn checkpoint(&mut self, state: &TrainState) -> Result<()>;
}

/// Discards everything.
impl TrainObserver for () {
    fn metrics(&mut self, _: &MetricsRow) -> Result<()> {
        Ok(())
    }
    fn checkpoint(&mut self, _: &TrainState) -> Result<()> {
        Ok(())
    }
}

const NOISE_STREAM: u64 = 1;

fn epoch_order(seed: u64, epoch: u64, len: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2 + epoch);
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut rng);
    order
}

/// Steps per epoch and total steps of a run.
pub fn schedule_len(config: &TrainConfig, dataset: &dyn Dataset) -> (usize, usize) {
    let per_epoch = if config.steps_per_epoch > 0 {
        config.steps_per_epoch
    } else {
        (dataset.len() / config.batch_size).max(1)
    };
    (per_epoch, per_epoch * config.epochs)
}

/// Runs (or resumes) training. All randomness comes from `config.seed`: the
/// model initialization, a dedicated noise stream and a per-epoch shuffle, so
/// two runs with the same inputs produce bitwise-identical states.
pub fn train(
    config: &TrainConfig,
    dataset: &dyn Dataset,
    observer: &mut dyn TrainObserver,
    resume: Option<TrainState>,
) -> Result<TrainState> {
    run(config, dataset, observer, resume, u64::MAX)
}

/// Like [`train`], but returns after at most `steps` further optimizer steps.
/// Slicing a run this way yields the same states as running it whole.
pub fn train_for(
    config: &TrainConfig,
    dataset: &dyn Dataset,
    observer: &mut dyn TrainObserver,
    state: Option<TrainState>,
    steps: u64,
) -> Result<TrainState> {
    run(config, dataset, observer, state, steps)
}

fn run(
    config: &TrainConfig,
    dataset: &dyn Dataset,
    observer: &mut dyn TrainObserver,
    resume: Option<TrainState>,
    limit: u64,
) -> Result<TrainState> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(TrainError::Dataset("dataset holds no examples".into()));
    }
    let mut state = match resume {
        Some(s) => s,
        None => TrainState::init(config, dataset)?,
    };
    let cfg = state.model.config().clone();
    if cfg.tokens != dataset.tokens() || cfg.token_dim != dataset.token_dim() {
        return Err(TrainError::Dataset(format!(
            "model expects {}×{} tokens, dataset yields {}×{}",
            cfg.tokens,
            cfg.token_dim,
            dataset.tokens(),
            dataset.token_dim()
        )));
    }
    if dataset.num_classes() > cfg.num_classes {
        return Err(TrainError::Dataset(format!(
            "dataset has {} classes, model only {}",
            dataset.num_classes(),
            cfg.num_classes
        )));
    }
    if !state.optimizer.matches(state.model.params()) {
        return Err(TrainError::Optimizer("resumed state has mismatched moments".into()));
    }
    let (per_epoch, total) = schedule_len(config, dataset);
    let warmup = config.warmup_steps.unwrap_or(per_epoch);
    let dim = cfg.total_dim();
    let b = config.batch_size;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(NOISE_STREAM);
    rng.set_word_pos(state.rng_word_pos);
    let started = config.log_wallclock.then(Instant::now);
    let stop = state.step.saturating_add(limit);
    let mut order_epoch = u64::MAX;
    let mut order = Vec::new();
    let mut batch = Batch {
        x: vec![0.0; b * dim],
        y: vec![None; b],
    };

    while (state.step as usize) < total && state.step < stop {
        let step = state.step as usize;
        let epoch = (step / per_epoch) as u64;
        if epoch != order_epoch {
            order = epoch_order(config.seed, epoch, dataset.len());
            order_epoch = epoch;
        }
        let offset = (step % per_epoch) * b;
        for i in 0..b {
            let index = order[(offset + i) % order.len()];
            batch.y[i] = dataset.example(index, &mut rng, &mut batch.x[i * dim..(i + 1) * dim]);
        }
        let (x_t, t, y) = corrupt_batch(&batch, dim, config, &mut rng);
        let lr = config.lr.at(step, total, warmup);
        let mean_t = t.iter().sum::<f64>() / b as f64;
        let out = match loss_gradient(&state.model, &x_t, &t, &y, config.gamma_scale) {
            Ok(out) => out,
            Err(TrainError::NonFiniteLoss { t }) => {
                return Err(TrainError::Diverged {
                    step: state.step,
                    t,
                    lr,
                })
            }
            Err(e) => return Err(e),
        };
        optimizer_step(
            state.model.params_mut(),
            &out.grads,
            &mut state.optimizer,
            lr,
            &config.optimizer,
        )?;
        state.step += 1;
        state.rng_word_pos = rng.get_word_pos();
        let wallclock_ms = started.map_or(0, |s| s.elapsed().as_millis() as u64);
        observer.metrics(&MetricsRow {
            step: state.step,
            epoch,
            loss: out.loss,
            nats_per_dim: out.nats_per_dim,
            lr,
            mean_t,
            wallclock_ms,
        })?;
        if config.checkpoint_every > 0 && state.step % config.checkpoint_every as u64 == 0 {
            observer.checkpoint(&state)?;
        }
    }
    Ok(state)
}
