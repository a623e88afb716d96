//! TOML run configuration.
//!
//! ```toml
//! task = "gmm1d"
//! arch = "desk"
//! seed = 0
//! out_dir = "runs/gmm1d"
//!
//! [train]
//! t_max = 0.5
//! epochs = 10
//!
//! [sample]
//! count = 64
//! steps = 10
//! ```
//!
//! Only `task` and `train.t_max` are required.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::data::Task;
use crate::sampler::{Guidance, SampleRequest};
use crate::trainer::{AdamW, ArchPreset, LrSchedule, TrainConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config: {0}")]
    Io(#[from] std::io::Error),
    #[error("config: {0}")]
    Parse(String),
    #[error("config key `{key}`{}: {message}", line.map(|l| format!(" (line {l})")).unwrap_or_default())]
    Invalid {
        key: String,
        line: Option<usize>,
        message: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub task: Task,
    #[serde(default = "default_arch")]
    pub arch: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    #[serde(default)]
    pub data: DataSection,
    pub train: TrainSection,
    #[serde(default)]
    pub sample: SampleSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Image directory or IDX image file.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    /// IDX label file.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub labels: Option<PathBuf>,
    /// Examples per epoch of the procedural tasks.
    pub samples: usize,
    /// Train the mixture tasks class-conditionally on the component index.
    pub labelled: bool,
    pub patch_size: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub limit: Option<usize>,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            path: None,
            labels: None,
            samples: 8192,
            labelled: true,
            patch_size: 1,
            limit: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub t_max: f64,
    #[serde(default = "default_t_min")]
    pub t_min: f64,
    #[serde(default = "one")]
    pub gamma_scale: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default)]
    pub steps_per_epoch: usize,
    #[serde(default = "default_lr_base")]
    pub lr_base: f64,
    #[serde(default = "default_lr_peak")]
    pub lr_peak: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warmup_steps: Option<usize>,
    #[serde(default = "default_dropout")]
    pub label_dropout: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_adam_eps")]
    pub adam_eps: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default)]
    pub checkpoint_every: usize,
    #[serde(default)]
    pub log_wallclock: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleSection {
    pub count: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub class: Option<usize>,
    pub cfg: f64,
    pub guidance: Guidance,
    pub steps: usize,
    /// Defaults to `train.t_max`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub t_max: Option<f64>,
    pub final_tweedie: bool,
}

impl Default for SampleSection {
    fn default() -> Self {
        Self {
            count: 64,
            class: None,
            cfg: 1.0,
            guidance: Guidance::default(),
            steps: 10,
            t_max: None,
            final_tweedie: true,
        }
    }
}

fn default_arch() -> String {
    "desk".into()
}
fn default_out_dir() -> PathBuf {
    "runs".into()
}
fn default_t_min() -> f64 {
    0.01
}
fn one() -> f64 {
    1.0
}
fn default_batch() -> usize {
    64
}
fn default_epochs() -> usize {
    10
}
fn default_lr_base() -> f64 {
    LrSchedule::default().base
}
fn default_lr_peak() -> f64 {
    LrSchedule::default().peak
}
fn default_dropout() -> f64 {
    0.1
}
fn default_beta1() -> f64 {
    AdamW::default().beta1
}
fn default_beta2() -> f64 {
    AdamW::default().beta2
}
fn default_adam_eps() -> f64 {
    AdamW::default().eps
}
fn default_weight_decay() -> f64 {
    AdamW::default().weight_decay
}

/// Line (1-based) on which `key` of `table` is assigned, if it is.
fn key_line(text: &str, table: Option<&str>, key: &str) -> Option<usize> {
    let mut current: Option<String> = None;
    let dotted = table.map(|t| format!("{t}.{key}"));
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if let Some(h) = line.strip_prefix('[') {
            current = Some(h.trim_end_matches(']').trim().to_string());
            continue;
        }
        let Some((lhs, _)) = line.split_once('=') else {
            continue;
        };
        let lhs = lhs.trim();
        let here = current.as_deref() == table && lhs == key;
        let dotted_here = current.is_none() && dotted.as_deref() == Some(lhs);
        if here || dotted_here {
            return Some(i + 1);
        }
    }
    None
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string().trim_end().to_string()))?;
        cfg.validate_in(text)?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run configs always serialize")
    }

    /// Checks every numeric range. Errors name the offending key.
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.validate_in("")
    }

    fn validate_in(&self, text: &str) -> Result<(), ConfigError> {
        let fail = |table: Option<&str>, key: &str, message: String| {
            let full = table.map_or(key.to_string(), |t| format!("{t}.{key}"));
            Err(ConfigError::Invalid {
                line: key_line(text, table, key),
                key: full,
                message,
            })
        };
        let t = &self.train;
        let s = &self.sample;
        let train = Some("train");
        let sample = Some("sample");
        let data = Some("data");
        if ArchPreset::by_name(&self.arch).is_none() {
            return fail(
                None,
                "arch",
                format!("unknown preset; expected one of {}", ArchPreset::NAMES.join(", ")),
            );
        }
        if !(t.t_min > 0.0 && t.t_min.is_finite()) {
            return fail(train, "t_min", format!("must be positive, got {}", t.t_min));
        }
        if !(t.t_max > t.t_min && t.t_max.is_finite()) {
            return fail(
                train,
                "t_max",
                format!("must exceed t_min = {}, got {}", t.t_min, t.t_max),
            );
        }
        if !(t.gamma_scale > 0.0 && t.gamma_scale.is_finite()) {
            return fail(train, "gamma_scale", format!("must be positive, got {}", t.gamma_scale));
        }
        if t.batch_size == 0 {
            return fail(train, "batch_size", "must be positive".into());
        }
        if !(t.lr_base >= 0.0 && t.lr_base.is_finite()) {
            return fail(train, "lr_base", format!("must be non-negative, got {}", t.lr_base));
        }
        if !(t.lr_peak >= t.lr_base && t.lr_peak.is_finite()) {
            return fail(train, "lr_peak", format!("must be at least lr_base, got {}", t.lr_peak));
        }
        if !(0.0..=1.0).contains(&t.label_dropout) {
            return fail(
                train,
                "label_dropout",
                format!("must lie in [0, 1], got {}", t.label_dropout),
            );
        }
        for (key, v) in [("beta1", t.beta1), ("beta2", t.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return fail(train, key, format!("must lie in [0, 1), got {v}"));
            }
        }
        if !(t.adam_eps > 0.0 && t.adam_eps.is_finite()) {
            return fail(train, "adam_eps", format!("must be positive, got {}", t.adam_eps));
        }
        if !(t.weight_decay >= 0.0 && t.weight_decay.is_finite()) {
            return fail(
                train,
                "weight_decay",
                format!("must be non-negative, got {}", t.weight_decay),
            );
        }
        if self.data.patch_size == 0 {
            return fail(data, "patch_size", "must be positive".into());
        }
        if self.data.samples == 0 {
            return fail(data, "samples", "must be positive".into());
        }
        if self.task.is_image() && self.data.path.is_none() {
            return fail(data, "path", format!("is required for task {}", self.task));
        }
        if s.count == 0 {
            return fail(sample, "count", "must be positive".into());
        }
        if !(s.cfg >= 1.0 && s.cfg.is_finite()) {
            return fail(sample, "cfg", format!("must be at least 1, got {}", s.cfg));
        }
        if s.steps == 0 {
            return fail(sample, "steps", "must be positive".into());
        }
        if let Some(tm) = s.t_max {
            if !(tm > t.t_min && tm.is_finite()) {
                return fail(
                    sample,
                    "t_max",
                    format!("must exceed train.t_min = {}, got {tm}", t.t_min),
                );
            }
        }
        Ok(())
    }

    pub fn arch_preset(&self) -> ArchPreset {
        ArchPreset::by_name(&self.arch).expect("validated preset name")
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            t_min: t.t_min,
            t_max: t.t_max,
            gamma_scale: t.gamma_scale,
            batch_size: t.batch_size,
            epochs: t.epochs,
            steps_per_epoch: t.steps_per_epoch,
            lr: LrSchedule {
                base: t.lr_base,
                peak: t.lr_peak,
            },
            warmup_steps: t.warmup_steps,
            optimizer: AdamW {
                beta1: t.beta1,
                beta2: t.beta2,
                eps: t.adam_eps,
                weight_decay: t.weight_decay,
            },
            label_dropout: t.label_dropout,
            patch_size: self.data.patch_size,
            arch: self.arch_preset(),
            seed: self.seed,
            checkpoint_every: t.checkpoint_every,
            log_wallclock: t.log_wallclock,
        }
    }

    pub fn sample_request(&self) -> SampleRequest {
        let s = &self.sample;
        SampleRequest {
            count: s.count,
            class: s.class,
            cfg_scale: s.cfg,
            guidance: s.guidance,
            steps: s.steps,
            t_max: s.t_max.unwrap_or(self.train.t_max),
            t_min: self.train.t_min,
            final_tweedie: s.final_tweedie,
            seed: self.seed,
        }
    }
}
