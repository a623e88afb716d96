//! Files on disk: run configs, checkpoints, metrics, image grids and datasets.

mod checkpoint;
mod config;
mod data;
mod metrics;
mod pnm;

pub use checkpoint::{Checkpoint, CheckpointError, FORMAT_VERSION, MAGIC};
pub use config::{ConfigError, DataSection, RunConfig, SampleSection, TrainSection};
pub use data::{encode_idx, gmm1d_mixture, gmm2d_mixture, read_idx, Checkerboard, ImageData, MixtureData, Task};
pub use metrics::{format_row, parse_row, read_metrics, MetricsWriter, METRICS_HEADER};
pub use pnm::{decode_pnm, emit_image_grid, encode_pnm, from_byte, grid_raster, read_pnm, split_grid, to_byte, GUTTER};

use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::trainer::{Dataset, MetricsRow, TrainError, TrainObserver, TrainState};

#[derive(Debug, Error)]
pub enum IoError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Format(String),
}

/// Size of the images behind a patchified dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ImageShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub patch: usize,
}

impl ImageShape {
    pub fn write_meta(&self, meta: &mut BTreeMap<String, String>) {
        meta.insert("image.height".into(), self.height.to_string());
        meta.insert("image.width".into(), self.width.to_string());
        meta.insert("image.channels".into(), self.channels.to_string());
        meta.insert("image.patch".into(), self.patch.to_string());
    }

    pub fn from_meta(meta: &BTreeMap<String, String>) -> Option<Self> {
        let get = |k: &str| meta.get(k)?.parse().ok();
        Some(Self {
            height: get("image.height")?,
            width: get("image.width")?,
            channels: get("image.channels")?,
            patch: get("image.patch")?,
        })
    }
}

/// Dataset of a run plus, for image tasks, the image geometry.
pub struct TaskData {
    pub dataset: Box<dyn Dataset + Send + Sync>,
    pub image: Option<ImageShape>,
}

pub fn load_dataset(cfg: &RunConfig) -> Result<TaskData, IoError> {
    let d = &cfg.data;
    let procedural = |dataset: Box<dyn Dataset + Send + Sync>| Ok(TaskData { dataset, image: None });
    match cfg.task {
        Task::Gmm1d => procedural(Box::new(MixtureData::new(gmm1d_mixture(), d.samples, d.labelled))),
        Task::Gmm2d => procedural(Box::new(MixtureData::new(gmm2d_mixture(), d.samples, d.labelled))),
        Task::Checkerboard2d => procedural(Box::new(Checkerboard { len: d.samples })),
        Task::ImageDir | Task::IdxFile => {
            let path = d
                .path
                .as_deref()
                .ok_or_else(|| IoError::Format(format!("task {} needs data.path", cfg.task)))?;
            let images = if cfg.task == Task::ImageDir {
                ImageData::from_dir(path, d.patch_size, d.limit)?
            } else {
                ImageData::from_idx(path, d.labels.as_deref(), d.patch_size, d.limit)?
            };
            let image = Some(ImageShape {
                height: images.height,
                width: images.width,
                channels: images.channels,
                patch: images.patch,
            });
            Ok(TaskData {
                dataset: Box::new(images),
                image,
            })
        }
    }
}

/// Metadata stored alongside a run's checkpoints.
pub fn run_meta(cfg: &RunConfig, image: Option<ImageShape>) -> BTreeMap<String, String> {
    let mut meta = BTreeMap::new();
    meta.insert("task".into(), cfg.task.to_string());
    meta.insert("arch".into(), cfg.arch.clone());
    meta.insert("seed".into(), cfg.seed.to_string());
    meta.insert("t_min".into(), cfg.train.t_min.to_string());
    meta.insert("t_max".into(), cfg.train.t_max.to_string());
    if let Some(shape) = image {
        shape.write_meta(&mut meta);
    }
    meta
}

/// Writes `metrics.csv` and numbered checkpoints into a run directory.
pub struct RunSink {
    dir: PathBuf,
    metrics: MetricsWriter<BufWriter<File>>,
    meta: BTreeMap<String, String>,
}

impl RunSink {
    /// Starts a fresh `metrics.csv`, or appends to it when resuming.
    pub fn create(dir: &Path, meta: BTreeMap<String, String>, append: bool) -> Result<Self, IoError> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join("metrics.csv");
        let metrics = if append && path.exists() {
            let f = std::fs::OpenOptions::new().append(true).open(&path)?;
            MetricsWriter::resume(BufWriter::new(f))
        } else {
            MetricsWriter::new(BufWriter::new(File::create(&path)?))?
        };
        Ok(Self {
            dir: dir.to_path_buf(),
            metrics,
            meta,
        })
    }

    pub fn checkpoint_path(&self, step: u64) -> PathBuf {
        self.dir.join(format!("ckpt-{step:08}.itar"))
    }

    /// Saves `final.itar` and flushes the metrics.
    pub fn finish(mut self, state: TrainState) -> Result<PathBuf, TrainError> {
        self.metrics.flush().map_err(|e| TrainError::Sink(e.to_string()))?;
        let path = self.dir.join("final.itar");
        Checkpoint::from_state(state, self.meta)
            .save(&path)
            .map_err(|e| TrainError::Sink(e.to_string()))?;
        Ok(path)
    }
}

impl TrainObserver for RunSink {
    fn metrics(&mut self, row: &MetricsRow) -> Result<(), TrainError> {
        self.metrics.write(row).map_err(|e| TrainError::Sink(e.to_string()))
    }

    fn checkpoint(&mut self, state: &TrainState) -> Result<(), TrainError> {
        self.metrics.flush().map_err(|e| TrainError::Sink(e.to_string()))?;
        Checkpoint::from_state(state.clone(), self.meta.clone())
            .save(self.checkpoint_path(state.step))
            .map_err(|e| TrainError::Sink(e.to_string()))
    }
}
