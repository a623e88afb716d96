//! Binary checkpoint files.
//!
//! ```text
//! "ITAR" | version: u32 LE | manifest length: u32 LE | manifest (UTF-8)
//!        | f32 LE payloads in manifest order | CRC-32: u32 LE
//! ```
//!
//! The manifest is one `key=value` pair per line. Tensor lines read
//! `tensor=<name>:<d0>x<d1>...` and list the payloads in order: model
//! parameters, then the first and second optimizer moments when present.
//! The checksum covers every byte that precedes it.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

use crate::autodiff::Tensor;
use crate::flow::{FlowConfig, FlowStack, NamedTensor};
use crate::trainer::{OptimizerState, TrainState};

pub const MAGIC: &[u8; 4] = b"ITAR";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 12;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic)")]
    Magic,
    #[error("checkpoint format version {found} is not supported (expected {FORMAT_VERSION})")]
    Version { found: u32 },
    #[error("checkpoint truncated: {len} bytes present, {needed} required")]
    Truncated { needed: usize, len: usize },
    #[error("checkpoint checksum mismatch (stored {stored:08x}, computed {computed:08x})")]
    Crc { stored: u32, computed: u32 },
    #[error("invalid checkpoint manifest: {0}")]
    Manifest(String),
}

impl CheckpointError {
    /// Stable numeric code of the error kind.
    pub fn code(&self) -> i32 {
        match self {
            Self::Io(_) => 10,
            Self::Magic => 11,
            Self::Version { .. } => 12,
            Self::Truncated { .. } => 13,
            Self::Crc { .. } => 14,
            Self::Manifest(_) => 15,
        }
    }
}

pub type Result<T> = std::result::Result<T, CheckpointError>;

/// Model parameters plus the state needed to resume training.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: FlowStack<f32>,
    pub optimizer: Option<OptimizerState<f32>>,
    pub step: u64,
    pub rng_word_pos: u128,
    /// Free-form run metadata such as the task and noise range.
    pub meta: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn from_model(model: FlowStack<f32>) -> Self {
        Self {
            model,
            optimizer: None,
            step: 0,
            rng_word_pos: 0,
            meta: BTreeMap::new(),
        }
    }

    pub fn from_state(state: TrainState, meta: BTreeMap<String, String>) -> Self {
        Self {
            model: state.model,
            optimizer: Some(state.optimizer),
            step: state.step,
            rng_word_pos: state.rng_word_pos,
            meta,
        }
    }

    /// Training state to resume from; fresh moments if none were stored.
    pub fn into_state(self) -> TrainState {
        let optimizer = self
            .optimizer
            .unwrap_or_else(|| OptimizerState::new(self.model.params()));
        TrainState {
            model: self.model,
            optimizer,
            step: self.step,
            rng_word_pos: self.rng_word_pos,
        }
    }

    pub fn meta_f64(&self, key: &str) -> Option<f64> {
        self.meta.get(key)?.parse().ok()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let manifest = self.manifest()?;
        let mut out = Vec::with_capacity(HEADER_LEN + manifest.len() + 4 * self.model.num_parameters() * 3 + 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
        out.extend_from_slice(manifest.as_bytes());
        for p in self.model.params() {
            extend_f32(&mut out, p.tensor.data());
        }
        if let Some(opt) = &self.optimizer {
            for m in opt.m.iter().chain(&opt.v) {
                extend_f32(&mut out, m);
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    fn manifest(&self) -> Result<String> {
        let c = self.model.config();
        let mut s = String::new();
        let layers: Vec<String> = c.layers.iter().map(|l| l.to_string()).collect();
        let _ = writeln!(s, "dtype=f32");
        let _ = writeln!(s, "step={}", self.step);
        let _ = writeln!(s, "rng_word_pos={}", self.rng_word_pos);
        let _ = writeln!(s, "config.tokens={}", c.tokens);
        let _ = writeln!(s, "config.token_dim={}", c.token_dim);
        let _ = writeln!(s, "config.layers={}", layers.join(","));
        let _ = writeln!(s, "config.width={}", c.width);
        let _ = writeln!(s, "config.heads={}", c.heads);
        let _ = writeln!(s, "config.mlp_ratio={}", c.mlp_ratio);
        let _ = writeln!(s, "config.time_dim={}", c.time_dim);
        let _ = writeln!(s, "config.num_classes={}", c.num_classes);
        for (k, v) in &self.meta {
            if k.contains(['=', '\n']) || v.contains('\n') {
                return Err(CheckpointError::Manifest(format!(
                    "metadata entry {k:?} cannot be stored"
                )));
            }
            let _ = writeln!(s, "meta.{k}={v}");
        }
        match &self.optimizer {
            Some(opt) => {
                let _ = writeln!(s, "optimizer=adamw");
                let _ = writeln!(s, "optimizer.step={}", opt.step);
            }
            None => {
                let _ = writeln!(s, "optimizer=none");
            }
        }
        let shape = |t: &[usize]| t.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x");
        for p in self.model.params() {
            let _ = writeln!(s, "tensor={}:{}", p.name, shape(p.tensor.shape()));
        }
        if self.optimizer.is_some() {
            for prefix in ["adam.m.", "adam.v."] {
                for p in self.model.params() {
                    let _ = writeln!(s, "tensor={prefix}{}:{}", p.name, shape(p.tensor.shape()));
                }
            }
        }
        Ok(s)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(if bytes.len() < 4 && MAGIC.starts_with(bytes) {
                CheckpointError::Truncated {
                    needed: HEADER_LEN,
                    len: bytes.len(),
                }
            } else {
                CheckpointError::Magic
            });
        }
        if bytes.len() < HEADER_LEN {
            return Err(CheckpointError::Truncated {
                needed: HEADER_LEN,
                len: bytes.len(),
            });
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(CheckpointError::Version { found: version });
        }
        let manifest_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let manifest_end = HEADER_LEN + manifest_len;
        if bytes.len() < manifest_end {
            return Err(CheckpointError::Truncated {
                needed: manifest_end,
                len: bytes.len(),
            });
        }
        let manifest = std::str::from_utf8(&bytes[HEADER_LEN..manifest_end])
            .map_err(|_| CheckpointError::Manifest("manifest is not UTF-8".into()))?;
        let parsed = Manifest::parse(manifest)?;
        let payload_floats: usize = parsed.tensors.iter().map(|(_, s)| s.iter().product::<usize>()).sum();
        let needed = manifest_end + 4 * payload_floats + 4;
        if bytes.len() < needed {
            return Err(CheckpointError::Truncated {
                needed,
                len: bytes.len(),
            });
        }
        if bytes.len() > needed {
            return Err(CheckpointError::Manifest(format!(
                "{} trailing bytes after the checksum",
                bytes.len() - needed
            )));
        }
        let stored = u32::from_le_bytes(bytes[needed - 4..].try_into().unwrap());
        let computed = crc32fast::hash(&bytes[..needed - 4]);
        if stored != computed {
            return Err(CheckpointError::Crc { stored, computed });
        }
        parsed.build(&bytes[manifest_end..needed - 4])
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("itar.tmp");
        std::fs::write(&tmp, bytes)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn extend_f32(out: &mut Vec<u8>, data: &[f32]) {
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Manifest {
    fields: BTreeMap<String, String>,
    meta: BTreeMap<String, String>,
    tensors: Vec<(String, Vec<usize>)>,
}

impl Manifest {
    fn parse(text: &str) -> Result<Self> {
        let bad = |m: String| CheckpointError::Manifest(m);
        let mut fields = BTreeMap::new();
        let mut meta = BTreeMap::new();
        let mut tensors = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| bad(format!("line {} is not key=value", i + 1)))?;
            if k == "tensor" {
                let (name, shape) = v
                    .rsplit_once(':')
                    .ok_or_else(|| bad(format!("tensor entry {v:?} has no shape")))?;
                let shape = shape
                    .split('x')
                    .map(|d| d.parse::<usize>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|_| bad(format!("tensor {name} has malformed shape {shape:?}")))?;
                tensors.push((name.to_string(), shape));
            } else if let Some(mk) = k.strip_prefix("meta.") {
                meta.insert(mk.to_string(), v.to_string());
            } else if fields.insert(k.to_string(), v.to_string()).is_some() {
                return Err(bad(format!("duplicate key {k}")));
            }
        }
        Ok(Self { fields, meta, tensors })
    }

    fn get<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let v = self
            .fields
            .get(key)
            .ok_or_else(|| CheckpointError::Manifest(format!("missing key {key}")))?;
        v.parse()
            .map_err(|_| CheckpointError::Manifest(format!("key {key} has malformed value {v:?}")))
    }

    fn build(self, payload: &[u8]) -> Result<Checkpoint> {
        let bad = |m: String| CheckpointError::Manifest(m);
        let dtype: String = self.get("dtype")?;
        if dtype != "f32" {
            return Err(bad(format!("unsupported dtype {dtype}")));
        }
        let layers: String = self.get("config.layers")?;
        let layers = layers
            .split(',')
            .map(|l| l.parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| bad(format!("malformed layer list {layers:?}")))?;
        let config = FlowConfig {
            tokens: self.get("config.tokens")?,
            token_dim: self.get("config.token_dim")?,
            layers,
            width: self.get("config.width")?,
            heads: self.get("config.heads")?,
            mlp_ratio: self.get("config.mlp_ratio")?,
            time_dim: self.get("config.time_dim")?,
            num_classes: self.get("config.num_classes")?,
        };
        let mut offset = 0;
        let mut tensors = Vec::with_capacity(self.tensors.len());
        for (name, shape) in self.tensors.iter() {
            let n: usize = shape.iter().product();
            let data: Vec<f32> = payload[offset..offset + 4 * n]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect();
            offset += 4 * n;
            let tensor = Tensor::new(shape.clone(), data).map_err(|e| bad(format!("tensor {name}: {e}")))?;
            tensors.push(NamedTensor {
                name: name.clone(),
                tensor,
            });
        }
        let optimizer_kind: String = self.get("optimizer")?;
        let n_params = match optimizer_kind.as_str() {
            "none" => tensors.len(),
            "adamw" if tensors.len() % 3 == 0 => tensors.len() / 3,
            "adamw" => return Err(bad("moment tensors do not mirror the parameters".into())),
            other => return Err(bad(format!("unknown optimizer {other}"))),
        };
        let mut rest = tensors.split_off(n_params);
        let model = FlowStack::from_params(config, tensors).map_err(|e| bad(e.to_string()))?;
        let optimizer = if optimizer_kind == "adamw" {
            let v = rest.split_off(n_params);
            for (moments, prefix) in [(&rest, "adam.m."), (&v, "adam.v.")] {
                for (m, p) in moments.iter().zip(model.params()) {
                    if m.name.strip_prefix(prefix) != Some(p.name.as_str()) || m.tensor.shape() != p.tensor.shape() {
                        return Err(bad(format!("moment tensor {} does not match {}", m.name, p.name)));
                    }
                }
            }
            Some(OptimizerState {
                step: self.get("optimizer.step")?,
                m: rest.into_iter().map(|t| t.tensor.into_data()).collect(),
                v: v.into_iter().map(|t| t.tensor.into_data()).collect(),
            })
        } else {
            None
        };
        Ok(Checkpoint {
            model,
            optimizer,
            step: self.get("step")?,
            rng_word_pos: self.get("rng_word_pos")?,
            meta: self.meta,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::ArchPreset;

    fn small() -> Checkpoint {
        let cfg = ArchPreset::tiny().flow_config(2, 1, 2);
        let model = FlowStack::<f32>::random(cfg, 3, 0.1).unwrap();
        let mut opt = OptimizerState::new(model.params());
        for (i, m) in opt.m.iter_mut().enumerate() {
            m.iter_mut()
                .enumerate()
                .for_each(|(j, v)| *v = (i * 7 + j) as f32 * 1e-3);
        }
        opt.step = 9;
        let mut meta = BTreeMap::new();
        meta.insert("task".into(), "gmm1d".into());
        meta.insert("t_max".into(), "0.5".into());
        Checkpoint {
            model,
            optimizer: Some(opt),
            step: 9,
            rng_word_pos: 1234,
            meta,
        }
    }

    #[test]
    fn round_trip_is_bitwise() {
        let c = small();
        let back = Checkpoint::from_bytes(&c.to_bytes().unwrap()).unwrap();
        assert_eq!(back.model.params(), c.model.params());
        assert_eq!(back.optimizer, c.optimizer);
        assert_eq!((back.step, back.rng_word_pos), (9, 1234));
        assert_eq!(back.meta, c.meta);
        assert_eq!(back.to_bytes().unwrap(), c.to_bytes().unwrap());
    }

    #[test]
    fn golden_header() {
        let cfg = FlowConfig {
            tokens: 1,
            token_dim: 1,
            layers: vec![1],
            width: 2,
            heads: 1,
            mlp_ratio: 1,
            time_dim: 2,
            num_classes: 0,
        };
        let c = Checkpoint::from_model(FlowStack::<f32>::new(cfg, 0).unwrap());
        let bytes = c.to_bytes().unwrap();
        assert_eq!(&bytes[..8], b"ITAR\x01\x00\x00\x00");
        let len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let manifest = std::str::from_utf8(&bytes[12..12 + len]).unwrap();
        let expected = "dtype=f32\nstep=0\nrng_word_pos=0\nconfig.tokens=1\nconfig.token_dim=1\n\
            config.layers=1\nconfig.width=2\nconfig.heads=1\nconfig.mlp_ratio=1\nconfig.time_dim=2\n\
            config.num_classes=0\noptimizer=none\n\
            tensor=block0.in.weight:1x2\ntensor=block0.in.bias:2\ntensor=block0.pos:1x2\n\
            tensor=block0.class:1x2\ntensor=block0.time.weight:2x2\ntensor=block0.time.bias:2\n\
            tensor=block0.layer0.ln1.scale:2\ntensor=block0.layer0.ln1.shift:2\n\
            tensor=block0.layer0.attn.qkv.weight:2x6\ntensor=block0.layer0.attn.qkv.bias:6\n\
            tensor=block0.layer0.attn.out.weight:2x2\ntensor=block0.layer0.attn.out.bias:2\n\
            tensor=block0.layer0.ln2.scale:2\ntensor=block0.layer0.ln2.shift:2\n\
            tensor=block0.layer0.mlp.fc1.weight:2x2\ntensor=block0.layer0.mlp.fc1.bias:2\n\
            tensor=block0.layer0.mlp.fc2.weight:2x2\ntensor=block0.layer0.mlp.fc2.bias:2\n\
            tensor=block0.ln.scale:2\ntensor=block0.ln.shift:2\n\
            tensor=block0.head.weight:2x2\ntensor=block0.head.bias:2\n";
        assert_eq!(manifest, expected);
        assert_eq!(len, expected.len());
        let floats = c.model.num_parameters();
        assert_eq!(bytes.len(), 12 + len + 4 * floats + 4);
        let crc = crc32fast::hash(&bytes[..bytes.len() - 4]);
        assert_eq!(&bytes[bytes.len() - 4..], &crc.to_le_bytes());
    }

    #[test]
    fn payload_corruption_fails_checksum() {
        let bytes = small().to_bytes().unwrap();
        let start = 12 + u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        for pos in (start..bytes.len()).step_by(37) {
            let mut bad = bytes.clone();
            bad[pos] ^= 0x10;
            assert!(
                matches!(Checkpoint::from_bytes(&bad), Err(CheckpointError::Crc { .. })),
                "{pos}"
            );
        }
    }

    #[test]
    fn any_flipped_byte_is_rejected() {
        let bytes = small().to_bytes().unwrap();
        for pos in 0..bytes.len() {
            let mut bad = bytes.clone();
            bad[pos] ^= 0x01;
            assert!(Checkpoint::from_bytes(&bad).is_err(), "byte {pos} went unnoticed");
        }
    }

    #[test]
    fn version_and_truncation_are_distinct() {
        let bytes = small().to_bytes().unwrap();
        let mut bumped = bytes.clone();
        bumped[4] = 2;
        let e = Checkpoint::from_bytes(&bumped).unwrap_err();
        assert!(matches!(e, CheckpointError::Version { found: 2 }));
        let codes: Vec<i32> = [
            e,
            Checkpoint::from_bytes(&bytes[..bytes.len() - 9]).unwrap_err(),
            Checkpoint::from_bytes(&bytes[..7]).unwrap_err(),
            Checkpoint::from_bytes(b"PNG!....").unwrap_err(),
        ]
        .iter()
        .map(|e| e.code())
        .collect();
        assert_eq!(codes, vec![12, 13, 13, 11]);
    }

    #[test]
    fn file_round_trip_and_resume_state() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.itar");
        let c = small();
        c.save(&path).unwrap();
        let s = Checkpoint::load(&path).unwrap().into_state();
        assert_eq!(s.step, 9);
        assert_eq!(Some(s.optimizer), c.optimizer);
    }
}
