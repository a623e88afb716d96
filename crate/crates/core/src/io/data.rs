//! Built-in datasets: procedural 1D/2D densities and small image sets.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::distr::weighted::WeightedIndex;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::pnm::read_pnm;
use super::IoError;
use crate::flow::TokenSequence;
use crate::oracle::GaussianMixture;
use crate::trainer::{patchify, unpatchify, Dataset, Image};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Task {
    #[serde(rename = "gmm1d")]
    Gmm1d,
    #[serde(rename = "gmm2d")]
    Gmm2d,
    #[serde(rename = "checkerboard-2d")]
    Checkerboard2d,
    #[serde(rename = "image-dir")]
    ImageDir,
    #[serde(rename = "idx-file")]
    IdxFile,
}

impl Task {
    pub const NAMES: [&'static str; 5] = ["gmm1d", "gmm2d", "checkerboard-2d", "image-dir", "idx-file"];

    pub fn name(self) -> &'static str {
        match self {
            Self::Gmm1d => "gmm1d",
            Self::Gmm2d => "gmm2d",
            Self::Checkerboard2d => "checkerboard-2d",
            Self::ImageDir => "image-dir",
            Self::IdxFile => "idx-file",
        }
    }

    /// Ground-truth clean density of the analytic tasks.
    pub fn mixture(self) -> Option<GaussianMixture> {
        match self {
            Self::Gmm1d => Some(gmm1d_mixture()),
            Self::Gmm2d => Some(gmm2d_mixture()),
            _ => None,
        }
    }

    pub fn is_image(self) -> bool {
        matches!(self, Self::ImageDir | Self::IdxFile)
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = IoError;
    fn from_str(s: &str) -> Result<Self, IoError> {
        Ok(match s {
            "gmm1d" => Self::Gmm1d,
            "gmm2d" => Self::Gmm2d,
            "checkerboard-2d" => Self::Checkerboard2d,
            "image-dir" => Self::ImageDir,
            "idx-file" => Self::IdxFile,
            other => {
                return Err(IoError::Format(format!(
                    "unknown task {other:?}; expected one of {}",
                    Self::NAMES.join(", ")
                )))
            }
        })
    }
}

/// Two well separated 1D components of unequal weight and width.
pub fn gmm1d_mixture() -> GaussianMixture {
    GaussianMixture::scalar(&[0.4, 0.6], &[-1.0, 1.0], &[0.2, 0.3]).expect("valid mixture")
}

/// Four isotropic 2D components on the corners of a square.
pub fn gmm2d_mixture() -> GaussianMixture {
    let means = vec![vec![-1.0, -1.0], vec![-1.0, 1.0], vec![1.0, -1.0], vec![1.0, 1.0]];
    GaussianMixture::new(vec![0.1, 0.2, 0.3, 0.4], means, vec![0.09; 4]).expect("valid mixture")
}

/// Draws from a Gaussian mixture, one token per coordinate. With labels,
/// the component index is the class.
#[derive(Debug, Clone)]
pub struct MixtureData {
    mixture: GaussianMixture,
    picker: WeightedIndex<f64>,
    len: usize,
    labelled: bool,
}

impl MixtureData {
    pub fn new(mixture: GaussianMixture, len: usize, labelled: bool) -> Self {
        let picker = WeightedIndex::new(mixture.weights()).expect("mixture weights are valid");
        Self {
            mixture,
            picker,
            len,
            labelled,
        }
    }

    pub fn mixture(&self) -> &GaussianMixture {
        &self.mixture
    }
}

impl Dataset for MixtureData {
    fn tokens(&self) -> usize {
        self.mixture.dim()
    }
    fn token_dim(&self) -> usize {
        1
    }
    fn num_classes(&self) -> usize {
        if self.labelled {
            self.mixture.num_components()
        } else {
            0
        }
    }
    fn len(&self) -> usize {
        self.len
    }
    fn example(&self, _: usize, rng: &mut ChaCha8Rng, out: &mut [f64]) -> Option<usize> {
        let k = self.picker.sample(rng);
        let sd = self.mixture.variances()[k].sqrt();
        for (o, m) in out.iter_mut().zip(&self.mixture.means()[k]) {
            *o = m + sd * rng.sample::<f64, _>(StandardNormal);
        }
        self.labelled.then_some(k)
    }
}

/// Uniform density on the dark squares of a 4×4 board covering `[−1, 1]²`.
#[derive(Debug, Clone)]
pub struct Checkerboard {
    pub len: usize,
}

impl Checkerboard {
    pub fn sample(rng: &mut impl Rng, out: &mut [f64]) {
        let cell = rng.random_range(0..8usize);
        let row = cell / 2;
        let col = 2 * (cell % 2) + row % 2;
        out[0] = -1.0 + 0.5 * (col as f64 + rng.random::<f64>());
        out[1] = -1.0 + 0.5 * (row as f64 + rng.random::<f64>());
    }
}

impl Dataset for Checkerboard {
    fn tokens(&self) -> usize {
        2
    }
    fn token_dim(&self) -> usize {
        1
    }
    fn num_classes(&self) -> usize {
        0
    }
    fn len(&self) -> usize {
        self.len
    }
    fn example(&self, _: usize, rng: &mut ChaCha8Rng, out: &mut [f64]) -> Option<usize> {
        Self::sample(rng, out);
        None
    }
}

/// Fixed set of equally sized images, patchified, with optional labels.
#[derive(Debug, Clone)]
pub struct ImageData {
    examples: Vec<TokenSequence>,
    labels: Vec<Option<usize>>,
    num_classes: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub patch: usize,
}

impl ImageData {
    pub fn from_images(images: Vec<Image>, labels: Vec<Option<usize>>, patch: usize) -> Result<Self, IoError> {
        let first = images
            .first()
            .ok_or_else(|| IoError::Format("image set is empty".into()))?;
        let (height, width, channels) = (first.height, first.width, first.channels);
        let mut examples = Vec::with_capacity(images.len());
        for img in &images {
            if (img.height, img.width, img.channels) != (height, width, channels) {
                return Err(IoError::Format(format!(
                    "images differ in size: {}×{}×{} vs {height}×{width}×{channels}",
                    img.height, img.width, img.channels
                )));
            }
            examples.push(patchify(img, patch).map_err(|e| IoError::Format(e.to_string()))?);
        }
        let num_classes = labels.iter().flatten().max().map_or(0, |m| m + 1);
        Ok(Self {
            examples,
            labels,
            num_classes,
            height,
            width,
            channels,
            patch,
        })
    }

    /// Every `.pgm`/`.ppm` file in `dir`. If `dir` has subdirectories instead,
    /// each one (in name order) is a class.
    pub fn from_dir(dir: &Path, patch: usize, limit: Option<usize>) -> Result<Self, IoError> {
        let entries = sorted_entries(dir)?;
        let subdirs: Vec<_> = entries.iter().filter(|p| p.is_dir()).collect();
        let mut images = Vec::new();
        let mut labels = Vec::new();
        if subdirs.is_empty() {
            for p in entries.iter().filter(|p| is_pnm(p)) {
                images.push(read_pnm(p)?);
                labels.push(None);
            }
        } else {
            for (class, sub) in subdirs.iter().enumerate() {
                for p in sorted_entries(sub)?.iter().filter(|p| is_pnm(p)) {
                    images.push(read_pnm(p)?);
                    labels.push(Some(class));
                }
            }
        }
        if let Some(n) = limit {
            images.truncate(n);
            labels.truncate(n);
        }
        Self::from_images(images, labels, patch)
    }

    /// IDX image tensor (`u8`, rank 3 or 4) with an optional IDX label vector.
    pub fn from_idx(images: &Path, labels: Option<&Path>, patch: usize, limit: Option<usize>) -> Result<Self, IoError> {
        let bytes = std::fs::read(images)?;
        let (dims, raw) = read_idx(&bytes)?;
        let (n, h, w, c) = match dims[..] {
            [n, h, w] => (n, h, w, 1),
            [n, h, w, c] => (n, h, w, c),
            _ => {
                return Err(IoError::Format(format!(
                    "IDX images must have rank 3 or 4, got {}",
                    dims.len()
                )))
            }
        };
        let n = limit.map_or(n, |l| l.min(n));
        let per = h * w * c;
        let imgs = (0..n)
            .map(|i| {
                let data = raw[i * per..(i + 1) * per]
                    .iter()
                    .map(|&b| super::pnm::from_byte(b))
                    .collect();
                Image::new(h, w, c, data).map_err(|e| IoError::Format(e.to_string()))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let labels = match labels {
            Some(p) => {
                let bytes = std::fs::read(p)?;
                let (ldims, lraw) = read_idx(&bytes)?;
                if ldims.len() != 1 || ldims[0] < n {
                    return Err(IoError::Format("IDX labels do not match the images".into()));
                }
                lraw[..n].iter().map(|&l| Some(l as usize)).collect()
            }
            None => vec![None; n],
        };
        Self::from_images(imgs, labels, patch)
    }

    pub fn image(&self, index: usize) -> Result<Image, IoError> {
        unpatchify(
            &self.examples[index],
            self.height,
            self.width,
            self.channels,
            self.patch,
        )
        .map_err(|e| IoError::Format(e.to_string()))
    }
}

impl Dataset for ImageData {
    fn tokens(&self) -> usize {
        self.examples[0].tokens()
    }
    fn token_dim(&self) -> usize {
        self.examples[0].dim()
    }
    fn num_classes(&self) -> usize {
        self.num_classes
    }
    fn len(&self) -> usize {
        self.examples.len()
    }
    fn example(&self, index: usize, _: &mut ChaCha8Rng, out: &mut [f64]) -> Option<usize> {
        out.copy_from_slice(self.examples[index].data());
        self.labels[index]
    }
}

fn sorted_entries(dir: &Path) -> Result<Vec<std::path::PathBuf>, IoError> {
    let mut v = std::fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<Result<Vec<_>, _>>()?;
    v.sort();
    Ok(v)
}

fn is_pnm(p: &Path) -> bool {
    p.is_file() && matches!(p.extension().and_then(|e| e.to_str()), Some("pgm" | "ppm"))
}

/// Parses an IDX file holding unsigned bytes. Dimensions are big-endian, as
/// the format prescribes.
pub fn read_idx(bytes: &[u8]) -> Result<(Vec<usize>, &[u8]), IoError> {
    let bad = |m: &str| IoError::Format(format!("IDX: {m}"));
    if bytes.len() < 4 || bytes[0] != 0 || bytes[1] != 0 {
        return Err(bad("bad magic"));
    }
    if bytes[2] != 0x08 {
        return Err(bad("only unsigned-byte data is supported"));
    }
    let rank = bytes[3] as usize;
    let body = 4 + 4 * rank;
    if bytes.len() < body {
        return Err(bad("truncated header"));
    }
    let dims: Vec<usize> = (0..rank)
        .map(|i| u32::from_be_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize)
        .collect();
    let n: usize = dims.iter().product();
    let data = bytes.get(body..body + n).ok_or_else(|| bad("truncated data"))?;
    Ok((dims, data))
}

pub fn encode_idx(dims: &[usize], data: &[u8]) -> Vec<u8> {
    let mut out = vec![0, 0, 0x08, dims.len() as u8];
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(data);
    out
}
