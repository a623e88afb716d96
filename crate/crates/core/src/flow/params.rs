use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{FlowError, Result};
use crate::autodiff::{Real, Tensor};

/// Architecture of a flow stack.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlowConfig {
    /// Sequence length `N`.
    pub tokens: usize,
    /// Token dimension `d`.
    pub token_dim: usize,
    /// Attention-layer count of each block; its length is `L`.
    pub layers: Vec<usize>,
    pub width: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub time_dim: usize,
    /// Number of real classes. The embedding table has one extra row: the
    /// last row is the null-class embedding and the rows before it are
    /// per-class offsets added to it.
    pub num_classes: usize,
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(FlowError::Config(m));
        if self.tokens == 0 || self.token_dim == 0 {
            return fail("tokens and token_dim must be positive".into());
        }
        if self.layers.is_empty() {
            return fail("at least one block is required".into());
        }
        if self.width == 0 || self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            return fail(format!(
                "width {} must be a positive multiple of heads {}",
                self.width, self.heads
            ));
        }
        if self.mlp_ratio == 0 {
            return fail("mlp_ratio must be positive".into());
        }
        if self.time_dim == 0 || !self.time_dim.is_multiple_of(2) {
            return fail(format!("time_dim must be even and positive, got {}", self.time_dim));
        }
        Ok(())
    }

    pub fn num_blocks(&self) -> usize {
        self.layers.len()
    }

    pub fn total_dim(&self) -> usize {
        self.tokens * self.token_dim
    }

    pub fn null_class(&self) -> usize {
        self.num_classes
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor<T: Real = f32> {
    pub name: String,
    pub tensor: Tensor<T>,
}

#[derive(Debug, Clone)]
pub(crate) struct LayerLayout {
    pub ln1_g: usize,
    pub ln1_b: usize,
    pub qkv_w: usize,
    pub qkv_b: usize,
    pub o_w: usize,
    pub o_b: usize,
    pub ln2_g: usize,
    pub ln2_b: usize,
    pub fc1_w: usize,
    pub fc1_b: usize,
    pub fc2_w: usize,
    pub fc2_b: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct BlockLayout {
    pub in_w: usize,
    pub in_b: usize,
    pub pos: usize,
    pub class: usize,
    pub time_w: usize,
    pub time_b: usize,
    pub layers: Vec<LayerLayout>,
    pub ln_g: usize,
    pub ln_b: usize,
    pub head_w: usize,
    pub head_b: usize,
}

#[derive(Clone, Copy)]
enum Init {
    Zeros,
    Ones,
    Normal(f64),
    /// Class table: unit-normal null row, class offsets with the given scale.
    Classes(f64),
}

struct Spec {
    name: String,
    shape: Vec<usize>,
    init: Init,
}

fn layout(config: &FlowConfig, head_std: f64) -> (Vec<Spec>, Vec<BlockLayout>) {
    let mut specs = Vec::new();
    let mut add = |name: String, shape: Vec<usize>, init: Init| {
        specs.push(Spec { name, shape, init });
        specs.len() - 1
    };
    let w = config.width;
    let f = w * config.mlp_ratio;
    let d = config.token_dim;
    let fan = |n: usize| Init::Normal(1.0 / (n as f64).sqrt());
    let mut blocks = Vec::new();
    for (b, &n_layers) in config.layers.iter().enumerate() {
        let p = |s: &str| format!("block{b}.{s}");
        let in_w = add(p("in.weight"), vec![d, w], fan(d));
        let in_b = add(p("in.bias"), vec![w], Init::Zeros);
        let pos = add(p("pos"), vec![config.tokens, w], Init::Normal(0.02));
        let offsets = if head_std == 0.0 { 0.0 } else { 1.0 };
        let class = add(p("class"), vec![config.num_classes + 1, w], Init::Classes(offsets));
        let time_w = add(p("time.weight"), vec![config.time_dim, w], fan(config.time_dim));
        let time_b = add(p("time.bias"), vec![w], Init::Zeros);
        let mut layers = Vec::new();
        for l in 0..n_layers {
            let q = |s: &str| format!("block{b}.layer{l}.{s}");
            layers.push(LayerLayout {
                ln1_g: add(q("ln1.scale"), vec![w], Init::Ones),
                ln1_b: add(q("ln1.shift"), vec![w], Init::Zeros),
                qkv_w: add(q("attn.qkv.weight"), vec![w, 3 * w], fan(w)),
                qkv_b: add(q("attn.qkv.bias"), vec![3 * w], Init::Zeros),
                o_w: add(q("attn.out.weight"), vec![w, w], fan(w)),
                o_b: add(q("attn.out.bias"), vec![w], Init::Zeros),
                ln2_g: add(q("ln2.scale"), vec![w], Init::Ones),
                ln2_b: add(q("ln2.shift"), vec![w], Init::Zeros),
                fc1_w: add(q("mlp.fc1.weight"), vec![w, f], fan(w)),
                fc1_b: add(q("mlp.fc1.bias"), vec![f], Init::Zeros),
                fc2_w: add(q("mlp.fc2.weight"), vec![f, w], fan(f)),
                fc2_b: add(q("mlp.fc2.bias"), vec![w], Init::Zeros),
            });
        }
        let ln_g = add(p("ln.scale"), vec![w], Init::Ones);
        let ln_b = add(p("ln.shift"), vec![w], Init::Zeros);
        let head_init = if head_std == 0.0 {
            Init::Zeros
        } else {
            Init::Normal(head_std)
        };
        let head_w = add(p("head.weight"), vec![w, 2 * d], head_init);
        let head_b = add(p("head.bias"), vec![2 * d], head_init);
        blocks.push(BlockLayout {
            in_w,
            in_b,
            pos,
            class,
            time_w,
            time_b,
            layers,
            ln_g,
            ln_b,
            head_w,
            head_b,
        });
    }
    (specs, blocks)
}

/// Parameters of `L` causal flow blocks.
#[derive(Debug, Clone)]
pub struct FlowStack<T: Real = f32> {
    config: FlowConfig,
    params: Vec<NamedTensor<T>>,
    pub(crate) blocks: Vec<BlockLayout>,
}

impl<T: Real> FlowStack<T> {
    /// Fresh model whose blocks are all the identity map: every output head
    /// is zero, so `μ = 0` and `log σ = 0`. Class offsets start at zero.
    pub fn new(config: FlowConfig, seed: u64) -> Result<Self> {
        Self::init(config, seed, 0.0)
    }

    /// Fresh model with randomly initialized output heads (standard
    /// deviation `head_std`) and class offsets, giving non-trivial affine maps.
    pub fn random(config: FlowConfig, seed: u64, head_std: f64) -> Result<Self> {
        Self::init(config, seed, head_std)
    }

    fn init(config: FlowConfig, seed: u64, head_std: f64) -> Result<Self> {
        config.validate()?;
        let (specs, blocks) = layout(&config, head_std);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = specs
            .into_iter()
            .map(|s| {
                let n: usize = s.shape.iter().product();
                let data: Vec<T> = match s.init {
                    Init::Zeros => vec![T::zero(); n],
                    Init::Ones => vec![T::one(); n],
                    Init::Normal(std) => (0..n)
                        .map(|_| {
                            let v: f64 = StandardNormal.sample(&mut rng);
                            T::lit(v * std)
                        })
                        .collect(),
                    Init::Classes(std) => {
                        let null_from = n - s.shape[1];
                        (0..n)
                            .map(|i| {
                                let v: f64 = StandardNormal.sample(&mut rng);
                                let scale = if i >= null_from { 1.0 } else { std };
                                T::lit(v * scale)
                            })
                            .collect()
                    }
                };
                NamedTensor {
                    name: s.name,
                    tensor: Tensor::new(s.shape, data).expect("layout shapes are valid"),
                }
            })
            .collect();
        Ok(Self { config, params, blocks })
    }

    /// Rebuilds a stack from stored tensors, which must match the layout of
    /// `config` by name, order and shape.
    pub fn from_params(config: FlowConfig, params: Vec<NamedTensor<T>>) -> Result<Self> {
        config.validate()?;
        let (specs, blocks) = layout(&config, 0.0);
        if specs.len() != params.len() {
            return Err(FlowError::Config(format!(
                "expected {} parameter tensors, got {}",
                specs.len(),
                params.len()
            )));
        }
        for (s, p) in specs.iter().zip(&params) {
            if s.name != p.name || s.shape != p.tensor.shape() {
                return Err(FlowError::Config(format!(
                    "parameter {} {:?} does not match expected {} {:?}",
                    p.name,
                    p.tensor.shape(),
                    s.name,
                    s.shape
                )));
            }
        }
        Ok(Self { config, params, blocks })
    }

    pub fn config(&self) -> &FlowConfig {
        &self.config
    }

    pub fn params(&self) -> &[NamedTensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [NamedTensor<T>] {
        &mut self.params
    }

    pub fn into_params(self) -> Vec<NamedTensor<T>> {
        self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    pub(crate) fn tensor(&self, idx: usize) -> &Tensor<T> {
        &self.params[idx].tensor
    }

    pub fn find(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.tensor)
    }

    pub fn find_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.params.iter_mut().find(|p| p.name == name).map(|p| &mut p.tensor)
    }

    /// Same parameters in another precision.
    pub fn cast<U: Real>(&self) -> FlowStack<U> {
        FlowStack {
            config: self.config.clone(),
            params: self
                .params
                .iter()
                .map(|p| NamedTensor {
                    name: p.name.clone(),
                    tensor: p.tensor.cast(),
                })
                .collect(),
            blocks: self.blocks.clone(),
        }
    }
}
