//! Token-at-a-time evaluation without a graph, used by the inverse.
//!
//! A block is evaluated one position at a time. Keys and values of earlier
//! positions are kept in a [`BlockCache`], so generating `N` tokens costs `N`
//! transformer-token evaluations. Every position goes through the same
//! arithmetic regardless of how the cache was filled, which makes the cached
//! and from-scratch inverses agree bitwise.

use super::forward::LN_EPS;
use super::params::FlowStack;
use super::{fourier_time_embedding, FlowError, Result, LOG_SIGMA_BOUND};
use crate::autodiff::{Real, GELU_A, GELU_C};

/// Attention state of one block for one sample.
#[derive(Debug, Clone)]
pub struct BlockCache<T: Real = f32> {
    block: usize,
    cond: Vec<T>,
    keys: Vec<Vec<T>>,
    values: Vec<Vec<T>>,
    len: usize,
}

impl<T: Real> BlockCache<T> {
    /// Number of positions already evaluated.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn block(&self) -> usize {
        self.block
    }
}

/// `out = x·W + b` for a row vector `x` and row-major `W` of shape `[x.len(), out.len()]`.
fn affine<T: Real>(x: &[T], w: &[T], b: &[T], out: &mut [T]) {
    let n = out.len();
    out.fill(T::zero());
    for (i, &xi) in x.iter().enumerate() {
        for (o, &wij) in out.iter_mut().zip(&w[i * n..(i + 1) * n]) {
            *o += xi * wij;
        }
    }
    for (o, &bj) in out.iter_mut().zip(b) {
        *o += bj;
    }
}

fn layer_norm<T: Real>(x: &[T], g: &[T], b: &[T]) -> Vec<T> {
    let inv = T::one() / T::lit(x.len() as f64);
    let mut mean = T::zero();
    for &v in x {
        mean += v;
    }
    mean *= inv;
    let mut var = T::zero();
    for &v in x {
        let d = v - mean;
        var += d * d;
    }
    var *= inv;
    let r = T::one() / (var + T::lit(LN_EPS)).sqrt();
    x.iter()
        .zip(g.iter().zip(b))
        .map(|(&v, (&gi, &bi))| (v - mean) * r * gi + bi)
        .collect()
}

fn gelu<T: Real>(x: T) -> T {
    let c = T::lit(GELU_C);
    let a = T::lit(GELU_A);
    T::lit(0.5) * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

impl<T: Real> FlowStack<T> {
    pub(crate) fn class_row(&self, y: Option<usize>) -> Result<usize> {
        let c = self.config().num_classes;
        match y {
            None => Ok(c),
            Some(k) if k < c => Ok(k),
            Some(k) => Err(FlowError::Class {
                class: k,
                num_classes: c,
            }),
        }
    }

    /// Empty cache for `block` under noise level `t` and class `y`
    /// (`None` selects the null class).
    pub fn block_cache(&self, block: usize, t: f64, y: Option<usize>) -> Result<BlockCache<T>> {
        let cfg = self.config();
        if block >= cfg.num_blocks() {
            return Err(FlowError::Config(format!(
                "block {block} out of range for {} blocks",
                cfg.num_blocks()
            )));
        }
        let row = self.class_row(y)?;
        let lay = &self.blocks[block];
        let w = cfg.width;
        let emb: Vec<T> = fourier_time_embedding(t, cfg.time_dim)?
            .into_iter()
            .map(T::lit)
            .collect();
        let mut cond = vec![T::zero(); w];
        affine(
            &emb,
            self.tensor(lay.time_w).data(),
            self.tensor(lay.time_b).data(),
            &mut cond,
        );
        let table = self.tensor(lay.class).data();
        let null = cfg.num_classes;
        let mut class = table[null * w..(null + 1) * w].to_vec();
        if row != null {
            for (c, &o) in class.iter_mut().zip(&table[row * w..(row + 1) * w]) {
                *c += o;
            }
        }
        for (c, &e) in cond.iter_mut().zip(&class) {
            *c += e;
        }
        let n_layers = lay.layers.len();
        Ok(BlockCache {
            block,
            cond,
            keys: vec![Vec::with_capacity(cfg.tokens * w); n_layers],
            values: vec![Vec::with_capacity(cfg.tokens * w); n_layers],
            len: 0,
        })
    }

    /// Evaluates the next position of the cached block. `prev` is the block
    /// input at the previous position and must be `None` exactly at position 0.
    /// Returns `(μ, log σ)` for the new position.
    pub fn block_step(&self, cache: &mut BlockCache<T>, prev: Option<&[T]>) -> Result<(Vec<T>, Vec<T>)> {
        let cfg = self.config();
        let pos = cache.len;
        let (d, w) = (cfg.token_dim, cfg.width);
        if pos >= cfg.tokens {
            return Err(FlowError::Batch(format!(
                "block cache already holds {} positions",
                cfg.tokens
            )));
        }
        match prev {
            None if pos != 0 => return Err(FlowError::Batch("missing previous token".into())),
            Some(_) if pos == 0 => return Err(FlowError::Batch("position 0 has no previous token".into())),
            Some(p) if p.len() != d => {
                return Err(FlowError::Shape {
                    expected: (1, d),
                    got: (1, p.len()),
                })
            }
            _ => {}
        }
        let lay = &self.blocks[cache.block];
        let data = |i: usize| self.tensor(i).data();

        let mut h = vec![T::zero(); w];
        let zero = vec![T::zero(); d];
        affine(prev.unwrap_or(&zero), data(lay.in_w), data(lay.in_b), &mut h);
        let pos_row = &data(lay.pos)[pos * w..(pos + 1) * w];
        for ((hv, &pv), &cv) in h.iter_mut().zip(pos_row).zip(&cache.cond) {
            *hv = *hv + pv + cv;
        }

        let heads = cfg.heads;
        let dh = w / heads;
        let scale = T::one() / T::lit(dh as f64).sqrt();
        let f = w * cfg.mlp_ratio;
        let mut qkv = vec![T::zero(); 3 * w];
        let mut proj = vec![T::zero(); w];
        let mut hidden = vec![T::zero(); f];
        for (li, l) in lay.layers.iter().enumerate() {
            let a = layer_norm(&h, data(l.ln1_g), data(l.ln1_b));
            affine(&a, data(l.qkv_w), data(l.qkv_b), &mut qkv);
            cache.keys[li].extend_from_slice(&qkv[w..2 * w]);
            cache.values[li].extend_from_slice(&qkv[2 * w..]);
            let keys = &cache.keys[li];
            let values = &cache.values[li];
            let mut attn = vec![T::zero(); w];
            let mut weights = vec![T::zero(); pos + 1];
            for hd in 0..heads {
                let q = &qkv[hd * dh..(hd + 1) * dh];
                let mut max = T::neg_infinity();
                for (m, s) in weights.iter_mut().enumerate() {
                    let k = &keys[m * w + hd * dh..m * w + (hd + 1) * dh];
                    let mut dot = T::zero();
                    for (&qi, &ki) in q.iter().zip(k) {
                        dot += qi * ki;
                    }
                    *s = dot * scale;
                    max = max.max(*s);
                }
                let mut total = T::zero();
                for s in weights.iter_mut() {
                    *s = (*s - max).exp();
                    total += *s;
                }
                let out = &mut attn[hd * dh..(hd + 1) * dh];
                for (m, &s) in weights.iter().enumerate() {
                    let p = s / total;
                    let v = &values[m * w + hd * dh..m * w + (hd + 1) * dh];
                    for (o, &vi) in out.iter_mut().zip(v) {
                        *o += p * vi;
                    }
                }
            }
            affine(&attn, data(l.o_w), data(l.o_b), &mut proj);
            for (hv, &pv) in h.iter_mut().zip(&proj) {
                *hv += pv;
            }
            let a = layer_norm(&h, data(l.ln2_g), data(l.ln2_b));
            affine(&a, data(l.fc1_w), data(l.fc1_b), &mut hidden);
            for v in hidden.iter_mut() {
                *v = gelu(*v);
            }
            affine(&hidden, data(l.fc2_w), data(l.fc2_b), &mut proj);
            for (hv, &pv) in h.iter_mut().zip(&proj) {
                *hv += pv;
            }
        }
        let a = layer_norm(&h, data(lay.ln_g), data(lay.ln_b));
        let mut out = vec![T::zero(); 2 * d];
        affine(&a, data(lay.head_w), data(lay.head_b), &mut out);
        cache.len += 1;
        let bound = T::lit(LOG_SIGMA_BOUND);
        let mu = out[..d].to_vec();
        let ls: Vec<T> = out[d..].iter().map(|&r| bound * (r / bound).tanh()).collect();
        if mu.iter().chain(&ls).any(|v| !v.is_finite()) {
            return Err(FlowError::NonFinite {
                stage: "affine parameters",
                block: cache.block,
                token: Some(pos),
            });
        }
        Ok((mu, ls))
    }

    /// Sequential inverse of one block with an incremental attention cache.
    pub(crate) fn rows_block_inverse(&self, block: usize, z: &[T], t: f64, y: Option<usize>) -> Result<Vec<T>> {
        let d = self.config().token_dim;
        let mut cache = self.block_cache(block, t, y)?;
        let mut x = vec![T::zero(); z.len()];
        for n in 0..self.config().tokens {
            let prev = if n == 0 { None } else { Some(&x[(n - 1) * d..n * d]) };
            let (mu, ls) = self.block_step(&mut cache, prev)?;
            invert_token(&mut x[n * d..(n + 1) * d], &z[n * d..(n + 1) * d], &mu, &ls, block, n)?;
        }
        Ok(x)
    }

    /// Reference inverse that re-evaluates the whole prefix for every token.
    pub(crate) fn rows_block_inverse_naive(&self, block: usize, z: &[T], t: f64, y: Option<usize>) -> Result<Vec<T>> {
        let d = self.config().token_dim;
        let mut x = vec![T::zero(); z.len()];
        for n in 0..self.config().tokens {
            let mut cache = self.block_cache(block, t, y)?;
            let mut params = self.block_step(&mut cache, None)?;
            for m in 1..=n {
                params = self.block_step(&mut cache, Some(&x[(m - 1) * d..m * d]))?;
            }
            let (mu, ls) = params;
            invert_token(&mut x[n * d..(n + 1) * d], &z[n * d..(n + 1) * d], &mu, &ls, block, n)?;
        }
        Ok(x)
    }
}

pub(crate) fn invert_token<T: Real>(
    x: &mut [T],
    z: &[T],
    mu: &[T],
    ls: &[T],
    block: usize,
    token: usize,
) -> Result<()> {
    for i in 0..x.len() {
        x[i] = mu[i] + ls[i].exp() * z[i];
        if !x[i].is_finite() {
            return Err(FlowError::NonFinite {
                stage: "inverse map",
                block,
                token: Some(token),
            });
        }
    }
    Ok(())
}
