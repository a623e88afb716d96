//! Batched forward pass recorded on an autodiff graph.

use super::params::FlowStack;
use super::{fourier_time_embedding, FlowError, Result, LOG_SIGMA_BOUND};
use crate::autodiff::{Graph, Real, Var};

pub(crate) const LN_EPS: f64 = 1e-5;

/// Per-sample conditioning of a batch: embedding-table rows and noise levels.
#[derive(Debug, Clone)]
pub(crate) struct Conditioning {
    pub rows: Vec<usize>,
    pub t: Vec<f64>,
}

/// Graph handles of every model parameter, in layout order.
pub(crate) struct Bound<'g, T: Real> {
    pub vars: Vec<Var<'g, T>>,
    time: Var<'g, T>,
    /// `[B, C + 1]` selector: the null row plus the sample's class offset.
    classes: Var<'g, T>,
    mask: Option<Var<'g, T>>,
}

pub(crate) struct BlockOutput<'g, T: Real> {
    pub z: Var<'g, T>,
    pub mu: Var<'g, T>,
    pub log_sigma: Var<'g, T>,
    /// `-Σ log σ` per sample, shape `[B]`.
    pub neg_log_sigma: Var<'g, T>,
}

fn check_finite<T: Real>(v: Var<'_, T>, stage: &'static str, block: usize) -> Result<()> {
    v.with_value(|data| {
        if data.iter().all(|x| x.is_finite()) {
            Ok(())
        } else {
            Err(FlowError::NonFinite {
                stage,
                block,
                token: None,
            })
        }
    })
}

impl<T: Real> FlowStack<T> {
    /// Records the parameters on `g`. With `trainable`, they are leaves that
    /// receive gradients.
    pub(crate) fn bind<'g>(&self, g: &'g Graph<T>, cond: &Conditioning, trainable: bool) -> Result<Bound<'g, T>> {
        let cfg = self.config();
        let vars = self
            .params()
            .iter()
            .map(|p| {
                if trainable {
                    g.leaf(&p.tensor.clone().with_grad())
                } else {
                    g.leaf(&p.tensor)
                }
            })
            .collect();
        let mut time = Vec::with_capacity(cond.t.len() * cfg.time_dim);
        for &t in &cond.t {
            time.extend(fourier_time_embedding(t, cfg.time_dim)?.into_iter().map(T::lit));
        }
        let time = g.constant(vec![cond.t.len(), cfg.time_dim], time)?;
        let rows = cfg.num_classes + 1;
        let mut select = vec![T::zero(); cond.rows.len() * rows];
        for (b, &r) in cond.rows.iter().enumerate() {
            select[b * rows + cfg.num_classes] = T::one();
            select[b * rows + r] = T::one();
        }
        let classes = g.constant(vec![cond.rows.len(), rows], select)?;
        let n = cfg.tokens;
        let mask = if n > 1 {
            let mut m = vec![T::zero(); n * n];
            for i in 0..n {
                for j in i + 1..n {
                    m[i * n + j] = T::neg_infinity();
                }
            }
            Some(g.constant(vec![n, n], m)?)
        } else {
            None
        };
        Ok(Bound {
            vars,
            time,
            classes,
            mask,
        })
    }

    /// One block applied to `x` of shape `[B, N, d]`.
    pub(crate) fn graph_block<'g>(
        &self,
        bound: &Bound<'g, T>,
        cond: &Conditioning,
        block: usize,
        x: Var<'g, T>,
    ) -> Result<BlockOutput<'g, T>> {
        let cfg = self.config();
        let lay = &self.blocks[block];
        let p = |i: usize| bound.vars[i];
        let g = x.graph();
        let (b, n, d, w) = (cond.rows.len(), cfg.tokens, cfg.token_dim, cfg.width);
        let heads = cfg.heads;
        let dh = w / heads;

        let lead = g.zeros(vec![b, 1, d])?;
        let shifted = if n > 1 {
            g.concat(&[lead, x.slice(1, 0, n - 1)?], 1)?
        } else {
            lead
        };
        let cond_row = bound
            .classes
            .matmul(p(lay.class))?
            .add(bound.time.matmul(p(lay.time_w))?)?
            .add(p(lay.time_b))?
            .reshape(vec![b, 1, w])?;
        let mut h = shifted
            .matmul(p(lay.in_w))?
            .add(p(lay.in_b))?
            .add(p(lay.pos))?
            .add(cond_row)?;

        let scale = T::one() / T::lit(dh as f64).sqrt();
        let split =
            |v: Var<'g, T>| -> Result<Var<'g, T>> { Ok(v.reshape(vec![b, n, heads, dh])?.permute(&[0, 2, 1, 3])?) };
        for l in &lay.layers {
            let a = h.layer_norm(p(l.ln1_g), p(l.ln1_b), 2, T::lit(LN_EPS))?;
            let qkv = a.matmul(p(l.qkv_w))?.add(p(l.qkv_b))?;
            let q = split(qkv.slice(2, 0, w)?)?;
            let k = split(qkv.slice(2, w, 2 * w)?)?;
            let v = split(qkv.slice(2, 2 * w, 3 * w)?)?;
            let mut scores = q.matmul(k.transpose()?)?.scale(scale);
            if let Some(mask) = bound.mask {
                scores = scores.add(mask)?;
            }
            let attn = scores
                .softmax(3)?
                .matmul(v)?
                .permute(&[0, 2, 1, 3])?
                .reshape(vec![b, n, w])?;
            h = h.add(attn.matmul(p(l.o_w))?.add(p(l.o_b))?)?;
            let m = h
                .layer_norm(p(l.ln2_g), p(l.ln2_b), 2, T::lit(LN_EPS))?
                .matmul(p(l.fc1_w))?
                .add(p(l.fc1_b))?
                .gelu()
                .matmul(p(l.fc2_w))?
                .add(p(l.fc2_b))?;
            h = h.add(m)?;
        }
        let out = h
            .layer_norm(p(lay.ln_g), p(lay.ln_b), 2, T::lit(LN_EPS))?
            .matmul(p(lay.head_w))?
            .add(p(lay.head_b))?;
        let bound_ls = T::lit(LOG_SIGMA_BOUND);
        let mu = out.slice(2, 0, d)?;
        let log_sigma = out
            .slice(2, d, 2 * d)?
            .scale(T::one() / bound_ls)
            .tanh()
            .scale(bound_ls);
        check_finite(mu, "affine parameters", block)?;
        let z = x.sub(mu)?.mul(log_sigma.neg().exp())?;
        check_finite(z, "forward map", block)?;
        let neg_log_sigma = log_sigma.reshape(vec![b, n * d])?.sum_axis(1)?.neg();
        Ok(BlockOutput {
            z,
            mu,
            log_sigma,
            neg_log_sigma,
        })
    }

    /// All blocks with flips in between. Returns `z` and the per-sample
    /// log-determinant of shape `[B]`.
    pub(crate) fn graph_stack<'g>(
        &self,
        bound: &Bound<'g, T>,
        cond: &Conditioning,
        x: Var<'g, T>,
    ) -> Result<(Var<'g, T>, Var<'g, T>)> {
        let blocks = self.config().num_blocks();
        let mut h = x;
        let mut log_det: Option<Var<'g, T>> = None;
        for block in 0..blocks {
            let out = self.graph_block(bound, cond, block, h)?;
            log_det = Some(match log_det {
                Some(acc) => acc.add(out.neg_log_sigma)?,
                None => out.neg_log_sigma,
            });
            h = if block + 1 < blocks { out.z.reverse(1)? } else { out.z };
        }
        Ok((h, log_det.expect("at least one block")))
    }

    /// Per-sample `log p(x | t, y)` of shape `[B]`.
    pub(crate) fn graph_log_likelihood<'g>(
        &self,
        bound: &Bound<'g, T>,
        cond: &Conditioning,
        x: Var<'g, T>,
    ) -> Result<Var<'g, T>> {
        let cfg = self.config();
        let (b, dim) = (cond.rows.len(), cfg.total_dim());
        let (z, log_det) = self.graph_stack(bound, cond, x)?;
        let constant = -0.5 * dim as f64 * (2.0 * std::f64::consts::PI).ln();
        let ll = z
            .mul(z)?
            .reshape(vec![b, dim])?
            .sum_axis(1)?
            .scale(T::lit(-0.5))
            .add_scalar(T::lit(constant))
            .add(log_det)?;
        check_finite(ll, "log-likelihood", cfg.num_blocks() - 1)?;
        Ok(ll)
    }
}
