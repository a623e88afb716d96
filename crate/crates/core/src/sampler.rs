//! Two-phase generation: autoregressive inversion at `t_max`, then
//! denoising by integrating `dx = −t·∇ log p(x, t) dt` down to `t_min`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Real;
use crate::flow::{ClassId, FlowError, FlowStack, TokenSequence};
use crate::oracle::{gmm_score_noised, GaussianMixture};

#[derive(Debug, Error)]
pub enum SampleError {
    #[error("invalid sample request: {0}")]
    Request(String),
    #[error("non-finite state after denoising step {step}")]
    NonFinite { step: usize },
    #[error(transparent)]
    Flow(#[from] FlowError),
}

pub type Result<T> = std::result::Result<T, SampleError>;

/// Which affine parameters classifier-free guidance extrapolates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Guidance {
    #[default]
    MuAndLogSigma,
    MuOnly,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleRequest {
    pub count: usize,
    pub class: ClassId,
    /// Guidance scale `w ≥ 1`; `1` is plain conditional sampling.
    pub cfg_scale: f64,
    pub guidance: Guidance,
    /// Euler steps of the denoising ODE.
    pub steps: usize,
    pub t_max: f64,
    pub t_min: f64,
    pub final_tweedie: bool,
    pub seed: u64,
}

impl SampleRequest {
    pub fn new(count: usize, t_max: f64) -> Self {
        Self {
            count,
            class: None,
            cfg_scale: 1.0,
            guidance: Guidance::default(),
            steps: 10,
            t_max,
            t_min: 0.01,
            final_tweedie: true,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(SampleError::Request(m));
        if self.steps == 0 {
            return fail("steps must be at least 1".into());
        }
        if !(self.t_min > 0.0) || !(self.t_max > self.t_min) || !self.t_max.is_finite() {
            return fail(format!("need 0 < t_min < t_max, got {} and {}", self.t_min, self.t_max));
        }
        if !(self.cfg_scale >= 1.0) || !self.cfg_scale.is_finite() {
            return fail(format!("cfg scale must be >= 1, got {}", self.cfg_scale));
        }
        Ok(())
    }
}

/// Anything that can evaluate `∇_x log p(x | t, y)` on a flat batch.
pub trait ScoreModel: Sync {
    fn total_dim(&self) -> usize;
    fn score_batch(&self, x: &[f64], t: &[f64], y: &[ClassId]) -> Result<Vec<f64>>;
}

impl<T: Real> ScoreModel for FlowStack<T> {
    fn total_dim(&self) -> usize {
        self.config().total_dim()
    }
    fn score_batch(&self, x: &[f64], t: &[f64], y: &[ClassId]) -> Result<Vec<f64>> {
        Ok(FlowStack::score_batch(self, x, t, y)?)
    }
}

/// Exact score of a noised Gaussian mixture. A class selects its component;
/// the null class uses the whole mixture.
#[derive(Debug, Clone)]
pub struct MixtureScore {
    pub mixture: GaussianMixture,
}

impl ScoreModel for MixtureScore {
    fn total_dim(&self) -> usize {
        self.mixture.dim()
    }
    fn score_batch(&self, x: &[f64], t: &[f64], y: &[ClassId]) -> Result<Vec<f64>> {
        let d = self.mixture.dim();
        let mut out = Vec::with_capacity(x.len());
        for (i, (&ti, &yi)) in t.iter().zip(y).enumerate() {
            let point = &x[i * d..(i + 1) * d];
            match yi {
                Some(k) if k < self.mixture.num_components() => {
                    out.extend(gmm_score_noised(point, ti, &self.mixture.component(k)))
                }
                Some(k) => return Err(SampleError::Request(format!("mixture has no component {k}"))),
                None => out.extend(gmm_score_noised(point, ti, &self.mixture)),
            }
        }
        Ok(out)
    }
}

/// Guided affine parameters for one token: `w·cond + (1 − w)·uncond`, which
/// equals `uncond + w·(cond − uncond)` and is exactly `cond` at `w = 1`.
pub fn cfg_combine<T: Real>(cond: (&[T], &[T]), uncond: (&[T], &[T]), w: f64, guidance: Guidance) -> (Vec<T>, Vec<T>) {
    let w_t = T::lit(w);
    let rest = T::lit(1.0 - w);
    let mix = |c: &[T], u: &[T]| -> Vec<T> { c.iter().zip(u).map(|(&c, &u)| w_t * c + rest * u).collect() };
    let mu = mix(cond.0, uncond.0);
    let ls = match guidance {
        Guidance::MuAndLogSigma => mix(cond.1, uncond.1),
        Guidance::MuOnly => cond.1.to_vec(),
    };
    (mu, ls)
}

pub const THREADS_ENV: &str = "ITARFLOW_THREADS";

/// Parses a thread-count setting; `None` or `0` means automatic.
pub fn parse_threads(value: Option<&str>) -> std::result::Result<Option<usize>, String> {
    match value.map(str::trim) {
        None | Some("") => Ok(None),
        Some(v) => match v.parse::<usize>() {
            Ok(0) => Ok(None),
            Ok(n) => Ok(Some(n)),
            Err(_) => Err(format!("{THREADS_ENV} must be a non-negative integer, got {v:?}")),
        },
    }
}

/// Worker threads for sample-parallel work, from `ITARFLOW_THREADS`
/// (unset, `0` or unparsable means all available cores).
pub fn thread_count() -> usize {
    let auto = || std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    let value = std::env::var(THREADS_ENV).ok();
    parse_threads(value.as_deref()).ok().flatten().unwrap_or_else(auto)
}

/// Samples per work unit. Fixed so that results do not depend on the thread count.
const CHUNK: usize = 256;

/// Runs `f` over consecutive chunks of `items` (each `width` values wide)
/// on up to [`thread_count`] threads, concatenating the outputs in order.
fn parallel_chunks<F>(items: usize, width: usize, f: F) -> Result<Vec<f64>>
where
    F: Fn(usize, usize) -> Result<Vec<f64>> + Sync,
{
    let chunks: Vec<(usize, usize)> = (0..items).step_by(CHUNK).map(|s| (s, (s + CHUNK).min(items))).collect();
    let threads = thread_count().min(chunks.len()).max(1);
    let mut results: Vec<Option<Result<Vec<f64>>>> = (0..chunks.len()).map(|_| None).collect();
    if threads == 1 {
        for (slot, &(s, e)) in results.iter_mut().zip(&chunks) {
            *slot = Some(f(s, e));
        }
    } else {
        std::thread::scope(|scope| {
            let per = chunks.len().div_ceil(threads);
            for (slots, ranges) in results.chunks_mut(per).zip(chunks.chunks(per)) {
                let f = &f;
                scope.spawn(move || {
                    for (slot, &(s, e)) in slots.iter_mut().zip(ranges) {
                        *slot = Some(f(s, e));
                    }
                });
            }
        });
    }
    let mut out = Vec::with_capacity(items * width);
    for r in results {
        out.extend(r.expect("every chunk is evaluated")?);
    }
    Ok(out)
}

/// Prior draw `z ~ N(0, I)` of sample `index`. Every sample has its own
/// stream, so a sample does not depend on how many others are drawn.
pub fn prior_draw(seed: u64, index: usize, dim: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect()
}

/// Inverts the stack from prior draw `z` at noise level `t_max`, applying
/// guidance only while inverting the first block in forward order.
pub fn ar_generate_from<T: Real>(model: &FlowStack<T>, z: &[f64], request: &SampleRequest) -> Result<Vec<f64>> {
    let cfg = model.config();
    let d = cfg.token_dim;
    let (t, y) = (request.t_max, request.class);
    let mut h: Vec<T> = z.iter().map(|&v| T::lit(v)).collect();
    for block in (1..cfg.num_blocks()).rev() {
        h = model.rows_block_inverse(block, &h, t, y)?;
        h = crate::flow::flip_rows(&h, d);
    }
    // Conditional requests always take the guided path, so `w = 1` runs the
    // same arithmetic as any other scale.
    if y.is_none() {
        h = model.rows_block_inverse(0, &h, t, y)?;
    } else {
        let mut cond = model.block_cache(0, t, y)?;
        let mut uncond = model.block_cache(0, t, None)?;
        let mut x = vec![T::zero(); h.len()];
        for n in 0..cfg.tokens {
            let prev = if n == 0 { None } else { Some(&x[(n - 1) * d..n * d]) };
            let (mu_c, ls_c) = model.block_step(&mut cond, prev)?;
            let (mu_u, ls_u) = model.block_step(&mut uncond, prev)?;
            let (mu, ls) = cfg_combine((&mu_c, &ls_c), (&mu_u, &ls_u), request.cfg_scale, request.guidance);
            crate::flow::invert_token(&mut x[n * d..(n + 1) * d], &h[n * d..(n + 1) * d], &mu, &ls, 0, n)?;
        }
        h = x;
    }
    Ok(h.iter().map(|v| v.to_f64_lossless()).collect())
}

/// `request.count` samples at noise level `t_max`, flat `count × D`.
pub fn ar_generate<T: Real>(request: &SampleRequest, model: &FlowStack<T>) -> Result<Vec<f64>> {
    request.validate()?;
    let dim = model.config().total_dim();
    parallel_chunks(request.count, dim, |s, e| {
        let mut out = Vec::with_capacity((e - s) * dim);
        for i in s..e {
            out.extend(ar_generate_from(model, &prior_draw(request.seed, i, dim), request)?);
        }
        Ok(out)
    })
}

/// Posterior-mean estimate `x̂ = x_t + t²·∇ log p(x_t)` and its source level.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoisedEstimate {
    pub x_hat: TokenSequence,
    pub t: f64,
}

pub fn tweedie_denoise<M: ScoreModel + ?Sized>(
    x_t: &TokenSequence,
    t: f64,
    y: ClassId,
    model: &M,
) -> Result<DenoisedEstimate> {
    let s = model.score_batch(x_t.data(), &[t], &[y])?;
    let data: Vec<f64> = x_t.data().iter().zip(&s).map(|(x, g)| x + t * t * g).collect();
    let x_hat = TokenSequence::new(x_t.tokens(), x_t.dim(), data).map_err(SampleError::from)?;
    Ok(DenoisedEstimate { x_hat, t })
}

/// Tweedie step applied to a flat batch at a single noise level.
pub fn tweedie_batch<M: ScoreModel + ?Sized>(x: &[f64], t: f64, y: ClassId, model: &M) -> Result<Vec<f64>> {
    let dim = model.total_dim();
    let n = x.len() / dim;
    parallel_chunks(n, dim, |s, e| {
        let xs = &x[s * dim..e * dim];
        let score = model.score_batch(xs, &vec![t; e - s], &vec![y; e - s])?;
        let out: Vec<f64> = xs.iter().zip(&score).map(|(a, g)| a + t * t * g).collect();
        if out.iter().any(|v| !v.is_finite()) {
            return Err(SampleError::NonFinite { step: 0 });
        }
        Ok(out)
    })
}

/// Noise levels `t_max = t_0 > t_1 > … > t_K = t_min` on a linear grid.
pub fn time_grid(t_max: f64, t_min: f64, steps: usize) -> Vec<f64> {
    (0..=steps)
        .map(|k| {
            if k == steps {
                t_min
            } else {
                t_max + (t_min - t_max) * k as f64 / steps as f64
            }
        })
        .collect()
}

/// Explicit Euler integration of the probability-flow ODE over a flat batch,
/// `x ← x + (t_k − t_{k+1})·t_k·score(x, t_k)`, followed by an optional
/// Tweedie step at `t_min`. The class is used without guidance.
pub fn denoise_ode<M: ScoreModel + ?Sized>(x: &[f64], request: &SampleRequest, model: &M) -> Result<Vec<f64>> {
    request.validate()?;
    let dim = model.total_dim();
    if dim == 0 || !x.len().is_multiple_of(dim) {
        return Err(SampleError::Request(format!(
            "{} values do not form samples of dimension {dim}",
            x.len()
        )));
    }
    let grid = time_grid(request.t_max, request.t_min, request.steps);
    let y = request.class;
    parallel_chunks(x.len() / dim, dim, |s, e| {
        let n = e - s;
        let mut state = x[s * dim..e * dim].to_vec();
        let labels = vec![y; n];
        for k in 0..request.steps {
            let (tk, tn) = (grid[k], grid[k + 1]);
            let score = model.score_batch(&state, &vec![tk; n], &labels)?;
            let dt = tk - tn;
            for (v, g) in state.iter_mut().zip(&score) {
                *v += dt * tk * g;
            }
            if state.iter().any(|v| !v.is_finite()) {
                return Err(SampleError::NonFinite { step: k });
            }
        }
        if request.final_tweedie {
            let t = request.t_min;
            let score = model.score_batch(&state, &vec![t; n], &labels)?;
            for (v, g) in state.iter_mut().zip(&score) {
                *v += t * t * g;
            }
            if state.iter().any(|v| !v.is_finite()) {
                return Err(SampleError::NonFinite { step: request.steps });
            }
        }
        Ok(state)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::FlowConfig;
    use crate::oracle::ode_closed_form_gaussian;

    fn config() -> FlowConfig {
        FlowConfig {
            tokens: 4,
            token_dim: 2,
            layers: vec![1, 1, 1],
            width: 16,
            heads: 2,
            mlp_ratio: 2,
            time_dim: 8,
            num_classes: 3,
        }
    }

    struct Zero(usize);
    impl ScoreModel for Zero {
        fn total_dim(&self) -> usize {
            self.0
        }
        fn score_batch(&self, x: &[f64], _: &[f64], _: &[ClassId]) -> Result<Vec<f64>> {
            Ok(vec![0.0; x.len()])
        }
    }

    /// Records every noise level it is evaluated at.
    struct Probe(std::sync::Mutex<Vec<f64>>);
    impl ScoreModel for Probe {
        fn total_dim(&self) -> usize {
            1
        }
        fn score_batch(&self, x: &[f64], t: &[f64], _: &[ClassId]) -> Result<Vec<f64>> {
            self.0.lock().unwrap().extend_from_slice(t);
            Ok(x.iter().map(|v| -v).collect())
        }
    }

    #[test]
    fn cfg_examples() {
        let (c, u) = ([1.0f64, 0.5], [0.0f64, 0.5]);
        let (ls_c, ls_u) = ([0.3f64, -0.2], [0.1f64, 0.4]);
        let (mu, ls) = cfg_combine((&c, &ls_c), (&u, &ls_u), 2.0, Guidance::MuAndLogSigma);
        assert_eq!(mu, vec![2.0, 0.5]);
        assert!((ls[0] - 0.5).abs() < 1e-15 && (ls[1] + 0.8).abs() < 1e-15);
        let (mu, ls) = cfg_combine((&c, &ls_c), (&u, &ls_u), 1.0, Guidance::MuAndLogSigma);
        assert_eq!((mu, ls), (c.to_vec(), ls_c.to_vec()));
        let (mu, ls) = cfg_combine((&c, &ls_c), (&c, &ls_c), 3.5, Guidance::MuAndLogSigma);
        for (a, b) in mu.iter().chain(&ls).zip(c.iter().chain(&ls_c)) {
            assert!((a - b).abs() < 1e-15);
        }
        let (_, ls) = cfg_combine((&c, &ls_c), (&u, &ls_u), 2.0, Guidance::MuOnly);
        assert_eq!(ls, ls_c.to_vec());
    }

    #[test]
    fn identity_model_returns_prior() {
        let m = FlowStack::<f32>::new(config(), 0).unwrap();
        let req = SampleRequest {
            class: Some(1),
            cfg_scale: 3.0,
            ..SampleRequest::new(3, 0.5)
        };
        let out = ar_generate(&req, &m).unwrap();
        for i in 0..3 {
            let z = prior_draw(0, i, 8);
            let z32: Vec<f64> = z.iter().map(|&v| v as f32 as f64).collect();
            // Three blocks, two flips: the net permutation is the identity.
            assert_eq!(&out[i * 8..(i + 1) * 8], &z32[..]);
        }
    }

    #[test]
    fn unit_guidance_is_bitwise_conditional_inverse() {
        let m = FlowStack::<f32>::random(config(), 5, 0.3).unwrap();
        let base = SampleRequest {
            class: Some(2),
            seed: 11,
            ..SampleRequest::new(4, 0.4)
        };
        let guided = ar_generate(&base, &m).unwrap();
        for i in 0..4 {
            let z: Vec<f64> = prior_draw(11, i, 8).iter().map(|&v| v as f32 as f64).collect();
            let z = TokenSequence::new(4, 2, z).unwrap();
            let plain = m.stack_inverse(&z, 0.4, Some(2)).unwrap();
            assert_eq!(&guided[i * 8..(i + 1) * 8], plain.data());
        }
        let strong = SampleRequest {
            cfg_scale: 4.0,
            ..base.clone()
        };
        assert_ne!(ar_generate(&strong, &m).unwrap(), guided);
        let mu_only = SampleRequest {
            guidance: Guidance::MuOnly,
            ..strong.clone()
        };
        assert_ne!(ar_generate(&mu_only, &m).unwrap(), ar_generate(&strong, &m).unwrap());
    }

    #[test]
    fn generation_is_reproducible_and_thread_independent() {
        let m = FlowStack::<f32>::random(config(), 7, 0.3).unwrap();
        let req = SampleRequest {
            class: Some(1),
            cfg_scale: 2.0,
            seed: 5,
            ..SampleRequest::new(300, 0.4)
        };
        let a = ar_generate(&req, &m).unwrap();
        let b = ar_generate(&req, &m).unwrap();
        assert_eq!(a, b);
        let first = ar_generate(
            &SampleRequest {
                count: 2,
                ..req.clone()
            },
            &m,
        )
        .unwrap();
        assert_eq!(&a[..16], &first[..]);
    }

    #[test]
    fn identity_tweedie_shrinks() {
        let m = FlowStack::<f64>::new(config(), 0).unwrap();
        let x = TokenSequence::new(4, 2, (0..8).map(|i| i as f64 * 0.3 - 1.0).collect()).unwrap();
        let est = tweedie_denoise(&x, 0.4, Some(0), &m).unwrap();
        for (a, b) in est.x_hat.data().iter().zip(x.data()) {
            assert!((a - b * (1.0 - 0.16)).abs() < 1e-12);
        }
        assert_eq!(est.t, 0.4);
    }

    #[test]
    fn point_mass_tweedie_is_zero() {
        // Data at 0: the noised density is N(0, t²), so the score is −x/t².
        struct PointMass;
        impl ScoreModel for PointMass {
            fn total_dim(&self) -> usize {
                2
            }
            fn score_batch(&self, x: &[f64], t: &[f64], _: &[ClassId]) -> Result<Vec<f64>> {
                Ok(x.chunks(2)
                    .zip(t)
                    .flat_map(|(p, &t)| p.iter().map(move |v| -v / (t * t)))
                    .collect())
            }
        }
        let x = TokenSequence::new(1, 2, vec![0.7, -2.0]).unwrap();
        let est = tweedie_denoise(&x, 0.3, None, &PointMass).unwrap();
        assert!(est.x_hat.data().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn zero_score_leaves_input() {
        let x = vec![0.3, -1.2, 4.0, 0.0];
        let req = SampleRequest::new(2, 0.5);
        assert_eq!(denoise_ode(&x, &req, &Zero(2)).unwrap(), x);
    }

    #[test]
    fn single_step_formula_is_exact() {
        let m = FlowStack::<f64>::random(config(), 8, 0.3).unwrap();
        let x: Vec<f64> = prior_draw(1, 0, 8);
        let req = SampleRequest {
            steps: 1,
            final_tweedie: false,
            class: Some(1),
            ..SampleRequest::new(1, 0.5)
        };
        let out = denoise_ode(&x, &req, &m).unwrap();
        let s = m.score_batch(&x, &[0.5], &[Some(1)]).unwrap();
        let expected: Vec<f64> = x.iter().zip(&s).map(|(a, g)| a + (0.5 - 0.01) * 0.5 * g).collect();
        assert_eq!(out, expected);
    }

    #[test]
    fn queries_stay_in_range() {
        let probe = Probe(Default::default());
        let req = SampleRequest {
            steps: 7,
            ..SampleRequest::new(1, 0.6)
        };
        denoise_ode(&[1.0, 2.0, 3.0], &req, &probe).unwrap();
        let seen = probe.0.into_inner().unwrap();
        assert_eq!(seen.len(), 3 * 8);
        assert!(seen.iter().all(|&t| (0.01..=0.6).contains(&t)));
        assert_eq!(seen[0], 0.6);
        assert_eq!(*seen.last().unwrap(), 0.01);
    }

    #[test]
    fn euler_matches_gaussian_closed_form() {
        let g = GaussianMixture::scalar(&[1.0], &[0.0], &[1.0]).unwrap();
        let model = MixtureScore { mixture: g };
        let err = |k: usize| {
            let req = SampleRequest {
                steps: k,
                final_tweedie: false,
                class: Some(0),
                t_min: 0.01,
                ..SampleRequest::new(1, 1.0)
            };
            let x = denoise_ode(&[1.0], &req, &model).unwrap()[0];
            let exact = ode_closed_form_gaussian(1.0, 1.0, 1.0, 0.01);
            (x - exact).abs() / exact.abs()
        };
        assert!(err(64) < 0.01);
        let ratio = err(64) / err(128);
        assert!((1.7..=2.3).contains(&ratio), "{ratio}");
    }

    #[test]
    fn thread_setting() {
        assert_eq!(parse_threads(None), Ok(None));
        assert_eq!(parse_threads(Some("0")), Ok(None));
        assert_eq!(parse_threads(Some(" 3 ")), Ok(Some(3)));
        assert!(parse_threads(Some("many")).is_err());
    }

    #[test]
    fn request_validation() {
        let mut r = SampleRequest::new(1, 0.5);
        assert!(r.validate().is_ok());
        r.cfg_scale = 0.5;
        assert!(r.validate().is_err());
        let mut r = SampleRequest::new(1, 0.5);
        r.steps = 0;
        assert!(r.validate().is_err());
        r.steps = 1;
        r.t_min = 0.6;
        assert!(r.validate().is_err());
    }
}
