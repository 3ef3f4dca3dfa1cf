//! Random-walk Metropolis sampler with per-coordinate proposals, step-size
//! adaptation during burn-in, and split-chain convergence diagnostics.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// 64-bit mix used to derive independent sub-seeds from a master seed.
/// Chains, beacons and pipeline stages each get `split_seed(master, tag)`.
pub fn split_seed(seed: u64, tag: u64) -> u64 {
    splitmix64(seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Sub-seed from a string label, for pipeline-stage tags.
pub fn split_seed_label(seed: u64, label: &str) -> u64 {
    let mut tag: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in label.as_bytes() {
        tag = (tag ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3);
    }
    split_seed(seed, tag)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct McmcConfig {
    pub chains: usize,
    pub iterations: usize,
    pub burn_in: usize,
    /// Initial proposal standard deviation per coordinate.
    pub init_step: f64,
    /// Acceptance rate the burn-in adaptation targets.
    pub adapt_target: f64,
    pub seed: u64,
}

impl Default for McmcConfig {
    fn default() -> Self {
        McmcConfig {
            chains: 4,
            iterations: 20_000,
            burn_in: 5_000,
            init_step: 0.1,
            adapt_target: 0.25,
            seed: 0,
        }
    }
}

impl McmcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.chains < 2 {
            return Err(Error::InvalidArgument("chains must be >= 2".into()));
        }
        if self.burn_in >= self.iterations {
            return Err(Error::InvalidArgument("burn_in must be < iterations".into()));
        }
        if !(self.init_step > 0.0) {
            return Err(Error::InvalidArgument("init_step must be > 0".into()));
        }
        if !(self.adapt_target > 0.0 && self.adapt_target < 1.0) {
            return Err(Error::InvalidArgument("adapt_target must be in (0,1)".into()));
        }
        Ok(())
    }
}

/// An unnormalized log density over a parameter vector. Out-of-support points
/// return negative infinity.
pub trait Target: Sync {
    fn dim(&self) -> usize;
    fn log_density(&self, theta: &[f64]) -> f64;
}

/// Coordinate-update protocol. Targets whose density is a sum of local terms
/// can evaluate the change from a single-coordinate proposal without touching
/// the rest; everything else gets the blanket full-re-evaluation via
/// [`FnTarget`].
pub trait CoordTarget: Target {
    type Cache: Send;

    fn init_cache(&self, theta: &[f64]) -> Self::Cache;

    /// Log-density change for setting `theta[idx] = value`. Must leave the
    /// accepted state in `cache` untouched (scratch space is fine).
    fn propose(&self, cache: &mut Self::Cache, theta: &[f64], idx: usize, value: f64) -> f64;

    /// Commit the proposal evaluated by the immediately preceding `propose`.
    fn accept(&self, cache: &mut Self::Cache, theta: &[f64], idx: usize, value: f64);
}

/// Wraps a plain log-density closure as a [`CoordTarget`] by full
/// re-evaluation on every proposal.
pub struct FnTarget<F> {
    dim: usize,
    f: F,
}

impl<F: Fn(&[f64]) -> f64 + Sync> FnTarget<F> {
    pub fn new(dim: usize, f: F) -> Self {
        FnTarget { dim, f }
    }
}

pub struct FnCache {
    lp: f64,
    candidate: f64,
    scratch: Vec<f64>,
}

impl<F: Fn(&[f64]) -> f64 + Sync> Target for FnTarget<F> {
    fn dim(&self) -> usize {
        self.dim
    }
    fn log_density(&self, theta: &[f64]) -> f64 {
        (self.f)(theta)
    }
}

impl<F: Fn(&[f64]) -> f64 + Sync> CoordTarget for FnTarget<F> {
    type Cache = FnCache;

    fn init_cache(&self, theta: &[f64]) -> FnCache {
        FnCache { lp: (self.f)(theta), candidate: f64::NAN, scratch: theta.to_vec() }
    }

    fn propose(&self, cache: &mut FnCache, theta: &[f64], idx: usize, value: f64) -> f64 {
        cache.scratch.copy_from_slice(theta);
        cache.scratch[idx] = value;
        cache.candidate = (self.f)(&cache.scratch);
        cache.candidate - cache.lp
    }

    fn accept(&self, cache: &mut FnCache, _theta: &[f64], _idx: usize, _value: f64) {
        cache.lp = cache.candidate;
    }
}

/// Posterior draws across chains.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorSamples {
    pub param_names: Vec<String>,
    /// draws[chain][kept_iteration][param]
    pub draws: Vec<Vec<Vec<f64>>>,
    pub acceptance_rate: Vec<f64>,
}

impl PosteriorSamples {
    pub fn n_chains(&self) -> usize {
        self.draws.len()
    }

    pub fn n_kept(&self) -> usize {
        self.draws.first().map_or(0, |c| c.len())
    }

    pub fn dim(&self) -> usize {
        self.param_names.len()
    }

    pub fn pooled(&self, param: usize) -> impl Iterator<Item = f64> + '_ {
        self.draws.iter().flat_map(move |chain| chain.iter().map(move |draw| draw[param]))
    }

    pub fn mean(&self, param: usize) -> f64 {
        let (sum, n) = self.pooled(param).fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
        sum / n as f64
    }

    pub fn sd(&self, param: usize) -> f64 {
        let m = self.mean(param);
        let (ss, n) = self.pooled(param).fold((0.0, 0usize), |(s, n), v| (s + (v - m) * (v - m), n + 1));
        (ss / (n as f64 - 1.0)).sqrt()
    }

    /// Pooled quantile by nearest-rank on the sorted draws.
    pub fn quantile(&self, param: usize, q: f64) -> f64 {
        let mut v: Vec<f64> = self.pooled(param).collect();
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let rank = ((q * v.len() as f64).ceil() as usize).clamp(1, v.len());
        v[rank - 1]
    }
}

/// Run the sampler. Chains execute with independent sub-seeds
/// (`split_seed(config.seed, chain)`); parallel and sequential execution give
/// identical output.
pub fn mcmc_sample<T: CoordTarget>(
    target: &T,
    init: &[f64],
    config: &McmcConfig,
    param_names: Vec<String>,
) -> Result<PosteriorSamples> {
    config.validate()?;
    if init.len() != target.dim() {
        return Err(Error::InvalidArgument(format!(
            "init has {} coordinates, target has {}",
            init.len(),
            target.dim()
        )));
    }
    if param_names.len() != target.dim() {
        return Err(Error::InvalidArgument("param_names length mismatch".into()));
    }
    let lp0 = target.log_density(init);
    if !lp0.is_finite() {
        return Err(Error::Sampler(format!("log density at init is {lp0}")));
    }

    let chain_results: Vec<Result<(Vec<Vec<f64>>, f64)>> = (0..config.chains)
        .into_par_iter()
        .map(|chain| run_chain(target, init, config, split_seed(config.seed, chain as u64)))
        .collect();

    let mut draws = Vec::with_capacity(config.chains);
    let mut acceptance_rate = Vec::with_capacity(config.chains);
    for r in chain_results {
        let (chain_draws, acc) = r?;
        draws.push(chain_draws);
        acceptance_rate.push(acc);
    }
    Ok(PosteriorSamples { param_names, draws, acceptance_rate })
}

fn run_chain<T: CoordTarget>(
    target: &T,
    init: &[f64],
    config: &McmcConfig,
    seed: u64,
) -> Result<(Vec<Vec<f64>>, f64)> {
    let dim = target.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut theta = init.to_vec();
    let mut cache = target.init_cache(&theta);
    let mut log_steps = vec![config.init_step.ln(); dim];

    let kept = config.iterations - config.burn_in;
    let mut draws = Vec::with_capacity(kept);
    let mut accepts: u64 = 0;
    let mut burn_in_accepts: u64 = 0;

    for iter in 0..config.iterations {
        let adapting = iter < config.burn_in;
        // diminishing adaptation; frozen after burn-in
        let gamma = if adapting { (iter as f64 + 1.0).powf(-0.6) } else { 0.0 };
        for j in 0..dim {
            let z: f64 = rng.sample(StandardNormal);
            let value = theta[j] + log_steps[j].exp() * z;
            let delta = target.propose(&mut cache, &theta, j, value);
            let alpha = if delta.is_nan() { 0.0 } else { delta.exp().min(1.0) };
            let u: f64 = rng.gen();
            if u < alpha {
                target.accept(&mut cache, &theta, j, value);
                theta[j] = value;
                accepts += 1;
                if adapting {
                    burn_in_accepts += 1;
                }
            }
            if adapting {
                log_steps[j] = (log_steps[j] + gamma * (alpha - config.adapt_target)).clamp(-20.0, 20.0);
            }
        }
        if !adapting {
            draws.push(theta.clone());
        }
    }

    if burn_in_accepts == 0 && config.burn_in > 0 {
        return Err(Error::Sampler("zero acceptance over burn-in".into()));
    }
    let acc = accepts as f64 / (config.iterations as f64 * dim as f64);
    Ok((draws, acc))
}

/// Split-chain potential scale reduction per parameter. Each chain is halved;
/// rhat = sqrt(1 + B / (n W)) over the half-chains, which is exactly 1.0 when
/// all half-chain means agree and grows without bound as they separate.
pub fn rhat(samples: &PosteriorSamples) -> Result<Vec<f64>> {
    if samples.n_chains() < 2 {
        return Err(Error::Sampler("rhat requires at least 2 chains".into()));
    }
    let n_half = samples.n_kept() / 2;
    if n_half < 2 {
        return Err(Error::Sampler("too few draws for rhat".into()));
    }
    let mut out = Vec::with_capacity(samples.dim());
    for p in 0..samples.dim() {
        let mut halves: Vec<Vec<f64>> = Vec::new();
        for chain in &samples.draws {
            halves.push(chain[..n_half].iter().map(|d| d[p]).collect());
            halves.push(chain[n_half..2 * n_half].iter().map(|d| d[p]).collect());
        }
        let means: Vec<f64> =
            halves.iter().map(|h| h.iter().sum::<f64>() / h.len() as f64).collect();
        let vars: Vec<f64> = halves
            .iter()
            .zip(&means)
            .map(|(h, &m)| h.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (h.len() as f64 - 1.0))
            .collect();
        let w = vars.iter().sum::<f64>() / vars.len() as f64;
        let grand = means.iter().sum::<f64>() / means.len() as f64;
        let b = n_half as f64 * means.iter().map(|m| (m - grand) * (m - grand)).sum::<f64>()
            / (means.len() as f64 - 1.0);
        let r = if w > 0.0 {
            (1.0 + b / (n_half as f64 * w)).sqrt()
        } else if b > 0.0 {
            f64::INFINITY
        } else {
            1.0
        };
        out.push(r);
    }
    Ok(out)
}

/// Effective sample size per parameter: Geyer initial-positive-sequence
/// autocorrelation estimate per chain, summed over chains, capped at the
/// total draw count.
pub fn ess(samples: &PosteriorSamples) -> Result<Vec<f64>> {
    let n = samples.n_kept();
    if n < 10 {
        return Err(Error::Sampler("ess requires at least 10 draws".into()));
    }
    let mut out = vec![0.0; samples.dim()];
    for p in 0..samples.dim() {
        let mut total = 0.0;
        for chain in &samples.draws {
            let x: Vec<f64> = chain.iter().map(|d| d[p]).collect();
            total += chain_ess(&x);
        }
        out[p] = total.min((n * samples.n_chains()) as f64);
    }
    Ok(out)
}

fn chain_ess(x: &[f64]) -> f64 {
    let n = x.len();
    let mean = x.iter().sum::<f64>() / n as f64;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    if var <= 0.0 {
        return 1.0; // constant chain carries one sample of information
    }
    let autocov = |lag: usize| -> f64 {
        x[..n - lag].iter().zip(&x[lag..]).map(|(a, b)| (a - mean) * (b - mean)).sum::<f64>()
            / n as f64
    };
    // sum lag pairs until the first negative pair sum
    let mut tau = 1.0;
    let mut lag = 1;
    while lag + 1 < n {
        let pair = (autocov(lag) + autocov(lag + 1)) / var;
        if pair < 0.0 {
            break;
        }
        tau += 2.0 * pair;
        lag += 2;
    }
    (n as f64 / tau).max(1.0)
}
