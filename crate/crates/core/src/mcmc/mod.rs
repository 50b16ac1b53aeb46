//! Adaptive random-walk Metropolis-within-Gibbs over transformed coordinates,
//! multi-chain execution and convergence diagnostics.
//!
//! Each coordinate is updated in turn with a Gaussian proposal on its
//! unconstrained scale. Proposal scales are tuned by a Robbins-Monro
//! recursion on the log scale toward a target acceptance rate, once per
//! adaptation window, during burn-in only; kept draws come from a fixed
//! kernel. Chains use independent ChaCha streams of one master seed, so
//! results are reproducible bit for bit whatever the thread schedule.

mod diagnostics;
mod draws;

pub use diagnostics::{effective_sample_size, ess, mcse_mean, rhat, split_rhat, summarize, summarize_values, Summary};
pub use draws::Draws;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum McmcError {
    #[error("invalid sampler configuration: {0}")]
    Config(String),
    #[error("chain {chain}: no finite starting point after {attempts} attempts")]
    Initialization { chain: usize, attempts: usize },
    #[error("initial point has length {got}, target dimension is {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),
    #[error("{0}")]
    Insufficient(String),
    #[error("csv error: {0}")]
    Csv(String),
}

pub type Result<T, E = McmcError> = std::result::Result<T, E>;

pub const INIT_ATTEMPTS: usize = 100;

/// Map from an unconstrained sampling coordinate to the parameter scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Transform {
    Identity,
    /// Positive parameters: `x = exp(u)`.
    Log,
    /// Parameters on `(0, upper)`: `x = max(floor, upper * logistic(u))`.
    ScaledLogit { upper: f64, floor: f64 },
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

impl Transform {
    pub fn to_constrained(self, u: f64) -> f64 {
        match self {
            Transform::Identity => u,
            Transform::Log => u.exp(),
            Transform::ScaledLogit { upper, floor } => {
                let p = 1.0 / (1.0 + (-u).exp());
                (upper * p).max(floor)
            }
        }
    }

    pub fn to_unconstrained(self, x: f64) -> f64 {
        match self {
            Transform::Identity => x,
            Transform::Log => x.ln(),
            Transform::ScaledLogit { upper, .. } => {
                let p = x / upper;
                (p / (1.0 - p)).ln()
            }
        }
    }

    /// `ln |dx/du|` at `u`.
    pub fn log_jacobian(self, u: f64) -> f64 {
        match self {
            Transform::Identity => 0.0,
            Transform::Log => u,
            Transform::ScaledLogit { upper, .. } => upper.ln() - softplus(-u) - softplus(u),
        }
    }
}

/// A log density over named parameters.
pub trait Target: Sync {
    fn dim(&self) -> usize;

    fn parameter_names(&self) -> Vec<String>;

    fn transform(&self, _index: usize) -> Transform {
        Transform::Identity
    }

    /// Log density (up to a constant) at `x`, on the parameter scale.
    fn log_density(&self, x: &[f64]) -> f64;

    /// Terms of [`Target::log_density`] that involve `x[index]`. Any
    /// implementation must differ from `log_density(x)` only by a quantity
    /// that does not depend on `x[index]`.
    fn log_density_given(&self, x: &[f64], index: usize) -> f64 {
        let _ = index;
        self.log_density(x)
    }
}

/// Log density given by a closure, with optional per-coordinate transforms.
pub struct FnTarget<F> {
    names: Vec<String>,
    transforms: Vec<Transform>,
    f: F,
}

impl<F: Fn(&[f64]) -> f64 + Sync> FnTarget<F> {
    pub fn new(names: Vec<String>, f: F) -> Self {
        let transforms = vec![Transform::Identity; names.len()];
        Self { names, transforms, f }
    }

    pub fn with_transforms(mut self, transforms: Vec<Transform>) -> Self {
        assert_eq!(transforms.len(), self.names.len());
        self.transforms = transforms;
        self
    }
}

impl<F: Fn(&[f64]) -> f64 + Sync> Target for FnTarget<F> {
    fn dim(&self) -> usize {
        self.names.len()
    }
    fn parameter_names(&self) -> Vec<String> {
        self.names.clone()
    }
    fn transform(&self, index: usize) -> Transform {
        self.transforms[index]
    }
    fn log_density(&self, x: &[f64]) -> f64 {
        (self.f)(x)
    }
}

/// Where chains start, on the parameter scale.
#[derive(Debug, Clone, PartialEq)]
pub enum InitStrategy {
    /// Every chain starts at this point.
    Point(Vec<f64>),
    /// Independent Gaussian jitter of the given scale around `center`, applied
    /// on the unconstrained scale; redrawn while the density is not finite.
    Jittered { center: Vec<f64>, scale: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub chains: usize,
    pub burn_in: usize,
    /// Post-burn-in iterations per chain, before thinning.
    pub iterations: usize,
    pub thin: usize,
    pub seed: u64,
    pub target_acceptance: f64,
    pub adaptation_window: usize,
    /// Starting proposal standard deviation on the unconstrained scale.
    pub initial_scale: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            chains: 4,
            burn_in: 10_000,
            iterations: 20_000,
            thin: 1,
            seed: 1,
            target_acceptance: 0.44,
            adaptation_window: 50,
            initial_scale: 0.5,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("chains", self.chains),
            ("iterations", self.iterations),
            ("thin", self.thin),
            ("adaptation_window", self.adaptation_window),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(McmcError::Config(format!("{name} must be positive")));
        }
        if self.iterations < self.thin {
            return Err(McmcError::Config("iterations must be at least thin".into()));
        }
        if !(self.target_acceptance > 0.0 && self.target_acceptance < 1.0) {
            return Err(McmcError::Config("target_acceptance must lie in (0, 1)".into()));
        }
        if !(self.initial_scale > 0.0 && self.initial_scale.is_finite()) {
            return Err(McmcError::Config("initial_scale must be positive".into()));
        }
        Ok(())
    }

    pub fn kept_per_chain(&self) -> usize {
        self.iterations / self.thin
    }
}

/// SplitMix64 step, used to derive independent seeds from a master seed.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    let mut z = master.wrapping_add(0x9E37_79B9_7F4A_7C15u64.wrapping_mul(index.wrapping_add(1)));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub(crate) fn chain_rng(seed: u64, chain: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(chain as u64);
    rng
}

pub(crate) struct ChainOutput {
    pub values: Vec<f64>,
    pub acceptance: Vec<f64>,
}

/// Runs `config.chains` independent chains and collects kept draws.
pub fn run_chains<T: Target>(target: &T, init: &InitStrategy, config: &SamplerConfig) -> Result<Draws> {
    config.validate()?;
    let dim = target.dim();
    let center = match init {
        InitStrategy::Point(p) | InitStrategy::Jittered { center: p, .. } => p,
    };
    if center.len() != dim {
        return Err(McmcError::Dimension {
            expected: dim,
            got: center.len(),
        });
    }
    let run = |chain: usize| run_chain(target, init, config, chain);

    #[cfg(feature = "parallel")]
    let outputs: Vec<Result<ChainOutput>> = {
        use rayon::prelude::*;
        (0..config.chains).into_par_iter().map(run).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let outputs: Vec<Result<ChainOutput>> = (0..config.chains).map(run).collect();

    let outputs = outputs.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(Draws::from_chains(target.parameter_names(), outputs, config))
}

fn starting_point<T: Target>(
    target: &T,
    init: &InitStrategy,
    rng: &mut ChaCha8Rng,
    chain: usize,
) -> Result<Vec<f64>> {
    let dim = target.dim();
    match init {
        InitStrategy::Point(p) => {
            if target.log_density(p).is_finite() {
                Ok(p.clone())
            } else {
                Err(McmcError::Initialization { chain, attempts: 1 })
            }
        }
        InitStrategy::Jittered { center, scale } => {
            for _ in 0..INIT_ATTEMPTS {
                let x: Vec<f64> = (0..dim)
                    .map(|i| {
                        let t = target.transform(i);
                        let u = t.to_unconstrained(center[i]);
                        let z: f64 = rng.sample(StandardNormal);
                        t.to_constrained(u + scale * z)
                    })
                    .collect();
                if target.log_density(&x).is_finite() {
                    return Ok(x);
                }
            }
            Err(McmcError::Initialization {
                chain,
                attempts: INIT_ATTEMPTS,
            })
        }
    }
}

fn run_chain<T: Target>(target: &T, init: &InitStrategy, config: &SamplerConfig, chain: usize) -> Result<ChainOutput> {
    let dim = target.dim();
    let mut rng = chain_rng(config.seed, chain);
    let mut x = starting_point(target, init, &mut rng, chain)?;
    let transforms: Vec<Transform> = (0..dim).map(|i| target.transform(i)).collect();
    let mut u: Vec<f64> = x.iter().zip(&transforms).map(|(&v, t)| t.to_unconstrained(v)).collect();
    let mut log_scale = vec![config.initial_scale.ln(); dim];
    let mut window_accepts = vec![0usize; dim];
    let mut kept_accepts = vec![0usize; dim];
    let mut windows_done = 0usize;

    let kept = config.kept_per_chain();
    let mut values = Vec::with_capacity(kept * dim);
    let total = config.burn_in + config.iterations;

    for iter in 0..total {
        let burning = iter < config.burn_in;
        for i in 0..dim {
            let t = transforms[i];
            let current = target.log_density_given(&x, i) + t.log_jacobian(u[i]);
            let z: f64 = rng.sample(StandardNormal);
            let u_new = u[i] + log_scale[i].exp() * z;
            let x_old = x[i];
            x[i] = t.to_constrained(u_new);
            let proposed = target.log_density_given(&x, i) + t.log_jacobian(u_new);
            let log_u: f64 = rng.random::<f64>().ln();
            if proposed.is_finite() && log_u < proposed - current {
                u[i] = u_new;
                if burning {
                    window_accepts[i] += 1;
                } else {
                    kept_accepts[i] += 1;
                }
            } else {
                x[i] = x_old;
            }
        }
        if burning && (iter + 1) % config.adaptation_window == 0 {
            windows_done += 1;
            let gain = 1.0 / (windows_done as f64).sqrt();
            for i in 0..dim {
                let rate = window_accepts[i] as f64 / config.adaptation_window as f64;
                log_scale[i] += gain * (rate - config.target_acceptance);
                window_accepts[i] = 0;
            }
        }
        if !burning && (iter - config.burn_in + 1).is_multiple_of(config.thin) {
            values.extend_from_slice(&x);
        }
    }
    let acceptance = kept_accepts
        .iter()
        .map(|&a| a as f64 / config.iterations as f64)
        .collect();
    Ok(ChainOutput { values, acceptance })
}
