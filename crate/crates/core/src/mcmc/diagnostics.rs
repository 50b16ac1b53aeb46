use serde::{Deserialize, Serialize};

use super::{Draws, McmcError, Result};
use crate::stats::{mean, sorted_quantile, variance};

/// Split-chain potential scale reduction factor. `NaN` (with a warning) when
/// every half-chain has zero variance.
pub fn split_rhat(chains: &[Vec<f64>]) -> f64 {
    let n = chains.iter().map(Vec::len).min().unwrap_or(0) / 2;
    if n < 2 {
        log::warn!("split R-hat needs at least 4 iterations per chain");
        return f64::NAN;
    }
    let halves: Vec<&[f64]> = chains
        .iter()
        .flat_map(|c| {
            let c = &c[..2 * n];
            [&c[..n], &c[n..]]
        })
        .collect();
    let m = halves.len() as f64;
    let means: Vec<f64> = halves.iter().map(|h| mean(h)).collect();
    let w = halves.iter().map(|h| variance(h)).sum::<f64>() / m;
    if w <= 0.0 {
        log::warn!("R-hat undefined: zero within-chain variance");
        return f64::NAN;
    }
    let nf = n as f64;
    let b = nf * variance(&means);
    let var_plus = (nf - 1.0) / nf * w + b / nf;
    (var_plus / w).sqrt()
}

pub fn rhat(draws: &Draws, parameter: &str) -> Result<f64> {
    Ok(split_rhat(&draws.per_chain(parameter)?))
}

fn autocovariance(xs: &[f64], m: f64, lag: usize) -> f64 {
    let n = xs.len();
    xs[..n - lag]
        .iter()
        .zip(&xs[lag..])
        .map(|(a, b)| (a - m) * (b - m))
        .sum::<f64>()
        / n as f64
}

/// Multi-chain effective sample size using Geyer's initial monotone sequence
/// of paired autocorrelations. Clamped to `[1, total draws]`.
pub fn effective_sample_size(chains: &[Vec<f64>]) -> f64 {
    let n = chains.iter().map(Vec::len).min().unwrap_or(0);
    let m = chains.len();
    if n < 4 || m == 0 {
        return 1.0;
    }
    let total = (n * m) as f64;
    let chains: Vec<&[f64]> = chains.iter().map(|c| &c[..n]).collect();
    let means: Vec<f64> = chains.iter().map(|c| mean(c)).collect();
    let nf = n as f64;
    let acov0: Vec<f64> = chains.iter().zip(&means).map(|(c, &mu)| autocovariance(c, mu, 0)).collect();
    let w = acov0.iter().map(|a| a * nf / (nf - 1.0)).sum::<f64>() / m as f64;
    let b_over_n = if m > 1 { variance(&means) } else { 0.0 };
    let var_plus = w * (nf - 1.0) / nf + b_over_n;
    if !(var_plus > 0.0) {
        log::warn!("ESS at its minimum: chains have zero variance");
        return 1.0;
    }
    let rho = |lag: usize| -> f64 {
        let mean_acov = if lag == 0 {
            acov0.iter().sum::<f64>() / m as f64
        } else {
            chains
                .iter()
                .zip(&means)
                .map(|(c, &mu)| autocovariance(c, mu, lag))
                .sum::<f64>()
                / m as f64
        };
        1.0 - (w - mean_acov) / var_plus
    };

    let mut sum = 0.0;
    let mut previous = f64::INFINITY;
    let mut lag = 0;
    while lag + 1 < n {
        let pair = rho(lag) + rho(lag + 1);
        if pair <= 0.0 {
            break;
        }
        let pair = pair.min(previous);
        sum += pair;
        previous = pair;
        lag += 2;
    }
    let tau = (2.0 * sum - 1.0).max(1.0 / total.log10().max(1.0));
    (total / tau).clamp(1.0, total)
}

pub fn ess(draws: &Draws, parameter: &str) -> Result<f64> {
    Ok(effective_sample_size(&draws.per_chain(parameter)?))
}

/// Monte Carlo standard error of the posterior mean.
pub fn mcse_mean(chains: &[Vec<f64>]) -> f64 {
    let pooled: Vec<f64> = chains.concat();
    (variance(&pooled) / effective_sample_size(chains)).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub median: f64,
    pub lower: f64,
    pub upper: f64,
    pub sd: f64,
}

/// Mean, median, equal-tailed interval and SD of pooled values.
pub fn summarize_values(values: &[f64], level: f64) -> Result<Summary> {
    if values.is_empty() {
        return Err(McmcError::Insufficient("no draws to summarize".into()));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(McmcError::Config(format!("interval level {level} outside (0, 1)")));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let tail = (1.0 - level) / 2.0;
    Ok(Summary {
        mean: mean(values),
        median: sorted_quantile(&sorted, 0.5),
        lower: sorted_quantile(&sorted, tail),
        upper: sorted_quantile(&sorted, 1.0 - tail),
        sd: variance(values).sqrt(),
    })
}

pub fn summarize(draws: &Draws, parameter: &str, level: f64) -> Result<Summary> {
    summarize_values(&draws.pooled(parameter)?, level)
}
