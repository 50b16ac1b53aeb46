//! Small numeric helpers shared across modules.

use statrs::distribution::{ContinuousCDF, Normal};

pub(crate) const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Log-density of `N(mean, sd^2)` at `x`.
#[inline]
pub(crate) fn normal_lnpdf(x: f64, mean: f64, sd: f64) -> f64 {
    let z = (x - mean) / sd;
    -0.5 * LN_2PI - sd.ln() - 0.5 * z * z
}

/// Standard normal quantile.
pub(crate) fn std_normal_quantile(p: f64) -> f64 {
    Normal::standard().inverse_cdf(p)
}

pub(crate) fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unbiased sample variance; zero for fewer than two values.
pub(crate) fn variance(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64
}

/// Linear-interpolation quantile of already sorted data (R type 7).
pub(crate) fn sorted_quantile(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Half-up rounding to `digits` decimals.
pub(crate) fn round_half_up(x: f64, digits: i32) -> f64 {
    let scale = 10f64.powi(digits);
    // nudge guards against binary representations like 28.65 -> 28.6499999
    ((x * scale) + 0.5 + 1e-9).floor() / scale
}
