use super::{EvidenceError, IpdStudy, Result};
use crate::stats::std_normal_quantile;

/// Converts a hazard ratio and its confidence interval at `level` to a log
/// hazard ratio and its standard deviation.
pub fn hr_to_loghr(hr: f64, ci_low: f64, ci_high: f64, level: f64) -> Result<(f64, f64)> {
    if !(level > 0.0 && level < 1.0) {
        return Err(EvidenceError::Domain(format!(
            "confidence level {level} outside (0, 1)"
        )));
    }
    if !(hr > 0.0 && ci_low > 0.0 && ci_high > 0.0) || !(hr.is_finite() && ci_high.is_finite())
    {
        return Err(EvidenceError::Domain(format!(
            "hazard ratio and interval must be positive, got {hr} ({ci_low}, {ci_high})"
        )));
    }
    if ci_low == ci_high {
        return Err(EvidenceError::ZeroSd);
    }
    if !(ci_low < hr && hr < ci_high) {
        return Err(EvidenceError::Domain(format!(
            "hazard ratio {hr} not inside its interval ({ci_low}, {ci_high})"
        )));
    }
    let z = std_normal_quantile(0.5 * (1.0 + level));
    let sigma = (ci_high.ln() - ci_low.ln()) / (2.0 * z);
    Ok((hr.ln(), sigma))
}

/// Biomarker-positive count after distributing unknown-status participants in
/// proportion to those with known status.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Imputation {
    pub final_n_pos: u32,
    /// Full precision; display rounding is left to callers.
    pub prop_pos: f64,
}

/// The imputed count is rounded up; that is the rule that reproduces every
/// reported final positive count in the bundled breast-cancer rows.
pub fn impute_missing_status(
    n_pos: u32,
    n_neg: u32,
    n_unknown: u32,
    n_total: u32,
) -> Result<Imputation> {
    if n_pos + n_neg + n_unknown != n_total {
        return Err(EvidenceError::Domain(format!(
            "counts {n_pos} + {n_neg} + {n_unknown} do not add up to {n_total}"
        )));
    }
    if n_total == 0 {
        return Err(EvidenceError::Domain("study has no participants".into()));
    }
    let known = n_pos + n_neg;
    if known == 0 {
        return Err(EvidenceError::CannotImpute);
    }
    // integer ceiling of n_unknown * n_pos / known, exact for any counts
    let extra = (u64::from(n_unknown) * u64::from(n_pos)).div_ceil(u64::from(known)) as u32;
    let final_n_pos = n_pos + extra;
    Ok(Imputation {
        final_n_pos,
        prop_pos: f64::from(final_n_pos) / f64::from(n_total),
    })
}

/// Fraction of biomarker-positive participants in a study.
pub fn ipd_ppos(study: &IpdStudy) -> f64 {
    if study.subjects.is_empty() {
        return 0.0;
    }
    let pos = study.subjects.iter().filter(|s| s.biomarker == 1).count();
    pos as f64 / study.subjects.len() as f64
}
