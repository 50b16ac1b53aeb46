use std::io::Write;

use serde::{Deserialize, Serialize};

use super::{PipelineError, Result, ESS_MIN, LEVEL, RHAT_MAX};
use crate::evidence::{Network, TreatmentId};
use crate::mcmc::{effective_sample_size, split_rhat, summarize_values, Draws, Summary};
use crate::model::{ModelKind, NmaTarget};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Subgroup {
    #[serde(rename = "+ve")]
    Pos,
    #[serde(rename = "-ve")]
    Neg,
}

impl Subgroup {
    pub const BOTH: [Subgroup; 2] = [Subgroup::Pos, Subgroup::Neg];

    pub fn as_str(self) -> &'static str {
        match self {
            Subgroup::Pos => "+ve",
            Subgroup::Neg => "-ve",
        }
    }
}

impl std::fmt::Display for Subgroup {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Hazard ratio of `l` versus `k` in one subgroup.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContrastSummary {
    pub k: TreatmentId,
    pub l: TreatmentId,
    /// `"<label l> vs <label k>"`.
    pub contrast: String,
    pub subgroup: Subgroup,
    pub hr_median: f64,
    pub hr_mean: f64,
    pub lower: f64,
    pub upper: f64,
    /// Worst split R̂ over the log hazard ratio and the basic parameters it
    /// involves; `None` when undefined.
    pub rhat_max: Option<f64>,
    pub ess_min: f64,
}

impl ContrastSummary {
    pub fn converged(&self) -> bool {
        self.rhat_max.is_some_and(|r| r <= RHAT_MAX) && self.ess_min >= ESS_MIN
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterDiagnostics {
    pub name: String,
    pub mean: f64,
    pub sd: f64,
    pub rhat: Option<f64>,
    pub ess: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub parameters: Vec<ParameterDiagnostics>,
    /// Every contrast passes `R̂ ≤ 1.05` and `ESS ≥ 400`.
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub seed: u64,
    pub data_digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    pub model: ModelKind,
    /// Class tags by treatment id − 1.
    pub treatments: Vec<String>,
    pub contrasts: Vec<ContrastSummary>,
    pub tau: Summary,
    pub diagnostics: Diagnostics,
    pub provenance: Provenance,
}

fn finite(x: f64) -> Option<f64> {
    x.is_finite().then_some(x)
}

/// Per-chain log hazard ratios of `l` vs `k` in a subgroup.
pub fn log_hr_draws(draws: &Draws, k: TreatmentId, l: TreatmentId, subgroup: Subgroup) -> Result<Vec<Vec<f64>>> {
    if k == l {
        return Err(PipelineError::Invalid(format!("contrast of treatment {k} with itself")));
    }
    let column = |name: String| {
        draws
            .index_of(&name)
            .map_err(|_| PipelineError::Invalid(format!("unknown treatment in `{name}`")))
    };
    let (dk, dl) = (column(NmaTarget::d_neg_name(k))?, column(NmaTarget::d_neg_name(l))?);
    let beta = match subgroup {
        Subgroup::Neg => None,
        Subgroup::Pos => Some((column(NmaTarget::beta_bar_name(k))?, column(NmaTarget::beta_bar_name(l))?)),
    };
    Ok(draws.map_rows(|r| {
        let neg = r[dl] - r[dk];
        match beta {
            None => neg,
            Some((bk, bl)) => neg + (r[bl] - r[bk]),
        }
    }))
}

/// Posterior hazard ratio of `l` versus `k`: per-draw `exp` of the log
/// contrast, then median, mean and equal-tailed interval.
pub fn contrast_hr(draws: &Draws, k: TreatmentId, l: TreatmentId, subgroup: Subgroup) -> Result<Summary> {
    let hr: Vec<f64> = log_hr_draws(draws, k, l, subgroup)?.concat().into_iter().map(f64::exp).collect();
    Ok(summarize_values(&hr, LEVEL)?)
}

fn involved(k: TreatmentId, l: TreatmentId, subgroup: Subgroup) -> Vec<String> {
    let mut names = vec![NmaTarget::d_neg_name(k), NmaTarget::d_neg_name(l)];
    if subgroup == Subgroup::Pos {
        names.push(NmaTarget::beta_bar_name(k));
        names.push(NmaTarget::beta_bar_name(l));
    }
    names
}

fn varies(chains: &[Vec<f64>]) -> bool {
    let first = chains.first().and_then(|c| c.first()).copied();
    chains.iter().flatten().any(|&v| Some(v) != first)
}

impl FitSummary {
    /// Summarizes draws holding `d_neg[k]`, `beta_bar[k]` for every treatment
    /// and `tau`.
    pub fn from_draws(model: ModelKind, network: &Network, draws: &Draws, provenance: Provenance) -> Result<Self> {
        let mut parameters = Vec::new();
        for name in draws.names() {
            let chains = draws.per_chain(name)?;
            if !varies(&chains) {
                continue;
            }
            let s = summarize_values(&chains.concat(), LEVEL)?;
            parameters.push(ParameterDiagnostics {
                name: name.clone(),
                mean: s.mean,
                sd: s.sd,
                rhat: finite(split_rhat(&chains)),
                ess: effective_sample_size(&chains),
            });
        }
        let lookup = |name: &str| parameters.iter().find(|p| p.name == name);

        let mut contrasts = Vec::new();
        for (k, l) in network.all_pairs() {
            for subgroup in Subgroup::BOTH {
                let chains = log_hr_draws(draws, k, l, subgroup)?;
                let hr: Vec<f64> = chains.concat().into_iter().map(f64::exp).collect();
                let s = summarize_values(&hr, LEVEL)?;
                let mut rhat = finite(split_rhat(&chains));
                let mut ess = effective_sample_size(&chains);
                for p in involved(k, l, subgroup).iter().filter_map(|n| lookup(n)) {
                    rhat = match (rhat, p.rhat) {
                        (Some(a), Some(b)) => Some(a.max(b)),
                        _ => None,
                    };
                    ess = ess.min(p.ess);
                }
                contrasts.push(ContrastSummary {
                    k,
                    l,
                    contrast: format!("{} vs {}", network.label(l), network.label(k)),
                    subgroup,
                    hr_median: s.median,
                    hr_mean: s.mean,
                    lower: s.lower,
                    upper: s.upper,
                    rhat_max: rhat,
                    ess_min: ess,
                });
            }
        }
        let converged = contrasts.iter().all(ContrastSummary::converged);
        let tau = summarize_values(&draws.pooled("tau")?, LEVEL)?;
        Ok(Self {
            model,
            treatments: network.treatments.iter().map(|t| t.class_tag.clone()).collect(),
            contrasts,
            tau,
            diagnostics: Diagnostics { parameters, converged },
            provenance,
        })
    }

    pub fn contrast(&self, k: TreatmentId, l: TreatmentId, subgroup: Subgroup) -> Option<&ContrastSummary> {
        self.contrasts.iter().find(|c| c.k == k && c.l == l && c.subgroup == subgroup)
    }

    /// Finds a contrast by its label, e.g. `"CX vs X"`.
    pub fn contrast_named(&self, label: &str, subgroup: Subgroup) -> Option<&ContrastSummary> {
        self.contrasts.iter().find(|c| c.contrast == label && c.subgroup == subgroup)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("summary serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| PipelineError::Invalid(format!("fit summary json: {e}")))
    }
}

/// Percentage reduction in interval width from `baseline` to `other`.
pub fn width_reduction(baseline: (f64, f64), other: (f64, f64)) -> Result<f64> {
    let wa = baseline.1 - baseline.0;
    let wb = other.1 - other.0;
    if !(wa > 0.0) {
        return Err(PipelineError::Invalid(format!("degenerate baseline interval {baseline:?}")));
    }
    if !(wb > 0.0) {
        return Err(PipelineError::Invalid(format!("degenerate interval {other:?}")));
    }
    Ok(100.0 * (1.0 - wb / wa))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WidthRow {
    pub contrast: String,
    pub subgroup: Subgroup,
    pub baseline: (f64, f64),
    pub other: (f64, f64),
    pub reduction_pct: f64,
}

/// Width reductions for every contrast and subgroup of two fits.
pub fn compare(baseline: &FitSummary, other: &FitSummary) -> Result<Vec<WidthRow>> {
    let key = |c: &ContrastSummary| (c.k, c.l, c.subgroup, c.contrast.clone());
    let mut a: Vec<_> = baseline.contrasts.iter().map(key).collect();
    let mut b: Vec<_> = other.contrasts.iter().map(key).collect();
    a.sort();
    b.sort();
    if a != b {
        return Err(PipelineError::Mismatch("the fits report different contrasts".into()));
    }
    baseline
        .contrasts
        .iter()
        .map(|c| {
            let o = other.contrast(c.k, c.l, c.subgroup).expect("keys checked");
            Ok(WidthRow {
                contrast: c.contrast.clone(),
                subgroup: c.subgroup,
                baseline: (c.lower, c.upper),
                other: (o.lower, o.upper),
                reduction_pct: width_reduction((c.lower, c.upper), (o.lower, o.upper))?,
            })
        })
        .collect()
}

/// Percentage for display: one decimal, rounded half-up.
pub fn format_pct(pct: f64) -> String {
    format!("{:.1}", crate::stats::round_half_up(pct, 1))
}

pub const FOREST_HEADER: &str = "model,contrast,subgroup,hr,lo,hi,rhat_max,ess_min";

/// Writes forest-plot rows for one or more fits, ordered by contrast,
/// subgroup (+ve first) and model.
pub fn export_forest<W: Write>(fits: &[&FitSummary], mut out: W) -> Result<()> {
    let mut rows: Vec<(TreatmentId, TreatmentId, Subgroup, u8, String)> = Vec::new();
    for fit in fits {
        for c in &fit.contrasts {
            let rhat = c.rhat_max.map_or_else(|| "NA".to_string(), |r| format!("{r:.3}"));
            let line = format!(
                "{},{},{},{:.3},{:.3},{:.3},{},{:.3}",
                fit.model.number(),
                c.contrast,
                c.subgroup,
                c.hr_median,
                c.lower,
                c.upper,
                rhat,
                c.ess_min
            );
            rows.push((c.k, c.l, c.subgroup, fit.model.number(), line));
        }
    }
    rows.sort_by_key(|r| (r.0, r.1, r.2, r.3));
    let io = |e: std::io::Error| PipelineError::Io(e.to_string());
    writeln!(out, "{FOREST_HEADER}").map_err(io)?;
    for r in rows {
        writeln!(out, "{}", r.4).map_err(io)?;
    }
    Ok(())
}
