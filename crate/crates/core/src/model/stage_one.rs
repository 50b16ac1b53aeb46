//! Single-study Weibull models used to reduce participant data to study-level
//! log hazard ratios.

use serde::{Deserialize, Serialize};

use super::weibull::GroupedStudy;
use super::{ModelError, PriorSettings, Result};
use crate::evidence::IpdStudy;
use crate::mcmc::{Target, Transform};
use crate::stats::normal_lnpdf;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageOneMode {
    /// Treatment term only; one effect for the whole study.
    Pooled,
    /// Separate baseline and effect per biomarker subgroup present.
    Subgroup,
}

/// Posterior of one study alone, with `N(0, v)` priors on baselines and
/// effects and the usual Gamma prior on the shape.
///
/// Coordinates: `gamma`, then per subgroup present (negative first)
/// `u = μ + γ c` and `δ`.
pub struct StageOneTarget {
    data: GroupedStudy,
    priors: PriorSettings,
    /// Subgroups carried, as biomarker values.
    subgroups: Vec<u8>,
    mode: StageOneMode,
}

impl StageOneTarget {
    pub fn new(study: &IpdStudy, mode: StageOneMode, priors: PriorSettings) -> Result<Self> {
        priors.validate()?;
        for arm in [0u8, 1] {
            if study.events_in_arm(arm) == 0 {
                return Err(ModelError::Domain(format!(
                    "study `{}`: no events in arm {arm} ({})",
                    study.study_id,
                    if arm == 0 { "reference" } else { "experimental" }
                )));
            }
        }
        let (data, subgroups) = match mode {
            StageOneMode::Pooled => (GroupedStudy::new(study, true), vec![0]),
            StageOneMode::Subgroup => {
                let data = GroupedStudy::new(study, false);
                let present: Vec<u8> = [0u8, 1].into_iter().filter(|&x| study.has_subgroup(x)).collect();
                for &x in &present {
                    if !(data.has_cell(2 * x as usize) && data.has_cell(2 * x as usize + 1)) {
                        return Err(ModelError::Domain(format!(
                            "study `{}`: biomarker {} subgroup lacks one arm",
                            study.study_id,
                            if x == 1 { "positive" } else { "negative" }
                        )));
                    }
                }
                (data, present)
            }
        };
        Ok(Self {
            data,
            priors,
            subgroups,
            mode,
        })
    }

    pub fn mode(&self) -> StageOneMode {
        self.mode
    }

    /// Biomarker value of each effect coordinate, in order. Pooled mode
    /// reports a single entry `None`.
    pub fn effects(&self) -> Vec<(Option<u8>, usize)> {
        self.subgroups
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let label = match self.mode {
                    StageOneMode::Pooled => None,
                    StageOneMode::Subgroup => Some(x),
                };
                (label, 2 + 2 * i)
            })
            .collect()
    }

    pub fn initial_point(&self) -> Vec<f64> {
        let mut x = vec![1.0];
        for &g in &self.subgroups {
            let c = 2 * g as usize;
            let events = self.data.events(c) + self.data.events(c + 1);
            let n = self.data.n(c) + self.data.n(c + 1);
            x.push(((events + 0.5) / n.max(1) as f64).ln());
            x.push(0.0);
        }
        x
    }
}

impl Target for StageOneTarget {
    fn dim(&self) -> usize {
        1 + 2 * self.subgroups.len()
    }

    fn parameter_names(&self) -> Vec<String> {
        let mut names = vec!["gamma".to_string()];
        for &g in &self.subgroups {
            let suffix = match (self.mode, g) {
                (StageOneMode::Pooled, _) => "",
                (_, 0) => "_neg",
                _ => "_pos",
            };
            names.push(format!("u{suffix}"));
            names.push(format!("delta{suffix}"));
        }
        names
    }

    fn transform(&self, index: usize) -> Transform {
        if index == 0 {
            Transform::Log
        } else {
            Transform::Identity
        }
    }

    fn log_density(&self, x: &[f64]) -> f64 {
        let gamma = x[0];
        let sd = self.priors.normal_sd();
        let mut eta = [0.0; 4];
        let mut total = self.priors.gamma_lnpdf(gamma);
        for (i, &g) in self.subgroups.iter().enumerate() {
            let mu = x[1 + 2 * i] - gamma * self.data.shift;
            let delta = x[2 + 2 * i];
            total += normal_lnpdf(mu, 0.0, sd) + normal_lnpdf(delta, 0.0, sd);
            eta[2 * g as usize] = mu;
            eta[2 * g as usize + 1] = mu + delta;
        }
        total + self.data.loglik(gamma, eta)
    }
}
