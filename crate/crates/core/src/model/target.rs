//! Sampler-facing form of the joint posterior.
//!
//! Three exact reparameterizations keep a coordinate-wise sampler mixing:
//!
//! * aggregate study effects are integrated out analytically, so each row
//!   contributes `y ~ N(md, σ² + τ²)`;
//! * participant-level study effects are non-centred, `δ = md + τ z` with
//!   `z ~ N(0, 1)`;
//! * baselines are sampled as `u = μ + γ c` with `c` the study's mean log event
//!   time, which removes most of the shape/baseline correlation (unit Jacobian);
//! * basic parameters are sampled as `a[k] = d_neg[k] + p̄ beta_bar[k]` and
//!   `beta_bar[k]`, with `p̄` the mean positive proportion of the aggregate
//!   rows, since the data mostly identify the effect at typical proportions
//!   (unit Jacobian).

use rand::Rng;
use rand_distr::StandardNormal;

use super::weibull::GroupedStudy;
use super::{consistency_mean, IpdParameters, ModelError, ModelKind, ModelParameters, ModelSpec, Result, TauSetting, TAU_FLOOR};
use crate::evidence::{Network, TreatmentId};
use crate::mcmc::{Draws, Target, Transform};
use crate::stats::normal_lnpdf;

const IPD_WIDTH: usize = 5;

struct AdTerm {
    k: TreatmentId,
    l: TreatmentId,
    y: f64,
    var: f64,
    ppos: f64,
}

struct IpdTerm {
    k: TreatmentId,
    l: TreatmentId,
    data: GroupedStudy,
    label: String,
}

pub struct NmaTarget {
    spec: ModelSpec,
    n_treatments: usize,
    /// Non-reference treatments, in id order.
    free: Vec<TreatmentId>,
    ad: Vec<AdTerm>,
    ipd: Vec<IpdTerm>,
    labels: Vec<String>,
    likelihood: bool,
    /// Proportion at which the sampled basic effects are centred.
    centre: f64,
}

impl NmaTarget {
    pub fn new(network: &Network, spec: &ModelSpec) -> Result<Self> {
        spec.validate()?;
        let n = network.n_treatments();
        if spec.reference.0 == 0 || spec.reference.0 > n {
            return Err(ModelError::Structure(format!("reference {} not in network", spec.reference)));
        }
        if spec.kind != ModelKind::OneStage && !network.ipd_studies.is_empty() {
            return Err(ModelError::Structure(
                "participant-level studies enter this model only after stage one".into(),
            ));
        }
        let ad = network
            .ad_studies
            .iter()
            .map(|s| AdTerm {
                k: s.treatment_k,
                l: s.treatment_l,
                y: s.y,
                var: s.sigma * s.sigma,
                ppos: s.ppos,
            })
            .collect();
        let mut ipd = Vec::new();
        for s in &network.ipd_studies {
            if !(s.subjects.iter().any(|r| r.arm == 0) && s.subjects.iter().any(|r| r.arm == 1)) {
                return Err(ModelError::Structure(format!("study `{}` lacks subjects in an arm", s.study_id)));
            }
            ipd.push(IpdTerm {
                k: s.treatment_k,
                l: s.treatment_l,
                data: GroupedStudy::new(s, false),
                label: s.study_id.clone(),
            });
        }
        Ok(Self {
            spec: spec.clone(),
            n_treatments: n,
            free: (1..=n).map(TreatmentId).filter(|&k| k != spec.reference).collect(),
            ad,
            ipd,
            labels: network.treatments.iter().map(|t| t.class_tag.clone()).collect(),
            likelihood: true,
            centre: if network.ad_studies.is_empty() {
                0.5
            } else {
                network.ad_studies.iter().map(|s| s.ppos).sum::<f64>() / network.ad_studies.len() as f64
            },
        })
    }

    /// The same target with every data term dropped, leaving the prior (and
    /// the standard-normal study deviations).
    pub fn prior_only(mut self) -> Self {
        self.likelihood = false;
        self
    }

    fn shift(&self, s: &IpdTerm) -> f64 {
        if self.likelihood {
            s.data.shift
        } else {
            0.0
        }
    }

    fn n_free(&self) -> usize {
        self.free.len()
    }

    fn tau_index(&self) -> Option<usize> {
        match self.spec.tau {
            TauSetting::Estimated => Some(2 * self.n_free()),
            TauSetting::Fixed(_) => None,
        }
    }

    fn ipd_start(&self) -> usize {
        2 * self.n_free() + usize::from(self.tau_index().is_some())
    }

    pub fn d_neg_name(k: TreatmentId) -> String {
        format!("d_neg[{k}]")
    }

    pub fn beta_bar_name(k: TreatmentId) -> String {
        format!("beta_bar[{k}]")
    }

    /// Treatment class tags indexed by id − 1.
    pub fn treatment_labels(&self) -> &[String] {
        &self.labels
    }

    fn basic(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut d = vec![0.0; self.n_treatments];
        let mut b = vec![0.0; self.n_treatments];
        let m = self.n_free();
        for (i, k) in self.free.iter().enumerate() {
            b[k.index()] = x[m + i];
            d[k.index()] = x[i] - self.centre * x[m + i];
        }
        (d, b)
    }

    fn tau(&self, x: &[f64]) -> f64 {
        match (self.spec.tau, self.tau_index()) {
            (TauSetting::Fixed(t), _) => t.max(TAU_FLOOR),
            (TauSetting::Estimated, Some(i)) => x[i],
            _ => unreachable!(),
        }
    }

    fn global_part(&self, d: &[f64], b: &[f64], tau: f64) -> f64 {
        let pr = &self.spec.priors;
        if !(tau > 0.0 && tau <= pr.tau_upper) {
            return f64::NEG_INFINITY;
        }
        let sd = pr.normal_sd();
        let mut total: f64 = self
            .free
            .iter()
            .map(|k| normal_lnpdf(d[k.index()], 0.0, sd) + normal_lnpdf(b[k.index()], 0.0, sd))
            .sum();
        if self.tau_index().is_some() {
            total -= pr.tau_upper.ln();
        }
        if !self.likelihood {
            return total;
        }
        let tau2 = tau * tau;
        for a in &self.ad {
            let md = consistency_mean(d, b, a.k, a.l, a.ppos);
            total += normal_lnpdf(a.y, md, (a.var + tau2).sqrt());
        }
        total
    }

    fn study_part(&self, j: usize, x: &[f64], d: &[f64], b: &[f64], tau: f64) -> f64 {
        let s = &self.ipd[j];
        let o = self.ipd_start() + IPD_WIDTH * j;
        let (gamma, u_neg, u_pos, z_neg, z_pos) = (x[o], x[o + 1], x[o + 2], x[o + 3], x[o + 4]);
        let pr = &self.spec.priors;
        let mu_neg = u_neg - gamma * self.shift(s);
        let mu_pos = u_pos - gamma * self.shift(s);
        let delta_neg = consistency_mean(d, b, s.k, s.l, 0.0) + tau * z_neg;
        let delta_pos = consistency_mean(d, b, s.k, s.l, 1.0) + tau * z_pos;
        let eta = [mu_neg, mu_neg + delta_neg, mu_pos, mu_pos + delta_pos];
        let sd = pr.normal_sd();
        pr.gamma_lnpdf(gamma)
            + normal_lnpdf(mu_neg, 0.0, sd)
            + normal_lnpdf(mu_pos, 0.0, sd)
            + normal_lnpdf(z_neg, 0.0, 1.0)
            + normal_lnpdf(z_pos, 0.0, 1.0)
            + if self.likelihood { s.data.loglik(gamma, eta) } else { 0.0 }
    }

    /// A central starting point: null effects, τ = 0.2 (or its fixed value),
    /// exponential-rate baselines per subgroup.
    pub fn initial_point(&self) -> Vec<f64> {
        let mut x = vec![0.0; self.dim()];
        if let Some(i) = self.tau_index() {
            x[i] = 0.2_f64.min(self.spec.priors.tau_upper / 2.0);
        }
        for (j, s) in self.ipd.iter().enumerate() {
            let o = self.ipd_start() + IPD_WIDTH * j;
            x[o] = 1.0;
            for (slot, cells) in [(1, [0, 1]), (2, [2, 3])] {
                let events: f64 = cells.iter().map(|&c| s.data.events(c)).sum();
                let n: usize = cells.iter().map(|&c| s.data.n(c)).sum();
                // γ = 1: u = ln(events / exposure) + c, exposure approximated by n·e^c
                x[o + slot] = if n > 0 {
                    ((events + 0.5) / n as f64).ln()
                } else {
                    0.0
                };
            }
        }
        x
    }

    /// Natural-scale parameters from a sampler point. Aggregate study effects
    /// are drawn from their exact conditional given the basic parameters and τ.
    pub fn decode<R: Rng>(&self, x: &[f64], network: &Network, rng: &mut R) -> ModelParameters {
        let (d, b) = self.basic(x);
        let tau = self.tau(x);
        let ad_delta = self
            .ad
            .iter()
            .map(|a| {
                let md = consistency_mean(&d, &b, a.k, a.l, a.ppos);
                let precision = 1.0 / a.var + 1.0 / (tau * tau);
                let mean = (a.y / a.var + md / (tau * tau)) / precision;
                let z: f64 = rng.sample(StandardNormal);
                mean + z / precision.sqrt()
            })
            .collect();
        debug_assert_eq!(network.ad_studies.len(), self.ad.len());
        let ipd = self
            .ipd
            .iter()
            .enumerate()
            .map(|(j, s)| {
                let o = self.ipd_start() + IPD_WIDTH * j;
                let gamma = x[o];
                let mu_neg = x[o + 1] - gamma * self.shift(s);
                let mu_pos = x[o + 2] - gamma * self.shift(s);
                let delta_neg = consistency_mean(&d, &b, s.k, s.l, 0.0) + tau * x[o + 3];
                let delta_pos = consistency_mean(&d, &b, s.k, s.l, 1.0) + tau * x[o + 4];
                IpdParameters {
                    gamma,
                    mu_neg,
                    beta: mu_pos - mu_neg,
                    delta_neg,
                    delta_diff: delta_pos - delta_neg,
                }
            })
            .collect();
        ModelParameters {
            ipd,
            ad_delta,
            d_neg: d,
            beta_bar: b,
            tau,
        }
    }

    /// Sampler point reproducing `params` on every sampled coordinate.
    pub fn encode(&self, params: &ModelParameters) -> Vec<f64> {
        let mut x = vec![0.0; self.dim()];
        let m = self.n_free();
        for (i, k) in self.free.iter().enumerate() {
            x[i] = params.d_neg[k.index()] + self.centre * params.beta_bar[k.index()];
            x[m + i] = params.beta_bar[k.index()];
        }
        if let Some(i) = self.tau_index() {
            x[i] = params.tau;
        }
        let tau = self.tau(&x);
        for (j, (s, p)) in self.ipd.iter().zip(&params.ipd).enumerate() {
            let o = self.ipd_start() + IPD_WIDTH * j;
            x[o] = p.gamma;
            x[o + 1] = p.mu_neg + p.gamma * self.shift(s);
            x[o + 2] = p.mu_pos() + p.gamma * self.shift(s);
            x[o + 3] = (p.delta_neg - consistency_mean(&params.d_neg, &params.beta_bar, s.k, s.l, 0.0)) / tau;
            x[o + 4] = (p.delta_pos() - consistency_mean(&params.d_neg, &params.beta_bar, s.k, s.l, 1.0)) / tau;
        }
        x
    }

    /// Draws of the basic parameters of every treatment (the reference
    /// columns are identically zero) and τ (included even when fixed), named
    /// `d_neg[k]`, `beta_bar[k]`, `tau`.
    pub fn basic_draws(&self, draws: &Draws) -> Draws {
        let all: Vec<TreatmentId> = (1..=self.n_treatments).map(TreatmentId).collect();
        let mut names: Vec<String> = all.iter().map(|&k| Self::d_neg_name(k)).collect();
        names.extend(all.iter().map(|&k| Self::beta_bar_name(k)));
        names.push("tau".into());
        let chains = (0..draws.n_chains())
            .map(|c| {
                draws
                    .rows(c)
                    .flat_map(|row| {
                        let (mut v, b) = self.basic(row);
                        v.extend(b);
                        v.push(self.tau(row));
                        v
                    })
                    .collect()
            })
            .collect();
        let mut out = Draws::from_matrices(names, chains).expect("shapes agree");
        let m = self.n_free();
        out.acceptance = draws
            .acceptance
            .iter()
            .map(|a| {
                let mut d = vec![0.0; self.n_treatments];
                let mut b = vec![0.0; self.n_treatments];
                for (i, k) in self.free.iter().enumerate() {
                    d[k.index()] = a[i];
                    b[k.index()] = a[m + i];
                }
                d.extend(b);
                d.push(self.tau_index().map_or(0.0, |i| a[i]));
                d
            })
            .collect();
        out.seed = draws.seed;
        out.thin = draws.thin;
        out
    }
}

impl Target for NmaTarget {
    fn dim(&self) -> usize {
        self.ipd_start() + IPD_WIDTH * self.ipd.len()
    }

    fn parameter_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self.free.iter().map(|&k| format!("a[{k}]")).collect();
        names.extend(self.free.iter().map(|&k| Self::beta_bar_name(k)));
        if self.tau_index().is_some() {
            names.push("tau".into());
        }
        for s in &self.ipd {
            for p in ["gamma", "u_neg", "u_pos", "z_neg", "z_pos"] {
                names.push(format!("{}:{p}", s.label));
            }
        }
        names
    }

    fn transform(&self, index: usize) -> Transform {
        if Some(index) == self.tau_index() {
            return Transform::ScaledLogit {
                upper: self.spec.priors.tau_upper,
                floor: TAU_FLOOR,
            };
        }
        let start = self.ipd_start();
        if index >= start && (index - start).is_multiple_of(IPD_WIDTH) {
            Transform::Log
        } else {
            Transform::Identity
        }
    }

    fn log_density(&self, x: &[f64]) -> f64 {
        let (d, b) = self.basic(x);
        let tau = self.tau(x);
        let mut total = self.global_part(&d, &b, tau);
        for j in 0..self.ipd.len() {
            total += self.study_part(j, x, &d, &b, tau);
        }
        total
    }

    fn log_density_given(&self, x: &[f64], index: usize) -> f64 {
        let (d, b) = self.basic(x);
        let tau = self.tau(x);
        let start = self.ipd_start();
        if index >= start {
            return self.study_part((index - start) / IPD_WIDTH, x, &d, &b, tau);
        }
        let mut total = self.global_part(&d, &b, tau);
        if total == f64::NEG_INFINITY {
            return total;
        }
        let treatment = if Some(index) == self.tau_index() {
            None
        } else {
            Some(self.free[index % self.n_free()])
        };
        for (j, s) in self.ipd.iter().enumerate() {
            if treatment.is_none_or(|k| s.k == k || s.l == k) {
                total += self.study_part(j, x, &d, &b, tau);
            }
        }
        total
    }
}
