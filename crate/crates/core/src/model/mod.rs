//! The joint log-posterior for aggregate and participant-level survival data.
//!
//! Participant data follow a Weibull proportional hazards model with hazard
//! `h(t) = λ γ t^(γ-1)` and `ln λ = μ−ve + β X + δ−ve T + Δ X T`. Study-level
//! treatment effects in each biomarker subgroup are exchangeable around the
//! consistency means built from basic parameters `d_neg[k]` and `beta_bar[k]`
//! (`d_pos = d_neg + beta_bar`). Aggregate rows contribute
//! `y ~ N(δ_j, σ_j²)` with the study effect centred on a meta-regression on
//! the proportion of biomarker-positive participants.
//!
//! The functions in this module evaluate the posterior exactly as written, one
//! participant at a time. [`NmaTarget`] and [`StageOneTarget`] are the
//! reparameterized forms handed to the sampler.

mod stage_one;
mod target;
mod weibull;

pub use stage_one::{StageOneMode, StageOneTarget};
pub use target::NmaTarget;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evidence::{Network, TreatmentId};
use crate::stats::normal_lnpdf;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("{0}")]
    Domain(String),
    #[error("parameter structure does not match the model: {0}")]
    Structure(String),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// Network meta-regression on aggregate data (Model 1).
    AdNmr,
    /// Participant data reduced to study-level effects first (Model 2).
    TwoStage,
    /// Participant data and aggregate data modelled jointly (Model 3).
    OneStage,
}

impl ModelKind {
    pub fn number(self) -> u8 {
        match self {
            ModelKind::AdNmr => 1,
            ModelKind::TwoStage => 2,
            ModelKind::OneStage => 3,
        }
    }

    pub fn from_number(n: u8) -> Option<Self> {
        match n {
            1 => Some(ModelKind::AdNmr),
            2 => Some(ModelKind::TwoStage),
            3 => Some(ModelKind::OneStage),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorSettings {
    pub gamma_shape: f64,
    /// Rate (not scale) of the Weibull shape prior.
    pub gamma_rate: f64,
    /// Variance of the zero-mean normal priors.
    pub normal_variance: f64,
    pub tau_upper: f64,
}

impl Default for PriorSettings {
    fn default() -> Self {
        Self {
            gamma_shape: 1.0,
            gamma_rate: 0.01,
            normal_variance: 100.0,
            tau_upper: 2.0,
        }
    }
}

impl PriorSettings {
    pub fn validate(&self) -> Result<()> {
        let all = [self.gamma_shape, self.gamma_rate, self.normal_variance, self.tau_upper];
        if all.iter().all(|v| v.is_finite() && *v > 0.0) {
            Ok(())
        } else {
            Err(ModelError::Domain("prior hyperparameters must be positive".into()))
        }
    }

    pub fn normal_sd(&self) -> f64 {
        self.normal_variance.sqrt()
    }

    pub fn gamma_lnpdf(&self, gamma: f64) -> f64 {
        if !(gamma > 0.0) {
            return f64::NEG_INFINITY;
        }
        let a = self.gamma_shape;
        let b = self.gamma_rate;
        a * b.ln() - statrs::function::gamma::ln_gamma(a) + (a - 1.0) * gamma.ln() - b * gamma
    }
}

/// Between-study heterogeneity: uniform on `(0, upper)` or held fixed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TauSetting {
    Estimated,
    Fixed(f64),
}

/// Lower bound applied to τ inside the sampler.
pub const TAU_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub priors: PriorSettings,
    pub tau: TauSetting,
    pub reference: TreatmentId,
}

impl ModelSpec {
    pub fn new(kind: ModelKind) -> Self {
        Self {
            kind,
            priors: PriorSettings::default(),
            tau: TauSetting::Estimated,
            reference: TreatmentId::REFERENCE,
        }
    }

    pub fn with_fixed_tau(mut self, tau: f64) -> Self {
        self.tau = TauSetting::Fixed(tau);
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.priors.validate()?;
        if let TauSetting::Fixed(t) = self.tau {
            if !(t > 0.0 && t < self.priors.tau_upper) {
                return Err(ModelError::Domain(format!("fixed tau {t} outside (0, tau_upper)")));
            }
        }
        Ok(())
    }
}

/// Parameters of one participant-level study. `beta` and `delta_diff` are the
/// positive-minus-negative differences of the baseline and of the effect.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IpdParameters {
    pub gamma: f64,
    pub mu_neg: f64,
    pub beta: f64,
    pub delta_neg: f64,
    pub delta_diff: f64,
}

impl IpdParameters {
    pub fn mu_pos(&self) -> f64 {
        self.mu_neg + self.beta
    }

    pub fn delta_pos(&self) -> f64 {
        self.delta_neg + self.delta_diff
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParameters {
    pub ipd: Vec<IpdParameters>,
    /// Study effects of the aggregate rows, in network order.
    pub ad_delta: Vec<f64>,
    /// Basic parameters in the negative subgroup, indexed by treatment id − 1;
    /// the reference entry is zero.
    pub d_neg: Vec<f64>,
    pub beta_bar: Vec<f64>,
    pub tau: f64,
}

impl ModelParameters {
    pub fn d_pos(&self, k: TreatmentId) -> f64 {
        self.d_neg[k.index()] + self.beta_bar[k.index()]
    }

    /// Parameters with every effect zero, shapes `1` and `tau = 1`.
    pub fn zeros(n_treatments: usize, n_ipd: usize, n_ad: usize) -> Self {
        Self {
            ipd: vec![
                IpdParameters {
                    gamma: 1.0,
                    mu_neg: 0.0,
                    beta: 0.0,
                    delta_neg: 0.0,
                    delta_diff: 0.0,
                };
                n_ipd
            ],
            ad_delta: vec![0.0; n_ad],
            d_neg: vec![0.0; n_treatments],
            beta_bar: vec![0.0; n_treatments],
            tau: 1.0,
        }
    }

    /// Free parameters in a fixed order: per participant-level study
    /// `(gamma, mu_neg, beta, delta_neg, delta_diff)`, aggregate effects,
    /// non-reference `d_neg`, non-reference `beta_bar`, then τ when estimated.
    pub fn free_vector(&self, spec: &ModelSpec) -> Vec<f64> {
        let mut v = Vec::new();
        for b in &self.ipd {
            v.extend([b.gamma, b.mu_neg, b.beta, b.delta_neg, b.delta_diff]);
        }
        v.extend(&self.ad_delta);
        let r = spec.reference.index();
        v.extend(self.d_neg.iter().enumerate().filter(|(i, _)| *i != r).map(|(_, x)| x));
        v.extend(self.beta_bar.iter().enumerate().filter(|(i, _)| *i != r).map(|(_, x)| x));
        if spec.tau == TauSetting::Estimated {
            v.push(self.tau);
        }
        v
    }

    /// Inverse of [`ModelParameters::free_vector`], using `self` for shapes
    /// and fixed entries.
    pub fn with_free_vector(&self, spec: &ModelSpec, v: &[f64]) -> Self {
        let mut out = self.clone();
        let mut it = v.iter().copied();
        let mut next = || it.next().expect("free vector too short");
        for b in &mut out.ipd {
            b.gamma = next();
            b.mu_neg = next();
            b.beta = next();
            b.delta_neg = next();
            b.delta_diff = next();
        }
        for d in &mut out.ad_delta {
            *d = next();
        }
        let r = spec.reference.index();
        for (i, d) in out.d_neg.iter_mut().enumerate() {
            if i != r {
                *d = next();
            }
        }
        for (i, d) in out.beta_bar.iter_mut().enumerate() {
            if i != r {
                *d = next();
            }
        }
        if spec.tau == TauSetting::Estimated {
            out.tau = next();
        }
        out
    }
}

/// Log-likelihood contribution of one participant.
pub fn weibull_loglik(time: f64, event: bool, gamma: f64, log_lambda: f64) -> Result<f64> {
    if !(time > 0.0) || !(gamma > 0.0) {
        return Err(ModelError::Domain(format!(
            "weibull likelihood needs positive time and shape (t={time}, gamma={gamma})"
        )));
    }
    let cum_hazard = (log_lambda + gamma * time.ln()).exp();
    let log_hazard = log_lambda + gamma.ln() + (gamma - 1.0) * time.ln();
    Ok(if event { log_hazard - cum_hazard } else { -cum_hazard })
}

pub fn linear_predictor(mu_neg: f64, beta: f64, delta_neg: f64, delta_diff: f64, x: u8, t: u8) -> f64 {
    let x = f64::from(x);
    let t = f64::from(t);
    mu_neg + beta * x + delta_neg * t + delta_diff * x * t
}

pub fn ad_loglik(y: f64, sigma: f64, delta: f64) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(ModelError::Domain(format!("sigma must be positive, got {sigma}")));
    }
    Ok(normal_lnpdf(y, delta, sigma))
}

/// Mean of a study effect comparing `l` with `k` at positive proportion `ppos`.
pub fn consistency_mean(d_neg: &[f64], beta_bar: &[f64], k: TreatmentId, l: TreatmentId, ppos: f64) -> f64 {
    d_neg[l.index()] - d_neg[k.index()] + (beta_bar[l.index()] - beta_bar[k.index()]) * ppos
}

fn check_shapes(spec: &ModelSpec, network: &Network, p: &ModelParameters) -> Result<()> {
    let n = network.n_treatments();
    let structure = |m: String| Err(ModelError::Structure(m));
    if p.d_neg.len() != n || p.beta_bar.len() != n {
        return structure(format!("expected {n} basic parameters per subgroup"));
    }
    let r = spec.reference.index();
    if r >= n {
        return structure(format!("reference treatment {} not in network", spec.reference));
    }
    if p.d_neg[r] != 0.0 || p.beta_bar[r] != 0.0 {
        return structure("reference basic parameters must be zero".into());
    }
    if p.ad_delta.len() != network.ad_studies.len() {
        return structure(format!(
            "{} aggregate effects for {} aggregate studies",
            p.ad_delta.len(),
            network.ad_studies.len()
        ));
    }
    let expected_ipd = match spec.kind {
        ModelKind::OneStage => network.ipd_studies.len(),
        _ => {
            if !network.ipd_studies.is_empty() {
                return structure("participant-level studies enter this model only after stage one".into());
            }
            0
        }
    };
    if p.ipd.len() != expected_ipd {
        return structure(format!("{} study blocks for {expected_ipd} participant-level studies", p.ipd.len()));
    }
    for s in &network.ipd_studies {
        if !(s.subjects.iter().any(|r| r.arm == 0) && s.subjects.iter().any(|r| r.arm == 1)) {
            return structure(format!("study `{}` lacks subjects in an arm", s.study_id));
        }
    }
    Ok(())
}

/// Exchangeable random-effects terms for every study effect.
pub fn random_effects_loglik(params: &ModelParameters, network: &Network, spec: &ModelSpec) -> f64 {
    let tau = params.tau;
    if !(tau > 0.0 && tau < spec.priors.tau_upper) {
        return f64::NEG_INFINITY;
    }
    let (d, b) = (&params.d_neg, &params.beta_bar);
    let mut total = 0.0;
    for (block, s) in params.ipd.iter().zip(&network.ipd_studies) {
        let md_neg = consistency_mean(d, b, s.treatment_k, s.treatment_l, 0.0);
        let md_pos = consistency_mean(d, b, s.treatment_k, s.treatment_l, 1.0);
        total += normal_lnpdf(block.delta_neg, md_neg, tau) + normal_lnpdf(block.delta_pos(), md_pos, tau);
    }
    for (&delta, s) in params.ad_delta.iter().zip(&network.ad_studies) {
        total += normal_lnpdf(delta, consistency_mean(d, b, s.treatment_k, s.treatment_l, s.ppos), tau);
    }
    total
}

/// Sum of prior log-densities; `-inf` outside the support.
pub fn log_prior(params: &ModelParameters, spec: &ModelSpec) -> f64 {
    let pr = &spec.priors;
    let sd = pr.normal_sd();
    let mut total = 0.0;
    for b in &params.ipd {
        total += pr.gamma_lnpdf(b.gamma) + normal_lnpdf(b.mu_neg, 0.0, sd) + normal_lnpdf(b.mu_pos(), 0.0, sd);
    }
    let r = spec.reference.index();
    for (i, (&d, &bb)) in params.d_neg.iter().zip(&params.beta_bar).enumerate() {
        if i != r {
            total += normal_lnpdf(d, 0.0, sd) + normal_lnpdf(bb, 0.0, sd);
        }
    }
    match spec.tau {
        TauSetting::Estimated => {
            if params.tau > 0.0 && params.tau < pr.tau_upper {
                total - pr.tau_upper.ln()
            } else {
                f64::NEG_INFINITY
            }
        }
        TauSetting::Fixed(t) => {
            if params.tau == t {
                total
            } else {
                f64::NEG_INFINITY
            }
        }
    }
}

/// Unnormalized log-posterior evaluated term by term.
pub fn log_posterior(spec: &ModelSpec, network: &Network, params: &ModelParameters) -> Result<f64> {
    check_shapes(spec, network, params)?;
    let mut total = log_prior(params, spec);
    if total == f64::NEG_INFINITY {
        return Ok(total);
    }
    total += random_effects_loglik(params, network, spec);
    for (&delta, s) in params.ad_delta.iter().zip(&network.ad_studies) {
        total += ad_loglik(s.y, s.sigma, delta)?;
    }
    for (b, s) in params.ipd.iter().zip(&network.ipd_studies) {
        for r in &s.subjects {
            let eta = linear_predictor(b.mu_neg, b.beta, b.delta_neg, b.delta_diff, r.biomarker, r.arm);
            total += weibull_loglik(r.time, r.event, b.gamma, eta)?;
        }
    }
    Ok(total)
}

/// Analytic gradient of [`log_posterior`] with respect to
/// [`ModelParameters::free_vector`].
pub fn log_posterior_gradient(spec: &ModelSpec, network: &Network, params: &ModelParameters) -> Result<Vec<f64>> {
    check_shapes(spec, network, params)?;
    let n = network.n_treatments();
    let var = spec.priors.normal_variance;
    let tau = params.tau;
    let tau2 = tau * tau;
    let mut g_ipd = vec![[0.0f64; 5]; params.ipd.len()];
    let mut g_ad = vec![0.0; params.ad_delta.len()];
    let mut g_d = vec![0.0; n];
    let mut g_b = vec![0.0; n];
    let mut g_tau = 0.0;

    // d/dmd of ln N(delta; md, tau) and the matching tau derivative
    let mut re_term = |delta: f64, md: f64| -> f64 {
        let r = delta - md;
        g_tau += -1.0 / tau + r * r / (tau2 * tau);
        r / tau2
    };
    let add_md = |g_d: &mut [f64], g_b: &mut [f64], k: TreatmentId, l: TreatmentId, ppos: f64, w: f64| {
        g_d[l.index()] += w;
        g_d[k.index()] -= w;
        g_b[l.index()] += w * ppos;
        g_b[k.index()] -= w * ppos;
    };

    for (j, (b, s)) in params.ipd.iter().zip(&network.ipd_studies).enumerate() {
        let g = &mut g_ipd[j];
        for r in &s.subjects {
            let (x, t) = (f64::from(r.biomarker), f64::from(r.arm));
            let eta = linear_predictor(b.mu_neg, b.beta, b.delta_neg, b.delta_diff, r.biomarker, r.arm);
            let lt = r.time.ln();
            let h = (eta + b.gamma * lt).exp();
            let e = if r.event { 1.0 } else { 0.0 };
            let d_eta = e - h;
            g[0] += e * (1.0 / b.gamma + lt) - h * lt;
            g[1] += d_eta;
            g[2] += d_eta * x;
            g[3] += d_eta * t;
            g[4] += d_eta * x * t;
        }
        let a = spec.priors.gamma_shape;
        g[0] += (a - 1.0) / b.gamma - spec.priors.gamma_rate;
        g[1] += -b.mu_neg / var - b.mu_pos() / var;
        g[2] += -b.mu_pos() / var;

        let md_neg = consistency_mean(&params.d_neg, &params.beta_bar, s.treatment_k, s.treatment_l, 0.0);
        let md_pos = consistency_mean(&params.d_neg, &params.beta_bar, s.treatment_k, s.treatment_l, 1.0);
        let w_neg = re_term(b.delta_neg, md_neg);
        let w_pos = re_term(b.delta_pos(), md_pos);
        g[3] -= w_neg + w_pos;
        g[4] -= w_pos;
        add_md(&mut g_d, &mut g_b, s.treatment_k, s.treatment_l, 0.0, w_neg);
        add_md(&mut g_d, &mut g_b, s.treatment_k, s.treatment_l, 1.0, w_pos);
    }
    for (j, (&delta, s)) in params.ad_delta.iter().zip(&network.ad_studies).enumerate() {
        let md = consistency_mean(&params.d_neg, &params.beta_bar, s.treatment_k, s.treatment_l, s.ppos);
        let w = re_term(delta, md);
        g_ad[j] = (s.y - delta) / (s.sigma * s.sigma) - w;
        add_md(&mut g_d, &mut g_b, s.treatment_k, s.treatment_l, s.ppos, w);
    }
    for i in 0..n {
        g_d[i] -= params.d_neg[i] / var;
        g_b[i] -= params.beta_bar[i] / var;
    }

    let r = spec.reference.index();
    let mut out: Vec<f64> = g_ipd.into_iter().flatten().collect();
    out.extend(g_ad);
    out.extend(g_d.iter().enumerate().filter(|(i, _)| *i != r).map(|(_, x)| x));
    out.extend(g_b.iter().enumerate().filter(|(i, _)| *i != r).map(|(_, x)| x));
    if spec.tau == TauSetting::Estimated {
        out.push(g_tau);
    }
    Ok(out)
}

#[cfg(test)]
mod tests;
