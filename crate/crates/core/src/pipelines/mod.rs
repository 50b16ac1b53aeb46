//! The three analysis models, stage-one reductions of participant data, and
//! summaries of treatment contrasts on the hazard-ratio scale.
//!
//! * Model 1 fits the network meta-regression to aggregate rows only.
//! * Model 2 first reduces each participant-level study to log hazard ratios
//!   ([`stage_one_fit`]) and then runs Model 1 on the union.
//! * Model 3 fits participant data and aggregate rows jointly.

mod summary;

pub use summary::{
    compare, contrast_hr, export_forest, format_pct, log_hr_draws, width_reduction, ContrastSummary, Diagnostics, FitSummary,
    ParameterDiagnostics, Provenance, Subgroup, WidthRow,
};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::evidence::{build_network, ipd_ppos, AdStudy, EvidenceError, IpdStudy, Network, TreatmentId};
use crate::mcmc::{derive_seed, run_chains, summarize_values, Draws, InitStrategy, McmcError, SamplerConfig, Target};
use crate::model::{ModelError, ModelKind, ModelSpec, NmaTarget, PriorSettings, StageOneMode, StageOneTarget};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PipelineError {
    #[error(transparent)]
    Evidence(#[from] EvidenceError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Mcmc(#[from] McmcError),
    #[error("stage one, study `{study}`: {message}")]
    StageOne { study: String, message: String },
    #[error("{0}")]
    Invalid(String),
    #[error("summaries do not match: {0}")]
    Mismatch(String),
    #[error("i/o error: {0}")]
    Io(String),
}

pub type Result<T, E = PipelineError> = std::result::Result<T, E>;

/// Interval level used for every reported credible interval.
pub const LEVEL: f64 = 0.95;
/// Convergence gate applied to every contrast.
pub const RHAT_MAX: f64 = 1.05;
pub const ESS_MIN: f64 = 400.0;

/// A study-level log hazard ratio produced from participant data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoAdRow {
    pub study_id: String,
    pub treatment_k: TreatmentId,
    pub treatment_l: TreatmentId,
    pub y: f64,
    pub sigma: f64,
    pub ppos: f64,
    /// How the row was produced, e.g. `stage-one:pooled`.
    pub origin: String,
}

impl PseudoAdRow {
    pub fn to_ad_study(&self) -> Result<AdStudy> {
        Ok(AdStudy::new(
            self.study_id.clone(),
            self.treatment_k,
            self.treatment_l,
            self.y,
            self.sigma,
            self.ppos,
        )?)
    }
}

/// A fitted model: summary plus draws of the basic parameters and τ.
#[derive(Debug, Clone, PartialEq)]
pub struct Fit {
    pub summary: FitSummary,
    pub draws: Draws,
    /// Rows derived in stage one (Model 2 only).
    pub pseudo_rows: Vec<PseudoAdRow>,
}

fn jitter_init(center: Vec<f64>) -> InitStrategy {
    InitStrategy::Jittered { center, scale: 0.3 }
}

/// Reduces one participant-level study to log hazard ratio rows.
pub fn stage_one_fit(
    study: &IpdStudy,
    mode: StageOneMode,
    priors: &PriorSettings,
    config: &SamplerConfig,
) -> Result<Vec<PseudoAdRow>> {
    let stage_err = |message: String| PipelineError::StageOne {
        study: study.study_id.clone(),
        message,
    };
    let target = StageOneTarget::new(study, mode, *priors).map_err(|e| stage_err(e.to_string()))?;
    let draws = run_chains(&target, &jitter_init(target.initial_point()), config)?;
    let mut rows = Vec::new();
    for (biomarker, index) in target.effects() {
        let values = draws.per_chain_index(index).concat();
        let s = summarize_values(&values, LEVEL)?;
        let (ppos, tag) = match biomarker {
            None => (ipd_ppos(study), "pooled"),
            Some(1) => (1.0, "subgroup+"),
            Some(_) => (0.0, "subgroup-"),
        };
        let study_id = match biomarker {
            None => study.study_id.clone(),
            Some(1) => format!("{}+", study.study_id),
            Some(_) => format!("{}-", study.study_id),
        };
        if !(s.sd > 0.0) {
            return Err(stage_err("posterior standard deviation is zero".into()));
        }
        rows.push(PseudoAdRow {
            study_id,
            treatment_k: study.treatment_k,
            treatment_l: study.treatment_l,
            y: s.mean,
            sigma: s.sd,
            ppos,
            origin: format!("stage-one:{tag}"),
        });
    }
    Ok(rows)
}

/// Stage one over every participant-level study, each with its own seed.
pub fn stage_one_all(
    studies: &[IpdStudy],
    mode: StageOneMode,
    priors: &PriorSettings,
    config: &SamplerConfig,
) -> Result<Vec<PseudoAdRow>> {
    let run = |(j, s): (usize, &IpdStudy)| {
        let cfg = SamplerConfig {
            seed: derive_seed(config.seed, j as u64),
            ..config.clone()
        };
        stage_one_fit(s, mode, priors, &cfg)
    };
    #[cfg(feature = "parallel")]
    let results: Vec<Result<Vec<PseudoAdRow>>> = {
        use rayon::prelude::*;
        studies.par_iter().enumerate().map(run).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let results: Vec<Result<Vec<PseudoAdRow>>> = studies.iter().enumerate().map(run).collect();
    Ok(results.into_iter().collect::<Result<Vec<_>>>()?.concat())
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Digest of the evidence a fit consumed.
pub fn data_digest(network: &Network) -> String {
    sha256_hex(&serde_json::to_vec(network).expect("network serializes"))
}

/// Digest of the model and sampler settings.
pub fn config_hash(spec: &ModelSpec, config: &SamplerConfig, mode: Option<StageOneMode>) -> String {
    let doc = serde_json::json!({ "spec": spec, "sampler": config, "stage_one": mode });
    sha256_hex(doc.to_string().as_bytes())
}

fn ad_only(network: &Network) -> Result<Network> {
    Ok(build_network(network.treatments.clone(), network.ad_studies.clone(), vec![])?)
}

fn run_nma(network: &Network, spec: &ModelSpec, config: &SamplerConfig, mode: Option<StageOneMode>) -> Result<(Draws, FitSummary)> {
    let target = NmaTarget::new(network, spec)?;
    let draws = run_chains(&target, &jitter_init(target.initial_point()), config)?;
    let basic = target.basic_draws(&draws);
    let provenance = Provenance {
        config_hash: config_hash(spec, config, mode),
        seed: config.seed,
        data_digest: data_digest(network),
    };
    let summary = FitSummary::from_draws(spec.kind, network, &basic, provenance)?;
    Ok((basic, summary))
}

/// Model 1: network meta-regression on the aggregate rows of `network`
/// (participant-level studies, if any, are ignored).
pub fn fit_model1(network: &Network, spec: &ModelSpec, config: &SamplerConfig) -> Result<Fit> {
    let spec = ModelSpec {
        kind: ModelKind::AdNmr,
        ..spec.clone()
    };
    let net = ad_only(network)?;
    let (draws, summary) = run_nma(&net, &spec, config, None)?;
    Ok(Fit {
        summary,
        draws,
        pseudo_rows: vec![],
    })
}

/// Model 2: stage-one reduction of every participant-level study, then
/// Model 1 on aggregate and derived rows together.
pub fn fit_model2(network: &Network, mode: StageOneMode, spec: &ModelSpec, config: &SamplerConfig) -> Result<Fit> {
    let spec = ModelSpec {
        kind: ModelKind::TwoStage,
        ..spec.clone()
    };
    // stage-one seeds are derived from a separate branch of the master seed
    let stage_config = SamplerConfig {
        seed: derive_seed(config.seed, u64::MAX),
        ..config.clone()
    };
    let pseudo_rows = stage_one_all(&network.ipd_studies, mode, &spec.priors, &stage_config)?;
    let mut ad = network.ad_studies.clone();
    for row in &pseudo_rows {
        ad.push(row.to_ad_study()?);
    }
    let net = build_network(network.treatments.clone(), ad, vec![])?;
    let (draws, summary) = run_nma(&net, &spec, config, Some(mode))?;
    Ok(Fit {
        summary,
        draws,
        pseudo_rows,
    })
}

/// Model 3: joint one-stage model.
pub fn fit_model3(network: &Network, spec: &ModelSpec, config: &SamplerConfig) -> Result<Fit> {
    let spec = ModelSpec {
        kind: ModelKind::OneStage,
        ..spec.clone()
    };
    let (draws, summary) = run_nma(network, &spec, config, None)?;
    Ok(Fit {
        summary,
        draws,
        pseudo_rows: vec![],
    })
}

/// Runs the model named by `spec.kind`.
pub fn fit(network: &Network, mode: StageOneMode, spec: &ModelSpec, config: &SamplerConfig) -> Result<Fit> {
    match spec.kind {
        ModelKind::AdNmr => fit_model1(network, spec, config),
        ModelKind::TwoStage => fit_model2(network, mode, spec, config),
        ModelKind::OneStage => fit_model3(network, spec, config),
    }
}

/// Target dimension of a model on a network, for logging.
pub fn model_dimension(network: &Network, spec: &ModelSpec) -> Result<usize> {
    Ok(NmaTarget::new(network, spec)?.dim())
}
