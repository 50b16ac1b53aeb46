//! Bayesian network meta-regression for treatment effects in biomarker-defined
//! subgroups with time-to-event outcomes.
//!
//! The crate combines aggregate data (published hazard ratios with the
//! proportion of biomarker-positive participants) and individual participant
//! data under a Weibull proportional hazards model, linked through shared
//! basic parameters. It also contains the two routes used to obtain
//! participant-level data when trial datasets are unavailable: target trial
//! emulation from health-record style data, and reconstruction of
//! participant records from digitized Kaplan-Meier curves.
//!
//! Module map:
//!
//! * [`evidence`] - studies, treatments, networks, CSV ingestion.
//! * [`km`] - Kaplan-Meier estimation and curve reconstruction.
//! * [`emulation`] - eligibility, propensity matching, outcomes, synthetic records.
//! * [`model`] - the joint log-posterior.
//! * [`mcmc`] - adaptive Metropolis-within-Gibbs sampler and diagnostics.
//! * [`pipelines`] - Models 1 to 3, contrast summaries and exports.
//! * [`simulate`] - synthetic networks from known parameters.

pub mod emulation;
pub mod evidence;
pub mod km;
pub mod mcmc;
pub mod model;
pub mod pipelines;
pub mod simulate;
mod stats;

pub use evidence::{AdStudy, IpdStudy, Network, SubjectRecord, Treatment, TreatmentId};
pub use mcmc::{Draws, SamplerConfig};
pub use model::{ModelKind, ModelParameters, ModelSpec};
pub use pipelines::FitSummary;
