//! Studies, treatments and the evidence network.
//!
//! Aggregate-data rows carry a published hazard ratio with its confidence
//! interval and hormone-receptor style counts; participant-level studies carry
//! one [`SubjectRecord`] per participant. Everything is canonicalized so that
//! each study compares a lower treatment id `k` (reference arm) with a higher
//! id `l` (experimental arm) and effects are log hazard ratios of `l` vs `k`.

mod ingest;
mod network;
mod transforms;

pub use ingest::{ingest_ad, ingest_ipd, write_ipd, TreatmentMap};
pub use network::{build_network, Network};
pub use transforms::{hr_to_loghr, impute_missing_status, ipd_ppos, Imputation};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvidenceError {
    #[error("no studies")]
    NoStudies,
    #[error("line {line}: {message}")]
    Row { line: u64, message: String },
    #[error("unknown treatment label `{0}` (not in treatment map)")]
    UnknownTreatment(String),
    #[error("treatment map line {line}: {message}")]
    Map { line: usize, message: String },
    #[error("confidence interval has zero width, standard deviation would be zero")]
    ZeroSd,
    #[error("{0}")]
    Domain(String),
    #[error("cannot impute biomarker status: no participants with known status")]
    CannotImpute,
    #[error("study `{study}`: {message}")]
    Study { study: String, message: String },
    #[error("treatment ids must be dense 1..n: {0}")]
    TreatmentIds(String),
    #[error("network is disconnected; components: {}", format_components(.0))]
    Disconnected(Vec<Vec<String>>),
    #[error("csv error: {0}")]
    Csv(String),
}

fn format_components(components: &[Vec<String>]) -> String {
    components
        .iter()
        .map(|c| format!("{{{}}}", c.join(", ")))
        .collect::<Vec<_>>()
        .join(" ")
}

pub type Result<T, E = EvidenceError> = std::result::Result<T, E>;

/// One-based treatment identifier; id 1 is the network reference.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct TreatmentId(pub usize);

impl TreatmentId {
    pub const REFERENCE: TreatmentId = TreatmentId(1);

    /// Zero-based position in per-treatment vectors.
    pub fn index(self) -> usize {
        self.0 - 1
    }
}

impl std::fmt::Display for TreatmentId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Treatment {
    pub id: TreatmentId,
    pub label: String,
    pub class_tag: String,
}

/// Participant counts by biomarker status as published.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatusCounts {
    pub n_total: u32,
    pub n_pos: u32,
    pub n_neg: u32,
    pub n_unknown: u32,
}

/// Published hazard ratio with its confidence interval, oriented as `l` vs `k`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PublishedHr {
    pub hr: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

/// One aggregate-data comparison of `treatment_l` against `treatment_k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdStudy {
    pub study_id: String,
    pub treatment_k: TreatmentId,
    pub treatment_l: TreatmentId,
    /// Log hazard ratio of `l` vs `k`.
    pub y: f64,
    /// Standard deviation of `y`.
    pub sigma: f64,
    /// Proportion of biomarker-positive participants.
    pub ppos: f64,
    pub published: Option<PublishedHr>,
    pub counts: Option<StatusCounts>,
}

impl AdStudy {
    /// Builds a row from an already log-scale effect.
    pub fn new(
        study_id: impl Into<String>,
        treatment_k: TreatmentId,
        treatment_l: TreatmentId,
        y: f64,
        sigma: f64,
        ppos: f64,
    ) -> Result<Self> {
        let study = Self {
            study_id: study_id.into(),
            treatment_k,
            treatment_l,
            y,
            sigma,
            ppos,
            published: None,
            counts: None,
        };
        study.validate()?;
        Ok(study)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |message: String| EvidenceError::Study {
            study: self.study_id.clone(),
            message,
        };
        if self.treatment_k == self.treatment_l {
            return Err(fail("reference and experimental treatment coincide".into()));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(fail(format!("sigma must be positive, got {}", self.sigma)));
        }
        if !self.y.is_finite() {
            return Err(fail("log hazard ratio is not finite".into()));
        }
        if !(0.0..=1.0).contains(&self.ppos) {
            return Err(fail(format!("ppos {} outside [0, 1]", self.ppos)));
        }
        Ok(())
    }

    /// Orients the comparison so that `treatment_k < treatment_l`, negating the
    /// effect when the published direction is reversed.
    pub fn canonical(mut self) -> Self {
        if self.treatment_k > self.treatment_l {
            std::mem::swap(&mut self.treatment_k, &mut self.treatment_l);
            self.y = -self.y;
            if let Some(p) = self.published.as_mut() {
                *p = PublishedHr {
                    hr: 1.0 / p.hr,
                    ci_low: 1.0 / p.ci_high,
                    ci_high: 1.0 / p.ci_low,
                };
            }
        }
        self
    }
}

/// One participant. `arm` is 0 for the study's reference treatment `k` and 1
/// for the experimental treatment `l`; `biomarker` is 1 for positive status.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectRecord {
    pub subject_id: String,
    pub time: f64,
    pub event: bool,
    pub biomarker: u8,
    pub arm: u8,
}

impl SubjectRecord {
    pub fn new(
        subject_id: impl Into<String>,
        time: f64,
        event: bool,
        biomarker: u8,
        arm: u8,
    ) -> Result<Self> {
        let r = Self {
            subject_id: subject_id.into(),
            time,
            event,
            biomarker,
            arm,
        };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.time > 0.0 && self.time.is_finite()) {
            return Err(EvidenceError::Domain(format!(
                "subject `{}`: time must be positive, got {}",
                self.subject_id, self.time
            )));
        }
        if self.biomarker > 1 || self.arm > 1 {
            return Err(EvidenceError::Domain(format!(
                "subject `{}`: biomarker and arm must be 0 or 1",
                self.subject_id
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IpdStudy {
    pub study_id: String,
    pub treatment_k: TreatmentId,
    pub treatment_l: TreatmentId,
    pub subjects: Vec<SubjectRecord>,
}

impl IpdStudy {
    pub fn new(
        study_id: impl Into<String>,
        treatment_k: TreatmentId,
        treatment_l: TreatmentId,
        subjects: Vec<SubjectRecord>,
    ) -> Result<Self> {
        let s = Self {
            study_id: study_id.into(),
            treatment_k,
            treatment_l,
            subjects,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |message: &str| EvidenceError::Study {
            study: self.study_id.clone(),
            message: message.to_string(),
        };
        if self.treatment_k == self.treatment_l {
            return Err(fail("reference and experimental treatment coincide"));
        }
        for s in &self.subjects {
            s.validate()?;
        }
        for arm in 0..=1u8 {
            if !self.subjects.iter().any(|s| s.arm == arm) {
                return Err(fail(&format!("no subjects in arm {arm}")));
            }
        }
        Ok(())
    }

    /// Orients the study so that `treatment_k < treatment_l`, swapping arm codes.
    pub fn canonical(mut self) -> Self {
        if self.treatment_k > self.treatment_l {
            std::mem::swap(&mut self.treatment_k, &mut self.treatment_l);
            for s in &mut self.subjects {
                s.arm = 1 - s.arm;
            }
        }
        self
    }

    pub fn has_subgroup(&self, biomarker: u8) -> bool {
        self.subjects.iter().any(|s| s.biomarker == biomarker)
    }

    pub fn events_in_arm(&self, arm: u8) -> usize {
        self.subjects.iter().filter(|s| s.arm == arm && s.event).count()
    }
}
