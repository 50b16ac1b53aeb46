//! Target trial emulation from health-record style data: eligibility,
//! regimen classification, propensity-score matching and per-protocol
//! outcomes, plus a synthetic record generator.

mod io;
mod matching;
mod synthetic;

pub use io::{read_ehr, write_ehr, EHR_COLUMNS};
pub use matching::{
    balance, cox_log_hr, fit_propensity, match_1to1, BalanceReport, BalanceRow, CoxFit, MatchUnit, PropensityFit,
};
pub use synthetic::{generate_synthetic_ehr, SyntheticEhrConfig};

use std::collections::BTreeSet;

use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evidence::{EvidenceError, IpdStudy, SubjectRecord, Treatment};
use crate::mcmc::derive_seed;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EmulationError {
    #[error("record `{patient}`: {message}")]
    Record { patient: String, message: String },
    #[error("no eligible records: {0}")]
    EmptyCohort(String),
    #[error("arm {0} has no patients")]
    MissingArm(RegimenClass),
    #[error("propensity model separates the arms (coefficient `{term}` reached {value:.2})")]
    Separation { term: String, value: f64 },
    #[error("propensity model is singular")]
    Singular,
    #[error("{0}")]
    Degenerate(String),
    #[error("matching produced no pairs")]
    NoPairs,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("csv error: {0}")]
    Csv(String),
    #[error(transparent)]
    Evidence(#[from] EvidenceError),
}

pub type Result<T, E = EmulationError> = std::result::Result<T, E>;

/// Days per month used for derived follow-up times.
pub const DAYS_PER_MONTH: f64 = 30.4375;

/// One patient's first treatment episode. Dates are day indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EhrRecord {
    pub patient_id: String,
    pub age: f64,
    pub biomarker: u8,
    pub regimen: Vec<String>,
    pub line_of_therapy: u32,
    pub start_date: i64,
    pub second_line_start: Option<i64>,
    pub death_date: Option<i64>,
    pub last_followup: i64,
}

impl EhrRecord {
    pub fn validate(&self) -> Result<()> {
        let fail = |message: &str| EmulationError::Record {
            patient: self.patient_id.clone(),
            message: message.to_string(),
        };
        if !self.age.is_finite() || self.age < 0.0 {
            return Err(fail("age must be a nonnegative number"));
        }
        if self.biomarker > 1 {
            return Err(fail("biomarker must be 0 or 1"));
        }
        if self.line_of_therapy == 0 {
            return Err(fail("line of therapy must be positive"));
        }
        if self.start_date > self.last_followup {
            return Err(fail("last follow-up precedes the start date"));
        }
        if self.second_line_start.is_some_and(|d| d < self.start_date) {
            return Err(fail("second line starts before the first line"));
        }
        if self.death_date.is_some_and(|d| d < self.start_date) {
            return Err(fail("death precedes the start date"));
        }
        Ok(())
    }
}

/// Regimen classes of the breast-cancer network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum RegimenClass {
    /// Chemotherapy without a taxane.
    C,
    /// Taxane alone.
    X,
    /// Taxane combined with chemotherapy.
    CX,
}

impl RegimenClass {
    pub fn tag(self) -> &'static str {
        match self {
            RegimenClass::C => "C",
            RegimenClass::X => "X",
            RegimenClass::CX => "CX",
        }
    }
}

impl std::fmt::Display for RegimenClass {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.tag())
    }
}

/// Drug labels counted as taxanes and as (non-taxane) chemotherapy.
/// Matching is case-insensitive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DrugClasses {
    pub taxanes: Vec<String>,
    pub chemo: Vec<String>,
}

impl Default for DrugClasses {
    fn default() -> Self {
        let own = |v: &[&str]| v.iter().map(|s| s.to_string()).collect();
        Self {
            taxanes: own(&["paclitaxel", "docetaxel"]),
            chemo: own(&["fluorouracil", "epirubicin", "cyclophosphamide", "vinorelbine", "capecitabine", "carboplatin"]),
        }
    }
}

/// Class of a regimen, `None` when it holds neither a taxane nor a listed
/// chemotherapy.
pub fn classify_regimen<S: AsRef<str>>(drugs: &[S], classes: &DrugClasses) -> Option<RegimenClass> {
    let has = |list: &[String]| {
        drugs
            .iter()
            .any(|d| list.iter().any(|l| l.eq_ignore_ascii_case(d.as_ref().trim())))
    };
    match (has(&classes.taxanes), has(&classes.chemo)) {
        (true, true) => Some(RegimenClass::CX),
        (true, false) => Some(RegimenClass::X),
        (false, true) => Some(RegimenClass::C),
        (false, false) => None,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Covariate {
    Age,
    Biomarker,
}

/// Protocol of the emulated trials.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmulationProtocol {
    pub min_age: f64,
    pub eligible_line: u32,
    pub drugs: DrugClasses,
    pub covariates: Vec<Covariate>,
    pub experimental: RegimenClass,
    pub control: RegimenClass,
    pub seed: u64,
    /// Maximum matching distance on the logit scale.
    pub caliper: Option<f64>,
    /// Number of trials emulated from disjoint folds of the cohort.
    pub n_trials: usize,
}

impl Default for EmulationProtocol {
    fn default() -> Self {
        Self {
            min_age: 18.0,
            eligible_line: 1,
            drugs: DrugClasses::default(),
            covariates: vec![Covariate::Age, Covariate::Biomarker],
            experimental: RegimenClass::CX,
            control: RegimenClass::X,
            seed: 1,
            caliper: None,
            n_trials: 1,
        }
    }
}

impl EmulationProtocol {
    pub fn validate(&self) -> Result<()> {
        if self.experimental == self.control {
            return Err(EmulationError::Config("experimental and control arms coincide".into()));
        }
        if self.covariates.is_empty() {
            return Err(EmulationError::Config("at least one covariate is required".into()));
        }
        let unique: BTreeSet<_> = self.covariates.iter().collect();
        if unique.len() != self.covariates.len() {
            return Err(EmulationError::Config("covariates repeat".into()));
        }
        if self.n_trials == 0 {
            return Err(EmulationError::Config("n_trials must be positive".into()));
        }
        if let Some(c) = self.caliper {
            if !(c > 0.0) {
                return Err(EmulationError::Config(format!("caliper must be positive, got {c}")));
            }
        }
        if !self.min_age.is_finite() {
            return Err(EmulationError::Config("min_age must be finite".into()));
        }
        Ok(())
    }
}

/// An eligible record with its arm (1 experimental, 0 control).
#[derive(Debug, Clone, PartialEq)]
pub struct CohortMember {
    pub record: EhrRecord,
    pub arm: u8,
}

/// Records of adults on the eligible line whose regimen falls in one of the
/// protocol arms.
pub fn filter_eligible(records: &[EhrRecord], protocol: &EmulationProtocol) -> Result<Vec<CohortMember>> {
    let cohort: Vec<CohortMember> = records
        .iter()
        .filter(|r| r.age >= protocol.min_age && r.line_of_therapy == protocol.eligible_line)
        .filter_map(|r| {
            let class = classify_regimen(&r.regimen, &protocol.drugs)?;
            let arm = if class == protocol.experimental {
                1
            } else if class == protocol.control {
                0
            } else {
                return None;
            };
            Some(CohortMember { record: r.clone(), arm })
        })
        .collect();
    if cohort.is_empty() {
        return Err(EmulationError::EmptyCohort(format!(
            "{} records, none aged ≥ {} on line {} with {} or {}",
            records.len(),
            protocol.min_age,
            protocol.eligible_line,
            protocol.experimental,
            protocol.control
        )));
    }
    Ok(cohort)
}

/// Per-protocol follow-up in months: until death (event), the start of the
/// second line or the last follow-up (censored), whichever comes first.
pub fn derive_outcome(record: &EhrRecord) -> Result<(f64, bool)> {
    let censor = record
        .second_line_start
        .map_or(record.last_followup, |s| s.min(record.last_followup));
    let (end, event) = match record.death_date {
        Some(d) if d <= censor => (d, true),
        _ => (censor, false),
    };
    let days = end - record.start_date;
    if days <= 0 {
        return Err(EmulationError::Record {
            patient: record.patient_id.clone(),
            message: format!("derived follow-up of {days} days is not positive"),
        });
    }
    Ok((days as f64 / DAYS_PER_MONTH, event))
}

/// One matched trial. Subjects come in pairs: experimental then control.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmulatedTrial {
    pub trial_id: String,
    pub experimental: RegimenClass,
    pub control: RegimenClass,
    /// Arm 1 is experimental.
    pub subjects: Vec<SubjectRecord>,
    /// Ages aligned with `subjects`, kept for balance reporting.
    pub ages: Vec<f64>,
    pub propensity: PropensityFit,
    pub balance_before: BalanceReport,
    pub balance_after: BalanceReport,
    pub fold_seed: u64,
}

impl EmulatedTrial {
    pub fn n_pairs(&self) -> usize {
        self.subjects.len() / 2
    }

    /// The trial as a participant-level study, looking up the arm classes
    /// among `treatments` by class tag.
    pub fn to_ipd_study(&self, treatments: &[Treatment]) -> Result<IpdStudy> {
        let id = |class: RegimenClass| {
            treatments
                .iter()
                .find(|t| t.class_tag == class.tag())
                .map(|t| t.id)
                .ok_or_else(|| EmulationError::Config(format!("treatment class {class} is not in the treatment map")))
        };
        let (k, l) = (id(self.control)?, id(self.experimental)?);
        Ok(IpdStudy::new(self.trial_id.clone(), k, l, self.subjects.clone())?.canonical())
    }

    /// Matched-analysis log hazard ratio (experimental vs control).
    pub fn log_hr(&self) -> Result<CoxFit> {
        cox_log_hr(&self.subjects)
    }
}

struct Eligible {
    record: EhrRecord,
    arm: u8,
    time: f64,
    event: bool,
}

fn emulate_fold(id: String, fold: &[Eligible], protocol: &EmulationProtocol, fold_seed: u64) -> Result<EmulatedTrial> {
    for (arm, class) in [(1u8, protocol.experimental), (0, protocol.control)] {
        if !fold.iter().any(|e| e.arm == arm) {
            return Err(EmulationError::MissingArm(class));
        }
    }
    let records: Vec<&EhrRecord> = fold.iter().map(|e| &e.record).collect();
    let arms: Vec<u8> = fold.iter().map(|e| e.arm).collect();
    let propensity = fit_propensity(&records, &arms, &protocol.covariates)?;
    let units: Vec<MatchUnit> = fold
        .iter()
        .zip(&propensity.scores)
        .map(|(e, &p)| MatchUnit {
            patient_id: e.record.patient_id.clone(),
            logit: (p / (1.0 - p)).ln(),
            arm: e.arm,
        })
        .collect();
    let pairs = match_1to1(&units, protocol.caliper)?;

    let mut subjects = Vec::with_capacity(2 * pairs.len());
    let mut ages = Vec::with_capacity(2 * pairs.len());
    for &(i, j) in &pairs {
        for idx in [i, j] {
            let e = &fold[idx];
            subjects.push(SubjectRecord::new(
                e.record.patient_id.clone(),
                e.time,
                e.event,
                e.record.biomarker,
                e.arm,
            )?);
            ages.push(e.record.age);
        }
    }
    let all_ages: Vec<f64> = fold.iter().map(|e| e.record.age).collect();
    let all_markers: Vec<u8> = fold.iter().map(|e| e.record.biomarker).collect();
    let markers: Vec<u8> = subjects.iter().map(|s| s.biomarker).collect();
    let matched_arms: Vec<u8> = subjects.iter().map(|s| s.arm).collect();
    Ok(EmulatedTrial {
        trial_id: id,
        experimental: protocol.experimental,
        control: protocol.control,
        balance_before: balance(&all_ages, &all_markers, &arms),
        balance_after: balance(&ages, &markers, &matched_arms),
        subjects,
        ages,
        propensity,
        fold_seed,
    })
}

/// Emulates `protocol.n_trials` trials. With more than one trial the eligible
/// cohort is shuffled by the protocol seed and split into folds of near-equal
/// size, matched independently.
pub fn emulate(records: &[EhrRecord], protocol: &EmulationProtocol) -> Result<Vec<EmulatedTrial>> {
    protocol.validate()?;
    for r in records {
        r.validate()?;
    }
    let cohort = filter_eligible(records, protocol)?;
    let mut eligible = Vec::with_capacity(cohort.len());
    for m in cohort {
        match derive_outcome(&m.record) {
            Ok((time, event)) => eligible.push(Eligible {
                record: m.record,
                arm: m.arm,
                time,
                event,
            }),
            Err(e) => warn!("skipping record: {e}"),
        }
    }
    if eligible.is_empty() {
        return Err(EmulationError::EmptyCohort("no record has positive follow-up".into()));
    }
    let n = protocol.n_trials;
    if n == 1 {
        return Ok(vec![emulate_fold("emulated1".into(), &eligible, protocol, protocol.seed)?]);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(protocol.seed);
    eligible.shuffle(&mut rng);
    let size = eligible.len() / n;
    let extra = eligible.len() % n;
    let mut folds = Vec::with_capacity(n);
    let mut rest = eligible.as_slice();
    for f in 0..n {
        let (head, tail) = rest.split_at(size + usize::from(f < extra));
        folds.push(head);
        rest = tail;
    }
    let run = |(f, fold): (usize, &&[Eligible])| {
        emulate_fold(format!("emulated{}", f + 1), fold, protocol, derive_seed(protocol.seed, f as u64))
    };
    #[cfg(feature = "parallel")]
    let trials: Vec<Result<EmulatedTrial>> = {
        use rayon::prelude::*;
        folds.par_iter().enumerate().map(run).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let trials: Vec<Result<EmulatedTrial>> = folds.iter().enumerate().map(run).collect();
    trials.into_iter().collect()
}
