use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{DrugClasses, EhrRecord, EmulationError, RegimenClass, Result, DAYS_PER_MONTH};
use crate::simulate::weibull_time;

/// Generator settings for synthetic health records. Treatment assignment is
/// logistic in age (per decade from `age_mean`) and biomarker status; survival
/// is Weibull with proportional effects of treatment, biomarker and age.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticEhrConfig {
    /// Prefix of generated patient ids, so cohorts can be concatenated.
    pub id_prefix: String,
    pub n: usize,
    pub age_mean: f64,
    pub age_sd: f64,
    pub p_biomarker: f64,
    pub experimental: RegimenClass,
    pub control: RegimenClass,
    pub assign_intercept: f64,
    pub assign_age: f64,
    pub assign_biomarker: f64,
    pub weibull_shape: f64,
    /// Log Weibull scale (months) for control, biomarker-negative patients at the mean age.
    pub log_scale: f64,
    pub log_hr_treatment: f64,
    pub log_hr_biomarker: f64,
    pub log_hr_age: f64,
    /// Monthly rate of starting a second line.
    pub second_line_rate: f64,
    /// Administrative follow-up in months, drawn uniformly.
    pub followup_months: (f64, f64),
    /// Share of records made ineligible (minor, later line or other regimen).
    pub ineligible_fraction: f64,
}

impl Default for SyntheticEhrConfig {
    fn default() -> Self {
        Self {
            id_prefix: "P".into(),
            n: 5000,
            age_mean: 60.0,
            age_sd: 12.0,
            p_biomarker: 0.75,
            experimental: RegimenClass::CX,
            control: RegimenClass::X,
            assign_intercept: -0.5,
            assign_age: 0.4,
            assign_biomarker: -0.9,
            weibull_shape: 1.2,
            log_scale: -3.2,
            log_hr_treatment: 0.0,
            log_hr_biomarker: -0.5,
            log_hr_age: 0.2,
            second_line_rate: 0.01,
            followup_months: (24.0, 72.0),
            ineligible_fraction: 0.1,
        }
    }
}

impl SyntheticEhrConfig {
    /// No confounding and no treatment effect.
    pub fn unconfounded(n: usize) -> Self {
        Self {
            n,
            assign_intercept: 0.0,
            assign_age: 0.0,
            assign_biomarker: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(EmulationError::Config(m));
        if self.experimental == self.control {
            return bad("experimental and control classes coincide".into());
        }
        if !(self.age_sd > 0.0) || !self.age_mean.is_finite() {
            return bad("age distribution needs a finite mean and positive sd".into());
        }
        for (name, p) in [("p_biomarker", self.p_biomarker), ("ineligible_fraction", self.ineligible_fraction)] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} must lie in [0, 1], got {p}"));
            }
        }
        if !(self.weibull_shape > 0.0) {
            return bad(format!("weibull_shape must be positive, got {}", self.weibull_shape));
        }
        if !(self.second_line_rate >= 0.0) {
            return bad("second_line_rate must be nonnegative".into());
        }
        let (a, b) = self.followup_months;
        if !(a > 0.0 && b >= a) {
            return bad(format!("followup_months must satisfy 0 < a <= b, got ({a}, {b})"));
        }
        let coefficients = [
            self.assign_intercept,
            self.assign_age,
            self.assign_biomarker,
            self.log_scale,
            self.log_hr_treatment,
            self.log_hr_biomarker,
            self.log_hr_age,
        ];
        if coefficients.iter().any(|c| !c.is_finite()) {
            return bad("coefficients must be finite".into());
        }
        Ok(())
    }
}

fn regimen(rng: &mut ChaCha8Rng, class: RegimenClass, drugs: &DrugClasses) -> Vec<String> {
    let mut pick = |list: &[String]| list[rng.random_range(0..list.len())].clone();
    match class {
        RegimenClass::X => vec![pick(&drugs.taxanes)],
        RegimenClass::C => vec![pick(&drugs.chemo)],
        RegimenClass::CX => {
            let t = pick(&drugs.taxanes);
            vec![t, pick(&drugs.chemo)]
        }
    }
}

fn to_days(months: f64) -> i64 {
    ((months * DAYS_PER_MONTH).round() as i64).max(1)
}

/// Synthetic records, reproducible from `seed`.
pub fn generate_synthetic_ehr(config: &SyntheticEhrConfig, seed: u64) -> Result<Vec<EhrRecord>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ages = Normal::new(config.age_mean, config.age_sd).map_err(|e| EmulationError::Config(e.to_string()))?;
    let drugs = DrugClasses::default();
    let width = config.n.max(1).to_string().len();
    let mut out = Vec::with_capacity(config.n);
    for i in 0..config.n {
        let age = ages.sample(&mut rng).clamp(18.0, 100.0);
        let biomarker = u8::from(rng.random::<f64>() < config.p_biomarker);
        let decade = (age - config.age_mean) / 10.0;
        let logit = config.assign_intercept + config.assign_age * decade + config.assign_biomarker * f64::from(biomarker);
        let experimental = rng.random::<f64>() < 1.0 / (1.0 + (-logit).exp());
        let class = if experimental { config.experimental } else { config.control };

        let eta = config.log_scale
            + config.log_hr_treatment * f64::from(u8::from(experimental))
            + config.log_hr_biomarker * f64::from(biomarker)
            + config.log_hr_age * decade;
        let death = weibull_time(&mut rng, config.weibull_shape, eta);
        let second = if config.second_line_rate > 0.0 {
            -(1.0 - rng.random::<f64>()).ln() / config.second_line_rate
        } else {
            f64::INFINITY
        };
        let (a, b) = config.followup_months;
        let followup = a + (b - a) * rng.random::<f64>();
        let start: i64 = rng.random_range(0..730);

        let mut record = EhrRecord {
            patient_id: format!("{}{:0width$}", config.id_prefix, i + 1),
            age,
            biomarker,
            regimen: regimen(&mut rng, class, &drugs),
            line_of_therapy: 1,
            start_date: start,
            second_line_start: (second < followup).then(|| start + to_days(second)),
            death_date: (death < followup).then(|| start + to_days(death)),
            last_followup: start + to_days(followup),
        };
        if rng.random::<f64>() < config.ineligible_fraction {
            match rng.random_range(0..3) {
                0 => record.age = rng.random_range(12.0..18.0),
                1 => record.line_of_therapy = 2,
                _ => record.regimen = vec!["tamoxifen".into()],
            }
        }
        out.push(record);
    }
    Ok(out)
}
