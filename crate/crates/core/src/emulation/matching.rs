use log::warn;
use serde::{Deserialize, Serialize};

use super::{Covariate, EhrRecord, EmulationError, Result};
use crate::evidence::SubjectRecord;

const IRLS_TOL: f64 = 1e-8;
const IRLS_MAX_ITER: usize = 100;
const SEPARATION_BOUND: f64 = 20.0;

/// Logistic model of the experimental arm. Age enters per decade, centred at
/// the cohort mean; biomarker status as 0/1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropensityFit {
    /// `intercept`, then one term per covariate.
    pub terms: Vec<String>,
    pub coefficients: Vec<f64>,
    pub age_centre: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Fitted P(experimental), aligned with the input records.
    pub scores: Vec<f64>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Solves `a x = b` for symmetric positive definite `a` (row-major).
fn cholesky_solve(a: &[f64], b: &[f64]) -> Option<Vec<f64>> {
    let n = b.len();
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if !(s > 0.0) || !s.is_finite() {
                    return None;
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    let mut y = vec![0.0; n];
    for i in 0..n {
        let s: f64 = (0..i).map(|k| l[i * n + k] * y[k]).sum();
        y[i] = (b[i] - s) / l[i * n + i];
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let s: f64 = ((i + 1)..n).map(|k| l[k * n + i] * x[k]).sum();
        x[i] = (y[i] - s) / l[i * n + i];
    }
    Some(x)
}

/// Fits P(arm = 1 | covariates) by iteratively reweighted least squares.
pub fn fit_propensity(records: &[&EhrRecord], arms: &[u8], covariates: &[Covariate]) -> Result<PropensityFit> {
    assert_eq!(records.len(), arms.len(), "one arm per record");
    for arm in [0u8, 1] {
        if !arms.contains(&arm) {
            return Err(EmulationError::Degenerate(format!("propensity model needs both arms; arm {arm} is empty")));
        }
    }
    let age_centre = records.iter().map(|r| r.age).sum::<f64>() / records.len() as f64;
    let p = covariates.len() + 1;
    let design: Vec<f64> = records
        .iter()
        .flat_map(|r| {
            std::iter::once(1.0).chain(covariates.iter().map(move |c| match c {
                Covariate::Age => (r.age - age_centre) / 10.0,
                Covariate::Biomarker => f64::from(r.biomarker),
            }))
        })
        .collect();
    let mut terms = vec!["intercept".to_string()];
    terms.extend(covariates.iter().map(|c| match c {
        Covariate::Age => "age_per_decade".to_string(),
        Covariate::Biomarker => "biomarker".to_string(),
    }));

    let mut beta = vec![0.0; p];
    let mut iterations = 0;
    let mut converged = false;
    while iterations < IRLS_MAX_ITER {
        let mut grad = vec![0.0; p];
        let mut hess = vec![0.0; p * p];
        for (row, &y) in design.chunks_exact(p).zip(arms) {
            let eta: f64 = row.iter().zip(&beta).map(|(x, b)| x * b).sum();
            let mu = sigmoid(eta);
            let w = mu * (1.0 - mu);
            for i in 0..p {
                grad[i] += row[i] * (f64::from(y) - mu);
                for j in 0..=i {
                    hess[i * p + j] += w * row[i] * row[j];
                }
            }
        }
        if grad.iter().map(|g| g * g).sum::<f64>().sqrt() <= IRLS_TOL {
            converged = true;
            break;
        }
        for i in 0..p {
            for j in 0..i {
                hess[j * p + i] = hess[i * p + j];
            }
        }
        let step = cholesky_solve(&hess, &grad).ok_or(EmulationError::Singular)?;
        for (b, s) in beta.iter_mut().zip(&step) {
            *b += s;
        }
        iterations += 1;
        if let Some((i, b)) = beta.iter().enumerate().find(|(_, b)| b.abs() > SEPARATION_BOUND) {
            return Err(EmulationError::Separation {
                term: terms[i].clone(),
                value: *b,
            });
        }
    }
    if !converged {
        warn!("propensity model stopped after {IRLS_MAX_ITER} iterations without reaching the gradient tolerance");
    }
    let scores = design
        .chunks_exact(p)
        .map(|row| sigmoid(row.iter().zip(&beta).map(|(x, b)| x * b).sum()))
        .collect();
    Ok(PropensityFit {
        terms,
        coefficients: beta,
        age_centre,
        iterations,
        converged,
        scores,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchUnit {
    pub patient_id: String,
    pub logit: f64,
    /// 1 experimental, 0 control.
    pub arm: u8,
}

/// Greedy nearest-neighbour matching without replacement on the logit of the
/// propensity score. Experimental subjects are taken in descending logit
/// order; ties in order or in distance go to the lexically smaller
/// `patient_id`. A pair further apart than `caliper` is dropped. Returns
/// `(experimental, control)` index pairs into `units`.
pub fn match_1to1(units: &[MatchUnit], caliper: Option<f64>) -> Result<Vec<(usize, usize)>> {
    let mut experimental: Vec<usize> = (0..units.len()).filter(|&i| units[i].arm == 1).collect();
    let controls: Vec<usize> = (0..units.len()).filter(|&i| units[i].arm == 0).collect();
    if experimental.is_empty() || controls.is_empty() {
        return Err(EmulationError::Degenerate("matching needs subjects in both arms".into()));
    }
    experimental.sort_by(|&a, &b| {
        units[b]
            .logit
            .total_cmp(&units[a].logit)
            .then_with(|| units[a].patient_id.cmp(&units[b].patient_id))
    });
    let mut taken = vec![false; controls.len()];
    let mut pairs = Vec::new();
    for &e in &experimental {
        let mut best: Option<(f64, usize)> = None;
        for (c, &ci) in controls.iter().enumerate() {
            if taken[c] {
                continue;
            }
            let d = (units[e].logit - units[ci].logit).abs();
            let better = match best {
                None => true,
                Some((bd, bc)) => d < bd || (d == bd && units[ci].patient_id < units[controls[bc]].patient_id),
            };
            if better {
                best = Some((d, c));
            }
        }
        let Some((d, c)) = best else { break };
        if caliper.is_some_and(|cal| d > cal) {
            continue;
        }
        taken[c] = true;
        pairs.push((e, controls[c]));
    }
    if pairs.is_empty() {
        return Err(EmulationError::NoPairs);
    }
    Ok(pairs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceRow {
    pub covariate: String,
    /// Mean, or proportion for biomarker status.
    pub mean_experimental: f64,
    pub mean_control: f64,
    pub sd_experimental: f64,
    pub sd_control: f64,
    /// Standardized mean difference (experimental − control over the pooled SD).
    pub smd: f64,
    /// Raw difference of means / proportions.
    pub difference: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceReport {
    pub n_experimental: usize,
    pub n_control: usize,
    pub rows: Vec<BalanceRow>,
}

impl BalanceReport {
    pub fn row(&self, covariate: &str) -> Option<&BalanceRow> {
        self.rows.iter().find(|r| r.covariate == covariate)
    }
}

fn mean_sd(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let m = values.clone().sum::<f64>() / n as f64;
    if n == 1 {
        return (m, 0.0);
    }
    let v = values.map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1) as f64;
    (m, v.sqrt())
}

fn smd(diff: f64, var_e: f64, var_c: f64) -> f64 {
    let pooled = ((var_e + var_c) / 2.0).sqrt();
    if pooled > 0.0 {
        diff / pooled
    } else if diff == 0.0 {
        0.0
    } else {
        diff.signum() * f64::INFINITY
    }
}

/// Age and biomarker balance between arms.
pub fn balance(ages: &[f64], biomarker: &[u8], arms: &[u8]) -> BalanceReport {
    let pick = |arm: u8| ages.iter().zip(arms).filter(move |(_, &a)| a == arm).map(|(&x, _)| x);
    let (me, se) = mean_sd(pick(1));
    let (mc, sc) = mean_sd(pick(0));
    let prop = |arm: u8| {
        let (n, pos) = biomarker
            .iter()
            .zip(arms)
            .filter(|(_, &a)| a == arm)
            .fold((0usize, 0usize), |(n, p), (&b, _)| (n + 1, p + usize::from(b)));
        pos as f64 / n as f64
    };
    let (pe, pc) = (prop(1), prop(0));
    let n_experimental = arms.iter().filter(|&&a| a == 1).count();
    BalanceReport {
        n_experimental,
        n_control: arms.len() - n_experimental,
        rows: vec![
            BalanceRow {
                covariate: "age".into(),
                mean_experimental: me,
                mean_control: mc,
                sd_experimental: se,
                sd_control: sc,
                smd: smd(me - mc, se * se, sc * sc),
                difference: me - mc,
            },
            BalanceRow {
                covariate: "biomarker".into(),
                mean_experimental: pe,
                mean_control: pc,
                sd_experimental: (pe * (1.0 - pe)).sqrt(),
                sd_control: (pc * (1.0 - pc)).sqrt(),
                smd: smd(pe - pc, pe * (1.0 - pe), pc * (1.0 - pc)),
                difference: pe - pc,
            },
        ],
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoxFit {
    pub log_hr: f64,
    pub se: f64,
    pub events: usize,
}

/// Cox proportional hazards log hazard ratio of arm 1 versus arm 0, Breslow
/// ties, by Newton-Raphson.
pub fn cox_log_hr(subjects: &[SubjectRecord]) -> Result<CoxFit> {
    let events = subjects.iter().filter(|s| s.event).count();
    if events == 0 {
        return Err(EmulationError::Degenerate("no events: hazard ratio undefined".into()));
    }
    for arm in [0u8, 1] {
        if !subjects.iter().any(|s| s.arm == arm && s.event) {
            return Err(EmulationError::Degenerate(format!("no events in arm {arm}: hazard ratio diverges")));
        }
    }
    let mut order: Vec<&SubjectRecord> = subjects.iter().collect();
    order.sort_by(|a, b| b.time.total_cmp(&a.time));
    // score and information at beta
    let derivatives = |beta: f64| {
        let (mut s0, mut s1) = (0.0, 0.0);
        let (mut score, mut info) = (0.0, 0.0);
        let mut i = 0;
        while i < order.len() {
            let t = order[i].time;
            let (mut d, mut dz) = (0.0, 0.0);
            while i < order.len() && order[i].time == t {
                let z = f64::from(order[i].arm);
                let w = (beta * z).exp();
                s0 += w;
                s1 += w * z;
                if order[i].event {
                    d += 1.0;
                    dz += z;
                }
                i += 1;
            }
            if d > 0.0 {
                let r = s1 / s0;
                score += dz - d * r;
                info += d * r * (1.0 - r);
            }
        }
        (score, info)
    };
    let mut beta = 0.0;
    for _ in 0..50 {
        let (score, info) = derivatives(beta);
        let step = score / info;
        beta += step;
        if step.abs() < 1e-12 {
            break;
        }
    }
    let (_, info) = derivatives(beta);
    Ok(CoxFit {
        log_hr: beta,
        se: info.sqrt().recip(),
        events,
    })
}
