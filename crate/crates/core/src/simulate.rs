//! Synthetic evidence networks drawn from known parameters, for calibration
//! checks and demonstrations.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::evidence::{build_network, AdStudy, EvidenceError, IpdStudy, Network, SubjectRecord, TreatmentId, TreatmentMap};
use crate::model::{consistency_mean, linear_predictor, IpdParameters};

/// Draws a Weibull time with hazard `exp(log_lambda) γ t^(γ-1)`.
pub fn weibull_time<R: Rng>(rng: &mut R, gamma: f64, log_lambda: f64) -> f64 {
    let e = -(1.0 - rng.random::<f64>()).ln();
    (e * (-log_lambda).exp()).powf(1.0 / gamma)
}

/// One two-arm participant-level study with 1:1 allocation, biomarker
/// positive with probability `ppos` and uniform censoring on `(0, censor_max)`.
pub fn simulate_ipd_study<R: Rng>(
    rng: &mut R,
    study_id: &str,
    k: TreatmentId,
    l: TreatmentId,
    n: usize,
    ppos: f64,
    params: &IpdParameters,
    censor_max: f64,
) -> Result<IpdStudy, EvidenceError> {
    let subjects = (0..n)
        .map(|i| {
            let x = u8::from(rng.random::<f64>() < ppos);
            let t = (i % 2) as u8;
            let eta = linear_predictor(params.mu_neg, params.beta, params.delta_neg, params.delta_diff, x, t);
            let event_time = weibull_time(rng, params.gamma, eta);
            let censor = censor_max * rng.random::<f64>();
            let (time, event) = if event_time <= censor {
                (event_time, true)
            } else {
                (censor, false)
            };
            SubjectRecord::new(format!("{study_id}_{i}"), time.max(1e-9), event, x, t)
        })
        .collect::<Result<Vec<_>, _>>()?;
    IpdStudy::new(study_id, k, l, subjects)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkTruth {
    /// Indexed by treatment id − 1; reference entries zero.
    pub d_neg: Vec<f64>,
    pub beta_bar: Vec<f64>,
    pub tau: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkDesign {
    pub n_ad: usize,
    pub n_ipd: usize,
    pub ipd_size: usize,
    pub ad_sigma: (f64, f64),
    pub ad_ppos: (f64, f64),
    pub ipd_ppos: (f64, f64),
    pub censor_max: f64,
}

impl Default for NetworkDesign {
    fn default() -> Self {
        Self {
            n_ad: 8,
            n_ipd: 4,
            ipd_size: 300,
            ad_sigma: (0.1, 0.25),
            ad_ppos: (0.2, 0.9),
            ipd_ppos: (0.3, 0.8),
            censor_max: 60.0,
        }
    }
}

/// Simulates a network: aggregate rows cycle through every treatment pair,
/// participant-level studies through the pairs with the reference.
pub fn simulate_network(truth: &NetworkTruth, design: &NetworkDesign, seed: u64) -> Result<Network, EvidenceError> {
    let n_t = truth.d_neg.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let heterogeneity = Normal::new(0.0, truth.tau).map_err(|e| EvidenceError::Domain(e.to_string()))?;
    let pairs: Vec<(TreatmentId, TreatmentId)> = (1..=n_t)
        .flat_map(|k| ((k + 1)..=n_t).map(move |l| (TreatmentId(k), TreatmentId(l))))
        .collect();
    let uniform = |rng: &mut ChaCha8Rng, (a, b): (f64, f64)| a + (b - a) * rng.random::<f64>();

    let mut ad = Vec::with_capacity(design.n_ad);
    for j in 0..design.n_ad {
        let (k, l) = pairs[j % pairs.len()];
        let ppos = uniform(&mut rng, design.ad_ppos);
        let sigma = uniform(&mut rng, design.ad_sigma);
        let md = consistency_mean(&truth.d_neg, &truth.beta_bar, k, l, ppos);
        let delta = md + heterogeneity.sample(&mut rng);
        let y = delta + sigma * rng.sample::<f64, _>(rand_distr::StandardNormal);
        ad.push(AdStudy::new(format!("ad{}", j + 1), k, l, y, sigma, ppos)?);
    }

    let mut ipd = Vec::with_capacity(design.n_ipd);
    for j in 0..design.n_ipd {
        let l = TreatmentId(2 + j % (n_t - 1));
        let k = TreatmentId::REFERENCE;
        let md_neg = consistency_mean(&truth.d_neg, &truth.beta_bar, k, l, 0.0);
        let md_pos = consistency_mean(&truth.d_neg, &truth.beta_bar, k, l, 1.0);
        let delta_neg = md_neg + heterogeneity.sample(&mut rng);
        let delta_pos = md_pos + heterogeneity.sample(&mut rng);
        let params = IpdParameters {
            gamma: uniform(&mut rng, (0.8, 1.5)),
            mu_neg: uniform(&mut rng, (-3.5, -2.5)),
            beta: uniform(&mut rng, (-0.5, 0.0)),
            delta_neg,
            delta_diff: delta_pos - delta_neg,
        };
        let ppos = uniform(&mut rng, design.ipd_ppos);
        let id = format!("ipd{}", j + 1);
        ipd.push(simulate_ipd_study(&mut rng, &id, k, l, design.ipd_size, ppos, &params, design.censor_max)?);
    }
    let tags: Vec<String> = (1..=n_t).map(|k| format!("T{k}")).collect();
    build_network(TreatmentMap::from_classes(&tags).treatments(), ad, ipd)
}
