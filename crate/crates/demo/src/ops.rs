use bnma::emulation::{emulate, generate_synthetic_ehr, EmulationProtocol, SyntheticEhrConfig};
use bnma::evidence::{build_network, ingest_ad, SubjectRecord, TreatmentMap};
use bnma::km::{km_estimate, number_at_risk, reconstruct, DigitizedCurve, RiskTable};
use bnma::pipelines::{fit_model1, Subgroup};
use bnma::simulate::weibull_time;
use bnma::{ModelKind, ModelSpec, SamplerConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

const TREATMENT_MAP: &str = include_str!("../../../data/breast/treatment_map.txt");
const AD_ROWS: &str = include_str!("../../../data/breast/ad.csv");
const AD_ALL: &str = include_str!("../../../data/breast/ad_all.csv");

fn parse<'a, T: Deserialize<'a>>(input: &'a str) -> Result<T, String> {
    serde_json::from_str(input).map_err(|e| format!("bad input: {e}"))
}

fn to_json<T: Serialize>(value: &T) -> Result<String, String> {
    serde_json::to_string(value).map_err(|e| e.to_string())
}

#[derive(Debug, Deserialize)]
#[serde(default)]
pub struct KmInput {
    pub n: usize,
    /// Monthly event hazard (exponential times).
    pub rate: f64,
    pub censor_share: f64,
    /// Number of risk-table times, evenly spaced from 0.
    pub risk_times: usize,
    /// Keep every k-th drop of the curve, mimicking coarse digitization.
    pub keep_every: usize,
    pub seed: u64,
}

impl Default for KmInput {
    fn default() -> Self {
        Self {
            n: 200,
            rate: 0.1,
            censor_share: 0.2,
            risk_times: 5,
            keep_every: 1,
            seed: 1,
        }
    }
}

#[derive(Debug, Serialize)]
pub struct KmOutput {
    pub curve: Vec<(f64, f64)>,
    pub reconstructed: Vec<(f64, f64)>,
    pub risk_table: Vec<(f64, u32)>,
    pub risk_reconstructed: Vec<u32>,
    pub max_deviation: f64,
    pub events_true: usize,
    pub events_reconstructed: usize,
}

pub fn km_roundtrip(input: &str) -> Result<String, String> {
    let p: KmInput = parse(input)?;
    if !(10..=5000).contains(&p.n) || !(p.rate > 0.0) || !(0.0..0.95).contains(&p.censor_share) || p.risk_times == 0 {
        return Err("need 10 <= n <= 5000, rate > 0, 0 <= censor_share < 0.95, risk_times >= 1".into());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let records: Vec<SubjectRecord> = (0..p.n)
        .map(|i| {
            let t = weibull_time(&mut rng, 1.0, p.rate.ln());
            let (time, event) = if rng.random::<f64>() < p.censor_share {
                (t * rng.random::<f64>(), false)
            } else {
                (t, true)
            };
            SubjectRecord::new(format!("s{i}"), time.max(1e-6), event, 0, 0).map_err(|e| e.to_string())
        })
        .collect::<Result<_, _>>()?;

    let mut points = vec![(0.0, 1.0)];
    let mut last = 1.0;
    let mut drops = 0;
    for (t, s) in km_estimate(&records) {
        if s < last {
            drops += 1;
            if drops % p.keep_every.max(1) == 0 || s == 0.0 {
                points.push((t, s));
                last = s;
            }
        }
    }
    let tmax = records.iter().map(|r| r.time).fold(0.0, f64::max);
    if points.last().is_none_or(|q| q.0 < tmax) {
        points.push((tmax, last));
    }
    let curve = DigitizedCurve::new(points, "arm").map_err(|e| e.to_string())?;
    let cuts: Vec<(f64, u32)> = (0..p.risk_times)
        .map(|k| {
            let t = tmax * 0.8 * k as f64 / p.risk_times as f64;
            (t, number_at_risk(&records, t))
        })
        .collect();
    let risk = RiskTable::new(cuts.clone()).map_err(|e| e.to_string())?;
    let rep = reconstruct(&curve, &risk, None).map_err(|e| e.to_string())?;
    let out = KmOutput {
        curve: curve.points().to_vec(),
        reconstructed: km_estimate(&rep.records),
        risk_reconstructed: cuts.iter().map(|&(t, _)| number_at_risk(&rep.records, t)).collect(),
        risk_table: cuts,
        max_deviation: rep.max_abs_survival_deviation,
        events_true: records.iter().filter(|r| r.event).count(),
        events_reconstructed: rep.records.iter().filter(|r| r.event).count(),
    };
    to_json(&out)
}

#[derive(Debug, Deserialize)]
#[serde(default)]
pub struct EmulationInput {
    pub n: usize,
    /// Log odds of experimental treatment per decade of age.
    pub assign_age: f64,
    pub assign_biomarker: f64,
    pub log_hr_treatment: f64,
    pub caliper: Option<f64>,
    pub seed: u64,
}

impl Default for EmulationInput {
    fn default() -> Self {
        let d = SyntheticEhrConfig::default();
        Self {
            n: d.n,
            assign_age: d.assign_age,
            assign_biomarker: d.assign_biomarker,
            log_hr_treatment: d.log_hr_treatment,
            caliper: None,
            seed: 1,
        }
    }
}

#[derive(Debug, Serialize)]
pub struct BalanceLine {
    pub covariate: String,
    pub before: (f64, f64),
    pub after: (f64, f64),
    pub smd_before: f64,
    pub smd_after: f64,
}

#[derive(Debug, Serialize)]
pub struct EmulationOutput {
    pub eligible: (usize, usize),
    pub pairs: usize,
    pub balance: Vec<BalanceLine>,
    pub propensity: Vec<(String, f64)>,
    pub log_hr: f64,
    pub se: f64,
}

pub fn emulation_balance(input: &str) -> Result<String, String> {
    let p: EmulationInput = parse(input)?;
    if !(20..=20000).contains(&p.n) {
        return Err("need 20 <= n <= 20000".into());
    }
    let config = SyntheticEhrConfig {
        n: p.n,
        assign_age: p.assign_age,
        assign_biomarker: p.assign_biomarker,
        log_hr_treatment: p.log_hr_treatment,
        ..Default::default()
    };
    let records = generate_synthetic_ehr(&config, p.seed).map_err(|e| e.to_string())?;
    let protocol = EmulationProtocol {
        caliper: p.caliper,
        seed: p.seed,
        ..Default::default()
    };
    let trials = emulate(&records, &protocol).map_err(|e| e.to_string())?;
    let trial = &trials[0];
    let cox = trial.log_hr().map_err(|e| e.to_string())?;
    let balance = trial
        .balance_before
        .rows
        .iter()
        .zip(&trial.balance_after.rows)
        .map(|(b, a)| BalanceLine {
            covariate: b.covariate.clone(),
            before: (b.mean_experimental, b.mean_control),
            after: (a.mean_experimental, a.mean_control),
            smd_before: b.smd,
            smd_after: a.smd,
        })
        .collect();
    let fit = &trial.propensity;
    to_json(&EmulationOutput {
        eligible: (trial.balance_before.n_experimental, trial.balance_before.n_control),
        pairs: trial.n_pairs(),
        balance,
        propensity: fit.terms.iter().cloned().zip(fit.coefficients.iter().copied()).collect(),
        log_hr: cox.log_hr,
        se: cox.se,
    })
}

#[derive(Debug, Deserialize)]
#[serde(default)]
pub struct FitInput {
    /// `"network"` (13 rows) or `"all"` (18 rows).
    pub rows: String,
    pub chains: usize,
    pub burn_in: usize,
    pub iterations: usize,
    pub seed: u64,
}

impl Default for FitInput {
    fn default() -> Self {
        Self {
            rows: "network".into(),
            chains: 4,
            burn_in: 2000,
            iterations: 5000,
            seed: 1,
        }
    }
}

#[derive(Debug, Serialize)]
pub struct ContrastLine {
    pub contrast: String,
    pub subgroup: String,
    pub hr: f64,
    pub lower: f64,
    pub upper: f64,
    pub converged: bool,
}

#[derive(Debug, Serialize)]
pub struct FitOutput {
    pub studies: usize,
    pub contrasts: Vec<ContrastLine>,
    pub tau: (f64, f64, f64),
    pub converged: bool,
}

pub fn fit_breast_model1(input: &str) -> Result<String, String> {
    let p: FitInput = parse(input)?;
    let table = match p.rows.as_str() {
        "network" => AD_ROWS,
        "all" => AD_ALL,
        other => return Err(format!("unknown row set `{other}`")),
    };
    if p.chains == 0 || p.chains > 8 || p.iterations == 0 || p.iterations > 50_000 || p.burn_in > 50_000 {
        return Err("need 1-8 chains and at most 50000 iterations".into());
    }
    let map = TreatmentMap::parse(TREATMENT_MAP).map_err(|e| e.to_string())?;
    let ad = ingest_ad(table.as_bytes(), &map).map_err(|e| e.to_string())?;
    let net = build_network(map.treatments(), ad, vec![]).map_err(|e| e.to_string())?;
    let config = SamplerConfig {
        chains: p.chains,
        burn_in: p.burn_in,
        iterations: p.iterations,
        seed: p.seed,
        ..Default::default()
    };
    let fit = fit_model1(&net, &ModelSpec::new(ModelKind::AdNmr), &config).map_err(|e| e.to_string())?;
    let s = &fit.summary;
    let mut contrasts: Vec<ContrastLine> = s
        .contrasts
        .iter()
        .map(|c| ContrastLine {
            contrast: c.contrast.clone(),
            subgroup: c.subgroup.as_str().into(),
            hr: c.hr_median,
            lower: c.lower,
            upper: c.upper,
            converged: c.converged(),
        })
        .collect();
    contrasts.sort_by_key(|c| (c.contrast.clone(), c.subgroup != Subgroup::Pos.as_str()));
    to_json(&FitOutput {
        studies: net.n_studies(),
        contrasts,
        tau: (s.tau.median, s.tau.lower, s.tau.upper),
        converged: s.diagnostics.converged,
    })
}
