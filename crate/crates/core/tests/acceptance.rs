//! Acceptance suite: one PASS/FAIL line per criterion. Criteria 1-8 gate the
//! exit status; criterion 9 is a soft comparison with reference estimates.

use std::path::PathBuf;
use std::time::Instant;

use bnma::emulation::{emulate, generate_synthetic_ehr, EmulationProtocol, SyntheticEhrConfig};
use bnma::evidence::{build_network, impute_missing_status, ingest_ad, AdStudy, IpdStudy, Network, SubjectRecord, TreatmentId, TreatmentMap};
use bnma::km::{km_estimate, number_at_risk, reconstruct, DigitizedCurve, RiskTable};
use bnma::mcmc::{effective_sample_size, mcse_mean, run_chains, InitStrategy, Target};
use bnma::model::{log_posterior, weibull_loglik, ModelParameters, NmaTarget, StageOneMode};
use bnma::pipelines::{fit_model1, fit_model2, fit_model3, log_hr_draws, width_reduction, Fit, Subgroup};
use bnma::simulate::{simulate_network, NetworkDesign, NetworkTruth};
use bnma::{ModelKind, ModelSpec, SamplerConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn data_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/breast")
}

fn breast_map() -> TreatmentMap {
    TreatmentMap::parse(&std::fs::read_to_string(data_dir().join("treatment_map.txt")).unwrap()).unwrap()
}

fn breast_network(file: &str) -> Network {
    let map = breast_map();
    let ad = ingest_ad(std::fs::File::open(data_dir().join(file)).unwrap(), &map).unwrap();
    build_network(map.treatments(), ad, vec![]).unwrap()
}

fn round1(x: f64) -> f64 {
    (x * 10.0 + 0.5).floor() / 10.0
}

fn quantile(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

fn sorted(mut v: Vec<f64>) -> Vec<f64> {
    v.sort_by(f64::total_cmp);
    v
}

fn criterion_1() -> Outcome {
    // (baseline interval, comparison interval, quoted percentage)
    let cases = [
        ("row 1", (0.62, 1.84), (0.69, 1.56), 28.7),
        ("row 2", (0.62, 1.84), (0.67, 1.29), 49.2),
        ("row 3", (0.35, 2.01), (0.41, 1.85), 13.3),
        ("row 4", (0.35, 2.01), (0.65, 1.76), 33.1),
        ("row 5", (0.74, 0.98), (0.74, 0.96), 8.3),
        ("row 6", (0.82, 1.42), (0.87, 1.25), 36.7),
    ];
    let mut pass = true;
    let mut parts = Vec::new();
    for (name, a, b, quoted) in cases {
        let r = round1(width_reduction(a, b).unwrap());
        pass &= (r - quoted).abs() <= 0.5;
        parts.push(format!("{name} {r:.1}% (quoted {quoted})"));
    }
    outcome(pass, parts.join("; "))
}

fn criterion_2() -> Outcome {
    // reference final n_pos and prop_pos, in file order
    let expected: [(u32, f64); 18] = [
        (153, 0.732),
        (116, 0.491),
        (96, 0.676),
        (153, 0.708),
        (107, 0.786),
        (289, 0.636),
        (289, 0.637),
        (133, 0.401),
        (187, 0.68),
        (55, 0.604),
        (290, 0.567),
        (125, 0.443),
        (477, 0.635),
        (120, 0.622),
        (125, 0.607),
        (70, 0.707),
        (68, 0.708),
        (72, 0.706),
    ];
    let rows = ingest_ad(std::fs::File::open(data_dir().join("ad_all.csv")).unwrap(), &breast_map()).unwrap();
    if rows.len() != expected.len() {
        return outcome(false, format!("{} rows ingested, expected 18", rows.len()));
    }
    let mut bad = Vec::new();
    for (row, (n_pos, prop)) in rows.iter().zip(expected) {
        let c = row.counts.as_ref().unwrap();
        let imp = impute_missing_status(c.n_pos, c.n_neg, c.n_unknown, c.n_total).unwrap();
        if imp.final_n_pos != n_pos || (imp.prop_pos - prop).abs() > 0.001 || (row.ppos - imp.prop_pos).abs() > 1e-15 {
            bad.push(format!("{}: {} / {:.4}", row.study_id, imp.final_n_pos, imp.prop_pos));
        }
    }
    if bad.is_empty() {
        outcome(true, "18/18 rows reproduce final n_pos exactly and prop_pos within 0.001")
    } else {
        outcome(false, format!("mismatches: {}", bad.join(", ")))
    }
}

fn criterion_3() -> Outcome {
    let start = Instant::now();
    let truth = NetworkTruth {
        d_neg: vec![0.0, -0.3, -0.5],
        beta_bar: vec![0.0, 0.2, 0.4],
        tau: 0.2,
    };
    let names = ["d_neg[2]", "d_neg[3]", "beta_bar[2]", "beta_bar[3]"];
    let values = [truth.d_neg[1], truth.d_neg[2], truth.beta_bar[1], truth.beta_bar[2]];
    let mut covered = [0usize; 4];
    let mut bias = 0.0;
    let reps = 20;
    for rep in 0..reps {
        let net = simulate_network(&truth, &NetworkDesign::default(), 1000 + rep).unwrap();
        let config = SamplerConfig {
            seed: 77 + rep,
            ..Default::default()
        };
        let fit = fit_model3(&net, &ModelSpec::new(ModelKind::OneStage), &config).unwrap();
        for (i, name) in names.iter().enumerate() {
            let s = sorted(fit.draws.pooled(name).unwrap());
            let (lo, hi) = (quantile(&s, 0.025), quantile(&s, 0.975));
            covered[i] += usize::from(lo <= values[i] && values[i] <= hi);
            if i == 0 {
                bias += (quantile(&s, 0.5) - values[0]) / reps as f64;
            }
        }
    }
    let minutes = start.elapsed().as_secs_f64() / 60.0;
    let coverage: Vec<f64> = covered.iter().map(|&c| c as f64 / reps as f64).collect();
    let pass = coverage.iter().all(|&c| c >= 0.85) && bias.abs() <= 0.05 && minutes < 30.0;
    let detail = names
        .iter()
        .zip(&coverage)
        .map(|(n, c)| format!("{n} {:.0}%", 100.0 * c))
        .collect::<Vec<_>>()
        .join(", ");
    outcome(pass, format!("coverage {detail}; d_neg[2] median bias {bias:+.4}; {minutes:.1} min"))
}

/// Posterior of (d, b) for y_j ~ N(d + b p_j, v_j) with independent N(0, s²)
/// priors; returns the mean and SD of d.
fn conjugate_d(rows: &[(f64, f64, f64)], prior_var: f64) -> (f64, f64) {
    let (mut a11, mut a12, mut a22, mut r1, mut r2) = (1.0 / prior_var, 0.0, 1.0 / prior_var, 0.0, 0.0);
    for &(y, v, p) in rows {
        a11 += 1.0 / v;
        a12 += p / v;
        a22 += p * p / v;
        r1 += y / v;
        r2 += p * y / v;
    }
    let det = a11 * a22 - a12 * a12;
    let (c11, c12) = (a22 / det, -a12 / det);
    (c11 * r1 + c12 * r2, c11.sqrt())
}

fn criterion_4() -> Outcome {
    let tau: f64 = 1e-6;
    let studies = [(-0.3, 0.15, 0.3), (-0.1, 0.2, 0.8)];
    let ad: Vec<AdStudy> = studies
        .iter()
        .enumerate()
        .map(|(j, &(y, s, p))| AdStudy::new(format!("s{j}"), TreatmentId(1), TreatmentId(2), y, s, p).unwrap())
        .collect();
    let net = build_network(TreatmentMap::from_classes(&["A", "B"]).treatments(), ad, vec![]).unwrap();
    let spec = ModelSpec::new(ModelKind::AdNmr).with_fixed_tau(tau);
    let fit = fit_model1(&net, &spec, &SamplerConfig::default()).unwrap();
    let rows: Vec<(f64, f64, f64)> = studies.iter().map(|&(y, s, p)| (y, s * s + tau * tau, p)).collect();
    let (mean, sd) = conjugate_d(&rows, spec.priors.normal_variance);

    let chains = fit.draws.per_chain("d_neg[2]").unwrap();
    let pooled = chains.concat();
    let m = pooled.iter().sum::<f64>() / pooled.len() as f64;
    let sq: Vec<Vec<f64>> = chains.iter().map(|c| c.iter().map(|x| (x - m).powi(2)).collect()).collect();
    let var = sq.concat().iter().sum::<f64>() / pooled.len() as f64;
    let s = var.sqrt();
    let mcse_m = mcse_mean(&chains);
    // delta method: se(sd) = se(var) / (2 sd)
    let mcse_s = mcse_mean(&sq) / (2.0 * s);
    let pass = (m - mean).abs() <= 3.0 * mcse_m && (s - sd).abs() <= 3.0 * mcse_s;
    outcome(
        pass,
        format!(
            "mean {m:.4} vs {mean:.4} (MCSE {mcse_m:.4}); sd {s:.4} vs {sd:.4} (MCSE {mcse_s:.4})"
        ),
    )
}

fn draws_csv(fit: &Fit) -> Vec<u8> {
    let mut v = Vec::new();
    fit.draws.write_csv(&mut v).unwrap();
    v
}

fn criterion_5() -> Outcome {
    let net = breast_network("ad.csv");
    let config = SamplerConfig::default();
    let m1 = fit_model1(&net, &ModelSpec::new(ModelKind::AdNmr), &config).unwrap();
    let m2 = fit_model2(&net, StageOneMode::Pooled, &ModelSpec::new(ModelKind::TwoStage), &config).unwrap();
    let identical = draws_csv(&m1) == draws_csv(&m2) && m1.summary.contrasts == m2.summary.contrasts;

    // independent seed so the comparison is not trivially exact
    let other = SamplerConfig { seed: config.seed + 1, ..config };
    let m3 = fit_model3(&net, &ModelSpec::new(ModelKind::OneStage), &other).unwrap();
    let mut worst: f64 = 0.0;
    for (k, l) in net.all_pairs() {
        for sub in Subgroup::BOTH {
            let a = log_hr_draws(&m1.draws, k, l, sub).unwrap();
            let b = log_hr_draws(&m3.draws, k, l, sub).unwrap();
            let z = (median(&a) - median(&b)).abs() / (mcse_median(&a).powi(2) + mcse_median(&b).powi(2)).sqrt();
            worst = worst.max(z);
        }
    }
    outcome(
        identical && worst <= 3.0,
        format!(
            "Model 2 (no IPD) draws {} Model 1; Model 3 vs Model 1 largest median gap {worst:.2} MCSE",
            if identical { "byte-identical to" } else { "DIFFER from" }
        ),
    )
}

fn median(chains: &[Vec<f64>]) -> f64 {
    quantile(&sorted(chains.concat()), 0.5)
}

/// Monte Carlo SE of a median: the MCSE of the indicator 1{x ≤ median}
/// divided by a density estimate at the median.
fn mcse_median(chains: &[Vec<f64>]) -> f64 {
    let s = sorted(chains.concat());
    let med = quantile(&s, 0.5);
    let indicators: Vec<Vec<f64>> = chains
        .iter()
        .map(|c| c.iter().map(|&x| f64::from(u8::from(x <= med))).collect())
        .collect();
    // density from the central 10% of draws
    let width = quantile(&s, 0.55) - quantile(&s, 0.45);
    let density = 0.1 / width;
    (0.25 / effective_sample_size(&indicators)).sqrt() / density
}

fn km_cohort(n: usize, rate: f64, share: f64, rng: &mut ChaCha8Rng) -> Vec<SubjectRecord> {
    let exp = Exp::new(rate).unwrap();
    (0..n)
        .map(|i| {
            let t: f64 = exp.sample(rng);
            let (time, event) = if rng.random::<f64>() < share {
                (t * rng.random::<f64>(), false)
            } else {
                (t, true)
            };
            SubjectRecord::new(format!("s{i}"), time.max(1e-6), event, 0, 0).unwrap()
        })
        .collect()
}

fn criterion_6() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let mut worst: f64 = 0.0;
    let mut table_ok = true;
    for _ in 0..20 {
        let n = rng.random_range(50..=500);
        let records = km_cohort(n, rng.random_range(0.03..0.3), rng.random_range(0.05..0.4), &mut rng);
        let tmax = records.iter().map(|r| r.time).fold(0.0, f64::max);
        let mut pts = vec![(0.0, 1.0)];
        let mut last = 1.0;
        for (t, s) in km_estimate(&records) {
            if s < last {
                pts.push((t, s));
                last = s;
            }
        }
        if pts.last().unwrap().0 < tmax {
            pts.push((tmax, last));
        }
        let curve = DigitizedCurve::new(pts, "arm").unwrap();
        let cuts: Vec<f64> = (0..5).map(|k| tmax * 0.8 * k as f64 / 5.0).collect();
        let risk = RiskTable::new(cuts.iter().map(|&t| (t, number_at_risk(&records, t))).collect()).unwrap();
        let rep = reconstruct(&curve, &risk, None).unwrap();
        worst = worst.max(rep.max_abs_survival_deviation);
        table_ok &= rep.records.len() == n
            && risk.entries().iter().all(|&(t, at_risk)| number_at_risk(&rep.records, t) == at_risk);
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst <= 0.02 && table_ok && secs < 60.0,
        format!(
            "20 curves: max sup deviation {worst:.4}, risk tables {}; {secs:.1} s",
            if table_ok { "exact" } else { "MISMATCH" }
        ),
    )
}

fn criterion_7() -> Outcome {
    let start = Instant::now();
    let config = SyntheticEhrConfig::default();
    let records = generate_synthetic_ehr(&config, 2024).unwrap();
    let trial = &emulate(&records, &EmulationProtocol::default()).unwrap()[0];
    let row = |r: &bnma::emulation::BalanceReport, c: &str| r.row(c).unwrap().clone();
    let (age0, bio0) = (row(&trial.balance_before, "age"), row(&trial.balance_before, "biomarker"));
    let (age1, bio1) = (row(&trial.balance_after, "age"), row(&trial.balance_after, "biomarker"));
    let cox = trial.log_hr().unwrap();
    let secs = start.elapsed().as_secs_f64();
    let pass = config.n == 5000
        && config.log_hr_treatment == 0.0
        && age0.smd.abs() > 0.25
        && bio0.smd.abs() > 0.25
        && age1.smd.abs() < 0.1
        && bio1.difference.abs() < 0.05
        && cox.log_hr.abs() < 0.1
        && secs < 120.0;
    outcome(
        pass,
        format!(
            "pre SMD age {:.3} biomarker {:.3}; post SMD age {:.3}, biomarker difference {:.3}; {} pairs; null log HR {:+.3}; {secs:.1} s",
            age0.smd, bio0.smd, age1.smd, bio1.difference, trial.n_pairs(), cox.log_hr
        ),
    )
}

fn simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64, depth: u32) -> f64 {
    let m = 0.5 * (a + b);
    let whole = (b - a) / 6.0 * (f(a) + 4.0 * f(m) + f(b));
    let left = (m - a) / 6.0 * (f(a) + 4.0 * f(0.5 * (a + m)) + f(m));
    let right = (b - m) / 6.0 * (f(m) + 4.0 * f(0.5 * (m + b)) + f(b));
    if depth == 0 || (left + right - whole).abs() <= 15.0 * tol {
        return left + right + (left + right - whole) / 15.0;
    }
    simpson(f, a, m, tol / 2.0, depth - 1) + simpson(f, m, b, tol / 2.0, depth - 1)
}

fn relabel_gap() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(88);
    let n_t = 4;
    let ipd: Vec<IpdStudy> = (0..3)
        .map(|j| {
            let subjects = (0..60)
                .map(|i| {
                    let t = rng.random_range(0.05..12.0);
                    SubjectRecord::new(format!("p{i}"), t, rng.random::<f64>() < 0.7, u8::from(i % 3 != 0), (i % 2) as u8).unwrap()
                })
                .collect();
            IpdStudy::new(format!("ipd{j}"), TreatmentId(1), TreatmentId(2 + j), subjects).unwrap()
        })
        .collect();
    let mut ad = Vec::new();
    for k in 1..=n_t {
        for l in (k + 1)..=n_t {
            let (y, ppos) = (rng.random_range(-0.5..0.5), rng.random_range(0.0..1.0));
            ad.push(AdStudy::new(format!("ad{k}{l}"), TreatmentId(k), TreatmentId(l), y, 0.2, ppos).unwrap());
        }
    }
    let tags: Vec<String> = (1..=n_t).map(|k| format!("T{k}")).collect();
    let treatments = TreatmentMap::from_classes(&tags).treatments();
    let net = build_network(treatments.clone(), ad, ipd).unwrap();
    let perm = |k: TreatmentId| match k.0 {
        2 => TreatmentId(4),
        4 => TreatmentId(2),
        x => TreatmentId(x),
    };
    let relabel_ad = net.ad_studies.iter().map(|s| {
        let mut s = s.clone();
        s.treatment_k = perm(s.treatment_k);
        s.treatment_l = perm(s.treatment_l);
        s
    });
    let relabel_ipd = net.ipd_studies.iter().map(|s| {
        let mut s = s.clone();
        s.treatment_k = perm(s.treatment_k);
        s.treatment_l = perm(s.treatment_l);
        s
    });
    let relabeled = build_network(treatments, relabel_ad.collect(), relabel_ipd.collect()).unwrap();
    let spec = ModelSpec::new(ModelKind::OneStage);
    let mut worst: f64 = 0.0;
    for _ in 0..10 {
        let mut p = ModelParameters::zeros(n_t, net.ipd_studies.len(), net.ad_studies.len());
        for b in &mut p.ipd {
            b.gamma = rng.random_range(0.6..1.8);
            b.mu_neg = rng.random_range(-3.0..-1.0);
            b.beta = rng.random_range(-0.5..0.5);
            b.delta_neg = rng.random_range(-0.5..0.5);
            b.delta_diff = rng.random_range(-0.5..0.5);
        }
        for d in &mut p.ad_delta {
            *d = rng.random_range(-0.5..0.5);
        }
        for k in 1..n_t {
            p.d_neg[k] = rng.random_range(-0.5..0.5);
            p.beta_bar[k] = rng.random_range(-0.5..0.5);
        }
        p.tau = rng.random_range(0.1..1.5);

        let mut q = p.clone();
        q.d_neg.swap(1, 3);
        q.beta_bar.swap(1, 3);
        // aggregate effects follow their study, changing sign if its direction flipped
        q.ad_delta = relabeled
            .ad_studies
            .iter()
            .map(|s| {
                let j = net.ad_studies.iter().position(|o| o.study_id == s.study_id).unwrap();
                if perm(net.ad_studies[j].treatment_k) == s.treatment_k { p.ad_delta[j] } else { -p.ad_delta[j] }
            })
            .collect();
        q.ipd = relabeled
            .ipd_studies
            .iter()
            .map(|s| p.ipd[net.ipd_studies.iter().position(|o| o.study_id == s.study_id).unwrap()])
            .collect();
        let a = log_posterior(&spec, &net, &p).unwrap();
        let b = log_posterior(&spec, &relabeled, &q).unwrap();
        worst = worst.max((a - b).abs());
    }
    worst
}

fn criterion_8() -> Outcome {
    let mut norm_err: f64 = 0.0;
    for gamma in [0.5, 1.0, 2.0] {
        for lambda in [0.1f64, 1.0, 5.0] {
            let f = |v: f64| {
                let t = v.exp();
                weibull_loglik(t, true, gamma, lambda.ln()).unwrap().exp() * t
            };
            norm_err = norm_err.max((simpson(&f, -80.0, 12.0, 1e-10, 50) - 1.0).abs());
        }
    }
    let relabel = relabel_gap();

    // prior-only sampling on a network with four participant-level studies
    let truth = NetworkTruth {
        d_neg: vec![0.0, -0.3, -0.5],
        beta_bar: vec![0.0, 0.2, 0.4],
        tau: 0.2,
    };
    let net = simulate_network(&truth, &NetworkDesign::default(), 5).unwrap();
    let target = NmaTarget::new(&net, &ModelSpec::new(ModelKind::OneStage)).unwrap().prior_only();
    let init = InitStrategy::Jittered {
        center: target.initial_point(),
        scale: 0.3,
    };
    let draws = run_chains(&target, &init, &SamplerConfig { seed: 8, ..Default::default() }).unwrap();
    let gammas: Vec<f64> = target
        .parameter_names()
        .iter()
        .filter(|n| n.ends_with(":gamma"))
        .flat_map(|n| draws.pooled(n).unwrap())
        .collect();
    let (gammas, taus) = (sorted(gammas), sorted(draws.pooled("tau").unwrap()));
    let mut gamma_rel: f64 = 0.0;
    let mut tau_abs: f64 = 0.0;
    for i in 1..10 {
        let p = i as f64 / 10.0;
        let exact = -(1.0 - p).ln() / 0.01;
        gamma_rel = gamma_rel.max((quantile(&gammas, p) - exact).abs() / exact);
        tau_abs = tau_abs.max((quantile(&taus, p) - 2.0 * p).abs());
    }
    outcome(
        norm_err <= 1e-6 && relabel <= 1e-10 && gamma_rel <= 0.05 && tau_abs <= 0.05,
        format!(
            "normalization error {norm_err:.1e}; relabeling gap {relabel:.1e}; Gamma(1, 0.01) deciles max rel. error {:.2}%; U(0, 2) deciles max abs. error {tau_abs:.4}",
            100.0 * gamma_rel
        ),
    )
}

fn criterion_9() -> Outcome {
    let net = breast_network("ad.csv");
    let fit = fit_model1(&net, &ModelSpec::new(ModelKind::AdNmr), &SamplerConfig::default()).unwrap();
    let c = fit.summary.contrast_named("CX vs X", Subgroup::Pos).unwrap();
    let pass = (c.hr_median - 1.10).abs() <= 0.15 && (c.lower - 0.62).abs() <= 0.25 && (c.upper - 1.84).abs() <= 0.25;
    outcome(
        pass,
        format!(
            "CX vs X, HR+ve: {:.2} ({:.2}, {:.2}) vs reference 1.10 (0.62, 1.84); {} AD rows, tau median {:.2}, converged {}",
            c.hr_median,
            c.lower,
            c.upper,
            net.ad_studies.len(),
            fit.summary.tau.median,
            fit.summary.diagnostics.converged
        ),
    )
}

fn main() {
    let criteria: [(u8, &str, fn() -> Outcome); 9] = [
        (1, "width reductions", criterion_1),
        (2, "status imputation", criterion_2),
        (3, "parameter recovery", criterion_3),
        (4, "conjugate oracle", criterion_4),
        (5, "reduction identities", criterion_5),
        (6, "KM round trip", criterion_6),
        (7, "emulation balance", criterion_7),
        (8, "likelihood numerics", criterion_8),
        (9, "reference Model 1 estimate (soft)", criterion_9),
    ];
    let mut hard_failures = 0;
    for (n, name, run) in criteria {
        let start = Instant::now();
        let o = run();
        let tag = match (o.pass, n) {
            (true, _) => "PASS",
            (false, 9) => "SOFT-FAIL",
            (false, _) => {
                hard_failures += 1;
                "FAIL"
            }
        };
        println!("criterion {n} [{tag}] {name}: {} ({:.1} s)", o.detail, start.elapsed().as_secs_f64());
    }
    if hard_failures > 0 {
        println!("{hard_failures} hard criteria failed");
        std::process::exit(1);
    }
}
