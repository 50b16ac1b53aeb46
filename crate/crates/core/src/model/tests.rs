use std::collections::BTreeSet;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::evidence::{build_network, AdStudy, IpdStudy, SubjectRecord, TreatmentMap};
use crate::mcmc::Target;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

#[test]
fn weibull_examples() {
    assert!(close(weibull_loglik(1.0, true, 1.0, 0.0).unwrap(), -1.0, 1e-12));
    assert!(close(weibull_loglik(2.0, false, 1.0, 0.5f64.ln()).unwrap(), -1.0, 1e-12));
    let v = weibull_loglik(3.0, true, 2.0, 0.1f64.ln()).unwrap();
    assert!(close(v, 0.6f64.ln() - 0.9, 1e-12));
    assert!(close(v, -1.41083, 1e-5));
    assert!(weibull_loglik(0.0, true, 1.0, 0.0).is_err());
    assert!(weibull_loglik(1.0, true, 0.0, 0.0).is_err());
}

#[test]
fn linear_predictor_examples() {
    assert_eq!(linear_predictor(-2.0, 0.5, -0.3, 0.1, 0, 0), -2.0);
    assert!(close(linear_predictor(-2.0, 0.5, -0.3, 0.1, 1, 1), -1.7, 1e-12));
    assert_eq!(linear_predictor(-2.0, 0.5, -0.3, 0.1, 1, 0), -1.5);
}

#[test]
fn ad_examples() {
    assert!(close(ad_loglik(0.3, 1.0, 0.3).unwrap(), -HALF_LN_2PI, 1e-12));
    // z = 1: -½ln 2π - ln 0.5 - ½
    assert!(close(ad_loglik(0.5, 0.5, 0.0).unwrap(), -0.72579, 1e-5));
    assert!(ad_loglik(0.5, 0.0, 0.0).is_err());
}

#[test]
fn consistency_examples() {
    let d = [0.0, -0.2, -0.1];
    let b = [0.0, 0.1, 0.3];
    let (t1, t2, t3) = (TreatmentId(1), TreatmentId(2), TreatmentId(3));
    assert!(close(consistency_mean(&d, &b, t1, t3, 0.5), 0.05, 1e-12));
    assert_eq!(consistency_mean(&d, &b, t2, t3, 0.0), d[2] - d[1]);
    let d_pos = |i: usize| d[i] + b[i];
    assert!(close(consistency_mean(&d, &b, t2, t3, 1.0), d_pos(2) - d_pos(1), 1e-12));
}

proptest! {
    #[test]
    fn ppos_zero_ignores_regression(d in prop::collection::vec(-2.0..2.0f64, 3), b1 in prop::collection::vec(-2.0..2.0f64, 3), b2 in prop::collection::vec(-2.0..2.0f64, 3)) {
        let (k, l) = (TreatmentId(2), TreatmentId(3));
        prop_assert_eq!(consistency_mean(&d, &b1, k, l, 0.0), consistency_mean(&d, &b2, k, l, 0.0));
    }
}

fn treatments(n: usize) -> Vec<crate::evidence::Treatment> {
    let tags: Vec<String> = (0..n).map(|i| format!("T{}", i + 1)).collect();
    TreatmentMap::from_classes(&tags).treatments()
}

fn empty_network(n: usize) -> Network {
    Network {
        treatments: treatments(n),
        ad_studies: vec![],
        ipd_studies: vec![],
        contrasts: BTreeSet::new(),
    }
}

fn one_ad_network() -> Network {
    let s = AdStudy::new("a", TreatmentId(1), TreatmentId(2), -0.2, 0.15, 0.6).unwrap();
    build_network(treatments(2), vec![s], vec![]).unwrap()
}

#[test]
fn random_effects_examples() {
    let net = one_ad_network();
    let spec = ModelSpec::new(ModelKind::AdNmr);
    let mut p = ModelParameters::zeros(2, 0, 1);
    p.d_neg[1] = -0.3;
    p.beta_bar[1] = 0.2;
    let md = -0.3 + 0.2 * 0.6;
    p.ad_delta[0] = md;
    assert!(close(random_effects_loglik(&p, &net, &spec), -HALF_LN_2PI, 1e-12));
    p.tau = 0.4;
    p.ad_delta[0] = md + 0.4;
    let expected = -HALF_LN_2PI - 0.4f64.ln() - 0.5;
    assert!(close(random_effects_loglik(&p, &net, &spec), expected, 1e-12));
    p.tau = 2.5;
    assert_eq!(random_effects_loglik(&p, &net, &spec), f64::NEG_INFINITY);
}

#[test]
fn prior_examples() {
    let spec = ModelSpec::new(ModelKind::OneStage);
    assert!(close(spec.priors.gamma_lnpdf(100.0), 0.01f64.ln() - 1.0, 1e-12));
    assert!(close(spec.priors.gamma_lnpdf(100.0), -5.60517, 1e-5));
    assert_eq!(spec.priors.gamma_lnpdf(0.0), f64::NEG_INFINITY);

    // two treatments, no studies: d_neg[2] = beta_bar[2] = 0, tau uniform
    let p = ModelParameters::zeros(2, 0, 0);
    let normal0 = -0.5 * (2.0 * std::f64::consts::PI * 100.0).ln();
    assert!(close(log_prior(&p, &spec), 2.0 * normal0 - 2f64.ln(), 1e-12));
    let mut q = p.clone();
    q.tau = 2.5;
    assert_eq!(log_prior(&q, &spec), f64::NEG_INFINITY);
}

#[test]
fn empty_network_is_prior_only() {
    let spec = ModelSpec::new(ModelKind::AdNmr);
    let net = empty_network(3);
    let mut p = ModelParameters::zeros(3, 0, 0);
    p.d_neg[1] = 0.4;
    p.beta_bar[2] = -1.1;
    p.tau = 0.7;
    assert_eq!(log_posterior(&spec, &net, &p).unwrap(), log_prior(&p, &spec));
}

#[test]
fn single_ad_study_term_by_term() {
    let net = one_ad_network();
    let spec = ModelSpec::new(ModelKind::AdNmr);
    let mut p = ModelParameters::zeros(2, 0, 1);
    p.d_neg[1] = -0.25;
    p.beta_bar[1] = 0.1;
    p.tau = 0.3;
    p.ad_delta[0] = -0.1;
    let s = &net.ad_studies[0];
    let expected = ad_loglik(s.y, s.sigma, -0.1).unwrap()
        + normal_lnpdf(-0.1, -0.25 + 0.1 * 0.6, 0.3)
        + normal_lnpdf(-0.25, 0.0, 10.0)
        + normal_lnpdf(0.1, 0.0, 10.0)
        - 2f64.ln();
    assert!(close(log_posterior(&spec, &net, &p).unwrap(), expected, 1e-12));
}

#[test]
fn structural_errors() {
    let net = one_ad_network();
    let spec = ModelSpec::new(ModelKind::AdNmr);
    let p = ModelParameters::zeros(2, 0, 0);
    assert!(matches!(log_posterior(&spec, &net, &p), Err(ModelError::Structure(_))));
    let mut p = ModelParameters::zeros(2, 0, 1);
    p.d_neg[0] = 0.1;
    assert!(log_posterior(&spec, &net, &p).is_err());

    // a one-stage network whose study has no subjects
    let mut net = ipd_network(1, 3);
    net.ipd_studies[0].subjects.clear();
    let spec = ModelSpec::new(ModelKind::OneStage);
    let p = ModelParameters::zeros(3, 1, net.ad_studies.len());
    assert!(matches!(log_posterior(&spec, &net, &p), Err(ModelError::Structure(_))));
    assert!(NmaTarget::new(&net, &spec).is_err());
}

/// Adaptive Simpson on `[a, b]`.
fn simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    fn rec(f: &dyn Fn(f64) -> f64, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
        let m = 0.5 * (a + b);
        let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
        let (flm, frm) = (f(lm), f(rm));
        let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
        let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
        if depth == 0 || (left + right - whole).abs() <= 15.0 * tol {
            return left + right + (left + right - whole) / 15.0;
        }
        rec(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1) + rec(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
    }
    let (fa, fb, fm) = (f(a), f(b), f(0.5 * (a + b)));
    rec(f, a, b, fa, fm, fb, (b - a) / 6.0 * (fa + 4.0 * fm + fb), tol, 50)
}

#[test]
fn weibull_density_integrates_to_one() {
    for gamma in [0.5, 1.0, 2.0] {
        for lambda in [0.1f64, 1.0, 5.0] {
            // substitute t = e^v so both tails are smooth
            let f = |v: f64| {
                let t = v.exp();
                weibull_loglik(t, true, gamma, lambda.ln()).unwrap().exp() * t
            };
            let total = simpson(&f, -80.0, 12.0, 1e-10);
            assert!((total - 1.0).abs() < 1e-6, "gamma {gamma} lambda {lambda}: {total}");
        }
    }
}

/// Participant-level studies on (1, k) for k = 2..=n_t, plus aggregate rows on
/// every pair.
fn ipd_network(n_ipd: usize, n_t: usize) -> Network {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let ipd = (0..n_ipd)
        .map(|j| {
            let subjects = (0..60)
                .map(|i| {
                    let t = rng.random_range(0.05..12.0);
                    let event = rng.random::<f64>() < 0.7;
                    SubjectRecord::new(format!("p{i}"), t, event, (i % 3 != 0) as u8, (i % 2) as u8).unwrap()
                })
                .collect();
            IpdStudy::new(format!("ipd{j}"), TreatmentId(1), TreatmentId(2 + j % (n_t - 1)), subjects).unwrap()
        })
        .collect();
    let mut ad = Vec::new();
    for k in 1..=n_t {
        for l in (k + 1)..=n_t {
            let y = rng.random_range(-0.5..0.5);
            let ppos = rng.random_range(0.0..1.0);
            ad.push(AdStudy::new(format!("ad{k}{l}"), TreatmentId(k), TreatmentId(l), y, 0.2, ppos).unwrap());
        }
    }
    build_network(treatments(n_t), ad, ipd).unwrap()
}

fn random_params(net: &Network, rng: &mut ChaCha8Rng) -> ModelParameters {
    let n_t = net.n_treatments();
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
    p
}

#[test]
fn derived_identities() {
    let net = ipd_network(3, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..20 {
        let p = random_params(&net, &mut rng);
        for b in &p.ipd {
            assert!(close(b.mu_pos() - b.mu_neg, b.beta, 1e-14));
            assert!(close(b.delta_pos() - b.delta_neg, b.delta_diff, 1e-14));
        }
        assert_eq!(p.d_pos(TreatmentId(1)), 0.0);
    }
}

#[test]
fn relabeling_invariance() {
    // 4 treatments; swap ids 2 <-> 4 and 3 stays
    let net = ipd_network(2, 4);
    let spec = ModelSpec::new(ModelKind::OneStage);
    let perm = |k: TreatmentId| match k.0 {
        2 => TreatmentId(4),
        4 => TreatmentId(2),
        x => TreatmentId(x),
    };
    let ad: Vec<AdStudy> = net
        .ad_studies
        .iter()
        .map(|s| {
            let mut s = s.clone();
            s.treatment_k = perm(s.treatment_k);
            s.treatment_l = perm(s.treatment_l);
            s
        })
        .collect();
    let ipd: Vec<IpdStudy> = net
        .ipd_studies
        .iter()
        .map(|s| {
            let mut s = s.clone();
            s.treatment_k = perm(s.treatment_k);
            s.treatment_l = perm(s.treatment_l);
            s
        })
        .collect();
    let relabeled = build_network(treatments(4), ad, ipd).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..10 {
        let p = random_params(&net, &mut rng);
        let mut q = p.clone();
        q.d_neg.swap(1, 3);
        q.beta_bar.swap(1, 3);
        // aggregate effects follow their studies, flipping sign when reversed
        q.ad_delta = relabeled
            .ad_studies
            .iter()
            .map(|s| {
                let (k, l) = (perm(s.treatment_k), perm(s.treatment_l));
                let j = net
                    .ad_studies
                    .iter()
                    .position(|o| (o.treatment_k, o.treatment_l) == (k.min(l), k.max(l)))
                    .unwrap();
                if k < l { p.ad_delta[j] } else { -p.ad_delta[j] }
            })
            .collect();
        q.ipd = relabeled
            .ipd_studies
            .iter()
            .map(|s| {
                let j = net.ipd_studies.iter().position(|o| o.study_id == s.study_id).unwrap();
                p.ipd[j]
            })
            .collect();
        let a = log_posterior(&spec, &net, &p).unwrap();
        let b = log_posterior(&spec, &relabeled, &q).unwrap();
        assert!((a - b).abs() < 1e-10, "{a} vs {b}");
    }
}

#[test]
fn gradient_matches_central_differences() {
    let net = ipd_network(2, 3);
    let spec = ModelSpec::new(ModelKind::OneStage);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..5 {
        let p = random_params(&net, &mut rng);
        let analytic = log_posterior_gradient(&spec, &net, &p).unwrap();
        let v = p.free_vector(&spec);
        assert_eq!(v.len(), analytic.len());
        for i in 0..v.len() {
            let h = 1e-5 * v[i].abs().max(1.0);
            let mut plus = v.clone();
            plus[i] += h;
            let mut minus = v.clone();
            minus[i] -= h;
            let fp = log_posterior(&spec, &net, &p.with_free_vector(&spec, &plus)).unwrap();
            let fm = log_posterior(&spec, &net, &p.with_free_vector(&spec, &minus)).unwrap();
            let numeric = (fp - fm) / (2.0 * h);
            let rel = (numeric - analytic[i]).abs() / analytic[i].abs().max(1.0);
            assert!(rel < 1e-4, "coordinate {i}: numeric {numeric} analytic {}", analytic[i]);
        }
    }
}

#[test]
fn target_matches_reference_on_participant_data() {
    // without aggregate rows the sampler density is the reference posterior
    // plus the non-centring Jacobian ln τ per study effect
    let full = ipd_network(3, 3);
    let net = build_network(full.treatments.clone(), vec![], full.ipd_studies.clone()).unwrap();
    let spec = ModelSpec::new(ModelKind::OneStage);
    let target = NmaTarget::new(&net, &spec).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..10 {
        let p = random_params(&net, &mut rng);
        let x = target.encode(&p);
        let reference = log_posterior(&spec, &net, &p).unwrap();
        let jacobian = 2.0 * net.ipd_studies.len() as f64 * p.tau.ln();
        let value = target.log_density(&x);
        assert!((value - reference - jacobian).abs() < 1e-8 * reference.abs(), "{value} vs {}", reference + jacobian);
        let back = target.decode(&x, &net, &mut rng);
        for (a, b) in back.ipd.iter().zip(&p.ipd) {
            assert!(close(a.gamma, b.gamma, 1e-12) && close(a.mu_neg, b.mu_neg, 1e-10));
            assert!(close(a.delta_neg, b.delta_neg, 1e-10) && close(a.delta_diff, b.delta_diff, 1e-10));
        }
    }
}

#[test]
fn aggregate_effects_integrate_out() {
    let net = one_ad_network();
    let spec = ModelSpec::new(ModelKind::AdNmr);
    let target = NmaTarget::new(&net, &spec).unwrap();
    let mut p = ModelParameters::zeros(2, 0, 1);
    p.d_neg[1] = -0.3;
    p.beta_bar[1] = 0.25;
    p.tau = 0.35;
    let x = target.encode(&p);
    let f = |delta: f64| {
        let mut q = p.clone();
        q.ad_delta[0] = delta;
        log_posterior(&spec, &net, &q).unwrap().exp()
    };
    let integral = simpson(&f, -8.0, 8.0, 1e-14);
    assert!((integral.ln() - target.log_density(&x)).abs() < 1e-8);
}

#[test]
fn conditionals_differ_by_constants() {
    let net = ipd_network(2, 3);
    for spec in [ModelSpec::new(ModelKind::OneStage), ModelSpec::new(ModelKind::OneStage).with_fixed_tau(0.3)] {
        let target = NmaTarget::new(&net, &spec).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let base = target.encode(&random_params(&net, &mut rng));
        for i in 0..target.dim() {
            let gap = |v: f64| {
                let mut x = base.clone();
                x[i] = v;
                target.log_density(&x) - target.log_density_given(&x, i)
            };
            let a = gap(base[i]);
            let b = gap(base[i] * 0.7 + 0.05);
            assert!((a - b).abs() < 1e-8 * a.abs().max(1.0), "coordinate {i}: {a} vs {b}");
        }
    }
}

#[test]
fn stage_one_needs_events_in_both_arms() {
    let subjects = vec![
        SubjectRecord::new("a", 1.0, true, 1, 0).unwrap(),
        SubjectRecord::new("b", 2.0, false, 1, 1).unwrap(),
    ];
    let s = IpdStudy::new("s", TreatmentId(1), TreatmentId(2), subjects).unwrap();
    let err = StageOneTarget::new(&s, StageOneMode::Pooled, PriorSettings::default()).err().unwrap();
    assert!(err.to_string().contains("experimental"));
}

#[test]
fn stage_one_matches_reference_likelihood() {
    let net = ipd_network(1, 2);
    let s = &net.ipd_studies[0];
    let t = StageOneTarget::new(s, StageOneMode::Subgroup, PriorSettings::default()).unwrap();
    assert_eq!(t.dim(), 5);
    let (gamma, mu_neg, d_neg, mu_pos, d_pos) = (1.3, -2.0, 0.2, -1.5, -0.4);
    let reference: f64 = s
        .subjects
        .iter()
        .map(|r| {
            let eta = linear_predictor(mu_neg, mu_pos - mu_neg, d_neg, d_pos - d_neg, r.biomarker, r.arm);
            weibull_loglik(r.time, r.event, gamma, eta).unwrap()
        })
        .sum::<f64>()
        + PriorSettings::default().gamma_lnpdf(gamma)
        + [mu_neg, d_neg, mu_pos, d_pos].iter().map(|&v| normal_lnpdf(v, 0.0, 10.0)).sum::<f64>();
    let c = super::weibull::GroupedStudy::new(s, false).shift;
    let x = [gamma, mu_neg + gamma * c, d_neg, mu_pos + gamma * c, d_pos];
    assert!((t.log_density(&x) - reference).abs() < 1e-9 * reference.abs());
}
