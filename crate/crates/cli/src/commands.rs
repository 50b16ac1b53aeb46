use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use bnma::emulation::{self, generate_synthetic_ehr, read_ehr, write_ehr, EhrRecord, EmulatedTrial, EmulationProtocol};
use bnma::evidence::{build_network, ingest_ad, ingest_ipd, write_ipd, IpdStudy, Network, SubjectRecord, TreatmentId, TreatmentMap};
use bnma::km::{read_curve, read_risk_table, reconstruct};
use bnma::mcmc::derive_seed;
use bnma::pipelines::{self, compare as compare_fits, export_forest, format_pct, model_dimension, FitSummary};
use log::{info, warn};

use crate::config::{KmStudy, RunConfig};
use crate::{CliError, Outcome};

/// Round-trip deviation above which a reconstruction is flagged.
const KM_TOLERANCE: f64 = 0.02;

fn open(path: &Path) -> Result<File, CliError> {
    File::open(path).map_err(|e| CliError::Read(path.to_path_buf(), e))
}

fn read_text(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| CliError::Read(path.to_path_buf(), e))
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| CliError::Write(dir.to_path_buf(), e))?;
    }
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::Write(path.to_path_buf(), e))
}

fn finish(mut w: BufWriter<File>, path: &Path) -> Result<(), CliError> {
    w.flush().map_err(|e| CliError::Write(path.to_path_buf(), e))
}

fn invalid(path: &Path, e: impl std::fmt::Display) -> String {
    format!("{}: {e}", path.display())
}

fn treatment_map(config: &RunConfig) -> Result<TreatmentMap, CliError> {
    let path = config
        .data
        .treatment_map
        .as_ref()
        .ok_or_else(|| CliError::Config("data.treatment_map is required".into()))?;
    TreatmentMap::parse(&read_text(path)?).map_err(|e| CliError::Invalid(vec![invalid(path, e)]))
}

/// IPD entries may name files or directories; a directory contributes its
/// `.csv` files in name order.
fn ipd_files(paths: &[PathBuf]) -> Result<Vec<PathBuf>, CliError> {
    let mut files = Vec::new();
    for p in paths {
        if p.is_dir() {
            let mut inside: Vec<PathBuf> = std::fs::read_dir(p)
                .map_err(|e| CliError::Read(p.clone(), e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.extension().is_some_and(|x| x == "csv"))
                .collect();
            inside.sort();
            files.extend(inside);
        } else {
            files.push(p.clone());
        }
    }
    Ok(files)
}

/// Reads every evidence file, collecting all problems before failing.
fn load_network(config: &RunConfig, map: &TreatmentMap, problems: &mut Vec<String>) -> Option<Network> {
    let mut ad = Vec::new();
    if let Some(path) = &config.data.ad {
        match open(path).map(|f| ingest_ad(f, map)) {
            Ok(Ok(rows)) => ad = rows,
            Ok(Err(e)) => problems.push(invalid(path, e)),
            Err(e) => problems.push(e.to_string()),
        }
    }
    let mut ipd: Vec<IpdStudy> = Vec::new();
    match ipd_files(&config.data.ipd) {
        Ok(files) => {
            for path in files {
                match open(&path).map(|f| ingest_ipd(f, map)) {
                    Ok(Ok(studies)) => ipd.extend(studies),
                    Ok(Err(e)) => problems.push(invalid(&path, e)),
                    Err(e) => problems.push(e.to_string()),
                }
            }
        }
        Err(e) => problems.push(e.to_string()),
    }
    let mut seen = BTreeSet::new();
    for id in ad.iter().map(|s| &s.study_id).chain(ipd.iter().map(|s| &s.study_id)) {
        if !seen.insert(id.clone()) {
            problems.push(format!("study id `{id}` appears more than once"));
        }
    }
    if !problems.is_empty() {
        return None;
    }
    match build_network(map.treatments(), ad, ipd) {
        Ok(net) => Some(net),
        Err(e) => {
            problems.push(format!("network: {e}"));
            None
        }
    }
}

fn load_protocol(path: &Path) -> Result<EmulationProtocol, CliError> {
    let protocol: EmulationProtocol =
        toml::from_str(&read_text(path)?).map_err(|e| CliError::Invalid(vec![invalid(path, e)]))?;
    protocol.validate().map_err(|e| CliError::Invalid(vec![invalid(path, e)]))?;
    Ok(protocol)
}

fn check_km(study: &KmStudy, map: &TreatmentMap, problems: &mut Vec<String>) {
    let at = format!("km study `{}`", study.study);
    if study.biomarker > 1 {
        problems.push(format!("{at}: biomarker must be 0 or 1"));
    }
    if study.arms.len() != 2 {
        problems.push(format!("{at}: expected two arms, found {}", study.arms.len()));
    }
    for arm in &study.arms {
        if let Err(e) = map.id_of(&arm.treatment) {
            problems.push(format!("{at}: {e}"));
        }
        match open(&arm.curve).map(|f| read_curve(f, &arm.treatment)) {
            Ok(Err(e)) => problems.push(invalid(&arm.curve, e)),
            Err(e) => problems.push(e.to_string()),
            Ok(Ok(_)) => {}
        }
        match open(&arm.risk).map(read_risk_table) {
            Ok(Err(e)) => problems.push(invalid(&arm.risk, e)),
            Err(e) => problems.push(e.to_string()),
            Ok(Ok(_)) => {}
        }
    }
}

pub fn validate(config: &RunConfig) -> Result<Outcome, CliError> {
    let mut problems = Vec::new();
    if let Err(e) = config.spec().and_then(|_| config.sampler()) {
        problems.push(e.to_string());
    }
    let map = match treatment_map(config) {
        Ok(m) => Some(m),
        Err(e) => {
            problems.push(e.to_string());
            None
        }
    };
    let mut network = None;
    if let Some(map) = &map {
        network = load_network(config, map, &mut problems);
        for study in &config.km_studies {
            check_km(study, map, &mut problems);
        }
    }
    if let Some(path) = &config.data.ehr {
        if let Err(e) = open(path).map(read_ehr).and_then(|r| r.map_err(|e| CliError::Invalid(vec![invalid(path, e)]))) {
            problems.push(e.to_string());
        }
    }
    for run in &config.emulation {
        if let Err(e) = load_protocol(&run.protocol) {
            problems.push(e.to_string());
        }
    }
    for cohort in &config.synthetic_ehr {
        if let Err(e) = cohort.validate() {
            problems.push(format!("synthetic_ehr: {e}"));
        }
    }
    if !problems.is_empty() {
        return Err(CliError::Invalid(problems));
    }
    if let Some(net) = network {
        let n = net.n_studies();
        println!("{} treatments, {n} {}", net.n_treatments(), if n == 1 { "study" } else { "studies" });
    }
    Ok(Outcome::Done)
}

pub fn reconstruct_km(config: &RunConfig) -> Result<Outcome, CliError> {
    let map = treatment_map(config)?;
    let treatments = map.treatments();
    let dir = config.out.join("km");
    let report_path = dir.join("report.csv");
    let mut report = csv::Writer::from_writer(create(&report_path)?);
    let csv_err = |e: csv::Error| CliError::Write(report_path.clone(), std::io::Error::other(e));
    report
        .write_record(["study", "biomarker", "treatment", "n", "events", "max_deviation", "events_trimmed", "flag"])
        .map_err(csv_err)?;

    let mut order: Vec<&str> = Vec::new();
    for s in &config.km_studies {
        if !order.contains(&s.study.as_str()) {
            order.push(&s.study);
        }
    }
    let mut failures = Vec::new();
    for study in order {
        let entries: Vec<&KmStudy> = config.km_studies.iter().filter(|s| s.study == study).collect();
        let split_subgroups = entries.len() > 1;
        let mut rows = Vec::new();
        let result = (|| -> Result<IpdStudy, String> {
            let mut ids = Vec::new();
            for arm in entries.iter().flat_map(|e| &e.arms) {
                ids.push(map.id_of(&arm.treatment).map_err(|e| e.to_string())?);
            }
            ids.sort();
            ids.dedup();
            if ids.len() != 2 {
                return Err(format!("expected two treatments, found {}", ids.len()));
            }
            let (k, l) = (ids[0], ids[1]);
            let mut subjects: Vec<SubjectRecord> = Vec::new();
            for entry in &entries {
                for arm in &entry.arms {
                    let id: TreatmentId = map.id_of(&arm.treatment).map_err(|e| e.to_string())?;
                    let tag = map.class_of(&arm.treatment).unwrap_or(&arm.treatment).to_string();
                    let curve = read_curve(open(&arm.curve).map_err(|e| e.to_string())?, &tag).map_err(|e| invalid(&arm.curve, e))?;
                    let risk = read_risk_table(open(&arm.risk).map_err(|e| e.to_string())?).map_err(|e| invalid(&arm.risk, e))?;
                    let rep = reconstruct(&curve, &risk, arm.total_events).map_err(|e| e.to_string())?;
                    let flagged = rep.max_abs_survival_deviation > KM_TOLERANCE;
                    if flagged {
                        warn!(
                            "{study} {tag}: round-trip deviation {:.4} exceeds {KM_TOLERANCE}",
                            rep.max_abs_survival_deviation
                        );
                    }
                    let label = if split_subgroups {
                        format!("{tag}{}", if entry.biomarker == 1 { "pos" } else { "neg" })
                    } else {
                        tag.clone()
                    };
                    let events = rep.records.iter().filter(|r| r.event).count();
                    rows.push([
                        study.to_string(),
                        entry.biomarker.to_string(),
                        tag,
                        rep.records.len().to_string(),
                        events.to_string(),
                        format!("{:.6}", rep.max_abs_survival_deviation),
                        rep.events_trimmed.to_string(),
                        if flagged { "deviation".into() } else { String::new() },
                    ]);
                    subjects.extend(rep.labelled_records(study, &label, u8::from(id == l), entry.biomarker));
                }
            }
            IpdStudy::new(study, k, l, subjects).map_err(|e| e.to_string())
        })();
        match result {
            Ok(ipd) => {
                for row in rows {
                    report.write_record(row).map_err(csv_err)?;
                }
                let path = dir.join(format!("{study}.csv"));
                let w = create(&path)?;
                let mut w = w;
                write_ipd(&mut w, &[ipd], &treatments).map_err(|e| CliError::Write(path.clone(), std::io::Error::other(e)))?;
                finish(w, &path)?;
                info!("wrote {}", path.display());
            }
            Err(e) => {
                warn!("km study `{study}` failed: {e}");
                failures.push(format!("km study `{study}`: {e}"));
            }
        }
    }
    report.flush().map_err(|e| CliError::Write(report_path.clone(), e))?;
    if failures.is_empty() {
        Ok(Outcome::Done)
    } else {
        Err(CliError::Invalid(failures))
    }
}

fn read_records(config: &RunConfig) -> Result<Vec<EhrRecord>, CliError> {
    let path = config
        .data
        .ehr
        .as_ref()
        .ok_or_else(|| CliError::Config("data.ehr is required".into()))?;
    read_ehr(open(path)?).map_err(|e| CliError::Invalid(vec![invalid(path, e)]))
}

const BALANCE_COLUMNS: [&str; 12] = [
    "trial",
    "arm",
    "treatment",
    "n",
    "mean_age",
    "sd_age",
    "n_biomarker_pos",
    "prop_biomarker_pos",
    "smd_age_before",
    "smd_age_after",
    "smd_biomarker_before",
    "smd_biomarker_after",
];

fn balance_rows(trial: &EmulatedTrial) -> Vec<Vec<String>> {
    let smd = |r: &emulation::BalanceReport, c: &str| r.row(c).map_or(String::new(), |r| format!("{:.4}", r.smd));
    [(1u8, trial.experimental), (0u8, trial.control)]
        .into_iter()
        .map(|(arm, class)| {
            let members: Vec<usize> = (0..trial.subjects.len()).filter(|&i| trial.subjects[i].arm == arm).collect();
            let n = members.len() as f64;
            let mean = members.iter().map(|&i| trial.ages[i]).sum::<f64>() / n;
            let var = members.iter().map(|&i| (trial.ages[i] - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
            let pos = members.iter().filter(|&&i| trial.subjects[i].biomarker == 1).count();
            vec![
                trial.trial_id.clone(),
                if arm == 1 { "experimental" } else { "control" }.into(),
                class.tag().into(),
                members.len().to_string(),
                format!("{mean:.2}"),
                format!("{:.2}", var.sqrt()),
                pos.to_string(),
                format!("{:.3}", pos as f64 / n),
                smd(&trial.balance_before, "age"),
                smd(&trial.balance_after, "age"),
                smd(&trial.balance_before, "biomarker"),
                smd(&trial.balance_after, "biomarker"),
            ]
        })
        .collect()
}

pub fn emulate(config: &RunConfig) -> Result<Outcome, CliError> {
    if config.emulation.is_empty() {
        return Err(CliError::Config("no [[emulation]] entries".into()));
    }
    let map = treatment_map(config)?;
    let treatments = map.treatments();
    let records = read_records(config)?;
    let balance_path = config.out.join("emulation_balance.csv");
    let mut balance = csv::Writer::from_writer(create(&balance_path)?);
    let csv_err = |e: csv::Error| CliError::Write(balance_path.clone(), std::io::Error::other(e));
    balance.write_record(BALANCE_COLUMNS).map_err(csv_err)?;
    for (index, run) in config.emulation.iter().enumerate() {
        let mut protocol = load_protocol(&run.protocol)?;
        // the run seed governs every stochastic step
        protocol.seed = derive_seed(config.seed, index as u64);
        let trials = emulation::emulate(&records, &protocol)?;
        for (k, mut trial) in trials.into_iter().enumerate() {
            trial.trial_id = format!("{}_{}", run.name, k + 1);
            let study = trial.to_ipd_study(&treatments)?;
            let path = config.out.join("ipd").join(format!("{}.csv", trial.trial_id));
            let mut w = create(&path)?;
            write_ipd(&mut w, &[study], &treatments).map_err(|e| CliError::Write(path.clone(), std::io::Error::other(e)))?;
            finish(w, &path)?;
            let cox = trial.log_hr()?;
            info!(
                "{}: {} pairs, matched log HR {:+.3} (se {:.3})",
                trial.trial_id,
                trial.n_pairs(),
                cox.log_hr,
                cox.se
            );
            for row in balance_rows(&trial) {
                balance.write_record(row).map_err(csv_err)?;
            }
        }
    }
    balance.flush().map_err(|e| CliError::Write(balance_path.clone(), e))?;
    info!("wrote {}", balance_path.display());
    Ok(Outcome::Done)
}

pub fn simulate_ehr(config: &RunConfig) -> Result<Outcome, CliError> {
    let cohorts = if config.synthetic_ehr.is_empty() {
        vec![Default::default()]
    } else {
        config.synthetic_ehr.clone()
    };
    let prefixes: BTreeSet<&str> = cohorts.iter().map(|c| c.id_prefix.as_str()).collect();
    if prefixes.len() != cohorts.len() {
        return Err(CliError::Config("synthetic_ehr cohorts need distinct id_prefix values".into()));
    }
    let mut records = Vec::new();
    for (i, cohort) in cohorts.iter().enumerate() {
        records.extend(generate_synthetic_ehr(cohort, derive_seed(config.seed, i as u64))?);
    }
    let path = config.data.ehr.clone().unwrap_or_else(|| config.out.join("ehr.csv"));
    let mut w = create(&path)?;
    write_ehr(&mut w, &records).map_err(|e| CliError::Write(path.clone(), std::io::Error::other(e)))?;
    finish(w, &path)?;
    info!("wrote {} records to {}", records.len(), path.display());
    Ok(Outcome::Done)
}

fn write_forest(path: &Path, fits: &[&FitSummary]) -> Result<(), CliError> {
    let mut w = create(path)?;
    export_forest(fits, &mut w).map_err(|e| CliError::Write(path.to_path_buf(), std::io::Error::other(e)))?;
    finish(w, path)
}

pub fn fit(config: &RunConfig) -> Result<Outcome, CliError> {
    let spec = config.spec()?;
    let sampler = config.sampler()?;
    let map = treatment_map(config)?;
    let mut problems = Vec::new();
    let network = load_network(config, &map, &mut problems).ok_or(CliError::Invalid(problems))?;
    let n = spec.kind.number();
    info!(
        "model {n}: {} treatments, {} aggregate rows, {} participant-level studies, {} chains x {} iterations",
        network.n_treatments(),
        network.ad_studies.len(),
        network.ipd_studies.len(),
        sampler.chains,
        sampler.iterations
    );
    if n != 2 {
        if let Ok(dim) = model_dimension(&network, &spec) {
            info!("sampling {dim} coordinates");
        }
    }
    let fit = pipelines::fit(&network, config.model.stage_one, &spec, &sampler)?;

    let out = &config.out;
    let summary_path = out.join(format!("fit_model{n}.json"));
    let mut w = create(&summary_path)?;
    w.write_all(fit.summary.to_json().as_bytes())
        .map_err(|e| CliError::Write(summary_path.clone(), e))?;
    finish(w, &summary_path)?;

    let draws_path = out.join(format!("draws_model{n}.csv"));
    let mut w = create(&draws_path)?;
    fit.draws
        .write_csv(&mut w)
        .map_err(|e| CliError::Write(draws_path.clone(), std::io::Error::other(e)))?;
    finish(w, &draws_path)?;
    write_forest(&out.join(format!("forest_model{n}.csv")), &[&fit.summary])?;

    if !fit.pseudo_rows.is_empty() {
        let path = out.join("stage_one_rows.csv");
        let mut rows = csv::Writer::from_writer(create(&path)?);
        let err = |e: csv::Error| CliError::Write(path.clone(), std::io::Error::other(e));
        rows.write_record(["study_id", "treatment_k", "treatment_l", "y", "sigma", "ppos", "origin"])
            .map_err(err)?;
        for r in &fit.pseudo_rows {
            rows.write_record([
                r.study_id.clone(),
                network.label(r.treatment_k).to_string(),
                network.label(r.treatment_l).to_string(),
                format!("{:?}", r.y),
                format!("{:?}", r.sigma),
                format!("{:?}", r.ppos),
                r.origin.clone(),
            ])
            .map_err(err)?;
        }
        rows.flush().map_err(|e| CliError::Write(path.clone(), e))?;
    }
    info!("wrote outputs to {}", out.display());

    print_summary(&fit.summary);
    if fit.summary.diagnostics.converged {
        println!("convergence gate: passed (R-hat <= {}, ESS >= {})", pipelines::RHAT_MAX, pipelines::ESS_MIN);
        Ok(Outcome::Done)
    } else {
        let flagged: Vec<String> = fit
            .summary
            .contrasts
            .iter()
            .filter(|c| !c.converged())
            .map(|c| format!("{} ({})", c.contrast, c.subgroup))
            .collect();
        println!("convergence gate: FLAGGED {}", flagged.join(", "));
        Ok(Outcome::Flagged)
    }
}

fn print_summary(s: &FitSummary) {
    println!("model {}", s.model.number());
    for c in &s.contrasts {
        let rhat = c.rhat_max.map_or_else(|| "NA".into(), |r| format!("{r:.3}"));
        println!(
            "  {:<16} {:<4} HR {:.2} ({:.2}, {:.2})  R-hat {rhat}  ESS {:.0}",
            c.contrast,
            c.subgroup.as_str(),
            c.hr_median,
            c.lower,
            c.upper,
            c.ess_min
        );
    }
    println!(
        "  tau median {:.3} ({:.3}, {:.3})",
        s.tau.median, s.tau.lower, s.tau.upper
    );
}

fn read_summary(path: &Path) -> Result<FitSummary, CliError> {
    FitSummary::from_json(&read_text(path)?).map_err(|e| CliError::Invalid(vec![invalid(path, e)]))
}

pub fn summarize(paths: &[PathBuf], out: Option<&Path>) -> Result<Outcome, CliError> {
    let fits = paths.iter().map(|p| read_summary(p)).collect::<Result<Vec<_>, _>>()?;
    for f in &fits {
        print_summary(f);
    }
    if let Some(out) = out {
        let refs: Vec<&FitSummary> = fits.iter().collect();
        write_forest(&out.join("forest.csv"), &refs)?;
    }
    Ok(Outcome::Done)
}

pub fn compare(baseline: &Path, other: &Path, out: Option<&Path>) -> Result<Outcome, CliError> {
    let (a, b) = (read_summary(baseline)?, read_summary(other)?);
    let rows = compare_fits(&a, &b).map_err(|e| CliError::Invalid(vec![e.to_string()]))?;
    let mut table = vec![[
        "contrast".to_string(),
        "subgroup".into(),
        "baseline_lo".into(),
        "baseline_hi".into(),
        "other_lo".into(),
        "other_hi".into(),
        "reduction_pct".into(),
    ]];
    for r in &rows {
        println!(
            "{:<16} {:<4} ({:.2}, {:.2}) -> ({:.2}, {:.2})  {}%",
            r.contrast,
            r.subgroup.as_str(),
            r.baseline.0,
            r.baseline.1,
            r.other.0,
            r.other.1,
            format_pct(r.reduction_pct)
        );
        table.push([
            r.contrast.clone(),
            r.subgroup.as_str().into(),
            format!("{:.3}", r.baseline.0),
            format!("{:.3}", r.baseline.1),
            format!("{:.3}", r.other.0),
            format!("{:.3}", r.other.1),
            format_pct(r.reduction_pct),
        ]);
    }
    if let Some(out) = out {
        let path = out.join("compare.csv");
        let mut w = csv::Writer::from_writer(create(&path)?);
        for row in table {
            w.write_record(row).map_err(|e| CliError::Write(path.clone(), std::io::Error::other(e)))?;
        }
        w.flush().map_err(|e| CliError::Write(path.clone(), e))?;
    }
    Ok(Outcome::Done)
}
