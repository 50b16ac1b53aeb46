//! End-to-end runs of the `bnma` binary on temporary bundles.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use bnma::evidence::SubjectRecord;
use bnma::km::{km_estimate, number_at_risk, write_curve, write_risk_table, DigitizedCurve, RiskTable};
use tempfile::TempDir;

fn bnma(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bnma")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn breast() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/breast")
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::create_dir_all(p.parent().unwrap()).unwrap();
    std::fs::write(&p, text).unwrap();
    p
}

/// Run file over the breast data with extra TOML appended.
fn breast_config(dir: &Path, extra: &str) -> PathBuf {
    let b = breast();
    let text = format!(
        "seed = 7\nout = \"out\"\n[data]\ntreatment_map = \"{}\"\nad = \"{}\"\n{extra}",
        b.join("treatment_map.txt").display(),
        b.join("ad.csv").display()
    );
    write(dir, "run.toml", &text)
}

fn arg(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn print_defaults_is_a_valid_run_file() {
    let o = bnma(&["--print-defaults"]);
    assert_eq!(code(&o), 0);
    let text = stdout(&o);
    assert!(text.contains("seed = 1") && text.contains("[sampler]") && text.contains("gamma_rate = 0.01"), "{text}");
    let dir = TempDir::new().unwrap();
    let path = write(dir.path(), "defaults.toml", &text);
    // the defaults name files that do not exist here, so validation reports them
    let o = bnma(&["validate", "--config", arg(&path)]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("treatment_map.txt"));
}

#[test]
fn validate_breast_bundle() {
    let o = bnma(&["validate", "--config", arg(&breast().join("config.toml"))]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(stdout(&o).trim(), "3 treatments, 23 studies");
}

#[test]
fn validate_reports_unmapped_label() {
    let dir = TempDir::new().unwrap();
    let ad = "study_id,ref_treatment,exp_treatment,hr,ci_low,ci_high,n_total,n_pos,n_neg,n_unknown\n\
              s1,doxorubicin,paclitaxel,0.9,0.7,1.2,100,50,50,0\n\
              s2,doxorubicin,mystery drug,0.9,0.7,1.2,100,50,50,0\n";
    let ad = write(dir.path(), "ad.csv", ad);
    let map = breast().join("treatment_map.txt");
    let config = write(
        dir.path(),
        "run.toml",
        &format!("seed = 1\n[data]\ntreatment_map = \"{}\"\nad = \"ad.csv\"\n", map.display()),
    );
    let _ = ad;
    let o = bnma(&["validate", "--config", arg(&config)]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("mystery drug"), "{}", stderr(&o));
    assert!(stderr(&o).contains("ad.csv"), "{}", stderr(&o));
}

#[test]
fn validate_rejects_disconnected_network() {
    let dir = TempDir::new().unwrap();
    write(dir.path(), "map.txt", "a -> A\nb -> B\nc -> C\nd -> D\n");
    write(
        dir.path(),
        "ad.csv",
        "study_id,ref_treatment,exp_treatment,hr,ci_low,ci_high,n_total,n_pos,n_neg,n_unknown\n\
         s1,a,b,0.9,0.7,1.2,100,50,50,0\n\
         s2,c,d,0.9,0.7,1.2,100,50,50,0\n",
    );
    let config = write(dir.path(), "run.toml", "seed = 1\n[data]\ntreatment_map = \"map.txt\"\nad = \"ad.csv\"\n");
    let o = bnma(&["validate", "--config", arg(&config)]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("network"), "{}", stderr(&o));
}

#[test]
fn missing_config_and_bad_keys_are_validation_errors() {
    assert_eq!(code(&bnma(&["validate", "--config", "/nonexistent/run.toml"])), 2);
    let dir = TempDir::new().unwrap();
    let config = write(dir.path(), "run.toml", "seed = 1\nsede = 2\n");
    assert_eq!(code(&bnma(&["validate", "--config", arg(&config)])), 2);
    assert_eq!(code(&bnma(&["validate"])), 2);
}

/// Deterministic exponential-quantile cohort with every fourth subject
/// censored early.
fn cohort(n: usize, rate: f64) -> Vec<SubjectRecord> {
    (0..n)
        .map(|i| {
            let t = -(1.0 - (i as f64 + 0.5) / n as f64).ln() / rate;
            let censored = i % 4 == 3;
            SubjectRecord::new(format!("s{i}"), if censored { 0.6 * t } else { t }, !censored, 0, 0).unwrap()
        })
        .collect()
}

fn write_arm(dir: &Path, name: &str, records: &[SubjectRecord]) {
    let mut pts = vec![(0.0, 1.0)];
    let mut last = 1.0;
    for (t, s) in km_estimate(records) {
        if s < last {
            pts.push((t, s));
            last = s;
        }
    }
    let tmax = records.iter().map(|r| r.time).fold(0.0, f64::max);
    if pts.last().unwrap().0 < tmax {
        pts.push((tmax, last));
    }
    let curve = DigitizedCurve::new(pts, name).unwrap();
    let cuts = [0.0, 3.0, 6.0, 9.0, 12.0];
    let risk = RiskTable::new(cuts.iter().map(|&t| (t, number_at_risk(records, t))).collect()).unwrap();
    write_curve(std::fs::File::create(dir.join(format!("{name}_curve.csv"))).unwrap(), &curve).unwrap();
    write_risk_table(std::fs::File::create(dir.join(format!("{name}_risk.csv"))).unwrap(), &risk).unwrap();
}

const KM_ENTRY: &str = "[[km]]\nstudy = \"trial9\"\nbiomarker = 1\n\
    [[km.arms]]\ntreatment = \"doxorubicin\"\ncurve = \"c_curve.csv\"\nrisk = \"c_risk.csv\"\n\
    [[km.arms]]\ntreatment = \"paclitaxel\"\ncurve = \"x_curve.csv\"\nrisk = \"x_risk.csv\"\n";

#[test]
fn reconstruct_two_arm_curves() {
    let dir = TempDir::new().unwrap();
    write_arm(dir.path(), "c", &cohort(180, 0.12));
    write_arm(dir.path(), "x", &cohort(150, 0.08));
    let config = breast_config(dir.path(), KM_ENTRY);
    let o = bnma(&["reconstruct-km", "--config", arg(&config)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));

    let ipd = std::fs::read_to_string(dir.path().join("out/km/trial9.csv")).unwrap();
    assert!(ipd.starts_with("study_id,subject_id,treatment,biomarker,time,event"));
    assert_eq!(ipd.lines().count(), 1 + 180 + 150);
    assert!(ipd.contains("trial9,trial9_X_1,X,1,"));
    let report = std::fs::read_to_string(dir.path().join("out/km/report.csv")).unwrap();
    let rows: Vec<&str> = report.lines().skip(1).collect();
    assert_eq!(rows.len(), 2);
    for row in rows {
        let dev: f64 = row.split(',').nth(5).unwrap().parse().unwrap();
        assert!(dev <= 0.02, "{row}");
    }
    // the output is valid evidence on its own two-treatment network
    write(dir.path(), "map2.txt", "doxorubicin -> C\npaclitaxel -> X\n");
    let check = write(
        dir.path(),
        "check.toml",
        "seed = 1\n[data]\ntreatment_map = \"map2.txt\"\nipd = [\"out/km\"]\n",
    );
    std::fs::remove_file(dir.path().join("out/km/report.csv")).unwrap();
    let o = bnma(&["validate", "--config", arg(&check)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(stdout(&o).trim(), "2 treatments, 1 study");
}

#[test]
fn empty_curve_fails_that_study_only() {
    let dir = TempDir::new().unwrap();
    write_arm(dir.path(), "c", &cohort(100, 0.12));
    write_arm(dir.path(), "x", &cohort(100, 0.08));
    write(dir.path(), "empty_curve.csv", "time,survival\n");
    let broken = KM_ENTRY.replace("trial9", "broken").replace("x_curve.csv", "empty_curve.csv");
    let config = breast_config(dir.path(), &format!("{KM_ENTRY}{broken}"));
    let o = bnma(&["reconstruct-km", "--config", arg(&config)]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("broken"), "{}", stderr(&o));
    assert!(dir.path().join("out/km/trial9.csv").exists());
    assert!(!dir.path().join("out/km/broken.csv").exists());
}

fn emulation_bundle(dir: &Path, n: usize, n_trials: usize) -> PathBuf {
    write(
        dir,
        "protocol.toml",
        &format!("experimental = \"CX\"\ncontrol = \"X\"\nn_trials = {n_trials}\n"),
    );
    let map = breast().join("treatment_map.txt");
    write(
        dir,
        "run.toml",
        &format!(
            "seed = 5\n[data]\ntreatment_map = \"{}\"\nehr = \"ehr.csv\"\n\
             [[synthetic_ehr]]\nn = {n}\n[[emulation]]\nname = \"em\"\nprotocol = \"protocol.toml\"\n",
            map.display()
        ),
    )
}

#[test]
fn emulate_single_trial() {
    let dir = TempDir::new().unwrap();
    let config = emulation_bundle(dir.path(), 600, 1);
    assert_eq!(code(&bnma(&["simulate-ehr", "--config", arg(&config)])), 0);
    let o = bnma(&["emulate", "--config", arg(&config)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let files: Vec<_> = std::fs::read_dir(dir.path().join("out/ipd")).unwrap().collect();
    assert_eq!(files.len(), 1);
    let balance = std::fs::read_to_string(dir.path().join("out/emulation_balance.csv")).unwrap();
    assert_eq!(balance.lines().count(), 3);
    assert!(balance.lines().nth(1).unwrap().starts_with("em_1,experimental,CX,"));
}

#[test]
fn emulate_is_reproducible_and_follows_the_seed() {
    let dir = TempDir::new().unwrap();
    let config = emulation_bundle(dir.path(), 1500, 3);
    assert_eq!(code(&bnma(&["simulate-ehr", "--config", arg(&config)])), 0);
    let read = |d: &str| std::fs::read(dir.path().join(d).join("ipd/em_2.csv")).unwrap();
    assert_eq!(code(&bnma(&["emulate", "--config", arg(&config), "--out", arg(&dir.path().join("a"))])), 0);
    assert_eq!(code(&bnma(&["emulate", "--config", arg(&config), "--out", arg(&dir.path().join("b"))])), 0);
    assert_eq!(
        code(&bnma(&["emulate", "--config", arg(&config), "--seed", "6", "--out", arg(&dir.path().join("c"))])),
        0
    );
    assert_eq!(read("a"), read("b"));
    assert_ne!(read("a"), read("c"));
}

#[test]
fn emulate_cohort_too_small() {
    let dir = TempDir::new().unwrap();
    let config = emulation_bundle(dir.path(), 3, 1);
    assert_eq!(code(&bnma(&["simulate-ehr", "--config", arg(&config)])), 0);
    let o = bnma(&["emulate", "--config", arg(&config)]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

fn data_rows(path: &Path) -> Vec<String> {
    std::fs::read_to_string(path).unwrap().lines().skip(1).map(str::to_string).collect()
}

#[test]
fn model1_forest_has_six_rows() {
    let dir = TempDir::new().unwrap();
    let config = breast_config(dir.path(), "[model]\nkind = 1\n");
    let o = bnma(&["fit", "--config", arg(&config)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("convergence gate: passed"));
    let out = dir.path().join("out");
    assert_eq!(data_rows(&out.join("forest_model1.csv")).len(), 6);
    assert!(out.join("draws_model1.csv").exists() && out.join("fit_model1.json").exists());

    // summarize and compare read the JSON back
    let json = out.join("fit_model1.json");
    let o = bnma(&["summarize", arg(&json), "--out", arg(&out)]);
    assert_eq!(code(&o), 0);
    assert_eq!(data_rows(&out.join("forest.csv")), data_rows(&out.join("forest_model1.csv")));
    let o = bnma(&["compare", arg(&json), arg(&json)]);
    assert_eq!(code(&o), 0);
    let lines: Vec<String> = stdout(&o).lines().map(str::to_string).collect();
    assert_eq!(lines.len(), 6);
    assert!(lines.iter().all(|l| l.ends_with(" 0.0%")), "{lines:?}");
}

#[test]
fn model2_without_participant_data_equals_model1() {
    let dir = TempDir::new().unwrap();
    let config = breast_config(dir.path(), "[sampler]\nburn_in = 2000\niterations = 4000\n");
    let one = dir.path().join("one");
    let two = dir.path().join("two");
    let o1 = bnma(&["fit", "--config", arg(&config), "--out", arg(&one)]);
    let c2 = std::fs::read_to_string(&config).unwrap() + "[model]\nkind = 2\n";
    let config2 = write(dir.path(), "run2.toml", &c2);
    let o2 = bnma(&["fit", "--config", arg(&config2), "--out", arg(&two)]);
    assert_eq!(code(&o1), code(&o2));
    assert_eq!(
        std::fs::read(one.join("draws_model1.csv")).unwrap(),
        std::fs::read(two.join("draws_model2.csv")).unwrap()
    );
    let strip = |rows: Vec<String>| -> Vec<String> { rows.iter().map(|r| r.split_once(',').unwrap().1.to_string()).collect() };
    assert_eq!(
        strip(data_rows(&one.join("forest_model1.csv"))),
        strip(data_rows(&two.join("forest_model2.csv")))
    );
}

#[test]
fn model3_same_seed_same_bytes() {
    let dir = TempDir::new().unwrap();
    let ipd = breast().join("ipd");
    let extra = format!(
        "ipd = [\"{}\", \"{}\"]\n[model]\nkind = 3\n[sampler]\nchains = 2\nburn_in = 500\niterations = 1000\n",
        ipd.join("emulated_X_vs_C_1.csv").display(),
        ipd.join("emulated_CX_vs_C_1.csv").display()
    );
    let config = breast_config(dir.path(), &extra);
    let run = |name: &str| {
        let out = dir.path().join(name);
        let o = bnma(&["fit", "--config", arg(&config), "--out", arg(&out)]);
        assert!([0, 3].contains(&code(&o)), "{}", stderr(&o));
        ["fit_model3.json", "draws_model3.csv", "forest_model3.csv"].map(|f| std::fs::read(out.join(f)).unwrap())
    };
    assert_eq!(run("a"), run("b"));
}

#[test]
fn short_chains_are_flagged() {
    let dir = TempDir::new().unwrap();
    let config = breast_config(dir.path(), "[sampler]\nchains = 2\nburn_in = 50\niterations = 60\n");
    let o = bnma(&["fit", "--config", arg(&config)]);
    assert_eq!(code(&o), 3);
    assert!(stdout(&o).contains("convergence gate: FLAGGED"));
    assert!(dir.path().join("out/forest_model1.csv").exists());
}

#[test]
fn compare_reports_reduction_and_rejects_mismatch() {
    let dir = TempDir::new().unwrap();
    let config = breast_config(dir.path(), "[sampler]\nburn_in = 500\niterations = 1000\n");
    bnma(&["fit", "--config", arg(&config)]);
    let json = dir.path().join("out/fit_model1.json");
    let base: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&json).unwrap()).unwrap();
    let with_interval = |lo: f64, hi: f64| {
        let mut v = base.clone();
        for c in v["contrasts"].as_array_mut().unwrap() {
            if c["contrast"] == "CX vs X" && c["subgroup"] == "+ve" {
                c["lower"] = lo.into();
                c["upper"] = hi.into();
            }
        }
        v
    };
    let a = write(dir.path(), "a.json", &with_interval(0.62, 1.84).to_string());
    let b = write(dir.path(), "b.json", &with_interval(0.69, 1.56).to_string());
    let o = bnma(&["compare", arg(&a), arg(&b), "--out", arg(dir.path())]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).lines().any(|l| l.starts_with("CX vs X") && l.ends_with("28.7%")), "{}", stdout(&o));
    assert!(std::fs::read_to_string(dir.path().join("compare.csv")).unwrap().contains(",28.7"));

    let mut fewer = base.clone();
    fewer["contrasts"].as_array_mut().unwrap().pop();
    let c = write(dir.path(), "c.json", &fewer.to_string());
    assert_eq!(code(&bnma(&["compare", arg(&a), arg(&c)])), 2);
}
