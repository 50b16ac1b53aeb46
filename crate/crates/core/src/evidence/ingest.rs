//! CSV ingestion for aggregate and participant-level data, and the
//! `label -> class_tag` treatment mapping file.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use super::{
    hr_to_loghr, impute_missing_status, AdStudy, EvidenceError, IpdStudy, PublishedHr, Result,
    StatusCounts, SubjectRecord, Treatment, TreatmentId,
};

pub const AD_COLUMNS: [&str; 10] = [
    "study_id",
    "ref_treatment",
    "exp_treatment",
    "hr",
    "ci_low",
    "ci_high",
    "n_total",
    "n_pos",
    "n_neg",
    "n_unknown",
];

pub const IPD_COLUMNS: [&str; 6] = ["study_id", "subject_id", "treatment", "biomarker", "time", "event"];

/// Maps regimen labels to treatment classes. Classes are numbered in order of
/// first appearance, so the class on the first mapping line is the network
/// reference (id 1).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TreatmentMap {
    labels: BTreeMap<String, String>,
    classes: Vec<String>,
}

fn normalize_label(label: &str) -> String {
    let lower = label.trim().to_lowercase();
    let collapsed = lower.split_whitespace().collect::<Vec<_>>().join(" ");
    collapsed.replace(" +", "+").replace("+ ", "+")
}

impl TreatmentMap {
    pub fn parse(text: &str) -> Result<Self> {
        let mut map = TreatmentMap::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((label, tag)) = line.split_once("->") else {
                return Err(EvidenceError::Map {
                    line: i + 1,
                    message: format!("expected `label -> class_tag`, got `{line}`"),
                });
            };
            let (label, tag) = (label.trim(), tag.trim());
            if label.is_empty() || tag.is_empty() {
                return Err(EvidenceError::Map {
                    line: i + 1,
                    message: "empty label or class tag".into(),
                });
            }
            let key = normalize_label(label);
            if let Some(prev) = map.labels.get(&key) {
                if prev != tag {
                    return Err(EvidenceError::Map {
                        line: i + 1,
                        message: format!("label `{label}` mapped to both `{prev}` and `{tag}`"),
                    });
                }
            }
            map.labels.insert(key, tag.to_string());
            if !map.classes.iter().any(|c| c == tag) {
                map.classes.push(tag.to_string());
            }
        }
        Ok(map)
    }

    /// Builds a map whose labels are the class tags themselves.
    pub fn from_classes<S: AsRef<str>>(classes: &[S]) -> Self {
        let text: String = classes
            .iter()
            .map(|c| format!("{0} -> {0}\n", c.as_ref()))
            .collect();
        Self::parse(&text).expect("class tags form a valid map")
    }

    pub fn treatments(&self) -> Vec<Treatment> {
        self.classes
            .iter()
            .enumerate()
            .map(|(i, c)| Treatment {
                id: TreatmentId(i + 1),
                label: c.clone(),
                class_tag: c.clone(),
            })
            .collect()
    }

    pub fn class_of(&self, label: &str) -> Option<&str> {
        if let Some(tag) = self.labels.get(&normalize_label(label)) {
            return Some(tag);
        }
        self.classes.iter().find(|c| c.as_str() == label.trim()).map(String::as_str)
    }

    pub fn id_of(&self, label: &str) -> Result<TreatmentId> {
        let tag = self
            .class_of(label)
            .ok_or_else(|| EvidenceError::UnknownTreatment(label.trim().to_string()))?;
        let pos = self.classes.iter().position(|c| c == tag).expect("tag registered");
        Ok(TreatmentId(pos + 1))
    }
}

fn csv_reader<R: Read>(source: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(source)
}

fn row_err(line: u64, message: impl Into<String>) -> EvidenceError {
    EvidenceError::Row {
        line,
        message: message.into(),
    }
}

fn field<'a>(rec: &'a csv::StringRecord, idx: usize, name: &str, line: u64) -> Result<&'a str> {
    rec.get(idx)
        .ok_or_else(|| row_err(line, format!("missing column `{name}`")))
}

fn parse_f64(rec: &csv::StringRecord, idx: usize, name: &str, line: u64) -> Result<f64> {
    let raw = field(rec, idx, name, line)?;
    raw.parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| row_err(line, format!("malformed number in `{name}`: `{raw}`")))
}

fn parse_count(rec: &csv::StringRecord, idx: usize, name: &str, line: u64) -> Result<u32> {
    let raw = field(rec, idx, name, line)?;
    raw.parse::<u32>()
        .map_err(|_| row_err(line, format!("malformed count in `{name}`: `{raw}`")))
}

fn check_header(headers: &csv::StringRecord, expected: &[&str], optional: &[&str]) -> Result<()> {
    let got: Vec<&str> = headers.iter().collect();
    let ok = got.len() >= expected.len()
        && got.len() <= expected.len() + optional.len()
        && got[..expected.len()] == *expected
        && got[expected.len()..] == optional[..got.len() - expected.len()];
    if ok {
        Ok(())
    } else {
        Err(row_err(
            1,
            format!("header `{}` does not match `{}`", got.join(","), expected.join(",")),
        ))
    }
}

/// Reads aggregate-data rows, converts hazard ratios to the log scale, imputes
/// unknown biomarker status and orients each comparison canonically.
///
/// A trailing optional `ppos` column overrides the count-based proportion; when
/// it is present the count columns other than `n_total` may be left empty.
pub fn ingest_ad<R: Read>(source: R, map: &TreatmentMap) -> Result<Vec<AdStudy>> {
    let mut rdr = csv_reader(source);
    let headers = rdr
        .headers()
        .map_err(|e| EvidenceError::Csv(e.to_string()))?
        .clone();
    if headers.is_empty() || (headers.len() == 1 && headers[0].is_empty()) {
        return Err(EvidenceError::NoStudies);
    }
    check_header(&headers, &AD_COLUMNS, &["ppos"])?;
    let has_ppos = headers.len() == AD_COLUMNS.len() + 1;

    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| EvidenceError::Csv(e.to_string()))?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.iter().all(str::is_empty) {
            continue;
        }
        out.push(parse_ad_row(&rec, line, has_ppos, map)?);
    }
    if out.is_empty() {
        return Err(EvidenceError::NoStudies);
    }
    Ok(out)
}

fn parse_ad_row(
    rec: &csv::StringRecord,
    line: u64,
    has_ppos: bool,
    map: &TreatmentMap,
) -> Result<AdStudy> {
    let study_id = field(rec, 0, "study_id", line)?.to_string();
    let at_row = |e: EvidenceError| match e {
        EvidenceError::Row { .. } | EvidenceError::UnknownTreatment(_) => e,
        other => row_err(line, format!("study `{study_id}`: {other}")),
    };
    let k = map.id_of(field(rec, 1, "ref_treatment", line)?).map_err(at_row)?;
    let l = map.id_of(field(rec, 2, "exp_treatment", line)?).map_err(at_row)?;
    if k == l {
        return Err(row_err(
            line,
            format!("study `{study_id}`: both arms map to the same treatment class"),
        ));
    }
    let hr = parse_f64(rec, 3, "hr", line)?;
    let ci_low = parse_f64(rec, 4, "ci_low", line)?;
    let ci_high = parse_f64(rec, 5, "ci_high", line)?;
    let (y, sigma) = hr_to_loghr(hr, ci_low, ci_high, 0.95).map_err(at_row)?;
    let n_total = parse_count(rec, 6, "n_total", line)?;

    let ppos_override = if has_ppos {
        match rec.get(10).unwrap_or("") {
            "" => None,
            _ => Some(parse_f64(rec, 10, "ppos", line)?),
        }
    } else {
        None
    };
    let counts_blank = (7..10).all(|i| rec.get(i).unwrap_or("").is_empty());
    let (ppos, counts) = match (ppos_override, counts_blank) {
        (Some(p), true) => (p, None),
        _ => {
            let n_pos = parse_count(rec, 7, "n_pos", line)?;
            let n_neg = parse_count(rec, 8, "n_neg", line)?;
            let n_unknown = parse_count(rec, 9, "n_unknown", line)?;
            if n_pos + n_neg + n_unknown != n_total {
                return Err(row_err(
                    line,
                    format!(
                        "study `{study_id}`: n_pos + n_neg + n_unknown = {} but n_total = {n_total}",
                        n_pos + n_neg + n_unknown
                    ),
                ));
            }
            let imp = impute_missing_status(n_pos, n_neg, n_unknown, n_total).map_err(at_row)?;
            let counts = StatusCounts {
                n_total,
                n_pos,
                n_neg,
                n_unknown,
            };
            (ppos_override.unwrap_or(imp.prop_pos), Some(counts))
        }
    };
    if !(0.0..=1.0).contains(&ppos) {
        return Err(row_err(line, format!("study `{study_id}`: ppos {ppos} outside [0, 1]")));
    }
    let study = AdStudy {
        study_id,
        treatment_k: k,
        treatment_l: l,
        y,
        sigma,
        ppos,
        published: Some(PublishedHr {
            hr,
            ci_low,
            ci_high,
        }),
        counts,
    };
    Ok(study.canonical())
}

/// Reads participant-level rows grouped by `study_id` (first-appearance
/// order). Each study must involve exactly two treatment classes; arm 0 is
/// the class with the lower id.
pub fn ingest_ipd<R: Read>(source: R, map: &TreatmentMap) -> Result<Vec<IpdStudy>> {
    let mut rdr = csv_reader(source);
    let headers = rdr
        .headers()
        .map_err(|e| EvidenceError::Csv(e.to_string()))?
        .clone();
    check_header(&headers, &IPD_COLUMNS, &[])?;

    struct Pending {
        id: String,
        rows: Vec<(TreatmentId, SubjectRecord, u64)>,
    }
    let mut studies: Vec<Pending> = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| EvidenceError::Csv(e.to_string()))?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.iter().all(str::is_empty) {
            continue;
        }
        let study_id = field(&rec, 0, "study_id", line)?.to_string();
        let subject_id = field(&rec, 1, "subject_id", line)?.to_string();
        let treatment = map.id_of(field(&rec, 2, "treatment", line)?)?;
        let biomarker = match field(&rec, 3, "biomarker", line)? {
            "0" => 0,
            "1" => 1,
            other => return Err(row_err(line, format!("biomarker must be 0 or 1, got `{other}`"))),
        };
        let time = parse_f64(&rec, 4, "time", line)?;
        if time <= 0.0 {
            return Err(row_err(line, format!("time must be positive, got {time}")));
        }
        let event = match field(&rec, 5, "event", line)? {
            "0" => false,
            "1" => true,
            other => return Err(row_err(line, format!("event must be 0 or 1, got `{other}`"))),
        };
        let subject = SubjectRecord {
            subject_id,
            time,
            event,
            biomarker,
            arm: 0,
        };
        match studies.iter_mut().find(|p| p.id == study_id) {
            Some(p) => p.rows.push((treatment, subject, line)),
            None => studies.push(Pending {
                id: study_id,
                rows: vec![(treatment, subject, line)],
            }),
        }
    }
    if studies.is_empty() {
        return Err(EvidenceError::NoStudies);
    }

    studies
        .into_iter()
        .map(|p| {
            let mut ids: Vec<TreatmentId> = p.rows.iter().map(|r| r.0).collect();
            ids.sort();
            ids.dedup();
            if ids.len() != 2 {
                return Err(EvidenceError::Study {
                    study: p.id,
                    message: format!("expected exactly two treatments, found {}", ids.len()),
                });
            }
            let (k, l) = (ids[0], ids[1]);
            let subjects = p
                .rows
                .into_iter()
                .map(|(t, mut s, _)| {
                    s.arm = u8::from(t == l);
                    s
                })
                .collect();
            IpdStudy::new(p.id, k, l, subjects)
        })
        .collect()
}

/// Writes studies in the participant-level CSV schema, labelling each arm with
/// its treatment class tag.
pub fn write_ipd<W: Write>(sink: W, studies: &[IpdStudy], treatments: &[Treatment]) -> Result<()> {
    let tag = |id: TreatmentId| -> Result<&str> {
        treatments
            .iter()
            .find(|t| t.id == id)
            .map(|t| t.class_tag.as_str())
            .ok_or_else(|| EvidenceError::UnknownTreatment(id.to_string()))
    };
    let mut w = csv::Writer::from_writer(sink);
    let csv_err = |e: csv::Error| EvidenceError::Csv(e.to_string());
    w.write_record(IPD_COLUMNS).map_err(csv_err)?;
    for study in studies {
        let (k, l) = (tag(study.treatment_k)?, tag(study.treatment_l)?);
        for s in &study.subjects {
            let time = format!("{}", s.time);
            w.write_record([
                study.study_id.as_str(),
                s.subject_id.as_str(),
                if s.arm == 1 { l } else { k },
                if s.biomarker == 1 { "1" } else { "0" },
                time.as_str(),
                if s.event { "1" } else { "0" },
            ])
            .map_err(csv_err)?;
        }
    }
    w.flush().map_err(|e| EvidenceError::Csv(e.to_string()))
}
