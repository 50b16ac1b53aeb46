//! Kaplan-Meier estimation and reconstruction of participant records from a
//! digitized survival curve plus its numbers-at-risk table.
//!
//! Reconstruction works interval by interval between risk-table times. Within
//! an interval, `c` censorings are spaced evenly (constant censoring rate) and
//! events are placed at the curve's drop times, sized so the product-limit
//! estimate of the generated records follows the curve. The censoring count
//! is adjusted until the number still at risk at the next risk-table time
//! equals the published count: at most 50 fixed-point updates, then a bounded
//! scan over all feasible counts. Counts are rounded half-up.
//!
//! After the last risk-table time the censoring count is either chosen to
//! match a reported total number of events or, without one, chosen so the
//! reconstructed curve stays closest to the digitized one (ties resolved
//! toward the average censoring rate of the earlier intervals). Whoever
//! remains is censored at the end of follow-up.

use std::io::{Read, Write};

use log::warn;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evidence::SubjectRecord;

/// Largest survival rise treated as digitization noise and clipped.
pub const RISE_TOLERANCE: f64 = 0.005;
/// Fixed-point updates of the censoring count before falling back to a scan.
pub const MAX_ADJUSTMENTS: usize = 50;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KmError {
    #[error("curve is empty")]
    EmptyCurve,
    #[error("curve point {index}: {message}")]
    Curve { index: usize, message: String },
    #[error("risk table entry {index}: {message}")]
    RiskTable { index: usize, message: String },
    #[error("curve and risk table do not overlap: {0}")]
    NoOverlap(String),
    #[error("line {line}: {message}")]
    Parse { line: u64, message: String },
    #[error("csv: {0}")]
    Csv(String),
}

pub type Result<T, E = KmError> = std::result::Result<T, E>;

/// Survival step function read off a published Kaplan-Meier plot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DigitizedCurve {
    points: Vec<(f64, f64)>,
    pub arm_label: String,
}

impl DigitizedCurve {
    /// Validates and normalizes raw coordinates: sorts nothing, but merges
    /// repeated times (keeping the lower value, i.e. the foot of a vertical
    /// drop), clips small rises and inserts `(0, 1)` when absent.
    pub fn new(points: Vec<(f64, f64)>, arm_label: impl Into<String>) -> Result<Self> {
        if points.is_empty() {
            return Err(KmError::EmptyCurve);
        }
        let mut out: Vec<(f64, f64)> = Vec::with_capacity(points.len() + 1);
        for (index, &(t, s)) in points.iter().enumerate() {
            let bad = |message: String| KmError::Curve { index, message };
            if !(t >= 0.0 && t.is_finite()) {
                return Err(bad(format!("time {t} must be finite and non-negative")));
            }
            if !(0.0..=1.0 + RISE_TOLERANCE).contains(&s) {
                return Err(bad(format!("survival {s} outside [0, 1]")));
            }
            let mut s = s.min(1.0);
            match out.last_mut() {
                Some(last) if t < last.0 => {
                    return Err(bad(format!("time {t} precedes {}", last.0)));
                }
                Some(last) if t == last.0 => {
                    last.1 = last.1.min(s);
                    continue;
                }
                Some(last) if s > last.1 => {
                    if s - last.1 > RISE_TOLERANCE {
                        return Err(bad(format!("survival rises from {} to {s}", last.1)));
                    }
                    warn!("curve point {index}: survival rise {:.4} clipped", s - last.1);
                    s = last.1;
                }
                _ => {}
            }
            out.push((t, s));
        }
        if out[0].0 > 0.0 {
            out.insert(0, (0.0, 1.0));
        } else if out[0].1 < 1.0 {
            if 1.0 - out[0].1 > RISE_TOLERANCE {
                return Err(KmError::Curve {
                    index: 0,
                    message: format!("survival at time 0 is {}, expected 1", out[0].1),
                });
            }
            out[0].1 = 1.0;
        }
        Ok(Self {
            points: out,
            arm_label: arm_label.into(),
        })
    }

    pub fn points(&self) -> &[(f64, f64)] {
        &self.points
    }

    pub fn max_time(&self) -> f64 {
        self.points.last().map_or(0.0, |p| p.0)
    }

    /// Step-function value strictly before `t`.
    fn value_before(&self, t: f64) -> f64 {
        self.points
            .iter()
            .take_while(|p| p.0 < t)
            .last()
            .map_or(1.0, |p| p.1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskTable {
    entries: Vec<(f64, u32)>,
}

impl RiskTable {
    pub fn new(entries: Vec<(f64, u32)>) -> Result<Self> {
        let Some(&(t0, n0)) = entries.first() else {
            return Err(KmError::RiskTable {
                index: 0,
                message: "table is empty".into(),
            });
        };
        if t0 != 0.0 {
            return Err(KmError::RiskTable {
                index: 0,
                message: format!("first time must be 0, got {t0}"),
            });
        }
        if n0 == 0 {
            return Err(KmError::RiskTable {
                index: 0,
                message: "initial number at risk must be positive".into(),
            });
        }
        for (index, w) in entries.windows(2).enumerate() {
            if !(w[1].0 > w[0].0 && w[1].0.is_finite()) {
                return Err(KmError::RiskTable {
                    index: index + 1,
                    message: format!("time {} does not increase", w[1].0),
                });
            }
            if w[1].1 > w[0].1 {
                return Err(KmError::RiskTable {
                    index: index + 1,
                    message: format!("number at risk rises from {} to {}", w[0].1, w[1].1),
                });
            }
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[(f64, u32)] {
        &self.entries
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntervalSummary {
    pub start: f64,
    pub end: f64,
    pub n_at_risk: u32,
    pub events: u32,
    pub censored: u32,
    /// Censoring-count updates used (the scan fallback counts as one more).
    pub adjustments: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionReport {
    pub records: Vec<SubjectRecord>,
    pub max_abs_survival_deviation: f64,
    pub intervals: Vec<IntervalSummary>,
    /// Events dropped because the curve fell faster than the risk table allows.
    pub events_trimmed: u32,
}

impl ReconstructionReport {
    /// Assigns study-scoped ids `"<study>_<arm_label>_<k>"` and arm/biomarker codes.
    pub fn labelled_records(&self, study: &str, arm_label: &str, arm: u8, biomarker: u8) -> Vec<SubjectRecord> {
        self.records
            .iter()
            .enumerate()
            .map(|(k, r)| SubjectRecord {
                subject_id: format!("{study}_{arm_label}_{}", k + 1),
                time: r.time,
                event: r.event,
                biomarker,
                arm,
            })
            .collect()
    }
}

#[inline]
fn round_half_up(x: f64) -> i64 {
    (x + 0.5).floor() as i64
}

/// Result of laying out one interval for a given censoring count.
struct Layout {
    events: Vec<(f64, u32)>,
    censor_times: Vec<f64>,
    at_risk_end: i64,
    km_end: f64,
}

fn censor_times(start: f64, end: f64, count: u32) -> Vec<f64> {
    let step = (end - start) / f64::from(count + 1);
    (1..=count).map(|k| start + step * f64::from(k)).collect()
}

/// Places `censored` evenly spaced censorings in `[start, end)` and sizes the
/// events at each drop point.
fn layout(drops: &[(f64, f64)], start: f64, end: f64, n_start: u32, censored: u32, km_start: f64) -> Layout {
    let planned = censor_times(start, end, censored);
    let mut applied = Vec::with_capacity(planned.len());
    let mut km = km_start;
    let mut at_risk = i64::from(n_start);
    let mut ci = 0;
    let mut events = Vec::with_capacity(drops.len());
    for &(t, s) in drops {
        while ci < planned.len() && planned[ci] < t {
            if at_risk > 0 {
                at_risk -= 1;
                applied.push(planned[ci]);
            }
            ci += 1;
        }
        if at_risk <= 0 || km <= 0.0 {
            continue;
        }
        let d = round_half_up(at_risk as f64 * (1.0 - s / km)).clamp(0, at_risk);
        if d > 0 {
            km *= 1.0 - d as f64 / at_risk as f64;
            at_risk -= d;
            events.push((t, d as u32));
        }
    }
    for &t in &planned[ci..] {
        if at_risk > 0 {
            at_risk -= 1;
            applied.push(t);
        }
    }
    Layout {
        events,
        censor_times: applied,
        at_risk_end: at_risk,
        km_end: km,
    }
}

/// Removes `excess` events, latest drop first.
fn trim_events(events: &mut Vec<(f64, u32)>, mut excess: u32) {
    while excess > 0 {
        let Some(last) = events.last_mut() else { break };
        let take = last.1.min(excess);
        last.1 -= take;
        excess -= take;
        if last.1 == 0 {
            events.pop();
        }
    }
}

fn km_after(events: &[(f64, u32)], censor_times: &[f64], n_start: u32, km_start: f64) -> f64 {
    let mut km = km_start;
    let mut at_risk = f64::from(n_start);
    let mut ci = 0;
    for &(t, d) in events {
        while ci < censor_times.len() && censor_times[ci] < t {
            at_risk -= 1.0;
            ci += 1;
        }
        if at_risk > 0.0 {
            km *= 1.0 - f64::from(d) / at_risk;
            at_risk -= f64::from(d);
        }
    }
    km
}

/// Rebuilds participant-level times and event flags from a digitized curve
/// and its risk table.
pub fn reconstruct(curve: &DigitizedCurve, risk: &RiskTable, total_events: Option<u32>) -> Result<ReconstructionReport> {
    let table = risk.entries();
    if curve.max_time() <= 0.0 {
        return Err(KmError::NoOverlap("curve has no points after time 0".into()));
    }
    let end_of_followup = curve.max_time().max(table[table.len() - 1].0);
    let drop_points: Vec<(f64, f64)> = curve.points()[1..].to_vec();

    let mut records: Vec<(f64, bool)> = Vec::with_capacity(table[0].1 as usize);
    let mut intervals = Vec::with_capacity(table.len());
    let mut km = 1.0;
    let mut events_so_far: u32 = 0;
    let mut censored_before_last: u32 = 0;
    let mut trimmed = 0;

    for (i, &(start, n_start)) in table.iter().enumerate() {
        let last = i + 1 == table.len();
        let end = if last { end_of_followup } else { table[i + 1].0 };
        let drops: Vec<(f64, f64)> = drop_points
            .iter()
            .copied()
            .filter(|&(t, _)| t >= start && (t < end || (last && t <= end)))
            .collect();

        let (mut lay, _, adjustments) = if last {
            let c = last_interval_censoring(&drops, start, end, n_start, km, total_events, events_so_far, censored_before_last, table);
            (layout(&drops, start, end, n_start, c, km), c, 0)
        } else {
            let target = table[i + 1].1;
            adjust_interval(curve, &drops, start, end, n_start, target, km)
        };

        if !last {
            let target = i64::from(table[i + 1].1);
            if lay.at_risk_end < target {
                let excess = (target - lay.at_risk_end) as u32;
                trim_events(&mut lay.events, excess);
                trimmed += excess;
                lay.km_end = km_after(&lay.events, &lay.censor_times, n_start, km);
                lay.at_risk_end = target;
            }
            censored_before_last += lay.censor_times.len() as u32;
        }

        let interval_events: u32 = lay.events.iter().map(|e| e.1).sum();
        for &(t, d) in &lay.events {
            records.extend(std::iter::repeat_n((t, true), d as usize));
        }
        records.extend(lay.censor_times.iter().map(|&t| (t, false)));
        let mut interval_censored = lay.censor_times.len() as u32;
        if last && lay.at_risk_end > 0 {
            records.extend(std::iter::repeat_n((end, false), lay.at_risk_end as usize));
            interval_censored += lay.at_risk_end as u32;
        }
        events_so_far += interval_events;
        km = lay.km_end;
        intervals.push(IntervalSummary {
            start,
            end,
            n_at_risk: n_start,
            events: interval_events,
            censored: interval_censored,
            adjustments,
        });
    }

    records.sort_by(|a, b| a.0.total_cmp(&b.0).then(b.1.cmp(&a.1)));
    let records: Vec<SubjectRecord> = records
        .into_iter()
        .enumerate()
        .map(|(k, (time, event))| SubjectRecord {
            subject_id: format!("{}_{}", curve.arm_label, k + 1),
            time: if time > 0.0 { time } else { f64::MIN_POSITIVE },
            event,
            biomarker: 0,
            arm: 0,
        })
        .collect();
    let deviation = roundtrip_error(curve, &records);
    Ok(ReconstructionReport {
        records,
        max_abs_survival_deviation: deviation,
        intervals,
        events_trimmed: trimmed,
    })
}

fn adjust_interval(
    curve: &DigitizedCurve,
    drops: &[(f64, f64)],
    start: f64,
    end: f64,
    n_start: u32,
    n_end: u32,
    km: f64,
) -> (Layout, u32, usize) {
    let max_c = n_start - n_end;
    let ratio = curve.value_before(end) / curve.value_before(start).max(f64::MIN_POSITIVE);
    let guess = round_half_up(f64::from(n_start) * ratio - f64::from(n_end));
    let mut c = guess.clamp(0, i64::from(max_c)) as u32;
    let mut seen = Vec::new();
    for iteration in 1..=MAX_ADJUSTMENTS {
        let lay = layout(drops, start, end, n_start, c, km);
        let diff = lay.at_risk_end - i64::from(n_end);
        if diff == 0 || (diff < 0 && c == 0) {
            return (lay, c, iteration);
        }
        seen.push(c);
        let next = (i64::from(c) + diff).clamp(0, i64::from(max_c)) as u32;
        if seen.contains(&next) {
            break;
        }
        c = next;
    }
    // Oscillation or exhaustion: the smallest count that leaves no more than
    // the published number at risk. One always exists because censoring
    // everyone who leaves does.
    let c = (0..=max_c)
        .find(|&c| layout(drops, start, end, n_start, c, km).at_risk_end <= i64::from(n_end))
        .unwrap_or(max_c);
    (layout(drops, start, end, n_start, c, km), c, MAX_ADJUSTMENTS + 1)
}

#[allow(clippy::too_many_arguments)]
fn last_interval_censoring(
    drops: &[(f64, f64)],
    start: f64,
    end: f64,
    n_start: u32,
    km: f64,
    total_events: Option<u32>,
    events_so_far: u32,
    censored_before: u32,
    table: &[(f64, u32)],
) -> u32 {
    match total_events {
        Some(total) => {
            let wanted = i64::from(total.saturating_sub(events_so_far));
            (0..=n_start)
                .min_by_key(|&c| {
                    let got: u32 = layout(drops, start, end, n_start, c, km).events.iter().map(|e| e.1).sum();
                    ((i64::from(got) - wanted).abs(), c)
                })
                .unwrap_or(0)
        }
        None => {
            // Without a reported total, pick the count whose product-limit
            // curve stays closest to the digitized one over this interval;
            // ties go to the count implied by the earlier censoring rate.
            let prior_rate = if table.len() > 1 {
                f64::from(censored_before) / (start - table[0].0)
            } else {
                0.0
            };
            let rate_guess = (round_half_up(prior_rate * (end - start)).max(0) as u32).min(n_start);
            (0..=n_start)
                .map(|c| {
                    let lay = layout(drops, start, end, n_start, c, km);
                    (interval_deviation(drops, &lay, n_start, km), c.abs_diff(rate_guess), c)
                })
                .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
                .map_or(0, |best| best.2)
        }
    }
}

/// Sup distance between the drop values and the product-limit curve implied by
/// a layout, evaluated at the drop times.
fn interval_deviation(drops: &[(f64, f64)], lay: &Layout, n_start: u32, km_start: f64) -> f64 {
    let mut km = km_start;
    let mut at_risk = f64::from(n_start);
    let mut ci = 0;
    let mut ei = 0;
    let mut worst: f64 = 0.0;
    for &(t, s) in drops {
        while ci < lay.censor_times.len() && lay.censor_times[ci] < t {
            at_risk -= 1.0;
            ci += 1;
        }
        if ei < lay.events.len() && lay.events[ei].0 == t {
            let d = f64::from(lay.events[ei].1);
            km *= 1.0 - d / at_risk;
            at_risk -= d;
            ei += 1;
        }
        worst = worst.max((s - km).abs());
    }
    worst
}

/// Product-limit estimate at each distinct observed time.
pub fn km_estimate(records: &[SubjectRecord]) -> Vec<(f64, f64)> {
    let mut sorted: Vec<(f64, bool)> = records.iter().map(|r| (r.time, r.event)).collect();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut at_risk = sorted.len() as f64;
    let mut s = 1.0;
    let mut out = Vec::new();
    let mut i = 0;
    while i < sorted.len() {
        let t = sorted[i].0;
        let mut deaths = 0.0;
        let mut leaving = 0.0;
        while i < sorted.len() && sorted[i].0 == t {
            if sorted[i].1 {
                deaths += 1.0;
            }
            leaving += 1.0;
            i += 1;
        }
        if deaths > 0.0 {
            s *= 1.0 - deaths / at_risk;
        }
        at_risk -= leaving;
        out.push((t, s));
    }
    out
}

fn step_value(steps: &[(f64, f64)], t: f64) -> f64 {
    let idx = steps.partition_point(|p| p.0 <= t);
    if idx == 0 {
        1.0
    } else {
        steps[idx - 1].1
    }
}

/// Largest absolute gap between the curve and the product-limit estimate of
/// `records`, checked at every curve point (step functions constant on
/// `[t_j, t_{j+1})`).
pub fn roundtrip_error(curve: &DigitizedCurve, records: &[SubjectRecord]) -> f64 {
    let steps = km_estimate(records);
    curve
        .points()
        .iter()
        .map(|&(t, s)| (s - step_value(&steps, t)).abs())
        .fold(0.0, f64::max)
}

/// Number of records with time at or after `t`.
pub fn number_at_risk(records: &[SubjectRecord], t: f64) -> u32 {
    records.iter().filter(|r| r.time >= t).count() as u32
}

pub const CURVE_COLUMNS: [&str; 2] = ["time", "survival"];
pub const RISK_COLUMNS: [&str; 2] = ["time", "n_at_risk"];

fn read_pairs<R: Read>(source: R, columns: [&str; 2]) -> Result<Vec<(u64, String, String)>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(source);
    let headers = rdr.headers().map_err(|e| KmError::Csv(e.to_string()))?.clone();
    if headers.iter().collect::<Vec<_>>() != columns {
        return Err(KmError::Parse {
            line: 1,
            message: format!("expected header `{}`", columns.join(",")),
        });
    }
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| KmError::Csv(e.to_string()))?;
        if rec.iter().all(str::is_empty) {
            continue;
        }
        let line = rec.position().map_or(0, |p| p.line());
        rows.push((line, rec[0].to_string(), rec[1].to_string()));
    }
    Ok(rows)
}

fn parse<T: std::str::FromStr>(line: u64, column: &str, text: &str) -> Result<T> {
    text.parse().map_err(|_| KmError::Parse {
        line,
        message: format!("{column}: cannot parse `{text}`"),
    })
}

/// Reads a `time,survival` file.
pub fn read_curve<R: Read>(source: R, arm_label: &str) -> Result<DigitizedCurve> {
    let points = read_pairs(source, CURVE_COLUMNS)?
        .into_iter()
        .map(|(line, t, s)| Ok((parse(line, "time", &t)?, parse(line, "survival", &s)?)))
        .collect::<Result<Vec<_>>>()?;
    DigitizedCurve::new(points, arm_label)
}

/// Reads a `time,n_at_risk` file.
pub fn read_risk_table<R: Read>(source: R) -> Result<RiskTable> {
    let entries = read_pairs(source, RISK_COLUMNS)?
        .into_iter()
        .map(|(line, t, n)| Ok((parse(line, "time", &t)?, parse(line, "n_at_risk", &n)?)))
        .collect::<Result<Vec<_>>>()?;
    RiskTable::new(entries)
}

pub fn write_curve<W: Write>(sink: W, curve: &DigitizedCurve) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    let err = |e: csv::Error| KmError::Csv(e.to_string());
    w.write_record(CURVE_COLUMNS).map_err(err)?;
    for (t, s) in curve.points() {
        w.write_record([t.to_string(), s.to_string()]).map_err(err)?;
    }
    w.flush().map_err(|e| KmError::Csv(e.to_string()))
}

pub fn write_risk_table<W: Write>(sink: W, risk: &RiskTable) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    let err = |e: csv::Error| KmError::Csv(e.to_string());
    w.write_record(RISK_COLUMNS).map_err(err)?;
    for (t, n) in risk.entries() {
        w.write_record([t.to_string(), n.to_string()]).map_err(err)?;
    }
    w.flush().map_err(|e| KmError::Csv(e.to_string()))
}
