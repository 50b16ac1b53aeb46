use std::io::{Read, Write};

use super::{EhrRecord, EmulationError, Result};

pub const EHR_COLUMNS: [&str; 9] = [
    "patient_id",
    "age",
    "biomarker",
    "drugs",
    "line",
    "start",
    "second_line",
    "death",
    "last_followup",
];

fn csv_err(e: csv::Error) -> EmulationError {
    EmulationError::Csv(e.to_string())
}

/// Reads records in the EHR CSV schema; drugs are `;`-joined and absent
/// dates are empty fields.
pub fn read_ehr<R: Read>(source: R) -> Result<Vec<EhrRecord>> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(source);
    let header: Vec<String> = reader.headers().map_err(csv_err)?.iter().map(str::to_string).collect();
    if header != EHR_COLUMNS {
        return Err(EmulationError::Parse {
            line: 1,
            message: format!("expected header `{}`, found `{}`", EHR_COLUMNS.join(","), header.join(",")),
        });
    }
    let mut out = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let line = i + 2;
        let row = row.map_err(csv_err)?;
        let fail = |message: String| EmulationError::Parse { line, message };
        let field = |j: usize| row.get(j).unwrap_or("");
        let number = |j: usize| -> Result<f64> {
            field(j)
                .parse::<f64>()
                .map_err(|_| fail(format!("`{}` is not a number: `{}`", EHR_COLUMNS[j], field(j))))
        };
        let day = |j: usize| -> Result<i64> {
            field(j)
                .parse::<i64>()
                .map_err(|_| fail(format!("`{}` is not a day index: `{}`", EHR_COLUMNS[j], field(j))))
        };
        let optional_day = |j: usize| -> Result<Option<i64>> {
            if field(j).is_empty() {
                Ok(None)
            } else {
                day(j).map(Some)
            }
        };
        let biomarker = match field(2) {
            "0" => 0,
            "1" => 1,
            other => return Err(fail(format!("biomarker must be 0 or 1, got `{other}`"))),
        };
        let line_of_therapy = field(4)
            .parse::<u32>()
            .map_err(|_| fail(format!("line must be a positive integer, got `{}`", field(4))))?;
        let record = EhrRecord {
            patient_id: field(0).to_string(),
            age: number(1)?,
            biomarker,
            regimen: field(3)
                .split(';')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(str::to_string)
                .collect(),
            line_of_therapy,
            start_date: day(5)?,
            second_line_start: optional_day(6)?,
            death_date: optional_day(7)?,
            last_followup: day(8)?,
        };
        record.validate().map_err(|e| fail(e.to_string()))?;
        out.push(record);
    }
    Ok(out)
}

pub fn write_ehr<W: Write>(sink: W, records: &[EhrRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(EHR_COLUMNS).map_err(csv_err)?;
    let opt = |d: Option<i64>| d.map_or_else(String::new, |d| d.to_string());
    for r in records {
        w.write_record([
            r.patient_id.clone(),
            format!("{:?}", r.age),
            r.biomarker.to_string(),
            r.regimen.join(";"),
            r.line_of_therapy.to_string(),
            r.start_date.to_string(),
            opt(r.second_line_start),
            opt(r.death_date),
            r.last_followup.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| EmulationError::Csv(e.to_string()))
}
