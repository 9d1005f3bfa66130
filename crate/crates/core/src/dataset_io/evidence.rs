//! Tabular SCM data: one column per variable, one row per subject.

use std::path::Path;

use crate::error::{Error, Result};
use crate::scm::Evidence;

pub fn evidence_csv(rows: &[Evidence], columns: &[&str]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(columns)?;
    for (i, r) in rows.iter().enumerate() {
        let fields = columns
            .iter()
            .map(|c| {
                r.get(c)
                    .map(|v| v.to_string())
                    .ok_or_else(|| Error::IncompleteEvidence(vec![format!("{c} (row {i})")]))
            })
            .collect::<Result<Vec<_>>>()?;
        w.write_record(fields)?;
    }
    let body = w.into_inner().map_err(|e| Error::InvalidConfig(e.to_string()))?;
    Ok(String::from_utf8(body).expect("csv output is utf-8"))
}

pub fn parse_evidence_csv(text: &str) -> Result<Vec<Evidence>> {
    let mut reader = csv::ReaderBuilder::new().flexible(true).from_reader(text.as_bytes());
    let header: Vec<String> = reader.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let mut rows = Vec::new();
    for rec in reader.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != header.len() {
            return Err(Error::ManifestRow {
                line,
                reason: format!("expected {} fields, found {}", header.len(), rec.len()),
            });
        }
        let mut ev = Evidence::default();
        for (name, field) in header.iter().zip(rec.iter()) {
            let v: f64 = field.trim().parse().map_err(|_| Error::ManifestRow {
                line,
                reason: format!("{name} `{field}` is not a number"),
            })?;
            ev.values.insert(name.clone(), v);
        }
        rows.push(ev);
    }
    Ok(rows)
}

pub fn read_evidence_csv(path: &Path) -> Result<Vec<Evidence>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_evidence_csv(&text)
}

pub fn write_evidence_csv(path: &Path, rows: &[Evidence], columns: &[&str]) -> Result<()> {
    super::write_atomic(path, evidence_csv(rows, columns)?.as_bytes())
}
