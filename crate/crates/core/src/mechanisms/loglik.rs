use std::fmt::Write as _;

use serde::Serialize;

use super::{Mechanism, MechanismSet};
use crate::error::{Error, Result};
use crate::scm::{Evidence, StructuralMechanism};

// display order and labels for the standard variables
const LABELS: [(&str, &str); 4] = [
    ("brain", "Brain volume"),
    ("ventricle", "Ventricle volume"),
    ("gm", "GM volume"),
    ("mmse", "Score"),
];

/// Average per-variable log-likelihood, one row per method.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LoglikTable {
    pub variables: Vec<String>,
    pub rows: Vec<(String, Vec<f64>)>,
}

impl LoglikTable {
    pub fn column_labels(&self) -> Vec<String> {
        self.variables
            .iter()
            .map(|v| {
                LABELS
                    .iter()
                    .find(|(k, _)| k == v)
                    .map_or_else(|| v.clone(), |(_, l)| l.to_string())
            })
            .collect()
    }

    pub fn value(&self, method: &str, variable: &str) -> Option<f64> {
        let j = self.variables.iter().position(|v| v == variable)?;
        self.rows.iter().find(|(m, _)| m == method).map(|(_, r)| r[j])
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("method");
        for l in self.column_labels() {
            out.push(',');
            out.push_str(&l);
        }
        out.push('\n');
        for (m, r) in &self.rows {
            out.push_str(m);
            for v in r {
                let _ = write!(out, ",{v:.4}");
            }
            out.push('\n');
        }
        out
    }

    pub fn to_pretty(&self) -> String {
        let labels = self.column_labels();
        let first = self.rows.iter().map(|(m, _)| m.len()).max().unwrap_or(0).max(6);
        let mut out = format!("{:first$}", "Method");
        for l in &labels {
            let _ = write!(out, "  {l:>16}");
        }
        out.push('\n');
        for (m, r) in &self.rows {
            let _ = write!(out, "{m:first$}");
            for v in r {
                let _ = write!(out, "  {:>16}", format!("{v:.2}"));
            }
            out.push('\n');
        }
        out
    }
}

fn ordered_variables(set: &MechanismSet) -> Vec<String> {
    let mut vars: Vec<String> = LABELS
        .iter()
        .filter(|(k, _)| set.get(k).is_some())
        .map(|(k, _)| k.to_string())
        .collect();
    for t in set.targets() {
        if !vars.iter().any(|v| v == t) {
            vars.push(t.to_string());
        }
    }
    vars
}

fn average(m: &Mechanism, rows: &[Evidence]) -> Result<f64> {
    let mut total = 0.0;
    for (i, r) in rows.iter().enumerate() {
        let pa = m
            .parent_names()
            .iter()
            .map(|p| r.get(p).ok_or_else(|| Error::IncompleteEvidence(vec![format!("{p} (row {i})")])))
            .collect::<Result<Vec<f64>>>()?;
        let v = r
            .get(m.target())
            .ok_or_else(|| Error::IncompleteEvidence(vec![format!("{} (row {i})", m.target())]))?;
        total += m.log_likelihood(&pa, v)?;
    }
    Ok(total / rows.len() as f64)
}

/// Table of average log-likelihoods of `rows` under each named mechanism set.
pub fn eval_loglik_table(sets: &[(&str, &MechanismSet)], rows: &[Evidence]) -> Result<LoglikTable> {
    let Some((_, first)) = sets.first() else {
        return Err(Error::VariableMismatch("no mechanism sets given".into()));
    };
    if rows.is_empty() {
        return Err(Error::IncompleteEvidence(vec!["dataset is empty".into()]));
    }
    let variables = ordered_variables(first);
    let mut table = LoglikTable {
        variables: variables.clone(),
        rows: Vec::new(),
    };
    for (name, set) in sets {
        let mut theirs: Vec<&str> = set.targets().collect();
        let mut ours: Vec<&str> = variables.iter().map(String::as_str).collect();
        theirs.sort_unstable();
        ours.sort_unstable();
        if theirs != ours {
            return Err(Error::VariableMismatch(format!(
                "`{name}` covers [{}], expected [{}]",
                theirs.join(", "),
                ours.join(", ")
            )));
        }
        let values = variables
            .iter()
            .map(|v| average(set.get(v).expect("checked above"), rows))
            .collect::<Result<Vec<f64>>>()?;
        table.rows.push((name.to_string(), values));
    }
    Ok(table)
}
