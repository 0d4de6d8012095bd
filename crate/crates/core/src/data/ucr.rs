//! Reader for the UCR archive text layout: one series per line, the class
//! label first, fields separated by tabs or commas.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use super::TimeSeriesBatch;
use crate::error::{Error, Result};

pub fn load_ucr_tsv(path: impl AsRef<Path>) -> Result<TimeSeriesBatch> {
    parse_ucr(&fs::read_to_string(path)?)
}

/// Parses UCR text. Labels are remapped to `0..C` in ascending order of the
/// original label values.
pub fn parse_ucr(text: &str) -> Result<TimeSeriesBatch> {
    let mut raw_labels = Vec::new();
    let mut values = Vec::new();
    let mut width = None;

    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let lineno = lineno + 1;
        let mut fields = line.split(['\t', ',']).map(str::trim);
        let label_tok = fields.next().unwrap_or_default();
        let label = parse_label(label_tok)
            .ok_or_else(|| Error::Format(format!("line {lineno}: bad label {label_tok:?}")))?;
        let before = values.len();
        for tok in fields {
            let v: f32 = tok
                .parse()
                .map_err(|_| Error::Format(format!("line {lineno}: cannot parse {tok:?}")))?;
            if !v.is_finite() {
                return Err(Error::Format(format!("line {lineno}: non-finite value {tok:?}")));
            }
            values.push(v);
        }
        let len = values.len() - before;
        match width {
            None if len == 0 => return Err(Error::Format(format!("line {lineno}: no values"))),
            None => width = Some(len),
            Some(w) if w != len => {
                return Err(Error::Format(format!(
                    "line {lineno}: {len} values, expected {w}"
                )))
            }
            Some(_) => {}
        }
        raw_labels.push(label);
    }

    let Some(t) = width else {
        return Err(Error::Format("no series found".into()));
    };
    let classes: Vec<i64> = raw_labels.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    let labels = raw_labels
        .iter()
        .map(|l| classes.binary_search(l).unwrap())
        .collect();
    TimeSeriesBatch::new(values, raw_labels.len(), t, 1, Some(labels))
}

// UCR labels are integers, occasionally written in float notation.
fn parse_label(tok: &str) -> Option<i64> {
    if let Ok(v) = tok.parse::<i64>() {
        return Some(v);
    }
    let v: f64 = tok.parse().ok()?;
    (v.is_finite() && v.fract() == 0.0).then_some(v as i64)
}
