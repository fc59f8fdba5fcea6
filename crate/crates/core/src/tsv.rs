//! Shared helpers for the tab-separated text formats.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{HuseError, Result};

/// Reads a UTF-8 file and yields `(1-based line number, line)` for every
/// non-empty line.
pub(crate) fn read_lines(path: &Path) -> Result<Vec<(usize, String)>> {
    let text = fs::read_to_string(path).map_err(|e| HuseError::io(path, e))?;
    Ok(text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| (i + 1, l.to_string()))
        .collect())
}

pub(crate) fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| HuseError::io(path, e))
}

/// Parses `v1,v2,...`. Fails on empty fields and non-finite values.
pub(crate) fn parse_floats(field: &str, path: &Path, line: usize) -> Result<Vec<f64>> {
    field
        .split(',')
        .map(|tok| {
            let tok = tok.trim();
            let v: f64 = tok
                .parse()
                .map_err(|_| HuseError::parse(path, line, format!("malformed float {tok:?}")))?;
            if !v.is_finite() {
                return Err(HuseError::parse(
                    path,
                    line,
                    format!("non-finite value {tok:?}"),
                ));
            }
            Ok(v)
        })
        .collect()
}

/// Comma-joined shortest round-trip representation of each value.
pub(crate) fn format_floats(values: &[f64]) -> String {
    let mut s = String::with_capacity(values.len() * 20);
    for (i, v) in values.iter().enumerate() {
        if i > 0 {
            s.push(',');
        }
        write!(s, "{v}").unwrap();
    }
    s
}
