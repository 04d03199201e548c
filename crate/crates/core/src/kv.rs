//! Flat `key = value` configuration text.
//!
//! One pair per line; blank lines and lines starting with `#` are ignored.

use std::fmt::Display;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Parses `text` into pairs in file order. Duplicate keys are an error.
pub fn parse(text: &str) -> Result<Vec<(String, String)>> {
    let mut out: Vec<(String, String)> = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::invalid(format!("line {}: expected key=value, got `{line}`", n + 1))
        })?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(Error::invalid(format!("line {}: empty key", n + 1)));
        }
        if out.iter().any(|(seen, _)| seen == k) {
            return Err(Error::invalid(format!(
                "line {}: duplicate key `{k}`",
                n + 1
            )));
        }
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

/// Parses one value, naming the key in the error.
pub fn value<T: FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: Display,
{
    v.parse()
        .map_err(|e| Error::invalid(format!("`{key}`: cannot parse `{v}`: {e}")))
}

/// Renders pairs as config text.
pub fn render(pairs: &[(&str, String)]) -> String {
    pairs.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
}
