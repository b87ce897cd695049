//! Strict JSON-lines reading shared by the dataset, corpus, span and prediction loaders.
//!
//! Each line must be exactly one JSON object: no blank lines, no leading or
//! trailing whitespace, no carriage returns. A single trailing newline at the
//! end of the file is accepted.

use serde_json::{Map, Value};
use std::fmt;
use std::io::Write;
use std::path::Path;

/// One problem found on one line of a JSONL file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LineError {
    pub line: usize,
    pub field: Option<String>,
    pub message: String,
}

impl LineError {
    pub fn new(line: usize, field: Option<&str>, message: impl Into<String>) -> Self {
        LineError {
            line,
            field: field.map(str::to_string),
            message: message.into(),
        }
    }
}

impl fmt::Display for LineError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.field {
            Some(field) => write!(f, "line {}: field `{}`: {}", self.line, field, self.message),
            None => write!(f, "line {}: {}", self.line, self.message),
        }
    }
}

/// Join a batch of line errors into one message.
pub fn join_errors(errors: &[LineError]) -> String {
    errors.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ")
}

/// Parsed objects keyed by 1-based line number, plus the lines that failed.
pub type Parsed = (Vec<(usize, Map<String, Value>)>, Vec<LineError>);

/// Split file contents into `(line_number, object)` pairs, collecting every malformed line.
pub fn parse_objects(contents: &str) -> Parsed {
    let mut objects = Vec::new();
    let mut errors = Vec::new();
    let body = contents.strip_suffix('\n').unwrap_or(contents);
    if body.is_empty() {
        return (objects, errors);
    }
    for (idx, line) in body.split('\n').enumerate() {
        let lineno = idx + 1;
        if line.is_empty() {
            errors.push(LineError::new(lineno, None, "empty line"));
            continue;
        }
        if line.trim() != line {
            errors.push(LineError::new(lineno, None, "leading or trailing whitespace"));
            continue;
        }
        match serde_json::from_str::<Value>(line) {
            Ok(Value::Object(map)) => objects.push((lineno, map)),
            Ok(_) => errors.push(LineError::new(lineno, None, "expected a JSON object")),
            Err(e) => errors.push(LineError::new(lineno, None, format!("invalid JSON: {e}"))),
        }
    }
    (objects, errors)
}

pub fn require_str<'a>(
    obj: &'a Map<String, Value>,
    field: &str,
    line: usize,
) -> Result<&'a str, LineError> {
    match obj.get(field) {
        Some(Value::String(s)) => Ok(s),
        Some(_) => Err(LineError::new(line, Some(field), "expected a string")),
        None => Err(LineError::new(line, Some(field), "missing")),
    }
}

pub fn reject_unknown(
    obj: &Map<String, Value>,
    allowed: &[&str],
    line: usize,
) -> Result<(), LineError> {
    for key in obj.keys() {
        if !allowed.contains(&key.as_str()) {
            return Err(LineError::new(line, Some(key), "unknown field"));
        }
    }
    Ok(())
}

/// Write serializable rows as compact JSON, one per line.
pub fn write_lines<T: serde::Serialize>(path: &Path, rows: &[T]) -> std::io::Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for row in rows {
        serde_json::to_writer(&mut out, row)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}
