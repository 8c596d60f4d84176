//! Artifact writing: JSON reports with 12-significant-digit numbers and an
//! optional `generated_at` stamp.

use std::path::Path;

use markowitz::format::round_sig;
use serde::Serialize;
use serde_json::{Map, Number, Value};

/// Rounds every non-integer number in `v` to 12 significant digits.
pub fn round_numbers(v: Value) -> Value {
    match v {
        Value::Number(n) if n.is_f64() => {
            let x = round_sig(n.as_f64().unwrap_or(f64::NAN));
            Number::from_f64(x).map(Value::Number).unwrap_or(Value::Null)
        }
        Value::Array(a) => Value::Array(a.into_iter().map(round_numbers).collect()),
        Value::Object(o) => Value::Object(o.into_iter().map(|(k, v)| (k, round_numbers(v))).collect()),
        other => other,
    }
}

/// Serializes `report` (which must be a JSON object), stamps it unless
/// `no_timestamp`, and writes it pretty-printed.
pub fn write_report(path: &Path, report: &impl Serialize, no_timestamp: bool) -> std::io::Result<()> {
    let value = serde_json::to_value(report).map_err(std::io::Error::other)?;
    let mut obj = match round_numbers(value) {
        Value::Object(o) => o,
        other => {
            let mut m = Map::new();
            m.insert("report".into(), other);
            m
        }
    };
    if !no_timestamp {
        obj.insert("generated_at".into(), Value::String(chrono::Utc::now().to_rfc3339()));
    }
    let mut text = serde_json::to_string_pretty(&Value::Object(obj)).map_err(std::io::Error::other)?;
    text.push('\n');
    std::fs::write(path, text)
}
