//! Input record schemas and line-delimited JSON readers/writers.
//!
//! Every input file holds one JSON object per line:
//!
//! - participants: `{"user_id": "...", "fields": {"age": 34, "sex": "F", ...}}`
//! - nudge library: `{"nudge_id": "...", "goal": "steps", "text": "...",
//!   "targeting": {"segments": [...], "markers": [...]}}`
//! - interactions: `{"user_id": "...", "nudge_id": "...", "event": "opened", "day": 3}`
//!
//! None of the schemas carry names, addresses or contact details; user ids are
//! pseudonymous masks.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Write};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::types::Day;
use super::GraphError;

/// A raw participant measurement: numeric readings or categorical codes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FieldValue {
    Number(f64),
    Text(String),
}

impl fmt::Display for FieldValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FieldValue::Number(v) => write!(f, "{v}"),
            FieldValue::Text(s) => f.write_str(s),
        }
    }
}

impl From<f64> for FieldValue {
    fn from(v: f64) -> Self {
        FieldValue::Number(v)
    }
}

impl From<&str> for FieldValue {
    fn from(v: &str) -> Self {
        FieldValue::Text(v.to_string())
    }
}

pub type FieldMap = BTreeMap<String, FieldValue>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParticipantRecord {
    pub user_id: String,
    pub fields: FieldMap,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Targeting {
    /// Any-of segment ids. Empty means no segment constraint.
    #[serde(default)]
    pub segments: Vec<String>,
    /// All-of marker ids. Empty means no marker constraint.
    #[serde(default)]
    pub markers: Vec<String>,
}

/// An authored nudge: goal, targeting block and templated text with
/// `{{field}}` placeholders.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NudgeTemplate {
    pub nudge_id: String,
    pub goal: String,
    pub text: String,
    #[serde(default)]
    pub targeting: Targeting,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Sent,
    Opened,
    RatedUseful,
    RatedNotUseful,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InteractionEvent {
    pub user_id: String,
    pub nudge_id: String,
    pub event: EventKind,
    pub day: Day,
}

/// Reads one record per non-blank line.
pub fn read_jsonl<T: DeserializeOwned, R: BufRead>(reader: R) -> Result<Vec<T>, GraphError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line)
            .map_err(|e| GraphError::Parse(format!("line {}: {e}", i + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize, W: Write>(mut out: W, records: &[T]) -> Result<(), GraphError> {
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| GraphError::Parse(e.to_string()))?;
        writeln!(out, "{line}")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn participant_line_parses() {
        let line = r#"{"user_id":"p001","fields":{"age":34,"sex":"F"}}"#;
        let recs: Vec<ParticipantRecord> = read_jsonl(line.as_bytes()).unwrap();
        assert_eq!(recs[0].fields["age"], FieldValue::Number(34.0));
        assert_eq!(recs[0].fields["sex"], FieldValue::Text("F".into()));
    }

    #[test]
    fn unknown_fields_rejected() {
        let line = r#"{"user_id":"p001","name":"x","fields":{}}"#;
        let err = read_jsonl::<ParticipantRecord, _>(line.as_bytes()).unwrap_err();
        assert!(err.to_string().contains("line 1"));
    }

    #[test]
    fn event_names() {
        let e: InteractionEvent =
            serde_json::from_str(r#"{"user_id":"u","nudge_id":"n","event":"rated_not_useful","day":2}"#)
                .unwrap();
        assert_eq!(e.event, EventKind::RatedNotUseful);
    }
}
