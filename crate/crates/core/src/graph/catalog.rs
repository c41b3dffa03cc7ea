//! Declarative marker catalog: binarization rules that turn raw participant
//! fields into markers, plus segment definitions over those markers.
//!
//! The catalog is plain data loaded from TOML, e.g.
//!
//! ```toml
//! [[rule]]
//! name = "steps"
//! source = "avg_daily_steps"
//! topic = "physical activity"
//! min = 0.0
//! boundaries = [2500.0, 5000.0, 7500.0, 10000.0]
//! labels = ["steps: <2.5k", "steps: 2.5k", "steps: 5k", "steps: 7.5k", "steps: 10k"]
//!
//! [[rule]]
//! name = "sex"
//! source = "sex"
//! topic = "demographics"
//! values = { F = "sex: female", M = "sex: male" }
//!
//! [[segment]]
//! id = "Inactive Young Adults"
//! markers = ["age group: young adult", "activity: inactive"]
//! ```
//!
//! A range rule with `n` boundaries has `n + 1` labels and buckets
//! `[min, b0), [b0, b1), ..., [b_last, max)`, so buckets partition the
//! domain by construction. Values outside `[min, max)` are catalog gaps.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::records::{FieldMap, FieldValue};
use super::GraphError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarkerRule {
    pub name: String,
    /// Raw participant field this rule reads.
    pub source: String,
    pub topic: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub boundaries: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub labels: Vec<String>,
    /// Categorical code -> marker label.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub values: BTreeMap<String, String>,
}

impl MarkerRule {
    pub fn range(
        name: &str,
        source: &str,
        topic: &str,
        min: Option<f64>,
        boundaries: Vec<f64>,
        labels: Vec<String>,
    ) -> Self {
        Self {
            name: name.into(),
            source: source.into(),
            topic: topic.into(),
            min,
            max: None,
            boundaries,
            labels,
            values: BTreeMap::new(),
        }
    }

    pub fn categorical(name: &str, source: &str, topic: &str, values: &[(&str, &str)]) -> Self {
        Self {
            name: name.into(),
            source: source.into(),
            topic: topic.into(),
            min: None,
            max: None,
            boundaries: Vec::new(),
            labels: Vec::new(),
            values: values
                .iter()
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect(),
        }
    }

    fn is_categorical(&self) -> bool {
        !self.values.is_empty()
    }

    pub fn marker_labels(&self) -> Vec<&str> {
        if self.is_categorical() {
            self.values.values().map(String::as_str).collect()
        } else {
            self.labels.iter().map(String::as_str).collect()
        }
    }

    fn validate(&self) -> Result<(), GraphError> {
        let bad = |reason: String| GraphError::Catalog(format!("rule `{}`: {reason}", self.name));
        match (self.is_categorical(), self.labels.is_empty()) {
            (true, false) => return Err(bad("has both `values` and `labels`".into())),
            (false, true) => return Err(bad("has neither `values` nor `labels`".into())),
            _ => {}
        }
        if self.is_categorical() {
            return Ok(());
        }
        if self.labels.len() != self.boundaries.len() + 1 {
            return Err(bad(format!(
                "{} boundaries need {} labels, got {}",
                self.boundaries.len(),
                self.boundaries.len() + 1,
                self.labels.len()
            )));
        }
        if self.boundaries.iter().any(|b| !b.is_finite()) {
            return Err(bad("non-finite boundary".into()));
        }
        if self.boundaries.windows(2).any(|w| w[0] >= w[1]) {
            return Err(bad("boundaries must be strictly increasing".into()));
        }
        if let (Some(min), Some(first)) = (self.min, self.boundaries.first()) {
            if min >= *first {
                return Err(bad("min must lie below the first boundary".into()));
            }
        }
        if let (Some(max), Some(last)) = (self.max, self.boundaries.last()) {
            if max <= *last {
                return Err(bad("max must lie above the last boundary".into()));
            }
        }
        if let (Some(min), Some(max)) = (self.min, self.max) {
            if min >= max {
                return Err(bad("min must be below max".into()));
            }
        }
        Ok(())
    }

    /// Maps a raw value to this rule's single marker, or reports a gap.
    pub fn classify(&self, value: &FieldValue) -> Result<&str, GraphError> {
        let gap = || GraphError::CatalogGap {
            field: self.source.clone(),
            value: value.to_string(),
        };
        if self.is_categorical() {
            let key = match value {
                FieldValue::Text(s) => s.clone(),
                FieldValue::Number(v) => v.to_string(),
            };
            return self.values.get(&key).map(String::as_str).ok_or_else(gap);
        }
        let FieldValue::Number(v) = value else {
            return Err(gap());
        };
        let v = *v;
        if !v.is_finite() || self.min.is_some_and(|m| v < m) || self.max.is_some_and(|m| v >= m) {
            return Err(gap());
        }
        let idx = self.boundaries.partition_point(|b| *b <= v);
        Ok(&self.labels[idx])
    }
}

/// A named segment: users holding every listed marker are members.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentDef {
    pub id: String,
    pub markers: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarkerCatalog {
    #[serde(default, rename = "rule")]
    pub rules: Vec<MarkerRule>,
    #[serde(default, rename = "segment")]
    pub segments: Vec<SegmentDef>,
}

impl MarkerCatalog {
    pub fn new(rules: Vec<MarkerRule>, segments: Vec<SegmentDef>) -> Result<Self, GraphError> {
        let c = Self { rules, segments };
        c.validate()?;
        Ok(c)
    }

    pub fn from_toml(s: &str) -> Result<Self, GraphError> {
        let c: Self = toml::from_str(s).map_err(|e| GraphError::Catalog(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_toml(&self) -> Result<String, GraphError> {
        toml::to_string(self).map_err(|e| GraphError::Catalog(e.to_string()))
    }

    pub fn validate(&self) -> Result<(), GraphError> {
        let mut seen = BTreeSet::new();
        let mut names = BTreeSet::new();
        for r in &self.rules {
            r.validate()?;
            if !names.insert(r.name.as_str()) {
                return Err(GraphError::Catalog(format!("duplicate rule `{}`", r.name)));
            }
            for m in r.marker_labels() {
                if !seen.insert(m) {
                    return Err(GraphError::Catalog(format!("marker `{m}` defined twice")));
                }
            }
        }
        let mut seg_ids = BTreeSet::new();
        for s in &self.segments {
            if !seg_ids.insert(s.id.as_str()) {
                return Err(GraphError::Catalog(format!("duplicate segment `{}`", s.id)));
            }
            if let Some(m) = s.markers.iter().find(|m| !seen.contains(m.as_str())) {
                return Err(GraphError::Catalog(format!(
                    "segment `{}` references unknown marker `{m}`",
                    s.id
                )));
            }
        }
        Ok(())
    }

    /// Every (marker, topic) pair in catalog order.
    pub fn markers(&self) -> impl Iterator<Item = (&str, &str)> + '_ {
        self.rules
            .iter()
            .flat_map(|r| r.marker_labels().into_iter().map(move |m| (m, r.topic.as_str())))
    }

    pub fn marker_count(&self) -> usize {
        self.rules.iter().map(|r| r.marker_labels().len()).sum()
    }

    pub fn topics(&self) -> BTreeSet<&str> {
        self.rules.iter().map(|r| r.topic.as_str()).collect()
    }

    pub fn has_marker(&self, marker: &str) -> bool {
        self.rule_for_marker(marker).is_some()
    }

    pub fn rule_for_marker(&self, marker: &str) -> Option<&MarkerRule> {
        self.rules
            .iter()
            .find(|r| r.marker_labels().contains(&marker))
    }

    /// Markers implied by `fields`, keyed by rule name. Rules whose source
    /// field is absent produce nothing; a present value outside every bucket
    /// is a hard error naming the field.
    pub fn binarize(&self, fields: &FieldMap) -> Result<BTreeMap<String, String>, GraphError> {
        let mut out = BTreeMap::new();
        for r in &self.rules {
            if let Some(v) = fields.get(&r.source) {
                out.insert(r.name.clone(), r.classify(v)?.to_string());
            }
        }
        Ok(out)
    }

    /// Segments whose required markers are all in `markers`.
    pub fn segments_for<'a>(&'a self, markers: &BTreeSet<String>) -> Vec<&'a str> {
        self.segments
            .iter()
            .filter(|s| s.markers.iter().all(|m| markers.contains(m)))
            .map(|s| s.id.as_str())
            .collect()
    }
}
