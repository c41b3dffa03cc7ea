//! Candidate nudge generation from declarative targeting rules.
//!
//! A rule matches a user when the user is in ANY of the rule's segments and
//! holds ALL of its markers. An empty constraint list does not restrict, so a
//! rule with neither segments nor markers targets everybody.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{EntityId, EntityKind, GraphError, GraphSnapshot, NudgeTemplate, Relation};

#[derive(Debug, Error)]
pub enum CandidateError {
    #[error("unknown user {0}")]
    UnknownUser(EntityId),
    #[error("rule `{rule}` references {missing}, which is not in the graph")]
    DanglingRule { rule: String, missing: EntityId },
    #[error(transparent)]
    Graph(#[from] GraphError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TargetingRule {
    pub rule_id: String,
    pub nudge: EntityId,
    /// Any-of.
    pub segments: Vec<EntityId>,
    /// All-of.
    pub markers: Vec<EntityId>,
    pub goal: EntityId,
}

impl TargetingRule {
    pub fn from_template(t: &NudgeTemplate) -> Result<Self, GraphError> {
        Ok(Self {
            rule_id: format!("rule:{}", t.nudge_id),
            nudge: EntityId::new(EntityKind::Nudge, t.nudge_id.as_str())?,
            segments: t
                .targeting
                .segments
                .iter()
                .map(|s| EntityId::new(EntityKind::Segment, s.as_str()))
                .collect::<Result<_, _>>()?,
            markers: t
                .targeting
                .markers
                .iter()
                .map(|m| EntityId::new(EntityKind::Marker, m.as_str()))
                .collect::<Result<_, _>>()?,
            goal: EntityId::new(EntityKind::Goal, t.goal.as_str())?,
        })
    }

    pub fn matches(&self, segments: &BTreeSet<&EntityId>, markers: &BTreeSet<&EntityId>) -> bool {
        (self.segments.is_empty() || self.segments.iter().any(|s| segments.contains(s)))
            && self.markers.iter().all(|m| markers.contains(m))
    }
}

pub fn rules_from_library(library: &[NudgeTemplate]) -> Result<Vec<TargetingRule>, GraphError> {
    library.iter().map(TargetingRule::from_template).collect()
}

/// Checks that every nudge, segment and marker a rule names exists in the
/// snapshot.
pub fn validate_rules(snapshot: &GraphSnapshot, rules: &[TargetingRule]) -> Result<(), CandidateError> {
    for r in rules {
        for id in std::iter::once(&r.nudge).chain(&r.segments).chain(&r.markers) {
            if !snapshot.contains(id) {
                return Err(CandidateError::DanglingRule {
                    rule: r.rule_id.clone(),
                    missing: id.clone(),
                });
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Candidate {
    pub nudge: EntityId,
    pub rule_id: String,
}

/// Eligible nudges per user, in rule order, without duplicates.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateSet {
    per_user: BTreeMap<EntityId, Vec<Candidate>>,
}

impl CandidateSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Sets a user's candidates, dropping repeated nudges (first rule wins).
    pub fn insert(&mut self, user: EntityId, candidates: Vec<Candidate>) {
        let mut seen = BTreeSet::new();
        let deduped = candidates
            .into_iter()
            .filter(|c| seen.insert(c.nudge.clone()))
            .collect();
        self.per_user.insert(user, deduped);
    }

    pub fn get(&self, user: &EntityId) -> &[Candidate] {
        self.per_user.get(user).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn contains(&self, user: &EntityId, nudge: &EntityId) -> bool {
        self.get(user).iter().any(|c| &c.nudge == nudge)
    }

    pub fn users(&self) -> impl Iterator<Item = &EntityId> + '_ {
        self.per_user.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&EntityId, &[Candidate])> + '_ {
        self.per_user.iter().map(|(u, c)| (u, c.as_slice()))
    }

    pub fn pair_count(&self) -> usize {
        self.per_user.values().map(Vec::len).sum()
    }

    pub fn len(&self) -> usize {
        self.per_user.len()
    }

    pub fn is_empty(&self) -> bool {
        self.per_user.is_empty()
    }
}

/// Candidate nudges for `user` under the snapshot's current segment and
/// marker edges.
pub fn generate_candidates(
    snapshot: &GraphSnapshot,
    rules: &[TargetingRule],
    user: &EntityId,
) -> Result<Vec<Candidate>, CandidateError> {
    if user.kind != EntityKind::User || !snapshot.contains(user) {
        return Err(CandidateError::UnknownUser(user.clone()));
    }
    let mut segments = BTreeSet::new();
    let mut markers = BTreeSet::new();
    for (r, tail, _) in snapshot.neighbors(user) {
        match r {
            Relation::InSegment => {
                segments.insert(tail);
            }
            Relation::HasMarker => {
                markers.insert(tail);
            }
            _ => {}
        }
    }
    let mut seen = BTreeSet::new();
    Ok(rules
        .iter()
        .filter(|r| r.matches(&segments, &markers))
        .filter(|r| seen.insert(&r.nudge))
        .map(|r| Candidate {
            nudge: r.nudge.clone(),
            rule_id: r.rule_id.clone(),
        })
        .collect())
}

/// Candidates for every listed user.
pub fn generate_for_users<'a>(
    snapshot: &GraphSnapshot,
    rules: &[TargetingRule],
    users: impl IntoIterator<Item = &'a EntityId>,
) -> Result<CandidateSet, CandidateError> {
    let mut set = CandidateSet::new();
    for u in users {
        set.insert(u.clone(), generate_candidates(snapshot, rules, u)?);
    }
    Ok(set)
}

/// Candidates for every user in the snapshot.
pub fn generate_all(snapshot: &GraphSnapshot, rules: &[TargetingRule]) -> Result<CandidateSet, CandidateError> {
    generate_for_users(snapshot, rules, snapshot.entities_of(EntityKind::User))
}
