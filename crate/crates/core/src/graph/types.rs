use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::GraphError;

/// Logical day index. The production cadence is daily, so all timestamps are
/// whole days.
pub type Day = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntityKind {
    User,
    Nudge,
    Marker,
    Topic,
    Segment,
    Goal,
}

impl EntityKind {
    pub const ALL: [EntityKind; 6] = [
        EntityKind::User,
        EntityKind::Nudge,
        EntityKind::Marker,
        EntityKind::Topic,
        EntityKind::Segment,
        EntityKind::Goal,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EntityKind::User => "user",
            EntityKind::Nudge => "nudge",
            EntityKind::Marker => "marker",
            EntityKind::Topic => "topic",
            EntityKind::Segment => "segment",
            EntityKind::Goal => "goal",
        }
    }
}

impl fmt::Display for EntityKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EntityKind {
    type Err = GraphError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        EntityKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| GraphError::Parse(format!("unknown entity kind `{s}`")))
    }
}

/// A typed, pseudonymous node identifier.
///
/// The local id is an opaque mask; nothing in the data model carries names,
/// addresses or contact details.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct EntityId {
    pub kind: EntityKind,
    pub local_id: String,
}

impl EntityId {
    /// Builds an id, rejecting empty ids and ids that would break the
    /// tab-separated export (tabs, newlines).
    pub fn new(kind: EntityKind, local_id: impl Into<String>) -> Result<Self, GraphError> {
        let local_id = local_id.into();
        if local_id.is_empty() {
            return Err(GraphError::InvalidId {
                kind,
                id: local_id,
                reason: "empty id",
            });
        }
        if local_id.chars().any(|c| c == '\t' || c == '\n' || c == '\r') {
            return Err(GraphError::InvalidId {
                kind,
                id: local_id,
                reason: "control characters are not allowed",
            });
        }
        Ok(Self { kind, local_id })
    }

    pub fn user(id: impl Into<String>) -> Self {
        Self::must(EntityKind::User, id)
    }

    pub fn nudge(id: impl Into<String>) -> Self {
        Self::must(EntityKind::Nudge, id)
    }

    pub fn marker(id: impl Into<String>) -> Self {
        Self::must(EntityKind::Marker, id)
    }

    pub fn topic(id: impl Into<String>) -> Self {
        Self::must(EntityKind::Topic, id)
    }

    pub fn segment(id: impl Into<String>) -> Self {
        Self::must(EntityKind::Segment, id)
    }

    pub fn goal(id: impl Into<String>) -> Self {
        Self::must(EntityKind::Goal, id)
    }

    fn must(kind: EntityKind, id: impl Into<String>) -> Self {
        match Self::new(kind, id) {
            Ok(e) => e,
            Err(e) => panic!("{e}"),
        }
    }
}

impl fmt::Display for EntityId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.kind, self.local_id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relation {
    Sent,
    Opened,
    RatedUseful,
    RatedNotUseful,
    HasMarker,
    MarkerInTopic,
    InSegment,
    TargetsSegment,
    HasGoal,
}

impl Relation {
    pub const ALL: [Relation; 9] = [
        Relation::Sent,
        Relation::Opened,
        Relation::RatedUseful,
        Relation::RatedNotUseful,
        Relation::HasMarker,
        Relation::MarkerInTopic,
        Relation::InSegment,
        Relation::TargetsSegment,
        Relation::HasGoal,
    ];

    /// The fixed (head kind, tail kind) signature of this relation.
    pub fn signature(self) -> (EntityKind, EntityKind) {
        use EntityKind::*;
        match self {
            Relation::Sent | Relation::Opened | Relation::RatedUseful | Relation::RatedNotUseful => {
                (User, Nudge)
            }
            Relation::HasMarker => (User, Marker),
            Relation::MarkerInTopic => (Marker, Topic),
            Relation::InSegment => (User, Segment),
            Relation::TargetsSegment => (Nudge, Segment),
            Relation::HasGoal => (Nudge, Goal),
        }
    }

    /// User-to-nudge engagement relations.
    pub fn is_interaction(self) -> bool {
        matches!(
            self,
            Relation::Sent | Relation::Opened | Relation::RatedUseful | Relation::RatedNotUseful
        )
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Relation::Sent => "sent",
            Relation::Opened => "opened",
            Relation::RatedUseful => "rated_useful",
            Relation::RatedNotUseful => "rated_not_useful",
            Relation::HasMarker => "has_marker",
            Relation::MarkerInTopic => "marker_in_topic",
            Relation::InSegment => "in_segment",
            Relation::TargetsSegment => "targets_segment",
            Relation::HasGoal => "has_goal",
        }
    }
}

impl fmt::Display for Relation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Relation {
    type Err = GraphError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Relation::ALL
            .into_iter()
            .find(|r| r.as_str() == s)
            .ok_or_else(|| GraphError::Parse(format!("unknown relation `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Triplet {
    pub head: EntityId,
    pub relation: Relation,
    pub tail: EntityId,
    pub observed_at: Day,
}

impl Triplet {
    pub fn check_signature(&self) -> Result<(), GraphError> {
        let (h, t) = self.relation.signature();
        if self.head.kind != h || self.tail.kind != t {
            return Err(GraphError::Signature {
                relation: self.relation,
                head: self.head.clone(),
                tail: self.tail.clone(),
            });
        }
        Ok(())
    }
}
