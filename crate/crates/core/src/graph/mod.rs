//! Dynamic heterogeneous knowledge graph of users, nudges, markers, topics,
//! segments and goals.

mod catalog;
mod construct;
mod records;
mod snapshot;
mod types;

use thiserror::Error;

pub use catalog::{MarkerCatalog, MarkerRule, SegmentDef};
pub(crate) use construct::apply_events_in_place;
pub use construct::{
    add_user, apply_events, refresh_user, construct_graph, event_relation, update_markers, ConstructOptions,
    Construction, RejectedEvent,
};
pub use records::{
    read_jsonl, write_jsonl, EventKind, FieldMap, FieldValue, InteractionEvent, NudgeTemplate,
    ParticipantRecord, Targeting,
};
pub use snapshot::{GraphSnapshot, GraphStats};
pub use types::{Day, EntityId, EntityKind, Relation, Triplet};

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("invalid {kind} id `{id}`: {reason}")]
    InvalidId {
        kind: EntityKind,
        id: String,
        reason: &'static str,
    },
    #[error("unknown entity {0}")]
    UnknownEntity(EntityId),
    #[error("relation {relation} does not accept {head} -> {tail}")]
    Signature {
        relation: Relation,
        head: EntityId,
        tail: EntityId,
    },
    #[error("edge observed on day {day} is after snapshot day {time}")]
    FutureEdge { day: Day, time: Day },
    #[error("day {requested} is not after snapshot day {current}")]
    StaleTime { requested: Day, current: Day },
    #[error("catalog does not cover value `{value}` of field `{field}`")]
    CatalogGap { field: String, value: String },
    #[error("invalid catalog: {0}")]
    Catalog(String),
    #[error("nudge `{nudge}` references unknown {what}")]
    UnknownReference { nudge: String, what: String },
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
