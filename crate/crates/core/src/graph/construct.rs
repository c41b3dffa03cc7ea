use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::catalog::MarkerCatalog;
use super::records::{EventKind, FieldMap, InteractionEvent, NudgeTemplate, ParticipantRecord};
use super::snapshot::GraphSnapshot;
use super::types::{Day, EntityId, EntityKind, Relation, Triplet};
use super::GraphError;

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConstructOptions {
    /// Materialize `sent` events as edges. Off by default: only engagement
    /// (opens and ratings) becomes graph structure.
    #[serde(default)]
    pub include_sent: bool,
    /// Snapshot day. Defaults to the latest event day (0 without events).
    #[serde(default)]
    pub time: Option<Day>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RejectedEvent {
    pub index: usize,
    pub event: InteractionEvent,
    pub reason: String,
}

#[derive(Debug, Clone)]
pub struct Construction {
    pub snapshot: GraphSnapshot,
    pub rejected: Vec<RejectedEvent>,
}

pub fn event_relation(kind: EventKind) -> Relation {
    match kind {
        EventKind::Sent => Relation::Sent,
        EventKind::Opened => Relation::Opened,
        EventKind::RatedUseful => Relation::RatedUseful,
        EventKind::RatedNotUseful => Relation::RatedNotUseful,
    }
}

/// Builds the knowledge graph from the nudge library, participant records and
/// interaction log.
///
/// Events that reference unknown users or nudges are collected in
/// [`Construction::rejected`] and skipped; an uncovered raw participant value
/// aborts construction.
pub fn construct_graph(
    library: &[NudgeTemplate],
    participants: &[ParticipantRecord],
    interactions: &[InteractionEvent],
    catalog: &MarkerCatalog,
    opts: &ConstructOptions,
) -> Result<Construction, GraphError> {
    let time = opts
        .time
        .unwrap_or_else(|| interactions.iter().map(|e| e.day).max().unwrap_or(0));
    let mut g = GraphSnapshot::new(time);

    for topic in catalog.topics() {
        g.add_entity(EntityId::new(EntityKind::Topic, topic)?);
    }
    for (marker, topic) in catalog.markers() {
        let m = EntityId::new(EntityKind::Marker, marker)?;
        g.add_entity(m.clone());
        g.add_triplet(Triplet {
            head: m,
            relation: Relation::MarkerInTopic,
            tail: EntityId::new(EntityKind::Topic, topic)?,
            observed_at: time,
        })?;
    }
    for s in &catalog.segments {
        g.add_entity(EntityId::new(EntityKind::Segment, s.id.as_str())?);
    }

    for t in library {
        add_nudge(&mut g, t, catalog, time)?;
    }

    // Later records for the same user replace earlier ones.
    let mut latest: BTreeMap<&str, &FieldMap> = BTreeMap::new();
    for p in participants {
        latest.insert(p.user_id.as_str(), &p.fields);
    }
    for (uid, fields) in latest {
        add_user(&mut g, uid, fields, catalog, time)?;
    }

    let rejected = apply_events_in_place(&mut g, interactions, opts.include_sent);
    Ok(Construction {
        snapshot: g,
        rejected,
    })
}

fn add_nudge(
    g: &mut GraphSnapshot,
    t: &NudgeTemplate,
    catalog: &MarkerCatalog,
    day: Day,
) -> Result<(), GraphError> {
    let n = EntityId::new(EntityKind::Nudge, t.nudge_id.as_str())?;
    let goal = EntityId::new(EntityKind::Goal, t.goal.as_str())?;
    g.add_entity(n.clone());
    g.add_entity(goal.clone());
    g.add_triplet(Triplet {
        head: n.clone(),
        relation: Relation::HasGoal,
        tail: goal,
        observed_at: day,
    })?;
    for s in &t.targeting.segments {
        let seg = EntityId::new(EntityKind::Segment, s.as_str())?;
        if !g.contains(&seg) {
            return Err(GraphError::UnknownReference {
                nudge: t.nudge_id.clone(),
                what: format!("segment `{s}`"),
            });
        }
        g.add_triplet(Triplet {
            head: n.clone(),
            relation: Relation::TargetsSegment,
            tail: seg,
            observed_at: day,
        })?;
    }
    if let Some(m) = t.targeting.markers.iter().find(|m| !catalog.has_marker(m)) {
        return Err(GraphError::UnknownReference {
            nudge: t.nudge_id.clone(),
            what: format!("marker `{m}`"),
        });
    }
    Ok(())
}

/// Adds a user node with its marker and segment edges. Existing users keep
/// their interaction edges; markers and segments are replaced.
pub fn add_user(
    g: &mut GraphSnapshot,
    user_id: &str,
    fields: &FieldMap,
    catalog: &MarkerCatalog,
    day: Day,
) -> Result<(), GraphError> {
    let u = EntityId::new(EntityKind::User, user_id)?;
    let markers: BTreeSet<String> = catalog.binarize(fields)?.into_values().collect();
    g.add_entity(u.clone());
    sync_user_edges(g, &u, &markers, catalog, day)
}

/// Rewrites the user's has_marker edges to `markers` and in_segment edges to
/// the segments those markers imply. Edges that survive keep their original
/// observation day.
fn sync_user_edges(
    g: &mut GraphSnapshot,
    u: &EntityId,
    markers: &BTreeSet<String>,
    catalog: &MarkerCatalog,
    day: Day,
) -> Result<(), GraphError> {
    let segments: BTreeSet<String> = catalog
        .segments_for(markers)
        .into_iter()
        .map(String::from)
        .collect();
    let wanted: BTreeSet<(Relation, EntityId)> = markers
        .iter()
        .map(|m| EntityId::new(EntityKind::Marker, m.as_str()).map(|e| (Relation::HasMarker, e)))
        .chain(
            segments
                .iter()
                .map(|s| EntityId::new(EntityKind::Segment, s.as_str()).map(|e| (Relation::InSegment, e))),
        )
        .collect::<Result<_, _>>()?;

    let stale: Vec<(Relation, EntityId)> = g
        .neighbors(u)
        .filter(|(r, t, _)| {
            matches!(r, Relation::HasMarker | Relation::InSegment)
                && !wanted.contains(&(*r, (*t).clone()))
        })
        .map(|(r, t, _)| (r, t.clone()))
        .collect();
    for (r, t) in stale {
        g.remove_edge(u, r, &t);
    }
    for (r, t) in wanted {
        if !g.has_edge(u, r, &t) {
            g.add_triplet(Triplet {
                head: u.clone(),
                relation: r,
                tail: t,
                observed_at: day,
            })?;
        }
    }
    Ok(())
}

/// Returns G_{t+1}: the user's markers are re-derived from `new_fields` and
/// their segment memberships recomputed; every other edge is untouched.
///
/// Fields absent from `new_fields` keep their current markers.
pub fn update_markers(
    snapshot: &GraphSnapshot,
    user: &EntityId,
    new_fields: &FieldMap,
    catalog: &MarkerCatalog,
    new_time: Day,
) -> Result<GraphSnapshot, GraphError> {
    if user.kind != EntityKind::User || !snapshot.contains(user) {
        return Err(GraphError::UnknownEntity(user.clone()));
    }
    if new_time <= snapshot.time() {
        return Err(GraphError::StaleTime {
            requested: new_time,
            current: snapshot.time(),
        });
    }
    let mut next = snapshot.clone();
    next.set_time(new_time);
    refresh_user(&mut next, user, new_fields, catalog, new_time)?;
    Ok(next)
}

/// In-place form of [`update_markers`] for an existing user, without the
/// time checks: several users can be refreshed within one cycle.
pub fn refresh_user(
    g: &mut GraphSnapshot,
    user: &EntityId,
    new_fields: &FieldMap,
    catalog: &MarkerCatalog,
    day: Day,
) -> Result<(), GraphError> {
    if !g.contains(user) {
        return Err(GraphError::UnknownEntity(user.clone()));
    }
    let fresh = catalog.binarize(new_fields)?;
    let mut markers: BTreeSet<String> = g
        .neighbors(user)
        .filter(|(r, _, _)| *r == Relation::HasMarker)
        .filter(|(_, m, _)| {
            catalog
                .rule_for_marker(&m.local_id)
                .is_none_or(|rule| !fresh.contains_key(&rule.name))
        })
        .map(|(_, m, _)| m.local_id.clone())
        .collect();
    markers.extend(fresh.into_values());
    sync_user_edges(g, user, &markers, catalog, day)
}

/// Adds interaction edges for `events` to a copy of `snapshot` advanced to
/// `new_time`. Events that cannot be placed are returned alongside.
pub fn apply_events(
    snapshot: &GraphSnapshot,
    events: &[InteractionEvent],
    new_time: Day,
    include_sent: bool,
) -> Result<(GraphSnapshot, Vec<RejectedEvent>), GraphError> {
    if new_time < snapshot.time() {
        return Err(GraphError::StaleTime {
            requested: new_time,
            current: snapshot.time(),
        });
    }
    let mut next = snapshot.clone();
    next.set_time(new_time);
    let rejected = apply_events_in_place(&mut next, events, include_sent);
    Ok((next, rejected))
}

pub(crate) fn apply_events_in_place(
    g: &mut GraphSnapshot,
    events: &[InteractionEvent],
    include_sent: bool,
) -> Vec<RejectedEvent> {
    let mut rejected = Vec::new();
    for (index, ev) in events.iter().enumerate() {
        let reject = |reason: String| RejectedEvent {
            index,
            event: ev.clone(),
            reason,
        };
        if ev.event == EventKind::Sent && !include_sent {
            continue;
        }
        let (Ok(u), Ok(n)) = (
            EntityId::new(EntityKind::User, ev.user_id.as_str()),
            EntityId::new(EntityKind::Nudge, ev.nudge_id.as_str()),
        ) else {
            rejected.push(reject("malformed id".into()));
            continue;
        };
        if !g.contains(&u) {
            rejected.push(reject(format!("unknown user `{}`", ev.user_id)));
            continue;
        }
        if !g.contains(&n) {
            rejected.push(reject(format!("unknown nudge `{}`", ev.nudge_id)));
            continue;
        }
        let t = Triplet {
            head: u,
            relation: event_relation(ev.event),
            tail: n,
            observed_at: ev.day,
        };
        if let Err(e) = g.add_triplet(t) {
            rejected.push(reject(e.to_string()));
        }
    }
    rejected
}
