//! Nudge delivery and feedback service.
//!
//! The service sits over the published output of each daily run plus an
//! append-only feedback log. Accepted feedback and staged participant records
//! are folded into the graph by [`NudgeService::advance_day`].

mod http;

use std::collections::{BTreeMap, BTreeSet};
use std::fs::OpenOptions;
use std::io::{BufRead, Write};
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{
    add_user, apply_events_in_place, Day, EntityId, EntityKind, GraphError, GraphSnapshot, InteractionEvent,
    MarkerCatalog, ParticipantRecord, RejectedEvent,
};
use crate::pipeline::{DailyRun, DeliveryHistory};

pub use http::{router, SharedService};

/// Feedback uses the interaction record schema.
pub type FeedbackEvent = InteractionEvent;

#[derive(Debug, Error)]
pub enum ServingError {
    #[error("unknown user `{0}`")]
    NotFound(String),
    #[error("no nudges available for day {day}: {reason}")]
    Unavailable { day: Day, reason: String },
    #[error("unparseable input: {0}")]
    Parse(String),
    #[error("day {requested} is not after the current graph day {current}")]
    StaleDay { requested: Day, current: Day },
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeliveryStatus {
    Generated,
    Fetched,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NudgeDelivery {
    pub user_id: String,
    pub nudge_id: String,
    pub text: String,
    pub day: Day,
    pub status: DeliveryStatus,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rejection {
    /// Position in the submitted batch, or 1-based line number for files.
    pub index: usize,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeedbackOutcome {
    pub accepted: usize,
    pub rejected: Vec<Rejection>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestOutcome {
    pub accepted: usize,
    pub rejected: Vec<Rejection>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CycleOutcome {
    pub day: Day,
    pub events_applied: usize,
    pub events_rejected: Vec<RejectedEvent>,
    pub users_added: usize,
    pub users_updated: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Health {
    pub graph_day: Day,
    pub last_run_day: Option<Day>,
    pub users: usize,
    pub deliveries_generated: usize,
    pub deliveries_fetched: usize,
    pub feedback_accepted: usize,
    pub feedback_rejected: usize,
    pub pending_events: usize,
    pub staged_participants: usize,
    pub batches_retried: usize,
}

#[derive(Debug)]
pub struct NudgeService {
    catalog: MarkerCatalog,
    snapshot: GraphSnapshot,
    history: DeliveryHistory,
    /// day -> user -> deliveries
    runs: BTreeMap<Day, BTreeMap<String, Vec<NudgeDelivery>>>,
    pending: Vec<FeedbackEvent>,
    staged: BTreeMap<String, ParticipantRecord>,
    event_log: Option<PathBuf>,
    counters: Health,
}

impl NudgeService {
    pub fn new(catalog: MarkerCatalog, snapshot: GraphSnapshot, history: DeliveryHistory) -> Self {
        Self {
            catalog,
            snapshot,
            history,
            runs: BTreeMap::new(),
            pending: Vec::new(),
            staged: BTreeMap::new(),
            event_log: None,
            counters: Health::default(),
        }
    }

    /// Appends every accepted feedback event to `path` as JSON lines.
    pub fn with_event_log(mut self, path: impl Into<PathBuf>) -> Self {
        self.event_log = Some(path.into());
        self
    }

    pub fn snapshot(&self) -> &GraphSnapshot {
        &self.snapshot
    }

    pub fn history(&self) -> &DeliveryHistory {
        &self.history
    }

    pub fn pending_events(&self) -> &[FeedbackEvent] {
        &self.pending
    }

    /// Makes a finished daily run available for fetching.
    pub fn publish_run(&mut self, run: &DailyRun) {
        let mut per_user: BTreeMap<String, Vec<NudgeDelivery>> = BTreeMap::new();
        for (user, list) in &run.selections {
            let entry = per_user.entry(user.local_id.clone()).or_default();
            for s in list {
                entry.push(NudgeDelivery {
                    user_id: user.local_id.clone(),
                    nudge_id: s.nudge.local_id.clone(),
                    text: s.text.clone(),
                    day: run.day,
                    status: DeliveryStatus::Generated,
                });
            }
        }
        self.counters.deliveries_generated += per_user.values().map(Vec::len).sum::<usize>();
        self.counters.batches_retried += run.telemetry.batches_retried;
        self.counters.last_run_day = Some(self.counters.last_run_day.map_or(run.day, |d| d.max(run.day)));
        self.runs.insert(run.day, per_user);
    }

    /// The user's deliveries for `day` that have not been fetched yet; they
    /// are marked fetched and logged as sent.
    pub fn get_nudges(&mut self, user_id: &str, day: Day) -> Result<Vec<NudgeDelivery>, ServingError> {
        let user = EntityId::new(EntityKind::User, user_id).map_err(|_| ServingError::NotFound(user_id.into()))?;
        let Some(run) = self.runs.get_mut(&day) else {
            return Err(ServingError::Unavailable {
                day,
                reason: "the batch run for this day has not completed".into(),
            });
        };
        let known = self.snapshot.contains(&user) || run.contains_key(user_id);
        if !known {
            return Err(ServingError::NotFound(user_id.into()));
        }
        let mut out = Vec::new();
        for d in run.get_mut(user_id).into_iter().flatten() {
            if d.status == DeliveryStatus::Generated {
                d.status = DeliveryStatus::Fetched;
                self.history.record_sent(&user, &EntityId::nudge(d.nudge_id.as_str()), day);
                out.push(d.clone());
            }
        }
        self.counters.deliveries_fetched += out.len();
        Ok(out)
    }

    fn delivered(&self, e: &FeedbackEvent) -> bool {
        self.runs
            .range(..=e.day)
            .filter_map(|(_, users)| users.get(&e.user_id))
            .flatten()
            .any(|d| d.nudge_id == e.nudge_id)
    }

    fn check(&self, e: &FeedbackEvent) -> Result<(), String> {
        let user = EntityId::new(EntityKind::User, e.user_id.as_str()).map_err(|err| err.to_string())?;
        let nudge = EntityId::new(EntityKind::Nudge, e.nudge_id.as_str()).map_err(|err| err.to_string())?;
        if !self.snapshot.contains(&user) {
            return Err(format!("unknown user `{}`", e.user_id));
        }
        if !self.snapshot.contains(&nudge) {
            return Err(format!("unknown nudge `{}`", e.nudge_id));
        }
        if !self.delivered(e) {
            return Err(format!(
                "no delivery of `{}` to `{}` on or before day {}",
                e.nudge_id, e.user_id, e.day
            ));
        }
        Ok(())
    }

    /// Validates each event on its own; accepted ones enter the delivery
    /// history and are queued for the next graph update.
    pub fn post_feedback(&mut self, events: &[FeedbackEvent]) -> Result<FeedbackOutcome, ServingError> {
        let mut out = FeedbackOutcome::default();
        let mut accepted = Vec::new();
        for (index, e) in events.iter().enumerate() {
            match self.check(e) {
                Ok(()) => accepted.push(e.clone()),
                Err(reason) => out.rejected.push(Rejection { index, reason }),
            }
        }
        if let Some(path) = &self.event_log {
            let mut f = OpenOptions::new().create(true).append(true).open(path)?;
            crate::graph::write_jsonl(&mut f, &accepted)?;
            f.flush()?;
        }
        for e in &accepted {
            self.history.record_event(e);
        }
        out.accepted = accepted.len();
        self.counters.feedback_accepted += out.accepted;
        self.counters.feedback_rejected += out.rejected.len();
        self.pending.extend(accepted);
        Ok(out)
    }

    /// Like [`post_feedback`](Self::post_feedback) for raw JSON values;
    /// records that do not match the event schema are rejected individually.
    pub fn post_feedback_json(&mut self, values: &[serde_json::Value]) -> Result<FeedbackOutcome, ServingError> {
        let mut parsed = Vec::new();
        let mut positions = Vec::new();
        let mut malformed = Vec::new();
        for (i, v) in values.iter().enumerate() {
            match serde_json::from_value::<FeedbackEvent>(v.clone()) {
                Ok(e) => {
                    positions.push(i);
                    parsed.push(e);
                }
                Err(e) => malformed.push(Rejection {
                    index: i,
                    reason: format!("malformed event: {e}"),
                }),
            }
        }
        let mut out = self.post_feedback(&parsed)?;
        for r in &mut out.rejected {
            r.index = positions[r.index];
        }
        self.counters.feedback_rejected += malformed.len();
        out.rejected.extend(malformed);
        out.rejected.sort_by_key(|r| r.index);
        Ok(out)
    }

    /// Stages participant records (one JSON object per line) for the next
    /// cycle. Lines are checked against the catalog; when a user appears
    /// twice the later line wins and the earlier one is reported.
    pub fn ingest_participants<R: BufRead>(&mut self, reader: R) -> Result<IngestOutcome, ServingError> {
        let mut rows: Vec<(usize, ParticipantRecord)> = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: ParticipantRecord =
                serde_json::from_str(&line).map_err(|e| ServingError::Parse(format!("line {}: {e}", i + 1)))?;
            rows.push((i + 1, rec));
        }
        let mut out = IngestOutcome::default();
        let mut last_line: BTreeMap<&str, usize> = BTreeMap::new();
        for (line, rec) in &rows {
            last_line.insert(rec.user_id.as_str(), *line);
        }
        let mut accepted = Vec::new();
        for (line, rec) in &rows {
            let winner = last_line[rec.user_id.as_str()];
            let verdict = if winner != *line {
                Err(format!("superseded by line {winner} for user `{}`", rec.user_id))
            } else {
                EntityId::new(EntityKind::User, rec.user_id.as_str())
                    .and_then(|_| self.catalog.binarize(&rec.fields))
                    .map(|_| ())
                    .map_err(|e| e.to_string())
            };
            match verdict {
                Ok(()) => accepted.push(rec.clone()),
                Err(reason) => out.rejected.push(Rejection { index: *line, reason }),
            }
        }
        out.accepted = accepted.len();
        for rec in accepted {
            self.staged.insert(rec.user_id.clone(), rec);
        }
        Ok(out)
    }

    /// Moves the graph to `day`: staged participants are added or have their
    /// markers refreshed, then queued feedback becomes interaction edges.
    pub fn advance_day(&mut self, day: Day) -> Result<CycleOutcome, ServingError> {
        if day <= self.snapshot.time() {
            return Err(ServingError::StaleDay {
                requested: day,
                current: self.snapshot.time(),
            });
        }
        let mut next = self.snapshot.clone();
        next.set_time(day);
        let mut out = CycleOutcome {
            day,
            ..CycleOutcome::default()
        };
        for rec in self.staged.values() {
            let u = EntityId::new(EntityKind::User, rec.user_id.as_str())?;
            if next.contains(&u) {
                crate::graph::refresh_user(&mut next, &u, &rec.fields, &self.catalog, day)?;
                out.users_updated += 1;
            } else {
                add_user(&mut next, &rec.user_id, &rec.fields, &self.catalog, day)?;
                out.users_added += 1;
            }
        }
        out.events_rejected = apply_events_in_place(&mut next, &self.pending, false);
        out.events_applied = self
            .pending
            .iter()
            .filter(|e| e.event != crate::graph::EventKind::Sent)
            .count()
            - out.events_rejected.len();
        self.snapshot = next;
        self.pending.clear();
        self.staged.clear();
        Ok(out)
    }

    pub fn health(&self) -> Health {
        Health {
            graph_day: self.snapshot.time(),
            users: self.snapshot.entities_of(EntityKind::User).count(),
            pending_events: self.pending.len(),
            staged_participants: self.staged.len(),
            ..self.counters.clone()
        }
    }

    /// Users with a published delivery on `day`.
    pub fn users_served(&self, day: Day) -> BTreeSet<&str> {
        self.runs
            .get(&day)
            .map(|m| m.keys().map(String::as_str).collect())
            .unwrap_or_default()
    }
}
