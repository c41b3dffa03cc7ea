//! Delivery history, the business-rule filter and diversity sampling.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::PipelineConfig;
use crate::candidates::CandidateSet;
use crate::derived_rng;
use crate::gnn::ScoredPair;
use crate::graph::{Day, EntityId, EventKind, InteractionEvent};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Rating {
    Useful,
    NotUseful,
    #[default]
    None,
}

/// One delivered nudge and what the user did with it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Delivery {
    pub nudge: EntityId,
    pub sent: Day,
    pub opened: bool,
    pub rating: Rating,
    /// Day of the most recent rating.
    pub rated_at: Option<Day>,
    /// Day of the most recent not-useful rating, even if later revised.
    pub negative_at: Option<Day>,
}

/// Per-user delivery log.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeliveryHistory {
    per_user: BTreeMap<EntityId, Vec<Delivery>>,
}

impl DeliveryHistory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_events<'a>(events: impl IntoIterator<Item = &'a InteractionEvent>) -> Self {
        let mut h = Self::new();
        for e in events {
            h.record_event(e);
        }
        h
    }

    pub fn record_sent(&mut self, user: &EntityId, nudge: &EntityId, day: Day) {
        self.per_user.entry(user.clone()).or_default().push(Delivery {
            nudge: nudge.clone(),
            sent: day,
            opened: false,
            rating: Rating::None,
            rated_at: None,
            negative_at: None,
        });
    }

    /// Applies an engagement event to the latest delivery of that nudge. An
    /// open or rating with no recorded delivery creates one dated at the event.
    pub fn record_event(&mut self, e: &InteractionEvent) {
        let user = EntityId::user(e.user_id.as_str());
        let nudge = EntityId::nudge(e.nudge_id.as_str());
        if e.event == EventKind::Sent {
            self.record_sent(&user, &nudge, e.day);
            return;
        }
        if self.latest_mut(&user, &nudge).is_none() {
            self.record_sent(&user, &nudge, e.day);
        }
        let d = self.latest_mut(&user, &nudge).expect("just ensured");
        match e.event {
            EventKind::Opened => d.opened = true,
            EventKind::RatedUseful | EventKind::RatedNotUseful => {
                d.opened = true;
                d.rating = if e.event == EventKind::RatedUseful {
                    Rating::Useful
                } else {
                    Rating::NotUseful
                };
                d.rated_at = Some(e.day);
                if e.event == EventKind::RatedNotUseful {
                    d.negative_at = Some(d.negative_at.map_or(e.day, |x| x.max(e.day)));
                }
            }
            EventKind::Sent => unreachable!(),
        }
    }

    fn latest_mut(&mut self, user: &EntityId, nudge: &EntityId) -> Option<&mut Delivery> {
        self.per_user
            .get_mut(user)?
            .iter_mut()
            .rev()
            .find(|d| &d.nudge == nudge)
    }

    pub fn deliveries(&self, user: &EntityId) -> &[Delivery] {
        self.per_user.get(user).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn users(&self) -> impl Iterator<Item = &EntityId> + '_ {
        self.per_user.keys()
    }

    /// Latest day any record was written.
    pub fn latest_day(&self) -> Option<Day> {
        self.per_user
            .values()
            .flatten()
            .map(|d| d.sent.max(d.rated_at.unwrap_or(0)))
            .max()
    }

    /// Nudges given a not-useful rating within the last `d_neg` days.
    pub fn negatively_rated(&self, user: &EntityId, today: Day, d_neg: u32) -> BTreeSet<&EntityId> {
        self.deliveries(user)
            .iter()
            .filter(|d| d.negative_at.is_some_and(|day| within(day, today, d_neg)))
            .map(|d| &d.nudge)
            .collect()
    }

    /// Nudges sent within the last `d_recent` days.
    pub fn recently_sent(&self, user: &EntityId, today: Day, d_recent: u32) -> BTreeSet<&EntityId> {
        self.deliveries(user)
            .iter()
            .filter(|d| within(d.sent, today, d_recent))
            .map(|d| &d.nudge)
            .collect()
    }
}

/// `day` lies in the `window` days ending today. Records dated after today
/// count as inside the window.
fn within(day: Day, today: Day, window: u32) -> bool {
    window > 0 && today.checked_sub(day).is_none_or(|age| age < window)
}

/// Drops negatively rated and recently sent nudges, keeps the ranking order
/// and truncates to the daily budget.
pub fn constraints_filter(
    ranked: &BTreeMap<EntityId, Vec<ScoredPair>>,
    history: &DeliveryHistory,
    cfg: &PipelineConfig,
    today: Day,
) -> BTreeMap<EntityId, Vec<ScoredPair>> {
    ranked
        .iter()
        .map(|(user, list)| (user.clone(), filter_user(user, list, history, cfg, today)))
        .collect()
}

pub(crate) fn filter_user(
    user: &EntityId,
    list: &[ScoredPair],
    history: &DeliveryHistory,
    cfg: &PipelineConfig,
    today: Day,
) -> Vec<ScoredPair> {
    let neg = history.negatively_rated(user, today, cfg.d_neg_filter);
    let recent = history.recently_sent(user, today, cfg.d_recent);
    list.iter()
        .filter(|s| !neg.contains(&s.nudge) && !recent.contains(&s.nudge))
        .take(cfg.k_daily.limit())
        .cloned()
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Slot {
    pub nudge: EntityId,
    pub replaced: bool,
}

/// Replaces each slot, with probability `p_diversity`, by a uniform draw from
/// the user's candidates that are neither selected nor blocked.
pub fn diversity_sample(
    filtered: &BTreeMap<EntityId, Vec<ScoredPair>>,
    candidates: &CandidateSet,
    history: &DeliveryHistory,
    cfg: &PipelineConfig,
    today: Day,
) -> BTreeMap<EntityId, Vec<Slot>> {
    filtered
        .iter()
        .map(|(user, list)| {
            let nudges: Vec<EntityId> = list.iter().map(|s| s.nudge.clone()).collect();
            (user.clone(), diversify_user(user, &nudges, candidates, history, cfg, today))
        })
        .collect()
}

pub(crate) fn diversify_user(
    user: &EntityId,
    selected: &[EntityId],
    candidates: &CandidateSet,
    history: &DeliveryHistory,
    cfg: &PipelineConfig,
    today: Day,
) -> Vec<Slot> {
    let keep = |n: &EntityId| Slot {
        nudge: n.clone(),
        replaced: false,
    };
    if cfg.p_diversity <= 0.0 {
        return selected.iter().map(keep).collect();
    }
    let mut rng = derived_rng(
        cfg.seed,
        &[b"diversity", user.local_id.as_bytes(), &today.to_le_bytes()],
    );
    let mut blocked = history.negatively_rated(user, today, cfg.d_neg_filter);
    if cfg.diversity_respects_recency {
        blocked.extend(history.recently_sent(user, today, cfg.d_recent));
    }
    let mut taken: BTreeSet<&EntityId> = selected.iter().collect();
    let mut out = Vec::with_capacity(selected.len());
    for n in selected {
        if !rng.gen_bool(cfg.p_diversity) {
            out.push(keep(n));
            continue;
        }
        let pool: Vec<&EntityId> = candidates
            .get(user)
            .iter()
            .map(|c| &c.nudge)
            .filter(|c| !taken.contains(c) && !blocked.contains(c))
            .collect();
        if pool.is_empty() {
            out.push(keep(n));
            continue;
        }
        let pick = pool[rng.gen_range(0..pool.len())];
        taken.insert(pick);
        out.push(Slot {
            nudge: pick.clone(),
            replaced: true,
        });
    }
    out
}
