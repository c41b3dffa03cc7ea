//! Offline evaluation: holdout splits, top-k ranking metrics, grid search,
//! daily metric monitoring and the scaling benchmark.

mod bench;
mod grid;
mod monitor;

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::candidates::{generate_all, rules_from_library, CandidateError, CandidateSet, TargetingRule};
use crate::derived_rng;
use crate::gnn::{propagate, rank_with, GnnError, ModelState, PositiveLabels};
use crate::graph::{
    construct_graph, event_relation, ConstructOptions, EntityId, GraphError, GraphSnapshot, InteractionEvent,
    MarkerCatalog, NudgeTemplate, ParticipantRecord,
};
use crate::pipeline::PipelineError;
use crate::synth::SynthError;

pub use bench::{linear_fit, scaling_benchmark, LinearFit, ScalingPoint, ScalingReport};
pub use grid::{grid_search, table_space, GridReport, GridRow};
pub use monitor::{std_dev, DailyMonitor, MonitorEntry};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("holdout fraction must lie strictly between 0 and 1, got {0}")]
    InvalidFraction(f64),
    #[error("need at least 2 positive user-nudge interactions to split, got {0}")]
    TooFewInteractions(usize),
    #[error("k must be at least 1")]
    InvalidK,
    #[error("empty search space")]
    EmptySpace,
    #[error("scaling fit needs at least 3 distinct volumes, got {0}")]
    TooFewVolumes(usize),
    #[error(transparent)]
    Gnn(#[from] GnnError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Candidate(#[from] CandidateError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Interaction log split by user-nudge pair: every event of a hidden pair
/// goes to `test`, everything else to `train`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HoldoutSplit {
    pub train: Vec<InteractionEvent>,
    pub test: Vec<InteractionEvent>,
    pub fraction: f64,
    pub seed: u64,
    /// Number of positive pairs before the split.
    pub pairs: usize,
    /// Number of positive pairs hidden.
    pub hidden: usize,
}

impl HoldoutSplit {
    /// Held-out positive nudges per user.
    pub fn relevant(&self, positives: &PositiveLabels) -> BTreeMap<EntityId, BTreeSet<EntityId>> {
        positive_pairs(&self.test, positives)
            .into_iter()
            .fold(BTreeMap::new(), |mut m, (u, n)| {
                m.entry(EntityId::user(u)).or_default().insert(EntityId::nudge(n));
                m
            })
    }
}

fn positive_pairs(events: &[InteractionEvent], positives: &PositiveLabels) -> BTreeSet<(String, String)> {
    events
        .iter()
        .filter(|e| positives.accepts(event_relation(e.event)))
        .map(|e| (e.user_id.clone(), e.nudge_id.clone()))
        .collect()
}

/// Hides `round(fraction · n)` of the `n` positive user-nudge pairs (at least
/// one, at most `n − 1`), chosen uniformly given `seed`.
pub fn holdout_split(
    interactions: &[InteractionEvent],
    fraction: f64,
    seed: u64,
    positives: &PositiveLabels,
) -> Result<HoldoutSplit, EvalError> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(EvalError::InvalidFraction(fraction));
    }
    let mut pairs: Vec<(String, String)> = positive_pairs(interactions, positives).into_iter().collect();
    let n = pairs.len();
    if n < 2 {
        return Err(EvalError::TooFewInteractions(n));
    }
    let hidden = ((fraction * n as f64).round() as usize).clamp(1, n - 1);
    pairs.shuffle(&mut derived_rng(seed, &[b"holdout"]));
    let test_pairs: BTreeSet<(String, String)> = pairs.into_iter().take(hidden).collect();
    let (test, train) = interactions
        .iter()
        .cloned()
        .partition(|e| test_pairs.contains(&(e.user_id.clone(), e.nudge_id.clone())));
    Ok(HoldoutSplit {
        train,
        test,
        fraction,
        seed,
        pairs: n,
        hidden,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub k: usize,
    pub precision_at_k: f64,
    pub recall_at_k: f64,
    pub ndcg_at_k: f64,
    pub mean_average_precision: f64,
    /// Users with a non-empty relevant set, over which the means are taken.
    pub users: usize,
}

/// Per-user top-k metrics averaged over users that have at least one
/// relevant item. A user with relevant items but no recommendation list
/// scores zero.
///
/// - precision@k: hits in the top k, divided by k
/// - recall@k: hits in the top k, divided by the relevant count
/// - NDCG@k: binary gains, discount `1 / log₂(position + 1)`
/// - MAP: average precision over the full list, normalized by the relevant
///   count
pub fn metrics_at_k(
    recommended: &BTreeMap<EntityId, Vec<EntityId>>,
    relevant: &BTreeMap<EntityId, BTreeSet<EntityId>>,
    k: usize,
) -> Result<MetricReport, EvalError> {
    if k == 0 {
        return Err(EvalError::InvalidK);
    }
    let mut sums = [0.0; 4];
    let mut users = 0;
    let empty = Vec::new();
    for (user, rel) in relevant.iter().filter(|(_, r)| !r.is_empty()) {
        let list = recommended.get(user).unwrap_or(&empty);
        users += 1;
        let mut hits_k = 0usize;
        let mut dcg = 0.0;
        let mut hits = 0usize;
        let mut ap = 0.0;
        for (i, item) in list.iter().enumerate() {
            if !rel.contains(item) {
                continue;
            }
            hits += 1;
            ap += hits as f64 / (i + 1) as f64;
            if i < k {
                hits_k += 1;
                dcg += 1.0 / ((i + 2) as f64).log2();
            }
        }
        let idcg: f64 = (0..k.min(rel.len())).map(|i| 1.0 / ((i + 2) as f64).log2()).sum();
        sums[0] += hits_k as f64 / k as f64;
        sums[1] += hits_k as f64 / rel.len() as f64;
        sums[2] += dcg / idcg;
        sums[3] += ap / rel.len() as f64;
    }
    let mean = |s: f64| if users == 0 { 0.0 } else { s / users as f64 };
    Ok(MetricReport {
        k,
        precision_at_k: mean(sums[0]),
        recall_at_k: mean(sums[1]),
        ndcg_at_k: mean(sums[2]),
        mean_average_precision: mean(sums[3]),
        users,
    })
}

/// Train graph, candidates and held-out relevance for one split.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub split: HoldoutSplit,
    pub train_snapshot: GraphSnapshot,
    pub rules: Vec<TargetingRule>,
    pub candidates: CandidateSet,
    pub relevant: BTreeMap<EntityId, BTreeSet<EntityId>>,
}

impl Experiment {
    pub fn prepare(
        library: &[NudgeTemplate],
        participants: &[ParticipantRecord],
        interactions: &[InteractionEvent],
        catalog: &MarkerCatalog,
        fraction: f64,
        seed: u64,
        positives: &PositiveLabels,
    ) -> Result<Self, EvalError> {
        let split = holdout_split(interactions, fraction, seed, positives)?;
        let time = interactions.iter().map(|e| e.day).max();
        let built = construct_graph(
            library,
            participants,
            &split.train,
            catalog,
            &ConstructOptions {
                include_sent: false,
                time,
            },
        )?;
        let rules = rules_from_library(library)?;
        let candidates = generate_all(&built.snapshot, &rules)?;
        let relevant = split.relevant(positives);
        Ok(Self {
            split,
            train_snapshot: built.snapshot,
            rules,
            candidates,
            relevant,
        })
    }

    /// Candidate lists minus nudges the user already engaged with in the
    /// training graph, in candidate order.
    pub fn unseen_candidates(&self) -> CandidateSet {
        let mut out = CandidateSet::new();
        for (user, cands) in self.candidates.iter() {
            let seen: BTreeSet<&EntityId> = self
                .train_snapshot
                .neighbors(user)
                .filter(|(r, _, _)| r.is_interaction())
                .map(|(_, t, _)| t)
                .collect();
            out.insert(
                user.clone(),
                cands.iter().filter(|c| !seen.contains(&c.nudge)).cloned().collect(),
            );
        }
        out
    }

    /// Full ranked lists of unseen candidates under `model`.
    pub fn recommend(&self, model: &ModelState) -> Result<BTreeMap<EntityId, Vec<EntityId>>, EvalError> {
        let p = propagate(model, &self.train_snapshot)?;
        let unseen = self.unseen_candidates();
        Ok(rank_with(&p, unseen.iter())
            .ranked
            .into_iter()
            .map(|(u, list)| (u, list.into_iter().map(|s| s.nudge).collect()))
            .collect())
    }

    pub fn evaluate(&self, model: &ModelState, k: usize) -> Result<MetricReport, EvalError> {
        metrics_at_k(&self.recommend(model)?, &self.relevant, k)
    }

    /// Uniformly shuffled unseen candidate lists.
    pub fn random_rankings(&self, seed: u64) -> BTreeMap<EntityId, Vec<EntityId>> {
        self.unseen_candidates()
            .iter()
            .map(|(u, cands)| {
                let mut list: Vec<EntityId> = cands.iter().map(|c| c.nudge.clone()).collect();
                list.shuffle(&mut derived_rng(seed, &[b"random ranking", u.local_id.as_bytes()]));
                (u.clone(), list)
            })
            .collect()
    }

    /// Expected precision@k of a uniformly random ordering of each user's
    /// unseen candidates, computed in closed form.
    pub fn random_precision(&self, k: usize) -> f64 {
        let unseen = self.unseen_candidates();
        let mut total = 0.0;
        let mut users = 0;
        for (user, rel) in self.relevant.iter().filter(|(_, r)| !r.is_empty()) {
            users += 1;
            let cands = unseen.get(user);
            if cands.is_empty() {
                continue;
            }
            let hits = cands.iter().filter(|c| rel.contains(&c.nudge)).count() as f64;
            let m = cands.len() as f64;
            total += hits * (k as f64).min(m) / m / k as f64;
        }
        if users == 0 {
            0.0
        } else {
            total / users as f64
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::EventKind;

    fn ids(xs: &[&str]) -> Vec<EntityId> {
        xs.iter().map(|x| EntityId::nudge(*x)).collect()
    }

    fn one_user(list: &[&str], rel: &[&str]) -> (BTreeMap<EntityId, Vec<EntityId>>, BTreeMap<EntityId, BTreeSet<EntityId>>) {
        let u = EntityId::user("u");
        (
            BTreeMap::from([(u.clone(), ids(list))]),
            BTreeMap::from([(u, ids(rel).into_iter().collect())]),
        )
    }

    #[test]
    fn worked_example() {
        let (rec, rel) = one_user(&["a", "b", "c"], &["b"]);
        let m = metrics_at_k(&rec, &rel, 3).unwrap();
        assert!((m.precision_at_k - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(m.recall_at_k, 1.0);
        assert!((m.ndcg_at_k - 1.0 / 3f64.log2()).abs() < 1e-15);
        assert_eq!(m.mean_average_precision, 0.5);
    }

    #[test]
    fn perfect_and_disjoint() {
        let (rec, rel) = one_user(&["a", "b", "c"], &["a", "b", "c"]);
        let m = metrics_at_k(&rec, &rel, 3).unwrap();
        assert_eq!(
            (m.precision_at_k, m.recall_at_k, m.ndcg_at_k, m.mean_average_precision),
            (1.0, 1.0, 1.0, 1.0)
        );
        let (rec, rel) = one_user(&["a", "b", "c"], &["z"]);
        assert_eq!(metrics_at_k(&rec, &rel, 3).unwrap().precision_at_k, 0.0);
        assert!(metrics_at_k(&rec, &rel, 0).is_err());
    }

    fn events(n: usize) -> Vec<InteractionEvent> {
        (0..n)
            .flat_map(|i| {
                [EventKind::Sent, EventKind::Opened].map(|event| InteractionEvent {
                    user_id: format!("u{}", i % 7),
                    nudge_id: format!("n{i}"),
                    event,
                    day: 1,
                })
            })
            .collect()
    }

    #[test]
    fn split_sizes_and_determinism() {
        let ev = events(100);
        let s = holdout_split(&ev, 0.25, 3, &PositiveLabels::default()).unwrap();
        assert_eq!(s.hidden, 25);
        assert_eq!(s.test.len(), 50);
        assert_eq!(s.train.len() + s.test.len(), ev.len());
        assert_eq!(s, holdout_split(&ev, 0.25, 3, &PositiveLabels::default()).unwrap());
        let two = holdout_split(&events(2), 0.5, 0, &PositiveLabels::default()).unwrap();
        assert_eq!(two.hidden, 1);
        assert!(holdout_split(&events(1), 0.5, 0, &PositiveLabels::default()).is_err());
        assert!(holdout_split(&ev, 1.0, 0, &PositiveLabels::default()).is_err());
    }
}
