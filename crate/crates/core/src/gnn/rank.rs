use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::linalg::dot;
use super::model::ModelState;
use super::propagate::{propagate, Propagated};
use super::GnnError;
use crate::candidates::CandidateSet;
use crate::graph::{EntityId, GraphSnapshot};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredPair {
    pub user: EntityId,
    pub nudge: EntityId,
    pub score: f64,
}

/// Predicted preference `ŷ = e_uᵀ e_i` over final-layer embeddings.
pub fn predict(propagated: &Propagated, user: &EntityId, nudge: &EntityId) -> Result<f64, GnnError> {
    let eu = propagated
        .get(user)
        .ok_or_else(|| GnnError::UnknownEntity(user.clone()))?;
    let ei = propagated
        .get(nudge)
        .ok_or_else(|| GnnError::UnknownEntity(nudge.clone()))?;
    Ok(dot(eu, ei))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairError {
    pub user: EntityId,
    pub nudge: EntityId,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Ranking {
    pub ranked: BTreeMap<EntityId, Vec<ScoredPair>>,
    pub errors: Vec<PairError>,
}

/// Score order: descending score, ties by ascending nudge id.
pub fn sort_scored(pairs: &mut [ScoredPair]) {
    pairs.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.nudge.cmp(&b.nudge)));
}

/// Scores every candidate pair against precomputed embeddings. Pairs whose
/// entities have no embedding are skipped and reported.
pub fn rank_with<'a>(
    propagated: &Propagated,
    candidates: impl IntoIterator<Item = (&'a EntityId, &'a [crate::candidates::Candidate])>,
) -> Ranking {
    let mut out = Ranking::default();
    for (user, cands) in candidates {
        let mut scored = Vec::with_capacity(cands.len());
        for c in cands {
            match predict(propagated, user, &c.nudge) {
                Ok(score) if score.is_finite() => scored.push(ScoredPair {
                    user: user.clone(),
                    nudge: c.nudge.clone(),
                    score,
                }),
                Ok(score) => out.errors.push(PairError {
                    user: user.clone(),
                    nudge: c.nudge.clone(),
                    reason: format!("non-finite score {score}"),
                }),
                Err(e) => out.errors.push(PairError {
                    user: user.clone(),
                    nudge: c.nudge.clone(),
                    reason: e.to_string(),
                }),
            }
        }
        sort_scored(&mut scored);
        out.ranked.insert(user.clone(), scored);
    }
    out
}

pub fn rank_candidates(
    model: &ModelState,
    snapshot: &GraphSnapshot,
    candidates: &CandidateSet,
) -> Result<Ranking, GnnError> {
    let p = propagate(model, snapshot)?;
    Ok(rank_with(&p, candidates.iter()))
}
