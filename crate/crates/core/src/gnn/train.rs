//! Pairwise ranking training with plain minibatch SGD.
//!
//! Loss per step: mean over (user, positive, negative) triples of
//! `-ln σ(ŷ(u,i⁺) - ŷ(u,i⁻))`, plus `λ ‖Θ‖²` over every parameter tensor.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::linalg::{axpy, dot, Matrix};
use super::model::{HyperParams, ModelState};
use super::propagate::{backward, forward, CompiledGraph, Gradients};
use super::GnnError;
use crate::candidates::CandidateSet;
use crate::graph::{EntityId, EntityKind, GraphSnapshot};
use crate::rng::derived_rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    /// Frobenius norm of the entity embedding table after the epoch.
    pub embedding_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingTelemetry {
    pub epochs_run: usize,
    pub final_loss: f64,
    pub converged: bool,
    pub trace: Vec<EpochRecord>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct TrainOptions<'a> {
    /// Negatives are drawn from each user's candidates; all nudges otherwise.
    pub candidates: Option<&'a CandidateSet>,
}

/// Row-space (user, positive nudge, negative nudge).
type Triple = (usize, usize, usize);

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn loss_and_grads(model: &ModelState, g: &CompiledGraph, triples: &[Triple], l2: f64) -> (f64, Gradients) {
    let fwd = forward(model, g);
    let h = fwd.output();
    let mut g_out = Matrix::zeros(h.rows(), h.cols());
    let m = triples.len() as f64;
    let mut loss = 0.0;
    let mut diff = vec![0.0; h.cols()];
    for &(u, p, q) in triples {
        let (hu, hp, hq) = (h.row(u), h.row(p), h.row(q));
        let x = dot(hu, hp) - dot(hu, hq);
        loss += softplus(-x);
        let coef = -sigmoid(-x) / m;
        for ((d, a), b) in diff.iter_mut().zip(hp).zip(hq) {
            *d = a - b;
        }
        axpy(coef, &diff, g_out.row_mut(u));
        axpy(coef, hu, g_out.row_mut(p));
        axpy(-coef, hu, g_out.row_mut(q));
    }
    loss /= m;
    let mut grads = backward(model, g, &fwd, g_out);
    if l2 > 0.0 {
        loss += l2 * model.squared_norm();
        grads.add_scaled_params(model, 2.0 * l2);
    }
    (loss, grads)
}

fn rows_of(model: &ModelState, ids: [&EntityId; 3]) -> Result<Triple, GnnError> {
    let r = |id: &EntityId| model.entity_row(id).ok_or_else(|| GnnError::UnknownEntity(id.clone()));
    Ok((r(ids[0])?, r(ids[1])?, r(ids[2])?))
}

/// Training loss and its exact gradient for fixed (user, positive, negative)
/// triples, including the L2 term from `model`'s hyperparameters.
pub fn bpr_loss_and_gradients(
    model: &ModelState,
    snapshot: &GraphSnapshot,
    triples: &[(EntityId, EntityId, EntityId)],
) -> Result<(f64, Gradients), GnnError> {
    if triples.is_empty() {
        return Err(GnnError::NothingToTrain);
    }
    let g = CompiledGraph::new(model, snapshot)?;
    let rows = triples
        .iter()
        .map(|(u, p, n)| rows_of(model, [u, p, n]))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(loss_and_grads(model, &g, &rows, model.hp.l2))
}

struct TrainingData {
    positives: Vec<(usize, usize)>,
    negatives: BTreeMap<usize, Vec<usize>>,
}

fn training_data(
    model: &ModelState,
    snapshot: &GraphSnapshot,
    hp: &HyperParams,
    candidates: Option<&CandidateSet>,
) -> Result<TrainingData, GnnError> {
    let all_nudges: Vec<&EntityId> = snapshot.entities_of(EntityKind::Nudge).collect();
    let mut positives = Vec::new();
    let mut negatives = BTreeMap::new();
    for user in snapshot.entities_of(EntityKind::User) {
        let mut interacted = BTreeSet::new();
        let mut liked = BTreeSet::new();
        for (r, tail, _) in snapshot.neighbors(user) {
            if r.is_interaction() {
                interacted.insert(tail);
                if hp.positives.accepts(r) {
                    liked.insert(tail);
                }
            }
        }
        if liked.is_empty() {
            continue;
        }
        let u = model
            .entity_row(user)
            .ok_or_else(|| GnnError::UnknownEntity(user.clone()))?;
        for n in &liked {
            let row = model
                .entity_row(n)
                .ok_or_else(|| GnnError::UnknownEntity((*n).clone()))?;
            positives.push((u, row));
        }
        let pool: Vec<usize> = match candidates {
            Some(c) => c
                .get(user)
                .iter()
                .map(|c| &c.nudge)
                .filter(|n| !interacted.contains(n))
                .filter_map(|n| model.entity_row(n))
                .collect(),
            None => all_nudges
                .iter()
                .filter(|n| !interacted.contains(*n))
                .filter_map(|n| model.entity_row(n))
                .collect(),
        };
        negatives.insert(u, pool);
    }
    if positives.is_empty() {
        return Err(GnnError::NothingToTrain);
    }
    Ok(TrainingData {
        positives,
        negatives,
    })
}

pub fn train(
    snapshot: &GraphSnapshot,
    hp: &HyperParams,
    init: ModelState,
) -> Result<(ModelState, TrainingTelemetry), GnnError> {
    train_with(snapshot, hp, init, TrainOptions::default())
}

/// Minimizes the pairwise ranking loss from `init`, stopping after
/// `hp.max_epochs` or once `hp.patience` consecutive epochs fail to improve
/// the best epoch loss by a relative `hp.tolerance`.
pub fn train_with(
    snapshot: &GraphSnapshot,
    hp: &HyperParams,
    init: ModelState,
    opts: TrainOptions<'_>,
) -> Result<(ModelState, TrainingTelemetry), GnnError> {
    hp.validate()?;
    let mut model = init;
    if model.hp.entity_dim != hp.entity_dim
        || model.hp.relation_dim != hp.relation_dim
        || model.hp.layer_dims != hp.layer_dims
        || model.hp.attention != hp.attention
        || model.hp.aggregator != hp.aggregator
    {
        return Err(GnnError::DimensionMismatch(
            "training hyperparameters do not match the initial model".into(),
        ));
    }
    model.hp = hp.clone();
    let g = CompiledGraph::new(&model, snapshot)?;
    let mut data = training_data(&model, snapshot, hp, opts.candidates)?;
    if data.negatives.values().all(Vec::is_empty) {
        return Err(GnnError::NothingToTrain);
    }

    let mut rng = derived_rng(hp.seed, &[b"train"]);
    let mut trace = Vec::new();
    let mut converged = false;
    let mut best_loss = f64::INFINITY;
    let mut stale = 0;
    let mut triples = Vec::new();
    for epoch in 1..=hp.max_epochs {
        data.positives.shuffle(&mut rng);
        let mut total = 0.0;
        let mut count = 0usize;
        for chunk in data.positives.chunks(hp.batch_size) {
            triples.clear();
            for &(u, p) in chunk {
                let pool = &data.negatives[&u];
                if pool.is_empty() {
                    continue;
                }
                for _ in 0..hp.negatives {
                    triples.push((u, p, pool[rng.gen_range(0..pool.len())]));
                }
            }
            if triples.is_empty() {
                continue;
            }
            let (loss, grads) = loss_and_grads(&model, &g, &triples, hp.l2);
            grads.apply_sgd(&mut model, hp.learning_rate);
            total += loss * triples.len() as f64;
            count += triples.len();
        }
        if !model.is_finite() {
            return Err(GnnError::Diverged { epoch });
        }
        let loss = total / count as f64;
        trace.push(EpochRecord {
            epoch,
            loss,
            embedding_norm: model.entity_emb.frobenius_sq().sqrt(),
        });
        log::debug!("epoch {epoch}: loss {loss:.6}");
        if best_loss.is_finite() && (best_loss - loss) / best_loss.abs().max(f64::MIN_POSITIVE) < hp.tolerance {
            stale += 1;
            if stale >= hp.patience {
                converged = true;
                break;
            }
        } else {
            stale = 0;
        }
        best_loss = best_loss.min(loss);
    }
    let last = trace.last().expect("max_epochs >= 1 checked by caller");
    let telemetry = TrainingTelemetry {
        epochs_run: trace.len(),
        final_loss: last.loss,
        converged,
        trace,
    };
    Ok((model, telemetry))
}
