use super::linalg::{dot, leaky_relu, softmax_in_place};
use super::model::ModelState;
use super::GnnError;
use crate::graph::{EntityId, Relation};

fn embedding<'a>(model: &'a ModelState, id: &EntityId) -> Result<&'a [f64], GnnError> {
    model
        .entity_embedding(id)
        .ok_or_else(|| GnnError::UnknownEntity(id.clone()))
}

/// Knowledge-aware attention of `head` over `neighbors`, normalized over the
/// whole list: `softmax_b((W_r e_b)ᵀ tanh(W_r e_a + e_r))`.
///
/// An empty neighbor list yields an empty weight list.
pub fn attention_weights(
    model: &ModelState,
    head: &EntityId,
    neighbors: &[(Relation, EntityId)],
) -> Result<Vec<f64>, GnnError> {
    let ea = embedding(model, head)?;
    let k = model.hp.relation_dim;
    let mut pa = vec![0.0; k];
    let mut pb = vec![0.0; k];
    let mut t = vec![0.0; k];
    let mut scores = Vec::with_capacity(neighbors.len());
    for (r, tail) in neighbors {
        let ri = model.relation_index(*r).ok_or(GnnError::UnknownRelation(*r))?;
        let w = &model.relation_proj[ri];
        let er = &model.relation_emb[ri];
        w.matvec(ea, &mut pa);
        w.matvec(embedding(model, tail)?, &mut pb);
        for c in 0..k {
            t[c] = (pa[c] + er[c]).tanh();
        }
        scores.push(dot(&pb, &t));
    }
    softmax_in_place(&mut scores);
    Ok(scores)
}

/// Single-head graph attention of `head` over `neighbors` plus a self edge:
/// `softmax_b(LeakyReLU(aᵀ [W e_a ‖ W e_b]))`.
///
/// Returns `neighbors.len() + 1` weights; the last one belongs to the self
/// edge.
pub fn gat_attention_weights(
    model: &ModelState,
    head: &EntityId,
    neighbors: &[EntityId],
) -> Result<Vec<f64>, GnnError> {
    let k = model.hp.relation_dim;
    if model.gat_attn.len() != 2 * k {
        return Err(GnnError::InvalidHyperParams(
            "model was not built with graph attention".into(),
        ));
    }
    let (a_head, a_tail) = model.gat_attn.split_at(k);
    let mut q = vec![0.0; k];
    model.gat_proj.matvec(embedding(model, head)?, &mut q);
    let s_head = dot(a_head, &q);
    let mut scores = Vec::with_capacity(neighbors.len() + 1);
    for b in neighbors.iter().chain(std::iter::once(head)) {
        model.gat_proj.matvec(embedding(model, b)?, &mut q);
        scores.push(leaky_relu(s_head + dot(a_tail, &q), model.hp.attention_slope));
    }
    softmax_in_place(&mut scores);
    Ok(scores)
}
