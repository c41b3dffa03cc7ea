//! Attentive propagation over the knowledge graph and its reverse-mode
//! gradient.
//!
//! Attention weights are computed once from the base (layer-0) embeddings and
//! shared by every layer. Layer `l` maps entity `a` to
//! `LeakyReLU(W_l · agg(h_a, Σ_b α_ab h_b))`, where `agg` is either a sum or
//! a concatenation.

use std::collections::HashMap;

use super::linalg::{axpy, dot, leaky_relu, leaky_relu_grad, softmax_in_place, Matrix};
use super::model::{Aggregator, AttentionKind, ModelState};
use super::GnnError;
use crate::graph::{EntityId, GraphSnapshot};

const NO_SLOT: u32 = u32::MAX;
/// Relation index marking the graph-attention self edge.
const SELF_EDGE: usize = usize::MAX;

/// CSR view of a snapshot in the model's row space.
#[derive(Debug, Clone)]
pub struct CompiledGraph {
    n: usize,
    offsets: Vec<usize>,
    tails: Vec<usize>,
    rels: Vec<usize>,
    /// `[relation][row] -> slot` into the per-relation projection cache.
    slot_of: Vec<Vec<u32>>,
    /// `[relation][slot] -> row`
    slot_rows: Vec<Vec<usize>>,
}

impl CompiledGraph {
    pub fn new(model: &ModelState, snapshot: &GraphSnapshot) -> Result<Self, GnnError> {
        let n = model.entity_count();
        let n_rel = model.relation_ids.len();
        let gat = model.hp.attention == AttentionKind::GraphAttention;
        let mut offsets = Vec::with_capacity(n + 1);
        let mut tails = Vec::new();
        let mut rels = Vec::new();
        let mut slot_of = vec![vec![NO_SLOT; n]; if gat { 0 } else { n_rel }];
        let mut slot_rows = vec![Vec::new(); if gat { 0 } else { n_rel }];
        let mut take_slot = |ri: usize, row: usize, slot_of: &mut Vec<Vec<u32>>| {
            if slot_of[ri][row] == NO_SLOT {
                slot_of[ri][row] = slot_rows[ri].len() as u32;
                slot_rows[ri].push(row);
            }
        };

        for e in snapshot.entities() {
            if model.entity_row(e).is_none() {
                return Err(GnnError::UnknownEntity(e.clone()));
            }
        }
        offsets.push(0);
        for (a, id) in model.entity_ids.iter().enumerate() {
            for (r, tail, _) in snapshot.neighbors(id) {
                let b = model
                    .entity_row(tail)
                    .ok_or_else(|| GnnError::UnknownEntity(tail.clone()))?;
                let ri = model.relation_index(r).ok_or(GnnError::UnknownRelation(r))?;
                tails.push(b);
                rels.push(ri);
                if !gat {
                    take_slot(ri, a, &mut slot_of);
                    take_slot(ri, b, &mut slot_of);
                }
            }
            if gat {
                tails.push(a);
                rels.push(SELF_EDGE);
            }
            offsets.push(tails.len());
        }
        Ok(Self {
            n,
            offsets,
            tails,
            rels,
            slot_of,
            slot_rows,
        })
    }

    pub fn node_count(&self) -> usize {
        self.n
    }

    pub fn edge_count(&self) -> usize {
        self.tails.len()
    }

    #[inline]
    fn edges(&self, a: usize) -> std::ops::Range<usize> {
        self.offsets[a]..self.offsets[a + 1]
    }
}

/// Intermediate values kept for the backward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    pub alpha: Vec<f64>,
    /// Knowledge-aware: per relation, `W_r e_x` for every slot.
    proj: Vec<Vec<f64>>,
    /// Knowledge-aware: per edge, `tanh(W_r e_a + e_r)`.
    tanh: Vec<f64>,
    /// Graph attention: `W e_x` per row.
    gat_q: Matrix,
    /// Graph attention: per edge pre-activation score.
    gat_pre: Vec<f64>,
    /// `hidden[0]` is the entity table, `hidden[l]` the output of layer l.
    pub hidden: Vec<Matrix>,
    neigh: Vec<Matrix>,
    pre: Vec<Matrix>,
}

impl Forward {
    pub fn output(&self) -> &Matrix {
        self.hidden.last().expect("at least the input layer")
    }
}

fn kgat_attention(model: &ModelState, g: &CompiledGraph, keep: bool) -> (Vec<f64>, Vec<Vec<f64>>, Vec<f64>) {
    let k = model.hp.relation_dim;
    let emb = &model.entity_emb;
    let proj: Vec<Vec<f64>> = g
        .slot_rows
        .iter()
        .enumerate()
        .map(|(ri, rows)| {
            let w = &model.relation_proj[ri];
            let mut out = vec![0.0; rows.len() * k];
            for (s, &row) in rows.iter().enumerate() {
                w.matvec(emb.row(row), &mut out[s * k..(s + 1) * k]);
            }
            out
        })
        .collect();
    let slot = |ri: usize, row: usize| g.slot_of[ri][row] as usize;

    let mut alpha = vec![0.0; g.edge_count()];
    let mut tanh_cache = if keep { vec![0.0; g.edge_count() * k] } else { Vec::new() };
    let mut t = vec![0.0; k];
    for a in 0..g.n {
        let range = g.edges(a);
        let mut last_rel = usize::MAX;
        for j in range.clone() {
            let ri = g.rels[j];
            if ri != last_rel {
                let pa = &proj[ri][slot(ri, a) * k..][..k];
                let er = &model.relation_emb[ri];
                for c in 0..k {
                    t[c] = (pa[c] + er[c]).tanh();
                }
                last_rel = ri;
            }
            let pb = &proj[ri][slot(ri, g.tails[j]) * k..][..k];
            alpha[j] = dot(pb, &t);
            if keep {
                tanh_cache[j * k..(j + 1) * k].copy_from_slice(&t);
            }
        }
        softmax_in_place(&mut alpha[range]);
    }
    (alpha, proj, tanh_cache)
}

fn gat_attention(model: &ModelState, g: &CompiledGraph) -> (Vec<f64>, Matrix, Vec<f64>) {
    let k = model.hp.relation_dim;
    let slope = model.hp.attention_slope;
    let mut q = Matrix::zeros(g.n, k);
    for x in 0..g.n {
        model.gat_proj.matvec(model.entity_emb.row(x), q.row_mut(x));
    }
    let (a_head, a_tail) = model.gat_attn.split_at(k);
    let s_head: Vec<f64> = (0..g.n).map(|x| dot(a_head, q.row(x))).collect();
    let s_tail: Vec<f64> = (0..g.n).map(|x| dot(a_tail, q.row(x))).collect();
    let mut pre = vec![0.0; g.edge_count()];
    let mut alpha = vec![0.0; g.edge_count()];
    for a in 0..g.n {
        let range = g.edges(a);
        for j in range.clone() {
            pre[j] = s_head[a] + s_tail[g.tails[j]];
            alpha[j] = leaky_relu(pre[j], slope);
        }
        softmax_in_place(&mut alpha[range]);
    }
    (alpha, q, pre)
}

fn apply_layer(
    model: &ModelState,
    g: &CompiledGraph,
    alpha: &[f64],
    l: usize,
    h: &Matrix,
) -> (Matrix, Matrix, Matrix) {
    let w = &model.layers[l];
    let width = h.cols();
    let slope = model.hp.leaky_slope;
    let mut neigh = Matrix::zeros(g.n, width);
    let mut pre = Matrix::zeros(g.n, w.rows());
    let mut out = Matrix::zeros(g.n, w.rows());
    let mut input = vec![0.0; w.cols()];
    for a in 0..g.n {
        let na = neigh.row_mut(a);
        for j in g.edges(a) {
            axpy(alpha[j], h.row(g.tails[j]), na);
        }
        match model.hp.aggregator {
            Aggregator::SumLinear => {
                for ((x, s), n) in input.iter_mut().zip(h.row(a)).zip(neigh.row(a)) {
                    *x = s + n;
                }
            }
            Aggregator::ConcatLinear => {
                input[..width].copy_from_slice(h.row(a));
                input[width..].copy_from_slice(neigh.row(a));
            }
        }
        w.matvec(&input, pre.row_mut(a));
        for (o, z) in out.row_mut(a).iter_mut().zip(pre.row(a)) {
            *o = leaky_relu(*z, slope);
        }
    }
    (neigh, pre, out)
}

/// Full forward pass keeping every intermediate needed by [`backward`].
pub fn forward(model: &ModelState, g: &CompiledGraph) -> Forward {
    let (alpha, proj, tanh, gat_q, gat_pre) = match model.hp.attention {
        AttentionKind::KnowledgeAware => {
            let (alpha, proj, tanh) = kgat_attention(model, g, true);
            (alpha, proj, tanh, Matrix::zeros(0, 0), Vec::new())
        }
        AttentionKind::GraphAttention => {
            let (alpha, q, pre) = gat_attention(model, g);
            (alpha, Vec::new(), Vec::new(), q, pre)
        }
    };
    let mut hidden = vec![model.entity_emb.clone()];
    let mut neigh = Vec::new();
    let mut pre = Vec::new();
    for l in 0..model.layers.len() {
        let (n, z, h) = apply_layer(model, g, &alpha, l, &hidden[l]);
        neigh.push(n);
        pre.push(z);
        hidden.push(h);
    }
    Forward {
        alpha,
        proj,
        tanh,
        gat_q,
        gat_pre,
        hidden,
        neigh,
        pre,
    }
}

/// Attention weights per edge of the compiled graph.
pub fn compiled_attention(model: &ModelState, g: &CompiledGraph) -> Vec<f64> {
    match model.hp.attention {
        AttentionKind::KnowledgeAware => kgat_attention(model, g, false).0,
        AttentionKind::GraphAttention => gat_attention(model, g).0,
    }
}

/// Final-layer embeddings without keeping intermediates.
pub fn forward_output(model: &ModelState, g: &CompiledGraph) -> Matrix {
    let alpha = compiled_attention(model, g);
    let mut h = model.entity_emb.clone();
    for l in 0..model.layers.len() {
        h = apply_layer(model, g, &alpha, l, &h).2;
    }
    h
}

/// Gradient buffers shaped like the model's parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub entity: Matrix,
    pub relation_emb: Vec<Vec<f64>>,
    pub relation_proj: Vec<Matrix>,
    pub layers: Vec<Matrix>,
    pub gat_proj: Matrix,
    pub gat_attn: Vec<f64>,
}

impl Gradients {
    pub fn zeros_like(model: &ModelState) -> Self {
        Self {
            entity: Matrix::zeros(model.entity_emb.rows(), model.entity_emb.cols()),
            relation_emb: model.relation_emb.iter().map(|e| vec![0.0; e.len()]).collect(),
            relation_proj: model
                .relation_proj
                .iter()
                .map(|p| Matrix::zeros(p.rows(), p.cols()))
                .collect(),
            layers: model
                .layers
                .iter()
                .map(|w| Matrix::zeros(w.rows(), w.cols()))
                .collect(),
            gat_proj: Matrix::zeros(model.gat_proj.rows(), model.gat_proj.cols()),
            gat_attn: vec![0.0; model.gat_attn.len()],
        }
    }

    /// Same order and names as [`ModelState::tensors`].
    pub fn tensors(&self, model: &ModelState) -> Vec<(String, &[f64])> {
        let mut out: Vec<(String, &[f64])> = vec![("entity".into(), self.entity.data())];
        for (r, e) in model.relation_ids.iter().zip(&self.relation_emb) {
            out.push((format!("relation[{r}]"), e));
        }
        for (r, p) in model.relation_ids.iter().zip(&self.relation_proj) {
            out.push((format!("projection[{r}]"), p.data()));
        }
        for (l, w) in self.layers.iter().enumerate() {
            out.push((format!("layer[{l}]"), w.data()));
        }
        out.push(("gat_projection".into(), self.gat_proj.data()));
        out.push(("gat_attention".into(), &self.gat_attn));
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = vec![self.entity.data_mut()];
        out.extend(self.relation_emb.iter_mut().map(|e| e.as_mut_slice()));
        out.extend(self.relation_proj.iter_mut().map(|p| p.data_mut()));
        out.extend(self.layers.iter_mut().map(|w| w.data_mut()));
        out.push(self.gat_proj.data_mut());
        out.push(&mut self.gat_attn);
        out
    }

    /// Adds `scale * θ` for every parameter θ (the gradient of
    /// `scale/2 * ‖θ‖²`).
    pub fn add_scaled_params(&mut self, model: &ModelState, scale: f64) {
        let params = model.tensors();
        for (g, (_, p)) in self.tensors_mut().into_iter().zip(params) {
            axpy(scale, p, g);
        }
    }

    /// `θ -= lr * g` for every parameter.
    pub fn apply_sgd(&self, model: &mut ModelState, lr: f64) {
        let grads: Vec<Vec<f64>> = self.tensors(model).into_iter().map(|(_, g)| g.to_vec()).collect();
        for ((_, p), g) in model.tensors_mut().into_iter().zip(grads) {
            axpy(-lr, &g, p);
        }
    }
}

/// Back-propagates `grad_out` (dLoss/d final-layer embeddings) through the
/// layers and the attention mechanism.
pub fn backward(model: &ModelState, g: &CompiledGraph, fwd: &Forward, grad_out: Matrix) -> Gradients {
    let mut grads = Gradients::zeros_like(model);
    let slope = model.hp.leaky_slope;
    let mut g_alpha = vec![0.0; g.edge_count()];
    let mut g_h = grad_out;

    for l in (0..model.layers.len()).rev() {
        let w = &model.layers[l];
        let h_prev = &fwd.hidden[l];
        let neigh = &fwd.neigh[l];
        let pre = &fwd.pre[l];
        let width = h_prev.cols();
        let mut g_prev = Matrix::zeros(g.n, width);
        let mut gz = vec![0.0; w.rows()];
        let mut g_in = vec![0.0; w.cols()];
        let mut input = vec![0.0; w.cols()];
        for a in 0..g.n {
            let mut any = false;
            for ((o, z), gh) in gz.iter_mut().zip(pre.row(a)).zip(g_h.row(a)) {
                *o = gh * leaky_relu_grad(*z, slope);
                any |= *o != 0.0;
            }
            if !any {
                continue;
            }
            match model.hp.aggregator {
                Aggregator::SumLinear => {
                    for ((x, s), n) in input.iter_mut().zip(h_prev.row(a)).zip(neigh.row(a)) {
                        *x = s + n;
                    }
                }
                Aggregator::ConcatLinear => {
                    input[..width].copy_from_slice(h_prev.row(a));
                    input[width..].copy_from_slice(neigh.row(a));
                }
            }
            grads.layers[l].add_outer(1.0, &gz, &input);
            g_in.iter_mut().for_each(|x| *x = 0.0);
            w.matvec_t_add(&gz, &mut g_in);
            let (g_self, g_neigh) = match model.hp.aggregator {
                Aggregator::SumLinear => (&g_in[..], &g_in[..]),
                Aggregator::ConcatLinear => g_in.split_at(width),
            };
            axpy(1.0, g_self, g_prev.row_mut(a));
            for j in g.edges(a) {
                let b = g.tails[j];
                g_alpha[j] += dot(g_neigh, h_prev.row(b));
                axpy(fwd.alpha[j], g_neigh, g_prev.row_mut(b));
            }
        }
        g_h = g_prev;
    }
    grads.entity = g_h;

    // softmax backward: dL/ds_j = α_j (dL/dα_j - Σ_k α_k dL/dα_k)
    let mut g_score = vec![0.0; g.edge_count()];
    for a in 0..g.n {
        let range = g.edges(a);
        let mean: f64 = range.clone().map(|j| fwd.alpha[j] * g_alpha[j]).sum();
        for j in range {
            g_score[j] = fwd.alpha[j] * (g_alpha[j] - mean);
        }
    }

    match model.hp.attention {
        AttentionKind::KnowledgeAware => kgat_backward(model, g, fwd, &g_score, &mut grads),
        AttentionKind::GraphAttention => gat_backward(model, g, fwd, &g_score, &mut grads),
    }
    grads
}

fn kgat_backward(model: &ModelState, g: &CompiledGraph, fwd: &Forward, g_score: &[f64], grads: &mut Gradients) {
    let k = model.hp.relation_dim;
    let mut g_proj: Vec<Vec<f64>> = fwd.proj.iter().map(|p| vec![0.0; p.len()]).collect();
    let slot = |ri: usize, row: usize| g.slot_of[ri][row] as usize;
    let mut gu = vec![0.0; k];
    for a in 0..g.n {
        for j in g.edges(a) {
            let gs = g_score[j];
            if gs == 0.0 {
                continue;
            }
            let ri = g.rels[j];
            let t = &fwd.tanh[j * k..(j + 1) * k];
            let sb = slot(ri, g.tails[j]);
            let sa = slot(ri, a);
            // s = p_b · t,  t = tanh(p_a + e_r)
            axpy(gs, t, &mut g_proj[ri][sb * k..(sb + 1) * k]);
            let pb = &fwd.proj[ri][sb * k..(sb + 1) * k];
            for c in 0..k {
                gu[c] = gs * pb[c] * (1.0 - t[c] * t[c]);
            }
            axpy(1.0, &gu, &mut g_proj[ri][sa * k..(sa + 1) * k]);
            axpy(1.0, &gu, &mut grads.relation_emb[ri]);
        }
    }
    // p = W_r e
    for (ri, rows) in g.slot_rows.iter().enumerate() {
        let w = &model.relation_proj[ri];
        for (s, &row) in rows.iter().enumerate() {
            let gp = &g_proj[ri][s * k..(s + 1) * k];
            grads.relation_proj[ri].add_outer(1.0, gp, model.entity_emb.row(row));
            w.matvec_t_add(gp, grads.entity.row_mut(row));
        }
    }
}

fn gat_backward(model: &ModelState, g: &CompiledGraph, fwd: &Forward, g_score: &[f64], grads: &mut Gradients) {
    let k = model.hp.relation_dim;
    let slope = model.hp.attention_slope;
    let mut g_head = vec![0.0; g.n];
    let mut g_tail = vec![0.0; g.n];
    for a in 0..g.n {
        for j in g.edges(a) {
            let gc = g_score[j] * leaky_relu_grad(fwd.gat_pre[j], slope);
            g_head[a] += gc;
            g_tail[g.tails[j]] += gc;
        }
    }
    let (a_head, a_tail) = model.gat_attn.split_at(k);
    let mut gq = vec![0.0; k];
    for x in 0..g.n {
        if g_head[x] == 0.0 && g_tail[x] == 0.0 {
            continue;
        }
        let q = fwd.gat_q.row(x);
        axpy(g_head[x], q, &mut grads.gat_attn[..k]);
        axpy(g_tail[x], q, &mut grads.gat_attn[k..]);
        for c in 0..k {
            gq[c] = g_head[x] * a_head[c] + g_tail[x] * a_tail[c];
        }
        grads.gat_proj.add_outer(1.0, &gq, model.entity_emb.row(x));
        model.gat_proj.matvec_t_add(&gq, grads.entity.row_mut(x));
    }
}

/// Final-layer embedding per entity.
#[derive(Debug, Clone)]
pub struct Propagated {
    index: HashMap<EntityId, usize>,
    embeddings: Matrix,
}

impl Propagated {
    /// Wraps externally supplied final-layer embeddings; all rows must share
    /// one width.
    pub fn from_rows(rows: Vec<(EntityId, Vec<f64>)>) -> Self {
        let dim = rows.first().map_or(0, |(_, v)| v.len());
        let mut embeddings = Matrix::zeros(0, dim);
        let mut index = HashMap::new();
        for (i, (id, v)) in rows.into_iter().enumerate() {
            embeddings.push_row(&v);
            index.insert(id, i);
        }
        Self { index, embeddings }
    }

    pub fn get(&self, id: &EntityId) -> Option<&[f64]> {
        self.index.get(id).map(|&r| self.embeddings.row(r))
    }

    pub fn dim(&self) -> usize {
        self.embeddings.cols()
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }
}

/// Runs every layer over `snapshot` and returns the final-layer embedding of
/// each entity the model knows.
pub fn propagate(model: &ModelState, snapshot: &GraphSnapshot) -> Result<Propagated, GnnError> {
    let g = CompiledGraph::new(model, snapshot)?;
    Ok(Propagated {
        index: model.entity_index.clone(),
        embeddings: forward_output(model, &g),
    })
}
