//! Test-only reference implementations. Everything here is written with
//! plain nested loops over the model's public accessors and shares no code
//! with the production propagation path.

#![allow(dead_code)]

pub mod cases;
pub mod metrics;

use std::collections::BTreeMap;

use nudge_core::gnn::{Aggregator, AttentionKind, ModelState};
use nudge_core::graph::{EntityId, EntityKind, GraphSnapshot, Relation, Triplet};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random heterogeneous graph with every relation type represented when the
/// sizes allow it.
pub fn random_snapshot(seed: u64, users: usize, nudges: usize, markers: usize) -> GraphSnapshot {
    let mut r = rng(seed);
    let mut g = GraphSnapshot::new(10);
    let us: Vec<_> = (0..users).map(|i| EntityId::user(format!("u{i}"))).collect();
    let ns: Vec<_> = (0..nudges).map(|i| EntityId::nudge(format!("n{i}"))).collect();
    let ms: Vec<_> = (0..markers).map(|i| EntityId::marker(format!("m{i}"))).collect();
    let topic = EntityId::topic("t0");
    let seg = EntityId::segment("s0");
    let goal = EntityId::goal("steps");
    for e in us.iter().chain(&ns).chain(&ms).chain([&topic, &seg, &goal]) {
        g.add_entity(e.clone());
    }
    let add = |g: &mut GraphSnapshot, h: &EntityId, rel: Relation, t: &EntityId| {
        g.add_triplet(Triplet {
            head: h.clone(),
            relation: rel,
            tail: t.clone(),
            observed_at: 1,
        })
        .unwrap();
    };
    for m in &ms {
        add(&mut g, m, Relation::MarkerInTopic, &topic);
    }
    for n in &ns {
        add(&mut g, n, Relation::HasGoal, &goal);
        if r.gen_bool(0.5) {
            add(&mut g, n, Relation::TargetsSegment, &seg);
        }
    }
    for u in &us {
        for m in &ms {
            if r.gen_bool(0.5) {
                add(&mut g, u, Relation::HasMarker, m);
            }
        }
        if r.gen_bool(0.5) {
            add(&mut g, u, Relation::InSegment, &seg);
        }
        for n in &ns {
            let p: f64 = r.gen();
            if p < 0.3 {
                add(&mut g, u, Relation::Opened, n);
            } else if p < 0.4 {
                add(&mut g, u, Relation::RatedUseful, n);
            } else if p < 0.45 {
                add(&mut g, u, Relation::RatedNotUseful, n);
            }
        }
    }
    g
}

fn matvec(m: &nudge_core::gnn::linalg::Matrix, x: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; m.rows()];
    for i in 0..m.rows() {
        let mut s = 0.0;
        for j in 0..m.cols() {
            s += m.get(i, j) * x[j];
        }
        out[i] = s;
    }
    out
}

fn softmax(xs: &[f64]) -> Vec<f64> {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = xs.iter().map(|x| (x - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.iter().map(|e| e / total).collect()
}

fn leaky(x: f64, slope: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        slope * x
    }
}

/// `softmax_b((W_r e_b)ᵀ tanh(W_r e_a + e_r))`, one scalar at a time.
pub fn kgat_oracle_from(
    model: &ModelState,
    ea: &[f64],
    neighbors: &[(Relation, Vec<f64>)],
) -> Vec<f64> {
    let mut logits = Vec::new();
    for (rel, eb) in neighbors {
        let w = model.relation_projection(*rel).unwrap();
        let er = model.relation_embedding(*rel).unwrap();
        let wa = matvec(w, ea);
        let wb = matvec(w, eb);
        let mut s = 0.0;
        for c in 0..wa.len() {
            s += wb[c] * (wa[c] + er[c]).tanh();
        }
        logits.push(s);
    }
    if logits.is_empty() {
        return logits;
    }
    softmax(&logits)
}

pub fn kgat_oracle(model: &ModelState, head: &EntityId, neighbors: &[(Relation, EntityId)]) -> Vec<f64> {
    let ea = model.entity_embedding(head).unwrap().to_vec();
    let nb: Vec<(Relation, Vec<f64>)> = neighbors
        .iter()
        .map(|(r, b)| (*r, model.entity_embedding(b).unwrap().to_vec()))
        .collect();
    kgat_oracle_from(model, &ea, &nb)
}

/// `softmax_b(LeakyReLU(aᵀ [W e_a ‖ W e_b]))` over neighbors then self.
pub fn gat_oracle(model: &ModelState, head: &EntityId, neighbors: &[EntityId]) -> Vec<f64> {
    let w = model.gat_projection();
    let a = model.gat_attention_vector();
    let k = w.rows();
    let qa = matvec(w, model.entity_embedding(head).unwrap());
    let mut logits = Vec::new();
    for b in neighbors.iter().chain(std::iter::once(head)) {
        let qb = matvec(w, model.entity_embedding(b).unwrap());
        let mut s = 0.0;
        for c in 0..k {
            s += a[c] * qa[c];
        }
        for c in 0..k {
            s += a[k + c] * qb[c];
        }
        logits.push(leaky(s, model.hyperparams().attention_slope));
    }
    softmax(&logits)
}

/// Layer-by-layer recomputation of the final embeddings.
pub fn propagate_oracle(model: &ModelState, g: &GraphSnapshot) -> BTreeMap<EntityId, Vec<f64>> {
    let hp = model.hyperparams();
    let ids: Vec<EntityId> = model.entity_ids().to_vec();
    // attention from base embeddings, fixed across layers
    let mut nbrs: BTreeMap<EntityId, Vec<(EntityId, f64)>> = BTreeMap::new();
    for a in &ids {
        let list: Vec<(Relation, EntityId)> = g.neighbors(a).map(|(r, t, _)| (r, t.clone())).collect();
        let weighted = match hp.attention {
            AttentionKind::KnowledgeAware => {
                let w = kgat_oracle(model, a, &list);
                list.into_iter().map(|(_, b)| b).zip(w).collect()
            }
            AttentionKind::GraphAttention => {
                let tails: Vec<EntityId> = list.into_iter().map(|(_, b)| b).collect();
                let w = gat_oracle(model, a, &tails);
                tails
                    .into_iter()
                    .chain(std::iter::once(a.clone()))
                    .zip(w)
                    .collect()
            }
        };
        nbrs.insert(a.clone(), weighted);
    }
    let mut h: BTreeMap<EntityId, Vec<f64>> = ids
        .iter()
        .map(|id| (id.clone(), model.entity_embedding(id).unwrap().to_vec()))
        .collect();
    for w in model.layer_weights() {
        let mut next = BTreeMap::new();
        for a in &ids {
            let width = h[a].len();
            let mut n = vec![0.0; width];
            for (b, alpha) in &nbrs[a] {
                for c in 0..width {
                    n[c] += alpha * h[b][c];
                }
            }
            let input: Vec<f64> = match hp.aggregator {
                Aggregator::SumLinear => (0..width).map(|c| h[a][c] + n[c]).collect(),
                Aggregator::ConcatLinear => h[a].iter().chain(&n).copied().collect(),
            };
            let z = matvec(w, &input);
            next.insert(a.clone(), z.into_iter().map(|x| leaky(x, hp.leaky_slope)).collect());
        }
        h = next;
    }
    h
}

/// Central-difference gradient of `f` with respect to every tensor of
/// `model`, in [`ModelState::tensors`] order.
pub fn finite_difference<F: Fn(&ModelState) -> f64>(model: &ModelState, eps: f64, f: F) -> Vec<(String, Vec<f64>)> {
    let shapes: Vec<(String, usize)> = model.tensors().iter().map(|(n, t)| (n.clone(), t.len())).collect();
    let mut out = Vec::new();
    let mut m = model.clone();
    for (ti, (name, len)) in shapes.into_iter().enumerate() {
        let mut g = vec![0.0; len];
        for (i, gi) in g.iter_mut().enumerate() {
            let orig = m.tensors()[ti].1[i];
            m.tensors_mut()[ti].1[i] = orig + eps;
            let up = f(&m);
            m.tensors_mut()[ti].1[i] = orig - eps;
            let down = f(&m);
            m.tensors_mut()[ti].1[i] = orig;
            *gi = (up - down) / (2.0 * eps);
        }
        out.push((name, g));
    }
    out
}

pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na + nb < 1e-12 {
        0.0
    } else {
        diff / (na + nb)
    }
}

pub struct World {
    pub pop: nudge_core::synth::Population,
    pub snapshot: GraphSnapshot,
    pub model: ModelState,
    pub rules: Vec<nudge_core::candidates::TargetingRule>,
    pub contexts: BTreeMap<EntityId, nudge_core::graph::FieldMap>,
    pub history: nudge_core::pipeline::DeliveryHistory,
}

impl World {
    pub fn inputs(&self) -> nudge_core::pipeline::DailyInputs<'_> {
        nudge_core::pipeline::DailyInputs {
            snapshot: &self.snapshot,
            model: &self.model,
            rules: &self.rules,
            library: &self.pop.library,
            contexts: &self.contexts,
            history: &self.history,
            today: self.snapshot.time() + 1,
        }
    }
}

/// Synthetic population, its graph and an untrained small model.
pub fn world(users: usize, seed: u64) -> World {
    use nudge_core::gnn::HyperParams;
    use nudge_core::synth::{generate_population, PopulationSpec};
    let pop = generate_population(&PopulationSpec {
        n_users: users,
        ..PopulationSpec::small(seed)
    })
    .unwrap();
    let snapshot = nudge_core::graph::construct_graph(
        &pop.library,
        &pop.participants,
        &pop.interactions,
        &pop.catalog,
        &Default::default(),
    )
    .unwrap()
    .snapshot;
    let hp = HyperParams {
        entity_dim: 8,
        relation_dim: 8,
        layer_dims: vec![8],
        seed,
        ..HyperParams::default()
    };
    let model = ModelState::init(&snapshot, &hp).unwrap();
    let rules = nudge_core::candidates::rules_from_library(&pop.library).unwrap();
    let contexts = pop.contexts();
    let history = nudge_core::pipeline::DeliveryHistory::from_events(&pop.interactions);
    World {
        pop,
        snapshot,
        model,
        rules,
        contexts,
        history,
    }
}

pub fn four_node_graph() -> GraphSnapshot {
    let mut g = GraphSnapshot::new(3);
    let u = EntityId::user("u");
    let a = EntityId::nudge("a");
    let b = EntityId::nudge("b");
    let goal = EntityId::goal("steps");
    for e in [&u, &a, &b, &goal] {
        g.add_entity(e.clone());
    }
    for (h, r, t) in [
        (&u, Relation::Opened, &a),
        (&u, Relation::RatedNotUseful, &b),
        (&a, Relation::HasGoal, &goal),
        (&b, Relation::HasGoal, &goal),
    ] {
        g.add_triplet(Triplet {
            head: h.clone(),
            relation: r,
            tail: t.clone(),
            observed_at: 1,
        })
        .unwrap();
    }
    g
}

pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Training objective recomputed from the reference propagation.
pub fn oracle_loss(m: &ModelState, g: &GraphSnapshot, triples: &[(EntityId, EntityId, EntityId)]) -> f64 {
    let h = propagate_oracle(m, g);
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let mut loss = 0.0;
    for (u, p, n) in triples {
        let x = dot(&h[u], &h[p]) - dot(&h[u], &h[n]);
        loss += softplus(-x);
    }
    loss /= triples.len() as f64;
    let norm: f64 = m.tensors().iter().flat_map(|(_, t)| t.iter()).map(|x| x * x).sum();
    loss + m.hyperparams().l2 * norm
}

pub fn grow(g: &GraphSnapshot, users: usize, nudges: usize) -> GraphSnapshot {
    let mut g2 = g.clone();
    let goal = EntityId::goal("steps");
    let old_nudge = g.entities_of(EntityKind::Nudge).next().unwrap().clone();
    for i in 0..nudges {
        let n = EntityId::nudge(format!("new{i}"));
        g2.add_entity(n.clone());
        g2.add_triplet(Triplet { head: n, relation: Relation::HasGoal, tail: goal.clone(), observed_at: 1 }).unwrap();
    }
    for i in 0..users {
        let u = EntityId::user(format!("new{i}"));
        g2.add_entity(u.clone());
        g2.add_triplet(Triplet { head: u, relation: Relation::Opened, tail: old_nudge.clone(), observed_at: 1 }).unwrap();
    }
    g2
}
