use std::collections::{BTreeSet, HashMap};
use std::io::{Read, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::linalg::Matrix;
use super::GnnError;
use crate::graph::{EntityId, GraphSnapshot, Relation};
use crate::rng::derived_rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionKind {
    /// Relation-projected attention: `(W_r e_b)ᵀ tanh(W_r e_a + e_r)`.
    KnowledgeAware,
    /// Single-head graph attention with a self edge:
    /// `LeakyReLU(aᵀ [W e_a ‖ W e_b])`.
    GraphAttention,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregator {
    /// `W (e_a + n_a)`
    SumLinear,
    /// `W [e_a ‖ n_a]`
    ConcatLinear,
}

/// Which engagement relations count as positive labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PositiveLabels {
    pub opened: bool,
    pub rated_useful: bool,
    pub rated_not_useful: bool,
}

impl Default for PositiveLabels {
    fn default() -> Self {
        Self {
            opened: true,
            rated_useful: true,
            rated_not_useful: true,
        }
    }
}

impl PositiveLabels {
    pub fn accepts(&self, r: Relation) -> bool {
        match r {
            Relation::Opened => self.opened,
            Relation::RatedUseful => self.rated_useful,
            Relation::RatedNotUseful => self.rated_not_useful,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HyperParams {
    pub entity_dim: usize,
    pub relation_dim: usize,
    /// Output width of each propagation layer; its length is the layer count.
    pub layer_dims: Vec<usize>,
    pub attention: AttentionKind,
    pub aggregator: Aggregator,
    /// Negative slope of the per-layer LeakyReLU.
    pub leaky_slope: f64,
    /// Negative slope inside graph-attention scores.
    pub attention_slope: f64,
    pub learning_rate: f64,
    pub l2: f64,
    pub negatives: usize,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Minimum relative improvement over the best epoch loss that counts as
    /// progress.
    pub tolerance: f64,
    /// Training stops after this many consecutive epochs without progress.
    pub patience: usize,
    pub seed: u64,
    pub positives: PositiveLabels,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            entity_dim: 32,
            relation_dim: 32,
            layer_dims: vec![32, 16],
            attention: AttentionKind::KnowledgeAware,
            aggregator: Aggregator::SumLinear,
            leaky_slope: 0.2,
            attention_slope: 0.2,
            learning_rate: 0.5,
            l2: 1e-5,
            negatives: 1,
            batch_size: 512,
            max_epochs: 60,
            tolerance: 1e-4,
            patience: 3,
            seed: 0,
            positives: PositiveLabels::default(),
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<(), GnnError> {
        let bad = |m: &str| Err(GnnError::InvalidHyperParams(m.to_string()));
        if self.entity_dim == 0 || self.relation_dim == 0 {
            return bad("embedding dimensions must be >= 1");
        }
        if self.layer_dims.is_empty() || self.layer_dims.contains(&0) {
            return bad("layer_dims must be non-empty with every dimension >= 1");
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if !(self.l2.is_finite() && self.l2 >= 0.0) {
            return bad("l2 must be non-negative");
        }
        if self.negatives == 0 || self.batch_size == 0 || self.patience == 0 || self.max_epochs == 0 {
            return bad("negatives, batch_size, patience and max_epochs must be >= 1");
        }
        if !(self.tolerance >= 0.0) {
            return bad("tolerance must be non-negative");
        }
        Ok(())
    }

    /// Shape-defining fields only; optimizer settings may differ between a
    /// checkpoint and the run that fine-tunes it.
    fn same_architecture(&self, other: &Self) -> bool {
        self.entity_dim == other.entity_dim
            && self.relation_dim == other.relation_dim
            && self.layer_dims == other.layer_dims
            && self.attention == other.attention
            && self.aggregator == other.aggregator
    }

    /// Input width of propagation layer `l`.
    pub fn layer_input(&self, l: usize) -> usize {
        let prev = if l == 0 {
            self.entity_dim
        } else {
            self.layer_dims[l - 1]
        };
        match self.aggregator {
            Aggregator::SumLinear => prev,
            Aggregator::ConcatLinear => 2 * prev,
        }
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_dims.last().expect("validated non-empty")
    }
}

/// Uniform Glorot bound `sqrt(6 / (fan_in + fan_out))`.
pub fn xavier_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

fn xavier_fill(values: &mut [f64], bound: f64, rng: &mut impl Rng) {
    for v in values {
        *v = rng.gen_range(-bound..bound);
    }
}

fn entity_row(seed: u64, id: &EntityId, d: usize) -> Vec<f64> {
    let mut rng = derived_rng(seed, &[b"entity", id.kind.as_str().as_bytes(), id.local_id.as_bytes()]);
    let mut row = vec![0.0; d];
    xavier_fill(&mut row, xavier_bound(d, d), &mut rng);
    row
}

fn relation_params(seed: u64, r: Relation, d: usize, k: usize) -> (Vec<f64>, Matrix) {
    let mut rng = derived_rng(seed, &[b"relation", r.as_str().as_bytes()]);
    let mut emb = vec![0.0; k];
    xavier_fill(&mut emb, xavier_bound(k, k), &mut rng);
    let mut proj = Matrix::zeros(k, d);
    xavier_fill(proj.data_mut(), xavier_bound(d, k), &mut rng);
    (emb, proj)
}

/// Learnable state: entity and relation embeddings, relation projections,
/// per-layer aggregation weights and (for graph attention) the shared
/// projection and attention vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    pub(crate) hp: HyperParams,
    pub(crate) entity_ids: Vec<EntityId>,
    #[serde(skip)]
    pub(crate) entity_index: HashMap<EntityId, usize>,
    pub(crate) entity_emb: Matrix,
    pub(crate) relation_ids: Vec<Relation>,
    pub(crate) relation_emb: Vec<Vec<f64>>,
    pub(crate) relation_proj: Vec<Matrix>,
    pub(crate) layers: Vec<Matrix>,
    pub(crate) gat_proj: Matrix,
    pub(crate) gat_attn: Vec<f64>,
}

fn snapshot_relations(snapshot: &GraphSnapshot) -> BTreeSet<Relation> {
    let mut out = BTreeSet::new();
    for e in snapshot.entities() {
        out.extend(snapshot.neighbors(e).map(|(r, _, _)| r));
    }
    out
}

impl ModelState {
    /// Xavier-initializes every entity and relation of `snapshot`.
    ///
    /// Each entity and relation draws from its own stream keyed by
    /// `hp.seed` and its id, so a given entity gets the same initial vector
    /// regardless of what else is in the graph.
    pub fn init(snapshot: &GraphSnapshot, hp: &HyperParams) -> Result<Self, GnnError> {
        hp.validate()?;
        if snapshot.is_empty() {
            return Err(GnnError::EmptySnapshot);
        }
        let d = hp.entity_dim;
        let k = hp.relation_dim;
        let mut entity_emb = Matrix::zeros(0, d);
        let entity_ids: Vec<EntityId> = snapshot.entities().iter().cloned().collect();
        for id in &entity_ids {
            entity_emb.push_row(&entity_row(hp.seed, id, d));
        }
        let relation_ids: Vec<Relation> = snapshot_relations(snapshot).into_iter().collect();
        let (relation_emb, relation_proj) = relation_ids
            .iter()
            .map(|r| relation_params(hp.seed, *r, d, k))
            .unzip();

        let mut rng = derived_rng(hp.seed, &[b"layers"]);
        let layers = hp
            .layer_dims
            .iter()
            .enumerate()
            .map(|(l, &out)| {
                let inp = hp.layer_input(l);
                let mut w = Matrix::zeros(out, inp);
                xavier_fill(w.data_mut(), xavier_bound(inp, out), &mut rng);
                w
            })
            .collect();

        let (gat_proj, gat_attn) = match hp.attention {
            AttentionKind::KnowledgeAware => (Matrix::zeros(0, 0), Vec::new()),
            AttentionKind::GraphAttention => {
                let mut rng = derived_rng(hp.seed, &[b"gat"]);
                let mut w = Matrix::zeros(k, d);
                xavier_fill(w.data_mut(), xavier_bound(d, k), &mut rng);
                let mut a = vec![0.0; 2 * k];
                xavier_fill(&mut a, xavier_bound(2 * k, 2 * k), &mut rng);
                (w, a)
            }
        };

        let mut m = Self {
            hp: hp.clone(),
            entity_ids,
            entity_index: HashMap::new(),
            entity_emb,
            relation_ids,
            relation_emb,
            relation_proj,
            layers,
            gat_proj,
            gat_attn,
        };
        m.rebuild_index();
        Ok(m)
    }

    /// Carries `prev` onto `new_snapshot`: known entities and relations keep
    /// their parameters verbatim, new ones are Xavier-initialized, entities
    /// missing from the new graph are dropped. Relations are never dropped.
    pub fn warm_start(
        prev: &ModelState,
        new_snapshot: &GraphSnapshot,
        hp: &HyperParams,
    ) -> Result<Self, GnnError> {
        hp.validate()?;
        if !prev.hp.same_architecture(hp) {
            return Err(GnnError::DimensionMismatch(
                "warm start hyperparameters change the model shape".into(),
            ));
        }
        let d = hp.entity_dim;
        let k = hp.relation_dim;
        let entity_ids: Vec<EntityId> = new_snapshot.entities().iter().cloned().collect();
        let mut entity_emb = Matrix::zeros(0, d);
        for id in &entity_ids {
            match prev.entity_index.get(id) {
                Some(&row) => entity_emb.push_row(prev.entity_emb.row(row)),
                None => entity_emb.push_row(&entity_row(hp.seed, id, d)),
            }
        }
        let mut relation_ids = prev.relation_ids.clone();
        let mut relation_emb = prev.relation_emb.clone();
        let mut relation_proj = prev.relation_proj.clone();
        for r in snapshot_relations(new_snapshot) {
            if !relation_ids.contains(&r) {
                let (e, p) = relation_params(hp.seed, r, d, k);
                relation_ids.push(r);
                relation_emb.push(e);
                relation_proj.push(p);
            }
        }
        let mut m = Self {
            hp: hp.clone(),
            entity_ids,
            entity_index: HashMap::new(),
            entity_emb,
            relation_ids,
            relation_emb,
            relation_proj,
            layers: prev.layers.clone(),
            gat_proj: prev.gat_proj.clone(),
            gat_attn: prev.gat_attn.clone(),
        };
        m.rebuild_index();
        Ok(m)
    }

    fn rebuild_index(&mut self) {
        self.entity_index = self
            .entity_ids
            .iter()
            .enumerate()
            .map(|(i, e)| (e.clone(), i))
            .collect();
    }

    pub fn hyperparams(&self) -> &HyperParams {
        &self.hp
    }

    pub fn entity_ids(&self) -> &[EntityId] {
        &self.entity_ids
    }

    pub fn entity_count(&self) -> usize {
        self.entity_ids.len()
    }

    pub fn entity_row(&self, id: &EntityId) -> Option<usize> {
        self.entity_index.get(id).copied()
    }

    pub fn entity_embedding(&self, id: &EntityId) -> Option<&[f64]> {
        self.entity_row(id).map(|r| self.entity_emb.row(r))
    }

    pub fn relations(&self) -> &[Relation] {
        &self.relation_ids
    }

    pub(crate) fn relation_index(&self, r: Relation) -> Option<usize> {
        self.relation_ids.iter().position(|x| *x == r)
    }

    pub fn relation_embedding(&self, r: Relation) -> Option<&[f64]> {
        self.relation_index(r).map(|i| self.relation_emb[i].as_slice())
    }

    pub fn relation_projection(&self, r: Relation) -> Option<&Matrix> {
        self.relation_index(r).map(|i| &self.relation_proj[i])
    }

    pub fn layer_weights(&self) -> &[Matrix] {
        &self.layers
    }

    pub fn gat_projection(&self) -> &Matrix {
        &self.gat_proj
    }

    pub fn gat_attention_vector(&self) -> &[f64] {
        &self.gat_attn
    }

    pub fn entity_table(&self) -> &Matrix {
        &self.entity_emb
    }

    /// Named views of every parameter tensor, in a fixed order shared with
    /// [`Gradients::tensors`](super::Gradients::tensors).
    pub fn tensors(&self) -> Vec<(String, &[f64])> {
        let mut out: Vec<(String, &[f64])> = vec![("entity".into(), self.entity_emb.data())];
        for (r, e) in self.relation_ids.iter().zip(&self.relation_emb) {
            out.push((format!("relation[{r}]"), e));
        }
        for (r, p) in self.relation_ids.iter().zip(&self.relation_proj) {
            out.push((format!("projection[{r}]"), p.data()));
        }
        for (l, w) in self.layers.iter().enumerate() {
            out.push((format!("layer[{l}]"), w.data()));
        }
        out.push(("gat_projection".into(), self.gat_proj.data()));
        out.push(("gat_attention".into(), &self.gat_attn));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out: Vec<(String, &mut [f64])> =
            vec![("entity".into(), self.entity_emb.data_mut())];
        for (r, e) in self.relation_ids.iter().zip(self.relation_emb.iter_mut()) {
            out.push((format!("relation[{r}]"), e));
        }
        for (r, p) in self.relation_ids.iter().zip(self.relation_proj.iter_mut()) {
            out.push((format!("projection[{r}]"), p.data_mut()));
        }
        for (l, w) in self.layers.iter_mut().enumerate() {
            out.push((format!("layer[{l}]"), w.data_mut()));
        }
        out.push(("gat_projection".into(), self.gat_proj.data_mut()));
        out.push(("gat_attention".into(), &mut self.gat_attn));
        out
    }

    pub fn squared_norm(&self) -> f64 {
        self.tensors()
            .iter()
            .map(|(_, t)| t.iter().map(|x| x * x).sum::<f64>())
            .sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.iter().all(|x| x.is_finite()))
    }

    pub fn save<W: Write>(&self, out: W) -> Result<(), GnnError> {
        let ck = Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            model: self.clone(),
        };
        serde_json::to_writer(out, &ck).map_err(|e| GnnError::Checkpoint(e.to_string()))
    }

    pub fn load<R: Read>(input: R) -> Result<Self, GnnError> {
        let ck: Checkpoint =
            serde_json::from_reader(input).map_err(|e| GnnError::Checkpoint(e.to_string()))?;
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(GnnError::Checkpoint(format!(
                "unsupported checkpoint {} v{}",
                ck.format, ck.version
            )));
        }
        let mut m = ck.model;
        m.hp.validate()?;
        if m.entity_emb.rows() != m.entity_ids.len()
            || m.relation_emb.len() != m.relation_ids.len()
            || m.relation_proj.len() != m.relation_ids.len()
            || m.layers.len() != m.hp.layer_dims.len()
        {
            return Err(GnnError::Checkpoint("inconsistent table sizes".into()));
        }
        m.rebuild_index();
        Ok(m)
    }
}

const CHECKPOINT_FORMAT: &str = "nudge-model";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    model: ModelState,
}
