use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use serde::{Deserialize, Serialize};

use super::types::{Day, EntityId, EntityKind, Relation, Triplet};
use super::GraphError;

/// The knowledge graph at one logical day.
///
/// Triplets are stored directly in the adjacency index (head -> (relation,
/// tail) -> observed day), so each (head, relation, tail) key is unique by
/// construction. Snapshots are treated as immutable values; updates return a
/// new snapshot.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct GraphSnapshot {
    time: Day,
    entities: BTreeSet<EntityId>,
    adjacency: BTreeMap<EntityId, BTreeMap<(Relation, EntityId), Day>>,
    edge_count: usize,
}

impl GraphSnapshot {
    pub fn new(time: Day) -> Self {
        Self {
            time,
            ..Self::default()
        }
    }

    pub fn time(&self) -> Day {
        self.time
    }

    pub fn entities(&self) -> &BTreeSet<EntityId> {
        &self.entities
    }

    pub fn contains(&self, id: &EntityId) -> bool {
        self.entities.contains(id)
    }

    pub fn entities_of(&self, kind: EntityKind) -> impl Iterator<Item = &EntityId> + '_ {
        self.entities.iter().filter(move |e| e.kind == kind)
    }

    pub fn node_count(&self) -> usize {
        self.entities.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edge_count
    }

    pub fn is_empty(&self) -> bool {
        self.entities.is_empty()
    }

    /// Out-edges of `head` as (relation, tail, observed day), ordered by
    /// relation then tail.
    pub fn neighbors<'a>(
        &'a self,
        head: &EntityId,
    ) -> impl Iterator<Item = (Relation, &'a EntityId, Day)> + 'a {
        self.adjacency
            .get(head)
            .into_iter()
            .flat_map(|m| m.iter().map(|((r, t), d)| (*r, t, *d)))
    }

    pub fn has_edge(&self, head: &EntityId, relation: Relation, tail: &EntityId) -> bool {
        self.edge_day(head, relation, tail).is_some()
    }

    pub fn edge_day(&self, head: &EntityId, relation: Relation, tail: &EntityId) -> Option<Day> {
        self.adjacency
            .get(head)
            .and_then(|m| m.get(&(relation, tail.clone())).copied())
    }

    pub fn triplets(&self) -> impl Iterator<Item = Triplet> + '_ {
        self.adjacency.iter().flat_map(|(h, m)| {
            m.iter().map(move |((r, t), d)| Triplet {
                head: h.clone(),
                relation: *r,
                tail: t.clone(),
                observed_at: *d,
            })
        })
    }

    pub fn add_entity(&mut self, id: EntityId) -> bool {
        self.entities.insert(id)
    }

    /// Inserts an edge. Repeated (head, relation, tail) keys collapse to a
    /// single edge carrying the latest observed day.
    pub fn add_triplet(&mut self, t: Triplet) -> Result<(), GraphError> {
        t.check_signature()?;
        if t.observed_at > self.time {
            return Err(GraphError::FutureEdge {
                day: t.observed_at,
                time: self.time,
            });
        }
        for end in [&t.head, &t.tail] {
            if !self.entities.contains(end) {
                return Err(GraphError::UnknownEntity(end.clone()));
            }
        }
        let slot = self.adjacency.entry(t.head).or_default();
        match slot.get_mut(&(t.relation, t.tail.clone())) {
            Some(day) => *day = (*day).max(t.observed_at),
            None => {
                slot.insert((t.relation, t.tail), t.observed_at);
                self.edge_count += 1;
            }
        }
        Ok(())
    }

    pub fn remove_edge(&mut self, head: &EntityId, relation: Relation, tail: &EntityId) -> bool {
        let Some(slot) = self.adjacency.get_mut(head) else {
            return false;
        };
        let removed = slot.remove(&(relation, tail.clone())).is_some();
        if removed {
            self.edge_count -= 1;
            if slot.is_empty() {
                self.adjacency.remove(head);
            }
        }
        removed
    }

    pub(crate) fn set_time(&mut self, time: Day) {
        self.time = time;
    }

    pub fn stats(&self) -> GraphStats {
        GraphStats::new(self.entities.len() as u64, self.edge_count as u64)
    }

    /// Writes one tab-separated line per triplet:
    /// `head_kind head_id relation tail_kind tail_id day`.
    pub fn export_tsv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for t in self.triplets() {
            writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}",
                t.head.kind, t.head.local_id, t.relation, t.tail.kind, t.tail.local_id, t.observed_at
            )?;
        }
        Ok(())
    }
}

/// Node/edge counts with the directed-graph density kept as an exact ratio
/// `edges / (nodes * (nodes - 1))`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphStats {
    pub node_count: u64,
    pub edge_count: u64,
    /// `nodes * (nodes - 1)`, the number of ordered node pairs.
    pub ordered_pairs: u128,
}

impl GraphStats {
    pub fn new(node_count: u64, edge_count: u64) -> Self {
        let n = node_count as u128;
        Self {
            node_count,
            edge_count,
            ordered_pairs: n * n.saturating_sub(1),
        }
    }

    /// Density as a float; 0 when there are fewer than two nodes.
    pub fn density(&self) -> f64 {
        if self.ordered_pairs == 0 {
            0.0
        } else {
            self.edge_count as f64 / self.ordered_pairs as f64
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn density_small_graph() {
        let s = GraphStats::new(5, 4);
        assert_eq!(s.ordered_pairs, 20);
        assert_eq!(s.density(), 0.2);
    }

    #[test]
    fn density_degenerate() {
        assert_eq!(GraphStats::new(1, 0).density(), 0.0);
        assert_eq!(GraphStats::new(0, 0).density(), 0.0);
    }

    #[test]
    fn density_production_scale() {
        let s = GraphStats::new(3_100_000, 5_700_000);
        let d = s.density();
        assert!((d - 5.93e-7).abs() < 0.005e-7, "{d}");
    }

    #[test]
    fn duplicate_edges_collapse_to_latest() {
        let mut g = GraphSnapshot::new(5);
        let u = EntityId::user("u1");
        let n = EntityId::nudge("n1");
        g.add_entity(u.clone());
        g.add_entity(n.clone());
        for day in [2, 4, 3] {
            g.add_triplet(Triplet {
                head: u.clone(),
                relation: Relation::Opened,
                tail: n.clone(),
                observed_at: day,
            })
            .unwrap();
        }
        assert_eq!(g.edge_count(), 1);
        assert_eq!(g.edge_day(&u, Relation::Opened, &n), Some(4));
    }

    #[test]
    fn signature_violation_rejected() {
        let mut g = GraphSnapshot::new(0);
        let u = EntityId::user("u1");
        let m = EntityId::marker("age: 30s");
        g.add_entity(u.clone());
        g.add_entity(m.clone());
        let err = g
            .add_triplet(Triplet {
                head: u,
                relation: Relation::Opened,
                tail: m,
                observed_at: 0,
            })
            .unwrap_err();
        assert!(matches!(err, GraphError::Signature { .. }));
    }

    #[test]
    fn future_edge_rejected() {
        let mut g = GraphSnapshot::new(1);
        let u = EntityId::user("u1");
        let n = EntityId::nudge("n1");
        g.add_entity(u.clone());
        g.add_entity(n.clone());
        let err = g
            .add_triplet(Triplet {
                head: u,
                relation: Relation::Sent,
                tail: n,
                observed_at: 2,
            })
            .unwrap_err();
        assert!(matches!(err, GraphError::FutureEdge { .. }));
    }

    #[test]
    fn tsv_export_columns() {
        let mut g = GraphSnapshot::new(0);
        let u = EntityId::user("u1");
        let s = EntityId::segment("s1");
        g.add_entity(u.clone());
        g.add_entity(s.clone());
        g.add_triplet(Triplet {
            head: u,
            relation: Relation::InSegment,
            tail: s,
            observed_at: 0,
        })
        .unwrap();
        let mut buf = Vec::new();
        g.export_tsv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "user\tu1\tin_segment\tsegment\ts1\t0\n");
    }
}
