#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use nudge_core::eval::{metrics_at_k, MetricReport};
use nudge_core::graph::EntityId;

pub type Case = (Vec<usize>, BTreeSet<usize>, usize);

pub fn item(i: usize) -> EntityId {
    EntityId::nudge(format!("i{i}"))
}

pub fn dcg(list: &[usize], rel: &BTreeSet<usize>, k: usize) -> f64 {
    let mut s = 0.0;
    for (pos, it) in list.iter().enumerate().take(k) {
        if rel.contains(it) {
            s += 1.0 / (pos as f64 + 2.0).log2();
        }
    }
    s
}

/// Per-user metrics straight from their textbook definitions.
pub fn brute(list: &[usize], rel: &BTreeSet<usize>, k: usize) -> [f64; 4] {
    let top: Vec<usize> = list.iter().take(k).copied().collect();
    let hits = top.iter().filter(|i| rel.contains(i)).count() as f64;
    let mut ideal: Vec<usize> = rel.iter().copied().collect();
    ideal.extend(list.iter().filter(|i| !rel.contains(i)));
    let ndcg = dcg(list, rel, k) / dcg(&ideal, rel, k);
    let mut ap = 0.0;
    for r in rel {
        if let Some(pos) = list.iter().position(|x| x == r) {
            let above = list[..=pos].iter().filter(|x| rel.contains(x)).count() as f64;
            ap += above / (pos + 1) as f64;
        }
    }
    [hits / k as f64, hits / rel.len() as f64, ndcg, ap / rel.len() as f64]
}

pub fn report_of(cases: &[Case]) -> MetricReport {
    let mut rec = BTreeMap::new();
    let mut rel = BTreeMap::new();
    for (u, (list, r, _)) in cases.iter().enumerate() {
        let user = EntityId::user(format!("u{u}"));
        rec.insert(user.clone(), list.iter().map(|&i| item(i)).collect());
        rel.insert(user, r.iter().map(|&i| item(i)).collect::<BTreeSet<_>>());
    }
    metrics_at_k(&rec, &rel, cases[0].2).unwrap()
}

pub fn arrangements(pool: &[usize], len: usize) -> Vec<Vec<usize>> {
    if len == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for (i, &x) in pool.iter().enumerate() {
        let mut rest = pool.to_vec();
        rest.remove(i);
        for mut tail in arrangements(&rest, len - 1) {
            tail.insert(0, x);
            out.push(tail);
        }
    }
    out
}

pub fn enumerate_cases(n: usize) -> Vec<Case> {
    let items: Vec<usize> = (0..n).collect();
    let lists: Vec<Vec<usize>> = if n <= 5 {
        (0..=n).flat_map(|l| arrangements(&items, l)).collect()
    } else {
        arrangements(&items, n)
    };
    let mut out = Vec::new();
    for mask in 1u32..(1 << n) {
        let rel: BTreeSet<usize> = (0..n).filter(|i| mask & (1 << i) != 0).collect();
        for list in &lists {
            for k in 1..=n {
                out.push((list.clone(), rel.clone(), k));
            }
        }
    }
    out
}

pub fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-12
}

pub fn as_array(m: &MetricReport) -> [f64; 4] {
    [m.precision_at_k, m.recall_at_k, m.ndcg_at_k, m.mean_average_precision]
}

