#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use nudge_core::candidates::{Candidate, CandidateSet};
use nudge_core::gnn::ScoredPair;
use nudge_core::graph::{Day, EntityId, EventKind, InteractionEvent};
use nudge_core::pipeline::{constraints_filter, diversity_sample, Budget, DeliveryHistory, PipelineConfig};
use proptest::prelude::*;

pub fn nudge(i: usize) -> EntityId {
    EntityId::nudge(format!("n{i}"))
}

#[derive(Debug, Clone)]
pub struct Case {
    pub ranked: Vec<usize>,
    pub candidates: Vec<usize>,
    /// (nudge, day, event)
    pub history: Vec<(usize, Day, u8)>,
    pub k: Option<usize>,
    pub d_neg: u32,
    pub d_recent: u32,
    pub today: Day,
    pub p: f64,
    pub seed: u64,
}

pub fn case() -> impl Strategy<Value = Case> {
    (
        Just((0..12).collect::<Vec<usize>>()).prop_shuffle(),
        0usize..=12,
        prop::collection::vec((0usize..12, 0u32..30, 0u8..4), 0..12),
        prop::option::weighted(0.8, 0usize..5),
        0u32..10,
        0u32..10,
        0u32..30,
        prop_oneof![Just(0.0), Just(1.0), 0.0f64..=1.0],
        any::<u64>(),
    )
        .prop_map(|(perm, len, history, k, d_neg, d_recent, today, p, seed)| {
            let ranked: Vec<usize> = perm[..len].to_vec();
            let mut candidates = ranked.clone();
            candidates.extend(perm[len..].iter().take(4));
            Case {
                ranked,
                candidates,
                history: history.into_iter().filter(|(_, d, _)| *d <= today).collect(),
                k,
                d_neg,
                d_recent,
                today,
                p,
                seed,
            }
        })
}

pub fn setup(c: &Case) -> (BTreeMap<EntityId, Vec<ScoredPair>>, CandidateSet, DeliveryHistory, PipelineConfig) {
    let u = EntityId::user("u");
    let ranked = c
        .ranked
        .iter()
        .enumerate()
        .map(|(i, &n)| ScoredPair {
            user: u.clone(),
            nudge: nudge(n),
            score: -(i as f64),
        })
        .collect();
    let mut cs = CandidateSet::new();
    cs.insert(
        u.clone(),
        c.candidates
            .iter()
            .map(|&n| Candidate {
                nudge: nudge(n),
                rule_id: "r".into(),
            })
            .collect(),
    );
    let events: Vec<InteractionEvent> = c
        .history
        .iter()
        .map(|&(n, day, e)| InteractionEvent {
            user_id: "u".into(),
            nudge_id: format!("n{n}"),
            event: [EventKind::Sent, EventKind::Opened, EventKind::RatedUseful, EventKind::RatedNotUseful][e as usize],
            day,
        })
        .collect();
    let cfg = PipelineConfig {
        k_daily: c.k.map_or(Budget::Unlimited, Budget::Limited),
        d_neg_filter: c.d_neg,
        d_recent: c.d_recent,
        p_diversity: c.p,
        seed: c.seed,
        ..PipelineConfig::default()
    };
    (
        BTreeMap::from([(u, ranked)]),
        cs,
        DeliveryHistory::from_events(&events),
        cfg,
    )
}

/// Nudges blocked on `today`, recomputed from the raw event tuples in log
/// order. An open or rating with no earlier delivery counts as a send.
pub fn blocked_oracle(c: &Case) -> (BTreeSet<EntityId>, BTreeSet<EntityId>) {
    let mut neg = BTreeSet::new();
    let mut recent = BTreeSet::new();
    let mut delivered = BTreeSet::new();
    for &(n, day, e) in &c.history {
        let age = c.today - day;
        if (e == 0 || !delivered.contains(&n)) && age < c.d_recent {
            recent.insert(nudge(n));
        }
        delivered.insert(n);
        if e == 3 && age < c.d_neg {
            neg.insert(nudge(n));
        }
    }
    (neg, recent)
}


/// Budget, ordering, blocking and diversity laws for one generated case.
pub fn check_filter_laws(c: &Case) -> Result<(), TestCaseError> {
    let (ranked, cs, history, cfg) = setup(c);
    let u = EntityId::user("u");
    let out = constraints_filter(&ranked, &history, &cfg, c.today);
    let out = &out[&u];

    let negs = history.negatively_rated(&u, c.today, c.d_neg);
    let recent = history.recently_sent(&u, c.today, c.d_recent);
    let survivors: Vec<EntityId> = ranked[&u]
        .iter()
        .map(|s| s.nudge.clone())
        .filter(|n| !negs.contains(n) && !recent.contains(n))
        .collect();
    // budget law
    let k = c.k.unwrap_or(usize::MAX);
    prop_assert_eq!(out.len(), k.min(survivors.len()));
    // order preserved: output is the head of the survivors
    let got: Vec<EntityId> = out.iter().map(|s| s.nudge.clone()).collect();
    prop_assert_eq!(&got[..], &survivors[..got.len()]);

    let (neg_o, recent_o) = blocked_oracle(c);
    prop_assert_eq!(negs.into_iter().cloned().collect::<BTreeSet<_>>(), neg_o.clone());
    prop_assert_eq!(recent.iter().map(|n| (*n).clone()).collect::<BTreeSet<_>>(), recent_o.clone());
    for n in &got {
        prop_assert!(!neg_o.contains(n), "negatively rated {} within window", n);
        prop_assert!(!recent_o.contains(n), "recently sent {} within window", n);
    }

    let div = diversity_sample(&BTreeMap::from([(u.clone(), out.clone())]), &cs, &history, &cfg, c.today);
    let slots = &div[&u];
    prop_assert_eq!(slots.len(), out.len());
    let distinct: BTreeSet<_> = slots.iter().map(|s| &s.nudge).collect();
    prop_assert_eq!(distinct.len(), slots.len());
    for s in slots {
        prop_assert!(!neg_o.contains(&s.nudge));
        prop_assert!(!recent_o.contains(&s.nudge));
        prop_assert!(cs.contains(&u, &s.nudge));
    }
    if c.p == 0.0 {
        prop_assert!(slots.iter().zip(out).all(|(s, o)| s.nudge == o.nudge && !s.replaced));
    }

    let defaults = PipelineConfig { d_recent: c.d_recent, seed: c.seed, ..PipelineConfig::default() };
    let one = constraints_filter(&ranked, &history, &defaults, c.today);
    let one = diversity_sample(&one, &cs, &history, &defaults, c.today);
    prop_assert!(one[&u].len() <= 1);
    Ok(())
}
