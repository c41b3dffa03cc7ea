mod common;

use std::collections::BTreeMap;

use common::cases::*;
use common::*;
use nudge_core::candidates::{Candidate, CandidateSet};
use nudge_core::gnn::ScoredPair;
use nudge_core::graph::EntityId;
use nudge_core::pipeline::{
    diversity_sample, partition, run_parallel, DeliveryHistory, PipelineConfig,
    PipelineError,
};
use proptest::prelude::*;
use rand::Rng;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10_000))]

    #[test]
    fn filter_laws(c in case()) {
        check_filter_laws(&c)?;
    }
}

#[test]
fn diversity_replacement_rate() {
    let cfg = PipelineConfig {
        p_diversity: 0.3,
        seed: 5,
        ..PipelineConfig::default()
    };
    let mut filtered = BTreeMap::new();
    let mut cs = CandidateSet::new();
    for i in 0..10_000 {
        let u = EntityId::user(format!("u{i}"));
        filtered.insert(
            u.clone(),
            vec![ScoredPair {
                user: u.clone(),
                nudge: nudge(0),
                score: 1.0,
            }],
        );
        cs.insert(
            u,
            (0..20)
                .map(|n| Candidate {
                    nudge: nudge(n),
                    rule_id: "r".into(),
                })
                .collect(),
        );
    }
    let out = diversity_sample(&filtered, &cs, &DeliveryHistory::new(), &cfg, 3);
    let replaced = out.values().flatten().filter(|s| s.replaced).count();
    let rate = replaced as f64 / 10_000.0;
    assert!((rate - 0.3).abs() <= 0.02, "replacement rate {rate}");

    let again = diversity_sample(&filtered, &cs, &DeliveryHistory::new(), &cfg, 3);
    assert_eq!(out, again);
}

#[test]
fn partitions_are_disjoint_and_exhaustive() {
    let mut r = rng(17);
    let mut pairs: Vec<(usize, usize)> = (0..49).map(|_| (r.gen_range(1..500), r.gen_range(1..40))).collect();
    pairs.push((10, 3));
    for (n, b) in pairs {
        let parts = partition(n, b);
        assert_eq!(parts.len(), b);
        let size = n.div_ceil(b);
        let mut covered = vec![0u8; n];
        for p in &parts {
            assert!(p.len() <= size);
            for i in p.clone() {
                covered[i] += 1;
            }
        }
        assert!(covered.iter().all(|&c| c == 1), "n={n} b={b}");
    }
    let sizes: Vec<usize> = partition(10, 3).iter().map(|p| p.len()).collect();
    assert_eq!(sizes, vec![4, 4, 2]);
}

#[test]
fn retries_reproduce_fault_free_output() {
    let w = world(60, 2);
    let cfg = PipelineConfig {
        batches: 4,
        seed: 9,
        ..PipelineConfig::default()
    };
    let clean = run_parallel(&w.inputs(), &cfg, None).unwrap();
    assert_eq!(clean.selections.len(), 60);
    assert_eq!(clean.telemetry.batches_retried, 0);
    for q in 0..cfg.batches {
        let fault = move |b: usize, attempt: usize| b == q && attempt == 0;
        let run = run_parallel(&w.inputs(), &cfg, Some(&fault)).unwrap();
        assert_eq!(run.records(), clean.records());
        assert_eq!(run.telemetry.batches_retried, 1);
    }
    let single = run_parallel(&w.inputs(), &PipelineConfig { batches: 1, ..cfg.clone() }, None).unwrap();
    assert_eq!(single.records(), clean.records());
}

#[test]
fn persistent_failure_reports_batches_and_keeps_partial_output() {
    let w = world(30, 4);
    let cfg = PipelineConfig {
        batches: 3,
        ..PipelineConfig::default()
    };
    let fault = |b: usize, _: usize| b == 1;
    match run_parallel(&w.inputs(), &cfg, Some(&fault)) {
        Err(PipelineError::BatchesFailed { failed, partial, .. }) => {
            assert_eq!(failed, vec![1]);
            assert_eq!(partial.selections.len(), 20);
            assert_eq!(partial.telemetry.attempts, 1 + cfg.max_retries);
        }
        other => panic!("expected failure, got {other:?}"),
    }
}

#[test]
fn daily_output_respects_budget_and_renders() {
    let w = world(80, 6);
    let cfg = PipelineConfig::default();
    let run = run_parallel(&w.inputs(), &cfg, None).unwrap();
    let t = &run.telemetry;
    assert_eq!(t.users_processed, 80);
    assert!(t.candidates_scored > 0);
    assert!(run.selections.values().all(|l| l.len() <= 1));
    assert_eq!(t.nudges_emitted, run.records().len());
    for r in run.records() {
        assert!(!r.text.contains("{{"), "{}", r.text);
        assert_eq!(r.rank, 1);
    }
    let line = serde_json::to_string(&run.records()[0]).unwrap();
    for field in ["user_id", "nudge_id", "text", "rank", "was_diversity_replacement"] {
        assert!(line.contains(field));
    }
}
