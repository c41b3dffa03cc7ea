use std::cmp::Ordering;
use std::fmt::Write as _;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{EvalError, Experiment, MetricReport};
use crate::gnn::{train_with, HyperParams, ModelState, TrainOptions};

/// Entity dim {16, 32, 64} × relation dim {16, 32, 64} × seven layer stacks,
/// with every other setting taken from `base`.
pub fn table_space(base: &HyperParams) -> Vec<HyperParams> {
    let stacks: [&[usize]; 7] = [&[16], &[32], &[64], &[32, 16], &[64, 32], &[64, 32, 16], &[32, 16, 8]];
    let mut out = Vec::with_capacity(63);
    for d in [16, 32, 64] {
        for k in [16, 32, 64] {
            for layers in stacks {
                out.push(HyperParams {
                    entity_dim: d,
                    relation_dim: k,
                    layer_dims: layers.to_vec(),
                    ..base.clone()
                });
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub hp: HyperParams,
    pub metrics: Option<MetricReport>,
    pub error: Option<String>,
    pub epochs: usize,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridReport {
    pub k: usize,
    pub rows: Vec<GridRow>,
    /// Index of the best row by precision@k.
    pub best: Option<usize>,
}

fn layers_str(l: &[usize]) -> String {
    let inner: Vec<String> = l.iter().map(usize::to_string).collect();
    format!("[{}]", inner.join(", "))
}

/// Higher precision first; ties go to fewer layers, then smaller entity and
/// relation dims.
fn better(a: &GridRow, b: &GridRow) -> Ordering {
    let p = |r: &GridRow| r.metrics.map_or(f64::NEG_INFINITY, |m| m.precision_at_k);
    p(a).total_cmp(&p(b))
        .then_with(|| b.hp.layer_dims.len().cmp(&a.hp.layer_dims.len()))
        .then_with(|| b.hp.entity_dim.cmp(&a.hp.entity_dim))
        .then_with(|| b.hp.relation_dim.cmp(&a.hp.relation_dim))
}

fn best_of<'a>(rows: impl Iterator<Item = (usize, &'a GridRow)>) -> Option<usize> {
    rows.filter(|(_, r)| r.metrics.is_some())
        .fold(None, |best: Option<(usize, &GridRow)>, (i, r)| match best {
            Some((_, b)) if better(r, b) != Ordering::Greater => best,
            _ => Some((i, r)),
        })
        .map(|(i, _)| i)
}

impl GridReport {
    pub fn best_row(&self) -> Option<&GridRow> {
        self.best.map(|i| &self.rows[i])
    }

    /// One line per configuration, tab separated.
    pub fn to_tsv(&self) -> String {
        let k = self.k;
        let mut s = format!(
            "entity_dim\trelation_dim\tlayers\thidden_dims\tprecision@{k}\trecall@{k}\tndcg@{k}\tmap\tepochs\tseconds\tstatus\n"
        );
        for r in &self.rows {
            let m = r.metrics;
            let f = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"));
            let _ = writeln!(
                s,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{:.2}\t{}",
                r.hp.entity_dim,
                r.hp.relation_dim,
                r.hp.layer_dims.len(),
                layers_str(&r.hp.layer_dims),
                f(m.map(|m| m.precision_at_k)),
                f(m.map(|m| m.recall_at_k)),
                f(m.map(|m| m.ndcg_at_k)),
                f(m.map(|m| m.mean_average_precision)),
                r.epochs,
                r.seconds,
                r.error.as_deref().unwrap_or("ok"),
            );
        }
        s
    }

    /// Best configuration per layer count.
    pub fn layer_summary(&self) -> String {
        let k = self.k;
        let mut s = format!(
            "layers\tentity_dim\trelation_dim\thidden_dims\tprecision@{k}\n"
        );
        let mut depths: Vec<usize> = self.rows.iter().map(|r| r.hp.layer_dims.len()).collect();
        depths.sort_unstable();
        depths.dedup();
        for depth in depths {
            let best = best_of(self.rows.iter().enumerate().filter(|(_, r)| r.hp.layer_dims.len() == depth));
            if let Some(r) = best.map(|i| &self.rows[i]) {
                let marker = if Some(best.unwrap()) == self.best { " *" } else { "" };
                let _ = writeln!(
                    s,
                    "{depth}\t{}\t{}\t{}\t{:.4}{marker}",
                    r.hp.entity_dim,
                    r.hp.relation_dim,
                    layers_str(&r.hp.layer_dims),
                    r.metrics.expect("best rows have metrics").precision_at_k,
                );
            }
        }
        s
    }
}

/// Trains every configuration on the experiment's training graph and scores
/// it on the held-out pairs. A configuration that fails is kept as a row
/// with its error.
pub fn grid_search(space: &[HyperParams], exp: &Experiment, k: usize) -> Result<GridReport, EvalError> {
    if space.is_empty() {
        return Err(EvalError::EmptySpace);
    }
    if k == 0 {
        return Err(EvalError::InvalidK);
    }
    let rows: Vec<GridRow> = space
        .par_iter()
        .map(|hp| {
            let t = Instant::now();
            let res = ModelState::init(&exp.train_snapshot, hp)
                .and_then(|m| {
                    train_with(
                        &exp.train_snapshot,
                        hp,
                        m,
                        TrainOptions {
                            candidates: Some(&exp.candidates),
                        },
                    )
                })
                .map_err(EvalError::from)
                .and_then(|(m, tel)| Ok((exp.evaluate(&m, k)?, tel.epochs_run)));
            let seconds = t.elapsed().as_secs_f64();
            match res {
                Ok((metrics, epochs)) => {
                    log::info!(
                        "d={} k={} layers={:?}: precision@{k}={:.4}",
                        hp.entity_dim,
                        hp.relation_dim,
                        hp.layer_dims,
                        metrics.precision_at_k
                    );
                    GridRow {
                        hp: hp.clone(),
                        metrics: Some(metrics),
                        error: None,
                        epochs,
                        seconds,
                    }
                }
                Err(e) => GridRow {
                    hp: hp.clone(),
                    metrics: None,
                    error: Some(e.to_string()),
                    epochs: 0,
                    seconds,
                },
            }
        })
        .collect();
    let best = best_of(rows.iter().enumerate());
    Ok(GridReport { k, rows, best })
}
