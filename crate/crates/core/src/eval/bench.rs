use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::candidates::rules_from_library;
use crate::gnn::{HyperParams, ModelState};
use crate::graph::{construct_graph, ConstructOptions};
use crate::pipeline::{run_parallel, DailyInputs, DeliveryHistory, PipelineConfig};
use crate::synth::{generate_population, PopulationSpec};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

/// Ordinary least squares `y = slope · x + intercept`.
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> Result<LinearFit, EvalError> {
    let mut distinct: Vec<f64> = xs.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    if distinct.len() < 3 || xs.len() != ys.len() {
        return Err(EvalError::TooFewVolumes(distinct.len()));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r_squared = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    Ok(LinearFit {
        slope,
        intercept,
        r_squared,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingPoint {
    pub users: usize,
    pub pairs: usize,
    /// Fastest of the repeated runs.
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingReport {
    pub points: Vec<ScalingPoint>,
    pub fit: LinearFit,
}

impl ScalingReport {
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("users\tpairs\tseconds\n");
        for p in &self.points {
            s.push_str(&format!("{}\t{}\t{:.6}\n", p.users, p.pairs, p.seconds));
        }
        s.push_str(&format!(
            "# seconds = {:.6e} * pairs + {:.6}; R^2 = {:.5}\n",
            self.fit.slope, self.fit.intercept, self.fit.r_squared
        ));
        s
    }
}

/// Times the full daily run over synthetic populations of the given sizes
/// and fits wall-clock against the number of scored candidate pairs.
pub fn scaling_benchmark(
    user_counts: &[usize],
    cfg: &PipelineConfig,
    hp: &HyperParams,
    seed: u64,
    repeats: usize,
) -> Result<ScalingReport, EvalError> {
    let mut distinct = user_counts.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 3 {
        return Err(EvalError::TooFewVolumes(distinct.len()));
    }
    let mut points = Vec::with_capacity(user_counts.len());
    for &users in user_counts {
        let pop = generate_population(&PopulationSpec::bench(users, seed))?;
        let built = construct_graph(
            &pop.library,
            &pop.participants,
            &pop.interactions,
            &pop.catalog,
            &ConstructOptions::default(),
        )?;
        let model = ModelState::init(&built.snapshot, hp)?;
        let rules = rules_from_library(&pop.library)?;
        let contexts = pop.contexts();
        let history = DeliveryHistory::from_events(&pop.interactions);
        let today = built.snapshot.time() + 1;
        let inputs = DailyInputs {
            snapshot: &built.snapshot,
            model: &model,
            rules: &rules,
            library: &pop.library,
            contexts: &contexts,
            history: &history,
            today,
        };
        let mut best = f64::INFINITY;
        let mut pairs = 0;
        for _ in 0..repeats.max(1) {
            let t = Instant::now();
            let run = run_parallel(&inputs, cfg, None)?;
            best = best.min(t.elapsed().as_secs_f64());
            pairs = run.telemetry.candidates_scored;
        }
        log::info!("{users} users, {pairs} pairs: {best:.3}s");
        points.push(ScalingPoint {
            users,
            pairs,
            seconds: best,
        });
    }
    let xs: Vec<f64> = points.iter().map(|p| p.pairs as f64).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.seconds).collect();
    let fit = linear_fit(&xs, &ys)?;
    Ok(ScalingReport { points, fit })
}
