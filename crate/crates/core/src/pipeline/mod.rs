//! Daily delivery pipeline: candidates, ranking, business-rule filter,
//! diversity sampling and templating, run over contiguous user batches in
//! parallel with retry of failed batches.

mod filter;
mod render;

use std::collections::BTreeMap;
use std::fmt;
use std::ops::Range;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::candidates::{generate_for_users, CandidateSet, TargetingRule};
use crate::gnn::{propagate, rank_with, GnnError, ModelState, PairError, Propagated};
use crate::graph::{Day, EntityId, EntityKind, FieldMap, GraphSnapshot, NudgeTemplate};

pub use filter::{constraints_filter, diversity_sample, Delivery, DeliveryHistory, Rating, Slot};
pub use render::{format_value, placeholders, render_template, MissingField};

/// Per-user daily nudge budget.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "BudgetRepr", into = "BudgetRepr")]
pub enum Budget {
    Limited(usize),
    Unlimited,
}

impl Budget {
    pub fn limit(self) -> usize {
        match self {
            Budget::Limited(k) => k,
            Budget::Unlimited => usize::MAX,
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum BudgetRepr {
    Count(usize),
    Word(String),
}

impl TryFrom<BudgetRepr> for Budget {
    type Error = String;

    fn try_from(r: BudgetRepr) -> Result<Self, String> {
        match r {
            BudgetRepr::Count(k) => Ok(Budget::Limited(k)),
            BudgetRepr::Word(w) if w == "unlimited" => Ok(Budget::Unlimited),
            BudgetRepr::Word(w) => Err(format!("k_daily must be a count or \"unlimited\", got {w:?}")),
        }
    }
}

impl From<Budget> for BudgetRepr {
    fn from(b: Budget) -> Self {
        match b {
            Budget::Limited(k) => BudgetRepr::Count(k),
            Budget::Unlimited => BudgetRepr::Word("unlimited".into()),
        }
    }
}

impl fmt::Display for Budget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Budget::Limited(k) => write!(f, "{k}"),
            Budget::Unlimited => f.write_str("unlimited"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(alias = "b")]
    pub batches: usize,
    pub k_daily: Budget,
    pub p_diversity: f64,
    pub d_neg_filter: u32,
    pub d_recent: u32,
    pub seed: u64,
    pub max_retries: usize,
    /// Whether diversity replacements also skip recently sent nudges.
    pub diversity_respects_recency: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            batches: 8,
            k_daily: Budget::Limited(1),
            p_diversity: 0.3,
            d_neg_filter: 7,
            d_recent: 7,
            seed: 0,
            max_retries: 3,
            diversity_respects_recency: true,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.batches == 0 {
            return Err(PipelineError::InvalidConfig("batches must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.p_diversity) {
            return Err(PipelineError::InvalidConfig(format!(
                "p_diversity must lie in [0, 1], got {}",
                self.p_diversity
            )));
        }
        Ok(())
    }
}

/// `b` contiguous ranges of `⌈n/b⌉` users; trailing ranges may be short or
/// empty.
pub fn partition(n: usize, b: usize) -> Vec<Range<usize>> {
    assert!(b > 0, "at least one batch");
    let size = n.div_ceil(b);
    (0..b)
        .map(|q| (q * size).min(n)..((q + 1) * size).min(n))
        .collect()
}

/// Everything one day's run reads. Nothing here is mutated.
#[derive(Clone, Copy)]
pub struct DailyInputs<'a> {
    pub snapshot: &'a GraphSnapshot,
    pub model: &'a ModelState,
    pub rules: &'a [TargetingRule],
    pub library: &'a [NudgeTemplate],
    /// Per-user fields for template placeholders.
    pub contexts: &'a BTreeMap<EntityId, FieldMap>,
    pub history: &'a DeliveryHistory,
    pub today: Day,
}

/// Test hook: returns true when batch `batch` should fail on `attempt`
/// (both zero-based).
pub type FaultInjector<'a> = &'a (dyn Fn(usize, usize) -> bool + Sync);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selected {
    pub nudge: EntityId,
    pub text: String,
    pub replaced: bool,
}

/// One line of the per-day output file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DayRecord {
    pub day: Day,
    pub user_id: String,
    pub nudge_id: String,
    pub text: String,
    /// 1-based position in the user's final list.
    pub rank: usize,
    pub was_diversity_replacement: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderDrop {
    pub user: EntityId,
    pub nudge: EntityId,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimes {
    pub propagate: f64,
    pub candidates: f64,
    pub rank: f64,
    pub filter: f64,
    pub diversity: f64,
    pub render: f64,
    pub total: f64,
}

impl StageTimes {
    fn add(&mut self, o: &StageTimes) {
        self.candidates += o.candidates;
        self.rank += o.rank;
        self.filter += o.filter;
        self.diversity += o.diversity;
        self.render += o.render;
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PipelineTelemetry {
    pub users_processed: usize,
    pub candidates_scored: usize,
    pub nudges_emitted: usize,
    pub diversity_replacements: usize,
    pub batches_retried: usize,
    pub attempts: usize,
    /// Seconds per stage, summed over batches (except `propagate` and `total`).
    pub stage_seconds: StageTimes,
    pub score_errors: Vec<PairError>,
    pub dropped: Vec<RenderDrop>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DailyRun {
    pub day: Day,
    pub selections: BTreeMap<EntityId, Vec<Selected>>,
    pub telemetry: PipelineTelemetry,
}

impl DailyRun {
    pub fn records(&self) -> Vec<DayRecord> {
        self.selections
            .iter()
            .flat_map(|(u, list)| {
                list.iter().enumerate().map(move |(i, s)| DayRecord {
                    day: self.day,
                    user_id: u.local_id.clone(),
                    nudge_id: s.nudge.local_id.clone(),
                    text: s.text.clone(),
                    rank: i + 1,
                    was_diversity_replacement: s.replaced,
                })
            })
            .collect()
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid pipeline config: {0}")]
    InvalidConfig(String),
    #[error("snapshot has no users")]
    EmptyPopulation,
    #[error(transparent)]
    Gnn(#[from] GnnError),
    #[error("batches {failed:?} still failing after retries: {reasons:?}")]
    BatchesFailed {
        failed: Vec<usize>,
        reasons: Vec<String>,
        /// Output of the batches that did succeed.
        partial: Box<DailyRun>,
    },
}

struct BatchOutput {
    selections: Vec<(EntityId, Vec<Selected>)>,
    candidates_scored: usize,
    replacements: usize,
    times: StageTimes,
    score_errors: Vec<PairError>,
    dropped: Vec<RenderDrop>,
}

fn secs(since: Instant) -> f64 {
    since.elapsed().as_secs_f64()
}

fn run_batch(
    inputs: &DailyInputs<'_>,
    propagated: &Propagated,
    templates: &BTreeMap<EntityId, &str>,
    users: &[EntityId],
    cfg: &PipelineConfig,
) -> Result<BatchOutput, String> {
    let mut times = StageTimes::default();
    let t = Instant::now();
    let candidates: CandidateSet =
        generate_for_users(inputs.snapshot, inputs.rules, users).map_err(|e| e.to_string())?;
    times.candidates = secs(t);

    let t = Instant::now();
    let ranking = rank_with(propagated, candidates.iter());
    times.rank = secs(t);

    let mut out = BatchOutput {
        selections: Vec::with_capacity(users.len()),
        candidates_scored: candidates.pair_count(),
        replacements: 0,
        times,
        score_errors: ranking.errors,
        dropped: Vec::new(),
    };
    let empty = FieldMap::new();
    for user in users {
        let t = Instant::now();
        let ranked = ranking.ranked.get(user).map(Vec::as_slice).unwrap_or(&[]);
        let kept = filter::filter_user(user, ranked, inputs.history, cfg, inputs.today);
        out.times.filter += secs(t);

        let t = Instant::now();
        let nudges: Vec<EntityId> = kept.into_iter().map(|s| s.nudge).collect();
        let slots = filter::diversify_user(user, &nudges, &candidates, inputs.history, cfg, inputs.today);
        out.times.diversity += secs(t);

        let t = Instant::now();
        let ctx = inputs.contexts.get(user).unwrap_or(&empty);
        let mut chosen = Vec::with_capacity(slots.len());
        for slot in slots {
            let rendered = templates
                .get(&slot.nudge)
                .ok_or_else(|| "nudge has no template".to_string())
                .and_then(|t| render_template(t, ctx).map_err(|e| e.to_string()));
            match rendered {
                Ok(text) => {
                    out.replacements += usize::from(slot.replaced);
                    chosen.push(Selected {
                        nudge: slot.nudge,
                        text,
                        replaced: slot.replaced,
                    });
                }
                Err(reason) => {
                    log::warn!("dropping {} for {user}: {reason}", slot.nudge);
                    out.dropped.push(RenderDrop {
                        user: user.clone(),
                        nudge: slot.nudge,
                        reason,
                    });
                }
            }
        }
        out.times.render += secs(t);
        out.selections.push((user.clone(), chosen));
    }
    Ok(out)
}

/// Runs the day for every user in the snapshot.
///
/// Batches that fail are re-run (only those) up to `max_retries` more times.
/// All randomness is keyed by seed, user and day, so the result does not
/// depend on the batch layout or on which attempt produced a batch.
pub fn run_parallel(
    inputs: &DailyInputs<'_>,
    cfg: &PipelineConfig,
    fault_injector: Option<FaultInjector<'_>>,
) -> Result<DailyRun, PipelineError> {
    cfg.validate()?;
    let start = Instant::now();
    let users: Vec<EntityId> = inputs.snapshot.entities_of(EntityKind::User).cloned().collect();
    if users.is_empty() {
        return Err(PipelineError::EmptyPopulation);
    }
    let t = Instant::now();
    let propagated = propagate(inputs.model, inputs.snapshot)?;
    let propagate_secs = secs(t);
    let templates: BTreeMap<EntityId, &str> = inputs
        .library
        .iter()
        .map(|t| (EntityId::nudge(t.nudge_id.as_str()), t.text.as_str()))
        .collect();

    let ranges = partition(users.len(), cfg.batches);
    let mut done: Vec<Option<BatchOutput>> = (0..ranges.len()).map(|_| None).collect();
    let mut pending: Vec<usize> = (0..ranges.len()).collect();
    let mut reasons = BTreeMap::new();
    let mut telemetry = PipelineTelemetry::default();
    for attempt in 0..=cfg.max_retries {
        if pending.is_empty() {
            break;
        }
        if attempt > 0 {
            telemetry.batches_retried += pending.len();
            log::info!("retrying batches {pending:?} (attempt {})", attempt + 1);
        }
        telemetry.attempts += 1;
        let results: Vec<(usize, Result<BatchOutput, String>)> = pending
            .par_iter()
            .map(|&q| {
                let res = if fault_injector.is_some_and(|f| f(q, attempt)) {
                    Err("injected fault".to_string())
                } else {
                    run_batch(inputs, &propagated, &templates, &users[ranges[q].clone()], cfg)
                };
                (q, res)
            })
            .collect();
        pending.clear();
        for (q, res) in results {
            match res {
                Ok(out) => {
                    reasons.remove(&q);
                    done[q] = Some(out);
                }
                Err(e) => {
                    log::warn!("batch {q} failed on attempt {}: {e}", attempt + 1);
                    reasons.insert(q, e);
                    pending.push(q);
                }
            }
        }
    }

    let mut run = DailyRun {
        day: inputs.today,
        ..DailyRun::default()
    };
    for out in done.into_iter().flatten() {
        telemetry.users_processed += out.selections.len();
        telemetry.candidates_scored += out.candidates_scored;
        telemetry.diversity_replacements += out.replacements;
        telemetry.stage_seconds.add(&out.times);
        telemetry.score_errors.extend(out.score_errors);
        telemetry.dropped.extend(out.dropped);
        for (u, list) in out.selections {
            telemetry.nudges_emitted += list.len();
            run.selections.insert(u, list);
        }
    }
    telemetry.stage_seconds.propagate = propagate_secs;
    telemetry.stage_seconds.total = secs(start);
    run.telemetry = telemetry;
    if pending.is_empty() {
        Ok(run)
    } else {
        pending.sort_unstable();
        Err(PipelineError::BatchesFailed {
            reasons: pending.iter().map(|q| format!("batch {q}: {}", reasons[q])).collect(),
            failed: pending,
            partial: Box::new(run),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partition_example() {
        let sizes: Vec<usize> = partition(10, 3).iter().map(|r| r.len()).collect();
        assert_eq!(sizes, vec![4, 4, 2]);
        assert_eq!(partition(10, 1), vec![0..10]);
        assert_eq!(partition(3, 8).iter().filter(|r| !r.is_empty()).count(), 3);
    }

    #[test]
    fn budget_serde() {
        let c: PipelineConfig = toml::from_str("k_daily = \"unlimited\"\nb = 2").unwrap();
        assert_eq!(c.k_daily, Budget::Unlimited);
        assert_eq!(c.batches, 2);
        let c: PipelineConfig = toml::from_str("k_daily = 3").unwrap();
        assert_eq!(c.k_daily, Budget::Limited(3));
        assert!(toml::from_str::<PipelineConfig>("k_daily = \"lots\"").is_err());
        let back: PipelineConfig = toml::from_str(&toml::to_string(&PipelineConfig::default()).unwrap()).unwrap();
        assert_eq!(back, PipelineConfig::default());
    }

    #[test]
    fn config_bounds() {
        assert!(PipelineConfig { batches: 0, ..Default::default() }.validate().is_err());
        assert!(PipelineConfig { p_diversity: 1.5, ..Default::default() }.validate().is_err());
        assert!(PipelineConfig::default().validate().is_ok());
    }
}
