//! Knowledge-graph attention recommender for personalized health nudges.
//!
//! The crate is organized along the daily cycle:
//!
//! - [`graph`]: the dynamic knowledge graph and its input records.
//! - [`gnn`]: embedding model, attentive propagation, training and ranking.
//! - [`candidates`]: targeting rules that yield each user's candidate nudges.
//! - [`pipeline`]: business-rule filter, diversity sampling, templating and
//!   the parallel batch run with retry.
//! - [`eval`]: holdout splits, ranking metrics, grid search and the scaling
//!   benchmark.
//! - [`serving`]: nudge fetch / feedback ingestion service.
//! - [`synth`]: deterministic synthetic populations.

pub mod graph;
pub mod candidates;
pub mod gnn;
pub mod pipeline;
pub mod synth;
pub mod eval;
pub mod serving;
mod rng;

pub use rng::derived_rng;
