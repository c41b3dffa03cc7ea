//! Embedding model over the knowledge graph: Xavier/warm-start
//! initialization, attentive propagation, pairwise-ranking training and
//! candidate scoring.

mod attention;
pub mod linalg;
mod model;
mod propagate;
mod rank;
mod train;

use thiserror::Error;

use crate::graph::{EntityId, Relation};

pub use attention::{attention_weights, gat_attention_weights};
pub use model::{xavier_bound, Aggregator, AttentionKind, HyperParams, ModelState, PositiveLabels};
pub use propagate::{
    backward, compiled_attention, forward, forward_output, propagate, CompiledGraph, Forward,
    Gradients, Propagated,
};
pub use rank::{predict, rank_candidates, rank_with, sort_scored, PairError, Ranking, ScoredPair};
pub use train::{
    bpr_loss_and_gradients, train, train_with, EpochRecord, TrainOptions, TrainingTelemetry,
};

#[derive(Debug, Error)]
pub enum GnnError {
    #[error("invalid hyperparameters: {0}")]
    InvalidHyperParams(String),
    #[error("cannot initialize a model from an empty snapshot")]
    EmptySnapshot,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("no embedding for {0}")]
    UnknownEntity(EntityId),
    #[error("no parameters for relation {0}")]
    UnknownRelation(Relation),
    #[error("nothing to train on")]
    NothingToTrain,
    #[error("training diverged at epoch {epoch}")]
    Diverged { epoch: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}
