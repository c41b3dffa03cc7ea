//! JSON over HTTP:
//!
//! - `GET /nudges/{user_id}?day=N` → `[NudgeDelivery]`, 404 for unknown
//!   users, 503 when the day's run is not published
//! - `POST /feedback` with a JSON array of events → `FeedbackOutcome`
//! - `POST /participants` with JSON-lines text → `IngestOutcome`
//! - `GET /health` → `Health`

use std::sync::Arc;

use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use tokio::sync::RwLock;

use super::{NudgeService, ServingError};
use crate::graph::Day;

pub type SharedService = Arc<RwLock<NudgeService>>;

impl IntoResponse for ServingError {
    fn into_response(self) -> Response {
        let status = match &self {
            ServingError::NotFound(_) => StatusCode::NOT_FOUND,
            ServingError::Unavailable { .. } => StatusCode::SERVICE_UNAVAILABLE,
            ServingError::Parse(_) | ServingError::StaleDay { .. } | ServingError::Graph(_) => {
                StatusCode::BAD_REQUEST
            }
            ServingError::Io(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        (status, Json(serde_json::json!({ "error": self.to_string() }))).into_response()
    }
}

#[derive(Deserialize)]
struct DayQuery {
    day: Day,
}

async fn nudges(
    State(svc): State<SharedService>,
    Path(user): Path<String>,
    Query(q): Query<DayQuery>,
) -> Result<Response, ServingError> {
    let out = svc.write().await.get_nudges(&user, q.day)?;
    Ok(Json(out).into_response())
}

async fn feedback(
    State(svc): State<SharedService>,
    Json(values): Json<Vec<serde_json::Value>>,
) -> Result<Response, ServingError> {
    let out = svc.write().await.post_feedback_json(&values)?;
    Ok(Json(out).into_response())
}

async fn participants(State(svc): State<SharedService>, body: String) -> Result<Response, ServingError> {
    let out = svc.write().await.ingest_participants(body.as_bytes())?;
    Ok(Json(out).into_response())
}

async fn health(State(svc): State<SharedService>) -> Response {
    Json(svc.read().await.health()).into_response()
}

pub fn router(svc: SharedService) -> Router {
    Router::new()
        .route("/nudges/{user}", get(nudges))
        .route("/feedback", post(feedback))
        .route("/participants", post(participants))
        .route("/health", get(health))
        .with_state(svc)
}
