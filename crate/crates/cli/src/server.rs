//! HTTP annotation service over an [`AnnotationQueue`].
//!
//! Four JSON endpoints: run status, lease the next sentence, submit a
//! translation and skip. Errors come back as `{"error": code, "message": text}`.

use std::future::Future;
use std::sync::Arc;

use activemt::active_loop::{AnnotationQueue, QueueError, RunStatus, Task};
use activemt::corpus::SentenceId;
use axum::extract::{Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};

#[derive(Debug, Deserialize)]
pub struct NextQuery {
    pub annotator: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SubmitRequest {
    pub lease_id: String,
    pub sentence_id: SentenceId,
    pub target_text: String,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SkipRequest {
    pub lease_id: String,
    pub sentence_id: SentenceId,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Ack {
    pub status: String,
    pub sentence_id: SentenceId,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ErrorBody {
    pub error: String,
    pub message: String,
}

struct ApiError(QueueError);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, code) = match self.0 {
            QueueError::StaleLease => (StatusCode::CONFLICT, "stale_lease"),
            QueueError::EmptyTarget => (StatusCode::UNPROCESSABLE_ENTITY, "empty_target"),
            QueueError::NoAnnotator => (StatusCode::BAD_REQUEST, "no_annotator"),
        };
        let body = ErrorBody {
            error: code.into(),
            message: self.0.to_string(),
        };
        (status, Json(body)).into_response()
    }
}

pub fn router(queue: Arc<AnnotationQueue>) -> Router {
    Router::new()
        .route("/api/run/status", get(status))
        .route("/api/batch/next", get(next))
        .route("/api/batch/submit", post(submit))
        .route("/api/batch/skip", post(skip))
        .with_state(queue)
}

async fn status(State(queue): State<Arc<AnnotationQueue>>) -> Json<RunStatus> {
    Json(queue.status())
}

/// 200 with a task, or 204 when nothing is waiting for an answer.
async fn next(State(queue): State<Arc<AnnotationQueue>>, Query(q): Query<NextQuery>) -> Response {
    match queue.next(q.annotator.as_deref().unwrap_or("")) {
        Ok(Some(task)) => Json::<Task>(task).into_response(),
        Ok(None) => StatusCode::NO_CONTENT.into_response(),
        Err(e) => ApiError(e).into_response(),
    }
}

async fn submit(State(queue): State<Arc<AnnotationQueue>>, Json(req): Json<SubmitRequest>) -> Response {
    match queue.submit(&req.lease_id, req.sentence_id, &req.target_text) {
        Ok(()) => Json(Ack {
            status: "labeled".into(),
            sentence_id: req.sentence_id,
        })
        .into_response(),
        Err(e) => ApiError(e).into_response(),
    }
}

async fn skip(State(queue): State<Arc<AnnotationQueue>>, Json(req): Json<SkipRequest>) -> Response {
    match queue.skip(&req.lease_id, req.sentence_id) {
        Ok(()) => Json(Ack {
            status: "skipped".into(),
            sentence_id: req.sentence_id,
        })
        .into_response(),
        Err(e) => ApiError(e).into_response(),
    }
}

/// Serves until `shutdown` resolves.
pub async fn serve(
    listener: tokio::net::TcpListener,
    queue: Arc<AnnotationQueue>,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(queue)).with_graceful_shutdown(shutdown).await
}
