//! HTTP API over the annotation service.
//!
//! ```text
//! GET  /api/pairs/next?annotator=<id>   next assignment or {"status":"queue_empty"}
//! GET  /api/pairs/<pair_id>             image URIs, metadata, label count, consensus
//! POST /api/labels                      AnnotationRecord; 409 with the existing record on resubmission
//! GET  /api/conflicts                   tied pairs with vote counts
//! POST /api/adjudications               AdjudicationRecord
//! GET  /api/stats                       progress, per-annotator counts, agreement rate
//! GET  /api/export                      consensus labels as `pair_id,label` CSV
//! ```
//!
//! Other paths fall through to the static UI bundle when one is configured.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use serde_json::json;
use svdamage::annotation::{AdjudicationRecord, AnnotationError, AnnotationRecord, AnnotationService, PairInfo};
use svdamage::{DamageLabel, Error};
use tower_http::services::ServeDir;

type Shared = Arc<AnnotationService>;

struct ApiError(AnnotationError);

impl From<AnnotationError> for ApiError {
    fn from(e: AnnotationError) -> Self {
        Self(e)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let msg = self.0.to_string();
        let (status, body) = match self.0 {
            AnnotationError::UnknownAnnotator(_) | AnnotationError::UnknownPair(_) | AnnotationError::NoLabels(_) => {
                (StatusCode::NOT_FOUND, json!({ "error": msg }))
            }
            AnnotationError::NotAdjudicator(_) => (StatusCode::FORBIDDEN, json!({ "error": msg })),
            AnnotationError::InvalidLabel(_) => (StatusCode::BAD_REQUEST, json!({ "error": msg })),
            AnnotationError::Duplicate(existing) => {
                (StatusCode::CONFLICT, json!({ "error": msg, "existing": existing }))
            }
            AnnotationError::NotInConflict(_) => (StatusCode::CONFLICT, json!({ "error": msg })),
            AnnotationError::Storage(_) => (StatusCode::INTERNAL_SERVER_ERROR, json!({ "error": msg })),
        };
        (status, Json(body)).into_response()
    }
}

#[derive(Deserialize)]
struct NextQuery {
    annotator: String,
}

#[derive(Serialize)]
#[serde(tag = "status", rename_all = "snake_case")]
enum Assignment {
    Assigned { pair: PairInfo },
    QueueEmpty,
}

/// Label submission; `submitted_at` defaults to the arrival time.
#[derive(Deserialize)]
struct LabelBody {
    pair_id: String,
    annotator_id: String,
    label: DamageLabel,
    submitted_at: Option<DateTime<Utc>>,
}

#[derive(Deserialize)]
struct AdjudicationBody {
    pair_id: String,
    adjudicator_id: String,
    label: DamageLabel,
    submitted_at: Option<DateTime<Utc>>,
}

async fn next_pair(State(svc): State<Shared>, Query(q): Query<NextQuery>) -> Result<Json<Assignment>, ApiError> {
    Ok(Json(match svc.next_pair(&q.annotator)? {
        Some(pair) => Assignment::Assigned { pair },
        None => Assignment::QueueEmpty,
    }))
}

async fn pair(State(svc): State<Shared>, Path(id): Path<String>) -> Result<impl IntoResponse, ApiError> {
    Ok(Json(svc.pair(&id)?))
}

async fn submit(State(svc): State<Shared>, Json(b): Json<LabelBody>) -> Result<impl IntoResponse, ApiError> {
    let record = svc.submit(AnnotationRecord {
        pair_id: b.pair_id,
        annotator_id: b.annotator_id,
        label: b.label,
        submitted_at: b.submitted_at.unwrap_or_else(Utc::now),
    })?;
    Ok((StatusCode::CREATED, Json(record)))
}

async fn conflicts(State(svc): State<Shared>) -> impl IntoResponse {
    Json(svc.conflicts())
}

async fn adjudicate(
    State(svc): State<Shared>,
    Json(b): Json<AdjudicationBody>,
) -> Result<impl IntoResponse, ApiError> {
    let c = svc.adjudicate(AdjudicationRecord {
        pair_id: b.pair_id,
        adjudicator_id: b.adjudicator_id,
        label: b.label,
        submitted_at: b.submitted_at.unwrap_or_else(Utc::now),
    })?;
    Ok((StatusCode::CREATED, Json(c)))
}

async fn stats(State(svc): State<Shared>) -> impl IntoResponse {
    Json(svc.stats())
}

async fn export(State(svc): State<Shared>) -> Result<impl IntoResponse, ApiError> {
    let mut buf = Vec::new();
    svc.export_labels(&mut buf).map_err(AnnotationError::from)?;
    Ok(([(header::CONTENT_TYPE, "text/csv")], buf))
}

pub fn router(svc: Shared, static_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/api/pairs/next", get(next_pair))
        .route("/api/pairs/{pair_id}", get(pair))
        .route("/api/labels", post(submit))
        .route("/api/conflicts", get(conflicts))
        .route("/api/adjudications", post(adjudicate))
        .route("/api/stats", get(stats))
        .route("/api/export", get(export))
        .with_state(svc);
    match static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}

/// Serve until Ctrl-C. `on_bind` receives the bound address before serving starts.
pub fn serve(
    svc: Shared,
    static_dir: Option<PathBuf>,
    addr: SocketAddr,
    on_bind: impl FnOnce(SocketAddr),
) -> svdamage::Result<()> {
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| Error::io("<runtime>", e))?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr)
            .await
            .map_err(|e| Error::io(format!("<bind {addr}>"), e))?;
        let bound = listener.local_addr().map_err(|e| Error::io("<listener>", e))?;
        on_bind(bound);
        axum::serve(listener, router(svc, static_dir))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
            .map_err(|e| Error::io("<server>", e))
    })
}
