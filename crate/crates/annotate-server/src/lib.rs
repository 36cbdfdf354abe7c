//! HTTP JSON API over a two-annotator labeling campaign.
//!
//! | Method | Path | Responses |
//! |---|---|---|
//! | GET | `/items/next?annotator=ID` | 200 item, 204 queue empty, 422 unknown annotator |
//! | POST | `/labels` | 201 stored record, 409 already labeled, 422 invalid record |
//! | GET | `/progress` | per-annotator counts |
//! | GET | `/agreement` | resolution summary, kappa, per-item judgments |
//! | GET | `/export?task=fakenews\|toxicity[&kind=binary\|multilabel]` | JSONL |
//!
//! All state lives in the campaign, whose submissions go through one mutex:
//! a label is appended to the log and applied while the lock is held, so
//! concurrent annotators are serialized and every read sees a consistent
//! snapshot.

use std::net::SocketAddr;
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::{SystemTime, UNIX_EPOCH};

use axum::extract::{Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use lrlm_core::annotation::{
    agreement_report, export_dataset, AgreementReport, AnnotationRecord, AnnotationTask, Campaign,
    ResolvedLabel,
};
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum ServerError {
    #[error("cannot listen on {addr}: {source}")]
    Bind {
        addr: SocketAddr,
        source: std::io::Error,
    },
    #[error("server stopped: {0}")]
    Serve(std::io::Error),
}

/// Shared service state.
#[derive(Debug)]
pub struct AppState {
    campaign: Mutex<Campaign>,
}

impl AppState {
    pub fn new(campaign: Campaign) -> Arc<Self> {
        Arc::new(Self {
            campaign: Mutex::new(campaign),
        })
    }

    fn campaign(&self) -> MutexGuard<'_, Campaign> {
        // A panic while holding the lock cannot leave a half-applied record:
        // records are applied in one step after the log write succeeds.
        self.campaign
            .lock()
            .unwrap_or_else(|poisoned| poisoned.into_inner())
    }
}

/// Error responses carry `{"error": message}`.
struct ApiError(StatusCode, String);

impl From<lrlm_core::Error> for ApiError {
    fn from(e: lrlm_core::Error) -> Self {
        let status = match &e {
            lrlm_core::Error::Conflict(_) => StatusCode::CONFLICT,
            lrlm_core::Error::Validation(_) => StatusCode::UNPROCESSABLE_ENTITY,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError(status, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(serde_json::json!({ "error": self.1 }))).into_response()
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/items/next", get(next_item))
        .route("/labels", post(submit_label))
        .route("/progress", get(progress))
        .route("/agreement", get(agreement))
        .route("/export", get(export))
        .with_state(state)
}

#[derive(Deserialize)]
struct NextQuery {
    annotator: String,
}

async fn next_item(
    State(state): State<Arc<AppState>>,
    Query(q): Query<NextQuery>,
) -> Result<Response, ApiError> {
    let campaign = state.campaign();
    Ok(match campaign.next_item(&q.annotator)? {
        Some(item) => Json(item).into_response(),
        None => StatusCode::NO_CONTENT.into_response(),
    })
}

async fn submit_label(
    State(state): State<Arc<AppState>>,
    Json(mut record): Json<AnnotationRecord>,
) -> Result<(StatusCode, Json<AnnotationRecord>), ApiError> {
    if record.timestamp.is_none() {
        record.timestamp = Some(
            SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map_or(0, |d| d.as_secs()),
        );
    }
    let stored = state.campaign().submit(record)?;
    log::info!(
        "{} labeled {} as {}",
        stored.annotator_id,
        stored.item_id,
        stored.stage1
    );
    Ok((StatusCode::CREATED, Json(stored)))
}

async fn progress(State(state): State<Arc<AppState>>) -> impl IntoResponse {
    Json(state.campaign().progress())
}

/// Agreement statistics plus the per-item judgments behind them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementPayload {
    #[serde(flatten)]
    pub report: AgreementReport,
    pub items: Vec<ResolvedLabel>,
    pub incomplete: Vec<String>,
}

async fn agreement(State(state): State<Arc<AppState>>) -> impl IntoResponse {
    let campaign = state.campaign();
    let resolution = campaign.resolve();
    Json(AgreementPayload {
        report: agreement_report(campaign.items(), campaign.records()),
        items: resolution.labels,
        incomplete: resolution.incomplete,
    })
}

#[derive(Deserialize)]
struct ExportQuery {
    task: String,
    kind: Option<String>,
}

async fn export(
    State(state): State<Arc<AppState>>,
    Query(q): Query<ExportQuery>,
) -> Result<Response, ApiError> {
    let task: AnnotationTask = q.task.parse()?;
    let datasets = {
        let campaign = state.campaign();
        export_dataset(campaign.items(), &campaign.resolve(), task)
    };
    let examples = match (q.kind.as_deref().unwrap_or("binary"), datasets.multilabel) {
        ("binary", _) => datasets.binary,
        ("multilabel", Some(m)) => m,
        (kind, _) => {
            return Err(ApiError(
                StatusCode::UNPROCESSABLE_ENTITY,
                format!("no {kind:?} export for task {task}"),
            ))
        }
    };
    let body: String = examples.iter().map(|e| e.to_json() + "\n").collect();
    Ok(([(header::CONTENT_TYPE, "application/x-ndjson")], body).into_response())
}

/// Serve until Ctrl-C.
pub async fn serve(addr: SocketAddr, state: Arc<AppState>) -> Result<(), ServerError> {
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|source| ServerError::Bind { addr, source })?;
    log::info!(
        "annotation service listening on {}",
        listener.local_addr().unwrap_or(addr)
    );
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(ServerError::Serve)
}
