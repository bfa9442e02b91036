//! The `/v1` HTTP API.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Arc;

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine as _;
use serde::{Deserialize, Serialize};

use lgir_core::adapters::run_session_round;
use lgir_core::gateway::BackendRole;
use lgir_core::images::{data_uri, data_uri_mime, guess_mime};
use lgir_core::index::{ingest, read_manifest, ManifestEntry};
use lgir_core::model::{ImageRecord, QueryKind, RankedEntry, Stage, StageTrace};
use lgir_core::{EmbeddingIndex, Error};

use crate::state::AppState;

pub type Shared = Arc<AppState>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage: Option<String>,
}

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub body: ErrorBody,
}

impl ApiError {
    fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        Self {
            status,
            body: ErrorBody {
                code: code.into(),
                message: message.into(),
                stage: None,
            },
        }
    }
}

fn stage_of(err: &Error) -> Option<String> {
    match err {
        Error::Parse { stage, .. } => Some(stage.to_string()),
        Error::BackendUnavailable { role, .. } | Error::Timeout { role, .. } | Error::NotConfigured(role) => {
            match role {
                BackendRole::Verifier => Some("stage2".into()),
                BackendRole::Evaluator => Some("stage3".into()),
                _ => None,
            }
        }
        _ => None,
    }
}

impl From<Error> for ApiError {
    fn from(err: Error) -> Self {
        let status = if err.is_validation() || matches!(err, Error::ImageLoad { .. } | Error::MissingSubset) {
            StatusCode::UNPROCESSABLE_ENTITY
        } else if err.is_backend() {
            StatusCode::SERVICE_UNAVAILABLE
        } else {
            match err {
                Error::SessionNotFound(_) | Error::UnknownImage(_) => StatusCode::NOT_FOUND,
                Error::Parse { .. } | Error::MalformedResponse(_) | Error::DimensionMismatch { .. } => {
                    StatusCode::BAD_GATEWAY
                }
                _ => StatusCode::INTERNAL_SERVER_ERROR,
            }
        };
        Self {
            status,
            body: ErrorBody {
                code: err.code().into(),
                stage: stage_of(&err),
                message: err.to_string(),
            },
        }
    }
}

impl From<JsonRejection> for ApiError {
    fn from(r: JsonRejection) -> Self {
        ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "InvalidRequest", r.body_text())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

fn current_index(state: &AppState) -> Result<Arc<EmbeddingIndex>, ApiError> {
    state
        .index()
        .ok_or_else(|| ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "IndexNotLoaded", "no index is loaded; POST /v1/index first"))
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct IndexRequest {
    #[serde(default)]
    pub manifest_path: Option<PathBuf>,
    #[serde(default)]
    pub records: Option<Vec<ManifestEntry>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexResponse {
    pub index_id: String,
    pub n_images: usize,
}

async fn post_index(State(state): State<Shared>, body: Result<Json<IndexRequest>, JsonRejection>) -> ApiResult<IndexResponse> {
    let Json(req) = body?;
    let records = match (req.manifest_path, req.records) {
        (Some(path), None) => {
            let text = std::fs::read_to_string(&path)
                .map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "InvalidRequest", format!("{}: {e}", path.display())))?;
            read_manifest(&text, path.parent())?
        }
        (None, Some(entries)) => entries
            .into_iter()
            .map(|e| {
                let mut r = ImageRecord::new(e.id, e.uri);
                r.caption = e.caption;
                r
            })
            .collect(),
        _ => {
            return Err(ApiError::new(
                StatusCode::UNPROCESSABLE_ENTITY,
                "InvalidRequest",
                "give exactly one of manifest_path or records",
            ))
        }
    };
    let Some(_guard) = state.begin_ingest() else {
        return Err(ApiError::new(StatusCode::CONFLICT, "IngestInProgress", "an ingest is already running"));
    };
    let index = ingest(&state.engine, records).await.map_err(|e| match e {
        Error::CorruptIndex(m) => ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "InvalidRequest", m),
        other => other.into(),
    })?;
    if let Some(path) = &state.index_path {
        index.save(path)?;
    }
    let resp = IndexResponse {
        index_id: index.fingerprint()?,
        n_images: index.len(),
    };
    state.swap_index(index);
    Ok(Json(resp))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CreateSession {
    pub kind: QueryKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionCreated {
    pub session_id: String,
}

async fn post_session(State(state): State<Shared>, body: Result<Json<CreateSession>, JsonRejection>) -> ApiResult<SessionCreated> {
    let Json(req) = body?;
    let handle = state.sessions.create(req.kind)?;
    let session = handle.lock().await;
    state.sessions.persist(&session)?;
    Ok(Json(SessionCreated {
        session_id: session.session_id.clone(),
    }))
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct QueryRequest {
    pub text: String,
    /// An indexed image id, a URI (`data:`, `http(s)://`, `file://`), or
    /// raw base64 bytes.
    #[serde(default)]
    pub reference_image: Option<String>,
    /// Last stage to run, 1 to 3.
    #[serde(default)]
    pub stages: Option<u8>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryResponse {
    pub session_id: String,
    pub round: usize,
    pub stage: u8,
    pub ranking: Vec<RankedEntry>,
    pub trace: StageTrace,
}

/// Turns the wire form of a reference image into a record.
pub fn reference_record(index: &EmbeddingIndex, reference: &str) -> Result<ImageRecord, Error> {
    let r = reference.trim();
    if index.position(r).is_some() {
        return Ok(ImageRecord::new(r, ""));
    }
    let is_uri = ["data:", "http://", "https://", "file://"].iter().any(|p| r.starts_with(p));
    if is_uri {
        return Ok(ImageRecord::new("reference", r));
    }
    let bytes = base64::engine::general_purpose::STANDARD
        .decode(r)
        .map_err(|_| Error::ImageLoad {
            uri: r.chars().take(40).collect(),
            message: "not an indexed id, a URI, or base64 image data".into(),
        })?;
    Ok(ImageRecord::new("reference", data_uri(guess_mime(&bytes), &bytes)))
}

async fn post_query(
    State(state): State<Shared>,
    Path(id): Path<String>,
    body: Result<Json<QueryRequest>, JsonRejection>,
) -> ApiResult<QueryResponse> {
    let Json(req) = body?;
    let last = match req.stages {
        None => Stage::Stage3,
        Some(n) => Stage::from_number(n)
            .ok_or_else(|| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "InvalidRequest", "stages must be 1, 2 or 3"))?,
    };
    let handle = state.sessions.get(&id)?;
    let index = current_index(&state)?;
    let reference = req
        .reference_image
        .as_deref()
        .filter(|s| !s.trim().is_empty())
        .map(|s| reference_record(&index, s))
        .transpose()?;
    // one round at a time per session
    let mut session = handle.lock().await;
    let out = run_session_round(&state.engine, &index, &mut session, &req.text, reference, last).await?;
    state.sessions.persist(&session)?;
    let top_n = state.engine.config.top_n;
    Ok(Json(QueryResponse {
        session_id: session.session_id.clone(),
        round: session.rounds.len(),
        stage: last.number(),
        ranking: out.ranking.entries.into_iter().take(top_n).collect(),
        trace: out.ranking.trace,
    }))
}

async fn get_session(State(state): State<Shared>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let handle = state.sessions.get(&id)?;
    let session = handle.lock().await;
    Ok(Json(&*session).into_response())
}

async fn get_image(State(state): State<Shared>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let index = current_index(&state)?;
    let record = index.record(&id)?;
    let bytes = state.engine.loader.load(&record.uri).await.map_err(|e| {
        let mut api = ApiError::from(e);
        api.status = StatusCode::INTERNAL_SERVER_ERROR;
        api
    })?;
    let mime = data_uri_mime(&record.uri).unwrap_or_else(|| guess_mime(&bytes)).to_string();
    Ok(([(header::CONTENT_TYPE, mime)], bytes).into_response())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexSummary {
    pub index_id: String,
    pub n_images: usize,
    pub dim: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub index: Option<IndexSummary>,
    pub backends: BTreeMap<BackendRole, bool>,
}

async fn health(State(state): State<Shared>) -> Json<Health> {
    let mut backends = BTreeMap::new();
    for role in BackendRole::ALL {
        if let Some(ok) = state.engine.gateway.probe(role).await {
            backends.insert(role, ok);
        }
    }
    let index = state.index().and_then(|i| {
        Some(IndexSummary {
            index_id: i.fingerprint().ok()?,
            n_images: i.len(),
            dim: i.dim(),
        })
    });
    let all_up = backends.len() == BackendRole::ALL.len() && backends.values().all(|&b| b);
    Json(Health {
        status: if all_up { "ok" } else { "degraded" }.into(),
        index,
        backends,
    })
}

pub fn router(state: Shared) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/v1/index", post(post_index))
        .route("/v1/sessions", post(post_session))
        .route("/v1/sessions/{id}", get(get_session))
        .route("/v1/sessions/{id}/query", post(post_query))
        .route("/v1/images/{id}", get(get_image))
        .with_state(state)
}
