//! HTTP session service.
//!
//! | method | path | success |
//! |---|---|---|
//! | POST | `/sessions` | 201 session summary |
//! | GET | `/sessions/{id}` | 200 session summary |
//! | GET | `/sessions/{id}/scene` | 200 current scene and poses |
//! | POST | `/sessions/{id}/preference` | 202 preference record |
//! | POST | `/sessions/{id}/adjustment` | 202 preference record |
//! | POST | `/sessions/{id}/step` | 200 step report |
//! | GET | `/sessions/{id}/transcript` | 200 session transcript |
//!
//! Errors are `{"error": code, "message": text}` with 400 for malformed
//! bodies and empty adjustments, 404 for unknown sessions, 409 for stepping a
//! finished session and 502 when the planner backend fails.

use std::collections::BTreeMap;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use tidyloop_core::llm_backend::PlannerBackend;
use tidyloop_core::scene_graph::{Pose, SceneGraph};
use tidyloop_core::session::{LoopConfig, LoopError, Session, SessionStatus};

use crate::error::CliError;
use crate::formats::transcript_text;
use crate::sessions::{SessionStore, StoreError};

#[derive(Clone)]
pub struct AppState {
    pub store: Arc<SessionStore>,
    pub backend: Arc<dyn PlannerBackend>,
    pub loop_config: LoopConfig,
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/sessions", post(create))
        .route("/sessions/{id}", get(summary))
        .route("/sessions/{id}/scene", get(scene))
        .route("/sessions/{id}/preference", post(preference))
        .route("/sessions/{id}/adjustment", post(adjustment))
        .route("/sessions/{id}/step", post(step))
        .route("/sessions/{id}/transcript", get(transcript))
        .fallback(no_route)
        .with_state(state)
}

pub struct ApiError {
    status: StatusCode,
    body: CliError,
}

impl ApiError {
    fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        Self { status, body: CliError::new(code, message) }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "MalformedBody", message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::NotFound(_) => Self::new(StatusCode::NOT_FOUND, "UnknownSession", e.to_string()),
            StoreError::Exists(_) => Self::new(StatusCode::CONFLICT, "SessionExists", e.to_string()),
            StoreError::InvalidId(_) => Self::bad_request(e.to_string()),
            StoreError::Io(inner) => Self { status: StatusCode::INTERNAL_SERVER_ERROR, body: inner },
        }
    }
}

impl From<LoopError> for ApiError {
    fn from(e: LoopError) -> Self {
        let (status, code) = match &e {
            LoopError::NotSteppable(_) => (StatusCode::CONFLICT, "NotSteppable"),
            LoopError::EmptyDiff => (StatusCode::BAD_REQUEST, "EmptyDiff"),
            LoopError::Scene(_) => (StatusCode::BAD_REQUEST, "InvalidScene"),
            LoopError::Preference(_) => (StatusCode::BAD_REQUEST, "InvalidPreference"),
            LoopError::Planner(_) => (StatusCode::BAD_GATEWAY, "PlannerFailed"),
            LoopError::Synthesis(_) => (StatusCode::UNPROCESSABLE_ENTITY, "SynthesisFailed"),
            LoopError::LoopBudgetExhausted { .. } => (StatusCode::CONFLICT, "LoopBudgetExhausted"),
            LoopError::NoProgress { .. } => (StatusCode::CONFLICT, "NoProgress"),
        };
        Self::new(status, code, e.to_string())
    }
}

fn parse_body<T: for<'de> Deserialize<'de>>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(e.to_string()))
}

fn validated(scene: SceneGraph) -> Result<SceneGraph, ApiError> {
    let report = scene.validate();
    if report.is_ok() {
        Ok(scene)
    } else {
        Err(ApiError::new(StatusCode::BAD_REQUEST, "InvalidScene", serde_json::to_string(&report).unwrap_or_default()))
    }
}

/// Runs `f` on the locked session off the async runtime and persists the
/// result, whether or not `f` succeeded.
async fn with_session<T, F>(state: &AppState, id: String, f: F) -> Result<T, ApiError>
where
    T: Send + 'static,
    F: FnOnce(&mut Session, &dyn PlannerBackend) -> Result<T, ApiError> + Send + 'static,
{
    let store = state.store.clone();
    let backend = state.backend.clone();
    tokio::task::spawn_blocking(move || {
        let handle = store.get(&id)?;
        let mut session = handle.lock().unwrap_or_else(|p| p.into_inner());
        let before_ops = session.ops.len();
        let before_calls = session.transcript.calls.len();
        let before_records = session.store.records.clone();
        let out = f(&mut session, backend.as_ref());
        if session.ops.len() != before_ops || session.transcript.calls.len() != before_calls {
            store.persist(&before_records, &session)?;
        }
        out
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "Internal", e.to_string()))?
}

async fn read_session<T, F>(state: &AppState, id: String, f: F) -> Result<T, ApiError>
where
    T: Send + 'static,
    F: FnOnce(&Session) -> T + Send + 'static,
{
    let store = state.store.clone();
    tokio::task::spawn_blocking(move || {
        let handle = store.get(&id)?;
        let session = handle.lock().unwrap_or_else(|p| p.into_inner());
        Ok(f(&session))
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "Internal", e.to_string()))?
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateRequest {
    #[serde(default)]
    pub id: Option<String>,
    pub scene: SceneGraph,
    pub instruction: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SessionSummary {
    pub id: String,
    pub instruction: String,
    pub status: SessionStatus,
    pub loop_iteration: usize,
    pub total_iterations: usize,
    pub pending: usize,
    pub preferences: usize,
}

fn summarize(s: &Session) -> SessionSummary {
    SessionSummary {
        id: s.id.clone(),
        instruction: s.instruction.clone(),
        status: s.status,
        loop_iteration: s.loop_iteration,
        total_iterations: s.total_iterations,
        pending: s.pending.len(),
        preferences: s.store.active().len(),
    }
}

async fn create(State(state): State<AppState>, body: Bytes) -> Result<(StatusCode, Json<SessionSummary>), ApiError> {
    let req: CreateRequest = parse_body(&body)?;
    let scene = validated(req.scene)?;
    let store = state.store.clone();
    let cfg = state.loop_config;
    let summary = tokio::task::spawn_blocking(move || {
        let id = match req.id {
            Some(id) => id,
            None => next_id(&store),
        };
        let handle = store.create(Session::new(&id, scene, &req.instruction, cfg))?;
        let s = handle.lock().unwrap_or_else(|p| p.into_inner());
        Ok::<_, ApiError>(summarize(&s))
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "Internal", e.to_string()))??;
    Ok((StatusCode::CREATED, Json(summary)))
}

fn next_id(store: &SessionStore) -> String {
    let taken = store.ids();
    (1..).map(|n| format!("s{n}")).find(|id| !taken.contains(id)).expect("unbounded")
}

async fn summary(State(state): State<AppState>, Path(id): Path<String>) -> Result<Json<SessionSummary>, ApiError> {
    Ok(Json(read_session(&state, id, summarize).await?))
}

/// Current goal scene and synthesized poses. Before the first plan this is
/// the initial scene and `poses` is absent.
#[derive(Debug, Serialize, Deserialize)]
pub struct SceneResponse {
    pub scene: SceneGraph,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub poses: Option<BTreeMap<String, Pose>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feasible: Option<bool>,
}

async fn scene(State(state): State<AppState>, Path(id): Path<String>) -> Result<Json<SceneResponse>, ApiError> {
    let resp = read_session(&state, id, |s| SceneResponse {
        scene: s.current_scene(),
        poses: s.plan.as_ref().and(s.solution.as_ref()).map(|sol| sol.poses.clone()),
        feasible: s.plan.as_ref().and(s.solution.as_ref()).map(|sol| sol.feasible),
    })
    .await?;
    Ok(Json(resp))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct PreferenceRequest {
    text: String,
}

async fn preference(State(state): State<AppState>, Path(id): Path<String>, body: Bytes) -> Result<Response, ApiError> {
    let req: PreferenceRequest = parse_body(&body)?;
    let record = with_session(&state, id, move |s, _| Ok(s.add_preference(&req.text)?)).await?;
    Ok((StatusCode::ACCEPTED, Json(record)).into_response())
}

/// Either a bare scene document or `{"scene": …}`.
#[derive(Deserialize)]
#[serde(untagged)]
enum AdjustmentRequest {
    Wrapped { scene: SceneGraph },
    Bare(SceneGraph),
}

async fn adjustment(State(state): State<AppState>, Path(id): Path<String>, body: Bytes) -> Result<Response, ApiError> {
    let scene = match parse_body::<AdjustmentRequest>(&body)? {
        AdjustmentRequest::Wrapped { scene } | AdjustmentRequest::Bare(scene) => validated(scene)?,
    };
    let record = with_session(&state, id, move |s, backend| Ok(s.add_adjustment(scene, backend)?)).await?;
    Ok((StatusCode::ACCEPTED, Json(record)).into_response())
}

async fn step(State(state): State<AppState>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let report = with_session(&state, id, |s, backend| Ok(s.step(backend)?)).await?;
    Ok(Json(report).into_response())
}

async fn transcript(State(state): State<AppState>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let text = read_session(&state, id, transcript_text).await?;
    Ok(([(header::CONTENT_TYPE, "application/json")], text).into_response())
}

async fn no_route() -> ApiError {
    ApiError::new(StatusCode::NOT_FOUND, "NotFound", "no such route")
}
