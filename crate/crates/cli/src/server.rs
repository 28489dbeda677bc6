//! HTTP API over live sessions.
//!
//! Handlers read an immutable snapshot per session and never wait on a
//! running step; only stepping and feedback take the session lock.

use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use crewforge::backend::ScriptFile;
use crewforge::orchestrator::{
    start_session, step, submit_user_feedback, Deps, Phase, SessionConfig, SessionRecord, SessionState, SessionStore,
    SessionWriter, StepError,
};
use crewforge::roles::{Message, TaskSpec};
use crewforge::simulator::{find_scenario, run_scenario, Scenario, TrajectoryPoint};
use crewforge::tester::UserFeedback;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use tokio::sync::watch;
use tower_http::services::ServeDir;

use crate::view::ApiSessionView;

/// Longest a transcript request may wait for new messages.
pub const MAX_POLL: Duration = Duration::from_millis(25_000);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Steps run continuously until review or a terminal phase.
    Auto,
    /// Each step waits for `POST /sessions/{id}/advance`.
    Manual,
}

#[derive(Debug, Clone)]
pub struct ServerOptions {
    /// Base config; request overrides are merged on top.
    pub config: SessionConfig,
    /// Replies for scripted roles when a request brings none.
    pub script: Option<ScriptFile>,
    pub mode: Mode,
    pub sessions_dir: PathBuf,
    pub console_dir: Option<PathBuf>,
}

#[derive(Clone)]
pub struct AppState(Arc<Inner>);

struct Inner {
    options: ServerOptions,
    store: SessionStore,
    /// In creation order.
    sessions: RwLock<Vec<Arc<SessionHandle>>>,
}

struct Runtime {
    state: SessionState,
    deps: Deps,
    writer: Option<SessionWriter>,
}

struct SessionHandle {
    id: String,
    mode: Mode,
    runtime: Mutex<Runtime>,
    snapshot: RwLock<Arc<SessionState>>,
    suite: Vec<Scenario>,
    seq_tx: watch::Sender<usize>,
    driving: AtomicBool,
}

/// State clone without simulated trajectories.
fn light_clone(state: &SessionState) -> SessionState {
    let mut s = state.clone();
    for r in &mut s.reports {
        std::mem::take(&mut r.results);
    }
    s
}

fn ready_to_step(state: &SessionState) -> bool {
    !state.phase.is_terminal() && !(state.phase == Phase::UserReview && state.pending_feedback.is_none())
}

impl SessionHandle {
    fn snapshot(&self) -> Arc<SessionState> {
        Arc::clone(&self.snapshot.read().unwrap())
    }

    fn runtime(&self) -> std::sync::MutexGuard<'_, Runtime> {
        self.runtime.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// Persists and republishes after the transcript changed.
    fn publish(&self, rt: &mut Runtime) {
        if let Some(w) = rt.writer.as_mut() {
            if let Err(e) = w.sync(&rt.state.transcript, rt.deps.backends.calls()) {
                tracing::error!(session = %self.id, "persisting session failed: {e}");
            }
        }
        *self.snapshot.write().unwrap() = Arc::new(light_clone(&rt.state));
        self.seq_tx.send_replace(rt.state.transcript.len());
    }

    fn step_once(&self) -> Result<Phase, StepError> {
        let mut rt = self.runtime();
        let rt = &mut *rt;
        let result = step(&mut rt.state, &mut rt.deps);
        if let Ok(phase) = &result {
            tracing::info!(session = %self.id, %phase, "stepped");
        }
        self.publish(rt);
        result
    }

    /// Steps until review or a terminal phase; the caller holds `driving`.
    fn drive(&self) {
        loop {
            let mut rt = self.runtime();
            if !ready_to_step(&rt.state) {
                return;
            }
            let rt = &mut *rt;
            let result = step(&mut rt.state, &mut rt.deps);
            self.publish(rt);
            match result {
                Ok(phase) => tracing::info!(session = %self.id, %phase, "stepped"),
                Err(e) => {
                    tracing::warn!(session = %self.id, "auto step stopped: {e}");
                    return;
                }
            }
        }
    }

    fn can_step(&self) -> bool {
        ready_to_step(&self.runtime().state)
    }
}

/// Starts the background driver unless one is already running.
fn spawn_driver(handle: Arc<SessionHandle>) {
    if handle.mode != Mode::Auto
        || handle.driving.compare_exchange(false, true, Ordering::AcqRel, Ordering::Acquire).is_err()
    {
        return;
    }
    tokio::task::spawn_blocking(move || loop {
        handle.drive();
        handle.driving.store(false, Ordering::Release);
        // feedback may have arrived after the last check but before the flag cleared
        if !handle.can_step()
            || handle.driving.compare_exchange(false, true, Ordering::AcqRel, Ordering::Acquire).is_err()
        {
            break;
        }
    });
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub field: Option<String>,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    body: ErrorBody,
}

impl ApiError {
    fn new(status: StatusCode, error: impl Into<String>) -> Self {
        ApiError { status, body: ErrorBody { error: error.into(), field: None } }
    }

    fn field(mut self, field: impl Into<String>) -> Self {
        let field = field.into();
        self.body.field = (!field.is_empty() && field != ".").then_some(field);
        self
    }

    fn bad_request(error: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, error)
    }
}

impl From<StepError> for ApiError {
    fn from(e: StepError) -> Self {
        match e {
            StepError::InvalidFeedback(_) => ApiError::bad_request(e.to_string()),
            _ => ApiError::new(StatusCode::CONFLICT, e.to_string()),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

/// Decodes JSON, reporting the path of the offending field.
fn decode<T: DeserializeOwned>(bytes: &[u8], prefix: &str) -> ApiResult<T> {
    let de = &mut serde_json::Deserializer::from_slice(bytes);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let field = match (prefix, path.as_str()) {
            (p, ".") => p.trim_end_matches('.').to_string(),
            (p, rest) => format!("{p}{rest}"),
        };
        ApiError::bad_request(e.into_inner().to_string()).field(field)
    })
}

fn decode_value<T: DeserializeOwned>(value: serde_json::Value, prefix: &str) -> ApiResult<T> {
    let bytes = serde_json::to_vec(&value).map_err(|e| ApiError::bad_request(e.to_string()))?;
    decode(&bytes, prefix)
}

/// Overlays `patch` onto `base`, recursing into objects.
fn merge(base: &mut serde_json::Value, patch: serde_json::Value) {
    match (base, patch) {
        (serde_json::Value::Object(b), serde_json::Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct CreateSession {
    spec: serde_json::Value,
    #[serde(default)]
    config: serde_json::Value,
    #[serde(default)]
    seed: u64,
    #[serde(default)]
    mode: Option<Mode>,
    #[serde(default)]
    script: Option<serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Created {
    pub session_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryView {
    pub scenario: String,
    pub policy: String,
    pub metrics: crewforge::tester::ScenarioMetrics,
    pub trajectory: Vec<TrajectoryPoint>,
}

#[derive(Debug, Deserialize)]
struct TranscriptQuery {
    since_seq: Option<u64>,
    timeout_ms: Option<u64>,
}

impl AppState {
    pub fn new(options: ServerOptions) -> Self {
        let store = SessionStore::new(&options.sessions_dir);
        AppState(Arc::new(Inner { options, store, sessions: RwLock::new(Vec::new()) }))
    }

    fn get(&self, id: &str) -> ApiResult<Arc<SessionHandle>> {
        self.0
            .sessions
            .read()
            .unwrap()
            .iter()
            .find(|h| h.id == id)
            .cloned()
            .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("no session {id}")))
    }

    fn create(&self, req: CreateSession) -> ApiResult<Arc<SessionHandle>> {
        let opts = &self.0.options;
        let spec: TaskSpec = decode_value(req.spec, "spec.")?;
        spec.validate().map_err(|e| ApiError::bad_request(e.to_string()).field(format!("spec.{}", e.field)))?;

        let mut config_json = serde_json::to_value(&opts.config).expect("config serializes");
        if !req.config.is_null() {
            merge(&mut config_json, req.config);
        }
        let config: SessionConfig = decode_value(config_json, "config.")?;
        config.validate().map_err(|e| match &e {
            crewforge::orchestrator::ConfigError::Invalid { field, .. } => {
                ApiError::bad_request(e.to_string()).field(format!("config.{field}"))
            }
            _ => ApiError::bad_request(e.to_string()).field("config"),
        })?;
        let script: Option<ScriptFile> = match req.script {
            Some(v) => Some(decode_value(v, "script.")?),
            None => opts.script.clone(),
        };

        let deps = Deps::from_config(&config, &spec, script.as_ref())
            .map_err(|e| ApiError::bad_request(e.to_string()).field("config"))?;
        let state = start_session(spec, config, req.seed).map_err(|e| ApiError::bad_request(e.to_string()))?;
        let writer = match self.0.store.create(&SessionRecord::of(&state, script)) {
            Ok(w) => Some(w),
            Err(e) => {
                tracing::error!(session = %state.session_id, "session will not be persisted: {e}");
                None
            }
        };
        let (seq_tx, _) = watch::channel(state.transcript.len());
        let handle = Arc::new(SessionHandle {
            id: state.session_id.clone(),
            mode: req.mode.unwrap_or(opts.mode),
            snapshot: RwLock::new(Arc::new(light_clone(&state))),
            suite: deps.suite.clone(),
            runtime: Mutex::new(Runtime { state, deps, writer }),
            seq_tx,
            driving: AtomicBool::new(false),
        });
        handle.publish(&mut handle.runtime());
        self.0.sessions.write().unwrap().push(Arc::clone(&handle));
        tracing::info!(session = %handle.id, mode = ?handle.mode, "session created");
        Ok(handle)
    }
}

pub fn router(state: AppState) -> Router {
    let console = state.0.options.console_dir.clone();
    let api = Router::new()
        .route("/healthz", get(healthz))
        .route("/sessions", get(list_sessions).post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/transcript", get(transcript))
        .route("/sessions/{id}/feedback", post(feedback))
        .route("/sessions/{id}/advance", post(advance))
        .route("/sessions/{id}/trajectory/{scenario}", get(trajectory))
        .with_state(state);
    match console {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}

async fn healthz() -> StatusCode {
    StatusCode::OK
}

async fn list_sessions(State(app): State<AppState>) -> Json<Vec<ApiSessionView>> {
    let handles = app.0.sessions.read().unwrap().clone();
    Json(handles.iter().map(|h| ApiSessionView::of(&h.snapshot())).collect())
}

async fn create_session(State(app): State<AppState>, body: Bytes) -> ApiResult<(StatusCode, Json<Created>)> {
    let req: CreateSession = decode(&body, "")?;
    let handle = app.create(req)?;
    let id = handle.id.clone();
    spawn_driver(handle);
    Ok((StatusCode::CREATED, Json(Created { session_id: id })))
}

async fn get_session(State(app): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<ApiSessionView>> {
    Ok(Json(ApiSessionView::of(&app.get(&id)?.snapshot())))
}

async fn transcript(
    State(app): State<AppState>,
    Path(id): Path<String>,
    Query(q): Query<TranscriptQuery>,
) -> ApiResult<Json<Vec<Message>>> {
    let handle = app.get(&id)?;
    let newer = |s: &SessionState| -> Vec<Message> {
        s.transcript.iter().filter(|m| q.since_seq.is_none_or(|n| m.seq > n)).cloned().collect()
    };
    // subscribe before reading so no publish is missed
    let mut rx = handle.seq_tx.subscribe();
    let found = newer(&handle.snapshot());
    if !found.is_empty() || q.since_seq.is_none() {
        return Ok(Json(found));
    }
    let wait = q.timeout_ms.map_or(MAX_POLL, |ms| Duration::from_millis(ms).min(MAX_POLL));
    let deadline = tokio::time::Instant::now() + wait;
    loop {
        match tokio::time::timeout_at(deadline, rx.changed()).await {
            Ok(Ok(())) => {
                let found = newer(&handle.snapshot());
                if !found.is_empty() {
                    return Ok(Json(found));
                }
            }
            Ok(Err(_)) | Err(_) => return Ok(Json(Vec::new())),
        }
    }
}

async fn feedback(State(app): State<AppState>, Path(id): Path<String>, body: Bytes) -> ApiResult<StatusCode> {
    let handle = app.get(&id)?;
    let fb: UserFeedback = decode(&body, "")?;
    {
        let mut rt = handle.runtime();
        submit_user_feedback(&mut rt.state, fb)?;
        handle.publish(&mut rt);
    }
    tracing::info!(session = %id, "feedback accepted");
    spawn_driver(handle);
    Ok(StatusCode::NO_CONTENT)
}

async fn advance(State(app): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<ApiSessionView>> {
    let handle = app.get(&id)?;
    if handle.mode == Mode::Manual {
        let h = Arc::clone(&handle);
        tokio::task::spawn_blocking(move || h.step_once())
            .await
            .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
    }
    Ok(Json(ApiSessionView::of(&handle.snapshot())))
}

async fn trajectory(
    State(app): State<AppState>,
    Path((id, scenario)): Path<(String, String)>,
) -> ApiResult<Json<TrajectoryView>> {
    let handle = app.get(&id)?;
    let snapshot = handle.snapshot();
    let policy = snapshot
        .current_policy
        .clone()
        .ok_or_else(|| ApiError::new(StatusCode::CONFLICT, "session has no policy yet"))?;
    let found =
        find_scenario(&handle.suite, &scenario).map_err(|e| ApiError::new(StatusCode::NOT_FOUND, e.to_string()))?;
    let seed = snapshot.rng_seed;
    let view = tokio::task::spawn_blocking(move || {
        let r = run_scenario(&policy, &found, seed);
        TrajectoryView {
            scenario: found.name.clone(),
            policy: policy.to_string(),
            metrics: crewforge::tester::ScenarioMetrics::from(&r),
            trajectory: r.trajectory,
        }
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
    Ok(Json(view))
}
