//! HTTP API behind the expert workbench.
//!
//! The service is a thin shell over the library: the tip store, the failure
//! queue and the run directory are the only state, so anything done through
//! HTTP can be done (and inspected) through the library and vice versa.
//!
//! Every route except `GET /health` requires `Authorization: Bearer <token>`
//! when a token is configured. Errors come back as `{code, message, detail}`.

use std::fs::OpenOptions;
use std::io::Write as _;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use axum::extract::rejection::{JsonRejection, QueryRejection};
use axum::extract::{Path, Query, Request, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post, put};
use axum::{Json, Router};
use kbagent::akb::{AkbError, AkbStore, KnowledgeTip};
use kbagent::model::{AblationMode, RunConfig};
use kbagent::orchestrator::{new_run_id, run_task, Backend, FailureEntry, FailureQueue, FailureStatus, Resolution, Suite};
use kbagent::trace::{RunMeta, RunStore, TraceEvent};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

pub const API_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("cannot bind {addr}: {source}")]
    BindFailure {
        addr: SocketAddr,
        #[source]
        source: std::io::Error,
    },
    #[error("store unavailable: {0}")]
    StoreUnavailable(String),
    #[error("server stopped: {0}")]
    Server(#[source] std::io::Error),
}

/// Everything the handlers share.
pub struct ServiceState {
    pub store: Arc<AkbStore>,
    pub queue: Arc<FailureQueue>,
    /// Parent of `runs/`; new runs are recorded here too.
    pub record_dir: PathBuf,
    pub suite: Option<Arc<Suite>>,
    pub backend: Option<Backend>,
    pub run_config: RunConfig,
    pub token: Option<String>,
    /// Evaluation protocol: the knowledge base is frozen, the queue is
    /// read-only and launched runs execute one at a time.
    pub protocol: bool,
    /// Append-only JSONL record of every mutation attempt.
    pub audit_log: Option<PathBuf>,
    run_lock: Arc<Mutex<()>>,
}

impl ServiceState {
    pub fn new(store: Arc<AkbStore>, queue: Arc<FailureQueue>, record_dir: impl Into<PathBuf>) -> Self {
        ServiceState {
            store,
            queue,
            record_dir: record_dir.into(),
            suite: None,
            backend: None,
            run_config: RunConfig::default(),
            token: None,
            protocol: false,
            audit_log: None,
            run_lock: Arc::new(Mutex::new(())),
        }
    }

    pub fn with_token(mut self, token: impl Into<String>) -> Self {
        self.token = Some(token.into());
        self
    }

    pub fn with_runner(mut self, suite: Arc<Suite>, backend: Backend, run_config: RunConfig) -> Self {
        self.suite = Some(suite);
        self.backend = Some(backend);
        self.run_config = run_config;
        self
    }

    pub fn with_audit_log(mut self, path: impl Into<PathBuf>) -> Self {
        self.audit_log = Some(path.into());
        self
    }

    /// Switches on the evaluation protocol, freezing the store first.
    pub fn with_protocol(mut self) -> Result<Self, ServiceError> {
        self.store.freeze().map_err(|e| ServiceError::StoreUnavailable(e.to_string()))?;
        self.protocol = true;
        Ok(self)
    }

    pub fn runs(&self) -> RunStore {
        RunStore::new(self.record_dir.join("runs"))
    }

    fn audit(&self, op: &str, target: &str, outcome: &Result<(), ApiError>) {
        let Some(path) = &self.audit_log else { return };
        let line = json!({
            "ts": chrono::Utc::now().to_rfc3339(),
            "op": op,
            "target": target,
            "ok": outcome.is_ok(),
            "code": outcome.as_ref().err().map(|e| e.code),
        });
        let written = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .and_then(|mut f| writeln!(f, "{line}"));
        if let Err(e) = written {
            log::warn!("audit log {}: {e}", path.display());
        }
    }
}

/// `{code, message, detail}` with an HTTP status.
#[derive(Debug, Clone)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
    pub detail: Value,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        ApiError { status, code, message: message.into(), detail: Value::Null }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        ApiError::new(StatusCode::BAD_REQUEST, "bad_request", message)
    }
}

impl From<kbagent::Error> for ApiError {
    fn from(e: kbagent::Error) -> Self {
        use kbagent::Error as E;
        let message = e.to_string();
        match &e {
            E::Akb(AkbError::Frozen) => ApiError::new(StatusCode::CONFLICT, "frozen", message),
            E::Akb(AkbError::DuplicateId(id)) => {
                ApiError { detail: json!({ "id": id }), ..ApiError::new(StatusCode::CONFLICT, "duplicate_id", message) }
            }
            E::Akb(AkbError::InvalidTip { id, reason }) => ApiError {
                detail: json!({ "id": id, "reason": reason }),
                ..ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_tip", message)
            },
            E::Akb(AkbError::NotFound(_)) | E::NotFound(_) => ApiError::new(StatusCode::NOT_FOUND, "not_found", message),
            E::Protocol(_) => ApiError::new(StatusCode::CONFLICT, "protocol", message),
            E::QueueUnavailable(_) => ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "queue_unavailable", message),
            E::InvalidInput(_) => ApiError::bad_request(message),
            _ => ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message),
        }
    }
}

impl From<JsonRejection> for ApiError {
    fn from(r: JsonRejection) -> Self {
        ApiError::bad_request(r.body_text())
    }
}

impl From<QueryRejection> for ApiError {
    fn from(r: QueryRejection) -> Self {
        ApiError::bad_request(r.body_text())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = json!({ "code": self.code, "message": self.message, "detail": self.detail });
        (self.status, Json(body)).into_response()
    }
}

type Shared = Arc<ServiceState>;
type ApiResult<T> = Result<T, ApiError>;

pub fn router(state: Shared) -> Router {
    let guarded = Router::new()
        .route("/runs", get(list_runs).post(launch_run))
        .route("/runs/{id}", get(get_run))
        .route("/runs/{id}/events", get(run_events))
        .route("/runs/{id}/screenshots/{hash}", get(run_screenshot))
        .route("/failures", get(list_failures))
        .route("/failures/{id}", get(get_failure))
        .route("/failures/{id}/resolve", post(resolve_failure))
        .route("/tips", get(list_tips).post(create_tip))
        .route("/tips/{id}", put(update_tip).get(get_tip).delete(delete_tip))
        .route("/akb/freeze", post(freeze))
        .route_layer(middleware::from_fn_with_state(state.clone(), require_token));
    Router::new().route("/health", get(health)).merge(guarded).with_state(state)
}

/// Binds `addr` and serves until the process stops.
pub async fn serve(state: ServiceState, addr: SocketAddr) -> Result<(), ServiceError> {
    let listener = tokio::net::TcpListener::bind(addr).await.map_err(|source| ServiceError::BindFailure { addr, source })?;
    log::info!("listening on {}", listener.local_addr().map_err(ServiceError::Server)?);
    axum::serve(listener, router(Arc::new(state))).await.map_err(ServiceError::Server)
}

async fn require_token(State(state): State<Shared>, headers: HeaderMap, req: Request, next: Next) -> Response {
    if let Some(expected) = &state.token {
        let presented = headers
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "));
        if presented != Some(expected.as_str()) {
            return ApiError::new(StatusCode::UNAUTHORIZED, "unauthorized", "missing or wrong bearer token").into_response();
        }
    }
    next.run(req).await
}

async fn health(State(state): State<Shared>) -> Json<Value> {
    let kb = state.store.snapshot();
    Json(json!({
        "v": API_VERSION,
        "status": "ok",
        "frozen": kb.is_frozen(),
        "protocol": state.protocol,
        "tips": kb.len(),
        "runner": state.suite.is_some(),
    }))
}

// ---- runs ----

async fn list_runs(State(state): State<Shared>) -> ApiResult<Json<Value>> {
    let runs = state.runs().list()?;
    Ok(Json(json!({ "v": API_VERSION, "runs": runs })))
}

async fn get_run(State(state): State<Shared>, Path(id): Path<String>) -> ApiResult<Json<RunMeta>> {
    Ok(Json(state.runs().meta(&id)?))
}

#[derive(Debug, Deserialize)]
struct EventsQuery {
    #[serde(default)]
    from: usize,
    limit: Option<usize>,
}

#[derive(Debug, Serialize)]
struct EventPage {
    v: u32,
    run_id: String,
    from: usize,
    /// Cursor for the next poll.
    next: usize,
    /// True once the run has a final status and every event was returned.
    done: bool,
    events: Vec<TraceEvent>,
}

async fn run_events(
    State(state): State<Shared>,
    Path(id): Path<String>,
    query: Result<Query<EventsQuery>, QueryRejection>,
) -> ApiResult<Json<EventPage>> {
    let Query(q) = query?;
    let runs = state.runs();
    let all = runs.events(&id)?;
    let finished = runs.meta(&id).map(|m| m.status != kbagent::RunStatus::Running).unwrap_or(false);
    let from = q.from.min(all.len());
    let end = q.limit.map_or(all.len(), |l| (from + l).min(all.len()));
    let events = all[from..end].to_vec();
    Ok(Json(EventPage { v: API_VERSION, run_id: id, from, next: end, done: finished && end == all.len(), events }))
}

async fn run_screenshot(State(state): State<Shared>, Path((id, hash)): Path<(String, String)>) -> ApiResult<Response> {
    let hash = hash.strip_suffix(".png").unwrap_or(&hash).to_string();
    let bytes = state.runs().screenshots(&id)?.get(&hash)?;
    Ok(([(header::CONTENT_TYPE, "image/png")], bytes).into_response())
}

#[derive(Debug, Deserialize)]
struct LaunchRequest {
    task_id: String,
    #[serde(default)]
    mode: AblationMode,
}

async fn launch_run(State(state): State<Shared>, body: Result<Json<LaunchRequest>, JsonRejection>) -> ApiResult<(StatusCode, Json<Value>)> {
    let Json(req) = body?;
    let (Some(suite), Some(backend)) = (state.suite.clone(), state.backend.clone()) else {
        return Err(ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "runner_unavailable", "no suite is configured for launching runs"));
    };
    let task = suite
        .task(&req.task_id)
        .cloned()
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "not_found", format!("no task {:?} in suite {}", req.task_id, suite.name)))?;
    let run_id = new_run_id(&task.id);
    let cfg = RunConfig { ablation_mode: req.mode, record_dir: Some(state.record_dir.clone()), ..state.run_config.clone() };
    let kb = state.store.snapshot();
    let lock = state.run_lock.clone();
    let protocol = state.protocol;
    let id = run_id.clone();
    tokio::task::spawn_blocking(move || {
        // Under the protocol runs never overlap.
        let _guard = protocol.then(|| lock.lock().unwrap_or_else(|p| p.into_inner()));
        let mut env = task.env();
        let deps = backend.deps(&cfg).with_run_id(id.clone());
        match run_task(&task.goal, &mut env, &kb, &cfg, &deps) {
            Ok(out) => log::info!("run {id}: {:?} after {} steps", out.status(), out.steps()),
            Err(e) => log::error!("run {id} failed: {e}"),
        }
    });
    Ok((StatusCode::ACCEPTED, Json(json!({ "v": API_VERSION, "run_id": run_id, "task_id": req.task_id, "mode": req.mode }))))
}

// ---- failures ----

#[derive(Debug, Deserialize)]
struct FailureQuery {
    status: Option<FailureStatus>,
}

async fn list_failures(
    State(state): State<Shared>,
    query: Result<Query<FailureQuery>, QueryRejection>,
) -> ApiResult<Json<Value>> {
    let Query(q) = query?;
    let failures: Vec<FailureEntry> =
        state.queue.list()?.into_iter().filter(|f| q.status.is_none_or(|s| f.status == s)).collect();
    Ok(Json(json!({ "v": API_VERSION, "failures": failures })))
}

async fn get_failure(State(state): State<Shared>, Path(id): Path<String>) -> ApiResult<Json<FailureEntry>> {
    Ok(Json(state.queue.get(&id)?))
}

#[derive(Debug, Deserialize)]
struct ResolveRequest {
    #[serde(default)]
    tip_ids: Vec<String>,
    #[serde(default)]
    rerun_id: Option<String>,
    #[serde(default)]
    rerun_success: Option<bool>,
    #[serde(default)]
    note: String,
}

async fn resolve_failure(
    State(state): State<Shared>,
    Path(id): Path<String>,
    body: Result<Json<ResolveRequest>, JsonRejection>,
) -> ApiResult<Json<FailureEntry>> {
    let result = (|| {
        let Json(req) = body?;
        if state.protocol {
            return Err(ApiError::from(kbagent::Error::Protocol("the failure queue is read-only during evaluation".into())));
        }
        let resolution = Resolution {
            tip_ids: req.tip_ids,
            rerun_id: req.rerun_id,
            rerun_success: req.rerun_success,
            note: req.note,
            resolved_at: String::new(),
        };
        Ok(state.queue.resolve(&id, resolution)?)
    })();
    state.audit("resolve_failure", &id, &result.as_ref().map(|_| ()).map_err(Clone::clone));
    result.map(Json)
}

// ---- tips ----

async fn list_tips(State(state): State<Shared>) -> Json<Value> {
    let doc = state.store.export();
    Json(json!({ "v": doc.v, "frozen": doc.frozen, "tips": doc.tips }))
}

async fn get_tip(State(state): State<Shared>, Path(id): Path<String>) -> ApiResult<Json<KnowledgeTip>> {
    let kb = state.store.snapshot();
    kb.get(&id).cloned().map(Json).ok_or_else(|| kbagent::Error::from(AkbError::NotFound(id)).into())
}

fn stamp(mut tip: KnowledgeTip) -> KnowledgeTip {
    if tip.created_at.is_empty() {
        tip.created_at = chrono::Utc::now().to_rfc3339();
    }
    tip
}

async fn create_tip(
    State(state): State<Shared>,
    body: Result<Json<KnowledgeTip>, JsonRejection>,
) -> ApiResult<(StatusCode, Json<KnowledgeTip>)> {
    let mut target = String::new();
    let result = (|| {
        let Json(tip) = body?;
        let tip = stamp(tip);
        target = tip.id.clone();
        state.store.add_tip(tip.clone())?;
        Ok(tip)
    })();
    state.audit("create_tip", &target, &result.as_ref().map(|_| ()).map_err(Clone::clone));
    result.map(|t| (StatusCode::CREATED, Json(t)))
}

async fn update_tip(
    State(state): State<Shared>,
    Path(id): Path<String>,
    body: Result<Json<KnowledgeTip>, JsonRejection>,
) -> ApiResult<Json<KnowledgeTip>> {
    let result = (|| {
        let Json(tip) = body?;
        if tip.id != id {
            return Err(ApiError::bad_request(format!("body id {:?} does not match path id {id:?}", tip.id)));
        }
        let tip = stamp(tip);
        state.store.update_tip(tip.clone())?;
        Ok(tip)
    })();
    state.audit("update_tip", &id, &result.as_ref().map(|_| ()).map_err(Clone::clone));
    result.map(Json)
}

async fn delete_tip(State(state): State<Shared>, Path(id): Path<String>) -> ApiResult<Json<KnowledgeTip>> {
    let result = state.store.delete_tip(&id).map_err(ApiError::from);
    state.audit("delete_tip", &id, &result.as_ref().map(|_| ()).map_err(Clone::clone));
    result.map(Json)
}

async fn freeze(State(state): State<Shared>) -> ApiResult<Json<Value>> {
    let result = state.store.freeze().map_err(ApiError::from);
    state.audit("freeze", "akb", &result);
    result?;
    Ok(Json(json!({ "v": API_VERSION, "frozen": true })))
}
