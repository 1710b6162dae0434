//! HTTP API over the runner.
//!
//! Inputs are uploaded first (`/api/datasets`, `/api/codebooks`,
//! `/api/examples`), then a run is started from a config document that
//! references them. `/api/runs/{id}/events` streams newline-delimited JSON
//! events: a late subscriber first gets every past event of the run, then
//! live ones, each exactly once.

use std::collections::HashMap;
use std::convert::Infallible;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};

use axum::body::{Body, Bytes};
use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::sync::mpsc;
use tower_http::cors::{AllowOrigin, Any, CorsLayer};

use crate::agents::{ExamplePair, PromptTemplates};
use crate::config::ConfigDocument;
use crate::runner::{
    export_csv, parse_dataset_csv, parse_examples_csv, new_run_id, read_run_log, run_batch, EventSink,
    RunClients, RunEvent, RunSummary, Sample,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RunState {
    Pending,
    Running,
    Done,
    Failed,
    Cancelled,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunHandle {
    pub run_id: String,
    pub state: RunState,
    pub created_at: DateTime<Utc>,
}

#[derive(Default)]
struct EventLog {
    history: Vec<Arc<str>>,
    subscribers: Vec<mpsc::UnboundedSender<Arc<str>>>,
    closed: bool,
}

struct RunEntry {
    handle: Mutex<RunHandle>,
    events: Mutex<EventLog>,
    summary: Mutex<Option<RunSummary>>,
    error: Mutex<Option<String>>,
    cancel: AtomicBool,
}

impl RunEntry {
    fn state(&self) -> RunState {
        self.handle.lock().expect("run handle").state
    }

    /// Applies a transition if it is legal from the current state.
    fn transition(&self, to: RunState) -> bool {
        let mut h = self.handle.lock().expect("run handle");
        let ok = matches!(
            (h.state, to),
            (RunState::Pending, RunState::Running)
                | (RunState::Running, RunState::Done)
                | (RunState::Running, RunState::Failed)
                | (RunState::Running, RunState::Cancelled)
        );
        if ok {
            h.state = to;
        }
        ok
    }

    fn publish(&self, line: String) {
        let line: Arc<str> = line.into();
        let mut log = self.events.lock().expect("event log");
        log.history.push(line.clone());
        log.subscribers.retain(|tx| tx.send(line.clone()).is_ok());
    }

    fn close_events(&self) {
        let mut log = self.events.lock().expect("event log");
        log.closed = true;
        log.subscribers.clear();
    }

    /// Past events plus, while the run is live, a channel for new ones.
    fn subscribe(&self) -> (Vec<Arc<str>>, Option<mpsc::UnboundedReceiver<Arc<str>>>) {
        let mut log = self.events.lock().expect("event log");
        let history = log.history.clone();
        if log.closed {
            return (history, None);
        }
        let (tx, rx) = mpsc::unbounded_channel();
        log.subscribers.push(tx);
        (history, Some(rx))
    }
}

struct PublishSink(Arc<RunEntry>);

impl EventSink for PublishSink {
    fn emit(&self, event: &RunEvent) {
        self.0.publish(event.to_json_line());
    }
}

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub output_dir: PathBuf,
    /// Allowed CORS origins; empty allows any origin.
    pub ui_origins: Vec<String>,
    pub templates: PromptTemplates,
}

impl ServiceConfig {
    pub fn new(output_dir: impl Into<PathBuf>) -> Self {
        ServiceConfig {
            output_dir: output_dir.into(),
            ui_origins: Vec::new(),
            templates: PromptTemplates::default(),
        }
    }
}

struct Registry {
    config: ServiceConfig,
    datasets: Mutex<HashMap<String, Arc<Vec<Sample>>>>,
    codebooks: Mutex<HashMap<String, Arc<String>>>,
    examples: Mutex<HashMap<String, Arc<Vec<ExamplePair>>>>,
    runs: Mutex<HashMap<String, Arc<RunEntry>>>,
}

#[derive(Clone)]
pub struct AppState(Arc<Registry>);

impl AppState {
    pub fn new(config: ServiceConfig) -> Self {
        AppState(Arc::new(Registry {
            config,
            datasets: Mutex::default(),
            codebooks: Mutex::default(),
            examples: Mutex::default(),
            runs: Mutex::default(),
        }))
    }

    fn run(&self, id: &str) -> Result<Arc<RunEntry>, ApiError> {
        self.0
            .runs
            .lock()
            .expect("runs")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found(format!("unknown run {id:?}")))
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        ApiError {
            status,
            message: message.into(),
        }
    }
    fn bad_request(m: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, m)
    }
    fn not_found(m: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, m)
    }
    fn conflict(m: impl Into<String>) -> Self {
        Self::new(StatusCode::CONFLICT, m)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.message }))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

fn new_id(prefix: &str) -> String {
    format!("{prefix}-{}", &uuid::Uuid::new_v4().simple().to_string()[..12])
}

fn utf8(body: &Bytes) -> ApiResult<String> {
    String::from_utf8(body.to_vec()).map_err(|_| ApiError::bad_request("body is not valid UTF-8"))
}

async fn health() -> Json<serde_json::Value> {
    Json(json!({ "status": "ok", "version": env!("CARGO_PKG_VERSION") }))
}

async fn upload_dataset(State(app): State<AppState>, body: Bytes) -> ApiResult<Json<serde_json::Value>> {
    let samples = parse_dataset_csv(&body).map_err(|e| ApiError::bad_request(e.to_string()))?;
    if samples.is_empty() {
        return Err(ApiError::bad_request("dataset has no rows"));
    }
    let id = new_id("ds");
    let count = samples.len();
    app.0
        .datasets
        .lock()
        .expect("datasets")
        .insert(id.clone(), Arc::new(samples));
    Ok(Json(json!({ "dataset_id": id, "sample_count": count })))
}

async fn upload_codebook(State(app): State<AppState>, body: Bytes) -> ApiResult<Json<serde_json::Value>> {
    let text = utf8(&body)?;
    if text.trim().is_empty() {
        return Err(ApiError::bad_request("codebook is empty"));
    }
    let id = new_id("cb");
    app.0
        .codebooks
        .lock()
        .expect("codebooks")
        .insert(id.clone(), Arc::new(text));
    Ok(Json(json!({ "id": id })))
}

async fn upload_examples(State(app): State<AppState>, body: Bytes) -> ApiResult<Json<serde_json::Value>> {
    let examples = parse_examples_csv(&body).map_err(|e| ApiError::bad_request(e.to_string()))?;
    let id = new_id("ex");
    let count = examples.len();
    app.0
        .examples
        .lock()
        .expect("examples")
        .insert(id.clone(), Arc::new(examples));
    Ok(Json(json!({ "id": id, "count": count })))
}

#[derive(Debug, Deserialize)]
pub struct StartRun {
    pub dataset_id: String,
    #[serde(default)]
    pub codebook_id: Option<String>,
    #[serde(default)]
    pub examples_id: Option<String>,
    #[serde(flatten)]
    pub config: ConfigDocument,
}

async fn start_run(State(app): State<AppState>, body: Bytes) -> ApiResult<Json<serde_json::Value>> {
    let req: StartRun =
        serde_json::from_slice(&body).map_err(|e| ApiError::bad_request(format!("run config: {e}")))?;
    let reg = &app.0;
    let dataset = reg
        .datasets
        .lock()
        .expect("datasets")
        .get(&req.dataset_id)
        .cloned()
        .ok_or_else(|| ApiError::bad_request(format!("unknown dataset_id {:?}", req.dataset_id)))?;
    let codebook = match &req.codebook_id {
        Some(id) => Some(
            reg.codebooks
                .lock()
                .expect("codebooks")
                .get(id)
                .map(|c| c.as_str().to_string())
                .ok_or_else(|| ApiError::bad_request(format!("unknown codebook_id {id:?}")))?,
        ),
        None => None,
    };
    let examples = match &req.examples_id {
        Some(id) => Some(
            reg.examples
                .lock()
                .expect("examples")
                .get(id)
                .map(|e| e.as_ref().clone())
                .ok_or_else(|| ApiError::bad_request(format!("unknown examples_id {id:?}")))?,
        ),
        None => None,
    };
    let config = req
        .config
        .resolve(codebook, examples, reg.config.output_dir.clone(), new_run_id)
        .map_err(|e| ApiError::bad_request(e.to_string()))?;
    let clients =
        RunClients::from_config(&config.experiment).map_err(|e| ApiError::bad_request(e.to_string()))?;

    let run_id = config.run_id.clone();
    let entry = Arc::new(RunEntry {
        handle: Mutex::new(RunHandle {
            run_id: run_id.clone(),
            state: RunState::Pending,
            created_at: Utc::now(),
        }),
        events: Mutex::default(),
        summary: Mutex::new(None),
        error: Mutex::new(None),
        cancel: AtomicBool::new(false),
    });
    {
        let mut runs = reg.runs.lock().expect("runs");
        if runs.contains_key(&run_id) || config.run_dir().exists() {
            return Err(ApiError::conflict(format!("run {run_id:?} already exists")));
        }
        runs.insert(run_id.clone(), entry.clone());
    }

    let templates = reg.config.templates.clone();
    tokio::spawn(async move {
        if !entry.transition(RunState::Running) {
            entry.close_events();
            return;
        }
        let sink = PublishSink(entry.clone());
        let result = run_batch(&config, &dataset, &clients, &templates, &sink, Some(&entry.cancel)).await;
        match result {
            Ok(summary) => {
                let cancelled = !summary.complete;
                *entry.summary.lock().expect("summary") = Some(summary);
                entry.transition(if cancelled { RunState::Cancelled } else { RunState::Done });
            }
            Err(e) => {
                tracing::warn!(run_id = %config.run_id, error = %e, "run failed");
                *entry.error.lock().expect("error") = Some(e.to_string());
                entry.transition(RunState::Failed);
            }
        }
        entry.close_events();
    });

    Ok(Json(json!({ "run_id": run_id })))
}

async fn run_status(State(app): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<serde_json::Value>> {
    let run = app.run(&id)?;
    let handle = run.handle.lock().expect("run handle").clone();
    let error = run.error.lock().expect("error").clone();
    Ok(Json(json!({ "handle": handle, "error": error })))
}

async fn run_events(State(app): State<AppState>, Path(id): Path<String>) -> ApiResult<Response> {
    let run = app.run(&id)?;
    let (history, live) = run.subscribe();
    let replay = futures::stream::iter(history);
    let live = futures::stream::unfold(live, |rx| async move {
        let mut rx = rx?;
        let line = rx.recv().await?;
        Some((line, Some(rx)))
    });
    let body = futures::StreamExt::map(futures::StreamExt::chain(replay, live), |line| {
        Ok::<_, Infallible>(Bytes::from(format!("{line}\n")))
    });
    Ok((
        [(header::CONTENT_TYPE, "application/x-ndjson")],
        Body::from_stream(body),
    )
        .into_response())
}

fn finished_summary(run: &RunEntry) -> ApiResult<RunSummary> {
    if let Some(s) = run.summary.lock().expect("summary").clone() {
        return Ok(s);
    }
    Err(ApiError::conflict(format!(
        "run is {:?}; no summary available",
        run.state()
    )))
}

async fn run_summary(State(app): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<RunSummary>> {
    let run = app.run(&id)?;
    Ok(Json(finished_summary(&run)?))
}

async fn run_export(State(app): State<AppState>, Path(id): Path<String>) -> ApiResult<Response> {
    let run = app.run(&id)?;
    let summary = finished_summary(&run)?;
    Ok((
        [
            (header::CONTENT_TYPE, HeaderValue::from_static("text/csv; charset=utf-8")),
            (
                header::CONTENT_DISPOSITION,
                HeaderValue::from_static("attachment; filename=\"export.csv\""),
            ),
        ],
        export_csv(&summary),
    )
        .into_response())
}

#[derive(Debug, Deserialize)]
pub struct LogPage {
    #[serde(default)]
    pub offset: usize,
    #[serde(default)]
    pub limit: Option<usize>,
}

async fn run_log(
    State(app): State<AppState>,
    Path(id): Path<String>,
    Query(page): Query<LogPage>,
) -> ApiResult<Json<serde_json::Value>> {
    app.run(&id)?;
    let limit = page.limit.unwrap_or(100).clamp(1, 1000);
    let (entries, warnings) = match read_run_log(&app.0.config.output_dir, &id) {
        Ok(r) => r,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => (Vec::new(), Vec::new()),
        Err(e) => {
            return Err(ApiError::new(
                StatusCode::INTERNAL_SERVER_ERROR,
                format!("session log unreadable: {}", e.kind()),
            ))
        }
    };
    let total = entries.len();
    let offset = page.offset.min(total);
    let page: Vec<_> = entries.into_iter().skip(offset).take(limit).collect();
    let next_offset = offset + page.len();
    Ok(Json(json!({
        "entries": page,
        "total": total,
        "next_offset": next_offset,
        "warnings": warnings,
    })))
}

async fn cancel_run(State(app): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<serde_json::Value>> {
    let run = app.run(&id)?;
    match run.state() {
        RunState::Pending | RunState::Running => {
            run.cancel.store(true, Ordering::SeqCst);
            Ok(Json(json!({ "run_id": id, "cancel_requested": true })))
        }
        state => Err(ApiError::conflict(format!("run already {state:?}"))),
    }
}

pub fn router(state: AppState) -> Router {
    let origins = &state.0.config.ui_origins;
    let cors = if origins.is_empty() {
        CorsLayer::new().allow_origin(Any)
    } else {
        let list: Vec<HeaderValue> = origins.iter().filter_map(|o| o.parse().ok()).collect();
        CorsLayer::new().allow_origin(AllowOrigin::list(list))
    }
    .allow_methods(Any)
    .allow_headers(Any);

    Router::new()
        .route("/api/health", get(health))
        .route("/api/datasets", post(upload_dataset))
        .route("/api/codebooks", post(upload_codebook))
        .route("/api/examples", post(upload_examples))
        .route("/api/runs", post(start_run))
        .route("/api/runs/{id}", get(run_status))
        .route("/api/runs/{id}/events", get(run_events))
        .route("/api/runs/{id}/summary", get(run_summary))
        .route("/api/runs/{id}/log", get(run_log))
        .route("/api/runs/{id}/export.csv", get(run_export))
        .route("/api/runs/{id}/cancel", post(cancel_run))
        .layer(cors)
        .with_state(state)
}

/// Binds and serves until the process exits.
pub async fn serve(addr: &str, config: ServiceConfig) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(addr = %listener.local_addr()?, "serving");
    axum::serve(listener, router(AppState::new(config))).await
}
