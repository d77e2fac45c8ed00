//! HTTP session service.
//!
//! Each session is persisted as an append-only JSONL event log in the data
//! directory and rebuilt from it on startup. Requests for one session are
//! serialized through a per-session lock.

use std::collections::HashMap;
use std::fs::{self, OpenOptions};
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use apc_core::eventlog::{read_log, replay_events, EventBody, SessionEvent};
use apc_core::manifest::StimulusManifest;
use apc_core::session::{RaterAnswer, SessionConfig, SessionState, SessionStatus};
use apc_core::Error;
use axum::extract::{Path as UrlPath, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::{json, Value};
use tokio::sync::{Mutex, RwLock};

#[derive(Debug, Clone, Default)]
pub struct ServiceConfig {
    pub data_dir: PathBuf,
    pub manifest: StimulusManifest,
    /// Identifier the manifest is referenced by in session requests.
    pub manifest_ref: String,
    pub rater_token: Option<String>,
    pub experimenter_token: Option<String>,
}

struct SessionEntry {
    id: String,
    state: SessionState,
    next_seq: u64,
    path: PathBuf,
    idempotency_key: Option<String>,
}

impl SessionEntry {
    /// Appends events to the log, one line each, flushed before returning.
    fn append(&mut self, bodies: Vec<EventBody>) -> std::io::Result<()> {
        let now = now_ms();
        let mut text = String::new();
        for (i, body) in bodies.into_iter().enumerate() {
            let event = SessionEvent::new(&self.id, self.next_seq + i as u64, now, body);
            text.push_str(&event.to_line());
            text.push('\n');
        }
        let n = text.lines().count() as u64;
        let mut f = OpenOptions::new().create(true).append(true).open(&self.path)?;
        f.write_all(text.as_bytes())?;
        f.sync_data()?;
        self.next_seq += n;
        Ok(())
    }
}

pub struct AppState {
    config: ServiceConfig,
    sessions: RwLock<HashMap<String, Arc<Mutex<SessionEntry>>>>,
    idempotency: Mutex<HashMap<String, String>>,
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

impl AppState {
    /// Loads every `*.jsonl` log in the data directory.
    pub fn open(config: ServiceConfig) -> Result<Arc<Self>, Error> {
        fs::create_dir_all(&config.data_dir)
            .map_err(|e| Error::Io(format!("{}: {e}", config.data_dir.display())))?;
        let mut sessions = HashMap::new();
        let mut idempotency = HashMap::new();
        let mut paths: Vec<PathBuf> = fs::read_dir(&config.data_dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
            .collect();
        paths.sort();
        for path in paths {
            let entry = load_session(&path)?;
            if let Some(key) = &entry.idempotency_key {
                idempotency.insert(key.clone(), entry.id.clone());
            }
            sessions.insert(entry.id.clone(), Arc::new(Mutex::new(entry)));
        }
        Ok(Arc::new(Self {
            config,
            sessions: RwLock::new(sessions),
            idempotency: Mutex::new(idempotency),
        }))
    }

    pub fn n_sessions(&self) -> usize {
        self.sessions.try_read().map(|s| s.len()).unwrap_or(0)
    }

    async fn session(&self, id: &str) -> Result<Arc<Mutex<SessionEntry>>, ApiError> {
        self.sessions
            .read()
            .await
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found(id))
    }
}

fn load_session(path: &Path) -> Result<SessionEntry, Error> {
    let file = fs::File::open(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    let events = read_log(BufReader::new(file))
        .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    let replayed = replay_events(&events).map_err(|e| match e {
        Error::EventIntegrity { seq, reason } => Error::EventIntegrity {
            seq,
            reason: format!("{}: {reason}", path.display()),
        },
        other => other,
    })?;
    Ok(SessionEntry {
        id: replayed.session_id,
        state: replayed.state,
        next_seq: replayed.next_seq,
        path: path.to_path_buf(),
        idempotency_key: replayed.idempotency_key,
    })
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/v1/sessions", post(create_session))
        .route("/v1/sessions/{id}", get(get_session))
        .route("/v1/sessions/{id}/trials/next", get(next_trial))
        .route("/v1/sessions/{id}/trials/{index}/response", post(post_response))
        .route("/v1/sessions/{id}/estimates", get(get_estimates))
        .with_state(state)
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    body: Value,
}

impl ApiError {
    fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        Self {
            status,
            body: json!({ "error": code, "message": message.into() }),
        }
    }

    fn not_found(id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, "not_found", format!("no session {id}"))
    }

    fn validation(fields: Vec<(String, String)>) -> Self {
        let fields: Vec<Value> = fields
            .into_iter()
            .map(|(field, message)| json!({ "field": field, "message": message }))
            .collect();
        Self {
            status: StatusCode::UNPROCESSABLE_ENTITY,
            body: json!({ "error": "validation", "fields": fields }),
        }
    }

    fn internal(e: impl std::fmt::Display) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Role {
    Rater,
    Experimenter,
}

/// Role of the bearer token. Without configured tokens every caller is an
/// experimenter.
fn role(state: &AppState, headers: &HeaderMap) -> Result<Role, ApiError> {
    let cfg = &state.config;
    if cfg.rater_token.is_none() && cfg.experimenter_token.is_none() {
        return Ok(Role::Experimenter);
    }
    let token = headers
        .get(header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "))
        .ok_or_else(|| ApiError::new(StatusCode::UNAUTHORIZED, "unauthorized", "bearer token required"))?;
    if cfg.experimenter_token.as_deref() == Some(token) {
        Ok(Role::Experimenter)
    } else if cfg.rater_token.as_deref() == Some(token) {
        Ok(Role::Rater)
    } else {
        Err(ApiError::new(StatusCode::UNAUTHORIZED, "unauthorized", "unknown token"))
    }
}

fn require_experimenter(state: &AppState, headers: &HeaderMap) -> Result<(), ApiError> {
    match role(state, headers)? {
        Role::Experimenter => Ok(()),
        Role::Rater => Err(ApiError::new(
            StatusCode::FORBIDDEN,
            "forbidden",
            "experimenter token required",
        )),
    }
}

fn progress(state: &SessionState) -> Value {
    let total = state.total_trials();
    let done = state.cursor();
    json!({ "completed": done, "total": total, "fraction": done as f64 / total as f64 })
}

fn status_str(state: &SessionState) -> &'static str {
    match state.status() {
        SessionStatus::Active => "active",
        SessionStatus::Complete => "complete",
    }
}

#[derive(Deserialize)]
struct CreateRequest {
    config: Value,
    #[serde(default)]
    manifest_ref: Option<String>,
    #[serde(default)]
    idempotency_key: Option<String>,
}

fn parse_json<T: serde::de::DeserializeOwned>(body: &[u8], field: &str) -> Result<T, ApiError> {
    serde_json::from_slice(body)
        .map_err(|e| ApiError::validation(vec![(field.to_string(), e.to_string())]))
}

async fn create_session(
    State(app): State<Arc<AppState>>,
    headers: HeaderMap,
    body: axum::body::Bytes,
) -> Result<Response, ApiError> {
    require_experimenter(&app, &headers)?;
    let req: CreateRequest = parse_json(&body, "body")?;
    let config: SessionConfig = serde_json::from_value(req.config)
        .map_err(|e| ApiError::validation(vec![("config".into(), e.to_string())]))?;
    let key = headers
        .get("idempotency-key")
        .and_then(|v| v.to_str().ok())
        .map(str::to_string)
        .or(req.idempotency_key);

    let mut fields: Vec<(String, String)> = config
        .problems()
        .into_iter()
        .map(|(f, m)| (format!("config.{f}"), m))
        .collect();
    if let Some(r) = &req.manifest_ref {
        if *r != app.config.manifest_ref {
            fields.push((
                "manifest_ref".into(),
                format!("unknown manifest {r:?}; this service serves {:?}", app.config.manifest_ref),
            ));
        }
    }
    if fields.is_empty() {
        fields.extend(
            app.config
                .manifest
                .problems_for(&config)
                .into_iter()
                .map(|(f, m)| (format!("config.{f}"), m)),
        );
    }
    if !fields.is_empty() {
        return Err(ApiError::validation(fields));
    }

    // Held across creation so concurrent retries with one key create one session.
    let mut keys = app.idempotency.lock().await;
    if let Some(key) = &key {
        if let Some(id) = keys.get(key) {
            let entry = app.session(id).await?;
            let entry = entry.lock().await;
            if *entry.state.config() != config {
                return Err(ApiError::new(
                    StatusCode::CONFLICT,
                    "idempotency_conflict",
                    "idempotency key was used with a different config",
                ));
            }
            return Ok((StatusCode::OK, Json(created_body(&entry))).into_response());
        }
    }
    let state = SessionState::new(config.clone())
        .map_err(|e| ApiError::validation(vec![("config".into(), e.to_string())]))?;
    let id = uuid::Uuid::new_v4().simple().to_string();
    let mut entry = SessionEntry {
        path: app.config.data_dir.join(format!("{id}.jsonl")),
        id: id.clone(),
        state,
        next_seq: 0,
        idempotency_key: key.clone(),
    };
    entry
        .append(vec![EventBody::Created {
            config,
            manifest_ref: Some(app.config.manifest_ref.clone()),
            idempotency_key: key.clone(),
        }])
        .map_err(ApiError::internal)?;
    let body = created_body(&entry);
    app.sessions
        .write()
        .await
        .insert(id.clone(), Arc::new(Mutex::new(entry)));
    if let Some(key) = key {
        keys.insert(key, id);
    }
    Ok((StatusCode::CREATED, Json(body)).into_response())
}

fn created_body(entry: &SessionEntry) -> Value {
    json!({
        "session_id": entry.id,
        "status": status_str(&entry.state),
        "total_trials": entry.state.total_trials(),
    })
}

async fn get_session(
    State(app): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    headers: HeaderMap,
) -> Result<Json<Value>, ApiError> {
    role(&app, &headers)?;
    let entry = app.session(&id).await?;
    let entry = entry.lock().await;
    Ok(Json(json!({
        "session_id": entry.id,
        "status": status_str(&entry.state),
        "progress": progress(&entry.state),
    })))
}

fn completion(entry: &SessionEntry) -> ApiError {
    ApiError {
        status: StatusCode::CONFLICT,
        body: json!({
            "error": "session_complete",
            "summary": {
                "session_id": entry.id,
                "status": "complete",
                "total_trials": entry.state.total_trials(),
                "completed": entry.state.cursor(),
            },
        }),
    }
}

async fn next_trial(
    State(app): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    headers: HeaderMap,
) -> Result<Json<Value>, ApiError> {
    role(&app, &headers)?;
    let entry = app.session(&id).await?;
    let mut entry = entry.lock().await;
    if entry.state.status() == SessionStatus::Complete {
        return Err(completion(&entry));
    }
    let fresh = entry.state.pending().is_none();
    let mut next = entry.state.clone();
    let plan = next.next_trial().map_err(ApiError::internal)?;
    let (first, second) = app
        .config
        .manifest
        .resolve(&plan)
        .map_err(ApiError::internal)?;
    if fresh {
        entry
            .append(vec![EventBody::TrialPlanned(plan.clone())])
            .map_err(ApiError::internal)?;
    }
    entry.state = next;
    Ok(Json(json!({
        "session_id": entry.id,
        "trial_index": plan.trial_index,
        "first": first,
        "second": second,
        "progress": progress(&entry.state),
    })))
}

async fn post_response(
    State(app): State<Arc<AppState>>,
    UrlPath((id, index)): UrlPath<(String, usize)>,
    headers: HeaderMap,
    body: axum::body::Bytes,
) -> Result<Json<Value>, ApiError> {
    role(&app, &headers)?;
    let body: Value = parse_json(&body, "body")?;
    let answer: RaterAnswer = match body.get("choice").and_then(Value::as_str) {
        Some(s) => s
            .parse()
            .map_err(|e: Error| ApiError::validation(vec![("choice".into(), e.to_string())]))?,
        None => {
            return Err(ApiError::validation(vec![(
                "choice".into(),
                "expected \"first\" or \"second\"".into(),
            )]))
        }
    };
    let entry = app.session(&id).await?;
    let mut entry = entry.lock().await;
    let cursor = entry.state.cursor();

    if index < cursor {
        let previous = entry.state.log()[index].answer;
        if previous != answer {
            return Err(ApiError::new(
                StatusCode::CONFLICT,
                "conflict",
                format!("trial {index} was already answered differently"),
            ));
        }
        return Ok(Json(response_body(&entry, index, true)));
    }
    if entry.state.status() == SessionStatus::Complete || index > cursor {
        return Err(ApiError {
            status: StatusCode::CONFLICT,
            body: json!({
                "error": "sequencing",
                "message": format!("expected trial {cursor}, got {index}"),
                "expected": cursor,
            }),
        });
    }

    let mut next = entry.state.clone();
    let mut events = Vec::new();
    if next.pending().is_none() {
        let plan = next.next_trial().map_err(ApiError::internal)?;
        events.push(EventBody::TrialPlanned(plan));
    }
    let record = next
        .record_response(index, answer, now_ms())
        .map_err(ApiError::internal)?
        .clone();
    events.push(EventBody::ResponseRecorded {
        trial_index: index,
        answer,
        choice: record.choice,
    });
    if next.status() == SessionStatus::Complete {
        events.push(EventBody::Completed {
            total_trials: next.total_trials(),
        });
    }
    entry.append(events).map_err(ApiError::internal)?;
    entry.state = next;
    Ok(Json(response_body(&entry, index, false)))
}

fn response_body(entry: &SessionEntry, index: usize, replayed: bool) -> Value {
    json!({
        "accepted": true,
        "replayed": replayed,
        "trial_index": index,
        "session_status": status_str(&entry.state),
        "progress": progress(&entry.state),
    })
}

async fn get_estimates(
    State(app): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    headers: HeaderMap,
) -> Result<Json<Value>, ApiError> {
    require_experimenter(&app, &headers)?;
    let entry = app.session(&id).await?;
    let entry = entry.lock().await;
    Ok(Json(estimates_body(&entry.id, &entry.state)))
}

pub fn estimates_body(id: &str, state: &SessionState) -> Value {
    json!({
        "session_id": id,
        "status": status_str(state),
        "estimates": state.estimates(),
    })
}

pub async fn serve(config: ServiceConfig, addr: std::net::SocketAddr) -> Result<(), Error> {
    let state = AppState::open(config)?;
    let n = state.n_sessions();
    let listener = tokio::net::TcpListener::bind(addr).await?;
    eprintln!("listening on http://{} ({n} sessions recovered)", listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
