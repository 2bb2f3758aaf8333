//! HTTP facade over the interview engine.
//!
//! Sessions run in parallel but each is serialized by its own lock; a second
//! request arriving while one is in flight gets 409. Both sides of every
//! turn go to `turns.jsonl` and finalized answers to `transcript.jsonl`,
//! each written by one background thread with line-atomic appends.

use std::collections::{BTreeSet, HashMap};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{mpsc, Arc, Mutex};
use std::thread;

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path as UrlPath, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use stigmagraph_core::gateway::GatewayError;
use stigmagraph_core::interview::{BotUtterance, InterviewEngine, Phase, Satisfaction, SessionError, SessionState, UtteranceKind};
use stigmagraph_core::io::{append_line, IoError};
use stigmagraph_core::model::{AttributionType, Message};
use tokio::sync::Mutex as AsyncMutex;
use tower_http::cors::{AllowOrigin, CorsLayer};

pub const TRANSCRIPT_FILE: &str = "transcript.jsonl";
pub const TURNS_FILE: &str = "turns.jsonl";
pub const WITHDRAWALS_FILE: &str = "withdrawals.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServiceConfig {
    pub max_sessions: usize,
    pub data_dir: PathBuf,
    /// Allowed browser origins; empty allows any.
    pub cors_origins: Vec<String>,
    pub seed: u64,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            max_sessions: 50,
            data_dir: PathBuf::from("data"),
            cors_origins: Vec::new(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Demographics {
    pub age: u32,
    pub gender: String,
    pub ethnicity: String,
    pub close_contact_with_mental_illness: bool,
}

#[derive(Debug, Clone, Deserialize)]
pub struct CreateSession {
    pub consent: bool,
    pub demographics: Option<Demographics>,
}

#[derive(Debug, Clone, Deserialize)]
pub struct PostMessage {
    pub text: String,
}

#[derive(Debug, Clone, Deserialize)]
pub struct PostSatisfaction {
    pub likert: i64,
    #[serde(default)]
    pub comment: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Speaker {
    Bot,
    Participant,
}

/// One line of `turns.jsonl`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TurnRecord {
    pub session_id: String,
    pub seq: u32,
    pub speaker: Speaker,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kind: Option<UtteranceKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attribution: Option<AttributionType>,
    pub phase: Phase,
    pub text: String,
    pub timestamp: DateTime<Utc>,
}

#[derive(Debug, Clone, Serialize)]
pub struct CreatedSession {
    pub session_id: String,
    pub participant_id: String,
    pub phase: Phase,
    pub first_utterances: Vec<BotUtterance>,
}

#[derive(Debug, Clone, Serialize)]
pub struct TurnResponse {
    pub bot_utterances: Vec<BotUtterance>,
    pub phase: Phase,
}

#[derive(Debug, Clone, Serialize)]
pub struct SessionView {
    pub session_id: String,
    pub participant_id: String,
    pub phase: Phase,
    pub created_at: DateTime<Utc>,
    pub last_activity: DateTime<Utc>,
    pub withdrawn: bool,
    pub demographics: Demographics,
    pub satisfaction: Option<Satisfaction>,
    pub turns: Vec<TurnRecord>,
    pub messages: Vec<Message>,
}

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("session {0} not found")]
    NotFound(String),
    #[error("session is closed")]
    Gone,
    #[error("{0}")]
    Conflict(String),
    #[error("{0}")]
    BadRequest(String),
    #[error("consent is required")]
    Forbidden,
    #[error("session capacity of {0} reached")]
    Capacity(usize),
    #[error("backend failure: {0}")]
    Backend(String),
    #[error("storage failure: {0}")]
    Storage(String),
}

impl ServiceError {
    pub fn status(&self) -> StatusCode {
        match self {
            ServiceError::NotFound(_) => StatusCode::NOT_FOUND,
            ServiceError::Gone => StatusCode::GONE,
            ServiceError::Conflict(_) => StatusCode::CONFLICT,
            ServiceError::BadRequest(_) => StatusCode::BAD_REQUEST,
            ServiceError::Forbidden => StatusCode::FORBIDDEN,
            ServiceError::Capacity(_) => StatusCode::TOO_MANY_REQUESTS,
            ServiceError::Backend(_) => StatusCode::BAD_GATEWAY,
            ServiceError::Storage(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

impl From<SessionError> for ServiceError {
    fn from(e: SessionError) -> Self {
        use stigmagraph_core::coding::CodingError;
        match e {
            SessionError::Closed => ServiceError::Gone,
            SessionError::Duplicate(_) | SessionError::WrongPhase(_) => ServiceError::Conflict(e.to_string()),
            SessionError::Input(m) => ServiceError::BadRequest(m),
            SessionError::Gateway(GatewayError::Input(m)) => ServiceError::BadRequest(m),
            SessionError::Coding(CodingError::Input(m)) => ServiceError::BadRequest(m),
            other => ServiceError::Backend(other.to_string()),
        }
    }
}

impl From<IoError> for ServiceError {
    fn from(e: IoError) -> Self {
        ServiceError::Storage(e.to_string())
    }
}

impl From<JsonRejection> for ServiceError {
    fn from(e: JsonRejection) -> Self {
        ServiceError::BadRequest(e.body_text())
    }
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        (self.status(), Json(serde_json::json!({ "error": self.to_string() }))).into_response()
    }
}

enum SinkJob {
    Append {
        file: &'static str,
        lines: Vec<String>,
        ack: mpsc::Sender<Result<(), IoError>>,
    },
}

/// Single-writer queue in front of the append-only logs.
#[derive(Clone)]
pub struct Sink {
    tx: mpsc::Sender<SinkJob>,
    dir: PathBuf,
}

impl Sink {
    pub fn start(dir: &Path) -> std::io::Result<Self> {
        std::fs::create_dir_all(dir)?;
        let (tx, rx) = mpsc::channel::<SinkJob>();
        let root = dir.to_path_buf();
        thread::Builder::new().name("transcript-sink".into()).spawn(move || {
            for job in rx {
                match job {
                    SinkJob::Append { file, lines, ack } => {
                        let path = root.join(file);
                        let r = lines.iter().try_for_each(|l| append_line(&path, l));
                        let _ = ack.send(r);
                    }
                }
            }
        })?;
        Ok(Sink {
            tx,
            dir: dir.to_path_buf(),
        })
    }

    /// Blocks until the writer thread has appended every line.
    pub fn append<T: Serialize>(&self, file: &'static str, records: &[T]) -> Result<(), ServiceError> {
        if records.is_empty() {
            return Ok(());
        }
        let lines = records
            .iter()
            .map(|r| serde_json::to_string(r).map_err(|e| ServiceError::Storage(e.to_string())))
            .collect::<Result<Vec<_>, _>>()?;
        let (ack, done) = mpsc::channel();
        self.tx
            .send(SinkJob::Append { file, lines, ack })
            .map_err(|_| ServiceError::Storage("transcript writer stopped".into()))?;
        done.recv()
            .map_err(|_| ServiceError::Storage("transcript writer stopped".into()))?
            .map_err(ServiceError::from)
    }

    pub fn path(&self, file: &str) -> PathBuf {
        self.dir.join(file)
    }
}

struct SessionRecord {
    state: SessionState,
    demographics: Demographics,
    created_at: DateTime<Utc>,
    last_activity: DateTime<Utc>,
    withdrawn: bool,
    turns: Vec<TurnRecord>,
    messages: Vec<Message>,
}

impl SessionRecord {
    fn record(&mut self, speaker: Speaker, kind: Option<UtteranceKind>, attribution: Option<AttributionType>, text: &str, ts: DateTime<Utc>) -> TurnRecord {
        let r = TurnRecord {
            session_id: self.state.session_id.clone(),
            seq: self.turns.len() as u32,
            speaker,
            kind,
            attribution,
            phase: self.state.phase,
            text: text.to_string(),
            timestamp: ts,
        };
        self.turns.push(r.clone());
        r
    }

    fn record_bot(&mut self, utterances: &[BotUtterance], ts: DateTime<Utc>) -> Vec<TurnRecord> {
        utterances
            .iter()
            .map(|u| self.record(Speaker::Bot, Some(u.kind), u.attribution, &u.text, ts))
            .collect()
    }

    fn is_active(&self) -> bool {
        !self.withdrawn && !self.state.phase.is_closed()
    }
}

#[derive(Default)]
struct Registry {
    slots: HashMap<String, Arc<AsyncMutex<SessionRecord>>>,
    active: BTreeSet<String>,
    created: u64,
}

pub struct AppState {
    engine: Arc<InterviewEngine>,
    config: ServiceConfig,
    registry: Mutex<Registry>,
    sink: Sink,
}

type Shared = Arc<AppState>;

impl AppState {
    pub fn new(engine: InterviewEngine, config: ServiceConfig) -> std::io::Result<Shared> {
        let sink = Sink::start(&config.data_dir)?;
        Ok(Arc::new(AppState {
            engine: Arc::new(engine),
            config,
            registry: Mutex::new(Registry::default()),
            sink,
        }))
    }

    pub fn active_sessions(&self) -> usize {
        self.registry.lock().expect("registry lock").active.len()
    }

    fn slot(&self, id: &str) -> Result<Arc<AsyncMutex<SessionRecord>>, ServiceError> {
        self.registry
            .lock()
            .expect("registry lock")
            .slots
            .get(id)
            .cloned()
            .ok_or_else(|| ServiceError::NotFound(id.to_string()))
    }

    fn settle(&self, rec: &SessionRecord) {
        if !rec.is_active() {
            self.registry.lock().expect("registry lock").active.remove(&rec.state.session_id);
        }
    }
}

pub fn router(state: Shared) -> Router {
    let cors = if state.config.cors_origins.is_empty() {
        CorsLayer::permissive()
    } else {
        let origins: Vec<HeaderValue> = state
            .config
            .cors_origins
            .iter()
            .filter_map(|o| HeaderValue::from_str(o).ok())
            .collect();
        CorsLayer::new()
            .allow_origin(AllowOrigin::list(origins))
            .allow_methods(tower_http::cors::Any)
            .allow_headers(tower_http::cors::Any)
    };
    Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/:id", get(get_session))
        .route("/sessions/:id/messages", post(post_message))
        .route("/sessions/:id/satisfaction", post(post_satisfaction))
        .route("/sessions/:id/withdraw", post(withdraw))
        .route("/export/transcripts", get(export_transcripts))
        .layer(cors)
        .with_state(state)
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> T + Send + 'static) -> Result<T, ServiceError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ServiceError::Storage(format!("worker failed: {e}")))
}

async fn create_session(
    State(app): State<Shared>,
    body: Result<Json<CreateSession>, JsonRejection>,
) -> Result<(StatusCode, Json<CreatedSession>), ServiceError> {
    let Json(body) = body?;
    if !body.consent {
        return Err(ServiceError::Forbidden);
    }
    let demographics = body
        .demographics
        .ok_or_else(|| ServiceError::BadRequest("demographics are required".into()))?;
    let (sid, pid, seed) = {
        let mut reg = app.registry.lock().expect("registry lock");
        if reg.active.len() >= app.config.max_sessions {
            return Err(ServiceError::Capacity(app.config.max_sessions));
        }
        reg.created += 1;
        let n = reg.created;
        let sid = format!("S{n:06}");
        reg.active.insert(sid.clone());
        (sid, format!("P{n:06}"), app.config.seed.wrapping_add(n))
    };
    let (state, first) = app.engine.start_session(&sid, &pid, seed);
    let now = Utc::now();
    let mut rec = SessionRecord {
        state,
        demographics,
        created_at: now,
        last_activity: now,
        withdrawn: false,
        turns: Vec::new(),
        messages: Vec::new(),
    };
    let lines = rec.record_bot(&first, now);
    let phase = rec.state.phase;
    let slot = Arc::new(AsyncMutex::new(rec));
    let guard = slot.clone().lock_owned().await;
    app.registry.lock().expect("registry lock").slots.insert(sid.clone(), slot);
    let sink = app.sink.clone();
    let written = blocking(move || sink.append(TURNS_FILE, &lines)).await?;
    drop(guard);
    written?;
    Ok((
        StatusCode::CREATED,
        Json(CreatedSession {
            session_id: sid,
            participant_id: pid,
            phase,
            first_utterances: first,
        }),
    ))
}

async fn post_message(
    State(app): State<Shared>,
    UrlPath(id): UrlPath<String>,
    body: Result<Json<PostMessage>, JsonRejection>,
) -> Result<Json<TurnResponse>, ServiceError> {
    let slot = app.slot(&id)?;
    let mut guard = slot
        .try_lock_owned()
        .map_err(|_| ServiceError::Conflict(format!("session {id} is processing another message")))?;
    let Json(body) = body?;
    if guard.withdrawn || guard.state.phase.is_closed() {
        return Err(ServiceError::Gone);
    }
    let engine = app.engine.clone();
    let sink = app.sink.clone();
    let current = guard.state.clone();
    let text = body.text;
    let now = Utc::now();
    let (next, turn) = {
        let text = text.clone();
        blocking(move || engine.advance(&current, &text, now)).await??
    };
    let rec = &mut *guard;
    let mut lines = vec![rec.record(Speaker::Participant, None, None, &text, now)];
    rec.state = next;
    lines.extend(rec.record_bot(&turn.utterances, now));
    rec.last_activity = now;
    rec.messages.extend(turn.completed.iter().cloned());
    let phase = rec.state.phase;
    app.settle(rec);
    let completed = turn.completed;
    blocking(move || {
        sink.append(TURNS_FILE, &lines)?;
        sink.append(TRANSCRIPT_FILE, &completed)
    })
    .await??;
    Ok(Json(TurnResponse {
        bot_utterances: turn.utterances,
        phase,
    }))
}

async fn post_satisfaction(
    State(app): State<Shared>,
    UrlPath(id): UrlPath<String>,
    body: Result<Json<PostSatisfaction>, JsonRejection>,
) -> Result<StatusCode, ServiceError> {
    let slot = app.slot(&id)?;
    let mut guard = slot
        .try_lock_owned()
        .map_err(|_| ServiceError::Conflict(format!("session {id} is processing another request")))?;
    let Json(body) = body?;
    if guard.withdrawn {
        return Err(ServiceError::Gone);
    }
    let likert = u8::try_from(body.likert)
        .ok()
        .filter(|l| (1..=5).contains(l))
        .ok_or_else(|| ServiceError::BadRequest(format!("likert {} outside 1..5", body.likert)))?;
    let (next, debrief) = app.engine.submit_satisfaction(&guard.state, likert, body.comment.clone())?;
    let now = Utc::now();
    let rec = &mut *guard;
    let mut lines = vec![rec.record(
        Speaker::Participant,
        Some(UtteranceKind::Satisfaction),
        None,
        &format!("likert={likert}"),
        now,
    )];
    rec.state = next;
    lines.extend(rec.record_bot(&debrief, now));
    rec.last_activity = now;
    app.settle(rec);
    let sink = app.sink.clone();
    blocking(move || sink.append(TURNS_FILE, &lines)).await??;
    Ok(StatusCode::NO_CONTENT)
}

#[derive(Serialize)]
struct Withdrawal<'a> {
    session_id: &'a str,
    timestamp: DateTime<Utc>,
}

/// Ends the session at any phase; its answers are left out of exports.
async fn withdraw(State(app): State<Shared>, UrlPath(id): UrlPath<String>) -> Result<StatusCode, ServiceError> {
    let slot = app.slot(&id)?;
    let mut guard = slot
        .try_lock_owned()
        .map_err(|_| ServiceError::Conflict(format!("session {id} is processing another request")))?;
    if guard.withdrawn {
        return Ok(StatusCode::NO_CONTENT);
    }
    guard.withdrawn = true;
    guard.state.phase = Phase::Done;
    guard.last_activity = Utc::now();
    app.settle(&guard);
    let sink = app.sink.clone();
    let line = serde_json::to_value(Withdrawal {
        session_id: &id,
        timestamp: guard.last_activity,
    })
    .map_err(|e| ServiceError::Storage(e.to_string()))?;
    blocking(move || sink.append(WITHDRAWALS_FILE, &[line])).await??;
    Ok(StatusCode::NO_CONTENT)
}

async fn get_session(State(app): State<Shared>, UrlPath(id): UrlPath<String>) -> Result<Json<SessionView>, ServiceError> {
    let slot = app.slot(&id)?;
    let rec = slot.lock().await;
    Ok(Json(SessionView {
        session_id: rec.state.session_id.clone(),
        participant_id: rec.state.participant_id.clone(),
        phase: rec.state.phase,
        created_at: rec.created_at,
        last_activity: rec.last_activity,
        withdrawn: rec.withdrawn,
        demographics: rec.demographics.clone(),
        satisfaction: rec.state.satisfaction.clone(),
        turns: rec.turns.clone(),
        messages: rec.messages.clone(),
    }))
}

#[derive(Deserialize)]
struct SessionRef {
    session_id: String,
}

/// Transcript lines of sessions that were not withdrawn, in log order.
pub fn export_lines(sink: &Sink) -> Result<String, ServiceError> {
    let read = |file: &str| match std::fs::read_to_string(sink.path(file)) {
        Ok(s) => Ok(s),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(String::new()),
        Err(e) => Err(ServiceError::Storage(e.to_string())),
    };
    let withdrawn: BTreeSet<String> = read(WITHDRAWALS_FILE)?
        .lines()
        .filter_map(|l| serde_json::from_str::<SessionRef>(l).ok())
        .map(|r| r.session_id)
        .collect();
    let mut out = String::new();
    for line in read(TRANSCRIPT_FILE)?.lines() {
        let keep = serde_json::from_str::<SessionRef>(line).map_or(false, |r| !withdrawn.contains(&r.session_id));
        if keep {
            out.push_str(line);
            out.push('\n');
        }
    }
    Ok(out)
}

async fn export_transcripts(State(app): State<Shared>) -> Result<Response, ServiceError> {
    let sink = app.sink.clone();
    let body = blocking(move || export_lines(&sink)).await??;
    Ok(([(header::CONTENT_TYPE, "application/x-ndjson")], body).into_response())
}

/// Binds and serves until the process is stopped.
pub async fn serve(app: Shared, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    axum::serve(listener, router(app)).await
}
