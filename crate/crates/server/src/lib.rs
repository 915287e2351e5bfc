//! Live coaching sessions over HTTP + WebSocket.
//!
//! * `POST /sessions` creates a session and returns its handle
//! * `GET /sessions/{id}` returns the handle
//! * `GET /sessions/{id}/stream` upgrades to the session's frame stream; the session starts on connect
//! * `GET /sessions/{id}/log` returns the finished session's log
//! * `GET /healthz`

mod bridge;
pub mod frames;

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use axum::body::Bytes;
use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use coach_core::config::EngineConfig;
use coach_core::dialogue::{
    run_session, DispatchMode, RealtimeClock, RuptureDetector, Script, SessionConfig, SessionEnv, SessionEvent,
    SessionLog, TerminationReason,
};
use coach_core::domain::{ExerciseKind, Transition};
use coach_core::llm::{BackendConfig, RemoteConfig, StubConfig};
use coach_core::policy::{
    fork_for_coachee, AdaptivePolicy, DecisionPolicy, FrozenPolicy, PolicyCheckpoint,
};
use coach_core::store;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::sync::mpsc;

use bridge::{AwaitingSlot, SocketChannel};
pub use frames::{ClientFrame, CoacheeUtterance, ServerFrame, TextOnlyDefaults, FRAME_PROTOCOL_VERSION};

#[derive(Debug, Error)]
pub enum ServerError {
    #[error("{0}")]
    Store(#[from] store::StoreError),
    #[error("{0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PolicyMode {
    #[default]
    Adaptive,
    Generic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendChoice {
    #[default]
    Stub,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateSessionRequest {
    pub coachee_id: String,
    pub exercise: String,
    #[serde(default)]
    pub mode: PolicyMode,
    #[serde(default)]
    pub backend: BackendChoice,
    /// Checkpoint name under the checkpoint directory.
    #[serde(default)]
    pub checkpoint: Option<String>,
    /// Sends decision traces and per-utterance actions.
    #[serde(default)]
    pub debug: bool,
    #[serde(default)]
    pub session_index: Option<usize>,
    /// Valence samples recorded during the introduction; neutral when absent.
    #[serde(default)]
    pub intro_valence: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SessionState {
    Created,
    Running,
    Completed,
    Terminated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionHandle {
    pub session_id: String,
    pub coachee_id: String,
    pub exercise: ExerciseKind,
    pub mode: PolicyMode,
    pub session_index: usize,
    pub debug: bool,
    pub state: SessionState,
    /// Set once the session has ended.
    pub termination: Option<TerminationReason>,
    pub created_at_ms: u64,
    pub protocol_version: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
}

struct ApiError(StatusCode, &'static str, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(serde_json::json!({ "error": ErrorBody { code: self.1.into(), message: self.2 } })))
            .into_response()
    }
}

fn bad_request(msg: impl Into<String>) -> ApiError {
    ApiError(StatusCode::BAD_REQUEST, "bad_request", msg.into())
}

enum PolicySlot {
    Frozen(FrozenPolicy),
    Adaptive(Box<AdaptivePolicy>),
}

impl PolicySlot {
    fn as_dyn(&mut self) -> &mut dyn DecisionPolicy {
        match self {
            PolicySlot::Frozen(p) => p,
            PolicySlot::Adaptive(p) => p.as_mut(),
        }
    }
}

struct Prepared {
    cfg: SessionConfig,
    env: SessionEnv,
    policy: PolicySlot,
    intro_valence: Vec<f64>,
    personal_path: Option<PathBuf>,
}

struct Slot {
    handle: Mutex<SessionHandle>,
    prepared: Mutex<Option<Prepared>>,
    log: Mutex<Option<SessionLog>>,
}

pub struct AppState {
    config: EngineConfig,
    script: Arc<Script>,
    replay: Arc<[Transition]>,
    detector: Option<Arc<dyn RuptureDetector>>,
    sessions: Mutex<HashMap<String, Arc<Slot>>>,
    log_lock: Mutex<()>,
    auth_token: Option<String>,
    counter: AtomicU64,
}

impl AppState {
    pub fn new(config: EngineConfig) -> Result<Arc<Self>, ServerError> {
        config.validate().map_err(|e| ServerError::Config(e.to_string()))?;
        let server = &config.server;
        let replay: Arc<[Transition]> = match &server.replay_corpus {
            Some(p) => store::read_transitions(p)?.into(),
            None => Arc::from(Vec::new()),
        };
        let detector = match &server.rupture_detector {
            Some(p) => Some(Arc::new(store::load_detector(p)?) as Arc<dyn RuptureDetector>),
            None => None,
        };
        let auth_token = server
            .auth_token_env
            .as_ref()
            .and_then(|name| std::env::var(name).ok())
            .filter(|t| !t.is_empty());
        Ok(Arc::new(Self {
            config,
            script: Arc::new(Script::bundled()),
            replay,
            detector,
            sessions: Mutex::new(HashMap::new()),
            log_lock: Mutex::new(()),
            auth_token,
            counter: AtomicU64::new(0),
        }))
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    fn slot(&self, id: &str) -> Option<Arc<Slot>> {
        self.sessions.lock().expect("registry lock").get(id).cloned()
    }

    fn check_auth(&self, headers: &HeaderMap, query_token: Option<&str>) -> Result<(), ApiError> {
        let Some(expected) = &self.auth_token else { return Ok(()) };
        let header = headers
            .get(axum::http::header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "));
        if header == Some(expected.as_str()) || query_token == Some(expected.as_str()) {
            Ok(())
        } else {
            Err(ApiError(StatusCode::UNAUTHORIZED, "unauthorized", "missing or wrong bearer token".into()))
        }
    }

    fn text_defaults(&self) -> TextOnlyDefaults {
        let s = &self.config.server;
        TextOnlyDefaults {
            words_per_second: s.words_per_second,
            neutral_valence: s.neutral_valence,
            neutral_samples: s.neutral_samples,
        }
    }

    fn create(&self, req: CreateSessionRequest) -> Result<SessionHandle, ApiError> {
        let exercise: ExerciseKind = req.exercise.parse().map_err(|e: coach_core::domain::DomainError| bad_request(e.to_string()))?;
        if !valid_name(&req.coachee_id) {
            return Err(bad_request("coachee_id must be 1-64 characters of [A-Za-z0-9_-]"));
        }
        if let Some(v) = &req.intro_valence {
            if v.iter().any(|x| !(x.is_finite() && (-1.0..=1.0).contains(x))) {
                return Err(bad_request("intro_valence samples must lie in [-1, 1]"));
            }
        }
        let session_index = req.session_index.unwrap_or(1);
        if session_index == 0 {
            return Err(bad_request("session_index is 1-based"));
        }
        let server = &self.config.server;
        let name = req.checkpoint.clone().unwrap_or_else(|| server.default_checkpoint.clone());
        if !valid_name(&name) {
            return Err(bad_request("checkpoint names are 1-64 characters of [A-Za-z0-9_-]"));
        }
        let path = server.checkpoint_dir.join(format!("{name}.ckpt"));
        if !path.is_file() {
            return Err(ApiError(StatusCode::NOT_FOUND, "unknown_checkpoint", format!("no checkpoint named `{name}`")));
        }
        let generic = store::load_checkpoint(&path)
            .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, "checkpoint_unreadable", e.to_string()))?;
        if generic.coachee_id.is_some() {
            return Err(bad_request(format!("checkpoint `{name}` is personalised; use a generic one")));
        }

        let llm = match req.backend {
            BackendChoice::Stub => match &self.config.llm {
                BackendConfig::Stub(c) => BackendConfig::Stub(c.clone()),
                BackendConfig::Remote(_) => BackendConfig::Stub(StubConfig::default()),
            },
            BackendChoice::Remote => {
                if !server.allow_remote_backend {
                    return Err(bad_request("the remote backend is disabled on this server"));
                }
                match &self.config.llm {
                    BackendConfig::Remote(c) => BackendConfig::Remote(c.clone()),
                    BackendConfig::Stub(_) => BackendConfig::Remote(RemoteConfig::default()),
                }
            }
        }
        .build()
        .map_err(|e| ApiError(StatusCode::SERVICE_UNAVAILABLE, "backend_unavailable", e.to_string()))?;

        let (policy, personal_path) = self.policy_for(&generic, req.mode, &req.coachee_id)?;
        let n = self.counter.fetch_add(1, Ordering::Relaxed);
        let session_id = uuid::Uuid::new_v4().simple().to_string();
        let cfg = SessionConfig {
            session_id: session_id.clone(),
            coachee_id: req.coachee_id.clone(),
            exercise,
            session_index,
            debug_trace: req.debug,
            dispatch: DispatchMode::Threaded,
            seed: self.config.session.seed ^ self.config.seed.rotate_left(32) ^ n,
            policy_ref: Some(name),
            ..self.config.session.clone()
        };
        let mut env = SessionEnv::new(Arc::clone(&self.script), llm, generic.normalizer, generic.reward);
        env.rupture = self.detector.clone();
        let defaults = self.text_defaults();
        let intro_valence = req
            .intro_valence
            .clone()
            .unwrap_or_else(|| vec![defaults.neutral_valence; defaults.neutral_samples]);
        let handle = SessionHandle {
            session_id: session_id.clone(),
            coachee_id: req.coachee_id,
            exercise,
            mode: req.mode,
            session_index,
            debug: req.debug,
            state: SessionState::Created,
            termination: None,
            created_at_ms: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0),
            protocol_version: FRAME_PROTOCOL_VERSION,
        };
        let slot = Slot {
            handle: Mutex::new(handle.clone()),
            prepared: Mutex::new(Some(Prepared { cfg, env, policy, intro_valence, personal_path })),
            log: Mutex::new(None),
        };
        self.sessions.lock().expect("registry lock").insert(session_id, Arc::new(slot));
        Ok(handle)
    }

    /// Adaptive sessions resume the coachee's saved policy, or fork the generic one.
    fn policy_for(
        &self,
        generic: &PolicyCheckpoint,
        mode: PolicyMode,
        coachee_id: &str,
    ) -> Result<(PolicySlot, Option<PathBuf>), ApiError> {
        let internal = |e: String| ApiError(StatusCode::INTERNAL_SERVER_ERROR, "policy_error", e);
        match mode {
            PolicyMode::Generic => {
                Ok((PolicySlot::Frozen(FrozenPolicy::from_checkpoint(generic).map_err(|e| internal(e.to_string()))?), None))
            }
            PolicyMode::Adaptive => {
                let path = self.config.server.coachee_dir.join(format!("{coachee_id}.ckpt"));
                let personal = if path.is_file() {
                    let ck = store::load_checkpoint(&path).map_err(|e| internal(e.to_string()))?;
                    if ck.coachee_id.as_deref() != Some(coachee_id) {
                        return Err(internal(format!("{} belongs to another coachee", path.display())));
                    }
                    ck
                } else {
                    fork_for_coachee(generic, coachee_id).map_err(|e| internal(e.to_string()))?
                };
                let policy = AdaptivePolicy::new(&personal, Arc::clone(&self.replay), self.config.online.clone())
                    .map_err(|e| internal(e.to_string()))?;
                Ok((PolicySlot::Adaptive(Box::new(policy)), Some(path)))
            }
        }
    }

    fn finish(&self, slot: &Slot, log: Option<SessionLog>, error: Option<String>) {
        if let Some(log) = &log {
            let _guard = self.log_lock.lock().expect("log lock");
            if let Err(e) = store::append_session_log(&self.config.server.log_path, log) {
                tracing::error!(error = %e, "failed to persist session log");
            }
        }
        let mut h = slot.handle.lock().expect("handle lock");
        match &log {
            Some(l) => {
                h.termination = Some(l.termination);
                h.state = if l.termination == TerminationReason::Completed {
                    SessionState::Completed
                } else {
                    SessionState::Terminated
                };
            }
            None => {
                tracing::error!(session = %h.session_id, error = ?error, "session failed to start");
                h.termination = Some(TerminationReason::Error);
                h.state = SessionState::Terminated;
            }
        }
        *slot.log.lock().expect("log lock") = log;
    }
}

fn valid_name(s: &str) -> bool {
    (1..=64).contains(&s.len()) && s.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
}

async fn create_session(State(app): State<Arc<AppState>>, headers: HeaderMap, body: Bytes) -> Response {
    if let Err(e) = app.check_auth(&headers, None) {
        return e.into_response();
    }
    let req: CreateSessionRequest = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) => return bad_request(format!("malformed request: {e}")).into_response(),
    };
    let app2 = Arc::clone(&app);
    // checkpoint loading touches the disk
    match tokio::task::spawn_blocking(move || app2.create(req)).await {
        Ok(Ok(handle)) => (StatusCode::CREATED, Json(handle)).into_response(),
        Ok(Err(e)) => e.into_response(),
        Err(e) => ApiError(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()).into_response(),
    }
}

fn not_found(id: &str) -> ApiError {
    ApiError(StatusCode::NOT_FOUND, "unknown_session", format!("no session `{id}`"))
}

async fn get_session(State(app): State<Arc<AppState>>, headers: HeaderMap, UrlPath(id): UrlPath<String>) -> Response {
    if let Err(e) = app.check_auth(&headers, None) {
        return e.into_response();
    }
    match app.slot(&id) {
        Some(slot) => Json(slot.handle.lock().expect("handle lock").clone()).into_response(),
        None => not_found(&id).into_response(),
    }
}

async fn get_log(State(app): State<Arc<AppState>>, headers: HeaderMap, UrlPath(id): UrlPath<String>) -> Response {
    if let Err(e) = app.check_auth(&headers, None) {
        return e.into_response();
    }
    let Some(slot) = app.slot(&id) else { return not_found(&id).into_response() };
    let state = slot.handle.lock().expect("handle lock").state;
    if matches!(state, SessionState::Created | SessionState::Running) {
        return ApiError(StatusCode::CONFLICT, "session_active", format!("session `{id}` has not ended")).into_response();
    }
    let log = slot.log.lock().expect("log lock").clone();
    match log {
        Some(log) => Json(log).into_response(),
        None => ApiError(StatusCode::INTERNAL_SERVER_ERROR, "no_log", "session ended without a log".into())
            .into_response(),
    }
}

async fn healthz() -> Json<serde_json::Value> {
    Json(serde_json::json!({ "status": "ok", "protocol_version": FRAME_PROTOCOL_VERSION }))
}

#[derive(Debug, Deserialize)]
struct StreamQuery {
    token: Option<String>,
}

async fn stream(
    State(app): State<Arc<AppState>>,
    headers: HeaderMap,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<StreamQuery>,
    ws: WebSocketUpgrade,
) -> Response {
    if let Err(e) = app.check_auth(&headers, q.token.as_deref()) {
        return e.into_response();
    }
    let Some(slot) = app.slot(&id) else { return not_found(&id).into_response() };
    ws.on_upgrade(move |socket| drive_socket(app, slot, socket))
}

async fn send_frame(socket: &mut WebSocket, frame: &ServerFrame) -> bool {
    let text = serde_json::to_string(frame).expect("frame serializes");
    socket.send(Message::Text(text.into())).await.is_ok()
}

async fn drive_socket(app: Arc<AppState>, slot: Arc<Slot>, mut socket: WebSocket) {
    let prepared = slot.prepared.lock().expect("prepared lock").take();
    let Some(prepared) = prepared else {
        let state = slot.handle.lock().expect("handle lock").state;
        let frame = ServerFrame::error("session_not_startable", format!("session is {state:?}").to_lowercase());
        send_frame(&mut socket, &frame).await;
        let _ = socket.send(Message::Close(None)).await;
        return;
    };
    slot.handle.lock().expect("handle lock").state = SessionState::Running;
    let debug = prepared.cfg.debug_trace;

    let (out_tx, mut out_rx) = mpsc::unbounded_channel::<SessionEvent>();
    let (in_tx, in_rx) = std::sync::mpsc::channel();
    let awaiting: AwaitingSlot = Arc::new(Mutex::new(None));
    let channel = SocketChannel {
        out: out_tx,
        input: in_rx,
        awaiting: Arc::clone(&awaiting),
        intro_valence: prepared.intro_valence.clone(),
    };
    let runner_app = Arc::clone(&app);
    let runner_slot = Arc::clone(&slot);
    std::thread::spawn(move || run_live(runner_app, runner_slot, prepared, channel));

    let defaults = app.text_defaults();
    let mut in_tx = Some(in_tx);
    let mut pending_end = None;
    let mut client_open = true;
    loop {
        tokio::select! {
            event = out_rx.recv() => match event {
                Some(SessionEvent::SessionEnd { reason }) => pending_end = Some(reason),
                Some(event) => {
                    if let Some(frame) = ServerFrame::from_event(&event, debug) {
                        if client_open && !send_frame(&mut socket, &frame).await {
                            client_open = false;
                            in_tx = None;
                        }
                    }
                }
                // the runner has stored the log; only now is the end announced
                None => {
                    if client_open {
                        let frame = match pending_end {
                            Some(reason) => ServerFrame::SessionEnd { reason },
                            None => ServerFrame::error("session_failed", "the session could not run"),
                        };
                        send_frame(&mut socket, &frame).await;
                        let _ = socket.send(Message::Close(None)).await;
                    }
                    break;
                }
            },
            msg = socket.recv(), if client_open => match msg {
                Some(Ok(Message::Text(text))) => {
                    if let Some(frame) = accept_client_text(text.as_str(), &awaiting, in_tx.as_ref(), &defaults) {
                        if !send_frame(&mut socket, &frame).await {
                            client_open = false;
                            in_tx = None;
                        }
                    }
                }
                Some(Ok(Message::Binary(_))) => {
                    send_frame(&mut socket, &ServerFrame::error("protocol", "binary frames are not supported")).await;
                }
                Some(Ok(Message::Close(_))) | None | Some(Err(_)) => {
                    client_open = false;
                    // the session sees the disconnect on its next poll
                    in_tx = None;
                }
                Some(Ok(_)) => {}
            },
        }
    }
    drop(in_tx);
}

/// Returns an error frame for the client when the text is rejected.
fn accept_client_text(
    text: &str,
    awaiting: &AwaitingSlot,
    in_tx: Option<&std::sync::mpsc::Sender<coach_core::dialogue::CoacheeTurnInput>>,
    defaults: &TextOnlyDefaults,
) -> Option<ServerFrame> {
    let frame: ClientFrame = match serde_json::from_str(text) {
        Ok(f) => f,
        Err(e) => return Some(ServerFrame::error("protocol", format!("malformed frame: {e}"))),
    };
    let ClientFrame::CoacheeUtterance(utterance) = frame;
    if let Err(e) = utterance.validate() {
        return Some(ServerFrame::error("protocol", e));
    }
    let mut slot = awaiting.lock().expect("awaiting lock");
    let Some((_, since)) = *slot else {
        return Some(ServerFrame::error("not_awaiting", "the coach is not waiting for an answer"));
    };
    let latency = Instant::now().duration_since(since).as_secs_f64();
    let input = utterance.into_turn_input(latency, defaults);
    match in_tx.map(|tx| tx.send(input)) {
        Some(Ok(())) => {
            *slot = None;
            None
        }
        _ => Some(ServerFrame::error("session_not_running", "the session has ended")),
    }
}

fn run_live(app: Arc<AppState>, slot: Arc<Slot>, prepared: Prepared, mut channel: SocketChannel) {
    let Prepared { cfg, env, mut policy, personal_path, .. } = prepared;
    let result = run_session(&cfg, &env, &mut channel, policy.as_dyn(), &mut RealtimeClock::new());
    match result {
        Ok(outcome) => {
            if let (PolicySlot::Adaptive(p), Some(path)) = (&policy, &personal_path) {
                if let Err(e) = store::save_checkpoint(path, &p.to_checkpoint()) {
                    tracing::error!(error = %e, "failed to save personalised policy");
                }
            }
            app.finish(&slot, Some(outcome.log), None);
        }
        Err(e) => app.finish(&slot, None, Some(e.to_string())),
    }
    // dropping the channel closes the event stream, which lets the socket announce the end
    drop(channel);
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/healthz", get(healthz))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/log", get(get_log))
        .route("/sessions/{id}/stream", get(stream))
        .with_state(state)
}

pub async fn serve(listener: tokio::net::TcpListener, state: Arc<AppState>) -> std::io::Result<()> {
    axum::serve(listener, router(state)).await
}

/// Log file location, for callers that want to read it back.
pub fn log_path(state: &AppState) -> &Path {
    &state.config.server.log_path
}
