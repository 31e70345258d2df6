//! Live rollout service: HTTP control plane plus a WebSocket frame stream
//! per session.

pub mod session;

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::{Path as UrlPath, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use distrisk_core::checkpoint::{Checkpoint, CheckpointKind};
use distrisk_core::envs::obs_dims;
use distrisk_core::nn::Mlp;
use distrisk_core::risk::Metric;
use serde::{Deserialize, Serialize};
use tokio::sync::{broadcast, mpsc, oneshot};

pub use session::{beta_key, check_beta, serve_range, Frame, RunState, SessionCore, SessionStatus};
use session::{run_session, Command, SessionShared};

#[derive(Clone, Debug)]
pub struct ServeConfig {
    pub checkpoints_dir: PathBuf,
    pub default_hz: f64,
    pub max_hz: f64,
    pub histogram_bins: usize,
}

impl ServeConfig {
    pub fn new(checkpoints_dir: impl Into<PathBuf>) -> Self {
        Self {
            checkpoints_dir: checkpoints_dir.into(),
            default_hz: 20.0,
            max_hz: 1000.0,
            histogram_bins: 24,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ApiError {
    #[error("{0}")]
    NotFound(String),
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Internal(String),
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let code = match &self {
            ApiError::NotFound(_) => StatusCode::NOT_FOUND,
            ApiError::Validation(_) => StatusCode::UNPROCESSABLE_ENTITY,
            ApiError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        (code, Json(serde_json::json!({ "error": self.to_string() }))).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

struct SessionHandle {
    commands: mpsc::Sender<Command>,
    shared: Arc<SessionShared>,
}

struct Inner {
    config: ServeConfig,
    sessions: Mutex<BTreeMap<u64, SessionHandle>>,
    next_id: AtomicU64,
}

#[derive(Clone)]
pub struct AppState(Arc<Inner>);

impl AppState {
    pub fn new(config: ServeConfig) -> Self {
        Self(Arc::new(Inner {
            config,
            sessions: Mutex::new(BTreeMap::new()),
            next_id: AtomicU64::new(1),
        }))
    }

    fn handle(&self, id: u64) -> Result<(mpsc::Sender<Command>, Arc<SessionShared>), ApiError> {
        let sessions = self.0.sessions.lock().expect("sessions lock");
        let h = sessions
            .get(&id)
            .ok_or_else(|| ApiError::NotFound(format!("unknown session {id}")))?;
        Ok((h.commands.clone(), h.shared.clone()))
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/checkpoints", get(list_checkpoints))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/beta", post(set_beta))
        .route("/sessions/{id}/pause", post(pause))
        .route("/sessions/{id}/resume", post(resume))
        .route("/sessions/{id}/reset", post(reset))
        .route("/sessions/{id}/ws", get(stream))
        .with_state(state)
}

/// Binds `addr` and serves until the process is stopped.
pub async fn serve(addr: SocketAddr, config: ServeConfig) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(addr = %listener.local_addr()?, dir = %config.checkpoints_dir.display(), "serving");
    axum::serve(listener, router(AppState::new(config))).await
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointInfo {
    pub name: String,
    pub kind: CheckpointKind,
    pub task: String,
    pub metric: Metric,
    pub beta_range: [f64; 2],
    pub iteration: usize,
    pub has_critic: bool,
    pub sha256: String,
    pub teacher_sha256: Option<String>,
}

fn checkpoint_path(dir: &Path, name: &str) -> Result<PathBuf, ApiError> {
    let valid = !name.is_empty()
        && name
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'))
        && !name.starts_with('.');
    if !valid {
        return Err(ApiError::Validation(format!("invalid checkpoint name {name:?}")));
    }
    let path = dir.join(format!("{name}.json"));
    if !path.is_file() {
        return Err(ApiError::NotFound(format!("unknown checkpoint {name:?}")));
    }
    Ok(path)
}

fn load_checkpoint(dir: &Path, name: &str) -> Result<Checkpoint, ApiError> {
    let path = checkpoint_path(dir, name)?;
    Checkpoint::load(&path).map_err(|e| ApiError::Validation(format!("checkpoint {name:?}: {e}")))
}

/// Every `*.json` in the directory that parses as a checkpoint, by name.
fn scan(dir: &Path) -> Result<Vec<(CheckpointInfo, Checkpoint)>, ApiError> {
    let entries = std::fs::read_dir(dir).map_err(|e| ApiError::Internal(format!("{}: {e}", dir.display())))?;
    let mut out = Vec::new();
    for entry in entries.flatten() {
        let path = entry.path();
        if path.extension().and_then(|e| e.to_str()) != Some("json") {
            continue;
        }
        let Some(name) = path.file_stem().and_then(|s| s.to_str()) else { continue };
        let Ok(ck) = Checkpoint::load(&path) else { continue };
        let Ok(sha) = ck.sha256() else { continue };
        out.push((
            CheckpointInfo {
                name: name.to_string(),
                kind: ck.kind,
                task: ck.metadata.task.as_str().to_string(),
                metric: ck.metadata.metric,
                beta_range: ck.metadata.beta_range,
                iteration: ck.metadata.iteration,
                has_critic: ck.critic.is_some(),
                sha256: sha,
                teacher_sha256: ck.metadata.teacher_sha256.clone(),
            },
            ck,
        ));
    }
    out.sort_by(|a, b| a.0.name.cmp(&b.0.name));
    Ok(out)
}

async fn list_checkpoints(State(app): State<AppState>) -> ApiResult<Vec<CheckpointInfo>> {
    let dir = app.0.config.checkpoints_dir.clone();
    let infos = tokio::task::spawn_blocking(move || scan(&dir))
        .await
        .map_err(|e| ApiError::Internal(e.to_string()))??;
    Ok(Json(infos.into_iter().map(|(i, _)| i).collect()))
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateSession {
    pub checkpoint: String,
    /// Teacher checkpoint whose critic is streamed; defaults to the
    /// checkpoint itself, or for a student its recorded teacher.
    #[serde(default)]
    pub critic: Option<String>,
    #[serde(default)]
    pub beta: Option<f64>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub hz: Option<f64>,
    #[serde(default)]
    pub level: Option<usize>,
    #[serde(default)]
    pub auto_reset: bool,
}

fn resolve_critic(dir: &Path, ck: &Checkpoint, req: &CreateSession) -> Result<(String, Mlp), ApiError> {
    if let Some(name) = &req.critic {
        let t = load_checkpoint(dir, name)?;
        let critic = t
            .critic
            .ok_or_else(|| ApiError::Validation(format!("checkpoint {name:?} has no critic")))?;
        if t.metadata.task != ck.metadata.task {
            return Err(ApiError::Validation(format!("critic {name:?} is for a different task")));
        }
        return Ok((name.clone(), critic));
    }
    if let Some(critic) = &ck.critic {
        return Ok((req.checkpoint.clone(), critic.clone()));
    }
    let want = ck
        .metadata
        .teacher_sha256
        .as_deref()
        .ok_or_else(|| ApiError::Validation("checkpoint has no critic and no recorded teacher".into()))?;
    for (info, t) in scan(dir)? {
        if info.sha256 == want {
            if let Some(critic) = t.critic {
                return Ok((info.name, critic));
            }
        }
    }
    Err(ApiError::Validation(format!(
        "teacher {want} not found in the checkpoint directory; pass \"critic\""
    )))
}

async fn create_session(State(app): State<AppState>, Json(req): Json<CreateSession>) -> ApiResult<SessionStatus> {
    let cfg = app.0.config.clone();
    let hz = req.hz.unwrap_or(cfg.default_hz);
    if !(hz > 0.0 && hz <= cfg.max_hz) {
        return Err(ApiError::Validation(format!("hz must lie in (0, {}], got {hz}", cfg.max_hz)));
    }
    let id = app.0.next_id.fetch_add(1, Ordering::Relaxed);
    let seed = req.seed.unwrap_or(id);
    let built = {
        let req = req.clone();
        tokio::task::spawn_blocking(move || -> Result<(SessionCore, SessionStatus), ApiError> {
            let ck = load_checkpoint(&cfg.checkpoints_dir, &req.checkpoint)?;
            let metric = ck.metadata.metric;
            let beta = req.beta.unwrap_or(match metric {
                Metric::Cvar => 1.0,
                _ => 0.0,
            });
            check_beta(metric, beta).map_err(|e| ApiError::Validation(e.to_string()))?;
            let (critic_name, critic) = resolve_critic(&cfg.checkpoints_dir, &ck, &req)?;
            let want = obs_dims(&ck.metadata.env).critic;
            if critic.spec().input_dim() != want {
                return Err(ApiError::Validation(format!(
                    "critic expects {} inputs, environment provides {want}",
                    critic.spec().input_dim()
                )));
            }
            let task = ck.metadata.task;
            let level = req.level.unwrap_or(task.max_level());
            if level > task.max_level() {
                return Err(ApiError::Validation(format!("level {level} above maximum {}", task.max_level())));
            }
            let (lo, hi) = serve_range(metric);
            let status = SessionStatus {
                id,
                checkpoint: req.checkpoint.clone(),
                critic: critic_name,
                task: task.as_str().to_string(),
                kind: ck.kind,
                metric,
                beta_range: [lo, hi],
                beta,
                reference_betas: metric.reference_betas(),
                state: RunState::Paused,
                episode: 0,
                t: 0,
                hz,
                seed,
            };
            let core = SessionCore::new(id, ck, critic, beta, seed, level, cfg.histogram_bins)
                .map_err(|e| ApiError::Validation(e.to_string()))?;
            Ok((core, status))
        })
        .await
        .map_err(|e| ApiError::Internal(e.to_string()))?
    }?;
    let (core, mut status) = built;
    status.episode = core.episode;
    let (tx, rx) = mpsc::channel(64);
    let (frames, _) = broadcast::channel(256);
    let shared = Arc::new(SessionShared {
        status: Mutex::new(status.clone()),
        frames,
    });
    tokio::spawn(run_session(core, rx, shared.clone(), req.auto_reset));
    app.0.sessions.lock().expect("sessions lock").insert(
        id,
        SessionHandle {
            commands: tx,
            shared,
        },
    );
    tracing::info!(session = id, checkpoint = %req.checkpoint, "session created");
    Ok(Json(status))
}

async fn get_session(State(app): State<AppState>, UrlPath(id): UrlPath<u64>) -> ApiResult<SessionStatus> {
    let (_, shared) = app.handle(id)?;
    let st = shared.status.lock().expect("status lock").clone();
    Ok(Json(st))
}

async fn send(app: &AppState, id: u64, make: impl FnOnce(oneshot::Sender<Result<SessionStatus, String>>) -> Command) -> ApiResult<SessionStatus> {
    let (commands, _) = app.handle(id)?;
    let (reply, rx) = oneshot::channel();
    commands
        .send(make(reply))
        .await
        .map_err(|_| ApiError::Internal(format!("session {id} stopped")))?;
    let r = tokio::time::timeout(Duration::from_secs(10), rx)
        .await
        .map_err(|_| ApiError::Internal(format!("session {id} did not acknowledge")))?
        .map_err(|_| ApiError::Internal(format!("session {id} stopped")))?;
    r.map(Json).map_err(ApiError::Validation)
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct BetaBody {
    beta: f64,
}

async fn set_beta(State(app): State<AppState>, UrlPath(id): UrlPath<u64>, Json(body): Json<BetaBody>) -> ApiResult<SessionStatus> {
    send(&app, id, |r| Command::SetBeta(body.beta, r)).await
}

async fn pause(State(app): State<AppState>, UrlPath(id): UrlPath<u64>) -> ApiResult<SessionStatus> {
    send(&app, id, Command::Pause).await
}

async fn resume(State(app): State<AppState>, UrlPath(id): UrlPath<u64>) -> ApiResult<SessionStatus> {
    send(&app, id, Command::Resume).await
}

async fn reset(State(app): State<AppState>, UrlPath(id): UrlPath<u64>) -> ApiResult<SessionStatus> {
    send(&app, id, Command::Reset).await
}

async fn stream(State(app): State<AppState>, UrlPath(id): UrlPath<u64>, ws: WebSocketUpgrade) -> Result<Response, ApiError> {
    let (_, shared) = app.handle(id)?;
    let rx = shared.frames.subscribe();
    Ok(ws.on_upgrade(move |socket| forward(socket, rx, id)))
}

async fn forward(mut socket: WebSocket, mut rx: broadcast::Receiver<Arc<str>>, id: u64) {
    loop {
        tokio::select! {
            frame = rx.recv() => match frame {
                Ok(text) => {
                    if socket.send(Message::Text(text.as_ref().into())).await.is_err() {
                        break;
                    }
                }
                Err(broadcast::error::RecvError::Lagged(n)) => {
                    tracing::warn!(session = id, skipped = n, "slow websocket client");
                }
                Err(broadcast::error::RecvError::Closed) => break,
            },
            msg = socket.recv() => match msg {
                Some(Ok(Message::Close(_))) | None | Some(Err(_)) => break,
                Some(Ok(_)) => {}
            },
        }
    }
}
