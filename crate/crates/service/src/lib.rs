//! HTTP front end for registration sessions.
//!
//! Every mutation runs on the blocking pool while holding its session's
//! lock, then publishes a fresh [`wire::StateSnapshot`] before the lock is
//! released, so published revisions are strictly increasing. A per-session
//! task fires debounced refits and publishes their results the same way.

mod api;
pub mod config;
mod session;
pub mod wire;

use std::collections::HashMap;
use std::future::Future;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, RwLock};

use artireg::cloud::PointCloud;
use artireg::engine::{EngineError, EngineParams};
use artireg::model::ObjectModel;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::{Json, Router};
use thiserror::Error;
use tokio::net::TcpListener;
use tokio::sync::watch;

pub use config::ServiceConfig;
use session::SessionHandle;

/// Startup failures.
#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("bad configuration: {0}")]
    BadConfig(String),
    #[error("port {0} is already in use")]
    PortInUse(u16),
    #[error("I/O failure: {0}")]
    Io(#[from] std::io::Error),
}

/// Request failures, mapped onto HTTP status codes.
#[derive(Debug, Error)]
pub enum ApiError {
    #[error("unknown session {0}")]
    UnknownSession(u64),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error("expected revision {expected}, session is at {actual}")]
    StaleRevision { expected: u64, actual: u64 },
    #[error("sample timestamp {timestamp} is not newer than {last}")]
    StaleSample { timestamp: f64, last: f64 },
    #[error("{0}")]
    Validation(String),
    #[error("internal error: {0}")]
    Internal(String),
}

impl ApiError {
    fn status(&self) -> StatusCode {
        match self {
            Self::UnknownSession(_) | Self::Engine(EngineError::UnknownObject(_)) => StatusCode::NOT_FOUND,
            Self::StaleRevision { .. } | Self::StaleSample { .. } => StatusCode::CONFLICT,
            Self::Validation(_)
            | Self::Engine(
                EngineError::InvalidInput(_)
                | EngineError::StaticArticulationInput
                | EngineError::NoScenePointsNearSeed
                | EngineError::Fit(_),
            ) => StatusCode::UNPROCESSABLE_ENTITY,
            Self::Engine(_) | Self::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }

    fn code(&self) -> &'static str {
        match self {
            Self::UnknownSession(_) => "unknown_session",
            Self::Engine(EngineError::UnknownObject(_)) => "unknown_object",
            Self::Engine(EngineError::NoScenePointsNearSeed) => "no_scene_points_near_seed",
            Self::Engine(EngineError::StaticArticulationInput) => "static_articulation_input",
            Self::Engine(EngineError::InvalidInput(_)) | Self::Validation(_) => "invalid_input",
            Self::Engine(EngineError::Fit(_)) => "fit_failed",
            Self::StaleRevision { .. } => "stale_revision",
            Self::StaleSample { .. } => "stale_sample",
            Self::Engine(_) | Self::Internal(_) => "internal",
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = wire::ErrorBody {
            error: self.code().into(),
            message: self.to_string(),
        };
        (self.status(), Json(body)).into_response()
    }
}

/// Inputs shared by every session plus the live sessions.
pub struct AppState {
    scene: Arc<PointCloud>,
    models: Arc<Vec<ObjectModel>>,
    params: EngineParams,
    sessions: RwLock<HashMap<u64, Arc<SessionHandle>>>,
    next_id: AtomicU64,
    shutdown: watch::Sender<bool>,
}

impl AppState {
    pub fn new(scene: PointCloud, models: Vec<ObjectModel>, params: EngineParams) -> Result<Arc<Self>, ServiceError> {
        if scene.is_empty() {
            return Err(ServiceError::BadConfig("scene has no points".into()));
        }
        if models.is_empty() {
            return Err(ServiceError::BadConfig("no models".into()));
        }
        params.validate().map_err(|e| ServiceError::BadConfig(e.to_string()))?;
        Ok(Arc::new(Self {
            scene: Arc::new(scene),
            models: Arc::new(models),
            params,
            sessions: RwLock::new(HashMap::new()),
            next_id: AtomicU64::new(1),
            shutdown: watch::channel(false).0,
        }))
    }

    pub fn from_config(cfg: &ServiceConfig) -> Result<Arc<Self>, ServiceError> {
        let (scene, models) = cfg.load_inputs()?;
        Self::new(scene, models, cfg.engine.clone())
    }

    fn session(&self, id: u64) -> Result<Arc<SessionHandle>, ApiError> {
        self.sessions
            .read()
            .expect("session table lock")
            .get(&id)
            .cloned()
            .ok_or(ApiError::UnknownSession(id))
    }

    fn insert(&self, handle: Arc<SessionHandle>) {
        self.sessions.write().expect("session table lock").insert(handle.id, handle);
    }

    fn allocate_id(&self) -> u64 {
        self.next_id.fetch_add(1, Ordering::Relaxed)
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    api::router(state)
}

/// Binds `host:port`; port 0 picks a free port.
pub async fn listen(host: &str, port: u16) -> Result<TcpListener, ServiceError> {
    TcpListener::bind((host, port)).await.map_err(|e| match e.kind() {
        std::io::ErrorKind::AddrInUse => ServiceError::PortInUse(port),
        _ => ServiceError::Io(e),
    })
}

/// Serves until `shutdown` resolves, then closes event streams and waits
/// for in-flight requests.
pub async fn run(
    listener: TcpListener,
    state: Arc<AppState>,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> Result<(), ServiceError> {
    let app = router(Arc::clone(&state));
    let signal = async move {
        shutdown.await;
        state.shutdown.send_replace(true);
    };
    axum::serve(listener, app).with_graceful_shutdown(signal).await?;
    Ok(())
}

/// A service running on a background task, for tests and embedding.
pub struct RunningService {
    pub addr: SocketAddr,
    stop: Option<tokio::sync::oneshot::Sender<()>>,
    task: tokio::task::JoinHandle<Result<(), ServiceError>>,
}

impl RunningService {
    pub async fn start(state: Arc<AppState>, host: &str, port: u16) -> Result<Self, ServiceError> {
        let listener = listen(host, port).await?;
        let addr = listener.local_addr()?;
        let (tx, rx) = tokio::sync::oneshot::channel();
        let task = tokio::spawn(run(listener, state, async {
            let _ = rx.await;
        }));
        Ok(Self {
            addr,
            stop: Some(tx),
            task,
        })
    }

    pub async fn stop(mut self) -> Result<(), ServiceError> {
        if let Some(tx) = self.stop.take() {
            let _ = tx.send(());
        }
        self.task
            .await
            .map_err(|e| ServiceError::Io(std::io::Error::other(e.to_string())))?
    }
}
