//! HTTP API for prediction and interrater studies.
//!
//! Layout of the data directory:
//!
//! ```text
//! models/<model_id>/      saved TrainedModel directories
//! sessions/<session_id>/  session plan and label log
//! ```

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Multipart, Path as UrlPath, Query, Request, State};
use axum::http::{header, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::Utc;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::dataset::DatasetManifest;
use crate::error::{Error, Result};
use crate::interrater::{
    build_rating_matrix, create_session, fleiss_kappa, select_study_images, KappaResult, LabelAck, NextBatch,
    RaterId, RaterProgress, StoredSession, DEFAULT_BATCH_SIZE,
};
use crate::labelspec::ScoringMethod;
use crate::trainer::{Prediction, TrainedModel};

pub const DEFAULT_PORT: u16 = 8080;
const MAX_UPLOAD_BYTES: usize = 32 * 1024 * 1024;

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub host: String,
    pub port: u16,
    pub data_dir: PathBuf,
    pub token: Option<String>,
}

impl ServiceConfig {
    /// Reads `SODKIT_DATA_DIR`, `SODKIT_PORT` and `SODKIT_TOKEN`.
    pub fn from_env() -> Result<Self> {
        let port = match std::env::var("SODKIT_PORT") {
            Ok(p) => p
                .parse()
                .map_err(|_| Error::InvalidConfig(format!("SODKIT_PORT `{p}` is not a port number")))?,
            Err(_) => DEFAULT_PORT,
        };
        Ok(ServiceConfig {
            host: "127.0.0.1".into(),
            port,
            data_dir: std::env::var_os("SODKIT_DATA_DIR")
                .map(PathBuf::from)
                .unwrap_or_else(|| PathBuf::from("sodkit-data")),
            token: std::env::var("SODKIT_TOKEN").ok().filter(|t| !t.is_empty()),
        })
    }
}

type SharedSession = Arc<Mutex<StoredSession>>;

pub struct AppState {
    data_dir: PathBuf,
    token: Option<String>,
    models: RwLock<HashMap<String, Arc<TrainedModel>>>,
    sessions: Mutex<HashMap<String, SharedSession>>,
    manifests: Mutex<HashMap<PathBuf, Arc<DatasetManifest>>>,
}

impl AppState {
    pub fn new(data_dir: impl Into<PathBuf>, token: Option<String>) -> Arc<Self> {
        Arc::new(AppState {
            data_dir: data_dir.into(),
            token,
            models: RwLock::default(),
            sessions: Mutex::default(),
            manifests: Mutex::default(),
        })
    }

    pub fn data_dir(&self) -> &Path {
        &self.data_dir
    }

    fn model(&self, id: &str) -> Result<Arc<TrainedModel>> {
        if let Some(m) = self.models.read().expect("model cache poisoned").get(id) {
            return Ok(m.clone());
        }
        let valid = !id.is_empty()
            && !id.starts_with('.')
            && id.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c));
        let dir = self.data_dir.join("models").join(id);
        if !valid || !dir.is_dir() {
            return Err(Error::NotFound(format!("model {id}")));
        }
        let model = Arc::new(TrainedModel::load(&dir)?);
        self.models
            .write()
            .expect("model cache poisoned")
            .insert(id.to_string(), model.clone());
        Ok(model)
    }

    fn session(&self, id: &str) -> Result<SharedSession> {
        let mut sessions = self.sessions.lock().expect("session table poisoned");
        if let Some(s) = sessions.get(id) {
            return Ok(s.clone());
        }
        let s = Arc::new(Mutex::new(StoredSession::open(&self.data_dir, id)?));
        sessions.insert(id.to_string(), s.clone());
        Ok(s)
    }

    fn manifest(&self, path: &Path) -> Result<Arc<DatasetManifest>> {
        let mut cache = self.manifests.lock().expect("manifest cache poisoned");
        if let Some(m) = cache.get(path) {
            return Ok(m.clone());
        }
        let m = Arc::new(DatasetManifest::read(path)?);
        cache.insert(path.to_path_buf(), m.clone());
        Ok(m)
    }
}

#[derive(Debug)]
pub struct ApiError(Error);

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        ApiError(e)
    }
}

impl ApiError {
    fn status_and_reason(&self) -> (StatusCode, &'static str) {
        match &self.0 {
            Error::NotFound(_) => (StatusCode::NOT_FOUND, "not_found"),
            Error::UnknownRater(_) => (StatusCode::NOT_FOUND, "unknown_rater"),
            Error::ProtocolViolation(_) => (StatusCode::CONFLICT, "not_in_current_batch"),
            Error::DuplicateLabel { .. } => (StatusCode::CONFLICT, "duplicate_label"),
            Error::Incomplete { .. } => (StatusCode::CONFLICT, "raters_incomplete"),
            Error::DegenerateAgreement => (StatusCode::CONFLICT, "degenerate_agreement"),
            Error::Decode { .. } => (StatusCode::BAD_REQUEST, "undecodable_image"),
            e if e.is_validation() => (StatusCode::BAD_REQUEST, "invalid_request"),
            _ => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, reason) = self.status_and_reason();
        let mut body = json!({ "error": reason, "message": self.0.to_string() });
        if let Error::Incomplete { rater, method, missing } = &self.0 {
            body["rater"] = json!(rater);
            body["method"] = json!(method);
            body["missing"] = json!(missing);
        }
        if status.is_server_error() {
            log::error!("{}", self.0);
        }
        (status, Json(body)).into_response()
    }
}

type ApiResult<T> = std::result::Result<T, ApiError>;

fn bad_request(msg: impl Into<String>) -> ApiError {
    ApiError(Error::Validation(msg.into()))
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError(Error::Validation(format!("worker failed: {e}"))))?
        .map_err(ApiError)
}

async fn require_token(State(state): State<Arc<AppState>>, req: Request, next: Next) -> Response {
    let Some(expected) = state.token.as_deref() else {
        return next.run(req).await;
    };
    let bearer = req
        .headers()
        .get(header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "));
    // Image URLs are embedded in <img> tags, which cannot send headers.
    let query_token = req.uri().path().starts_with("/images/").then(|| {
        req.uri()
            .query()
            .unwrap_or("")
            .split('&')
            .find_map(|kv| kv.strip_prefix("token="))
    });
    if bearer == Some(expected) || query_token.flatten() == Some(expected) {
        next.run(req).await
    } else {
        (
            StatusCode::UNAUTHORIZED,
            [(header::WWW_AUTHENTICATE, "Bearer")],
            Json(json!({ "error": "unauthorized", "message": "missing or invalid bearer token" })),
        )
            .into_response()
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    let protected = Router::new()
        .route("/predict", post(predict))
        .route("/sessions", post(create))
        .route("/sessions/{id}", get(session_view))
        .route("/sessions/{id}/next-batch", get(next_batch))
        .route("/sessions/{id}/labels", post(submit_label))
        .route("/sessions/{id}/agreement", get(agreement))
        .route("/images/{image_id}", get(image))
        .layer(middleware::from_fn_with_state(state.clone(), require_token));
    Router::new()
        .route("/health", get(health))
        .merge(protected)
        .layer(DefaultBodyLimit::max(MAX_UPLOAD_BYTES))
        .with_state(state)
}

/// Binds, serves until ctrl-c or SIGTERM, then drains in-flight requests.
/// Labels are synced to disk before they are acknowledged, so shutdown has
/// nothing left to flush.
pub async fn serve(config: ServiceConfig) -> Result<()> {
    std::fs::create_dir_all(&config.data_dir).map_err(|e| Error::io(&config.data_dir, e))?;
    let addr = format!("{}:{}", config.host, config.port);
    let listener = tokio::net::TcpListener::bind(&addr)
        .await
        .map_err(|e| Error::InvalidConfig(format!("cannot bind {addr}: {e}")))?;
    let local: SocketAddr = listener.local_addr().map_err(|e| Error::io(&config.data_dir, e))?;
    log::info!("listening on http://{local} (data dir {})", config.data_dir.display());
    let app = router(AppState::new(config.data_dir.clone(), config.token.clone()));
    axum::serve(listener, app)
        .with_graceful_shutdown(shutdown_signal())
        .await
        .map_err(|e| Error::io(&config.data_dir, e))
}

async fn shutdown_signal() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    let term = async {
        match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(mut s) => {
                s.recv().await;
            }
            Err(_) => std::future::pending().await,
        }
    };
    #[cfg(not(unix))]
    let term = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {},
        _ = term => {},
    }
    log::info!("shutting down");
}

async fn health() -> Json<serde_json::Value> {
    Json(json!({ "status": "ok", "version": env!("CARGO_PKG_VERSION") }))
}

#[derive(Debug, Deserialize)]
struct ModelQuery {
    model: String,
}

async fn predict(
    State(state): State<Arc<AppState>>,
    Query(q): Query<ModelQuery>,
    mut multipart: Multipart,
) -> ApiResult<Json<Prediction>> {
    let model = state.model(&q.model)?;
    let mut bytes: Option<Bytes> = None;
    while let Some(field) = multipart
        .next_field()
        .await
        .map_err(|e| bad_request(format!("malformed multipart body: {e}")))?
    {
        if field.name() == Some("image") || (bytes.is_none() && field.file_name().is_some()) {
            bytes = Some(
                field
                    .bytes()
                    .await
                    .map_err(|e| bad_request(format!("cannot read upload: {e}")))?,
            );
        }
    }
    let bytes = bytes.ok_or_else(|| bad_request("no `image` field in upload"))?;
    Ok(Json(blocking(move || model.predict_bytes(&bytes)).await?))
}

#[derive(Debug, Deserialize)]
pub struct CreateSessionRequest {
    pub session_id: String,
    pub raters: Vec<RaterId>,
    #[serde(default)]
    pub image_ids: Option<Vec<String>>,
    /// Manifest the study images are drawn from and served out of.
    #[serde(default)]
    pub manifest: Option<PathBuf>,
    /// Number of images to sample from `manifest`; all eligible when absent.
    #[serde(default)]
    pub images: Option<usize>,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_methods")]
    pub methods: Vec<ScoringMethod>,
    #[serde(default)]
    pub seed: u64,
}

fn default_batch_size() -> usize {
    DEFAULT_BATCH_SIZE
}

fn default_methods() -> Vec<ScoringMethod> {
    ScoringMethod::ALL.to_vec()
}

/// Creates and persists a session from an API request.
pub fn create_stored_session(data_dir: &Path, req: CreateSessionRequest) -> Result<StoredSession> {
    let manifest = req
        .manifest
        .as_deref()
        .map(|p| p.canonicalize().map_err(|e| Error::io(p, e)))
        .transpose()?;
    let image_ids = match (&req.image_ids, &manifest) {
        (Some(ids), _) => ids.clone(),
        (None, Some(path)) => select_study_images(&DatasetManifest::read(path)?, req.images, req.seed)?,
        (None, None) => return Err(Error::Validation("either image_ids or manifest is required".into())),
    };
    let mut session = create_session(req.session_id, &image_ids, req.batch_size, &req.methods, req.raters, req.seed)?;
    session.manifest = manifest;
    StoredSession::create(data_dir, session)
}

async fn create(
    State(state): State<Arc<AppState>>,
    Json(req): Json<CreateSessionRequest>,
) -> ApiResult<(StatusCode, Json<ApiSessionView>)> {
    let data_dir = state.data_dir.clone();
    let stored = blocking(move || create_stored_session(&data_dir, req)).await?;
    let view = ApiSessionView::of(&stored)?;
    state
        .sessions
        .lock()
        .expect("session table poisoned")
        .insert(view.session_id.clone(), Arc::new(Mutex::new(stored)));
    Ok((StatusCode::CREATED, Json(view)))
}

/// Read-only summary of a session and every rater's progress.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApiSessionView {
    pub session_id: String,
    pub methods: Vec<ScoringMethod>,
    pub starting_method: ScoringMethod,
    pub batch_size: usize,
    pub images: usize,
    pub total_batches: usize,
    pub labels: usize,
    pub raters: Vec<RaterProgress>,
}

impl ApiSessionView {
    pub fn of(stored: &StoredSession) -> Result<Self> {
        let s = stored.session();
        Ok(ApiSessionView {
            session_id: s.session_id.clone(),
            methods: s.methods.clone(),
            starting_method: s.starting_method,
            batch_size: s.batch_size,
            images: s.image_ids.len(),
            total_batches: s.schedule.len(),
            labels: s.label_count(),
            raters: s
                .raters
                .iter()
                .map(|r| s.progress(&r.id))
                .collect::<Result<_>>()?,
        })
    }
}

async fn session_view(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
) -> ApiResult<Json<ApiSessionView>> {
    let s = state.session(&id)?;
    let guard = s.lock().expect("session poisoned");
    Ok(Json(ApiSessionView::of(&guard)?))
}

#[derive(Debug, Deserialize)]
struct RaterQuery {
    rater: String,
}

async fn next_batch(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<RaterQuery>,
) -> ApiResult<Json<NextBatch>> {
    let s = state.session(&id)?;
    let guard = s.lock().expect("session poisoned");
    Ok(Json(guard.session().next_batch(&q.rater)?))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SubmitLabel {
    pub rater: String,
    pub image_id: String,
    pub method: ScoringMethod,
    pub label: String,
}

async fn submit_label(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    Json(req): Json<SubmitLabel>,
) -> ApiResult<Json<LabelAck>> {
    let s = state.session(&id)?;
    let ack = blocking(move || {
        let mut guard = s.lock().expect("session poisoned");
        guard.record_label(&req.rater, &req.image_id, req.method, &req.label, Utc::now())
    })
    .await?;
    Ok(Json(ack))
}

#[derive(Debug, Deserialize)]
struct AgreementQuery {
    method: ScoringMethod,
    raters: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementResponse {
    pub session_id: String,
    pub method: ScoringMethod,
    pub raters: Vec<String>,
    #[serde(flatten)]
    pub result: KappaResult,
}

async fn agreement(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<AgreementQuery>,
) -> ApiResult<Json<AgreementResponse>> {
    let raters: Vec<String> = q
        .raters
        .split(',')
        .map(str::trim)
        .filter(|r| !r.is_empty())
        .map(String::from)
        .collect();
    let s = state.session(&id)?;
    let guard = s.lock().expect("session poisoned");
    let result = fleiss_kappa(&build_rating_matrix(guard.session(), &raters, q.method)?)?;
    Ok(Json(AgreementResponse {
        session_id: id,
        method: q.method,
        raters,
        result,
    }))
}

fn content_type(path: &Path) -> &'static str {
    match path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .as_deref()
    {
        Some("png") => "image/png",
        Some("jpg" | "jpeg") => "image/jpeg",
        _ => "application/octet-stream",
    }
}

#[derive(Debug, Deserialize)]
struct ImageQuery {
    session: Option<String>,
}

/// Serves the bytes of an image from the manifest of a session that contains
/// it. `?session=` narrows the search to one session.
async fn image(
    State(state): State<Arc<AppState>>,
    UrlPath(image_id): UrlPath<String>,
    Query(q): Query<ImageQuery>,
) -> ApiResult<Response> {
    let ids = match q.session {
        Some(s) => vec![s],
        None => crate::interrater::list_sessions(&state.data_dir)?,
    };
    for sid in ids {
        let manifest_path = {
            let s = state.session(&sid)?;
            let guard = s.lock().expect("session poisoned");
            let session = guard.session();
            if !session.image_ids.contains(&image_id) {
                continue;
            }
            match &session.manifest {
                Some(p) => p.clone(),
                None => continue,
            }
        };
        let manifest = state.manifest(&manifest_path)?;
        if let Some(record) = manifest.get(&image_id) {
            let path = manifest.resolve_uri(record);
            let bytes = tokio::fs::read(&path).await.map_err(|e| Error::io(&path, e))?;
            return Ok(([(header::CONTENT_TYPE, content_type(&path))], bytes).into_response());
        }
    }
    Err(ApiError(Error::NotFound(format!("image {image_id}"))))
}
