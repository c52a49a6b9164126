//! JSON-over-HTTP annotation service: register images, predict a contour
//! from a box, refine it around pinned vertices and export the session as
//! a dataset manifest.

pub mod session;

use std::collections::{BTreeMap, HashMap};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, MutexGuard, RwLock};
use std::time::Duration;

use axum::extract::{DefaultBodyLimit, Multipart, Path as UrlPath, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post, put};
use axum::{Json, Router};
use boxsnake::geometry::{BBox, Contour};
use boxsnake::image::Image;
use boxsnake::model::{Model, ModelError};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use session::{Edit, Session, SessionInstance, Vertices};
use session::{to_pairs, to_points};

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("{0}")]
    NotFound(String),
    #[error("{0}")]
    Invalid(String),
    #[error("{0}")]
    Conflict(String),
    #[error("{0}")]
    BadRequest(String),
    #[error("{0}")]
    Internal(String),
}

impl ServiceError {
    pub fn status(&self) -> StatusCode {
        match self {
            ServiceError::NotFound(_) => StatusCode::NOT_FOUND,
            ServiceError::Invalid(_) => StatusCode::UNPROCESSABLE_ENTITY,
            ServiceError::Conflict(_) => StatusCode::CONFLICT,
            ServiceError::BadRequest(_) => StatusCode::BAD_REQUEST,
            ServiceError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        (self.status(), Json(ErrorBody { error: self.to_string() })).into_response()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct PredictRequest {
    pub image_id: u64,
    pub bbox: [f64; 4],
    /// Search scale override.
    #[serde(default)]
    pub s: Option<f64>,
    /// Vertex count override.
    #[serde(default, rename = "K", alias = "k")]
    pub k: Option<usize>,
    /// Session to add the instance to; the image's default session otherwise.
    #[serde(default)]
    pub session_id: Option<String>,
    #[serde(default)]
    pub category: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct PredictResponse {
    pub vertices: Vertices,
    pub session_instance_id: String,
    pub session_id: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct RefineRequest {
    pub session_instance_id: String,
    pub vertices: Vertices,
    pub pinned: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefineResponse {
    pub vertices: Vertices,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ImageInfo {
    pub image_id: u64,
    pub width: usize,
    pub height: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct NewSessionRequest {
    pub image_id: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SessionCreated {
    pub session_id: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Health {
    pub status: String,
    #[serde(rename = "K")]
    pub k: usize,
    pub s: f64,
    pub parameters: usize,
    pub images: usize,
    pub sessions: usize,
}

/// Everything a snapshot restores. Images are not included; clients
/// register them again after a restart.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SessionSnapshot {
    pub next_session: u64,
    pub next_image: u64,
    pub default_sessions: BTreeMap<u64, String>,
    pub sessions: Vec<Session>,
}

#[derive(Default)]
struct Registry {
    next_session: u64,
    next_image: u64,
    default_sessions: BTreeMap<u64, String>,
    sessions: HashMap<String, Arc<Mutex<Session>>>,
}

/// Shared service state: read-only weights, registered images and sessions.
pub struct AppState {
    model: Arc<Model<f32>>,
    images: RwLock<HashMap<u64, Arc<Image>>>,
    registry: Mutex<Registry>,
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|e| e.into_inner())
}

fn parse_box(b: [f64; 4]) -> Result<BBox, ServiceError> {
    let [x0, y0, x1, y1] = b;
    BBox::new(x0, y0, x1, y1).map_err(|e| ServiceError::Invalid(format!("invalid bbox: {e}")))
}

fn model_error(e: ModelError) -> ServiceError {
    match e {
        ModelError::BoxOutsideImage { .. } | ModelError::Geometry(_) => ServiceError::Invalid(e.to_string()),
        ModelError::VertexCount { .. } => ServiceError::Conflict(e.to_string()),
        other => ServiceError::Internal(other.to_string()),
    }
}

impl AppState {
    pub fn new(model: Model<f32>) -> Self {
        AppState {
            model: Arc::new(model),
            images: RwLock::new(HashMap::new()),
            registry: Mutex::new(Registry { next_session: 1, next_image: 1, ..Default::default() }),
        }
    }

    pub fn model(&self) -> &Model<f32> {
        &self.model
    }

    /// Registers `img` under `id`, or under the next free id.
    pub fn register_image(&self, id: Option<u64>, img: Image) -> ImageInfo {
        let mut reg = lock(&self.registry);
        let mut images = self.images.write().unwrap_or_else(|e| e.into_inner());
        let id = id.unwrap_or_else(|| {
            while images.contains_key(&reg.next_image) {
                reg.next_image += 1;
            }
            reg.next_image
        });
        reg.next_image = reg.next_image.max(id + 1);
        let info = ImageInfo { image_id: id, width: img.width(), height: img.height() };
        images.insert(id, Arc::new(img));
        info
    }

    pub fn image(&self, id: u64) -> Result<Arc<Image>, ServiceError> {
        let images = self.images.read().unwrap_or_else(|e| e.into_inner());
        images.get(&id).cloned().ok_or_else(|| ServiceError::NotFound(format!("unknown image {id}")))
    }

    pub fn create_session(&self, image_id: u64) -> Result<String, ServiceError> {
        let img = self.image(image_id)?;
        let mut reg = lock(&self.registry);
        Ok(Self::insert_session(&mut reg, image_id, &img))
    }

    fn insert_session(reg: &mut Registry, image_id: u64, img: &Image) -> String {
        let id = format!("s{}", reg.next_session);
        reg.next_session += 1;
        reg.sessions.insert(id.clone(), Arc::new(Mutex::new(Session::new(id.clone(), image_id, img.width(), img.height()))));
        id
    }

    fn session_handle(&self, id: &str) -> Result<Arc<Mutex<Session>>, ServiceError> {
        lock(&self.registry).sessions.get(id).cloned().ok_or_else(|| ServiceError::NotFound(format!("unknown session {id}")))
    }

    pub fn session(&self, id: &str) -> Result<Session, ServiceError> {
        let handle = self.session_handle(id)?;
        let session = lock(&handle).clone();
        Ok(session)
    }

    /// Model for the requested overrides; weights are shared, only the
    /// configuration changes.
    fn model_for(&self, s: Option<f64>, k: Option<usize>) -> Result<Arc<Model<f32>>, ServiceError> {
        let base = &self.model.config;
        if s.is_none_or(|s| s == base.search_scale) && k.is_none_or(|k| k == base.head.k) {
            return Ok(Arc::clone(&self.model));
        }
        let mut cfg = base.clone();
        cfg.search_scale = s.unwrap_or(cfg.search_scale);
        cfg.head.k = k.unwrap_or(cfg.head.k);
        cfg.validate().map_err(|e| ServiceError::Invalid(e.to_string()))?;
        if cfg.layout() != base.layout() {
            return Err(ServiceError::Invalid(format!(
                "search scale {} changes the target window of the loaded weights",
                cfg.search_scale
            )));
        }
        Ok(Arc::new(Model { config: cfg, params: self.model.params.clone() }))
    }

    /// Predicts a contour and stores it in the requested (or default) session.
    pub fn predict(&self, req: &PredictRequest) -> Result<PredictResponse, ServiceError> {
        let img = self.image(req.image_id)?;
        let b = parse_box(req.bbox)?;
        let model = self.model_for(req.s, req.k)?;
        let handle = {
            let mut reg = lock(&self.registry);
            match &req.session_id {
                Some(id) => reg.sessions.get(id).cloned().ok_or_else(|| ServiceError::NotFound(format!("unknown session {id}")))?,
                None => {
                    let id = match reg.default_sessions.get(&req.image_id) {
                        Some(id) => id.clone(),
                        None => {
                            let id = Self::insert_session(&mut reg, req.image_id, &img);
                            reg.default_sessions.insert(req.image_id, id.clone());
                            id
                        }
                    };
                    Arc::clone(&reg.sessions[&id])
                }
            }
        };
        let mut session = lock(&handle);
        if session.image_id != req.image_id {
            return Err(ServiceError::Invalid(format!(
                "session {} belongs to image {}",
                session.session_id, session.image_id
            )));
        }
        let contour = model.predict_contour(&img, &b).map_err(model_error)?;
        let vertices = to_pairs(&contour);
        let instance_id = session.next_instance_id();
        session.apply(Edit::Predict {
            instance_id: instance_id.clone(),
            category: req.category.clone().unwrap_or_else(|| "object".into()),
            bbox: req.bbox,
            vertices: vertices.clone(),
        });
        Ok(PredictResponse { vertices, session_instance_id: instance_id, session_id: session.session_id.clone() })
    }

    /// Refines an instance from the submitted vertices; pinned ones come back unchanged.
    pub fn refine(&self, req: &RefineRequest) -> Result<RefineResponse, ServiceError> {
        let session_id = req.session_instance_id.rsplit_once("-i").map(|(s, _)| s).unwrap_or("");
        let unknown = || ServiceError::NotFound(format!("unknown instance {}", req.session_instance_id));
        let handle = self.session_handle(session_id).map_err(|_| unknown())?;
        let mut session = lock(&handle);
        let inst = session.instance(&req.session_instance_id).ok_or_else(unknown)?;
        let k = inst.k();
        if req.vertices.len() != k || req.pinned.len() != k {
            return Err(ServiceError::Conflict(format!(
                "instance has K = {k}, got {} vertices and {} pinned flags",
                req.vertices.len(),
                req.pinned.len()
            )));
        }
        let b = inst.bbox().map_err(|e| ServiceError::Internal(e.to_string()))?;
        let img = self.image(session.image_id)?;
        let model = self.model_for(None, Some(k))?;
        let prior = Contour::from_ring(to_points(&req.vertices)).map_err(|e| ServiceError::Invalid(format!("invalid vertices: {e}")))?;
        let refined = model.refine_with_edits(&img, &b, &prior, &req.pinned).map_err(model_error)?;
        let vertices = to_pairs(&refined);
        session.apply(Edit::Refine {
            instance_id: req.session_instance_id.clone(),
            pinned: req.pinned.clone(),
            vertices: vertices.clone(),
        });
        Ok(RefineResponse { vertices })
    }

    /// Manifest JSON of the session's current contours.
    pub fn export(&self, session_id: &str) -> Result<String, ServiceError> {
        let session = self.session(session_id)?;
        let ds = session.export().map_err(|e| ServiceError::Internal(format!("cannot export: {e}")))?;
        Ok(ds.to_json())
    }

    pub fn health(&self) -> Health {
        let images = self.images.read().unwrap_or_else(|e| e.into_inner()).len();
        Health {
            status: "ok".into(),
            k: self.model.config.head.k,
            s: self.model.config.search_scale,
            parameters: self.model.param_count(),
            images,
            sessions: lock(&self.registry).sessions.len(),
        }
    }

    pub fn snapshot(&self) -> SessionSnapshot {
        let reg = lock(&self.registry);
        let mut sessions: Vec<Session> = reg.sessions.values().map(|s| lock(s).clone()).collect();
        sessions.sort_by_key(|s| s.session_id.trim_start_matches('s').parse::<u64>().unwrap_or(u64::MAX));
        SessionSnapshot {
            next_session: reg.next_session,
            next_image: reg.next_image,
            default_sessions: reg.default_sessions.clone(),
            sessions,
        }
    }

    /// Replaces every session with those of `snap`.
    pub fn restore(&self, snap: SessionSnapshot) {
        let mut reg = lock(&self.registry);
        reg.next_session = snap.next_session;
        reg.next_image = snap.next_image;
        reg.default_sessions = snap.default_sessions;
        reg.sessions = snap.sessions.into_iter().map(|s| (s.session_id.clone(), Arc::new(Mutex::new(s)))).collect();
    }

    /// Writes the snapshot through a temporary file and a rename.
    pub fn save_snapshot(&self, path: &Path) -> std::io::Result<()> {
        let json = serde_json::to_vec_pretty(&self.snapshot()).map_err(std::io::Error::other)?;
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, json)?;
        std::fs::rename(tmp, path)
    }

    pub fn load_snapshot(&self, path: &Path) -> std::io::Result<()> {
        let snap = serde_json::from_slice(&std::fs::read(path)?).map_err(std::io::Error::other)?;
        self.restore(snap);
        Ok(())
    }
}

type Shared = Arc<AppState>;

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ServiceError> + Send + 'static) -> Result<T, ServiceError> {
    tokio::task::spawn_blocking(f).await.map_err(|e| ServiceError::Internal(e.to_string()))?
}

fn json_body<T: serde::de::DeserializeOwned>(body: &[u8]) -> Result<T, ServiceError> {
    serde_json::from_slice(body).map_err(|e| ServiceError::BadRequest(format!("invalid request body: {e}")))
}

async fn health(State(st): State<Shared>) -> Json<Health> {
    Json(st.health())
}

async fn put_image(State(st): State<Shared>, mut form: Multipart) -> Result<Json<ImageInfo>, ServiceError> {
    let bad = |e: axum::extract::multipart::MultipartError| ServiceError::BadRequest(e.to_string());
    let (mut id, mut png) = (None, None);
    while let Some(field) = form.next_field().await.map_err(bad)? {
        match field.name() {
            Some("id") => {
                let text = field.text().await.map_err(bad)?;
                id = Some(text.trim().parse::<u64>().map_err(|_| ServiceError::BadRequest(format!("invalid image id `{text}`")))?);
            }
            _ => png = Some(field.bytes().await.map_err(bad)?),
        }
    }
    let png = png.ok_or_else(|| ServiceError::BadRequest("multipart body has no image part".into()))?;
    let img = Image::decode_png(&png).map_err(|e| ServiceError::Invalid(format!("not a PNG image: {e}")))?;
    Ok(Json(st.register_image(id, img)))
}

async fn get_image(State(st): State<Shared>, UrlPath(id): UrlPath<u64>) -> Result<Response, ServiceError> {
    let img = st.image(id)?;
    let png = blocking(move || img.encode_png().map_err(|e| ServiceError::Internal(e.to_string()))).await?;
    Ok(([(header::CONTENT_TYPE, "image/png")], png).into_response())
}

async fn post_session(State(st): State<Shared>, body: axum::body::Bytes) -> Result<Json<SessionCreated>, ServiceError> {
    let req: NewSessionRequest = json_body(&body)?;
    Ok(Json(SessionCreated { session_id: st.create_session(req.image_id)? }))
}

async fn get_session(State(st): State<Shared>, UrlPath(id): UrlPath<String>) -> Result<Json<Session>, ServiceError> {
    Ok(Json(st.session(&id)?))
}

async fn predict(State(st): State<Shared>, body: axum::body::Bytes) -> Result<Json<PredictResponse>, ServiceError> {
    let req: PredictRequest = json_body(&body)?;
    Ok(Json(blocking(move || st.predict(&req)).await?))
}

async fn refine(State(st): State<Shared>, body: axum::body::Bytes) -> Result<Json<RefineResponse>, ServiceError> {
    let req: RefineRequest = json_body(&body)?;
    Ok(Json(blocking(move || st.refine(&req)).await?))
}

async fn export(State(st): State<Shared>, UrlPath(id): UrlPath<String>) -> Result<Response, ServiceError> {
    let json = st.export(&id)?;
    Ok(([(header::CONTENT_TYPE, "application/json")], json).into_response())
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/images", put(put_image))
        .route("/images/{id}", get(get_image))
        .route("/sessions", post(post_session))
        .route("/sessions/{id}", get(get_session))
        .route("/predict", post(predict))
        .route("/refine", post(refine))
        .route("/export/{id}", get(export))
        .layer(DefaultBodyLimit::max(64 << 20))
        .with_state(state)
}

/// Periodic snapshot target.
#[derive(Clone, Debug)]
pub struct SnapshotConfig {
    pub path: PathBuf,
    pub every: Duration,
}

/// Serves until Ctrl-C. With a snapshot configured, sessions are restored
/// from it at start, saved periodically and saved once more on shutdown.
pub async fn serve(addr: SocketAddr, state: Arc<AppState>, snapshot: Option<SnapshotConfig>) -> std::io::Result<()> {
    if let Some(snap) = &snapshot {
        if snap.path.exists() {
            state.load_snapshot(&snap.path)?;
            log::info!("restored sessions from {}", snap.path.display());
        }
        let (st, snap) = (Arc::clone(&state), snap.clone());
        tokio::spawn(async move {
            let mut tick = tokio::time::interval(snap.every);
            tick.tick().await;
            loop {
                tick.tick().await;
                if let Err(e) = st.save_snapshot(&snap.path) {
                    log::warn!("snapshot to {} failed: {e}", snap.path.display());
                }
            }
        });
    }
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(Arc::clone(&state)))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    if let Some(snap) = &snapshot {
        state.save_snapshot(&snap.path)?;
    }
    Ok(())
}
