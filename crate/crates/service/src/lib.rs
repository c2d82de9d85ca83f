//! HTTP service for the descriptor editing loop: extract descriptors from an
//! upload into a server-side session, edit them, and reconstruct from the
//! edited bundle with a read-only model.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use axum::body::Bytes;
use axum::extract::rejection::BytesRejection;
use axum::extract::{DefaultBodyLimit, Path, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use candle_core::DType;
use image::imageops::FilterType;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::sync::Mutex as AsyncMutex;

use trisect_core::descriptors::preview::{edge_preview, histogram_preview, png_bytes, segmentation_preview};
use trisect_core::descriptors::{apply_edits, extract_bundle, DescriptorBundle, EditOp, ExtractionConfig};
use trisect_core::evaluation::{psnr, ssim, metrics::SSIM_WINDOW};
use trisect_core::model::Model;
use trisect_core::training::{TrainState, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
use trisect_core::{rgb_to_lab, RgbImage};

/// Carried by every response body.
pub const SCHEMA_VERSION: u32 = 1;
/// Edits kept for undo per session.
pub const UNDO_DEPTH: usize = 32;
const THUMBNAIL_SIDE: u32 = 96;

pub const ENV_BIND: &str = "TRISECT_BIND";
pub const ENV_CHECKPOINT: &str = "TRISECT_CHECKPOINT";
pub const ENV_SESSION_TTL: &str = "TRISECT_SESSION_TTL";

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub bind: SocketAddr,
    pub checkpoint: Option<PathBuf>,
    /// Idle time after which a session is dropped.
    pub session_ttl: Duration,
    /// Largest accepted image payload, in bytes after any base64 decoding.
    pub max_upload: usize,
    /// Longer sides are downscaled to this before extraction.
    pub max_side: u32,
    /// Keep the uploaded image so /reconstruct can report PSNR and SSIM.
    pub retain_original: bool,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            bind: SocketAddr::from(([127, 0, 0, 1], 8080)),
            checkpoint: None,
            session_ttl: Duration::from_secs(1800),
            max_upload: 8 << 20,
            max_side: 1024,
            retain_original: true,
        }
    }
}

impl ServiceConfig {
    /// Defaults overridden by `TRISECT_BIND`, `TRISECT_CHECKPOINT` and
    /// `TRISECT_SESSION_TTL` (seconds).
    pub fn from_env() -> Result<Self, String> {
        let mut c = Self::default();
        if let Ok(v) = std::env::var(ENV_BIND) {
            c.bind = v.parse().map_err(|e| format!("{ENV_BIND}={v}: {e}"))?;
        }
        if let Ok(v) = std::env::var(ENV_CHECKPOINT) {
            if !v.is_empty() {
                c.checkpoint = Some(PathBuf::from(v));
            }
        }
        if let Ok(v) = std::env::var(ENV_SESSION_TTL) {
            let secs: u64 = v.parse().map_err(|e| format!("{ENV_SESSION_TTL}={v}: {e}"))?;
            c.session_ttl = Duration::from_secs(secs);
        }
        Ok(c)
    }
}

/// The checkpoint held for the service lifetime.
pub struct LoadedModel {
    pub model: Model,
    pub descriptor: ExtractionConfig,
    /// Leading hex digits of the parameter digest.
    pub id: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct ModelInfo {
    pub id: String,
    pub format: &'static str,
    pub version: u32,
    pub step: usize,
}

struct Session {
    bundle: DescriptorBundle,
    original: Option<RgbImage>,
    thumbnail: Vec<u8>,
    created: SystemTime,
    history: Vec<EditOp>,
    /// Bundles before each edit request, with the history length they had.
    undo: Vec<(DescriptorBundle, usize)>,
}

struct Entry {
    session: Arc<AsyncMutex<Session>>,
    last_access: Instant,
}

pub struct AppState {
    config: ServiceConfig,
    model: Option<LoadedModel>,
    info: Option<ModelInfo>,
    sessions: Mutex<HashMap<String, Entry>>,
    started: Instant,
}

impl AppState {
    /// Loads `config.checkpoint` if set.
    pub fn new(config: ServiceConfig) -> trisect_core::Result<Self> {
        let Some(path) = config.checkpoint.clone() else {
            return Ok(Self::build(config, None, 0));
        };
        let state = TrainState::load(&path)?;
        log::info!("loaded checkpoint {} at step {}", path.display(), state.step);
        let descriptor = state.config.descriptor.clone();
        Self::with_model(config, state.model, descriptor, state.step)
    }

    pub fn with_model(config: ServiceConfig, model: Model, descriptor: ExtractionConfig, step: usize) -> trisect_core::Result<Self> {
        let id = model.params().digest("")?[..16].to_string();
        Ok(Self::build(config, Some(LoadedModel { model, descriptor, id }), step))
    }

    fn build(config: ServiceConfig, model: Option<LoadedModel>, step: usize) -> Self {
        let info = model.as_ref().map(|m| ModelInfo {
            id: m.id.clone(),
            format: CHECKPOINT_FORMAT,
            version: CHECKPOINT_VERSION,
            step,
        });
        Self {
            config,
            model,
            info,
            sessions: Mutex::new(HashMap::new()),
            started: Instant::now(),
        }
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.config
    }

    /// Digest of every model parameter; `None` without a checkpoint.
    pub fn model_digest(&self) -> Option<String> {
        self.model.as_ref().and_then(|m| m.model.params().digest("").ok())
    }

    pub fn session_count(&self) -> usize {
        self.sessions.lock().unwrap().len()
    }

    /// Drops idle sessions; returns how many went.
    pub fn evict_expired(&self) -> usize {
        let ttl = self.config.session_ttl;
        let mut map = self.sessions.lock().unwrap();
        let before = map.len();
        map.retain(|_, e| e.last_access.elapsed() <= ttl);
        before - map.len()
    }

    fn lookup(&self, id: &str) -> Result<Arc<AsyncMutex<Session>>, ApiError> {
        let mut map = self.sessions.lock().unwrap();
        match map.get_mut(id) {
            Some(e) if e.last_access.elapsed() <= self.config.session_ttl => {
                e.last_access = Instant::now();
                Ok(e.session.clone())
            }
            Some(_) => {
                map.remove(id);
                Err(ApiError::not_found(id))
            }
            None => Err(ApiError::not_found(id)),
        }
    }

    fn extraction(&self) -> ExtractionConfig {
        self.model.as_ref().map(|m| m.descriptor.clone()).unwrap_or_default()
    }

    fn patch(&self) -> u32 {
        self.model.as_ref().map_or(1, |m| m.model.config().encoder.patch_size as u32)
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    kind: &'static str,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, kind: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            kind,
            message: message.into(),
        }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "bad_request", message)
    }

    fn not_found(id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, "unknown_session", format!("no live session {id}"))
    }

    fn invalid_edit(message: impl Into<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_edit", message)
    }

    fn internal(e: impl std::fmt::Display) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string())
    }
}

impl From<trisect_core::Error> for ApiError {
    fn from(e: trisect_core::Error) -> Self {
        Self::internal(e)
    }
}

impl From<BytesRejection> for ApiError {
    fn from(r: BytesRejection) -> Self {
        let kind = if r.status() == StatusCode::PAYLOAD_TOO_LARGE { "payload_too_large" } else { "bad_request" };
        Self::new(r.status(), kind, r.body_text())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = json!({
            "schema_version": SCHEMA_VERSION,
            "error": self.kind,
            "message": self.message,
        });
        (self.status, Json(body)).into_response()
    }
}

type ApiResult = Result<Json<Value>, ApiError>;

fn b64_png(img: &image::RgbImage) -> Result<String, ApiError> {
    Ok(B64.encode(png_bytes(img)?))
}

fn envelope(state: &AppState, mut body: Value) -> Json<Value> {
    body["schema_version"] = json!(SCHEMA_VERSION);
    body["model"] = json!(state.info);
    Json(body)
}

fn descriptor_view(bundle: &DescriptorBundle) -> Result<Value, ApiError> {
    let (h, w) = (bundle.height(), bundle.width());
    let labels = bundle.segmentation.argmax_labels()?;
    let rows: Vec<&[u32]> = labels.chunks(w).collect();
    Ok(json!({
        "height": h,
        "width": w,
        "clusters": bundle.segmentation.clusters(),
        "histogram": bundle.histogram.weights_vec()?,
        "mean_l": bundle.histogram.mean_l()?,
        "centroids": bundle.segmentation.centroid_list()?,
        "labels": rows,
    }))
}

fn previews(bundle: &DescriptorBundle) -> Result<Value, ApiError> {
    Ok(json!({
        "edges": b64_png(&edge_preview(bundle)?)?,
        "segmentation": b64_png(&segmentation_preview(bundle)?)?,
        "histogram": b64_png(&histogram_preview(bundle, 64)?)?,
    }))
}

fn session_view(id: &str, s: &Session) -> Result<Value, ApiError> {
    Ok(json!({
        "session_id": id,
        "created_at": s.created.duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
        "thumbnail": B64.encode(&s.thumbnail),
        "undo_depth": s.undo.len(),
        "history": s.history,
        "previews": previews(&s.bundle)?,
        "descriptors": descriptor_view(&s.bundle)?,
    }))
}

#[derive(Deserialize)]
struct UploadJson {
    image: String,
}

/// Raw image bytes, or `{"image": "<base64>"}` when sent as JSON.
fn upload_bytes(headers: &HeaderMap, body: &[u8], limit: usize) -> Result<Vec<u8>, ApiError> {
    let is_json = headers
        .get(header::CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
        .is_some_and(|v| v.starts_with("application/json"));
    let bytes = if is_json {
        let req: UploadJson = serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("bad upload JSON: {e}")))?;
        let data = req.image.split_once(";base64,").map_or(req.image.as_str(), |(_, d)| d);
        B64.decode(data.trim()).map_err(|e| ApiError::bad_request(format!("bad base64 image: {e}")))?
    } else {
        body.to_vec()
    };
    if bytes.len() > limit {
        return Err(ApiError::new(
            StatusCode::PAYLOAD_TOO_LARGE,
            "payload_too_large",
            format!("image is {} bytes; the limit is {limit}", bytes.len()),
        ));
    }
    Ok(bytes)
}

/// Downscales so the longer side is at most `max_side`, then centre-crops
/// both sides to a multiple of `patch`.
pub fn fit_image(img: image::RgbImage, max_side: u32, patch: u32) -> Result<image::RgbImage, String> {
    let (w, h) = img.dimensions();
    let img = if w.max(h) > max_side {
        let scale = max_side as f64 / w.max(h) as f64;
        let (nw, nh) = (((w as f64 * scale).round() as u32).max(1), ((h as f64 * scale).round() as u32).max(1));
        image::imageops::resize(&img, nw, nh, FilterType::Triangle)
    } else {
        img
    };
    let (w, h) = img.dimensions();
    let (cw, ch) = (w / patch * patch, h / patch * patch);
    if cw == 0 || ch == 0 {
        return Err(format!("image {w}x{h} is smaller than one {patch}x{patch} patch"));
    }
    if (cw, ch) == (w, h) {
        return Ok(img);
    }
    Ok(image::imageops::crop_imm(&img, (w - cw) / 2, (h - ch) / 2, cw, ch).to_image())
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ApiError> + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f).await.map_err(ApiError::internal)?
}

async fn extract(State(state): State<Arc<AppState>>, headers: HeaderMap, body: Result<Bytes, BytesRejection>) -> ApiResult {
    let body = body?;
    let bytes = upload_bytes(&headers, &body, state.config.max_upload)?;
    let st = state.clone();
    let (session, view) = blocking(move || {
        let decoded = image::load_from_memory(&bytes).map_err(|e| ApiError::bad_request(format!("undecodable image: {e}")))?;
        let img = fit_image(decoded.to_rgb8(), st.config.max_side, st.patch()).map_err(ApiError::bad_request)?;
        let thumb = image::imageops::thumbnail(&img, THUMBNAIL_SIDE.min(img.width()), THUMBNAIL_SIDE.min(img.height()));
        // f32, like training.
        let rgb = RgbImage::from_rgb8(&img, DType::F32)?;
        let bundle = extract_bundle(&rgb, &st.extraction())?.detach();
        let session = Session {
            bundle,
            original: st.config.retain_original.then_some(rgb),
            thumbnail: png_bytes(&thumb)?,
            created: SystemTime::now(),
            history: Vec::new(),
            undo: Vec::new(),
        };
        let view = (previews(&session.bundle)?, descriptor_view(&session.bundle)?, B64.encode(&session.thumbnail));
        Ok((session, view))
    })
    .await?;
    let id = uuid::Uuid::new_v4().to_string();
    state.sessions.lock().unwrap().insert(
        id.clone(),
        Entry {
            session: Arc::new(AsyncMutex::new(session)),
            last_access: Instant::now(),
        },
    );
    log::info!("session {id} created");
    Ok(envelope(
        &state,
        json!({"session_id": id, "previews": view.0, "descriptors": view.1, "thumbnail": view.2}),
    ))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct EditRequest {
    session_id: String,
    #[serde(default)]
    ops: Vec<Value>,
    /// Number of edit requests to roll back.
    #[serde(default)]
    undo: usize,
}

async fn edit(State(state): State<Arc<AppState>>, body: Result<Bytes, BytesRejection>) -> ApiResult {
    let body = body?;
    let req: EditRequest = serde_json::from_slice(&body).map_err(|e| ApiError::bad_request(format!("bad edit request: {e}")))?;
    let session = state.lookup(&req.session_id)?;
    let ops = req
        .ops
        .into_iter()
        .map(serde_json::from_value::<EditOp>)
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| ApiError::invalid_edit(format!("bad edit op: {e}")))?;
    if req.undo > 0 && !ops.is_empty() {
        return Err(ApiError::invalid_edit("send either ops or undo, not both"));
    }
    let mut guard = session.lock_owned().await;
    let id = req.session_id.clone();
    let undo = req.undo;
    let view = blocking(move || {
        let s = &mut *guard;
        if undo > 0 {
            if undo > s.undo.len() {
                return Err(ApiError::invalid_edit(format!("only {} edits can be undone", s.undo.len())));
            }
            let keep = s.undo.len() - undo;
            let (bundle, len) = s.undo.drain(keep..).next().expect("undo > 0");
            s.bundle = bundle;
            s.history.truncate(len);
        } else if !ops.is_empty() {
            let edited = apply_edits(&s.bundle, &ops).map_err(|e| ApiError::invalid_edit(e.to_string()))?;
            let old = std::mem::replace(&mut s.bundle, edited);
            s.undo.push((old, s.history.len()));
            if s.undo.len() > UNDO_DEPTH {
                s.undo.remove(0);
            }
            s.history.extend(ops);
        }
        session_view(&id, s)
    })
    .await?;
    Ok(envelope(&state, view))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ReconstructRequest {
    session_id: String,
}

fn db(v: f64) -> Value {
    if v.is_infinite() {
        json!("inf")
    } else {
        json!(v)
    }
}

async fn reconstruct(State(state): State<Arc<AppState>>, body: Result<Bytes, BytesRejection>) -> ApiResult {
    if state.model.is_none() {
        return Err(ApiError::new(
            StatusCode::SERVICE_UNAVAILABLE,
            "no_checkpoint",
            "the service was started without a checkpoint",
        ));
    }
    let body = body?;
    let req: ReconstructRequest =
        serde_json::from_slice(&body).map_err(|e| ApiError::bad_request(format!("bad reconstruct request: {e}")))?;
    let session = state.lookup(&req.session_id)?;
    let guard = session.lock_owned().await;
    let st = state.clone();
    let mut body = blocking(move || {
        let model = &st.model.as_ref().expect("checked above").model;
        let recon = model.reconstruct(&guard.bundle)?;
        let mut out = json!({
            "image": b64_png(&recon.to_rgb8()?)?,
            "height": recon.height(),
            "width": recon.width(),
            "mean_l": rgb_to_lab(&recon)?.mean_l()?,
        });
        if let Some(orig) = &guard.original {
            out["psnr"] = db(psnr(orig, &recon)?);
            if orig.height() >= SSIM_WINDOW && orig.width() >= SSIM_WINDOW {
                out["ssim"] = json!(ssim(orig, &recon)?);
            }
        }
        Ok(out)
    })
    .await?;
    body["session_id"] = json!(req.session_id);
    Ok(envelope(&state, body))
}

async fn health(State(state): State<Arc<AppState>>) -> Json<Value> {
    envelope(
        &state,
        json!({
            "status": "ok",
            "checkpoint": state.info.as_ref().map(|i| i.id.clone()),
            "uptime_seconds": state.started.elapsed().as_secs_f64(),
            "sessions": state.session_count(),
        }),
    )
}

async fn get_session(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult {
    let session = state.lookup(&id)?;
    let guard = session.lock_owned().await;
    let view = blocking(move || session_view(&id, &guard)).await?;
    Ok(envelope(&state, view))
}

pub fn router(state: Arc<AppState>) -> Router {
    // Base64 inflates by 4/3; the precise limit is checked after decoding.
    let body_limit = state.config.max_upload / 3 * 4 + 64 * 1024;
    Router::new()
        .route("/extract", post(extract))
        .route("/edit", post(edit))
        .route("/reconstruct", post(reconstruct))
        .route("/health", get(health))
        .route("/session/{id}", get(get_session))
        .layer(DefaultBodyLimit::max(body_limit))
        .with_state(state)
}

/// Runs until ctrl-c, evicting idle sessions in the background.
pub async fn serve(config: ServiceConfig) -> Result<(), Box<dyn std::error::Error + Send + Sync>> {
    let state = Arc::new(AppState::new(config.clone())?);
    let digest = state.model_digest();
    let sweeper = state.clone();
    let period = (config.session_ttl / 2).clamp(Duration::from_secs(1), Duration::from_secs(60));
    tokio::spawn(async move {
        let mut tick = tokio::time::interval(period);
        loop {
            tick.tick().await;
            let n = sweeper.evict_expired();
            if n > 0 {
                log::info!("evicted {n} idle sessions");
            }
        }
    });
    let listener = tokio::net::TcpListener::bind(config.bind).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state.clone()))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    if state.model_digest() != digest {
        log::error!("model parameters changed while serving");
    }
    Ok(())
}
