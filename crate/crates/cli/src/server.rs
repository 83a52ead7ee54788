//! HTTP service: upload scenes, list styles, stylize cached scenes and
//! fetch the rendered PNGs.
//!
//! Reads run concurrently. Reconstruction and stylization jobs go through
//! one bounded queue drained by a single worker thread; a full queue
//! answers 503.

use std::collections::HashMap;
use std::fs;
use std::path::PathBuf;
use std::sync::{Arc, RwLock};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Multipart, Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};
use tokio::sync::{mpsc, oneshot};

use zerostyle::checkpoint::hex;
use zerostyle::imageio::{decode_png, encode_png};
use zerostyle::model::{CounterSnapshot, DualBranchModel, Reconstruction};
use zerostyle::style::{StyleLibrary, ToyProvider};
use zerostyle::train::provider_for;
use zerostyle::types::CameraModel;
use zerostyle::Error;

use crate::pipeline::{reconstruct, render_views, select_views, StyleRequest, StyleSlot};

/// Directory for persisted reconstructions and renders.
pub const CACHE_DIR_ENV: &str = "ZEROSTYLE_CACHE_DIR";

#[derive(Clone, Debug)]
pub struct ServerConfig {
    pub checkpoint: Option<PathBuf>,
    pub styles_dir: Option<PathBuf>,
    pub cache_dir: Option<PathBuf>,
    pub queue_capacity: usize,
    /// Scenes kept in memory; the oldest is dropped beyond this.
    pub max_scenes: usize,
}

impl Default for ServerConfig {
    fn default() -> Self {
        ServerConfig { checkpoint: None, styles_dir: None, cache_dir: None, queue_capacity: 8, max_scenes: 16 }
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        ApiError { status, message: message.into() }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, message)
    }

    fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, message)
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Validation(_) | Error::Shape { .. } | Error::Json(_) | Error::Config(_) | Error::Image(_) => {
                StatusCode::BAD_REQUEST
            }
            Error::NotFound(_) => StatusCode::NOT_FOUND,
            Error::Contract(_) => StatusCode::CONFLICT,
            Error::Numerical(_) | Error::Io { .. } => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError::new(status, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.message }))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;
type Job = Box<dyn FnOnce() + Send>;

struct SceneEntry {
    rec: Reconstruction,
    created: u64,
}

pub struct AppState {
    model: Option<Arc<DualBranchModel>>,
    provider: Arc<ToyProvider>,
    styles: Option<StyleLibrary>,
    scenes: RwLock<HashMap<String, Arc<SceneEntry>>>,
    renders: RwLock<HashMap<String, Arc<Vec<u8>>>>,
    jobs: mpsc::Sender<Job>,
    cfg: ServerConfig,
}

impl AppState {
    /// Loads the model and style library and starts the worker thread.
    pub fn new(cfg: ServerConfig) -> zerostyle::Result<Arc<Self>> {
        let model = cfg.checkpoint.as_ref().map(DualBranchModel::load).transpose()?.map(Arc::new);
        let styles = cfg.styles_dir.as_ref().map(StyleLibrary::load).transpose()?;
        let provider = Arc::new(match &model {
            Some(m) => provider_for(&m.cfg),
            None => ToyProvider::default(),
        });
        if let Some(d) = &cfg.cache_dir {
            for sub in ["scenes", "renders"] {
                fs::create_dir_all(d.join(sub)).map_err(|e| Error::Io { path: d.join(sub), source: e })?;
            }
        }
        let (tx, mut rx) = mpsc::channel::<Job>(cfg.queue_capacity.max(1));
        std::thread::spawn(move || {
            while let Some(job) = rx.blocking_recv() {
                job();
            }
        });
        Ok(Arc::new(AppState {
            model,
            provider,
            styles,
            scenes: RwLock::new(HashMap::new()),
            renders: RwLock::new(HashMap::new()),
            jobs: tx,
            cfg,
        }))
    }

    fn model(&self) -> ApiResult<Arc<DualBranchModel>> {
        self.model.clone().ok_or_else(|| ApiError::new(StatusCode::CONFLICT, "no model loaded; start with --checkpoint"))
    }

    async fn run<T: Send + 'static>(&self, f: impl FnOnce() -> T + Send + 'static) -> ApiResult<T> {
        let (tx, rx) = oneshot::channel();
        let job: Job = Box::new(move || {
            let _ = tx.send(f());
        });
        self.jobs.try_send(job).map_err(|e| match e {
            mpsc::error::TrySendError::Full(_) => ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "work queue is full"),
            mpsc::error::TrySendError::Closed(_) => ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "worker stopped"),
        })?;
        rx.await.map_err(|_| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "job was dropped"))
    }

    fn insert_scene(&self, id: &str, entry: Arc<SceneEntry>) {
        let mut scenes = self.scenes.write().expect("scene lock");
        scenes.insert(id.to_string(), entry);
        while scenes.len() > self.cfg.max_scenes.max(1) {
            // in-flight requests hold their own Arc, so dropping is safe
            let oldest = scenes.iter().min_by_key(|(k, e)| (e.created, (*k).clone())).map(|(k, _)| k.clone());
            match oldest {
                Some(k) if k != id => scenes.remove(&k),
                _ => break,
            };
        }
    }
}

fn now_secs() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

fn ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/scenes", post(upload_scene))
        .route("/scenes/{id}/stylize", post(stylize))
        .route("/styles", get(list_styles))
        .route("/styles/{file}", get(style_image))
        .route("/renders/{file}", get(get_render))
        .layer(DefaultBodyLimit::max(64 << 20))
        .with_state(state)
}

pub async fn serve(cfg: ServerConfig, port: u16) -> anyhow::Result<()> {
    let state = AppState::new(cfg)?;
    let listener = tokio::net::TcpListener::bind(("0.0.0.0", port)).await?;
    eprintln!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state)).await?;
    Ok(())
}

#[derive(Serialize)]
struct Health {
    model_loaded: bool,
    frozen_digest: Option<String>,
    scenes: usize,
    counters: Option<CounterSnapshot>,
    queue_capacity: usize,
}

async fn health(State(s): State<Arc<AppState>>) -> Json<Health> {
    Json(Health {
        model_loaded: s.model.is_some(),
        frozen_digest: s.model.as_ref().map(|m| m.frozen_digest().to_string()),
        scenes: s.scenes.read().expect("scene lock").len(),
        counters: s.model.as_ref().map(|m| m.counters.snapshot()),
        queue_capacity: s.cfg.queue_capacity,
    })
}

#[derive(Serialize)]
struct UploadResponse {
    scene_id: String,
    views: usize,
    cached: bool,
    timings: serde_json::Value,
}

async fn upload_scene(State(s): State<Arc<AppState>>, mut form: Multipart) -> ApiResult<Json<UploadResponse>> {
    let model = s.model()?;
    let mut pngs: Vec<Bytes> = Vec::new();
    let mut cameras: Option<Bytes> = None;
    while let Some(field) = form.next_field().await.map_err(|e| ApiError::bad_request(e.to_string()))? {
        let name = field.name().unwrap_or_default().to_string();
        let data = field.bytes().await.map_err(|e| ApiError::bad_request(e.to_string()))?;
        match name.as_str() {
            "images" | "image" => pngs.push(data),
            "cameras" => cameras = Some(data),
            other => return Err(ApiError::bad_request(format!("unexpected form field {other:?}"))),
        }
    }
    if pngs.is_empty() {
        return Err(ApiError::bad_request("no images uploaded"));
    }
    let mut h = Sha256::new();
    for p in &pngs {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    if let Some(c) = &cameras {
        h.update(b"cameras");
        h.update(c);
    }
    let id = hex(&h.finalize())[..24].to_string();
    let views = pngs.len();
    if s.scenes.read().expect("scene lock").contains_key(&id) {
        return Ok(Json(UploadResponse { scene_id: id, views, cached: true, timings: json!({}) }));
    }
    let images = pngs.iter().map(|p| decode_png(p)).collect::<zerostyle::Result<Vec<_>>>()?;
    let cams: Option<Vec<CameraModel>> = cameras
        .map(|c| serde_json::from_slice(&c).map_err(|e| ApiError::bad_request(format!("cameras: {e}"))))
        .transpose()?;
    if let Some(c) = &cams {
        if c.len() != images.len() {
            return Err(ApiError::bad_request(format!("{} cameras for {} images", c.len(), images.len())));
        }
    }
    let disk = s.cfg.cache_dir.as_ref().map(|d| d.join("scenes").join(&id));
    let t = Instant::now();
    let (rec, from_disk) = s
        .run(move || -> zerostyle::Result<(Reconstruction, bool)> {
            if let Some(d) = &disk {
                if let Ok(rec) = Reconstruction::load(d) {
                    if rec.frozen_digest == model.frozen_digest() {
                        return Ok((rec, true));
                    }
                }
            }
            let rec = reconstruct(&model, &images, cams.as_deref())?;
            if let Some(d) = &disk {
                rec.save(d)?;
            }
            Ok((rec, false))
        })
        .await??;
    let elapsed = ms(t);
    s.insert_scene(&id, Arc::new(SceneEntry { rec, created: now_secs() }));
    Ok(Json(UploadResponse { scene_id: id, views, cached: from_disk, timings: json!({ "reconstruct_ms": elapsed }) }))
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StyleFields {
    pub style_text: Option<String>,
    pub style_image_id: Option<String>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StylizeBody {
    pub style_text: Option<String>,
    pub style_image_id: Option<String>,
    pub second: Option<StyleFields>,
    pub alpha: Option<f64>,
    pub view_indices: Option<Vec<usize>>,
}

impl AppState {
    fn slot(&self, f: StyleFields) -> ApiResult<StyleSlot> {
        let image = match f.style_image_id {
            None => None,
            Some(id) => {
                let lib = self.styles.as_ref().ok_or_else(|| ApiError::not_found("no style library loaded"))?;
                if lib.get(&id).is_none() {
                    return Err(ApiError::not_found(format!("unknown style {id:?}")));
                }
                Some(lib.load_image(&id)?)
            }
        };
        Ok(StyleSlot { text: f.style_text, image })
    }
}

#[derive(Serialize)]
struct StylizeResponse {
    render_urls: Vec<String>,
    timings: serde_json::Value,
}

async fn stylize(State(s): State<Arc<AppState>>, Path(id): Path<String>, body: Bytes) -> ApiResult<Json<StylizeResponse>> {
    let t0 = Instant::now();
    let req: StylizeBody = serde_json::from_slice(&body).map_err(|e| ApiError::bad_request(format!("body: {e}")))?;
    let model = s.model()?;
    let entry = s
        .scenes
        .read()
        .expect("scene lock")
        .get(&id)
        .cloned()
        .ok_or_else(|| ApiError::not_found(format!("unknown scene {id:?}")))?;
    let first = s.slot(StyleFields { style_text: req.style_text.clone(), style_image_id: req.style_image_id.clone() })?;
    let second = s.slot(req.second.clone().unwrap_or_default())?;
    let style = StyleRequest::resolve(first, second, req.alpha)?;
    let cams = select_views(&entry.rec.cameras, req.view_indices.as_deref())?;

    let canonical = serde_json::to_vec(&req).map_err(|e| ApiError::bad_request(e.to_string()))?;
    let mut h = Sha256::new();
    h.update(id.as_bytes());
    h.update(model.frozen_digest().as_bytes());
    h.update(&canonical);
    let key = hex(&h.finalize());
    let tokens: Vec<String> = (0..cams.len()).map(|i| format!("{}{i:03}", &key[..29])).collect();

    let provider = s.provider.clone();
    let queued = Instant::now();
    let (pngs, stylize_ms, render_ms, wait_ms) = s
        .run(move || -> zerostyle::Result<(Vec<Vec<u8>>, f64, f64, f64)> {
            let wait = ms(queued);
            let t = Instant::now();
            let z = style.embedding(provider.as_ref())?;
            let scene = model.stylize(&entry.rec, &z)?;
            let st = ms(t);
            let t = Instant::now();
            let pngs = render_views(&scene, &cams)?.iter().map(encode_png).collect::<zerostyle::Result<Vec<_>>>()?;
            Ok((pngs, st, ms(t), wait))
        })
        .await??;
    {
        let mut renders = s.renders.write().expect("render lock");
        for (t, png) in tokens.iter().zip(pngs) {
            if let Some(d) = &s.cfg.cache_dir {
                let path = d.join("renders").join(format!("{t}.png"));
                fs::write(&path, &png).map_err(|e| Error::Io { path, source: e })?;
            }
            renders.insert(t.clone(), Arc::new(png));
        }
    }
    Ok(Json(StylizeResponse {
        render_urls: tokens.iter().map(|t| format!("/renders/{t}.png")).collect(),
        timings: json!({
            "queue_ms": wait_ms,
            "stylize_ms": stylize_ms,
            "render_ms": render_ms,
            "total_ms": ms(t0),
        }),
    }))
}

fn png_response(bytes: Arc<Vec<u8>>) -> Response {
    ([(header::CONTENT_TYPE, "image/png")], bytes.as_ref().clone()).into_response()
}

async fn get_render(State(s): State<Arc<AppState>>, Path(file): Path<String>) -> ApiResult<Response> {
    let token = file.strip_suffix(".png").ok_or_else(|| ApiError::not_found("renders are served as .png"))?;
    if let Some(b) = s.renders.read().expect("render lock").get(token) {
        return Ok(png_response(b.clone()));
    }
    let on_disk = s.cfg.cache_dir.as_ref().filter(|_| token.chars().all(|c| c.is_ascii_hexdigit()));
    if let Some(bytes) = on_disk.and_then(|d| fs::read(d.join("renders").join(&file)).ok()) {
        return Ok(png_response(Arc::new(bytes)));
    }
    Err(ApiError::not_found(format!("unknown render {token:?}")))
}

#[derive(Serialize)]
struct StyleItem {
    id: String,
    caption: String,
    image_url: String,
}

async fn list_styles(State(s): State<Arc<AppState>>) -> Json<serde_json::Value> {
    let items: Vec<StyleItem> = s
        .styles
        .iter()
        .flat_map(|l| &l.entries)
        .map(|e| StyleItem { id: e.id.clone(), caption: e.caption.clone(), image_url: format!("/styles/{}.png", e.id) })
        .collect();
    Json(json!({ "styles": items }))
}

async fn style_image(State(s): State<Arc<AppState>>, Path(file): Path<String>) -> ApiResult<Response> {
    let id = file.strip_suffix(".png").unwrap_or(&file);
    let lib = s.styles.as_ref().ok_or_else(|| ApiError::not_found("no style library loaded"))?;
    let e = lib.get(id).ok_or_else(|| ApiError::not_found(format!("unknown style {id:?}")))?;
    let path = lib.root.join(&e.image);
    let bytes = fs::read(&path).map_err(|e| Error::Io { path, source: e })?;
    Ok(png_response(Arc::new(bytes)))
}
