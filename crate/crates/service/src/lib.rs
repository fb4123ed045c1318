//! Read-only HTTP render service over a trained multi-style checkpoint.
//!
//! | route | response |
//! |---|---|
//! | `GET /styles` | `[{style_id, name, thumbnail_url}]` |
//! | `GET /styles/{id}/thumbnail` | PNG |
//! | `POST /render` | PNG plus `X-Render-Time-Ms` |
//! | `GET /healthz` | checkpoint digests and model summary |
//!
//! Invalid requests get 400 with `{error, field}`, unknown styles 422, and a
//! saturated render budget 503 with `Retry-After`.

mod request;

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Serialize;
use stylenerf_core::data::checkpoint::{load_checkpoint, Stage};
use stylenerf_core::data::images::{load_image, ImageRgb};
use stylenerf_core::multistyle::{stylized_path, MultiStyleModel};
use tokio::sync::{OwnedSemaphorePermit, Semaphore};

pub use request::{mean_radius, Orbit, PoseSpec, RenderRequest, RequestError, StyleSpec, ValidRequest, RESOLUTIONS};

pub const DEFAULT_MAX_IN_FLIGHT: usize = 2;
pub const THUMBNAIL_SIZE: usize = 64;
/// Seconds a client is asked to wait after a 503.
pub const RETRY_AFTER_SECS: u64 = 1;

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("no multi-style checkpoint configured; train one with `stylenerf train-multistyle` and pass its path with --checkpoint")]
    NoCheckpoint,
    #[error("cannot load multi-style checkpoint {path}: {source}")]
    Checkpoint {
        path: PathBuf,
        #[source]
        source: stylenerf_core::Error,
    },
    #[error("the checkpoint at {0} has not been trained")]
    Untrained(PathBuf),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug)]
pub struct ServiceConfig {
    pub checkpoint: Option<PathBuf>,
    /// Directory holding `stylized/`, used for thumbnails of styles without a
    /// source image. Defaults to the parent of the checkpoint directory.
    pub stylized_root: Option<PathBuf>,
    pub max_in_flight: usize,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            checkpoint: None,
            stylized_root: None,
            max_in_flight: DEFAULT_MAX_IN_FLIGHT,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StyleListing {
    pub style_id: String,
    pub name: String,
    pub thumbnail_url: String,
}

#[derive(Clone, Debug, Serialize)]
struct Health {
    status: &'static str,
    stage: Stage,
    steps_trained: u64,
    styles: usize,
    digests: BTreeMap<String, String>,
}

/// Everything a handler needs; immutable after startup apart from the render budget.
#[derive(Clone)]
pub struct AppState {
    model: Arc<MultiStyleModel>,
    digests: Arc<BTreeMap<String, String>>,
    thumbnails: Arc<BTreeMap<String, Vec<u8>>>,
    budget: Arc<Semaphore>,
}

impl AppState {
    /// Loads and verifies the checkpoint; refuses to start without one.
    pub fn load(config: &ServiceConfig) -> Result<Self, ServiceError> {
        let path = config.checkpoint.as_ref().ok_or(ServiceError::NoCheckpoint)?;
        let err = |source| ServiceError::Checkpoint { path: path.clone(), source };
        let ckpt = load_checkpoint(path, Some(Stage::Multistyle)).map_err(err)?;
        let model = MultiStyleModel::from_checkpoint(&ckpt, &candle_core::Device::Cpu).map_err(err)?;
        if model.steps_trained == 0 {
            return Err(ServiceError::Untrained(path.clone()));
        }
        let root = config
            .stylized_root
            .clone()
            .or_else(|| path.parent().and_then(Path::parent).map(Path::to_path_buf));
        Ok(Self::new(model, ckpt.digests, root.as_deref(), config.max_in_flight))
    }

    pub fn new(
        model: MultiStyleModel,
        digests: BTreeMap<String, String>,
        stylized_root: Option<&Path>,
        max_in_flight: usize,
    ) -> Self {
        let thumbnails = model
            .registry
            .styles
            .iter()
            .filter_map(|(id, entry)| {
                let from_source = entry.image_path.as_deref().and_then(|p| load_image(p).ok()).map(|d| d.composited([1.0; 3]));
                let from_frames = || {
                    let frame = &model.cameras.first()?.frame_id;
                    load_image(&stylized_path(stylized_root?, id, frame)).ok().map(|d| d.rgb)
                };
                let image = from_source.or_else(from_frames)?;
                Some((id.clone(), thumbnail(&image).encode_png().ok()?))
            })
            .collect();
        Self {
            model: Arc::new(model),
            digests: Arc::new(digests),
            thumbnails: Arc::new(thumbnails),
            budget: Arc::new(Semaphore::new(max_in_flight)),
        }
    }

    pub fn model(&self) -> &MultiStyleModel {
        &self.model
    }

    /// Claims one render slot, or `None` when the budget is exhausted.
    pub fn try_reserve(&self) -> Option<OwnedSemaphorePermit> {
        self.budget.clone().try_acquire_owned().ok()
    }

    pub fn styles(&self) -> Vec<StyleListing> {
        self.model
            .registry
            .styles
            .iter()
            .map(|(id, entry)| StyleListing {
                style_id: id.clone(),
                name: entry.name.clone(),
                thumbnail_url: format!("/styles/{id}/thumbnail"),
            })
            .collect()
    }

    /// Renders a validated request to PNG bytes. Blocking.
    pub fn render(&self, request: &ValidRequest) -> Result<Vec<u8>, RenderFailure> {
        let stats = request.statistics(&self.model)?;
        let pose = request.camera(&self.model)?;
        let (image, _) = self.model.render_view(&pose, &stats, request.seed).map_err(RenderFailure::Internal)?;
        image.encode_png().map_err(RenderFailure::Internal)
    }
}

/// Center square crop, resized to the thumbnail size.
fn thumbnail(image: &ImageRgb) -> ImageRgb {
    let side = image.width.min(image.height);
    let square = image
        .crop((image.width - side) / 2, (image.height - side) / 2, side, side)
        .expect("centered square fits");
    square.resize(THUMBNAIL_SIZE, THUMBNAIL_SIZE)
}

#[derive(Debug, thiserror::Error)]
pub enum RenderFailure {
    #[error(transparent)]
    Request(#[from] RequestError),
    #[error("render failed: {0}")]
    Internal(stylenerf_core::Error),
}

fn json_error(status: StatusCode, message: String, field: Option<String>) -> Response {
    let mut body = serde_json::json!({ "error": message });
    if let Some(field) = field {
        body["field"] = field.into();
    }
    (status, Json(body)).into_response()
}

impl IntoResponse for RenderFailure {
    fn into_response(self) -> Response {
        match self {
            RenderFailure::Request(RequestError::Invalid { field, message }) => {
                json_error(StatusCode::BAD_REQUEST, message, Some(field))
            }
            RenderFailure::Request(e @ RequestError::UnknownStyle(_)) => {
                json_error(StatusCode::UNPROCESSABLE_ENTITY, e.to_string(), None)
            }
            RenderFailure::Internal(e) => json_error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string(), None),
        }
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/styles", get(list_styles))
        .route("/styles/{id}/thumbnail", get(style_thumbnail))
        .route("/render", post(render))
        .route("/healthz", get(health))
        .with_state(state)
}

async fn list_styles(State(state): State<AppState>) -> Json<Vec<StyleListing>> {
    Json(state.styles())
}

async fn style_thumbnail(State(state): State<AppState>, UrlPath(id): UrlPath<String>) -> Response {
    match state.thumbnails.get(&id) {
        Some(png) => ([(header::CONTENT_TYPE, "image/png")], png.clone()).into_response(),
        None if state.model.registry.styles.contains_key(&id) => {
            json_error(StatusCode::NOT_FOUND, format!("no thumbnail available for style {id}"), None)
        }
        None => json_error(StatusCode::NOT_FOUND, format!("unknown style {id:?}"), None),
    }
}

async fn health(State(state): State<AppState>) -> Json<Health> {
    Json(Health {
        status: "ok",
        stage: Stage::Multistyle,
        steps_trained: state.model.steps_trained,
        styles: state.model.registry.len(),
        digests: (*state.digests).clone(),
    })
}

async fn render(State(state): State<AppState>, body: Bytes) -> Response {
    let request: RenderRequest = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) => return json_error(StatusCode::BAD_REQUEST, e.to_string(), Some("body".into())),
    };
    let valid = match request.validate() {
        Ok(v) => v,
        Err(e) => return RenderFailure::from(e).into_response(),
    };
    let Some(permit) = state.try_reserve() else {
        let mut response = json_error(StatusCode::SERVICE_UNAVAILABLE, "render budget exhausted, retry shortly".into(), None);
        response.headers_mut().insert(header::RETRY_AFTER, HeaderValue::from(RETRY_AFTER_SECS));
        return response;
    };
    let started = Instant::now();
    let outcome = tokio::task::spawn_blocking(move || {
        let _permit = permit;
        state.render(&valid)
    })
    .await;
    let elapsed = started.elapsed().as_millis() as u64;
    match outcome {
        Ok(Ok(png)) => (
            [
                (header::CONTENT_TYPE, HeaderValue::from_static("image/png")),
                (header::HeaderName::from_static("x-render-time-ms"), HeaderValue::from(elapsed)),
            ],
            png,
        )
            .into_response(),
        Ok(Err(failure)) => failure.into_response(),
        Err(join) => json_error(StatusCode::INTERNAL_SERVER_ERROR, format!("render task failed: {join}"), None),
    }
}

/// Binds `addr` and serves until ctrl-c.
pub async fn serve(state: AppState, addr: SocketAddr) -> Result<(), ServiceError> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
