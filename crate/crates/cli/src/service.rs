//! JSON/HTTP generation service.
//!
//! `POST /generate`, `GET /health` and `GET /styles`. Models are loaded once
//! and shared read-only; at most `workers` samplings run at a time and any
//! request beyond that is answered with 429 instead of being queued.

use std::sync::Arc;
use std::time::Instant;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Request, State};
use axum::http::StatusCode;
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine as _;
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::sync::Semaphore;

use s2p_core::autoencoder::Autoencoder;
use s2p_core::diffusion::DiffusionModel;
use s2p_core::edge::{self, EdgeParams};
use s2p_core::eval::{DEFAULT_STYLE_PREFIXES, PHOTO_PREFIX};
use s2p_core::image::{EdgeMap, ImageBuffer};
use s2p_core::sampler::{self, Method, SamplerConfig};

/// Largest accepted decoded sketch.
pub const MAX_SKETCH_BYTES: usize = 4 * 1024 * 1024;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateRequest {
    pub sketch_png: String,
    #[serde(default)]
    pub prompt: String,
    #[serde(default = "default_scale")]
    pub guidance_scale: f64,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub variant: Option<String>,
    #[serde(default)]
    pub aug_level: Option<usize>,
    #[serde(default)]
    pub method: Option<Method>,
    #[serde(default)]
    pub eta: Option<f64>,
    /// Run the uploaded drawing through edge standardization.
    #[serde(default = "default_true")]
    pub raw_sketch: bool,
}

fn default_scale() -> f64 {
    SamplerConfig::default().guidance_scale
}

fn default_steps() -> usize {
    SamplerConfig::default().steps
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct GenerateResponse {
    pub image_png: String,
    pub elapsed_ms: u64,
    pub config: serde_json::Value,
}

pub struct AppState {
    model: DiffusionModel,
    vae: Autoencoder,
    permits: Arc<Semaphore>,
    edge_params: EdgeParams,
}

impl AppState {
    pub fn new(model: DiffusionModel, vae: Autoencoder, workers: usize) -> s2p_core::Result<Self> {
        model.check_vae(&vae)?;
        Ok(Self {
            model,
            vae,
            permits: Arc::new(Semaphore::new(workers.max(1))),
            edge_params: EdgeParams::default(),
        })
    }

    /// Workers not currently sampling.
    pub fn idle_workers(&self) -> usize {
        self.permits.available_permits()
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
}

impl ApiError {
    fn bad_request(code: &'static str, message: impl Into<String>) -> Self {
        Self {
            status: StatusCode::BAD_REQUEST,
            code,
            message: message.into(),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = Json(json!({ "error": { "code": self.code, "message": self.message } }));
        (self.status, body).into_response()
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/generate", post(generate))
        .route("/health", get(health))
        .route("/styles", get(styles))
        .layer(DefaultBodyLimit::max(MAX_SKETCH_BYTES * 2))
        .layer(middleware::from_fn(log_request))
        .with_state(state)
}

/// One JSON line per request on stderr.
async fn log_request(req: Request, next: Next) -> Response {
    let start = Instant::now();
    let method = req.method().to_string();
    let path = req.uri().path().to_string();
    let resp = next.run(req).await;
    let line = json!({
        "ts_ms": std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_millis() as u64)
            .unwrap_or(0),
        "method": method,
        "path": path,
        "status": resp.status().as_u16(),
        "elapsed_ms": start.elapsed().as_millis() as u64,
    });
    eprintln!("{line}");
    resp
}

async fn health(State(state): State<Arc<AppState>>) -> Json<serde_json::Value> {
    Json(json!({
        "status": "ok",
        "variant": state.model.variant().to_string(),
        "resolution": state.model.config().resolution,
        "timesteps": state.model.config().timesteps,
        "idle_workers": state.idle_workers(),
    }))
}

pub fn style_list() -> Vec<&'static str> {
    std::iter::once(PHOTO_PREFIX)
        .chain(DEFAULT_STYLE_PREFIXES)
        .collect()
}

async fn styles() -> Json<serde_json::Value> {
    Json(json!({ "default": PHOTO_PREFIX, "styles": style_list() }))
}

async fn generate(State(state): State<Arc<AppState>>, body: Bytes) -> Result<Json<GenerateResponse>, ApiError> {
    let req: GenerateRequest =
        serde_json::from_slice(&body).map_err(|e| ApiError::bad_request("malformed_json", e.to_string()))?;
    let (sketch, cfg) = validate(&state, &req)?;
    let permit = state.permits.clone().try_acquire_owned().map_err(|_| ApiError {
        status: StatusCode::TOO_MANY_REQUESTS,
        code: "busy",
        message: "all workers are busy; retry later".into(),
    })?;
    let start = Instant::now();
    let worker_state = state.clone();
    let prompt = req.prompt.clone();
    let result = tokio::task::spawn_blocking(move || {
        let _permit = permit;
        let img = sampler::sample(&worker_state.model, &worker_state.vae, &sketch, &prompt, &cfg)?;
        img.encode_png()
    })
    .await;
    let png = match result {
        Ok(Ok(png)) => png,
        Ok(Err(e)) => {
            return Err(ApiError {
                status: StatusCode::INTERNAL_SERVER_ERROR,
                code: "sampling_failed",
                message: e.to_string(),
            })
        }
        Err(e) => {
            return Err(ApiError {
                status: StatusCode::INTERNAL_SERVER_ERROR,
                code: "worker_crashed",
                message: e.to_string(),
            })
        }
    };
    Ok(Json(GenerateResponse {
        image_png: BASE64.encode(png),
        elapsed_ms: start.elapsed().as_millis() as u64,
        config: json!({
            "prompt": req.prompt,
            "guidance_scale": cfg.guidance_scale,
            "steps": cfg.steps,
            "seed": cfg.seed,
            "method": cfg.method,
            "eta": cfg.eta,
            "aug_level": state.model.variant().uses_aug_level().then_some(cfg.aug_level),
            "variant": state.model.variant().to_string(),
            "raw_sketch": req.raw_sketch,
            "resolution": state.model.config().resolution,
        }),
    }))
}

fn validate(state: &AppState, req: &GenerateRequest) -> Result<(EdgeMap, SamplerConfig), ApiError> {
    let model = &state.model;
    if let Some(v) = &req.variant {
        if *v != model.variant().to_string() {
            return Err(ApiError::bad_request(
                "variant_unavailable",
                format!("this server runs {}, not {v}", model.variant()),
            ));
        }
    }
    if req.aug_level.is_some() && !model.variant().uses_aug_level() {
        return Err(ApiError::bad_request("invalid_parameter", "aug_level applies to concat3 only"));
    }
    let cfg = SamplerConfig {
        steps: req.steps,
        guidance_scale: req.guidance_scale,
        method: req.method.unwrap_or(Method::Ddim),
        eta: req.eta.unwrap_or(0.0),
        seed: req.seed,
        aug_level: req.aug_level.unwrap_or(0),
        null_sketch: false,
    };
    cfg.validate(model.schedule())
        .map_err(|e| ApiError::bad_request("invalid_parameter", e.to_string()))?;
    if cfg.aug_level >= model.aug_schedule().len() {
        return Err(ApiError::bad_request(
            "invalid_parameter",
            format!("aug_level must lie in [0, {})", model.aug_schedule().len()),
        ));
    }
    let bytes = BASE64
        .decode(req.sketch_png.trim())
        .map_err(|e| ApiError::bad_request("invalid_sketch", format!("sketch_png is not base64: {e}")))?;
    if bytes.len() > MAX_SKETCH_BYTES {
        return Err(ApiError::bad_request("sketch_too_large", "sketch exceeds 4 MiB"));
    }
    let img = ImageBuffer::from_png_bytes(&bytes)
        .map_err(|e| ApiError::bad_request("invalid_sketch", e.to_string()))?;
    let sketch = prepare_sketch(&img, model.config().resolution, req.raw_sketch, &state.edge_params)
        .map_err(|e| ApiError::bad_request("invalid_sketch", e.to_string()))?;
    Ok((sketch, cfg))
}

/// Polarity-normalizes an uploaded drawing to `resolution`², then optionally
/// standardizes it.
pub fn prepare_sketch(
    img: &ImageBuffer,
    resolution: usize,
    standardize: bool,
    params: &EdgeParams,
) -> s2p_core::Result<EdgeMap> {
    let edges = edge::normalize_sketch(img, (resolution, resolution))?;
    if standardize {
        edge::standardize(&edges.to_image(), params)
    } else {
        Ok(edges)
    }
}

/// Binds and serves until interrupted.
pub async fn serve(state: Arc<AppState>, bind: &str) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(bind).await?;
    eprintln!(
        "{}",
        json!({ "event": "listening", "addr": listener.local_addr()?.to_string() })
    );
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
