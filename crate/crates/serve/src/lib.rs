//! JSON-over-HTTP prediction service.
//!
//! * `GET /healthz` → `{"status":"ok","classes":[...]}`
//! * `POST /predict` with raw PNG/JPEG bytes or a multipart field `image` →
//!   `{"predicted":"<class>","confidence":97.3,"probabilities":{...}}`
//!
//! The model is loaded once and shared read-only across requests.

use std::collections::BTreeMap;
use std::net::{IpAddr, Ipv4Addr, SocketAddr};
use std::path::PathBuf;
use std::sync::Arc;

use axum::body::{Body, Bytes};
use axum::extract::{DefaultBodyLimit, FromRequest, Multipart, Request, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use http_body_util::BodyExt;
use scalpnet_core::imageproc::Preprocess;
use scalpnet_core::model_io::load_model;
use scalpnet_core::nn::Model;
use scalpnet_core::train::{predict, Prediction};
use serde::Serialize;
use thiserror::Error;

pub const DEFAULT_PORT: u16 = 8080;
pub const DEFAULT_MAX_UPLOAD_BYTES: usize = 10 * 1024 * 1024;
pub const PORT_ENV: &str = "SCALPNET_PORT";

/// Oversized uploads are read and discarded up to this multiple of the limit
/// so the client receives the 413 instead of a reset connection.
const DRAIN_FACTOR: usize = 4;

#[derive(Debug, Error)]
pub enum ServeError {
    #[error("failed to load model")]
    Model(#[from] scalpnet_core::Error),
    #[error("failed to bind {addr}")]
    Bind {
        addr: SocketAddr,
        #[source]
        source: std::io::Error,
    },
    #[error("server I/O error")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone)]
pub struct ServeConfig {
    pub model_path: PathBuf,
    pub bind: IpAddr,
    pub port: u16,
    pub max_upload_bytes: usize,
    pub preprocess: Preprocess,
}

impl ServeConfig {
    pub fn new(model_path: impl Into<PathBuf>) -> Self {
        ServeConfig {
            model_path: model_path.into(),
            bind: IpAddr::V4(Ipv4Addr::UNSPECIFIED),
            port: DEFAULT_PORT,
            max_upload_bytes: DEFAULT_MAX_UPLOAD_BYTES,
            preprocess: Preprocess::default(),
        }
    }
}

pub struct AppState {
    pub model: Model,
    pub preprocess: Preprocess,
}

#[derive(Debug, Serialize)]
struct Health<'a> {
    status: &'static str,
    classes: &'a [String],
}

/// Body of a successful `/predict` response.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PredictResponse {
    pub predicted: String,
    /// Percentage rounded to one decimal place.
    pub confidence: f64,
    pub probabilities: BTreeMap<String, f32>,
}

impl PredictResponse {
    pub fn new(prediction: &Prediction, class_names: &[String]) -> Self {
        PredictResponse {
            predicted: prediction.class_name.clone(),
            confidence: prediction.rounded_confidence(),
            probabilities: class_names
                .iter()
                .cloned()
                .zip(prediction.probabilities.iter().copied())
                .collect(),
        }
    }
}

struct ApiError(StatusCode, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(serde_json::json!({ "error": self.1 }))).into_response()
    }
}

#[derive(Clone)]
struct Ctx {
    app: Arc<AppState>,
    max_upload_bytes: usize,
}

pub fn router(state: Arc<AppState>, max_upload_bytes: usize) -> Router {
    Router::new()
        .route("/healthz", get(healthz))
        .route("/predict", post(predict_handler))
        .layer(DefaultBodyLimit::disable())
        .with_state(Ctx {
            app: state,
            max_upload_bytes,
        })
}

async fn healthz(State(ctx): State<Ctx>) -> Response {
    Json(Health {
        status: "ok",
        classes: ctx.app.model.class_names(),
    })
    .into_response()
}

fn too_large(limit: usize) -> ApiError {
    ApiError(
        StatusCode::PAYLOAD_TOO_LARGE,
        format!("request body exceeds {limit} bytes"),
    )
}

/// Reads at most `limit` bytes; a longer body is drained (up to a cap) and
/// rejected with 413.
async fn read_body(mut body: Body, declared: Option<usize>, limit: usize) -> Result<Bytes, ApiError> {
    let cap = limit.saturating_mul(DRAIN_FACTOR);
    if declared.is_some_and(|n| n > cap) {
        return Err(too_large(limit));
    }
    let mut buf = Vec::new();
    let mut total = 0usize;
    while let Some(frame) = body.frame().await {
        let frame = frame.map_err(|e| ApiError(StatusCode::BAD_REQUEST, format!("reading body: {e}")))?;
        if let Ok(data) = frame.into_data() {
            total = total.saturating_add(data.len());
            if total <= limit {
                buf.extend_from_slice(&data);
            } else if total > cap {
                break;
            }
        }
    }
    if total > limit {
        return Err(too_large(limit));
    }
    Ok(Bytes::from(buf))
}

async fn read_image(ctx: &Ctx, req: Request) -> Result<Bytes, ApiError> {
    let (parts, body) = req.into_parts();
    let declared = parts
        .headers
        .get(header::CONTENT_LENGTH)
        .and_then(|v| v.to_str().ok()?.parse().ok());
    let bytes = read_body(body, declared, ctx.max_upload_bytes).await?;
    let is_multipart = parts
        .headers
        .get(header::CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
        .is_some_and(|v| v.starts_with("multipart/form-data"));
    if is_multipart {
        let req = Request::from_parts(parts, Body::from(bytes));
        let mut form = Multipart::from_request(req, &())
            .await
            .map_err(|e| ApiError(e.status(), e.body_text()))?;
        while let Some(field) = form
            .next_field()
            .await
            .map_err(|e| ApiError(e.status(), e.body_text()))?
        {
            if field.name() == Some("image") {
                return field
                    .bytes()
                    .await
                    .map_err(|e| ApiError(e.status(), e.body_text()));
            }
        }
        Err(ApiError(
            StatusCode::BAD_REQUEST,
            "multipart body has no `image` field".into(),
        ))
    } else {
        Ok(bytes)
    }
}

async fn predict_handler(State(ctx): State<Ctx>, req: Request) -> Response {
    let state = ctx.app.clone();
    let bytes = match read_image(&ctx, req).await {
        Ok(b) => b,
        Err(e) => return e.into_response(),
    };
    if bytes.is_empty() {
        return ApiError(StatusCode::BAD_REQUEST, "empty request body".into()).into_response();
    }
    let shared = Arc::clone(&state);
    let result = tokio::task::spawn_blocking(move || {
        predict(&shared.model, &bytes, &shared.preprocess)
    })
    .await;
    match result {
        Ok(Ok(p)) => Json(PredictResponse::new(&p, state.model.class_names())).into_response(),
        Ok(Err(e @ (scalpnet_core::Error::Decode(_) | scalpnet_core::Error::InvalidArgument(_)))) => {
            ApiError(StatusCode::BAD_REQUEST, e.to_string()).into_response()
        }
        Ok(Err(e)) => {
            tracing::error!("prediction failed: {e}");
            ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()).into_response()
        }
        Err(e) => {
            tracing::error!("prediction task failed: {e}");
            ApiError(StatusCode::INTERNAL_SERVER_ERROR, "prediction task failed".into())
                .into_response()
        }
    }
}

/// A bound but not yet running server.
pub struct Server {
    listener: tokio::net::TcpListener,
    app: Router,
}

impl Server {
    /// Loads the model and binds the listening socket.
    pub async fn bind(cfg: &ServeConfig) -> Result<Server, ServeError> {
        let model = load_model(&cfg.model_path)?;
        let state = Arc::new(AppState {
            model,
            preprocess: cfg.preprocess,
        });
        Self::with_state(state, SocketAddr::new(cfg.bind, cfg.port), cfg.max_upload_bytes).await
    }

    pub async fn with_state(
        state: Arc<AppState>,
        addr: SocketAddr,
        max_upload_bytes: usize,
    ) -> Result<Server, ServeError> {
        let listener = tokio::net::TcpListener::bind(addr)
            .await
            .map_err(|source| ServeError::Bind { addr, source })?;
        Ok(Server {
            listener,
            app: router(state, max_upload_bytes),
        })
    }

    pub fn local_addr(&self) -> Result<SocketAddr, ServeError> {
        Ok(self.listener.local_addr()?)
    }

    /// Serves until `shutdown` resolves.
    pub async fn run_until(
        self,
        shutdown: impl std::future::Future<Output = ()> + Send + 'static,
    ) -> Result<(), ServeError> {
        axum::serve(self.listener, self.app)
            .with_graceful_shutdown(shutdown)
            .await?;
        Ok(())
    }

    /// Serves until Ctrl-C.
    pub async fn run(self) -> Result<(), ServeError> {
        self.run_until(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
    }
}

/// Loads the model, binds, and serves until Ctrl-C on a fresh runtime.
pub fn serve(cfg: &ServeConfig) -> Result<(), ServeError> {
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()?;
    runtime.block_on(async {
        let server = Server::bind(cfg).await?;
        tracing::info!("listening on http://{}", server.local_addr()?);
        server.run().await
    })
}
