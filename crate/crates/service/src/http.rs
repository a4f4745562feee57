use std::future::Future;
use std::sync::Arc;
use std::time::Instant;

use axum::body::Body;
use axum::extract::{Path, Request, State};
use axum::http::header;
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use guidecot::dataset::{default_synth_benchmark, load_dataset, synth_dataset, Dataset, WindowConfig};

use crate::api::*;
use crate::config::ServiceConfig;
use crate::engine::{Engine, Models};
use crate::error::ServiceError;

type App = State<Arc<Engine>>;

async fn health(State(e): App) -> Json<Health> {
    Json(e.health().await)
}

async fn scenes(State(e): App) -> Json<Vec<SceneSummary>> {
    Json(e.scenes())
}

async fn scene_image(State(e): App, Path(id): Path<String>) -> Result<Response, ServiceError> {
    let png = e.scene_png(&id)?;
    Ok(([(header::CONTENT_TYPE, "image/png")], Body::from((*png).clone())).into_response())
}

async fn scene_windows(State(e): App, Path(id): Path<String>) -> Result<Json<Vec<WindowSummary>>, ServiceError> {
    Ok(Json(e.windows(&id)?))
}

async fn predict(State(e): App, body: axum::body::Bytes) -> Result<Json<PredictResponse>, ServiceError> {
    let req: PredictRequest = parse(&body)?;
    Ok(Json(e.predict(req.into(), "predict").await?))
}

async fn guided_predict(State(e): App, body: axum::body::Bytes) -> Result<Json<PredictResponse>, ServiceError> {
    let req: GuidedPredictRequest = parse(&body)?;
    Ok(Json(e.predict(req, "guided_predict").await?))
}

async fn reload(State(e): App, body: axum::body::Bytes) -> Result<Json<Health>, ServiceError> {
    let req: ReloadRequest = if body.is_empty() { ReloadRequest::default() } else { parse(&body)? };
    Ok(Json(e.reload(req).await?))
}

/// JSON body parsing with the serde message kept for the client.
fn parse<T: serde::de::DeserializeOwned>(body: &[u8]) -> Result<T, ServiceError> {
    serde_json::from_slice(body).map_err(|e| {
        let msg = e.to_string();
        match msg.split('`').nth(1) {
            Some(field) if msg.contains("field") => ServiceError::Validation {
                field: field.to_string(),
                msg,
            },
            _ => ServiceError::BadRequest(format!("malformed request body: {msg}")),
        }
    })
}

async fn log_requests(req: Request, next: Next) -> Response {
    let method = req.method().clone();
    let path = req.uri().path().to_string();
    let start = Instant::now();
    let resp = next.run(req).await;
    tracing::info!(
        %method,
        %path,
        status = resp.status().as_u16(),
        ms = start.elapsed().as_secs_f64() * 1e3,
        "request"
    );
    resp
}

pub fn router(engine: Arc<Engine>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/scenes", get(scenes))
        .route("/scenes/{id}/image", get(scene_image))
        .route("/scenes/{id}/windows", get(scene_windows))
        .route("/predict", post(predict))
        .route("/guided_predict", post(guided_predict))
        .route("/reload", post(reload))
        .layer(middleware::from_fn(log_requests))
        .with_state(engine)
}

/// Dataset named by the config: a manifest, or the synthetic benchmark.
pub fn load_service_dataset(config: &ServiceConfig) -> Result<Dataset, ServiceError> {
    Ok(match &config.manifest {
        Some(p) => load_dataset(p)?,
        None => synth_dataset(&default_synth_benchmark(config.synth_seed), &WindowConfig::default())?,
    })
}

/// Validates the config, loads data and models, and builds the engine. Models
/// stay unloaded (503 on prediction) unless both checkpoints are configured.
pub fn build_engine(config: ServiceConfig) -> Result<Arc<Engine>, ServiceError> {
    config.validate()?;
    let dataset = load_service_dataset(&config)?;
    let models = match (&config.goal_checkpoint, &config.llm_checkpoint) {
        (Some(g), Some(l)) => Some(Models::load(g, l)?),
        _ => None,
    };
    Ok(Arc::new(Engine::new(config, dataset, models)?))
}

/// Serves until `shutdown` resolves, then finishes in-flight requests.
pub async fn serve(engine: Arc<Engine>, shutdown: impl Future<Output = ()> + Send + 'static) -> Result<(), ServiceError> {
    let addr = format!("{}:{}", engine.config.host, engine.config.port);
    let listener = tokio::net::TcpListener::bind(&addr)
        .await
        .map_err(|e| ServiceError::config("port", format!("cannot bind {addr}: {e}")))?;
    tracing::info!("listening on {addr}");
    axum::serve(listener, router(engine))
        .with_graceful_shutdown(shutdown)
        .await
        .map_err(|e| ServiceError::Internal(e.to_string()))
}
