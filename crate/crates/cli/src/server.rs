//! HTTP service around a loaded [`Models`].

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Instant;

use axum::extract::rejection::JsonRejection;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use strata::pipeline::{apply_edits, resolve_graph, Models, PipelineError};
use strata::semgraph::{parse_description, SemanticGraph};

use crate::api::*;

#[derive(Debug)]
pub enum ApiError {
    BadRequest(String),
    Conflict(String),
    Internal(String),
}

impl ApiError {
    fn status(&self) -> StatusCode {
        match self {
            ApiError::BadRequest(_) => StatusCode::BAD_REQUEST,
            ApiError::Conflict(_) => StatusCode::CONFLICT,
            ApiError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

impl From<JsonRejection> for ApiError {
    fn from(r: JsonRejection) -> Self {
        ApiError::BadRequest(r.body_text())
    }
}

impl From<PipelineError> for ApiError {
    fn from(e: PipelineError) -> Self {
        use PipelineError as P;
        match e {
            P::Parse(_) | P::Edit(_) | P::Invalid(_) | P::Config(_) => ApiError::BadRequest(e.to_string()),
            P::Diffusion(strata::diffusion::DiffusionError::Config(_)) => ApiError::BadRequest(e.to_string()),
            P::Mismatch(_) => ApiError::Conflict(e.to_string()),
            _ => ApiError::Internal(e.to_string()),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = self.status();
        let (code, message, id) = match self {
            ApiError::BadRequest(m) => ("bad_request", m, None),
            ApiError::Conflict(m) => ("checkpoint_mismatch", m, None),
            ApiError::Internal(m) => {
                let id = uuid::Uuid::new_v4().to_string();
                log::error!("request failed [{id}]: {m}");
                ("internal", "internal error".to_string(), Some(id))
            }
        };
        (status, Json(ErrorResponse { error: ErrorBody { code: code.into(), message, id } })).into_response()
    }
}

/// Read-only state shared by all requests.
#[derive(Clone)]
pub struct AppState {
    pub models: Arc<Models>,
}

pub fn router(models: Arc<Models>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/parse", post(parse))
        .route("/generate", post(generate))
        .route("/refine", post(refine))
        .with_state(AppState { models })
}

async fn health(State(s): State<AppState>) -> Json<HealthResponse> {
    Json(HealthResponse {
        status: "ok".into(),
        schema_version: API_SCHEMA_VERSION,
        checkpoints: s.models.hashes.clone(),
    })
}

async fn parse(body: Result<Json<ParseRequest>, JsonRejection>) -> Result<Json<ParseResponse>, ApiError> {
    let Json(req) = body?;
    let graph = parse_description(&req.text).map_err(|e| ApiError::BadRequest(e.to_string()))?;
    Ok(Json(ParseResponse { schema_version: API_SCHEMA_VERSION, graph }))
}

fn check_checkpoints(models: &Models, expected: Option<&BTreeMap<String, String>>) -> Result<(), ApiError> {
    let Some(expected) = expected else { return Ok(()) };
    for (name, digest) in expected {
        match models.hashes.get(name) {
            Some(d) if d == digest => {}
            Some(d) => return Err(ApiError::Conflict(format!("{name} is {d}, request expects {digest}"))),
            None => return Err(ApiError::Conflict(format!("service holds no checkpoint {name}"))),
        }
    }
    Ok(())
}

/// Samples on a blocking thread; each request owns its sampler seed.
async fn run(
    models: Arc<Models>,
    graph: SemanticGraph,
    sampler: SamplerOverrides,
    seed: u64,
    frames: Option<usize>,
) -> Result<GenerationResponse, ApiError> {
    let cfg = sampler.apply(&models.config.sampler, seed);
    if frames == Some(0) {
        return Err(ApiError::BadRequest("frames must be positive".into()));
    }
    tokio::task::spawn_blocking(move || {
        let start = Instant::now();
        let f = frames.map(|f| vec![f]);
        let s = models.generate(std::slice::from_ref(&graph), f.as_deref(), &cfg)?.remove(0);
        let ms = start.elapsed().as_secs_f64() * 1e3;
        Ok(GenerationResponse::new(graph, cfg, &s, ms, models.hashes.clone()))
    })
    .await
    .map_err(|e| ApiError::Internal(e.to_string()))?
    .map_err(|e: PipelineError| e.into())
}

async fn generate(
    State(s): State<AppState>,
    body: Result<Json<GenerateRequest>, JsonRejection>,
) -> Result<Json<GenerationResponse>, ApiError> {
    let Json(req) = body?;
    check_checkpoints(&s.models, req.checkpoints.as_ref())?;
    let graph = resolve_graph(req.text.as_deref(), req.graph)?;
    Ok(Json(run(s.models.clone(), graph, req.sampler, req.seed, req.frames).await?))
}

async fn refine(
    State(s): State<AppState>,
    body: Result<Json<RefineRequest>, JsonRejection>,
) -> Result<Json<GenerationResponse>, ApiError> {
    let Json(req) = body?;
    check_checkpoints(&s.models, req.checkpoints.as_ref())?;
    let base = resolve_graph(None, Some(req.graph))?;
    let graph = apply_edits(&base, &req.edits)?;
    Ok(Json(run(s.models.clone(), graph, req.sampler, req.seed, req.frames).await?))
}

pub async fn serve(models: Arc<Models>, addr: &str) -> anyhow::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(models))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
