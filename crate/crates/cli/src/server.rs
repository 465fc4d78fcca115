//! HTTP front end of a serving stack. Wire schema version 1.

use std::collections::BTreeMap;
use std::future::Future;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use axum::extract::State;
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use rankserve_core::pipeline::StageTiming;
use rankserve_core::request::{CandidateItem, InferenceRequest, ScoreResponse};
use rankserve_core::scorer::FeatureGroups;
use rankserve_core::serving::ServingStack;
use serde::{Deserialize, Serialize};
use tokio::net::TcpListener;

use crate::config::ServiceConfig;
use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRequest {
    /// Assigned by the server when absent.
    #[serde(default)]
    pub request_id: Option<u64>,
    #[serde(default)]
    pub tenant: Option<String>,
    pub user: u64,
    #[serde(default)]
    pub user_features: FeatureGroups,
    pub candidates: Vec<CandidateItem>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemResult {
    pub item: u64,
    /// Absent for shed items.
    pub score: Option<f32>,
    pub shed: bool,
    pub cache_hit: bool,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub heads: BTreeMap<String, f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreResponseBody {
    pub request_id: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tenant: Option<String>,
    pub generation: u64,
    pub items: Vec<ItemResult>,
    #[serde(default)]
    pub trace: Vec<StageTiming>,
}

impl From<ScoreResponse> for ScoreResponseBody {
    fn from(r: ScoreResponse) -> Self {
        let mut items: Vec<ItemResult> = r
            .items
            .into_iter()
            .map(|i| ItemResult {
                item: i.item,
                score: Some(i.score),
                shed: false,
                cache_hit: i.cache_hit,
                heads: i.heads,
            })
            .collect();
        items.extend(r.shed.into_iter().map(|s| ItemResult {
            item: s.item,
            score: None,
            shed: true,
            cache_hit: false,
            heads: BTreeMap::new(),
        }));
        Self {
            request_id: r.request_id,
            tenant: r.tenant,
            generation: r.generation,
            items,
            trace: r.trace,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackRequest {
    pub user: u64,
    pub kind: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackResponse {
    pub invalidated: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub ready: bool,
    pub generation: u64,
}

pub struct AppState {
    pub stack: ServingStack,
    next_id: AtomicU64,
}

impl AppState {
    pub fn new(stack: ServingStack) -> Arc<Self> {
        Arc::new(Self {
            stack,
            next_id: AtomicU64::new(1),
        })
    }
}

struct ApiError(StatusCode, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(serde_json::json!({"error": self.1}))).into_response()
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/v1/score", post(score))
        .route("/v1/feedback", post(feedback))
        .route("/v1/health", get(health))
        .route("/v1/metrics", get(metrics))
        .with_state(state)
}

async fn score(State(app): State<Arc<AppState>>, Json(req): Json<ScoreRequest>) -> Result<Json<ScoreResponseBody>, ApiError> {
    if req.candidates.is_empty() {
        return Err(ApiError(StatusCode::BAD_REQUEST, "no candidates".into()));
    }
    let request = InferenceRequest {
        request_id: req.request_id.unwrap_or_else(|| app.next_id.fetch_add(1, Ordering::Relaxed)),
        tenant: req.tenant,
        user: req.user,
        user_features: req.user_features,
        candidates: req.candidates,
    };
    let (tx, rx) = tokio::sync::oneshot::channel();
    app.stack.submit(request, None, move |r| {
        let _ = tx.send(r);
    });
    match rx.await {
        Ok(Ok(resp)) => Ok(Json(resp.into())),
        Ok(Err(e)) => Err(ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())),
        Err(_) => Err(ApiError(StatusCode::SERVICE_UNAVAILABLE, "pipeline closed".into())),
    }
}

async fn feedback(State(app): State<Arc<AppState>>, Json(req): Json<FeedbackRequest>) -> Json<FeedbackResponse> {
    Json(FeedbackResponse {
        invalidated: app.stack.feedback(req.user, &req.kind, None),
    })
}

async fn health(State(app): State<Arc<AppState>>) -> Json<Health> {
    Json(Health {
        ready: true,
        generation: app.stack.generation(),
    })
}

async fn metrics(State(app): State<Arc<AppState>>) -> impl IntoResponse {
    ([(header::CONTENT_TYPE, "text/plain; version=0.0.4")], app.stack.metrics_text())
}

/// Opens the stack on the newest generation under the model root and starts
/// the model watcher.
pub fn open_stack(config: &ServiceConfig) -> Result<ServingStack, CliError> {
    let stack_config = config.validate()?;
    let stack = ServingStack::open_root(stack_config, &config.model_root).map_err(|e| CliError::ModelLoad(e.to_string()))?;
    stack.watch(config.model_root.clone(), Duration::from_millis(config.poll_interval_ms));
    Ok(stack)
}

/// Serves until `shutdown` resolves. `on_bound` receives the bound address,
/// which differs from the configured one when the port is 0.
pub async fn serve(
    config: ServiceConfig,
    on_bound: impl FnOnce(std::net::SocketAddr),
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> Result<(), CliError> {
    let stack = open_stack(&config)?;
    let listener = TcpListener::bind(&config.listen)
        .await
        .map_err(|e| CliError::Bind(format!("{}: {e}", config.listen)))?;
    let addr = listener.local_addr().map_err(|e| CliError::Bind(e.to_string()))?;
    log::info!("serving generation {} on {addr}", stack.generation());
    on_bound(addr);
    axum::serve(listener, router(AppState::new(stack)))
        .with_graceful_shutdown(shutdown)
        .await
        .map_err(|e| CliError::Runtime(e.to_string()))
}
