//! HTTP routing gateway: ask the local backend, read its confidence, and
//! forward to the remote backend when the confidence is below threshold.

mod config;
mod metrics;

use std::net::SocketAddr;
use std::sync::atomic::Ordering;
use std::sync::{Arc, RwLock};
use std::time::Instant;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use tokio::net::TcpListener;
use tokio::sync::oneshot;
use tokio::task::JoinHandle;

pub use config::{DegradedMode, GatewayConfig, Threshold, ENV_LISTEN_ADDRESS, ENV_THRESHOLD};
pub use metrics::{Histogram, HistogramSnapshot, Metrics, MetricsSnapshot, LATENCY_BUCKETS_S};

use crate::backend::{http_client, BackendClient, GenerateRequest, HEALTH_PATH};
use crate::confidence::self_ref_score;
use crate::error::{Error, Result};
use crate::routing::{route_value, RouteDecision};
use crate::types::{check_letters, render_prompt, Choice};

pub const QUERY_PATH: &str = "/v1/query";
pub const METRICS_PATH: &str = "/metrics";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryRequest {
    pub id: String,
    pub prompt: String,
    #[serde(default)]
    pub choices: Option<Vec<Choice>>,
}

impl QueryRequest {
    fn validate(&self) -> std::result::Result<(), String> {
        if self.id.is_empty() {
            return Err("id must be nonempty".into());
        }
        if let Some(c) = &self.choices {
            check_letters(c)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouteResponse {
    pub query_id: String,
    pub answer: String,
    pub model_used: RouteDecision,
    pub confidence: f64,
    pub local_latency_s: f64,
    /// Set when the remote backend answered or a remote attempt failed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub remote_latency_s: Option<f64>,
    pub degraded: bool,
}

#[derive(Debug, thiserror::Error)]
pub enum GatewayError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error(transparent)]
    Upstream(Error),
}

impl GatewayError {
    fn status(&self) -> StatusCode {
        match self {
            GatewayError::InvalidRequest(_) => StatusCode::BAD_REQUEST,
            GatewayError::Upstream(_) => StatusCode::BAD_GATEWAY,
        }
    }

    fn code(&self) -> &'static str {
        match self {
            GatewayError::InvalidRequest(_) => "invalid-request",
            GatewayError::Upstream(_) => "upstream-error",
        }
    }
}

impl IntoResponse for GatewayError {
    fn into_response(self) -> Response {
        let body = serde_json::json!({ "error": self.code(), "message": self.to_string() });
        (self.status(), Json(body)).into_response()
    }
}

/// One immutable policy: a request reads it once and keeps it to the end.
struct Active {
    config: Arc<GatewayConfig>,
    local: BackendClient,
    remote: BackendClient,
}

pub struct Gateway {
    active: RwLock<Arc<Active>>,
    http: reqwest::Client,
    metrics: Metrics,
}

impl Gateway {
    pub fn new(config: GatewayConfig) -> Result<Arc<Self>> {
        let http = http_client()?;
        let active = Self::activate(config, &http)?;
        Ok(Arc::new(Gateway {
            active: RwLock::new(active),
            http,
            metrics: Metrics::default(),
        }))
    }

    fn activate(config: GatewayConfig, http: &reqwest::Client) -> Result<Arc<Active>> {
        config.validate()?;
        Ok(Arc::new(Active {
            local: BackendClient::new(config.local.clone(), http.clone())?,
            remote: BackendClient::new(config.remote.clone(), http.clone())?,
            config: Arc::new(config),
        }))
    }

    fn snapshot(&self) -> Arc<Active> {
        self.active.read().expect("config lock poisoned").clone()
    }

    pub fn config(&self) -> Arc<GatewayConfig> {
        self.snapshot().config.clone()
    }

    /// Swap in a new config. Requests already in flight keep the old one.
    pub fn set_config(&self, config: GatewayConfig) -> Result<()> {
        let next = Self::activate(config, &self.http)?;
        *self.active.write().expect("config lock poisoned") = next;
        Ok(())
    }

    pub fn set_threshold(&self, threshold: Threshold) -> Result<()> {
        let mut cfg = (*self.config()).clone();
        cfg.threshold = threshold;
        self.set_config(cfg)
    }

    pub fn metrics(&self) -> MetricsSnapshot {
        self.metrics.snapshot()
    }

    pub async fn handle_query(
        &self,
        query: &QueryRequest,
    ) -> std::result::Result<RouteResponse, GatewayError> {
        let start = Instant::now();
        self.metrics.requests_total.fetch_add(1, Ordering::SeqCst);
        let result = self.route_query(query).await;
        if result.is_err() {
            self.metrics.errors_total.fetch_add(1, Ordering::SeqCst);
        }
        self.metrics
            .total_latency
            .observe(start.elapsed().as_secs_f64());
        result
    }

    async fn route_query(
        &self,
        query: &QueryRequest,
    ) -> std::result::Result<RouteResponse, GatewayError> {
        query.validate().map_err(GatewayError::InvalidRequest)?;
        let active = self.snapshot();
        let request = GenerateRequest {
            query_id: Some(query.id.clone()),
            ..GenerateRequest::new(render_prompt(&query.prompt, query.choices.as_deref()))
        };

        let local = active
            .local
            .generate(&request)
            .await
            .map_err(|f| GatewayError::Upstream(f.error))?;
        self.metrics.local_latency.observe(local.latency_s);
        let confidence = self_ref_score(local.response.p_un, local.response.p_cn)
            .map_err(|e| {
                GatewayError::Upstream(Error::Upstream {
                    backend: active.local.config.name.clone(),
                    message: format!("unusable confidence probabilities: {e}"),
                })
            })?
            .value;
        let mut reply = RouteResponse {
            query_id: query.id.clone(),
            answer: local.response.answer,
            model_used: RouteDecision::Local,
            confidence,
            local_latency_s: local.latency_s,
            remote_latency_s: None,
            degraded: false,
        };
        if route_value(confidence, active.config.threshold.value()) == RouteDecision::Local {
            return Ok(reply);
        }

        self.metrics
            .remote_calls_total
            .fetch_add(1, Ordering::SeqCst);
        match active.remote.generate(&request).await {
            Ok(remote) => {
                self.metrics.remote_latency.observe(remote.latency_s);
                self.metrics.routed_total.fetch_add(1, Ordering::SeqCst);
                reply.answer = remote.response.answer;
                reply.model_used = RouteDecision::Remote;
                reply.remote_latency_s = Some(remote.latency_s);
                Ok(reply)
            }
            Err(failure) => {
                self.metrics.remote_latency.observe(failure.latency_s);
                match active.config.degraded_mode {
                    DegradedMode::FallbackToLocal => {
                        tracing::warn!(query = %query.id, "remote failed, serving local answer: {}", failure.error);
                        self.metrics.degraded_total.fetch_add(1, Ordering::SeqCst);
                        reply.remote_latency_s = Some(failure.latency_s);
                        reply.degraded = true;
                        Ok(reply)
                    }
                    DegradedMode::Error => Err(GatewayError::Upstream(failure.error)),
                }
            }
        }
    }
}

async fn query_handler(
    State(gw): State<Arc<Gateway>>,
    body: Bytes,
) -> std::result::Result<Json<RouteResponse>, GatewayError> {
    let query: QueryRequest = match serde_json::from_slice(&body) {
        Ok(q) => q,
        Err(e) => {
            // Malformed bodies still count as requests.
            gw.metrics.requests_total.fetch_add(1, Ordering::SeqCst);
            gw.metrics.errors_total.fetch_add(1, Ordering::SeqCst);
            return Err(GatewayError::InvalidRequest(e.to_string()));
        }
    };
    gw.handle_query(&query).await.map(Json)
}

async fn metrics_handler(State(gw): State<Arc<Gateway>>) -> Json<MetricsSnapshot> {
    Json(gw.metrics())
}

pub fn router(gateway: Arc<Gateway>) -> Router {
    Router::new()
        .route(QUERY_PATH, post(query_handler))
        .route(
            HEALTH_PATH,
            get(|| async { Json(serde_json::json!({ "status": "ok" })) }),
        )
        .route(METRICS_PATH, get(metrics_handler))
        .with_state(gateway)
}

/// Handle to a gateway listening on a socket.
pub struct GatewayServer {
    pub gateway: Arc<Gateway>,
    local_addr: SocketAddr,
    stop: oneshot::Sender<()>,
    task: JoinHandle<std::io::Result<()>>,
}

impl GatewayServer {
    /// Bind `config.listen_address` and serve until [`GatewayServer::shutdown`].
    pub async fn start(config: GatewayConfig) -> Result<Self> {
        let addr = config.listen_address.clone();
        let gateway = Gateway::new(config)?;
        let listener = TcpListener::bind(&addr)
            .await
            .map_err(|source| Error::Bind {
                addr: addr.clone(),
                source,
            })?;
        let local_addr = listener
            .local_addr()
            .map_err(|source| Error::Bind { addr, source })?;
        let (stop, stopped) = oneshot::channel::<()>();
        let app = router(gateway.clone());
        let task = tokio::spawn(async move {
            axum::serve(listener, app)
                .with_graceful_shutdown(async {
                    let _ = stopped.await;
                })
                .await
        });
        Ok(GatewayServer {
            gateway,
            local_addr,
            stop,
            task,
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.local_addr
    }

    pub fn base_url(&self) -> String {
        format!("http://{}", self.local_addr)
    }

    /// Resolves when the server task ends on its own (it normally does not).
    pub async fn wait(&mut self) -> Result<()> {
        match (&mut self.task).await {
            Ok(r) => r.map_err(|e| Error::Bind {
                addr: self.local_addr.to_string(),
                source: e,
            }),
            Err(e) => Err(Error::Config(format!("server task failed: {e}"))),
        }
    }

    pub async fn shutdown(self) {
        let _ = self.stop.send(());
        let _ = self.task.await;
    }
}
