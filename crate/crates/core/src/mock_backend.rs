//! Scripted backend server for tests and offline runs. Replays canned
//! responses keyed by request index or prompt hash, with optional delay and
//! failure injection.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use http_body_util::{BodyExt, Full};
use hyper::body::{Bytes, Incoming};
use hyper::server::conn::http1;
use hyper::service::service_fn;
use hyper::{Method, Request, Response, StatusCode};
use hyper_util::rt::TokioIo;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tokio::net::TcpListener;
use tokio::sync::watch;
use tokio::task::JoinHandle;

use crate::backend::{GenerateRequest, GenerateResponse, GENERATE_PATH, HEALTH_PATH};
use crate::error::{Error, Result};
use crate::types::{Dataset, PredictionRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FailureKind {
    /// Drop the connection without answering.
    ConnectionReset,
    #[serde(rename = "http-500")]
    Http500,
    /// Never answer; the caller has to time out.
    Hang,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlannedFailure {
    pub index: u64,
    pub kind: FailureKind,
}

/// Response keys are either a decimal request index (`"0"`, `"1"`, ...) or
/// `"sha256:<hex>"` of the prompt. The index wins when both match.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Script {
    #[serde(default)]
    pub responses: BTreeMap<String, GenerateResponse>,
    #[serde(default)]
    pub default_response: Option<GenerateResponse>,
    #[serde(default)]
    pub failure_plan: Vec<PlannedFailure>,
    #[serde(default)]
    pub artificial_delay_ms: u64,
}

pub fn prompt_key(prompt: &str) -> String {
    format!("sha256:{:x}", Sha256::digest(prompt.as_bytes()))
}

impl Script {
    /// Every request gets `response`.
    pub fn constant(response: GenerateResponse) -> Self {
        Script {
            default_response: Some(response),
            ..Script::default()
        }
    }

    /// Replay `predictions`, keyed by the hash of each query's rendered prompt.
    pub fn from_predictions(dataset: &Dataset, predictions: &[PredictionRecord]) -> Result<Self> {
        let mut responses = BTreeMap::new();
        for p in predictions {
            let record = dataset
                .get(&p.query_id)
                .ok_or_else(|| Error::UnknownQuery(p.query_id.clone()))?;
            responses.insert(
                prompt_key(&record.rendered_prompt()),
                GenerateResponse::from(p),
            );
        }
        Ok(Script {
            responses,
            ..Script::default()
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let script: Script = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        script.validate()?;
        Ok(script)
    }

    pub fn validate(&self) -> Result<()> {
        for key in self.responses.keys() {
            let ok = match key.strip_prefix("sha256:") {
                Some(hex) => hex.len() == 64 && hex.bytes().all(|b| b.is_ascii_hexdigit()),
                None => key.parse::<u64>().is_ok(),
            };
            if !ok {
                return Err(Error::Config(format!("bad response key {key:?}")));
            }
        }
        for r in self.responses.values().chain(&self.default_response) {
            r.validate().map_err(Error::Config)?;
        }
        Ok(())
    }

    fn failure_at(&self, index: u64) -> Option<FailureKind> {
        self.failure_plan
            .iter()
            .find(|f| f.index == index)
            .map(|f| f.kind)
    }

    fn response_for(&self, index: u64, prompt: &str) -> Option<&GenerateResponse> {
        self.responses
            .get(&index.to_string())
            .or_else(|| self.responses.get(&prompt_key(prompt)))
            .or(self.default_response.as_ref())
    }
}

struct Shared {
    script: Script,
    cursor: AtomicU64,
    shutdown: watch::Receiver<bool>,
}

/// Handle to a running mock server.
pub struct MockServer {
    local_addr: SocketAddr,
    shared: Arc<Shared>,
    stop: watch::Sender<bool>,
    task: JoinHandle<()>,
}

impl MockServer {
    pub async fn start(script: Script, addr: &str) -> Result<Self> {
        script.validate()?;
        let listener = TcpListener::bind(addr)
            .await
            .map_err(|source| Error::Bind {
                addr: addr.to_string(),
                source,
            })?;
        let local_addr = listener.local_addr().map_err(|source| Error::Bind {
            addr: addr.to_string(),
            source,
        })?;
        let (stop, shutdown) = watch::channel(false);
        let shared = Arc::new(Shared {
            script,
            cursor: AtomicU64::new(0),
            shutdown,
        });
        let task = tokio::spawn(accept_loop(listener, shared.clone()));
        Ok(MockServer {
            local_addr,
            shared,
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

    /// Generate requests received so far, including failed ones.
    pub fn request_count(&self) -> u64 {
        self.shared.cursor.load(Ordering::SeqCst)
    }

    /// Stop accepting, release hanging requests and wait for open connections.
    pub async fn shutdown(self) {
        let _ = self.stop.send(true);
        let _ = self.task.await;
    }
}

/// Start a server and return its handle.
pub async fn serve_script(script: Script, listen_address: &str) -> Result<MockServer> {
    MockServer::start(script, listen_address).await
}

async fn accept_loop(listener: TcpListener, shared: Arc<Shared>) {
    let mut shutdown = shared.shutdown.clone();
    let graceful = hyper_util::server::graceful::GracefulShutdown::new();
    loop {
        tokio::select! {
            accepted = listener.accept() => {
                let Ok((stream, _)) = accepted else { continue };
                let _ = stream.set_nodelay(true);
                let shared = shared.clone();
                let service = service_fn(move |req| handle(req, shared.clone()));
                let conn = http1::Builder::new().serve_connection(TokioIo::new(stream), service);
                let conn = graceful.watch(conn);
                tokio::spawn(async move {
                    if let Err(e) = conn.await {
                        tracing::debug!("mock connection closed: {e}");
                    }
                });
            }
            _ = shutdown.changed() => break,
        }
    }
    drop(listener);
    graceful.shutdown().await;
}

#[derive(Debug)]
struct InjectedReset;

impl std::fmt::Display for InjectedReset {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("injected connection reset")
    }
}

impl std::error::Error for InjectedReset {}

type Reply = std::result::Result<Response<Full<Bytes>>, InjectedReset>;

fn json_reply(status: StatusCode, body: &impl Serialize) -> Reply {
    let bytes = serde_json::to_vec(body).expect("serializable reply");
    Ok(Response::builder()
        .status(status)
        .header("content-type", "application/json")
        .body(Full::new(Bytes::from(bytes)))
        .expect("valid response"))
}

fn error_reply(status: StatusCode, message: &str) -> Reply {
    json_reply(status, &serde_json::json!({ "error": message }))
}

async fn handle(req: Request<Incoming>, shared: Arc<Shared>) -> Reply {
    match (req.method(), req.uri().path()) {
        (&Method::GET, HEALTH_PATH) => {
            json_reply(StatusCode::OK, &serde_json::json!({ "status": "ok" }))
        }
        (&Method::POST, GENERATE_PATH) => generate(req, shared).await,
        _ => error_reply(StatusCode::NOT_FOUND, "not found"),
    }
}

async fn generate(req: Request<Incoming>, shared: Arc<Shared>) -> Reply {
    let index = shared.cursor.fetch_add(1, Ordering::SeqCst);
    let body = match req.into_body().collect().await {
        Ok(b) => b.to_bytes(),
        Err(_) => return Err(InjectedReset),
    };
    let script = &shared.script;
    if script.artificial_delay_ms > 0 {
        tokio::time::sleep(Duration::from_millis(script.artificial_delay_ms)).await;
    }
    match script.failure_at(index) {
        Some(FailureKind::ConnectionReset) => return Err(InjectedReset),
        Some(FailureKind::Http500) => {
            return error_reply(StatusCode::INTERNAL_SERVER_ERROR, "injected failure")
        }
        Some(FailureKind::Hang) => {
            let mut shutdown = shared.shutdown.clone();
            let _ = shutdown.wait_for(|stopped| *stopped).await;
            return error_reply(StatusCode::SERVICE_UNAVAILABLE, "shutting down");
        }
        None => {}
    }
    let request: GenerateRequest = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) => return error_reply(StatusCode::BAD_REQUEST, &format!("invalid request: {e}")),
    };
    match script.response_for(index, &request.prompt) {
        Some(r) => json_reply(StatusCode::OK, r),
        None => error_reply(StatusCode::NOT_FOUND, "no scripted response"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn resp(answer: &str) -> GenerateResponse {
        GenerateResponse {
            answer: answer.into(),
            token_probs: vec![0.5],
            p_un: 0.2,
            p_cn: 0.7,
            latency_s: 0.01,
        }
    }

    #[test]
    fn lookup_order() {
        let mut s = Script::constant(resp("default"));
        s.responses.insert("1".into(), resp("index"));
        s.responses.insert(prompt_key("p"), resp("hash"));
        assert_eq!(s.response_for(1, "p").unwrap().answer, "index");
        assert_eq!(s.response_for(0, "p").unwrap().answer, "hash");
        assert_eq!(s.response_for(0, "q").unwrap().answer, "default");
        s.validate().unwrap();
    }

    #[test]
    fn script_json_shape() {
        let text = r#"{
            "responses": {"0": {"answer": "A", "token_probs": [0.9], "p_un": 0.1, "p_cn": 0.8, "latency_s": 0.2}},
            "failure_plan": [{"index": 2, "kind": "connection-reset"}, {"index": 3, "kind": "http-500"}],
            "artificial_delay_ms": 5
        }"#;
        let s: Script = serde_json::from_str(text).unwrap();
        s.validate().unwrap();
        assert_eq!(s.failure_at(2), Some(FailureKind::ConnectionReset));
        assert_eq!(s.failure_at(3), Some(FailureKind::Http500));
        assert_eq!(s.failure_at(0), None);
    }

    #[test]
    fn bad_keys_rejected() {
        let mut s = Script::default();
        s.responses.insert("first".into(), resp("x"));
        assert!(s.validate().is_err());
        let mut s = Script::default();
        s.responses.insert("sha256:abc".into(), resp("x"));
        assert!(s.validate().is_err());
    }

    #[test]
    fn prompt_hash_is_sha256() {
        assert_eq!(
            prompt_key("abc"),
            "sha256:ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
