#![allow(dead_code)]

use confroute::backend::{BackendConfig, GenerateResponse};
use confroute::gateway::{DegradedMode, GatewayConfig, GatewayServer, Threshold};
use confroute::mock_backend::{MockServer, Script};

pub fn response(answer: &str, p_un: f64, p_cn: f64) -> GenerateResponse {
    GenerateResponse {
        answer: answer.into(),
        token_probs: vec![0.8],
        p_un,
        p_cn,
        latency_s: 0.001,
    }
}

pub fn backend(name: &str, base_url: String) -> BackendConfig {
    BackendConfig {
        name: name.into(),
        base_url,
        timeout_ms: 2000,
        max_retries: 0,
    }
}

/// An address nothing listens on.
pub async fn dead_url() -> String {
    let l = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = l.local_addr().unwrap();
    drop(l);
    format!("http://{addr}")
}

pub struct Rig {
    pub local: MockServer,
    pub remote: MockServer,
    pub gateway: GatewayServer,
}

pub async fn rig(local: Script, remote: Script, threshold: Threshold, mode: DegradedMode) -> Rig {
    let local = MockServer::start(local, "127.0.0.1:0").await.unwrap();
    let remote = MockServer::start(remote, "127.0.0.1:0").await.unwrap();
    let gateway = GatewayServer::start(GatewayConfig {
        threshold,
        local: backend("local", local.base_url()),
        remote: backend("remote", remote.base_url()),
        listen_address: "127.0.0.1:0".into(),
        degraded_mode: mode,
    })
    .await
    .unwrap();
    Rig {
        local,
        remote,
        gateway,
    }
}

impl Rig {
    pub async fn shutdown(self) {
        self.gateway.shutdown().await;
        self.local.shutdown().await;
        self.remote.shutdown().await;
    }
}

pub fn client() -> reqwest::Client {
    reqwest::Client::builder().no_proxy().build().unwrap()
}

pub fn query(id: &str) -> serde_json::Value {
    serde_json::json!({
        "id": id,
        "prompt": "which is a multiple of three",
        "choices": [{"letter": "A", "text": "4"}, {"letter": "B", "text": "9"}]
    })
}
