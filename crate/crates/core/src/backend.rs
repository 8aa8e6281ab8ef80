//! Backend wire contract shared by the gateway and the mock backend, plus an
//! HTTP client that retries only on connection-level failures.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::PredictionRecord;

pub const GENERATE_PATH: &str = "/v1/generate";
pub const HEALTH_PATH: &str = "/healthz";

/// Body of `POST /v1/generate`. Unknown fields are carried through untouched.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateRequest {
    pub prompt: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub query_id: Option<String>,
    #[serde(flatten)]
    pub extra: serde_json::Map<String, serde_json::Value>,
}

impl GenerateRequest {
    pub fn new(prompt: impl Into<String>) -> Self {
        GenerateRequest {
            prompt: prompt.into(),
            query_id: None,
            extra: serde_json::Map::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateResponse {
    pub answer: String,
    pub token_probs: Vec<f64>,
    pub p_un: f64,
    pub p_cn: f64,
    pub latency_s: f64,
}

impl GenerateResponse {
    pub fn validate(&self) -> std::result::Result<(), String> {
        let unit = |p: f64| (0.0..=1.0).contains(&p);
        if !unit(self.p_un) || !unit(self.p_cn) {
            return Err(format!(
                "p_un = {}, p_cn = {} outside [0, 1]",
                self.p_un, self.p_cn
            ));
        }
        if self.p_un + self.p_cn > 1.0 + 1e-9 {
            return Err(format!("p_un + p_cn = {} exceeds 1", self.p_un + self.p_cn));
        }
        if self.token_probs.iter().any(|p| !unit(*p)) {
            return Err("token probability outside [0, 1]".into());
        }
        if !self.latency_s.is_finite() || self.latency_s < 0.0 {
            return Err(format!(
                "latency_s = {} must be finite and >= 0",
                self.latency_s
            ));
        }
        Ok(())
    }
}

impl From<&PredictionRecord> for GenerateResponse {
    fn from(p: &PredictionRecord) -> Self {
        GenerateResponse {
            answer: p.answer.clone(),
            token_probs: p.token_probs.clone(),
            p_un: p.p_un,
            p_cn: p.p_cn,
            latency_s: p.latency_s,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendConfig {
    pub name: String,
    pub base_url: String,
    pub timeout_ms: u64,
    #[serde(default)]
    pub max_retries: u32,
}

/// Retries beyond this are refused at config time.
pub const MAX_RETRIES_LIMIT: u32 = 10;

impl BackendConfig {
    pub fn validate(&self) -> Result<()> {
        if self.timeout_ms == 0 {
            return Err(Error::Config(format!(
                "backend {}: timeout_ms must be positive",
                self.name
            )));
        }
        if self.max_retries > MAX_RETRIES_LIMIT {
            return Err(Error::Config(format!(
                "backend {}: max_retries {} exceeds {MAX_RETRIES_LIMIT}",
                self.name, self.max_retries
            )));
        }
        let url = reqwest::Url::parse(&self.base_url)
            .map_err(|e| Error::Config(format!("backend {}: bad base_url: {e}", self.name)))?;
        if !matches!(url.scheme(), "http" | "https") || url.host().is_none() {
            return Err(Error::Config(format!(
                "backend {}: base_url must be an http(s) URL with a host",
                self.name
            )));
        }
        Ok(())
    }

    pub fn generate_url(&self) -> String {
        format!("{}{GENERATE_PATH}", self.base_url.trim_end_matches('/'))
    }
}

/// Outcome of one successful backend call.
#[derive(Debug, Clone, PartialEq)]
pub struct BackendReply {
    pub response: GenerateResponse,
    /// Wall-clock time across all attempts.
    pub latency_s: f64,
    pub attempts: u32,
}

/// Failed backend call; `attempts` counts every request sent.
#[derive(Debug)]
pub struct BackendFailure {
    pub error: Error,
    pub latency_s: f64,
    pub attempts: u32,
}

/// Build the shared HTTP client. Proxies are ignored: backends are addressed directly.
pub fn http_client() -> Result<reqwest::Client> {
    reqwest::Client::builder()
        .no_proxy()
        .tcp_nodelay(true)
        .build()
        .map_err(|e| Error::Config(format!("http client: {e}")))
}

#[derive(Debug, Clone)]
pub struct BackendClient {
    pub config: BackendConfig,
    http: reqwest::Client,
}

impl BackendClient {
    pub fn new(config: BackendConfig, http: reqwest::Client) -> Result<Self> {
        config.validate()?;
        Ok(BackendClient { config, http })
    }

    /// Call the backend. Connection failures (refused, reset, closed before a
    /// response) are retried up to `max_retries` times; timeouts, HTTP error
    /// statuses and malformed bodies are not.
    pub async fn generate(
        &self,
        request: &GenerateRequest,
    ) -> std::result::Result<BackendReply, BackendFailure> {
        let start = Instant::now();
        let url = self.config.generate_url();
        let timeout = Duration::from_millis(self.config.timeout_ms);
        let mut attempts = 0;
        loop {
            attempts += 1;
            let sent = self
                .http
                .post(&url)
                .timeout(timeout)
                .json(request)
                .send()
                .await;
            let err = match sent {
                Ok(resp) => {
                    let result = self.read_response(resp).await;
                    let latency_s = start.elapsed().as_secs_f64();
                    return match result {
                        Ok(response) => Ok(BackendReply {
                            response,
                            latency_s,
                            attempts,
                        }),
                        Err(error) => Err(BackendFailure {
                            error,
                            latency_s,
                            attempts,
                        }),
                    };
                }
                Err(e) => e,
            };
            let retryable = !err.is_timeout() && (err.is_connect() || err.is_request());
            if !retryable || attempts > self.config.max_retries {
                return Err(BackendFailure {
                    error: self.upstream(format!("{err:#}")),
                    latency_s: start.elapsed().as_secs_f64(),
                    attempts,
                });
            }
            tracing::debug!(backend = %self.config.name, attempts, "retrying after connection error: {err}");
        }
    }

    async fn read_response(&self, resp: reqwest::Response) -> Result<GenerateResponse> {
        let status = resp.status();
        let body = resp
            .bytes()
            .await
            .map_err(|e| self.upstream(format!("reading body: {e}")))?;
        if !status.is_success() {
            let text = String::from_utf8_lossy(&body);
            return Err(self.upstream(format!("HTTP {status}: {}", text.trim())));
        }
        let parsed: GenerateResponse = serde_json::from_slice(&body)
            .map_err(|e| self.upstream(format!("bad response body: {e}")))?;
        parsed.validate().map_err(|m| self.upstream(m))?;
        Ok(parsed)
    }

    fn upstream(&self, message: String) -> Error {
        Error::Upstream {
            backend: self.config.name.clone(),
            message,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> BackendConfig {
        BackendConfig {
            name: "local".into(),
            base_url: "http://127.0.0.1:9000/".into(),
            timeout_ms: 100,
            max_retries: 1,
        }
    }

    #[test]
    fn config_validation() {
        cfg().validate().unwrap();
        assert_eq!(cfg().generate_url(), "http://127.0.0.1:9000/v1/generate");
        for bad in [
            BackendConfig {
                timeout_ms: 0,
                ..cfg()
            },
            BackendConfig {
                max_retries: 11,
                ..cfg()
            },
            BackendConfig {
                base_url: "ftp://x".into(),
                ..cfg()
            },
            BackendConfig {
                base_url: "nonsense".into(),
                ..cfg()
            },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))), "{bad:?}");
        }
    }

    #[test]
    fn request_keeps_extra_fields() {
        let text = r#"{"prompt":"p","query_id":"q","temperature":0}"#;
        let r: GenerateRequest = serde_json::from_str(text).unwrap();
        assert_eq!(r.query_id.as_deref(), Some("q"));
        assert_eq!(r.extra["temperature"], 0);
        let back: serde_json::Value = serde_json::to_value(&r).unwrap();
        assert_eq!(
            back,
            serde_json::from_str::<serde_json::Value>(text).unwrap()
        );
    }

    #[test]
    fn response_validation() {
        let ok = GenerateResponse {
            answer: "B".into(),
            token_probs: vec![0.9],
            p_un: 0.3,
            p_cn: 0.1,
            latency_s: 0.0,
        };
        ok.validate().unwrap();
        assert!(GenerateResponse {
            p_un: 0.95,
            ..ok.clone()
        }
        .validate()
        .is_err());
        assert!(GenerateResponse {
            latency_s: f64::NAN,
            ..ok.clone()
        }
        .validate()
        .is_err());
        assert!(GenerateResponse {
            token_probs: vec![1.5],
            ..ok
        }
        .validate()
        .is_err());
    }
}
