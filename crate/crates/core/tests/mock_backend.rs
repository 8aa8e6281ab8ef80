mod common;

use std::time::Instant;

use common::{client, response};
use confroute::backend::{GenerateRequest, GenerateResponse};
use confroute::mock_backend::{prompt_key, FailureKind, MockServer, PlannedFailure, Script};

async fn post(c: &reqwest::Client, base: &str, prompt: &str) -> reqwest::Result<reqwest::Response> {
    c.post(format!("{base}/v1/generate"))
        .json(&GenerateRequest::new(prompt))
        .send()
        .await
}

#[tokio::test]
async fn single_response_verbatim() {
    let r = response("B", 0.3, 0.1);
    let mut script = Script::default();
    script.responses.insert("0".into(), r.clone());
    let server = MockServer::start(script, "127.0.0.1:0").await.unwrap();
    let got: GenerateResponse = post(&client(), &server.base_url(), "x")
        .await
        .unwrap()
        .json()
        .await
        .unwrap();
    assert_eq!(got, r);
    let health = client()
        .get(format!("{}/healthz", server.base_url()))
        .send()
        .await
        .unwrap();
    assert_eq!(health.status(), 200);
    server.shutdown().await;
}

#[tokio::test]
async fn reset_then_success() {
    let script = Script {
        failure_plan: vec![PlannedFailure {
            index: 0,
            kind: FailureKind::ConnectionReset,
        }],
        ..Script::constant(response("A", 0.1, 0.9))
    };
    let server = MockServer::start(script, "127.0.0.1:0").await.unwrap();
    let c = client();
    let first = post(&c, &server.base_url(), "x").await;
    assert!(first.is_err(), "{first:?}");
    let second = post(&c, &server.base_url(), "x").await.unwrap();
    assert_eq!(second.status(), 200);
    assert_eq!(server.request_count(), 2);
    server.shutdown().await;
}

#[tokio::test]
async fn http_500_and_missing_response() {
    let script = Script {
        failure_plan: vec![PlannedFailure {
            index: 0,
            kind: FailureKind::Http500,
        }],
        ..Script::default()
    };
    let server = MockServer::start(script, "127.0.0.1:0").await.unwrap();
    let c = client();
    assert_eq!(
        post(&c, &server.base_url(), "x").await.unwrap().status(),
        500
    );
    assert_eq!(
        post(&c, &server.base_url(), "x").await.unwrap().status(),
        404
    );
    server.shutdown().await;
}

#[tokio::test]
async fn delay_is_applied() {
    let script = Script {
        artificial_delay_ms: 50,
        ..Script::constant(response("A", 0.1, 0.9))
    };
    let server = MockServer::start(script, "127.0.0.1:0").await.unwrap();
    let start = Instant::now();
    post(&client(), &server.base_url(), "x").await.unwrap();
    assert!(start.elapsed().as_millis() >= 50);
    server.shutdown().await;
}

#[tokio::test]
async fn prompt_hash_and_determinism() {
    let mut script = Script::constant(response("default", 0.5, 0.5));
    script
        .responses
        .insert(prompt_key("alpha"), response("A", 0.2, 0.8));
    script
        .responses
        .insert("2".into(), response("third", 0.0, 1.0));
    let prompts = ["alpha", "beta", "alpha", "alpha"];
    let mut runs = Vec::new();
    for _ in 0..2 {
        let server = MockServer::start(script.clone(), "127.0.0.1:0")
            .await
            .unwrap();
        let c = client();
        let mut answers = Vec::new();
        for p in prompts {
            let r: GenerateResponse = post(&c, &server.base_url(), p)
                .await
                .unwrap()
                .json()
                .await
                .unwrap();
            answers.push(r.answer);
        }
        server.shutdown().await;
        runs.push(answers);
    }
    assert_eq!(runs[0], ["A", "default", "third", "A"]);
    assert_eq!(runs[0], runs[1]);
}

#[tokio::test]
async fn shutdown_releases_hanging_request() {
    let script = Script {
        failure_plan: vec![PlannedFailure {
            index: 0,
            kind: FailureKind::Hang,
        }],
        ..Script::constant(response("A", 0.1, 0.9))
    };
    let server = MockServer::start(script, "127.0.0.1:0").await.unwrap();
    let base = server.base_url();
    let pending = tokio::spawn(async move { post(&client(), &base, "x").await });
    while server.request_count() == 0 {
        tokio::time::sleep(std::time::Duration::from_millis(5)).await;
    }
    tokio::time::timeout(std::time::Duration::from_secs(5), server.shutdown())
        .await
        .expect("graceful shutdown finishes");
    let _ = pending.await;
}

#[tokio::test]
async fn bind_error() {
    let taken = MockServer::start(Script::default(), "127.0.0.1:0")
        .await
        .unwrap();
    let err = MockServer::start(Script::default(), &taken.local_addr().to_string()).await;
    assert!(matches!(err, Err(confroute::Error::Bind { .. })));
    taken.shutdown().await;
}
