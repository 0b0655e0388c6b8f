//! Capturing stub upstream and a gateway spawned on an ephemeral port.
#![allow(dead_code)]

use std::net::SocketAddr;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::HeaderMap;
use axum::routing::{get, post};
use axum::{Json, Router};
use promptveil_core::pipeline::{DeploymentMode, Pipeline, PolicySet};
use promptveil_gateway::{AppState, GatewayConfig, Secret, UpstreamConfig};
use serde_json::{json, Value};

pub const UPSTREAM_KEY: &str = "sk-operator-test-key";
pub const ADMIN_TOKEN: &str = "admin-test-token";

#[derive(Debug, Clone)]
pub struct Captured {
    pub headers: HeaderMap,
    pub body: Bytes,
}

#[derive(Clone, Default)]
pub struct Capture(Arc<Mutex<Vec<Captured>>>);

impl Capture {
    pub fn all(&self) -> Vec<Captured> {
        self.0.lock().unwrap().clone()
    }

    pub fn last(&self) -> Captured {
        self.all().pop().expect("upstream saw a request")
    }

    pub fn clear(&self) {
        self.0.lock().unwrap().clear();
    }
}

/// Replies with the last user message echoed back as the assistant.
async fn echo(State(cap): State<Capture>, headers: HeaderMap, body: Bytes) -> Json<Value> {
    cap.0.lock().unwrap().push(Captured { headers, body: body.clone() });
    let req: Value = serde_json::from_slice(&body).unwrap_or(Value::Null);
    let said = req["messages"]
        .as_array()
        .and_then(|m| m.iter().rev().find(|m| m["role"] == "user"))
        .and_then(|m| m["content"].as_str())
        .unwrap_or("")
        .to_string();
    Json(json!({
        "id": "chatcmpl-1",
        "object": "chat.completion",
        "model": req["model"],
        "choices": [{"index": 0, "message": {"role": "assistant", "content": format!("You said: {said}")}, "finish_reason": "stop"}],
        "usage": {"prompt_tokens": 1, "completion_tokens": 1, "total_tokens": 2}
    }))
}

async fn slow() -> &'static str {
    tokio::time::sleep(Duration::from_secs(5)).await;
    "{}"
}

async fn bind(router: Router) -> SocketAddr {
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move { axum::serve(listener, router).await.unwrap() });
    addr
}

/// Stub at `http://addr/v1`; `/slow/v1/chat/completions` never answers in time.
pub async fn spawn_upstream() -> (String, Capture) {
    let cap = Capture::default();
    let router = Router::new()
        .route("/v1/chat/completions", post(echo))
        .route("/v1", get(|| async { "ok" }))
        .route("/slow/v1/chat/completions", post(slow))
        .with_state(cap.clone());
    let addr = bind(router).await;
    (format!("http://{addr}/v1"), cap)
}

pub struct Gateway {
    pub base: String,
    pub state: Arc<AppState>,
    pub client: reqwest::Client,
}

impl Gateway {
    pub fn url(&self, path: &str) -> String {
        format!("{}{path}", self.base)
    }
}

pub fn config(mode: DeploymentMode, upstream: Option<&str>) -> GatewayConfig {
    GatewayConfig {
        mode,
        upstream: upstream.map(|u| UpstreamConfig { base_url: u.to_string(), credential_env: None }),
        request_timeout_ms: 1000,
        max_text_bytes: 4096,
        ..Default::default()
    }
}

pub async fn spawn_gateway(config: GatewayConfig, pipeline: Pipeline, policies: PolicySet) -> Gateway {
    let state = AppState::new(config, pipeline, policies)
        .unwrap()
        .with_upstream_credential(Secret::new(UPSTREAM_KEY))
        .with_admin_token(Secret::new(ADMIN_TOKEN));
    let state = Arc::new(state);
    let addr = bind(promptveil_gateway::router(Arc::clone(&state))).await;
    Gateway { base: format!("http://{addr}"), state, client: reqwest::Client::new() }
}

pub fn chat(user_text: &str) -> Value {
    json!({
        "model": "test-model",
        "messages": [
            {"role": "system", "content": "You are helpful."},
            {"role": "user", "content": user_text}
        ],
        "temperature": 0.2
    })
}
