use std::sync::Arc;

use axum::body::{Body, Bytes};
use axum::extract::rejection::BytesRejection;
use axum::extract::State;
use axum::http::{header, HeaderMap, HeaderName, HeaderValue, StatusCode};
use axum::response::Response;

use crate::api::{body, ApiError, Identity};
use crate::splice::{apply, request_slots, response_slots};
use crate::{AppState, EPSILON_HEADER};

/// Never forwarded in either direction, whatever the strip list says.
const HOP_BY_HOP: &[&str] = &[
    "connection",
    "keep-alive",
    "proxy-authenticate",
    "proxy-authorization",
    "proxy-connection",
    "te",
    "trailer",
    "transfer-encoding",
    "upgrade",
    "host",
    "content-length",
];

fn forwardable(name: &HeaderName, strip: &[String]) -> bool {
    let n = name.as_str();
    !(HOP_BY_HOP.contains(&n)
        || n == "authorization"
        || n == "accept-encoding"
        || n.starts_with("x-wd-")
        || strip.iter().any(|s| s.eq_ignore_ascii_case(n)))
}

fn outbound_headers(incoming: &HeaderMap, strip: &[String]) -> HeaderMap {
    let mut out = HeaderMap::new();
    for (name, value) in incoming {
        if forwardable(name, strip) {
            out.append(name.clone(), value.clone());
        }
    }
    out
}

pub(crate) async fn chat_completions(
    State(state): State<Arc<AppState>>,
    headers: HeaderMap,
    raw: Result<Bytes, BytesRejection>,
) -> Result<Response, ApiError> {
    let Some(upstream) = &state.upstream else {
        return Err(ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "no_upstream", "no upstream is configured"));
    };
    let raw = body(raw)?;
    let doc =
        std::str::from_utf8(&raw).map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "malformed", e.to_string()))?;
    let slots =
        request_slots(doc, "user").map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "malformed", e.to_string()))?;
    let who = Identity::resolve(&headers, None, None, None)?;

    let texts = slots.iter().map(|s| s.text.clone()).collect();
    let results = state.transform_texts(&who, texts, None).await?;
    let epsilon = results.iter().fold(0.0, |acc, r| acc + r.report.epsilon_spent_total);
    let edits: Vec<_> =
        slots.iter().zip(&results).filter(|(s, r)| s.text != r.text).map(|(s, r)| s.replace_with(&r.text)).collect();
    // Untouched requests go out byte for byte.
    let outbound: Bytes = if edits.is_empty() { raw.clone() } else { apply(doc, edits).into() };

    let mut req = state
        .http
        .post(&upstream.chat_url)
        .headers(outbound_headers(&headers, &state.config.strip_headers))
        .body(outbound);
    if let Some(c) = &upstream.credential {
        req = req.bearer_auth(c.expose());
    }
    let resp = req.send().await.map_err(upstream_error)?;
    let status = resp.status();
    let resp_headers = resp.headers().clone();
    let resp_body = resp.bytes().await.map_err(upstream_error)?;

    let store = state.registry().get(who.user.as_deref(), &who.session);
    let is_json = resp_headers
        .get(header::CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
        .is_some_and(|ct| ct.starts_with("application/json"));
    let reply: Bytes = match (store, status.is_success() && is_json, std::str::from_utf8(&resp_body)) {
        (Some(store), true, Ok(text)) => match response_slots(text) {
            Ok(slots) => {
                let edits: Vec<_> = slots
                    .iter()
                    .filter_map(|s| {
                        let restored = state.pipeline().transform_response(&s.text, &store);
                        (restored != s.text).then(|| s.replace_with(&restored))
                    })
                    .collect();
                if edits.is_empty() {
                    resp_body
                } else {
                    apply(text, edits).into()
                }
            }
            Err(_) => resp_body,
        },
        _ => resp_body,
    };

    let mut response = Response::builder().status(status);
    for (name, value) in &resp_headers {
        if !HOP_BY_HOP.contains(&name.as_str()) {
            response = response.header(name, value);
        }
    }
    if let Ok(v) = HeaderValue::from_str(&epsilon.to_string()) {
        response = response.header(EPSILON_HEADER, v);
    }
    response
        .body(Body::from(reply))
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))
}

fn upstream_error(e: reqwest::Error) -> ApiError {
    if e.is_timeout() {
        ApiError::new(StatusCode::GATEWAY_TIMEOUT, "upstream_timeout", "the upstream did not answer in time")
    } else {
        // The error text can carry the URL but never headers or credentials.
        tracing::warn!(error = %e, "upstream request failed");
        ApiError::new(StatusCode::BAD_GATEWAY, "upstream_unavailable", "the upstream request failed")
    }
}
