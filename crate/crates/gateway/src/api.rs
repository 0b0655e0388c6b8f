use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::rejection::BytesRejection;
use axum::extract::{Path, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::Json;
use promptveil_core::detect::Category;
use promptveil_core::pipeline::{
    resolve_policy, Action, DeploymentMode, EntityOutcome, PipelineError, PolicyOverrides, PolicySet, TransformPolicy,
    Transformed,
};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::{AppState, SESSION_HEADER, USER_HEADER, WORKFLOW_HEADER};

/// Error body `{code, reason}` with its status.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: &'static str,
    pub reason: String,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &'static str, reason: impl Into<String>) -> Self {
        Self { status, code, reason: reason.into() }
    }

    fn malformed(reason: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "malformed", reason)
    }
}

#[derive(Serialize)]
struct ErrorBody<'a> {
    code: &'a str,
    reason: &'a str,
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(ErrorBody { code: self.code, reason: &self.reason })).into_response()
    }
}

impl From<PipelineError> for ApiError {
    fn from(e: PipelineError) -> Self {
        let reason = e.to_string();
        match e {
            PipelineError::BudgetExhausted(_) => Self::new(StatusCode::FORBIDDEN, "budget_exhausted", reason),
            PipelineError::PolicyNotFound(_) => Self::new(StatusCode::UNPROCESSABLE_ENTITY, "unknown_workflow", reason),
            PipelineError::InvalidPolicy(_) => Self::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_policy", reason),
            PipelineError::Assignment(_) | PipelineError::Dp(_) | PipelineError::Bloom(_) => {
                Self::new(StatusCode::INTERNAL_SERVER_ERROR, "transform_failed", reason)
            }
        }
    }
}

pub(crate) fn body(b: Result<Bytes, BytesRejection>) -> Result<Bytes, ApiError> {
    b.map_err(|r| {
        let status = r.status();
        let code = if status == StatusCode::PAYLOAD_TOO_LARGE { "payload_too_large" } else { "malformed" };
        ApiError::new(status, code, r.body_text())
    })
}

fn parse<T: DeserializeOwned>(bytes: &[u8]) -> Result<T, ApiError> {
    serde_json::from_slice(bytes).map_err(|e| ApiError::malformed(e.to_string()))
}

fn header_value(headers: &HeaderMap, name: &str) -> Option<String> {
    headers.get(name).and_then(|v| v.to_str().ok()).map(str::trim).filter(|v| !v.is_empty()).map(str::to_string)
}

/// Who a request belongs to and which policy it selects.
#[derive(Debug, Clone, Default)]
pub(crate) struct Identity {
    pub session: String,
    pub user: Option<String>,
    pub workflow: Option<String>,
}

impl Identity {
    pub fn resolve(
        headers: &HeaderMap,
        session: Option<String>,
        user: Option<String>,
        workflow: Option<String>,
    ) -> Result<Self, ApiError> {
        let session = session
            .filter(|s| !s.is_empty())
            .or_else(|| header_value(headers, SESSION_HEADER))
            .ok_or_else(|| ApiError::new(StatusCode::BAD_REQUEST, "missing_session", "a session id is required"))?;
        Ok(Self {
            session,
            user: user.or_else(|| header_value(headers, USER_HEADER)),
            workflow: workflow.or_else(|| header_value(headers, WORKFLOW_HEADER)),
        })
    }
}

impl AppState {
    /// Resolves the policy once, then transforms each text in order against
    /// the caller's store on a blocking thread.
    pub(crate) async fn transform_texts(
        self: &Arc<Self>,
        who: &Identity,
        texts: Vec<String>,
        overrides: Option<PolicyOverrides>,
    ) -> Result<Vec<Transformed>, ApiError> {
        let max = self.config.max_text_bytes;
        if let Some(t) = texts.iter().find(|t| t.len() > max) {
            return Err(ApiError::new(
                StatusCode::PAYLOAD_TOO_LARGE,
                "text_too_large",
                format!("text is {} bytes; the limit is {max}", t.len()),
            ));
        }
        let set = self.policies();
        let policy = resolve_policy(self.config.mode, who.workflow.as_deref(), &set, overrides.as_ref())?;
        let store = self.registry.open(who.user.as_deref(), &who.session, policy.epsilon_limit);
        let pipeline = Arc::clone(&self.pipeline);
        tokio::task::spawn_blocking(move || {
            let mut rng = rand::rng();
            texts.iter().map(|t| pipeline.transform_prompt(t, &policy, &store, &mut rng)).collect::<Result<Vec<_>, _>>()
        })
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?
        .map_err(ApiError::from)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformRequest {
    #[serde(default)]
    pub session_id: Option<String>,
    #[serde(default)]
    pub workflow: Option<String>,
    #[serde(default)]
    pub user: Option<String>,
    pub text: String,
    #[serde(default)]
    pub config: Option<PolicyOverrides>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransformResponse {
    pub text: String,
    pub entities: Vec<EntityOutcome>,
    pub epsilon_spent: f64,
    pub degraded: bool,
    pub budget_exhausted: bool,
    /// Remaining budget of the account charged, when it has a limit.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon_remaining: Option<f64>,
}

pub(crate) async fn transform(
    State(state): State<Arc<AppState>>,
    headers: HeaderMap,
    raw: Result<Bytes, BytesRejection>,
) -> Result<Json<TransformResponse>, ApiError> {
    let req: TransformRequest = parse(&body(raw)?)?;
    let who = Identity::resolve(&headers, req.session_id, req.user, req.workflow)?;
    let mut out = state.transform_texts(&who, vec![req.text], req.config).await?;
    let t = out.pop().expect("one text in, one result out");
    let remaining = state.registry.get(who.user.as_deref(), &who.session).and_then(|s| s.budget().remaining());
    Ok(Json(TransformResponse {
        text: t.text,
        epsilon_spent: t.report.epsilon_spent_total,
        degraded: t.report.degraded,
        budget_exhausted: t.report.budget_exhausted,
        entities: t.report.entities,
        epsilon_remaining: remaining,
    }))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReverseRequest {
    #[serde(default)]
    pub session_id: Option<String>,
    #[serde(default)]
    pub user: Option<String>,
    pub text: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReverseResponse {
    pub text: String,
    /// No store exists for the session; the text is returned verbatim.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub unknown_session: bool,
}

pub(crate) async fn reverse(
    State(state): State<Arc<AppState>>,
    headers: HeaderMap,
    raw: Result<Bytes, BytesRejection>,
) -> Result<Json<ReverseResponse>, ApiError> {
    let req: ReverseRequest = parse(&body(raw)?)?;
    let who = Identity::resolve(&headers, req.session_id, req.user, None)?;
    Ok(Json(match state.registry.get(who.user.as_deref(), &who.session) {
        Some(store) => {
            ReverseResponse { text: state.pipeline.transform_response(&req.text, &store), unknown_session: false }
        }
        None => ReverseResponse { text: req.text, unknown_session: true },
    }))
}

pub(crate) async fn delete_session(
    State(state): State<Arc<AppState>>,
    headers: HeaderMap,
    Path(id): Path<String>,
) -> Result<StatusCode, ApiError> {
    let user = header_value(&headers, USER_HEADER);
    state
        .registry
        .clear_session(user.as_deref(), &id)
        .map(|()| StatusCode::NO_CONTENT)
        .map_err(|e| ApiError::new(StatusCode::NOT_FOUND, "session_not_found", e.to_string()))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HealthReport {
    pub status: String,
    pub bloom_loaded: bool,
    pub table_loaded: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub upstream_reachable: Option<bool>,
}

fn wants_embeddings(set: &PolicySet) -> bool {
    let uses = |p: &TransformPolicy| p.embedding_enabled && p.action(Category::Name) == Action::EmbedLdp;
    uses(&set.default) || set.workflows.values().any(uses)
}

pub(crate) async fn healthz(State(state): State<Arc<AppState>>) -> Json<HealthReport> {
    let bloom_loaded = state.pipeline.gazetteer().filter(Category::Name).is_some();
    let table_loaded = state.pipeline.table().is_some();
    let upstream_reachable = match (&state.upstream, state.config.mode) {
        (Some(u), DeploymentMode::Gateway) => {
            Some(state.http.get(&u.base_url).timeout(std::time::Duration::from_secs(2)).send().await.is_ok())
        }
        _ => None,
    };
    let ok =
        bloom_loaded && (table_loaded || !wants_embeddings(&state.policies())) && upstream_reachable != Some(false);
    Json(HealthReport {
        status: if ok { "ok" } else { "degraded" }.to_string(),
        bloom_loaded,
        table_loaded,
        upstream_reachable,
    })
}

fn authorize(state: &AppState, headers: &HeaderMap) -> Result<(), ApiError> {
    let Some(token) = &state.admin else {
        return Err(ApiError::new(StatusCode::UNAUTHORIZED, "unauthorized", "policy administration is disabled"));
    };
    let presented =
        headers.get(header::AUTHORIZATION).and_then(|v| v.to_str().ok()).and_then(|v| v.strip_prefix("Bearer "));
    match presented {
        Some(p) if token.matches(p.trim()) => Ok(()),
        _ => Err(ApiError::new(StatusCode::UNAUTHORIZED, "unauthorized", "missing or invalid admin token")),
    }
}

pub(crate) async fn get_policies(
    State(state): State<Arc<AppState>>,
    headers: HeaderMap,
) -> Result<Json<PolicySet>, ApiError> {
    authorize(&state, &headers)?;
    Ok(Json(PolicySet::clone(&state.policies())))
}

/// Name under which `PUT` replaces the default policy.
pub const DEFAULT_WORKFLOW: &str = "default";

pub(crate) async fn put_policy(
    State(state): State<Arc<AppState>>,
    headers: HeaderMap,
    Path(workflow): Path<String>,
    raw: Result<Bytes, BytesRejection>,
) -> Result<Json<PolicySet>, ApiError> {
    authorize(&state, &headers)?;
    let bytes = body(raw)?;
    let policy: TransformPolicy = serde_json::from_slice(&bytes).map_err(|e| {
        if e.is_data() {
            ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_policy", e.to_string())
        } else {
            ApiError::malformed(e.to_string())
        }
    })?;
    policy.validate().map_err(ApiError::from)?;
    let set = state.update_policies(|set| {
        if workflow == DEFAULT_WORKFLOW {
            set.default = policy;
        } else {
            set.workflows.insert(workflow, policy);
        }
    });
    Ok(Json(PolicySet::clone(&set)))
}
