//! HTTP front end for the prompt transformation pipeline.
//!
//! Native endpoints transform and reverse text against per-session stores;
//! `/v1/chat/completions` proxies an OpenAI-style API, transforming user
//! messages on the way out and restoring originals in the reply.

mod api;
pub mod config;
mod proxy;
pub mod resources;
mod splice;

use std::sync::{Arc, RwLock};

use axum::extract::DefaultBodyLimit;
use axum::routing::{delete, get, post, put};
use axum::Router;
use promptveil_core::pipeline::{DeploymentMode, Pipeline, PolicySet};
use promptveil_core::session::{BudgetScope, LedgerSink, SessionRegistry};
use thiserror::Error;

pub use api::{ApiError, HealthReport, ReverseRequest, ReverseResponse, TransformRequest, TransformResponse};
pub use config::{GatewayConfig, ResourcePaths, Secret, UpstreamConfig, DEFAULT_STRIP_HEADERS};

pub const SESSION_HEADER: &str = "x-wd-session";
pub const USER_HEADER: &str = "x-wd-user";
pub const WORKFLOW_HEADER: &str = "x-wd-workflow";
/// ε spent transforming a proxied request.
pub const EPSILON_HEADER: &str = "x-wd-epsilon-spent";

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("resource: {0}")]
    Resource(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("http client: {0}")]
    Client(String),
}

#[derive(Debug)]
struct Upstream {
    chat_url: String,
    base_url: String,
    credential: Option<Secret>,
}

/// Everything a request handler reads.
#[derive(Debug)]
pub struct AppState {
    config: GatewayConfig,
    pipeline: Arc<Pipeline>,
    policies: RwLock<Arc<PolicySet>>,
    registry: SessionRegistry,
    http: reqwest::Client,
    upstream: Option<Upstream>,
    admin: Option<Secret>,
}

impl AppState {
    /// State without credentials; see [`AppState::with_upstream_credential`]
    /// and [`AppState::with_admin_token`].
    pub fn new(config: GatewayConfig, pipeline: Pipeline, policies: PolicySet) -> Result<Self, GatewayError> {
        config.validate()?;
        policies.validate().map_err(|e| GatewayError::Config(e.to_string()))?;
        let scope = match config.mode {
            DeploymentMode::Device => BudgetScope::PerSession,
            DeploymentMode::Gateway => BudgetScope::PerUser,
        };
        let mut registry = SessionRegistry::new(scope);
        if let Some(path) = &config.resources.ledger {
            registry = registry.with_ledger(LedgerSink::open(path)?);
        }
        let http = reqwest::Client::builder()
            .timeout(config.request_timeout())
            .build()
            .map_err(|e| GatewayError::Client(e.to_string()))?;
        let upstream = config.upstream.as_ref().map(|u| {
            let base = u.base_url.trim_end_matches('/').to_string();
            Upstream { chat_url: format!("{base}/chat/completions"), base_url: base, credential: None }
        });
        Ok(Self {
            config,
            pipeline: Arc::new(pipeline),
            policies: RwLock::new(Arc::new(policies)),
            registry,
            http,
            upstream,
            admin: None,
        })
    }

    /// Loads resources and policies named in `config` and reads credentials
    /// from the configured environment variables.
    pub fn from_config(config: GatewayConfig) -> Result<Self, GatewayError> {
        config.validate()?;
        let pipeline = resources::load_pipeline(&config.resources)?;
        let policies = match &config.policy_file {
            Some(p) => resources::load_policies(p)?,
            None => PolicySet::default(),
        };
        let credential = match config.upstream.as_ref().and_then(|u| u.credential_env.as_deref()) {
            Some(var) => Some(Secret::from_env(var)?),
            None => None,
        };
        let admin = match config.admin_token_env.as_deref() {
            Some(var) => Some(Secret::from_env(var)?),
            None => None,
        };
        let mut state = Self::new(config, pipeline, policies)?;
        if let Some(c) = credential {
            state = state.with_upstream_credential(c);
        }
        if let Some(a) = admin {
            state = state.with_admin_token(a);
        }
        Ok(state)
    }

    pub fn with_upstream_credential(mut self, credential: Secret) -> Self {
        if let Some(u) = &mut self.upstream {
            u.credential = Some(credential);
        }
        self
    }

    pub fn with_admin_token(mut self, token: Secret) -> Self {
        self.admin = Some(token);
        self
    }

    pub fn config(&self) -> &GatewayConfig {
        &self.config
    }

    pub fn pipeline(&self) -> &Arc<Pipeline> {
        &self.pipeline
    }

    pub fn registry(&self) -> &SessionRegistry {
        &self.registry
    }

    /// The current policy set. Each request works from one snapshot.
    pub fn policies(&self) -> Arc<PolicySet> {
        Arc::clone(&self.policies.read().unwrap_or_else(|p| p.into_inner()))
    }

    fn update_policies(&self, f: impl FnOnce(&mut PolicySet)) -> Arc<PolicySet> {
        let mut guard = self.policies.write().unwrap_or_else(|p| p.into_inner());
        let mut next = PolicySet::clone(&guard);
        f(&mut next);
        *guard = Arc::new(next);
        Arc::clone(&guard)
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    let limit = state.config.max_body_bytes;
    Router::new()
        .route("/healthz", get(api::healthz))
        .route("/v1/transform", post(api::transform))
        .route("/v1/reverse", post(api::reverse))
        .route("/v1/sessions/{id}", delete(api::delete_session))
        .route("/v1/policies", get(api::get_policies))
        .route("/v1/policies/{workflow}", put(api::put_policy))
        .route("/v1/chat/completions", post(proxy::chat_completions))
        .layer(DefaultBodyLimit::max(limit))
        .with_state(state)
}

/// Serves on `listener` until ctrl-c.
pub async fn serve_on(listener: tokio::net::TcpListener, state: Arc<AppState>) -> Result<(), GatewayError> {
    axum::serve(listener, router(state).into_make_service())
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}

pub async fn serve(state: Arc<AppState>) -> Result<(), GatewayError> {
    let listener = tokio::net::TcpListener::bind(state.config.listen).await?;
    tracing::info!(addr = %listener.local_addr()?, mode = ?state.config.mode, "listening");
    serve_on(listener, state).await
}
