//! Pluggable NER confirmation stage.
//!
//! The wire protocol for an external service is a single JSON POST:
//! `{"sentence": "...", "labels": [...]}` answered by
//! `{"spans": [{"start", "end", "label", "confidence"}]}` with byte offsets
//! into the sentence.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::Category;

pub const DEFAULT_NER_THRESHOLD: f64 = 0.5;
pub const DEFAULT_NER_TIMEOUT_MS: u64 = 500;
pub const DEFAULT_NER_LABELS: [&str; 3] = ["person", "location", "organization"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NerMode {
    External,
    #[default]
    Fallback,
}

#[derive(Debug, Error)]
pub enum NerError {
    #[error("external NER mode requires an endpoint")]
    MissingEndpoint,
    #[error("fallback NER mode takes no endpoint")]
    UnexpectedEndpoint,
    #[error("confidence threshold must lie in [0, 1], got {0}")]
    BadThreshold(f64),
    #[error("NER provider unreachable: {0}")]
    Unreachable(String),
    #[error("NER provider returned a malformed response: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NerProviderConfig {
    pub mode: NerMode,
    #[serde(default)]
    pub endpoint: Option<String>,
    #[serde(default = "default_labels")]
    pub labels: Vec<String>,
    #[serde(default = "default_threshold")]
    pub confidence_threshold: f64,
    #[serde(default = "default_timeout")]
    pub timeout_ms: u64,
}

fn default_labels() -> Vec<String> {
    DEFAULT_NER_LABELS.iter().map(|s| s.to_string()).collect()
}

fn default_threshold() -> f64 {
    DEFAULT_NER_THRESHOLD
}

fn default_timeout() -> u64 {
    DEFAULT_NER_TIMEOUT_MS
}

impl Default for NerProviderConfig {
    fn default() -> Self {
        Self::fallback()
    }
}

impl NerProviderConfig {
    pub fn fallback() -> Self {
        Self {
            mode: NerMode::Fallback,
            endpoint: None,
            labels: default_labels(),
            confidence_threshold: DEFAULT_NER_THRESHOLD,
            timeout_ms: DEFAULT_NER_TIMEOUT_MS,
        }
    }

    pub fn external(endpoint: impl Into<String>) -> Self {
        Self { mode: NerMode::External, endpoint: Some(endpoint.into()), ..Self::fallback() }
    }

    pub fn validate(&self) -> Result<(), NerError> {
        match (self.mode, &self.endpoint) {
            (NerMode::External, None) => return Err(NerError::MissingEndpoint),
            (NerMode::Fallback, Some(_)) => return Err(NerError::UnexpectedEndpoint),
            _ => {}
        }
        if !(0.0..=1.0).contains(&self.confidence_threshold) {
            return Err(NerError::BadThreshold(self.confidence_threshold));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct NerRequest<'a> {
    pub sentence: &'a str,
    pub labels: &'a [String],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NerSpan {
    pub start: usize,
    pub end: usize,
    pub label: String,
    pub confidence: f64,
}

impl NerSpan {
    /// Whether this provider label can confirm a dictionary hit of `category`.
    pub fn confirms(&self, category: Category) -> bool {
        let label = self.label.to_ascii_lowercase();
        match category {
            Category::Name => matches!(label.as_str(), "person" | "per" | "name"),
            Category::City => matches!(label.as_str(), "location" | "loc" | "city" | "gpe"),
            Category::Country => matches!(label.as_str(), "location" | "loc" | "country" | "gpe"),
            Category::Organization => matches!(label.as_str(), "organization" | "org"),
            _ => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NerResponse {
    pub spans: Vec<NerSpan>,
}

/// Confirms dictionary candidates in context.
pub trait NerProvider: Send + Sync {
    fn recognize(&self, sentence: &str, labels: &[String]) -> Result<Vec<NerSpan>, NerError>;
}

/// Blocking HTTP client for an external NER service.
pub struct HttpNerProvider {
    endpoint: String,
    agent: ureq::Agent,
}

impl HttpNerProvider {
    pub fn new(endpoint: impl Into<String>, timeout: Duration) -> Self {
        let agent =
            ureq::Agent::config_builder().timeout_global(Some(timeout)).http_status_as_error(true).build().into();
        Self { endpoint: endpoint.into(), agent }
    }

    pub fn from_config(config: &NerProviderConfig) -> Result<Self, NerError> {
        config.validate()?;
        let endpoint = config.endpoint.clone().ok_or(NerError::MissingEndpoint)?;
        Ok(Self::new(endpoint, Duration::from_millis(config.timeout_ms)))
    }
}

impl NerProvider for HttpNerProvider {
    fn recognize(&self, sentence: &str, labels: &[String]) -> Result<Vec<NerSpan>, NerError> {
        let mut response = self
            .agent
            .post(&self.endpoint)
            .send_json(NerRequest { sentence, labels })
            .map_err(|e| NerError::Unreachable(e.to_string()))?;
        let body: NerResponse = response.body_mut().read_json().map_err(|e| NerError::Malformed(e.to_string()))?;
        for s in &body.spans {
            if s.start >= s.end
                || s.end > sentence.len()
                || !sentence.is_char_boundary(s.start)
                || !sentence.is_char_boundary(s.end)
            {
                return Err(NerError::Malformed(format!(
                    "span {}..{} outside sentence of {} bytes",
                    s.start,
                    s.end,
                    sentence.len()
                )));
            }
        }
        Ok(body.spans)
    }
}
