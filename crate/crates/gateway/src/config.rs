use std::fmt;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::time::Duration;

use promptveil_core::pipeline::DeploymentMode;
use serde::{Deserialize, Serialize};

use crate::GatewayError;

/// Headers removed from every proxied request: client addresses, forwarding
/// metadata, the user agent and device identifiers.
pub const DEFAULT_STRIP_HEADERS: &[&str] = &[
    "forwarded",
    "x-forwarded-for",
    "x-forwarded-host",
    "x-forwarded-proto",
    "x-forwarded-port",
    "x-real-ip",
    "x-client-ip",
    "true-client-ip",
    "cf-connecting-ip",
    "fastly-client-ip",
    "x-cluster-client-ip",
    "via",
    "user-agent",
    "cookie",
    "x-device-id",
    "x-device-fingerprint",
    "x-request-id",
];

pub const DEFAULT_LISTEN: &str = "127.0.0.1:8080";
pub const DEFAULT_TIMEOUT_MS: u64 = 30_000;
pub const DEFAULT_MAX_TEXT_BYTES: usize = 64 * 1024;
pub const DEFAULT_MAX_BODY_BYTES: usize = 1024 * 1024;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UpstreamConfig {
    /// Base URL of an OpenAI-style API, e.g. `https://api.example.com/v1`.
    /// Chat requests go to `{base_url}/chat/completions`.
    pub base_url: String,
    /// Name of the environment variable holding the upstream API key.
    pub credential_env: Option<String>,
}

/// Dictionary, filter and table files. Anything unset uses the packaged data.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ResourcePaths {
    /// `name<TAB>gender` lines used for detection and gender inference.
    pub names: Option<PathBuf>,
    /// Serialized name filter; replaces the one built from `names`.
    pub name_filter: Option<PathBuf>,
    pub pseudonyms: Option<PathBuf>,
    pub places: Option<PathBuf>,
    pub place_pseudonyms: Option<PathBuf>,
    pub pronouns: Option<PathBuf>,
    pub terms: Option<PathBuf>,
    pub embedding_table: Option<PathBuf>,
    /// Build a hash-derived table over the pseudonym names when no table
    /// file is given.
    pub synthetic_table: bool,
    /// Append-only ε ledger.
    pub ledger: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GatewayConfig {
    pub listen: SocketAddr,
    pub mode: DeploymentMode,
    pub upstream: Option<UpstreamConfig>,
    /// JSON or TOML policy set; the default policy applies when unset.
    pub policy_file: Option<PathBuf>,
    /// Environment variable holding the bearer token for policy endpoints.
    /// Policy administration is disabled when unset.
    pub admin_token_env: Option<String>,
    pub strip_headers: Vec<String>,
    pub request_timeout_ms: u64,
    pub max_text_bytes: usize,
    pub max_body_bytes: usize,
    pub resources: ResourcePaths,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        Self {
            listen: DEFAULT_LISTEN.parse().expect("valid default address"),
            mode: DeploymentMode::Gateway,
            upstream: None,
            policy_file: None,
            admin_token_env: None,
            strip_headers: DEFAULT_STRIP_HEADERS.iter().map(|s| s.to_string()).collect(),
            request_timeout_ms: DEFAULT_TIMEOUT_MS,
            max_text_bytes: DEFAULT_MAX_TEXT_BYTES,
            max_body_bytes: DEFAULT_MAX_BODY_BYTES,
            resources: ResourcePaths::default(),
        }
    }
}

impl GatewayConfig {
    pub fn from_toml(text: &str) -> Result<Self, GatewayError> {
        let cfg: Self = toml::from_str(text).map_err(|e| GatewayError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, GatewayError> {
        let path = path.as_ref();
        let text =
            std::fs::read_to_string(path).map_err(|e| GatewayError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.mode == DeploymentMode::Gateway && self.upstream.is_none() {
            return Err(GatewayError::Config("gateway mode requires an upstream".into()));
        }
        if let Some(u) = &self.upstream {
            if !(u.base_url.starts_with("http://") || u.base_url.starts_with("https://")) {
                return Err(GatewayError::Config(format!(
                    "upstream base_url must be an http(s) URL, got {:?}",
                    u.base_url
                )));
            }
        }
        if self.request_timeout_ms == 0 {
            return Err(GatewayError::Config("request_timeout_ms must be positive".into()));
        }
        if self.max_text_bytes == 0 || self.max_body_bytes == 0 {
            return Err(GatewayError::Config("size limits must be positive".into()));
        }
        Ok(())
    }

    pub fn request_timeout(&self) -> Duration {
        Duration::from_millis(self.request_timeout_ms)
    }
}

/// A value read from the environment that never appears in output.
#[derive(Clone)]
pub struct Secret(String);

impl Secret {
    pub fn new(value: impl Into<String>) -> Self {
        Self(value.into())
    }

    /// Reads `var`. Missing and empty variables are both errors.
    pub fn from_env(var: &str) -> Result<Self, GatewayError> {
        match std::env::var(var) {
            Ok(v) if !v.is_empty() => Ok(Self(v)),
            _ => Err(GatewayError::Config(format!("environment variable {var} is not set"))),
        }
    }

    pub fn expose(&self) -> &str {
        &self.0
    }

    /// Constant-time comparison.
    pub fn matches(&self, candidate: &str) -> bool {
        let (a, b) = (self.0.as_bytes(), candidate.as_bytes());
        a.len() == b.len() && a.iter().zip(b).fold(0u8, |acc, (x, y)| acc | (x ^ y)) == 0
    }
}

impl fmt::Debug for Secret {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("Secret([redacted])")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gateway_mode_needs_upstream() {
        assert!(GatewayConfig::from_toml("mode = \"gateway\"").is_err());
        let cfg = GatewayConfig::from_toml("mode = \"device\"").unwrap();
        assert!(cfg.upstream.is_none());
        let cfg = GatewayConfig::from_toml(
            r#"
            listen = "0.0.0.0:9000"
            [upstream]
            base_url = "https://llm.internal/v1"
            credential_env = "LLM_KEY"
            "#,
        )
        .unwrap();
        assert_eq!(cfg.mode, DeploymentMode::Gateway);
        assert_eq!(cfg.listen.port(), 9000);
        assert!(cfg.strip_headers.iter().any(|h| h == "x-forwarded-for"));
    }

    #[test]
    fn config_has_no_credential_field() {
        let err =
            GatewayConfig::from_toml("mode = \"device\"\n[upstream]\nbase_url = \"http://x\"\napi_key = \"sk-1\"");
        assert!(err.is_err());
    }

    #[test]
    fn secret_is_redacted() {
        let s = Secret::new("sk-very-secret");
        assert!(!format!("{s:?}").contains("sk-"));
        assert!(s.matches("sk-very-secret"));
        assert!(!s.matches("sk-very-secreT"));
        assert!(!s.matches("sk"));
    }
}
