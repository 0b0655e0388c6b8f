//! Randomized privacy mechanisms.
//!
//! Every sampler takes the generator explicitly and requires
//! [`CryptoRng`](rand::CryptoRng): predictable noise voids the mechanism.
//! Tests seed a ChaCha generator for bit-for-bit reproducibility.

mod embedding;
mod fields;
mod laplace;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use embedding::{
    embed_ldp, nearest_neighbor, perturb_and_decode, source_vector, synthetic_vector, EmbedSource, Embedder,
    EmbeddingEntry, EmbeddingTable, LdpOutcome, TableError, DEFAULT_EMBEDDING_DIM, DEFAULT_SYNTHETIC_KEY,
    NORM_TOLERANCE, TABLE_HEADER_LEN, TABLE_MAGIC, TABLE_VERSION,
};
pub use fields::{
    mask_email, noise_credit_card, noise_date, noise_phone, noise_ssn, noise_zip, redact, FieldNoise, Sensitivities,
    DATE_SENSITIVITY_DAYS, LAST4_SENSITIVITY, ZIP_SENSITIVITY,
};
pub use laplace::{laplace_fill, laplace_from_uniform, laplace_sample, noise_integer, LaplaceParams};

#[derive(Debug, Error, PartialEq)]
pub enum DpError {
    #[error("epsilon must be positive and finite, got {0}")]
    InvalidEpsilon(f64),
    #[error("sensitivity must be positive and finite, got {0}")]
    InvalidSensitivity(f64),
    #[error("value {value} outside clamp range [{lo}, {hi}]")]
    OutOfRange { value: i64, lo: i64, hi: i64 },
    #[error("no {0} entries in the embedding table")]
    EmptyPartition(crate::dictionary::Gender),
    #[error("vector has dimension {actual}, table dimension is {expected}")]
    DimensionMismatch { expected: usize, actual: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mechanism {
    Laplace,
    EmbedLdp,
    Redact,
    Mask,
    Pseudonym,
}

impl Mechanism {
    pub fn as_str(self) -> &'static str {
        match self {
            Mechanism::Laplace => "laplace",
            Mechanism::EmbedLdp => "embed_ldp",
            Mechanism::Redact => "redact",
            Mechanism::Mask => "mask",
            Mechanism::Pseudonym => "pseudonym",
        }
    }

    /// Whether this mechanism consumes privacy budget.
    pub fn is_randomized(self) -> bool {
        matches!(self, Mechanism::Laplace | Mechanism::EmbedLdp)
    }
}

impl std::fmt::Display for Mechanism {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// What happened to one sensitive value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseOutcome {
    pub original: String,
    pub replacement: String,
    pub epsilon_spent: f64,
    pub mechanism: Mechanism,
    /// The embedding came from the hash-derived fallback, not a model.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub synthetic_embedding: bool,
    /// Served from the session cache; nothing was sampled or charged.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub cached: bool,
}

pub(crate) fn check_epsilon(epsilon: f64) -> Result<(), DpError> {
    if epsilon > 0.0 && epsilon.is_finite() {
        Ok(())
    } else {
        Err(DpError::InvalidEpsilon(epsilon))
    }
}
