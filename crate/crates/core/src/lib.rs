//! Prompt privacy transformations for LLM-bound text.

pub mod detect;
pub mod dictionary;
pub mod dp;
pub mod pipeline;
pub mod pseudonym;
pub mod session;
mod text;

pub use text::{match_case, normalize_token};
