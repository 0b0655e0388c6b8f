//! Locating sensitive fields in prompt text.
//!
//! Structured fields (phones, emails, card numbers, ...) come from anchored
//! regular expressions over raw sentence text. Context-aware fields (names,
//! places, organizations) go through two stages: a Bloom filter over the
//! packaged dictionary discards guaranteed non-members, and the survivors are
//! confirmed either by an external NER service or by a capitalization and
//! position heuristic.

mod bloom;
mod names;
mod ner;
mod segment;
mod structured;

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use bloom::{
    BloomError, BloomFilter, BloomParams, BLOOM_HEADER_LEN, BLOOM_MAGIC, BLOOM_VERSION, DEFAULT_BLOOM_SEED,
};
pub use names::{detect_names, Gazetteer, NameDetection, CONTINUATION_WORDS};
pub use ner::{
    HttpNerProvider, NerError, NerMode, NerProvider, NerProviderConfig, NerRequest, NerResponse, NerSpan,
    DEFAULT_NER_LABELS, DEFAULT_NER_THRESHOLD, DEFAULT_NER_TIMEOUT_MS,
};
pub use segment::{segment_sentences, tokenize, Token, ABBREVIATIONS};
pub use structured::{detect_structured, resolve_overlaps};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Name,
    City,
    Country,
    Organization,
    Phone,
    Email,
    Ssn,
    CreditCard,
    Zip,
    Date,
}

impl Category {
    pub const ALL: [Category; 10] = [
        Category::Name,
        Category::City,
        Category::Country,
        Category::Organization,
        Category::Phone,
        Category::Email,
        Category::Ssn,
        Category::CreditCard,
        Category::Zip,
        Category::Date,
    ];

    /// Fields found by the dictionary + NER stages rather than by pattern.
    pub fn is_contextual(self) -> bool {
        matches!(self, Category::Name | Category::City | Category::Country | Category::Organization)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Category::Name => "name",
            Category::City => "city",
            Category::Country => "country",
            Category::Organization => "organization",
            Category::Phone => "phone",
            Category::Email => "email",
            Category::Ssn => "ssn",
            Category::CreditCard => "credit_card",
            Category::Zip => "zip",
            Category::Date => "date",
        }
    }

    /// Overlap priority among regex matches of equal length (higher wins).
    pub(crate) fn regex_priority(self) -> u8 {
        match self {
            Category::CreditCard => 6,
            Category::Ssn => 5,
            Category::Phone => 4,
            Category::Date => 3,
            Category::Zip => 2,
            Category::Email => 1,
            _ => 0,
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Category {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Category::ALL
            .into_iter()
            .find(|c| c.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| format!("unknown category {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectionStage {
    Regex,
    BloomOnly,
    NerConfirmed,
}

/// A detected sensitive field with byte offsets into the original prompt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntitySpan {
    pub category: Category,
    pub start: usize,
    pub end: usize,
    pub text: String,
    pub stage: DetectionStage,
}

impl EntitySpan {
    pub fn range(&self) -> Range<usize> {
        self.start..self.end
    }

    pub fn overlaps(&self, other: &EntitySpan) -> bool {
        self.start < other.end && other.start < self.end
    }

    pub(crate) fn shifted(mut self, base: usize) -> Self {
        self.start += base;
        self.end += base;
        self
    }
}

/// Merges structured and contextual detections for one sentence.
///
/// Regex spans win over any overlapping contextual span; the result is
/// sorted by start offset.
pub fn merge_detections(structured: Vec<EntitySpan>, contextual: Vec<EntitySpan>) -> Vec<EntitySpan> {
    let mut out = structured;
    for span in contextual {
        if !out.iter().any(|s| s.stage == DetectionStage::Regex && s.overlaps(&span)) {
            out.push(span);
        }
    }
    out.sort_by_key(|s| (s.start, s.end));
    out
}
