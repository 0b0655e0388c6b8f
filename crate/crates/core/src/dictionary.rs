//! Line-oriented dictionary files and the packaged defaults.
//!
//! Every file is UTF-8 with one `entry[<TAB>label]` record per line; blank
//! lines and lines starting with `#` are ignored.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detect::Category;

pub mod builtin {
    pub const NAMES: &str = include_str!("../data/names.tsv");
    pub const PSEUDONYMS: &str = include_str!("../data/pseudonyms.tsv");
    pub const PLACES: &str = include_str!("../data/places.tsv");
    pub const PLACE_PSEUDONYMS: &str = include_str!("../data/place_pseudonyms.tsv");
    pub const PRONOUNS: &str = include_str!("../data/pronouns.tsv");
    pub const TERMS: &str = include_str!("../data/terms.tsv");
}

#[derive(Debug, Error)]
pub enum DictionaryError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Gender {
    F,
    M,
    N,
}

impl Gender {
    pub const ALL: [Gender; 3] = [Gender::F, Gender::M, Gender::N];

    pub fn to_byte(self) -> u8 {
        match self {
            Gender::F => 0,
            Gender::M => 1,
            Gender::N => 2,
        }
    }

    pub fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(Gender::F),
            1 => Some(Gender::M),
            2 => Some(Gender::N),
            _ => None,
        }
    }
}

impl fmt::Display for Gender {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Gender::F => "F",
            Gender::M => "M",
            Gender::N => "N",
        })
    }
}

impl FromStr for Gender {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "F" | "f" => Ok(Gender::F),
            "M" | "m" => Ok(Gender::M),
            "N" | "n" => Ok(Gender::N),
            other => Err(format!("unknown gender label {other:?} (expected F, M or N)")),
        }
    }
}

/// Raw `(entry, optional label, line number)` records.
pub fn parse_records(text: &str) -> Result<Vec<(String, Option<String>, usize)>, DictionaryError> {
    let mut out = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() || line.trim_start().starts_with('#') {
            continue;
        }
        let mut parts = line.split('\t');
        let entry = parts.next().unwrap_or_default().trim();
        let label = parts.next().map(|l| l.trim().to_string());
        if parts.next().is_some() {
            return Err(DictionaryError::Parse { line: idx + 1, message: "expected at most one TAB separator".into() });
        }
        if entry.is_empty() {
            return Err(DictionaryError::Parse { line: idx + 1, message: "empty entry".into() });
        }
        out.push((entry.to_string(), label, idx + 1));
    }
    Ok(out)
}

/// `name[<TAB>F|M|N]` records; unlabeled names are neutral.
pub fn parse_gendered(text: &str) -> Result<Vec<(String, Gender)>, DictionaryError> {
    parse_records(text)?
        .into_iter()
        .map(|(name, label, line)| {
            let gender = match label.as_deref() {
                None | Some("") => Gender::N,
                Some(l) => l.parse().map_err(|message| DictionaryError::Parse { line, message })?,
            };
            Ok((name, gender))
        })
        .collect()
}

/// `entry<TAB>category` records for places and organizations.
pub fn parse_categorized(text: &str) -> Result<Vec<(String, Category)>, DictionaryError> {
    parse_records(text)?
        .into_iter()
        .map(|(entry, label, line)| {
            let label =
                label.ok_or_else(|| DictionaryError::Parse { line, message: "missing category label".into() })?;
            let category: Category = label.parse().map_err(|message| DictionaryError::Parse { line, message })?;
            if !category.is_contextual() || category == Category::Name {
                return Err(DictionaryError::Parse {
                    line,
                    message: format!("category {category} is not a place or organization"),
                });
            }
            Ok((entry, category))
        })
        .collect()
}

/// `from<TAB>to` mapping records.
pub fn parse_mapping(text: &str) -> Result<Vec<(String, String)>, DictionaryError> {
    parse_records(text)?
        .into_iter()
        .map(|(from, to, line)| match to {
            Some(to) if !to.is_empty() => Ok((from, to)),
            _ => Err(DictionaryError::Parse { line, message: "missing mapping target".into() }),
        })
        .collect()
}

pub fn read_text(path: impl AsRef<Path>) -> Result<String, DictionaryError> {
    Ok(fs::read_to_string(path)?)
}
