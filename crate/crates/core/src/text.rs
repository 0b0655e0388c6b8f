//! Small text utilities shared by the detectors and rewriters.

use unicode_normalization::char::is_combining_mark;
use unicode_normalization::UnicodeNormalization;

/// Case-folds a token and strips diacritics so dictionary lookups are
/// insensitive to both ("José", "JOSE" and "jose" collapse to "jose").
pub fn normalize_token(token: &str) -> String {
    if token.is_ascii() {
        return token.to_ascii_lowercase();
    }
    token.to_lowercase().nfd().filter(|c| !is_combining_mark(*c)).nfc().collect()
}

/// Re-cases `replacement` to follow the casing pattern of `template`:
/// all-caps stays all-caps, a leading capital stays a leading capital,
/// anything else is returned as given.
pub fn match_case(template: &str, replacement: &str) -> String {
    let mut letters = template.chars().filter(|c| c.is_alphabetic());
    let Some(first) = letters.next() else {
        return replacement.to_string();
    };
    let rest_upper = letters.clone().all(|c| c.is_uppercase());
    let has_rest = template.chars().filter(|c| c.is_alphabetic()).count() > 1;
    if first.is_uppercase() && has_rest && rest_upper {
        replacement.to_uppercase()
    } else if first.is_uppercase() {
        capitalize(replacement)
    } else {
        replacement.to_string()
    }
}

pub fn capitalize(word: &str) -> String {
    let mut chars = word.chars();
    match chars.next() {
        Some(c) => c.to_uppercase().chain(chars).collect(),
        None => String::new(),
    }
}

pub fn is_capitalized(word: &str) -> bool {
    word.chars().next().is_some_and(char::is_uppercase)
}

/// True when `text[start..end]` is not glued to word characters on either side.
pub fn on_word_boundary(text: &str, start: usize, end: usize) -> bool {
    let before = text[..start].chars().next_back();
    let after = text[end..].chars().next();
    !before.is_some_and(is_word_char) && !after.is_some_and(is_word_char)
}

pub fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() || c == '_'
}
