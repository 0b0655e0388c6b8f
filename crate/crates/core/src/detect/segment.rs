//! Sentence segmentation and word tokenization.

use std::ops::Range;

use crate::text::is_word_char;

/// Words whose trailing period does not end a sentence.
pub const ABBREVIATIONS: &[&str] = &[
    "dr", "mr", "mrs", "ms", "mx", "prof", "sr", "jr", "st", "mt", "ft", "vs", "etc", "inc", "ltd", "co", "corp",
    "jan", "feb", "mar", "apr", "jun", "jul", "aug", "sep", "sept", "oct", "nov", "dec", "e.g", "i.e", "approx",
    "dept", "gen", "gov", "sen", "rep", "lt", "col", "capt", "sgt",
];

/// Splits text into sentence byte ranges.
///
/// A sentence ends at a run of `.`, `!` or `?` (plus any closing quotes or
/// brackets) that is followed by whitespace or the end of input. A period
/// after a guarded abbreviation or a single-letter initial does not split.
/// Ranges are trimmed, so the gaps between them are pure whitespace.
pub fn segment_sentences(text: &str) -> Vec<Range<usize>> {
    let mut out = Vec::new();
    let mut start = 0;
    let mut iter = text.char_indices().peekable();

    while let Some((i, c)) = iter.next() {
        if !matches!(c, '.' | '!' | '?') {
            continue;
        }
        let mut end = i + c.len_utf8();
        while let Some(&(j, n)) = iter.peek() {
            if matches!(n, '.' | '!' | '?' | '"' | '\'' | ')' | ']' | '\u{201d}' | '\u{2019}') {
                end = j + n.len_utf8();
                iter.next();
            } else {
                break;
            }
        }
        let at_boundary = text[end..].chars().next().is_none_or(char::is_whitespace);
        if !at_boundary {
            continue;
        }
        if c == '.' && end == i + 1 && is_guarded(&text[start..i]) {
            continue;
        }
        push_trimmed(text, start..end, &mut out);
        start = end;
    }
    push_trimmed(text, start..text.len(), &mut out);
    out
}

fn is_guarded(before: &str) -> bool {
    let word_start = before
        .char_indices()
        .rev()
        .find(|(_, c)| c.is_whitespace() || matches!(c, '(' | '"' | '['))
        .map(|(i, c)| i + c.len_utf8())
        .unwrap_or(0);
    let word = &before[word_start..];
    if word.is_empty() {
        return false;
    }
    let mut chars = word.chars();
    let single_initial = chars.next().is_some_and(char::is_uppercase) && chars.next().is_none();
    single_initial || ABBREVIATIONS.contains(&word.to_lowercase().as_str())
}

fn push_trimmed(text: &str, range: Range<usize>, out: &mut Vec<Range<usize>>) {
    let slice = &text[range.clone()];
    let lead = slice.len() - slice.trim_start().len();
    let trail = slice.len() - slice.trim_end().len();
    if lead + trail < slice.len() {
        out.push(range.start + lead..range.end - trail);
    }
}

/// A word token with byte offsets relative to the tokenized string.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Token<'a> {
    pub text: &'a str,
    pub start: usize,
    pub end: usize,
}

/// Maximal runs of word characters; whitespace and punctuation separate
/// tokens and never appear in token text.
pub fn tokenize(sentence: &str) -> Vec<Token<'_>> {
    let mut out = Vec::new();
    let mut current: Option<usize> = None;
    for (i, c) in sentence.char_indices() {
        match (is_word_char(c), current) {
            (true, None) => current = Some(i),
            (false, Some(s)) => {
                out.push(Token { text: &sentence[s..i], start: s, end: i });
                current = None;
            }
            _ => {}
        }
    }
    if let Some(s) = current {
        out.push(Token { text: &sentence[s..], start: s, end: sentence.len() });
    }
    out
}
