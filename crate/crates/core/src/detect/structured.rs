//! Pattern-based detectors for structured PII.

use std::sync::LazyLock;

use regex::Regex;

use super::{Category, DetectionStage, EntitySpan};

const MONTHS: &str = "January|February|March|April|May|June|July|August|September|October|November|December";

struct Pattern {
    category: Category,
    regex: Regex,
}

static PATTERNS: LazyLock<Vec<Pattern>> = LazyLock::new(|| {
    let b = r"(?-u:\b)";
    let specs: Vec<(Category, String)> = vec![
        (
            Category::CreditCard,
            format!(r"{b}[0-9]{{4}}[ -][0-9]{{4}}[ -][0-9]{{4}}[ -][0-9]{{4}}{b}|{b}[0-9]{{16}}{b}"),
        ),
        (Category::Ssn, format!(r"{b}[0-9]{{3}}-[0-9]{{2}}-[0-9]{{4}}{b}")),
        (
            Category::Phone,
            format!(r"(?:\+1[ .-]?)?(?:\([0-9]{{3}}\) ?|{b}[0-9]{{3}}[ .-])[0-9]{{3}}[ .-][0-9]{{4}}{b}"),
        ),
        (
            Category::Date,
            format!(
                r"{b}[0-9]{{4}}-[0-9]{{2}}-[0-9]{{2}}{b}|{b}[0-9]{{1,2}}/[0-9]{{1,2}}/[0-9]{{4}}{b}|{b}(?:{MONTHS}) [0-9]{{1,2}}, [0-9]{{4}}{b}"
            ),
        ),
        (Category::Zip, format!(r"{b}[0-9]{{5}}(?:-[0-9]{{4}})?{b}")),
        (Category::Email, format!(r"{b}[A-Za-z0-9._%+-]+@[A-Za-z0-9-]+(?:\.[A-Za-z0-9-]+)*\.[A-Za-z]{{2,}}{b}")),
    ];
    specs
        .into_iter()
        .map(|(category, src)| Pattern { category, regex: Regex::new(&src).expect("built-in pattern compiles") })
        .collect()
});

/// Runs every structured detector over `sentence` and resolves overlaps.
/// Offsets in the result are `base + offset within sentence`.
pub fn detect_structured(sentence: &str, base: usize) -> Vec<EntitySpan> {
    if !sentence.bytes().any(|b| b.is_ascii_digit() || b == b'@') {
        return Vec::new();
    }
    let mut candidates = Vec::new();
    for p in PATTERNS.iter() {
        for m in p.regex.find_iter(sentence) {
            candidates.push(EntitySpan {
                category: p.category,
                start: m.start(),
                end: m.end(),
                text: m.as_str().to_string(),
                stage: DetectionStage::Regex,
            });
        }
    }
    resolve_overlaps(candidates).into_iter().map(|s| s.shifted(base)).collect()
}

/// Greedy overlap resolution: longest match first, then category priority
/// (CreditCard > Ssn > Phone > Date > Zip > Email), then leftmost.
pub fn resolve_overlaps(mut candidates: Vec<EntitySpan>) -> Vec<EntitySpan> {
    candidates.sort_by(|a, b| {
        (b.end - b.start)
            .cmp(&(a.end - a.start))
            .then(b.category.regex_priority().cmp(&a.category.regex_priority()))
            .then(a.start.cmp(&b.start))
    });
    let mut kept: Vec<EntitySpan> = Vec::with_capacity(candidates.len());
    for c in candidates {
        if !kept.iter().any(|k| k.overlaps(&c)) {
            kept.push(c);
        }
    }
    kept.sort_by_key(|s| s.start);
    kept
}
