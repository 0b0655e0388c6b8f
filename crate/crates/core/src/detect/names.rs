//! Two-stage detection of context-aware fields: Bloom filter, then NER.

use super::ner::{NerMode, NerProvider, NerProviderConfig};
use super::segment::Token;
use super::{BloomFilter, Category, DetectionStage, EntitySpan};
use crate::text::{is_capitalized, normalize_token};

/// Lowercase words that commonly follow a sentence-initial subject. A
/// sentence-initial dictionary hit is only kept by the fallback heuristic
/// when the next token is one of these ("Sarah said ..." but not "So I ...").
pub const CONTINUATION_WORDS: &[&str] = &[
    "s",
    "and",
    "or",
    "is",
    "was",
    "are",
    "were",
    "has",
    "had",
    "have",
    "said",
    "says",
    "told",
    "tells",
    "asked",
    "asks",
    "went",
    "goes",
    "came",
    "comes",
    "left",
    "called",
    "calls",
    "wants",
    "wanted",
    "thinks",
    "thought",
    "knows",
    "knew",
    "did",
    "does",
    "will",
    "would",
    "could",
    "should",
    "can",
    "cannot",
    "might",
    "must",
    "who",
    "just",
    "never",
    "always",
    "really",
    "also",
    "met",
    "saw",
    "sees",
    "got",
    "gets",
    "made",
    "makes",
    "took",
    "takes",
    "gave",
    "gives",
    "works",
    "worked",
    "lives",
    "lived",
    "loves",
    "loved",
    "hates",
    "hated",
    "likes",
    "liked",
    "seems",
    "seemed",
    "looks",
    "looked",
    "fell",
    "falls",
    "ran",
    "runs",
    "sent",
    "sends",
    "wrote",
    "writes",
    "replied",
    "emailed",
    "texted",
    "mentioned",
    "agreed",
    "refused",
    "denied",
    "accused",
    "needs",
    "needed",
    "tried",
    "tries",
    "keeps",
    "kept",
];

const MAX_NGRAM: usize = 4;

/// Dictionary filters for the context-aware categories. Earlier entries win
/// when the same n-gram is in several filters and nothing else decides.
#[derive(Debug, Clone, Default)]
pub struct Gazetteer {
    filters: Vec<(Category, BloomFilter)>,
}

impl Gazetteer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_filter(mut self, category: Category, filter: BloomFilter) -> Self {
        self.add(category, filter);
        self
    }

    pub fn add(&mut self, category: Category, filter: BloomFilter) {
        debug_assert!(category.is_contextual());
        self.filters.push((category, filter));
    }

    pub fn filter(&self, category: Category) -> Option<&BloomFilter> {
        self.filters.iter().find(|(c, _)| *c == category).map(|(_, f)| f)
    }

    pub fn is_empty(&self) -> bool {
        self.filters.is_empty()
    }

    fn lookup(&self, normalized: &str, multi_word: bool) -> Vec<Category> {
        self.filters
            .iter()
            .filter(|(c, _)| !(multi_word && *c == Category::Name))
            .filter(|(_, f)| f.contains_normalized(normalized))
            .map(|(c, _)| *c)
            .collect()
    }
}

/// Outcome of [`detect_names`] with instrumentation for the NER stage.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct NameDetection {
    pub spans: Vec<EntitySpan>,
    /// Candidates that passed the Bloom filter.
    pub bloom_positive: usize,
    /// Candidates handed to the NER provider for confirmation.
    pub ner_candidates: usize,
    /// Requests actually sent to the NER provider.
    pub ner_requests: usize,
    /// The external provider failed and the fallback heuristic decided.
    pub degraded: bool,
}

struct Candidate {
    first: usize,
    last: usize,
    start: usize,
    end: usize,
    categories: Vec<Category>,
}

/// Finds names (and other gazetteer categories) in one sentence.
///
/// Stage 1 keeps only n-grams (names: single tokens) that pass a Bloom
/// filter, so sentences without dictionary words never reach stage 2.
/// Stage 2 confirms survivors with the external provider, or with the
/// capitalization/position heuristic in fallback mode or when the provider
/// fails. Adjacent name tokens are merged into one span. Offsets are
/// `base + offset within sentence`.
pub fn detect_names(
    sentence: &str,
    base: usize,
    tokens: &[Token<'_>],
    gazetteer: &Gazetteer,
    ner: &NerProviderConfig,
    provider: Option<&dyn NerProvider>,
) -> NameDetection {
    let candidates = bloom_candidates(sentence, tokens, gazetteer);
    let mut out = NameDetection { bloom_positive: candidates.len(), ..NameDetection::default() };
    if candidates.is_empty() {
        return out;
    }

    let mut confirmed: Option<Vec<EntitySpan>> = None;
    if ner.mode == NerMode::External {
        match provider {
            Some(p) => {
                out.ner_requests += 1;
                out.ner_candidates = candidates.len();
                match p.recognize(sentence, &ner.labels) {
                    Ok(spans) => {
                        confirmed = Some(
                            candidates
                                .iter()
                                .filter_map(|c| {
                                    let category = c.categories.iter().copied().find(|cat| {
                                        spans.iter().any(|s| {
                                            s.confidence >= ner.confidence_threshold
                                                && s.start < c.end
                                                && c.start < s.end
                                                && s.confirms(*cat)
                                        })
                                    })?;
                                    Some(span(sentence, c, category, DetectionStage::NerConfirmed))
                                })
                                .collect(),
                        );
                    }
                    Err(_) => out.degraded = true,
                }
            }
            None => out.degraded = true,
        }
    }
    let spans = confirmed.unwrap_or_else(|| {
        candidates
            .iter()
            .filter(|c| heuristic_accepts(tokens, c))
            .map(|c| span(sentence, c, c.categories[0], DetectionStage::BloomOnly))
            .collect()
    });
    out.spans = merge_adjacent_names(sentence, spans).into_iter().map(|s| s.shifted(base)).collect();
    out
}

fn bloom_candidates(sentence: &str, tokens: &[Token<'_>], gazetteer: &Gazetteer) -> Vec<Candidate> {
    let normalized: Vec<String> = tokens.iter().map(|t| normalize_token(t.text)).collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < tokens.len() {
        if tokens[i].text.bytes().all(|b| b.is_ascii_digit()) {
            i += 1;
            continue;
        }
        let mut hit = None;
        let longest = MAX_NGRAM.min(tokens.len() - i);
        for len in (1..=longest).rev() {
            let last = i + len - 1;
            if len > 1 && !(space_separated(sentence, &tokens[i..=last]) && proper_noun_shape(&tokens[i..=last])) {
                continue;
            }
            let key = if len == 1 { normalized[i].clone() } else { normalized[i..=last].join(" ") };
            let categories = gazetteer.lookup(&key, len > 1);
            if !categories.is_empty() {
                hit = Some(Candidate { first: i, last, start: tokens[i].start, end: tokens[last].end, categories });
                break;
            }
        }
        match hit {
            Some(c) => {
                i = c.last + 1;
                out.push(c);
            }
            None => i += 1,
        }
    }
    out
}

fn space_separated(sentence: &str, tokens: &[Token<'_>]) -> bool {
    tokens.windows(2).all(|w| sentence[w[0].end..w[1].start] == *" ")
}

/// Lowercase words allowed inside a multi-word place or organization.
const NAME_CONNECTORS: &[&str] = &["of", "the", "de", "la", "le", "du", "del", "da", "von", "van", "upon", "on"];

/// Multi-word entries are proper nouns: capitalized at both ends, with
/// only capitalized words or connectors between.
fn proper_noun_shape(tokens: &[Token<'_>]) -> bool {
    let (Some(first), Some(last)) = (tokens.first(), tokens.last()) else {
        return false;
    };
    is_capitalized(first.text)
        && is_capitalized(last.text)
        && tokens.iter().all(|t| is_capitalized(t.text) || NAME_CONNECTORS.contains(&t.text))
}

fn heuristic_accepts(tokens: &[Token<'_>], c: &Candidate) -> bool {
    if !is_capitalized(tokens[c.first].text) {
        return false;
    }
    if c.first > 0 {
        return true;
    }
    tokens.get(c.last + 1).is_some_and(|next| CONTINUATION_WORDS.contains(&next.text))
}

fn span(sentence: &str, c: &Candidate, category: Category, stage: DetectionStage) -> EntitySpan {
    EntitySpan { category, start: c.start, end: c.end, text: sentence[c.start..c.end].to_string(), stage }
}

fn merge_adjacent_names(sentence: &str, spans: Vec<EntitySpan>) -> Vec<EntitySpan> {
    let mut out: Vec<EntitySpan> = Vec::with_capacity(spans.len());
    for s in spans {
        if let Some(prev) = out.last_mut() {
            if prev.category == Category::Name && s.category == Category::Name && sentence[prev.end..s.start] == *" " {
                prev.end = s.end;
                prev.text = sentence[prev.start..prev.end].to_string();
                if s.stage != prev.stage {
                    prev.stage = DetectionStage::BloomOnly;
                }
                continue;
            }
        }
        out.push(s);
    }
    out
}
