//! Dictionary pseudonyms, gender inference and gender debiasing.

use std::collections::{HashMap, HashSet};
use std::ops::Range;

use rand::seq::IndexedRandom;
use rand::{CryptoRng, Rng, RngCore};
use thiserror::Error;

use crate::detect::{tokenize, Category, Token};
use crate::dictionary::{builtin, parse_categorized, parse_gendered, parse_mapping, DictionaryError, Gender};
use crate::text::{match_case, normalize_token};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PseudonymError {
    #[error("the {0} pseudonym list is empty")]
    EmptyList(String),
    #[error("the {0} pseudonym list has no entry other than {1:?}")]
    NoAlternative(String, String),
}

/// Random draws tried before falling back to a full scan of the pool.
const REJECTION_DRAWS: usize = 8;

/// Token equality under [`normalize_token`], without allocating for ASCII.
fn same_token(a: &str, b: &str) -> bool {
    if a.is_ascii() && b.is_ascii() {
        a.eq_ignore_ascii_case(b)
    } else {
        normalize_token(a) == normalize_token(b)
    }
}

/// Picks uniformly from `pool` minus `exclude` and `original`; if that is
/// empty, from `pool` minus `original`. `exclude` holds
/// [`normalize_token`] forms.
fn pick_from<R: RngCore + CryptoRng + ?Sized>(
    pool: &[String],
    label: &str,
    original: &str,
    exclude: &HashSet<String>,
    rng: &mut R,
) -> Result<String, PseudonymError> {
    if pool.is_empty() {
        return Err(PseudonymError::EmptyList(label.to_string()));
    }
    let usable = |p: &&String| !same_token(p, original);
    let fresh = |p: &&String| !exclude.contains(&normalize_token(p));
    // An accepted draw is uniform over the entries passing both checks, as
    // is the fallback, so the mixture is too.
    for _ in 0..REJECTION_DRAWS {
        let p = pool.choose(rng).expect("nonempty pool");
        if usable(&p) && fresh(&p) {
            return Ok(p.clone());
        }
    }
    let not_orig: Vec<&String> = pool.iter().filter(usable).collect();
    let preferred: Vec<&String> = not_orig.iter().copied().filter(fresh).collect();
    let choices = if preferred.is_empty() { &not_orig } else { &preferred };
    choices
        .choose(rng)
        .map(|s| s.to_string())
        .ok_or_else(|| PseudonymError::NoAlternative(label.to_string(), original.to_string()))
}

fn dedup_nonempty(list: Vec<String>, label: &str) -> Result<Vec<String>, DictionaryError> {
    let mut seen = HashSet::new();
    for name in &list {
        if !seen.insert(normalize_token(name)) {
            return Err(DictionaryError::Invalid(format!("duplicate entry {name:?} in the {label} list")));
        }
    }
    if list.is_empty() {
        return Err(DictionaryError::Invalid(format!("the {label} list is empty")));
    }
    Ok(list)
}

/// Replacement names, one list per gender.
#[derive(Debug, Clone)]
pub struct PseudonymDictionaries {
    by_gender: [Vec<String>; 3],
}

impl PseudonymDictionaries {
    pub fn from_text(text: &str) -> Result<Self, DictionaryError> {
        let mut by_gender: [Vec<String>; 3] = Default::default();
        for (name, g) in parse_gendered(text)? {
            by_gender[g.to_byte() as usize].push(name);
        }
        let [f, m, n] = by_gender;
        Ok(Self { by_gender: [dedup_nonempty(f, "F")?, dedup_nonempty(m, "M")?, dedup_nonempty(n, "N")?] })
    }

    pub fn builtin() -> Self {
        Self::from_text(builtin::PSEUDONYMS).expect("packaged pseudonym list is valid")
    }

    pub fn names(&self, gender: Gender) -> &[String] {
        &self.by_gender[gender.to_byte() as usize]
    }

    pub fn all(&self) -> impl Iterator<Item = (&str, Gender)> {
        Gender::ALL.into_iter().flat_map(move |g| self.names(g).iter().map(move |n| (n.as_str(), g)))
    }
}

/// Uniform choice from the gender's list, avoiding `original` and, where
/// possible, everything in `exclude` (normalized tokens).
pub fn pick_pseudonym<R: RngCore + CryptoRng + ?Sized>(
    gender: Gender,
    dictionaries: &PseudonymDictionaries,
    original: &str,
    exclude: &HashSet<String>,
    rng: &mut R,
) -> Result<String, PseudonymError> {
    pick_from(dictionaries.names(gender), &gender.to_string(), original, exclude, rng)
}

/// Replacement pools for cities, countries and organizations.
#[derive(Debug, Clone)]
pub struct PlaceDictionaries {
    by_category: HashMap<Category, Vec<String>>,
}

impl PlaceDictionaries {
    pub fn from_text(text: &str) -> Result<Self, DictionaryError> {
        let mut by_category: HashMap<Category, Vec<String>> = HashMap::new();
        for (entry, cat) in parse_categorized(text)? {
            by_category.entry(cat).or_default().push(entry);
        }
        let by_category = by_category
            .into_iter()
            .map(|(c, list)| Ok((c, dedup_nonempty(list, c.as_str())?)))
            .collect::<Result<_, DictionaryError>>()?;
        Ok(Self { by_category })
    }

    pub fn builtin() -> Self {
        Self::from_text(builtin::PLACE_PSEUDONYMS).expect("packaged place list is valid")
    }

    pub fn entries(&self, category: Category) -> &[String] {
        self.by_category.get(&category).map_or(&[], Vec::as_slice)
    }

    pub fn pick<R: RngCore + CryptoRng + ?Sized>(
        &self,
        category: Category,
        original: &str,
        exclude: &HashSet<String>,
        rng: &mut R,
    ) -> Result<String, PseudonymError> {
        pick_from(self.entries(category), category.as_str(), original, exclude, rng)
    }
}

/// `Person-` followed by six lowercase hex digits.
pub fn debias_identifier<R: RngCore + CryptoRng + ?Sized>(rng: &mut R) -> String {
    format!("Person-{:06x}", rng.random::<u32>() & 0xff_ffff)
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct PronounForm {
    standalone: String,
    determiner: Option<String>,
}

/// Words after "her"/"his" that mark it as an object or standalone
/// possessive rather than a determiner before a noun.
const NON_NOUN_FOLLOWERS: &[&str] = &[
    "a",
    "an",
    "the",
    "this",
    "that",
    "these",
    "those",
    "and",
    "or",
    "but",
    "nor",
    "so",
    "yet",
    "to",
    "at",
    "in",
    "on",
    "of",
    "for",
    "with",
    "from",
    "by",
    "about",
    "into",
    "onto",
    "over",
    "under",
    "after",
    "before",
    "around",
    "through",
    "during",
    "without",
    "off",
    "up",
    "down",
    "out",
    "back",
    "away",
    "again",
    "too",
    "also",
    "yesterday",
    "today",
    "tomorrow",
    "now",
    "then",
    "there",
    "here",
    "when",
    "while",
    "if",
    "because",
    "since",
    "until",
    "as",
    "than",
    "i",
    "you",
    "he",
    "she",
    "we",
    "they",
    "it",
    "is",
    "was",
    "are",
    "were",
    "be",
    "been",
    "will",
    "would",
    "can",
    "could",
    "should",
    "may",
    "might",
    "must",
    "do",
    "does",
    "did",
    "has",
    "have",
    "had",
    "not",
    "very",
    "really",
    "just",
    "alone",
    "home",
    "anything",
    "everything",
    "something",
    "nothing",
    "why",
    "how",
    "what",
    "where",
    "who",
];

const AGREEMENT: &[(&str, &str)] = &[("is", "are"), ("was", "were")];

/// A replacement of `text[start..end]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Edit {
    pub start: usize,
    pub end: usize,
    pub replacement: String,
}

/// Applies non-overlapping edits to `text`, right to left.
pub fn apply_edits(text: &str, mut edits: Vec<Edit>) -> String {
    edits.sort_by_key(|e| std::cmp::Reverse(e.start));
    let mut out = text.to_string();
    for e in edits {
        out.replace_range(e.start..e.end, &e.replacement);
    }
    out
}

fn apostrophe_s(sentence: &str, tok: &Token<'_>, next: Option<&Token<'_>>) -> Option<usize> {
    let next = next?;
    let gap = &sentence[tok.end..next.start];
    ((gap == "'" || gap == "\u{2019}") && next.text.eq_ignore_ascii_case("s")).then_some(next.end)
}

/// Gender of names, plus the gendered-to-neutral pronoun and term maps.
#[derive(Debug, Clone)]
pub struct GenderLexicon {
    name_gender: HashMap<String, Gender>,
    pronouns: HashMap<String, PronounForm>,
    terms: HashMap<String, String>,
}

impl GenderLexicon {
    /// Builds a lexicon from dictionary texts. A name listed with two
    /// different genders is treated as neutral.
    pub fn from_texts<'a>(
        names: impl IntoIterator<Item = &'a str>,
        pronouns: &str,
        terms: &str,
    ) -> Result<Self, DictionaryError> {
        let mut name_gender = HashMap::new();
        for text in names {
            for (name, g) in parse_gendered(text)? {
                name_gender
                    .entry(normalize_token(&name))
                    .and_modify(|prev: &mut Gender| {
                        if *prev != g {
                            *prev = Gender::N
                        }
                    })
                    .or_insert(g);
            }
        }
        let pronouns = parse_mapping(pronouns)?
            .into_iter()
            .map(|(from, to)| {
                let mut parts = to.splitn(2, '|');
                let standalone = parts.next().unwrap_or_default().to_string();
                let determiner = parts.next().map(str::to_string);
                (normalize_token(&from), PronounForm { standalone, determiner })
            })
            .collect();
        let terms = parse_mapping(terms)?.into_iter().map(|(from, to)| (normalize_token(&from), to)).collect();
        Ok(Self { name_gender, pronouns, terms })
    }

    pub fn builtin() -> Self {
        Self::from_texts([builtin::NAMES, builtin::PSEUDONYMS], builtin::PRONOUNS, builtin::TERMS)
            .expect("packaged lexicon is valid")
    }

    /// Dictionary gender of a name; multi-word names use their first word.
    /// Unknown names are neutral.
    pub fn infer_gender(&self, name: &str) -> Gender {
        if let Some(g) = self.name_gender.get(&normalize_token(name)) {
            return *g;
        }
        tokenize(name)
            .first()
            .and_then(|t| self.name_gender.get(&normalize_token(t.text)))
            .copied()
            .unwrap_or(Gender::N)
    }

    /// Whether `word` is a gendered pronoun or term this lexicon rewrites.
    pub fn is_gendered_word(&self, word: &str) -> bool {
        let w = normalize_token(word);
        self.pronouns.contains_key(&w) || self.terms.contains_key(&w)
    }

    pub fn pronoun_keys(&self) -> impl Iterator<Item = &str> {
        self.pronouns.keys().map(String::as_str)
    }

    pub fn term_keys(&self) -> impl Iterator<Item = &str> {
        self.terms.keys().map(String::as_str)
    }

    /// Pronoun rewrites for tokens outside `skip`, with `is`/`was`
    /// agreement after a new "they".
    pub fn pronoun_edits(&self, sentence: &str, skip: &[Range<usize>]) -> Vec<Edit> {
        let tokens = tokenize(sentence);
        let skipped = |t: &Token<'_>| skip.iter().any(|r| t.start < r.end && r.start < t.end);
        let mut edits = Vec::new();
        let mut i = 0;
        while i < tokens.len() {
            let tok = &tokens[i];
            let key = normalize_token(tok.text);
            let Some(form) = self.pronouns.get(&key).filter(|_| !skipped(tok)) else {
                i += 1;
                continue;
            };
            let next = tokens.get(i + 1);
            // he's / she's
            if form.standalone == "they" {
                if let Some(end) = apostrophe_s(sentence, tok, next) {
                    let repl = match_case(tok.text, "they're");
                    edits.push(Edit { start: tok.start, end, replacement: repl });
                    i += 2;
                    continue;
                }
            }
            let neutral = match &form.determiner {
                Some(det) if self.precedes_noun(sentence, tok, next) => det,
                _ => &form.standalone,
            };
            edits.push(Edit { start: tok.start, end: tok.end, replacement: match_case(tok.text, neutral) });
            if neutral == "they" {
                if let Some(n) = next.filter(|n| !skipped(n) && sentence[tok.end..n.start].trim().is_empty()) {
                    let verb = normalize_token(n.text);
                    if let Some((_, plural)) = AGREEMENT.iter().find(|(s, _)| *s == verb) {
                        edits.push(Edit { start: n.start, end: n.end, replacement: match_case(n.text, plural) });
                        i += 1;
                    }
                }
            }
            i += 1;
        }
        edits
    }

    fn precedes_noun(&self, sentence: &str, tok: &Token<'_>, next: Option<&Token<'_>>) -> bool {
        let Some(next) = next else { return false };
        if !sentence[tok.end..next.start].trim().is_empty() {
            return false;
        }
        let word = normalize_token(next.text);
        !NON_NOUN_FOLLOWERS.contains(&word.as_str())
            && !word.ends_with("ly")
            && !next.text.bytes().all(|b| b.is_ascii_digit())
    }

    /// Gendered-noun rewrites for tokens outside `skip`.
    pub fn term_edits(&self, sentence: &str, skip: &[Range<usize>]) -> Vec<Edit> {
        tokenize(sentence)
            .into_iter()
            .filter(|t| !skip.iter().any(|r| t.start < r.end && r.start < t.end))
            .filter_map(|t| {
                let neutral = self.terms.get(&normalize_token(t.text))?;
                Some(Edit { start: t.start, end: t.end, replacement: match_case(t.text, neutral) })
            })
            .collect()
    }

    pub fn neutralize_pronouns(&self, sentence: &str) -> String {
        apply_edits(sentence, self.pronoun_edits(sentence, &[]))
    }

    pub fn neutralize_terms(&self, sentence: &str) -> String {
        apply_edits(sentence, self.term_edits(sentence, &[]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn rng() -> ChaCha20Rng {
        ChaCha20Rng::seed_from_u64(77)
    }

    fn lex() -> GenderLexicon {
        GenderLexicon::builtin()
    }

    #[test]
    fn gender_inference() {
        let l = lex();
        assert_eq!(l.infer_gender("Mary"), Gender::F);
        assert_eq!(l.infer_gender("MARY"), Gender::F);
        assert_eq!(l.infer_gender("Ibrahim"), Gender::M);
        assert_eq!(l.infer_gender("Xqzt"), Gender::N);
        assert_eq!(l.infer_gender("Mary Jane"), Gender::F);
    }

    #[test]
    fn pseudonym_membership_and_exclusion() {
        let dicts = PseudonymDictionaries::builtin();
        let mut r = rng();
        let f = pick_pseudonym(Gender::F, &dicts, "Sarah", &HashSet::new(), &mut r).unwrap();
        assert!(dicts.names(Gender::F).contains(&f));

        let pool: Vec<String> = dicts.names(Gender::M).to_vec();
        let keep = pool[3].clone();
        let exclude: HashSet<String> = pool.iter().filter(|n| **n != keep).map(|n| normalize_token(n)).collect();
        for _ in 0..50 {
            assert_eq!(pick_pseudonym(Gender::M, &dicts, "John", &exclude, &mut r).unwrap(), keep);
        }
    }

    #[test]
    fn pseudonym_uniformity() {
        let text: String = (0..10).map(|i| format!("P{i}\tF\nQ{i}\tM\nR{i}\tN\n")).collect();
        let dicts = PseudonymDictionaries::from_text(&text).unwrap();
        let mut r = rng();
        let mut counts: HashMap<String, usize> = HashMap::new();
        let n = 10_000;
        for _ in 0..n {
            *counts.entry(pick_pseudonym(Gender::F, &dicts, "Zoe", &HashSet::new(), &mut r).unwrap()).or_default() += 1;
        }
        // Binomial(10^4, 0.1): sigma = 30; accept 0.1 +- 10% +- 3 sigma.
        assert_eq!(counts.len(), 10);
        for c in counts.values() {
            assert!((810..=1190).contains(c), "{c}");
        }
    }

    #[test]
    fn pseudonym_avoids_original() {
        let dicts = PseudonymDictionaries::from_text("Ann\tF\nBea\tF\nJo\tM\nSam\tN\n").unwrap();
        let mut r = rng();
        for _ in 0..100 {
            assert_eq!(pick_pseudonym(Gender::F, &dicts, "ann", &HashSet::new(), &mut r).unwrap(), "Bea");
        }
        // Only alternative excluded: fall back to the full list minus original.
        let ex: HashSet<String> = ["bea".to_string()].into();
        assert_eq!(pick_pseudonym(Gender::F, &dicts, "Ann", &ex, &mut r).unwrap(), "Bea");
        assert_eq!(
            pick_pseudonym(Gender::M, &dicts, "Jo", &HashSet::new(), &mut r),
            Err(PseudonymError::NoAlternative("M".into(), "Jo".into()))
        );
        assert!(PseudonymDictionaries::from_text("Ann\tF\nJo\tM\n").is_err());
        assert!(PseudonymDictionaries::from_text("Ann\tF\nann\tF\nJo\tM\nSam\n").is_err());
    }

    #[test]
    fn identifiers() {
        let re = regex::Regex::new(r"^Person-[0-9a-f]{6}$").unwrap();
        let mut r = rng();
        let ids: HashSet<String> = (0..1000).map(|_| debias_identifier(&mut r)).collect();
        assert!(ids.iter().all(|id| re.is_match(id)));
        // Expected collisions among 10^3 draws from 2^24 values: ~0.03.
        assert_eq!(ids.len(), 1000);
    }

    #[test]
    fn pronouns() {
        let l = lex();
        assert_eq!(l.neutralize_pronouns("she came back alone"), "they came back alone");
        assert_eq!(l.neutralize_pronouns("I saw him at a restaurant"), "I saw them at a restaurant");
        assert_eq!(l.neutralize_pronouns(""), "");
        assert_eq!(l.neutralize_pronouns("She left. SHE LEFT."), "They left. THEY LEFT.");
        assert_eq!(l.neutralize_pronouns("I called her yesterday"), "I called them yesterday");
        assert_eq!(l.neutralize_pronouns("I met her mother"), "I met their mother");
        assert_eq!(l.neutralize_pronouns("I met her."), "I met them.");
        assert_eq!(l.neutralize_pronouns("The car is his."), "The car is theirs.");
        assert_eq!(l.neutralize_pronouns("his car"), "their car");
        assert_eq!(l.neutralize_pronouns("he was late and she is sad"), "they were late and they are sad");
        assert_eq!(l.neutralize_pronouns("She's here"), "They're here");
        assert_eq!(l.neutralize_pronouns("he hurt himself"), "they hurt themself");
        assert_eq!(l.neutralize_pronouns("there, these, heroes"), "there, these, heroes");
    }

    #[test]
    fn terms() {
        let l = lex();
        assert_eq!(l.neutralize_terms(&l.neutralize_pronouns("her husband")), "their spouse");
        assert_eq!(l.neutralize_terms("another woman"), "another person");
        assert_eq!(l.neutralize_terms("huskies"), "huskies");
        assert_eq!(l.neutralize_terms("Mrs. Smith and the WAITRESS"), "Mx. Smith and the SERVER");
        assert_eq!(l.neutralize_terms("my husband's car"), "my spouse's car");
    }

    #[test]
    fn skipped_ranges_are_untouched() {
        let l = lex();
        let s = "Her husband met her";
        let edits = l.term_edits(s, &[4..11]);
        assert!(edits.is_empty());
        let edits = l.pronoun_edits(s, &[0..3]);
        assert_eq!(apply_edits(s, edits), "Her husband met them");
    }

    #[test]
    fn place_pools() {
        let places = PlaceDictionaries::builtin();
        let mut r = rng();
        for cat in [Category::City, Category::Country, Category::Organization] {
            let p = places.pick(cat, "Dallas", &HashSet::new(), &mut r).unwrap();
            assert!(places.entries(cat).contains(&p));
        }
        assert!(matches!(
            places.pick(Category::Phone, "x", &HashSet::new(), &mut r),
            Err(PseudonymError::EmptyList(_))
        ));
    }
}
