//! Prompt transformation: detect, replace, and splice, one sentence at a time.

mod policy;

use std::cell::Cell;
use std::collections::HashMap;
use std::ops::Range;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use rand::{CryptoRng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detect::{
    detect_names, detect_structured, merge_detections, segment_sentences, tokenize, BloomError, BloomFilter, Category,
    EntitySpan, Gazetteer, NerProvider, NerProviderConfig, DEFAULT_BLOOM_SEED,
};
use crate::dictionary::{builtin, parse_categorized, parse_gendered, Gender};
use crate::dp::{
    mask_email, noise_credit_card, noise_date, noise_phone, noise_ssn, noise_zip, perturb_and_decode, redact,
    source_vector, DpError, EmbedSource, Embedder, EmbeddingTable, FieldNoise, Mechanism, NoiseOutcome,
};
use crate::pseudonym::{
    apply_edits, debias_identifier, pick_pseudonym, Edit, GenderLexicon, PlaceDictionaries, PseudonymDictionaries,
    PseudonymError,
};
use crate::session::{AssignContext, AssignError, BudgetExhausted, SessionStore};
use crate::text::{match_case, normalize_token};

pub use policy::{
    resolve_policy, Action, DeploymentMode, ExhaustionPolicy, PolicyField, PolicyOverrides, PolicySet, TransformPolicy,
    DEFAULT_EPSILON,
};

/// False-positive rate for the packaged name filter.
pub const DEFAULT_NAME_FP: f64 = 0.025;
/// Place filters are queried once per n-gram, so they get a tighter rate.
pub const DEFAULT_PLACE_FP: f64 = 1e-6;
/// Floor on the size of each place and organization filter. These lists are
/// short, and an optimally sized filter for them is too small for double
/// hashing to reach [`DEFAULT_PLACE_FP`].
pub const MIN_PLACE_FILTER_BITS: u64 = 1 << 16;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid policy: {0}")]
    InvalidPolicy(String),
    #[error("no policy for workflow {0:?}")]
    PolicyNotFound(String),
    #[error(transparent)]
    BudgetExhausted(BudgetExhausted),
    #[error("replacement assignment failed: {0}")]
    Assignment(String),
    #[error(transparent)]
    Dp(#[from] DpError),
    #[error(transparent)]
    Bloom(#[from] BloomError),
}

/// One spliced entity and what replaced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntityOutcome {
    #[serde(flatten)]
    pub span: EntitySpan,
    #[serde(flatten)]
    pub outcome: NoiseOutcome,
}

/// Wall-clock per stage, in milliseconds.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub segment_ms: f64,
    /// Detection plus replacement of names, places and organizations.
    pub contextual_ms: f64,
    /// Structured fields, debiasing and splicing.
    pub structured_ms: f64,
    pub total_ms: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TransformReport {
    pub entities: Vec<EntityOutcome>,
    pub epsilon_spent_total: f64,
    /// The NER provider or the embedding table was unavailable.
    pub degraded: bool,
    /// At least one field was redacted because the budget ran out.
    pub budget_exhausted: bool,
    pub bloom_positive: usize,
    pub ner_requests: usize,
    pub timing: StageTimings,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transformed {
    pub text: String,
    pub report: TransformReport,
}

fn ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1000.0
}

/// Builds the dictionary filters: all names in one filter, then one filter
/// per place category.
pub fn build_gazetteer(
    names: &[(String, Gender)],
    places: &[(String, Category)],
    name_fp: f64,
    place_fp: f64,
) -> Result<Gazetteer, BloomError> {
    let mut g = Gazetteer::new();
    if !names.is_empty() {
        let f = BloomFilter::from_tokens(names.iter().map(|(n, _)| n), name_fp, DEFAULT_BLOOM_SEED)?;
        g.add(Category::Name, f);
    }
    for (i, cat) in [Category::City, Category::Country, Category::Organization].into_iter().enumerate() {
        let entries: Vec<&String> = places.iter().filter(|(_, c)| *c == cat).map(|(e, _)| e).collect();
        if !entries.is_empty() {
            let seed = DEFAULT_BLOOM_SEED.wrapping_add(i as u64 + 1);
            g.add(cat, BloomFilter::sized_from_tokens(entries, place_fp, MIN_PLACE_FILTER_BITS, seed)?);
        }
    }
    Ok(g)
}

/// Immutable resources shared by every request.
#[derive(Clone)]
pub struct Pipeline {
    gazetteer: Gazetteer,
    lexicon: GenderLexicon,
    pseudonyms: PseudonymDictionaries,
    places: PlaceDictionaries,
    table: Option<Arc<EmbeddingTable>>,
    embedder: Option<Arc<dyn Embedder>>,
    ner_config: NerProviderConfig,
    ner: Option<Arc<dyn NerProvider>>,
    vectors: Arc<VectorMemo>,
}

/// Most distinct names whose source vectors are kept between prompts.
const VECTOR_MEMO_CAPACITY: usize = 4096;

/// Unit source vectors of names absent from the table, keyed by name and
/// gender. They depend only on the name, the table key and the embedder, so
/// repeat names across sessions skip the hash or provider round trip. The
/// noise is still drawn fresh for every assignment.
#[derive(Default)]
struct VectorMemo(Mutex<HashMap<(String, Gender), MemoEntry>>);

type MemoEntry = (Arc<[f64]>, EmbedSource);

impl VectorMemo {
    fn get_or_compute(
        &self,
        name: &str,
        gender: Gender,
        compute: impl FnOnce() -> Result<(Vec<f64>, EmbedSource), DpError>,
    ) -> Result<MemoEntry, DpError> {
        let key = (name.to_string(), gender);
        if let Some((v, s)) = self.0.lock().unwrap_or_else(|e| e.into_inner()).get(&key) {
            return Ok((v.clone(), *s));
        }
        let (v, source) = compute()?;
        let v: Arc<[f64]> = v.into();
        if source != EmbedSource::Table {
            let mut map = self.0.lock().unwrap_or_else(|e| e.into_inner());
            if map.len() >= VECTOR_MEMO_CAPACITY {
                map.clear();
            }
            map.insert(key, (v.clone(), source));
        }
        Ok((v, source))
    }
}

impl std::fmt::Debug for Pipeline {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Pipeline")
            .field("table", &self.table.as_ref().map(|t| t.len()))
            .field("ner_config", &self.ner_config)
            .field("ner", &self.ner.is_some())
            .finish_non_exhaustive()
    }
}

impl Pipeline {
    /// Packaged dictionaries, fallback NER, no embedding table.
    pub fn builtin() -> Self {
        let names = parse_gendered(builtin::NAMES).expect("packaged names parse");
        let places = parse_categorized(builtin::PLACES).expect("packaged places parse");
        let gazetteer = build_gazetteer(&names, &places, DEFAULT_NAME_FP, DEFAULT_PLACE_FP)
            .expect("packaged dictionaries are nonempty");
        Self {
            gazetteer,
            lexicon: GenderLexicon::builtin(),
            pseudonyms: PseudonymDictionaries::builtin(),
            places: PlaceDictionaries::builtin(),
            table: None,
            embedder: None,
            ner_config: NerProviderConfig::fallback(),
            ner: None,
            vectors: Arc::default(),
        }
    }

    pub fn with_gazetteer(mut self, gazetteer: Gazetteer) -> Self {
        self.gazetteer = gazetteer;
        self
    }

    pub fn with_lexicon(mut self, lexicon: GenderLexicon) -> Self {
        self.lexicon = lexicon;
        self
    }

    pub fn with_pseudonyms(mut self, pseudonyms: PseudonymDictionaries) -> Self {
        self.pseudonyms = pseudonyms;
        self
    }

    pub fn with_places(mut self, places: PlaceDictionaries) -> Self {
        self.places = places;
        self
    }

    pub fn with_table(mut self, table: Arc<EmbeddingTable>) -> Self {
        self.table = Some(table);
        self.vectors = Arc::default();
        self
    }

    pub fn with_embedder(mut self, embedder: Arc<dyn Embedder>) -> Self {
        self.embedder = Some(embedder);
        self.vectors = Arc::default();
        self
    }

    /// Labels and threshold for external confirmation; the mode itself
    /// comes from each request's policy.
    pub fn with_ner(mut self, config: NerProviderConfig, provider: Option<Arc<dyn NerProvider>>) -> Self {
        self.ner_config = config;
        self.ner = provider;
        self
    }

    pub fn gazetteer(&self) -> &Gazetteer {
        &self.gazetteer
    }

    pub fn lexicon(&self) -> &GenderLexicon {
        &self.lexicon
    }

    pub fn pseudonyms(&self) -> &PseudonymDictionaries {
        &self.pseudonyms
    }

    pub fn table(&self) -> Option<&Arc<EmbeddingTable>> {
        self.table.as_ref()
    }

    pub fn has_ner_provider(&self) -> bool {
        self.ner.is_some()
    }

    /// Detects and transforms every sensitive field of `text`.
    ///
    /// Sentences are processed in two passes, each in parallel unless the
    /// policy disables it: names, places and organizations first (so emails
    /// can take the initial of their owner's pseudonym), then structured
    /// fields, debias rewrites and splicing. Every sentence draws from its
    /// own ChaCha stream seeded from `rng`.
    pub fn transform_prompt<R: RngCore + CryptoRng + ?Sized>(
        &self,
        text: &str,
        policy: &TransformPolicy,
        store: &SessionStore,
        rng: &mut R,
    ) -> Result<Transformed, PipelineError> {
        policy.validate()?;
        let start = Instant::now();
        let ranges = segment_sentences(text);
        let seeds: Vec<([u8; 32], [u8; 32])> = ranges
            .iter()
            .map(|_| {
                let (mut a, mut b) = ([0u8; 32], [0u8; 32]);
                rng.fill_bytes(&mut a);
                rng.fill_bytes(&mut b);
                (a, b)
            })
            .collect();
        let segmented = Instant::now();

        let ner_cfg = NerProviderConfig { mode: policy.ner_mode, ..self.ner_config.clone() };
        let ctx = Ctx { pipeline: self, policy, store, ner: &ner_cfg };
        let first = |(r, seed): (&Range<usize>, &([u8; 32], [u8; 32]))| {
            ctx.contextual_pass(text, r.clone(), &mut ChaCha20Rng::from_seed(seed.0))
        };
        let pass1: Vec<SentenceWork> = if policy.parallel {
            ranges.par_iter().zip(seeds.par_iter()).map(first).collect::<Result<_, _>>()?
        } else {
            ranges.iter().zip(seeds.iter()).map(first).collect::<Result<_, _>>()?
        };
        let contextual_done = Instant::now();

        let links = email_links(store);
        let second = |(work, seed): (SentenceWork, &([u8; 32], [u8; 32]))| {
            ctx.structured_pass(text, work, &links, &mut ChaCha20Rng::from_seed(seed.1))
        };
        let pass2: Vec<SentenceOut> = if policy.parallel {
            pass1.into_par_iter().zip(seeds.par_iter()).map(second).collect::<Result<_, _>>()?
        } else {
            pass1.into_iter().zip(seeds.iter()).map(second).collect::<Result<_, _>>()?
        };

        let mut out = String::with_capacity(text.len());
        let mut report = TransformReport::default();
        let mut copied = 0;
        for s in pass2 {
            out.push_str(&text[copied..s.range.start]);
            out.push_str(&s.text);
            copied = s.range.end;
            report.degraded |= s.degraded;
            report.budget_exhausted |= s.exhausted;
            report.bloom_positive += s.bloom_positive;
            report.ner_requests += s.ner_requests;
            report.entities.extend(s.entities);
        }
        out.push_str(&text[copied..]);
        // Folded from +0.0: an empty f64 sum is -0.0.
        report.epsilon_spent_total = report.entities.iter().fold(0.0, |acc, e| acc + e.outcome.epsilon_spent);
        let end = Instant::now();
        report.timing = StageTimings {
            segment_ms: ms(segmented - start),
            contextual_ms: ms(contextual_done - segmented),
            structured_ms: ms(end - contextual_done),
            total_ms: ms(end - start),
        };
        Ok(Transformed { text: out, report })
    }

    /// Restores originals for every bidirectional mapping in the session.
    pub fn transform_response(&self, text: &str, store: &SessionStore) -> String {
        store.reverse_transform(text)
    }
}

/// Email local-part words that name a mapped original, with the initial of
/// its replacement.
fn email_links(store: &SessionStore) -> Vec<(String, char)> {
    let mut out = Vec::new();
    for (orig, repl) in store.forward() {
        let Some(initial) = repl.chars().next() else {
            continue;
        };
        for tok in tokenize(&orig) {
            out.push((normalize_token(tok.text), initial));
        }
    }
    out.sort();
    out.dedup_by(|a, b| a.0 == b.0);
    out
}

fn linked_initial(email: &str, links: &[(String, char)]) -> Option<char> {
    let local = &email[..email.rfind('@').unwrap_or(email.len())];
    let words: Vec<String> =
        local.split(|c: char| !c.is_alphabetic()).filter(|w| !w.is_empty()).map(normalize_token).collect();
    words.iter().find_map(|w| links.binary_search_by(|(k, _)| k.as_str().cmp(w)).ok().map(|i| links[i].1))
}

struct Ctx<'a> {
    pipeline: &'a Pipeline,
    policy: &'a TransformPolicy,
    store: &'a SessionStore,
    ner: &'a NerProviderConfig,
}

struct SentenceWork {
    range: Range<usize>,
    spans: Vec<EntitySpan>,
    /// Index-aligned with `spans`; `None` until transformed or when passed through.
    done: Vec<Option<(String, NoiseOutcome)>>,
    degraded: bool,
    exhausted: bool,
    bloom_positive: usize,
    ner_requests: usize,
}

struct SentenceOut {
    range: Range<usize>,
    text: String,
    entities: Vec<EntityOutcome>,
    degraded: bool,
    exhausted: bool,
    bloom_positive: usize,
    ner_requests: usize,
}

enum Failure {
    Exhausted(BudgetExhausted),
    Dp(DpError),
    Pool(PseudonymError),
    /// Every embedding draw hit a taken name; carries the epsilon charged.
    Crowded(f64),
}

fn outcome(original: &str, replacement: &str, epsilon: f64, mechanism: Mechanism) -> NoiseOutcome {
    NoiseOutcome {
        original: original.to_string(),
        replacement: replacement.to_string(),
        epsilon_spent: epsilon,
        mechanism,
        synthetic_embedding: false,
        cached: false,
    }
}

impl Ctx<'_> {
    fn assignment_error<E>(e: AssignError<E>) -> Result<(String, NoiseOutcome), PipelineError> {
        match e {
            AssignError::Collision { original, attempts } => Err(PipelineError::Assignment(format!(
                "no unused replacement for {original:?} after {attempts} attempts"
            ))),
            AssignError::EmptyOriginal => Err(PipelineError::Assignment("empty entity".into())),
            AssignError::Assigner(_) => unreachable!("assigner failures are handled by the caller"),
        }
    }

    fn exhausted(
        &self,
        span: &EntitySpan,
        e: BudgetExhausted,
        flag: &mut bool,
    ) -> Result<(String, NoiseOutcome), PipelineError> {
        match self.policy.on_exhaustion {
            ExhaustionPolicy::Reject => Err(PipelineError::BudgetExhausted(e)),
            ExhaustionPolicy::Redact => {
                *flag = true;
                let r = redact(&span.text, span.category);
                let o = outcome(&span.text, &r, 0.0, Mechanism::Redact);
                Ok((r, o))
            }
        }
    }

    fn contextual_pass(
        &self,
        text: &str,
        range: Range<usize>,
        rng: &mut ChaCha20Rng,
    ) -> Result<SentenceWork, PipelineError> {
        let sentence = &text[range.clone()];
        let tokens = tokenize(sentence);
        let structured = detect_structured(sentence, range.start);
        let names = detect_names(
            sentence,
            range.start,
            &tokens,
            &self.pipeline.gazetteer,
            self.ner,
            self.pipeline.ner.as_deref(),
        );
        let spans = merge_detections(structured, names.spans);
        let mut work = SentenceWork {
            range,
            done: vec![None; spans.len()],
            spans,
            degraded: names.degraded,
            exhausted: false,
            bloom_positive: names.bloom_positive,
            ner_requests: names.ner_requests,
        };
        for i in 0..work.spans.len() {
            if work.spans[i].category.is_contextual() {
                let span = work.spans[i].clone();
                work.done[i] = self.contextual(&span, rng, &mut work.degraded, &mut work.exhausted)?;
            }
        }
        Ok(work)
    }

    fn contextual(
        &self,
        span: &EntitySpan,
        rng: &mut ChaCha20Rng,
        degraded: &mut bool,
        exhausted: &mut bool,
    ) -> Result<Option<(String, NoiseOutcome)>, PipelineError> {
        let original = span.text.as_str();
        let p = self.pipeline;
        let action = self.policy.action(span.category);
        if span.category == Category::Name && self.policy.gender_debias {
            return self
                .assign_pseudonym(
                    span,
                    |ctx, rng| loop {
                        let id = debias_identifier(rng);
                        if !ctx.taken.contains(&id) {
                            return Ok(id);
                        }
                    },
                    rng,
                )
                .map(Some);
        }
        match action {
            Action::Passthrough => Ok(None),
            Action::Redact | Action::Noise => {
                let r = redact(original, span.category);
                Ok(Some((r.clone(), outcome(original, &r, 0.0, Mechanism::Redact))))
            }
            Action::EmbedLdp if span.category == Category::Name => match &p.table {
                Some(table) => {
                    let result = self.assign_embedded(span, table, rng);
                    match result {
                        Ok(v) => Ok(Some(v)),
                        Err(Failure::Exhausted(e)) => self.exhausted(span, e, exhausted).map(Some),
                        Err(Failure::Dp(DpError::EmptyPartition(_))) => {
                            *degraded = true;
                            self.pseudonymize(span, rng).map(Some)
                        }
                        Err(Failure::Dp(e)) => Err(e.into()),
                        // Every draw landed on a taken name; the dictionary
                        // pick can still avoid them. The draws stay charged.
                        Err(Failure::Crowded(spent)) => {
                            let (r, mut o) = self.pseudonymize(span, rng)?;
                            o.epsilon_spent += spent;
                            Ok(Some((r, o)))
                        }
                        Err(Failure::Pool(e)) => Err(PipelineError::Assignment(e.to_string())),
                    }
                }
                None => {
                    *degraded = true;
                    self.pseudonymize(span, rng).map(Some)
                }
            },
            Action::Pseudonymize | Action::EmbedLdp => self.pseudonymize(span, rng).map(Some),
        }
    }

    fn pseudonymize(&self, span: &EntitySpan, rng: &mut ChaCha20Rng) -> Result<(String, NoiseOutcome), PipelineError> {
        let p = self.pipeline;
        let original = span.text.as_str();
        if span.category == Category::Name {
            let gender = p.lexicon.infer_gender(original);
            self.assign_pseudonym(
                span,
                |ctx, rng| {
                    pick_pseudonym(gender, &p.pseudonyms, original, ctx.taken_normalized, rng)
                        .map(|n| match_case(original, &n))
                },
                rng,
            )
        } else {
            let category = span.category;
            let r = self.assign_pseudonym(
                span,
                |ctx, rng| {
                    p.places.pick(category, original, ctx.taken_normalized, rng).map(|n| match_case(original, &n))
                },
                rng,
            );
            match r {
                Err(PipelineError::Assignment(_)) if p.places.entries(category).is_empty() => {
                    let r = redact(original, category);
                    Ok((r.clone(), outcome(original, &r, 0.0, Mechanism::Redact)))
                }
                other => other,
            }
        }
    }

    /// Cached or freshly assigned bidirectional replacement with ε 0.
    fn assign_pseudonym<F>(
        &self,
        span: &EntitySpan,
        mut pick: F,
        rng: &mut ChaCha20Rng,
    ) -> Result<(String, NoiseOutcome), PipelineError>
    where
        F: FnMut(&AssignContext<'_>, &mut ChaCha20Rng) -> Result<String, PseudonymError>,
    {
        let ran = Cell::new(false);
        let result = self.store.get_or_assign(&span.text, |ctx| {
            ran.set(true);
            pick(ctx, rng)
        });
        match result {
            Ok(r) => {
                let mut o = outcome(&span.text, &r, 0.0, Mechanism::Pseudonym);
                o.cached = !ran.get();
                if ran.get() {
                    self.store.charge_budget(0.0, span.category, Mechanism::Pseudonym).ok();
                }
                Ok((r, o))
            }
            Err(AssignError::Assigner(e)) => Err(PipelineError::Assignment(e.to_string())),
            Err(e) => Self::assignment_error(e),
        }
    }

    fn assign_embedded(
        &self,
        span: &EntitySpan,
        table: &EmbeddingTable,
        rng: &mut ChaCha20Rng,
    ) -> Result<(String, NoiseOutcome), Failure> {
        let p = self.pipeline;
        let original = span.text.as_str();
        let gender = p.lexicon.infer_gender(original);
        let eps = self.policy.epsilon;
        let spent = Cell::new(0.0);
        let synthetic = Cell::new(false);
        let ran = Cell::new(false);
        let mut unit = None;
        let result = self.store.get_or_assign(original, |_ctx| {
            ran.set(true);
            self.store.charge_budget(eps, span.category, Mechanism::EmbedLdp).map_err(Failure::Exhausted)?;
            spent.set(spent.get() + eps);
            // Collision redraws reuse the vector and only redraw the noise.
            if unit.is_none() {
                let (v, source) = p
                    .vectors
                    .get_or_compute(original, gender, || source_vector(original, table, gender, p.embedder.as_deref()))
                    .map_err(Failure::Dp)?;
                synthetic.set(source == EmbedSource::Synthetic);
                unit = Some(v);
            }
            let v = unit.as_deref().expect("set above");
            let (replacement, _) = perturb_and_decode(v, eps, table, gender, rng).map_err(Failure::Dp)?;
            Ok(match_case(original, replacement))
        });
        match result {
            Ok(r) => {
                let mut o = outcome(original, &r, spent.get(), Mechanism::EmbedLdp);
                o.synthetic_embedding = synthetic.get();
                o.cached = !ran.get();
                Ok((r, o))
            }
            Err(AssignError::Assigner(f)) => Err(f),
            Err(AssignError::Collision { .. }) => Err(Failure::Crowded(spent.get())),
            Err(AssignError::EmptyOriginal) => {
                Err(Failure::Pool(PseudonymError::NoAlternative(gender.to_string(), original.to_string())))
            }
        }
    }

    fn structured_pass(
        &self,
        text: &str,
        mut work: SentenceWork,
        links: &[(String, char)],
        rng: &mut ChaCha20Rng,
    ) -> Result<SentenceOut, PipelineError> {
        for i in 0..work.spans.len() {
            if !work.spans[i].category.is_contextual() {
                let span = work.spans[i].clone();
                work.done[i] = self.structured(&span, links, rng, &mut work.exhausted)?;
            }
        }
        let base = work.range.start;
        let sentence = &text[work.range.clone()];
        let mut edits = Vec::new();
        let mut entities = Vec::new();
        for (span, done) in work.spans.into_iter().zip(work.done) {
            if let Some((replacement, outcome)) = done {
                edits.push(Edit { start: span.start - base, end: span.end - base, replacement });
                entities.push(EntityOutcome { span, outcome });
            }
        }
        if self.policy.gender_debias {
            let skip: Vec<Range<usize>> = entities.iter().map(|e| e.span.start - base..e.span.end - base).collect();
            edits.extend(self.pipeline.lexicon.pronoun_edits(sentence, &skip));
            edits.extend(self.pipeline.lexicon.term_edits(sentence, &skip));
        }
        Ok(SentenceOut {
            range: work.range,
            text: apply_edits(sentence, edits),
            entities,
            degraded: work.degraded,
            exhausted: work.exhausted,
            bloom_positive: work.bloom_positive,
            ner_requests: work.ner_requests,
        })
    }

    fn structured(
        &self,
        span: &EntitySpan,
        links: &[(String, char)],
        rng: &mut ChaCha20Rng,
        exhausted: &mut bool,
    ) -> Result<Option<(String, NoiseOutcome)>, PipelineError> {
        let original = span.text.as_str();
        match self.policy.action(span.category) {
            Action::Passthrough => return Ok(None),
            Action::Redact | Action::Pseudonymize | Action::EmbedLdp => {
                let r = redact(original, span.category);
                return Ok(Some((r.clone(), outcome(original, &r, 0.0, Mechanism::Redact))));
            }
            Action::Noise => {}
        }
        let eps = self.policy.epsilon;
        let s = &self.policy.sensitivities;
        let fresh = Cell::new(None::<FieldNoise>);
        let result = self.store.get_or_assign_one_way(original, || {
            let noise = match span.category {
                Category::Email => {
                    let masked = mask_email(original, linked_initial(original, links), rng);
                    FieldNoise { text: masked, epsilon_spent: 0.0, mechanism: Mechanism::Mask }
                }
                Category::Phone => noise_phone(original, eps, s.phone_last4, rng)?,
                Category::CreditCard => noise_credit_card(original, eps, s.card_last4, rng)?,
                Category::Ssn => noise_ssn(original, eps, s.ssn_last4, rng)?,
                Category::Zip => noise_zip(original, eps, s.zip, rng)?,
                Category::Date => noise_date(original, eps, s.date_days, rng)?,
                other => unreachable!("{other} is contextual"),
            };
            if noise.epsilon_spent > 0.0 {
                self.store
                    .charge_budget(noise.epsilon_spent, span.category, noise.mechanism)
                    .map_err(Failure::Exhausted)?;
            }
            let text = noise.text.clone();
            fresh.set(Some(noise));
            Ok::<_, Failure>(text)
        });
        match result {
            Ok(r) => {
                let o = match fresh.take() {
                    Some(n) => outcome(original, &r, n.epsilon_spent, n.mechanism),
                    None => {
                        let mechanism = if span.category == Category::Email {
                            Mechanism::Mask
                        } else if r == redact(original, span.category) {
                            Mechanism::Redact
                        } else {
                            Mechanism::Laplace
                        };
                        let mut o = outcome(original, &r, 0.0, mechanism);
                        o.cached = true;
                        o
                    }
                };
                Ok(Some((r, o)))
            }
            Err(Failure::Exhausted(e)) => self.exhausted(span, e, exhausted).map(Some),
            Err(Failure::Dp(e)) => Err(e.into()),
            Err(Failure::Pool(e)) => Err(PipelineError::Assignment(e.to_string())),
            Err(Failure::Crowded(_)) => Err(PipelineError::Assignment("every replacement draw collided".into())),
        }
    }
}

impl From<DpError> for Failure {
    fn from(e: DpError) -> Self {
        Failure::Dp(e)
    }
}
