//! Per-session replacement mappings and the privacy-budget ledger.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex, MutexGuard};

use chrono::{DateTime, SecondsFormat, SubsecRound, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detect::Category;
use crate::dp::Mechanism;
use crate::text::{is_word_char, normalize_token, on_word_boundary};

/// Attempts per original before giving up on finding an unused replacement.
pub const MAX_ASSIGN_ATTEMPTS: usize = 16;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum AssignError<E> {
    #[error("no unused replacement for {original:?} after {attempts} attempts; the pseudonym dictionary is too small")]
    Collision { original: String, attempts: usize },
    #[error("empty original")]
    EmptyOriginal,
    #[error(transparent)]
    Assigner(E),
}

#[derive(Debug, Error, Clone, PartialEq)]
#[error("privacy budget exhausted: {spent} of {limit} spent, {requested} requested")]
pub struct BudgetExhausted {
    pub spent: f64,
    pub limit: f64,
    pub requested: f64,
}

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("unknown session {0:?}")]
    NotFound(String),
    #[error("malformed session snapshot: {0}")]
    Snapshot(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// What the assigner may consult. `taken` holds every replacement already
/// handed out in this session, `taken_normalized` the same under
/// [`normalize_token`].
pub struct AssignContext<'a> {
    pub original: &'a str,
    pub taken: &'a HashSet<String>,
    pub taken_normalized: &'a HashSet<String>,
    pub attempt: usize,
}

/// Converts ε to integer milli-ε. Values within 1e-6 of a whole milli-ε are
/// rounded, anything else is rounded up so charges are never understated.
pub fn to_milli(epsilon: f64) -> u64 {
    let scaled = epsilon * 1000.0;
    let nearest = scaled.round();
    if (scaled - nearest).abs() < 1e-6 {
        nearest.max(0.0) as u64
    } else {
        scaled.ceil().max(0.0) as u64
    }
}

pub fn from_milli(milli: u64) -> f64 {
    milli as f64 / 1000.0
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub timestamp: DateTime<Utc>,
    pub session_id: String,
    pub user_id: Option<String>,
    pub category: Category,
    pub milli_epsilon: u64,
    pub mechanism: Mechanism,
}

impl LedgerEntry {
    pub fn epsilon(&self) -> f64 {
        from_milli(self.milli_epsilon)
    }

    /// `timestamp<TAB>user<TAB>session<TAB>category<TAB>milli<TAB>mechanism`
    pub fn to_line(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}",
            self.timestamp.to_rfc3339_opts(SecondsFormat::Millis, true),
            self.user_id.as_deref().unwrap_or("-"),
            self.session_id,
            self.category,
            self.milli_epsilon,
            self.mechanism
        )
    }

    pub fn parse_line(line: &str) -> Option<Self> {
        let f: Vec<&str> = line.split('\t').collect();
        let [ts, user, session, category, milli, mechanism] = f.as_slice() else {
            return None;
        };
        Some(Self {
            timestamp: DateTime::parse_from_rfc3339(ts).ok()?.with_timezone(&Utc),
            session_id: session.to_string(),
            user_id: (*user != "-").then(|| user.to_string()),
            category: category.parse().ok()?,
            milli_epsilon: milli.parse().ok()?,
            mechanism: serde_json::from_value(serde_json::Value::String(mechanism.to_string())).ok()?,
        })
    }
}

/// Append-only ledger file shared by every account of a registry.
#[derive(Debug)]
pub struct LedgerSink {
    path: PathBuf,
    file: Mutex<File>,
}

impl LedgerSink {
    pub fn open(path: impl AsRef<Path>) -> std::io::Result<Self> {
        let path = path.as_ref().to_path_buf();
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        Ok(Self { path, file: Mutex::new(file) })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    fn append(&self, entry: &LedgerEntry) -> std::io::Result<()> {
        let mut f = lock(&self.file);
        writeln!(f, "{}", entry.to_line())
    }
}

#[derive(Debug, Default)]
struct BudgetState {
    spent_milli: u64,
    ledger: Vec<LedgerEntry>,
}

/// ε spend against an optional limit, in exact milli-ε.
#[derive(Debug)]
pub struct BudgetAccount {
    user: Option<String>,
    limit_milli: Option<u64>,
    state: Mutex<BudgetState>,
    sink: Option<Arc<LedgerSink>>,
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|poisoned| poisoned.into_inner())
}

impl BudgetAccount {
    pub fn new(user: Option<String>, limit: Option<f64>) -> Self {
        Self { user, limit_milli: limit.map(to_milli), state: Mutex::default(), sink: None }
    }

    pub fn with_sink(mut self, sink: Arc<LedgerSink>) -> Self {
        self.sink = Some(sink);
        self
    }

    pub fn limit(&self) -> Option<f64> {
        self.limit_milli.map(from_milli)
    }

    pub fn spent(&self) -> f64 {
        from_milli(lock(&self.state).spent_milli)
    }

    pub fn spent_milli(&self) -> u64 {
        lock(&self.state).spent_milli
    }

    pub fn remaining(&self) -> Option<f64> {
        let spent = self.spent_milli();
        self.limit_milli.map(|l| from_milli(l.saturating_sub(spent)))
    }

    pub fn ledger(&self) -> Vec<LedgerEntry> {
        lock(&self.state).ledger.clone()
    }

    /// Adds `epsilon` and appends a ledger entry, or reports exhaustion and
    /// leaves the account untouched. Ledger file failures are reported on
    /// standard error; the in-memory ledger stays authoritative.
    pub fn charge(
        &self,
        session_id: &str,
        epsilon: f64,
        category: Category,
        mechanism: Mechanism,
    ) -> Result<LedgerEntry, BudgetExhausted> {
        let milli = to_milli(epsilon);
        let mut st = lock(&self.state);
        if let Some(limit) = self.limit_milli {
            if st.spent_milli.saturating_add(milli) > limit {
                return Err(BudgetExhausted {
                    spent: from_milli(st.spent_milli),
                    limit: from_milli(limit),
                    requested: epsilon,
                });
            }
        }
        st.spent_milli += milli;
        let entry = LedgerEntry {
            // Millisecond precision, as written to the ledger file.
            timestamp: Utc::now().trunc_subsecs(3),
            session_id: session_id.to_string(),
            user_id: self.user.clone(),
            category,
            milli_epsilon: milli,
            mechanism,
        };
        st.ledger.push(entry.clone());
        if let Some(sink) = &self.sink {
            if let Err(e) = sink.append(&entry) {
                eprintln!("ledger write to {} failed: {e}", sink.path().display());
            }
        }
        Ok(entry)
    }

    fn reset(&self) {
        *lock(&self.state) = BudgetState::default();
    }
}

#[derive(Debug, Default)]
struct Mappings {
    forward: HashMap<String, String>,
    reverse: HashMap<String, String>,
    taken: HashSet<String>,
    taken_normalized: HashSet<String>,
    /// Noised or masked values: consistent within the session, never reversed.
    one_way: HashMap<String, String>,
}

/// One conversation's mappings. All operations are atomic per store.
#[derive(Debug)]
pub struct SessionStore {
    id: String,
    user: Option<String>,
    created_at: DateTime<Utc>,
    maps: Mutex<Mappings>,
    budget: Arc<BudgetAccount>,
    owns_budget: bool,
    assigner_calls: AtomicUsize,
}

impl SessionStore {
    /// A standalone store with its own budget.
    pub fn new(id: impl Into<String>, limit: Option<f64>) -> Self {
        let budget = Arc::new(BudgetAccount::new(None, limit));
        Self::with_budget(id, None, budget, true)
    }

    fn with_budget(id: impl Into<String>, user: Option<String>, budget: Arc<BudgetAccount>, owns_budget: bool) -> Self {
        Self {
            id: id.into(),
            user,
            created_at: Utc::now(),
            maps: Mutex::default(),
            budget,
            owns_budget,
            assigner_calls: AtomicUsize::new(0),
        }
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn user(&self) -> Option<&str> {
        self.user.as_deref()
    }

    pub fn created_at(&self) -> DateTime<Utc> {
        self.created_at
    }

    pub fn budget(&self) -> &Arc<BudgetAccount> {
        &self.budget
    }

    /// How many times an assigner has run since creation or the last clear.
    pub fn assigner_calls(&self) -> usize {
        self.assigner_calls.load(Ordering::Relaxed)
    }

    pub fn lookup(&self, original: &str) -> Option<String> {
        lock(&self.maps).forward.get(original).cloned()
    }

    pub fn original_of(&self, replacement: &str) -> Option<String> {
        lock(&self.maps).reverse.get(replacement).cloned()
    }

    pub fn len(&self) -> usize {
        lock(&self.maps).forward.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn forward(&self) -> BTreeMap<String, String> {
        lock(&self.maps).forward.iter().map(|(k, v)| (k.clone(), v.clone())).collect()
    }

    /// Cached replacement for `original`, or the assigner's output for it.
    ///
    /// The lock is held while the assigner runs, so the first caller for a
    /// new original wins and every concurrent caller sees its result. An
    /// output already used for another original is rejected and the
    /// assigner is asked again.
    pub fn get_or_assign<F, E>(&self, original: &str, mut assigner: F) -> Result<String, AssignError<E>>
    where
        F: FnMut(&AssignContext<'_>) -> Result<String, E>,
    {
        if original.is_empty() {
            return Err(AssignError::EmptyOriginal);
        }
        let mut maps = lock(&self.maps);
        if let Some(r) = maps.forward.get(original) {
            return Ok(r.clone());
        }
        for attempt in 0..MAX_ASSIGN_ATTEMPTS {
            self.assigner_calls.fetch_add(1, Ordering::Relaxed);
            let ctx = AssignContext { original, taken: &maps.taken, taken_normalized: &maps.taken_normalized, attempt };
            let candidate = assigner(&ctx).map_err(AssignError::Assigner)?;
            // A rejected candidate is already in `taken`.
            if candidate.is_empty() || maps.reverse.contains_key(&candidate) {
                continue;
            }
            maps.forward.insert(original.to_string(), candidate.clone());
            maps.reverse.insert(candidate.clone(), original.to_string());
            maps.taken_normalized.insert(normalize_token(&candidate));
            maps.taken.insert(candidate.clone());
            return Ok(candidate);
        }
        Err(AssignError::Collision { original: original.to_string(), attempts: MAX_ASSIGN_ATTEMPTS })
    }

    /// Like [`get_or_assign`](Self::get_or_assign) for values that are never
    /// reversed; replacements need not be unique.
    pub fn get_or_assign_one_way<F, E>(&self, original: &str, assigner: F) -> Result<String, E>
    where
        F: FnOnce() -> Result<String, E>,
    {
        let mut maps = lock(&self.maps);
        if let Some(r) = maps.one_way.get(original) {
            return Ok(r.clone());
        }
        self.assigner_calls.fetch_add(1, Ordering::Relaxed);
        let r = assigner()?;
        maps.one_way.insert(original.to_string(), r.clone());
        Ok(r)
    }

    /// Charges this session's budget account.
    pub fn charge_budget(
        &self,
        epsilon: f64,
        category: Category,
        mechanism: Mechanism,
    ) -> Result<LedgerEntry, BudgetExhausted> {
        self.budget.charge(&self.id, epsilon, category, mechanism)
    }

    /// Replaces every word-bounded occurrence of a replacement with its
    /// original, longest replacement first, in one left-to-right pass.
    pub fn reverse_transform(&self, text: &str) -> String {
        let maps = lock(&self.maps);
        if maps.reverse.is_empty() {
            return text.to_string();
        }
        let mut keys: Vec<(&str, &str)> = maps.reverse.iter().map(|(k, v)| (k.as_str(), v.as_str())).collect();
        keys.sort_by(|a, b| b.0.len().cmp(&a.0.len()).then_with(|| a.0.cmp(b.0)));
        let mut out = String::with_capacity(text.len());
        let mut copied = 0;
        let mut prev: Option<char> = None;
        let mut iter = text.char_indices().peekable();
        while let Some(&(i, c)) = iter.peek() {
            if i >= copied && !prev.is_some_and(is_word_char) {
                let hit = keys.iter().find(|(k, _)| text[i..].starts_with(k) && on_word_boundary(text, i, i + k.len()));
                if let Some((k, orig)) = hit {
                    out.push_str(&text[copied..i]);
                    out.push_str(orig);
                    copied = i + k.len();
                }
            }
            prev = Some(c);
            iter.next();
        }
        out.push_str(&text[copied..]);
        out
    }

    /// Drops every mapping. A budget owned by this store is reset too.
    pub fn clear(&self) {
        *lock(&self.maps) = Mappings::default();
        self.assigner_calls.store(0, Ordering::Relaxed);
        if self.owns_budget {
            self.budget.reset();
        }
    }

    pub fn snapshot(&self) -> SessionSnapshot {
        let maps = lock(&self.maps);
        SessionSnapshot {
            session_id: self.id.clone(),
            user_id: self.user.clone(),
            created_at: self.created_at,
            forward: maps.forward.iter().map(|(k, v)| (k.clone(), v.clone())).collect(),
            one_way: maps.one_way.iter().map(|(k, v)| (k.clone(), v.clone())).collect(),
            epsilon_limit: self.budget.limit(),
            ledger: self.budget.ledger(),
        }
    }

    /// Rebuilds a standalone store from a snapshot.
    pub fn from_snapshot(snap: SessionSnapshot) -> Result<Self, SessionError> {
        let mut reverse = HashMap::new();
        for (orig, repl) in &snap.forward {
            if reverse.insert(repl.clone(), orig.clone()).is_some() {
                return Err(SessionError::Snapshot(format!("replacement {repl:?} maps to two originals")));
            }
        }
        let budget = BudgetAccount::new(snap.user_id.clone(), snap.epsilon_limit);
        {
            let mut st = lock(&budget.state);
            st.spent_milli = snap.ledger.iter().map(|e| e.milli_epsilon).sum();
            st.ledger = snap.ledger;
        }
        let mut store = Self::with_budget(snap.session_id, snap.user_id, Arc::new(budget), true);
        store.created_at = snap.created_at;
        let maps = Mappings {
            taken: reverse.keys().cloned().collect(),
            taken_normalized: reverse.keys().map(|k| normalize_token(k)).collect(),
            forward: snap.forward.into_iter().collect(),
            reverse,
            one_way: snap.one_way.into_iter().collect(),
        };
        *lock(&store.maps) = maps;
        Ok(store)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, SessionError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_snapshot(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), SessionError> {
        std::fs::write(path, serde_json::to_string_pretty(&self.snapshot())?)?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionSnapshot {
    pub session_id: String,
    #[serde(default)]
    pub user_id: Option<String>,
    pub created_at: DateTime<Utc>,
    pub forward: BTreeMap<String, String>,
    #[serde(default)]
    pub one_way: BTreeMap<String, String>,
    #[serde(default)]
    pub epsilon_limit: Option<f64>,
    #[serde(default)]
    pub ledger: Vec<LedgerEntry>,
}

/// Whose spend an ε limit bounds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BudgetScope {
    /// Each session has its own limit; clearing it resets the spend.
    PerSession,
    /// All sessions of a user share one account that outlives clears.
    PerUser,
}

type SessionKey = (Option<String>, String);

/// Stores keyed by (user, session).
#[derive(Debug)]
pub struct SessionRegistry {
    scope: BudgetScope,
    sessions: Mutex<HashMap<SessionKey, Arc<SessionStore>>>,
    accounts: Mutex<HashMap<Option<String>, Arc<BudgetAccount>>>,
    sink: Option<Arc<LedgerSink>>,
}

impl SessionRegistry {
    pub fn new(scope: BudgetScope) -> Self {
        Self { scope, sessions: Mutex::default(), accounts: Mutex::default(), sink: None }
    }

    pub fn with_ledger(mut self, sink: LedgerSink) -> Self {
        self.sink = Some(Arc::new(sink));
        self
    }

    pub fn scope(&self) -> BudgetScope {
        self.scope
    }

    fn account(&self, user: Option<&str>, limit: Option<f64>) -> Arc<BudgetAccount> {
        let fresh = || {
            let acct = BudgetAccount::new(user.map(str::to_string), limit);
            Arc::new(match &self.sink {
                Some(s) => acct.with_sink(Arc::clone(s)),
                None => acct,
            })
        };
        match self.scope {
            BudgetScope::PerSession => fresh(),
            BudgetScope::PerUser => {
                Arc::clone(lock(&self.accounts).entry(user.map(str::to_string)).or_insert_with(fresh))
            }
        }
    }

    /// The store for (user, session), created with `limit` if new. Under a
    /// per-user scope the limit of the user's first session sticks.
    pub fn open(&self, user: Option<&str>, session: &str, limit: Option<f64>) -> Arc<SessionStore> {
        let key = (user.map(str::to_string), session.to_string());
        let mut sessions = lock(&self.sessions);
        if let Some(s) = sessions.get(&key) {
            return Arc::clone(s);
        }
        let owns = self.scope == BudgetScope::PerSession;
        let store = Arc::new(SessionStore::with_budget(session, key.0.clone(), self.account(user, limit), owns));
        sessions.insert(key, Arc::clone(&store));
        store
    }

    pub fn get(&self, user: Option<&str>, session: &str) -> Option<Arc<SessionStore>> {
        lock(&self.sessions).get(&(user.map(str::to_string), session.to_string())).cloned()
    }

    /// Removes the session. Later opens start with fresh mappings.
    pub fn clear_session(&self, user: Option<&str>, session: &str) -> Result<(), SessionError> {
        let removed = lock(&self.sessions).remove(&(user.map(str::to_string), session.to_string()));
        match removed {
            Some(store) => {
                store.clear();
                Ok(())
            }
            None => Err(SessionError::NotFound(session.to_string())),
        }
    }

    pub fn len(&self) -> usize {
        lock(&self.sessions).len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Account of a user under a per-user scope.
    pub fn user_account(&self, user: Option<&str>) -> Option<Arc<BudgetAccount>> {
        lock(&self.accounts).get(&user.map(str::to_string)).cloned()
    }
}
