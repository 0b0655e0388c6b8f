//! Per-sentence transformation latency across sentence shapes and lengths.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::io;
use std::sync::Arc;
use std::time::{Duration, Instant};

use chrono::NaiveDate;
use promptveil_core::detect::Category;
use promptveil_core::dp::{EmbeddingTable, DEFAULT_EMBEDDING_DIM, DEFAULT_SYNTHETIC_KEY};
use promptveil_core::pipeline::{Action, Pipeline, PipelineError, TransformPolicy};
use promptveil_core::session::SessionStore;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::stats::{mean, median, stddev};

pub const BASE_WORDS: &str = include_str!("../data/base_words.txt");
pub const BENCH_NAMES: &str = include_str!("../data/bench_names.txt");
pub const CSV_HEADER: [&str; 4] = ["config", "length", "iter", "overhead_ms"];
pub const DEFAULT_ITERATIONS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum SentenceConfig {
    Simple,
    Names,
    Dates,
    NamesDates,
}

impl SentenceConfig {
    pub const ALL: [SentenceConfig; 4] =
        [SentenceConfig::Simple, SentenceConfig::Names, SentenceConfig::Dates, SentenceConfig::NamesDates];

    pub fn as_str(self) -> &'static str {
        match self {
            SentenceConfig::Simple => "simple",
            SentenceConfig::Names => "names",
            SentenceConfig::Dates => "dates",
            SentenceConfig::NamesDates => "names_dates",
        }
    }

    /// Word types in round-robin order.
    fn cycle(self) -> &'static [WordKind] {
        use WordKind::*;
        match self {
            SentenceConfig::Simple => &[Base],
            SentenceConfig::Names => &[Name, Base],
            SentenceConfig::Dates => &[Date, Base],
            SentenceConfig::NamesDates => &[Name, Date, Base],
        }
    }
}

impl std::fmt::Display for SentenceConfig {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for SentenceConfig {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL.into_iter().find(|c| c.as_str() == s).ok_or_else(|| format!("unknown sentence configuration {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum WordKind {
    Base,
    Name,
    Date,
}

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("word pool {0} is empty")]
    EmptyPool(&'static str),
    #[error("invalid benchmark configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error("cache not cleared: iteration started with {0} assigner calls")]
    WarmCache(usize),
    #[error("assigner ran {calls} times for {entities} entities")]
    AssignerMismatch { calls: usize, entities: usize },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] io::Error),
}

fn words(text: &str) -> Vec<String> {
    text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')).map(str::to_string).collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WordPools {
    pub base: Vec<String>,
    pub names: Vec<String>,
    pub dates: Vec<String>,
}

impl WordPools {
    /// `base` and `names` hold one word per line; dates are every ISO day
    /// of 2015 through 2024.
    pub fn from_texts(base: &str, names: &str) -> Self {
        let start = NaiveDate::from_ymd_opt(2015, 1, 1).expect("valid date");
        let end = NaiveDate::from_ymd_opt(2025, 1, 1).expect("valid date");
        let dates = start.iter_days().take_while(|d| *d < end).map(|d| d.format("%Y-%m-%d").to_string()).collect();
        Self { base: words(base), names: words(names), dates }
    }

    pub fn builtin() -> Self {
        Self::from_texts(BASE_WORDS, BENCH_NAMES)
    }

    fn pool(&self, kind: WordKind) -> (&'static str, &[String]) {
        match kind {
            WordKind::Base => ("base", &self.base),
            WordKind::Name => ("names", &self.names),
            WordKind::Date => ("dates", &self.dates),
        }
    }

    fn check(&self, config: SentenceConfig) -> Result<(), BenchError> {
        for &kind in config.cycle() {
            let (label, pool) = self.pool(kind);
            if pool.is_empty() {
                return Err(BenchError::EmptyPool(label));
            }
        }
        Ok(())
    }
}

/// A sentence of `length` words cycling through the configuration's word
/// types, each word drawn uniformly from its pool.
///
/// Panics if a pool the configuration needs is empty.
pub fn generate_sentence<R: Rng + ?Sized>(
    config: SentenceConfig,
    length: usize,
    pools: &WordPools,
    rng: &mut R,
) -> String {
    let cycle = config.cycle();
    let mut s = String::new();
    for i in 0..length {
        let (_, pool) = pools.pool(cycle[i % cycle.len()]);
        if i > 0 {
            s.push(' ');
        }
        s.push_str(pool.choose(rng).expect("nonempty pool"));
    }
    s
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub configs: Vec<SentenceConfig>,
    pub lengths: Vec<usize>,
    pub iterations: usize,
    pub epsilon: f64,
    /// Names go through embedding LDP instead of dictionary pseudonyms.
    pub embedding: bool,
    /// Let the pipeline fan sentences out to worker threads.
    pub parallel: bool,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            configs: SentenceConfig::ALL.to_vec(),
            lengths: (1..=100).collect(),
            iterations: DEFAULT_ITERATIONS,
            epsilon: 1.0,
            embedding: false,
            parallel: false,
            seed: 0,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<(), BenchError> {
        if self.configs.is_empty() {
            return Err(BenchError::Config("no sentence configurations".into()));
        }
        if self.lengths.is_empty() || self.lengths.contains(&0) {
            return Err(BenchError::Config("lengths must be positive".into()));
        }
        if self.iterations == 0 {
            return Err(BenchError::Config("iterations must be at least 1".into()));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(BenchError::Config(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        Ok(())
    }

    pub fn policy(&self) -> TransformPolicy {
        let base = TransformPolicy { epsilon: self.epsilon, parallel: self.parallel, ..Default::default() };
        if self.embedding {
            TransformPolicy { embedding_enabled: true, ..base }.with_action(Category::Name, Action::EmbedLdp)
        } else {
            base
        }
    }
}

/// Packaged pipeline; with `embedding`, plus a synthetic table over the
/// pseudonym dictionary.
pub fn bench_pipeline(embedding: bool) -> Pipeline {
    let p = Pipeline::builtin();
    if !embedding {
        return p;
    }
    let entries: Vec<(String, _)> = p.pseudonyms().all().map(|(n, g)| (n.to_string(), g)).collect();
    let table = EmbeddingTable::synthetic(entries, DEFAULT_EMBEDDING_DIM, DEFAULT_SYNTHETIC_KEY)
        .expect("packaged pseudonyms form a valid table");
    p.with_table(Arc::new(table))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub config: SentenceConfig,
    pub length: usize,
    pub iter: usize,
    pub overhead_ms: f64,
}

/// Untimed transforms run before measuring, cycling through every
/// configuration at the longest length.
pub const WARMUP: Duration = Duration::from_millis(200);

/// Times `transform_prompt` on a fresh sentence per iteration, clearing the
/// session before each one so every entity is transformed cold.
///
/// Cells run one at a time after a [`WARMUP`] period. Iterations form the
/// outer loop and the cell order is shuffled within each pass, so slow drift
/// in machine state spreads over all lengths instead of tracking them. Rows
/// come back ordered by configuration, length and iteration.
pub fn run_bench(cfg: &BenchConfig, pipeline: &Pipeline, pools: &WordPools) -> Result<Vec<BenchRow>, BenchError> {
    cfg.validate()?;
    for &c in &cfg.configs {
        pools.check(c)?;
    }
    let policy = cfg.policy();
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let store = SessionStore::new("bench", None);

    let longest = cfg.lengths.iter().copied().max().expect("validated nonempty");
    let warm_start = Instant::now();
    for &config in cfg.configs.iter().cycle() {
        if warm_start.elapsed() >= WARMUP {
            break;
        }
        store.clear();
        let warm = generate_sentence(config, longest, pools, &mut rng);
        pipeline.transform_prompt(&warm, &policy, &store, &mut rng)?;
    }

    let mut cells: Vec<(SentenceConfig, usize)> =
        cfg.configs.iter().flat_map(|&c| cfg.lengths.iter().map(move |&l| (c, l))).collect();
    let mut rows = Vec::with_capacity(cells.len() * cfg.iterations);
    for iter in 0..cfg.iterations {
        cells.shuffle(&mut rng);
        for &(config, length) in &cells {
            store.clear();
            if store.assigner_calls() != 0 || !store.is_empty() {
                return Err(BenchError::WarmCache(store.assigner_calls()));
            }
            let sentence = generate_sentence(config, length, pools, &mut rng);
            let t0 = Instant::now();
            let out = pipeline.transform_prompt(&sentence, &policy, &store, &mut rng)?;
            let overhead_ms = t0.elapsed().as_secs_f64() * 1000.0;

            let distinct: HashSet<(Category, &str)> =
                out.report.entities.iter().map(|e| (e.span.category, e.span.text.as_str())).collect();
            let calls = store.assigner_calls();
            // Embedding draws may collide and be redrawn; dictionary
            // picks never do.
            let consistent = if cfg.embedding { calls >= distinct.len() } else { calls == distinct.len() };
            if !consistent {
                return Err(BenchError::AssignerMismatch { calls, entities: distinct.len() });
            }
            rows.push(BenchRow { config, length, iter, overhead_ms });
        }
    }
    let position = |c: SentenceConfig| cfg.configs.iter().position(|&x| x == c);
    let length_pos = |l: usize| cfg.lengths.iter().position(|&x| x == l);
    rows.sort_by_key(|r| (position(r.config), length_pos(r.length), r.iter));
    Ok(rows)
}

pub fn write_csv<W: io::Write>(rows: &[BenchRow], w: W) -> Result<(), BenchError> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(CSV_HEADER)?;
    for r in rows {
        out.write_record([
            r.config.as_str(),
            &r.length.to_string(),
            &r.iter.to_string(),
            &format!("{:.6}", r.overhead_ms),
        ])?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_csv<R: io::Read>(r: R) -> Result<Vec<BenchRow>, BenchError> {
    let mut rdr = csv::Reader::from_reader(r);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if header != CSV_HEADER {
        return Err(BenchError::Config(format!("unexpected CSV header {header:?}")));
    }
    Ok(rdr.deserialize().collect::<Result<_, _>>()?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellSummary {
    pub config: SentenceConfig,
    pub length: usize,
    pub n: usize,
    pub mean_ms: f64,
    pub stddev_ms: f64,
    pub median_ms: f64,
}

/// One summary per (configuration, length), in first-seen order.
pub fn summarize(rows: &[BenchRow]) -> Vec<CellSummary> {
    let mut keys: Vec<(SentenceConfig, usize)> = Vec::new();
    for r in rows {
        if !keys.contains(&(r.config, r.length)) {
            keys.push((r.config, r.length));
        }
    }
    keys.into_iter()
        .map(|(config, length)| {
            let xs: Vec<f64> =
                rows.iter().filter(|r| r.config == config && r.length == length).map(|r| r.overhead_ms).collect();
            CellSummary {
                config,
                length,
                n: xs.len(),
                mean_ms: mean(&xs),
                stddev_ms: stddev(&xs),
                median_ms: median(&xs),
            }
        })
        .collect()
}

pub fn format_summary(cells: &[CellSummary]) -> String {
    let mut s =
        format!("{:<12} {:>6} {:>4} {:>20} {:>11}\n", "config", "length", "n", "mean ± stddev (ms)", "median (ms)");
    for c in cells {
        let pm = format!("{:.3} ± {:.3}", c.mean_ms, c.stddev_ms);
        let _ = writeln!(s, "{:<12} {:>6} {:>4} {:>20} {:>11.3}", c.config.as_str(), c.length, c.n, pm, c.median_ms);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kinds(s: &str, pools: &WordPools) -> Vec<char> {
        s.split(' ')
            .map(|w| {
                if pools.names.iter().any(|n| n == w) {
                    'n'
                } else if pools.dates.iter().any(|d| d == w) {
                    'd'
                } else {
                    assert!(pools.base.iter().any(|b| b == w), "{w}");
                    'b'
                }
            })
            .collect()
    }

    #[test]
    fn round_robin_shapes() {
        let pools = WordPools::builtin();
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let mut shape = |c, l| kinds(&generate_sentence(c, l, &pools, &mut rng), &pools);
        assert_eq!(shape(SentenceConfig::Names, 4), ['n', 'b', 'n', 'b']);
        assert_eq!(shape(SentenceConfig::Simple, 1), ['b']);
        let nd = shape(SentenceConfig::NamesDates, 9);
        for k in ['n', 'd', 'b'] {
            assert_eq!(nd.iter().filter(|&&c| c == k).count(), 3);
        }
        assert_eq!(shape(SentenceConfig::Dates, 3), ['d', 'b', 'd']);
    }

    #[test]
    fn csv_cardinality_and_round_trip() {
        let cfg = BenchConfig { lengths: vec![1, 3], iterations: 2, ..Default::default() };
        let rows = run_bench(&cfg, &bench_pipeline(false), &WordPools::builtin()).unwrap();
        assert_eq!(rows.len(), 4 * 2 * 2);
        let mut buf = Vec::new();
        write_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("config,length,iter,overhead_ms\n"));
        assert_eq!(text.lines().count(), 17);
        let back = read_csv(buf.as_slice()).unwrap();
        assert_eq!(back.len(), rows.len());
        assert_eq!(back[5].config, rows[5].config);
        let cells = summarize(&rows);
        assert_eq!(cells.len(), 8);
        assert!(cells.iter().all(|c| c.n == 2));
        assert!(format_summary(&cells).lines().count() == 9);
    }

    #[test]
    fn empty_pool_and_bad_config() {
        let pools = WordPools { names: vec![], ..WordPools::builtin() };
        let cfg = BenchConfig { lengths: vec![2], iterations: 1, ..Default::default() };
        assert!(matches!(run_bench(&cfg, &bench_pipeline(false), &pools), Err(BenchError::EmptyPool("names"))));
        let cfg = BenchConfig { iterations: 0, ..Default::default() };
        assert!(cfg.validate().is_err());
        assert!("names_dates".parse::<SentenceConfig>().is_ok());
        assert!("bogus".parse::<SentenceConfig>().is_err());
    }

    #[test]
    fn embedding_runs_use_the_table() {
        let cfg = BenchConfig {
            configs: vec![SentenceConfig::Names],
            lengths: vec![6],
            iterations: 2,
            embedding: true,
            ..Default::default()
        };
        let rows = run_bench(&cfg, &bench_pipeline(true), &WordPools::builtin()).unwrap();
        assert_eq!(rows.len(), 2);
    }
}
