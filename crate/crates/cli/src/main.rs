use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use promptveil_cli::bench::{self, BenchConfig, SentenceConfig, WordPools};
use promptveil_core::detect::{BloomFilter, BloomParams, DEFAULT_BLOOM_SEED};
use promptveil_core::dictionary::{parse_gendered, parse_records, read_text};
use promptveil_core::dp::{EmbeddingTable, DEFAULT_EMBEDDING_DIM, DEFAULT_SYNTHETIC_KEY};
use promptveil_core::pipeline::{resolve_policy, DeploymentMode, PolicyOverrides, PolicySet, TransformPolicy};
use promptveil_core::session::SessionStore;
use promptveil_gateway::{AppState, GatewayConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde_json::json;

#[derive(Parser)]
#[command(name = "promptveil", version, about = "Privacy-preserving prompt transformation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Transform a prompt; the report goes to standard error as JSON lines.
    Transform(TransformArgs),
    /// Restore originals in a model response using a saved session.
    Reverse(ReverseArgs),
    /// Build a serialized Bloom filter from a name list.
    BuildBloom(BuildBloomArgs),
    /// Build a synthetic embedding table from a `name<TAB>gender` list.
    BuildTable(BuildTableArgs),
    /// Check an embedding table file.
    VerifyTable { path: PathBuf },
    /// Run the HTTP service.
    Serve {
        #[arg(long)]
        config: PathBuf,
    },
    /// Time transformations across sentence shapes and lengths.
    Bench(BenchArgs),
}

#[derive(Args)]
struct Input {
    #[arg(long, conflicts_with = "stdin")]
    text: Option<String>,
    /// Read the text from standard input.
    #[arg(long)]
    stdin: bool,
}

impl Input {
    fn read(&self) -> Result<String, Failure> {
        match (&self.text, self.stdin) {
            (Some(t), _) => Ok(t.clone()),
            (None, true) => {
                let mut s = String::new();
                io::stdin().read_to_string(&mut s).map_err(Failure::runtime)?;
                Ok(s)
            }
            (None, false) => Err(Failure::usage("one of --text or --stdin is required")),
        }
    }
}

#[derive(Args)]
struct TransformArgs {
    #[command(flatten)]
    input: Input,
    #[arg(long)]
    epsilon: Option<f64>,
    /// Replace person names with neutral identifiers and neutralize
    /// gendered words.
    #[arg(long)]
    debias: bool,
    /// Transform policy (JSON, or TOML by extension).
    #[arg(long)]
    policy: Option<PathBuf>,
    /// Session file; loaded if present and written back afterwards.
    #[arg(long)]
    session: Option<PathBuf>,
    /// Seed for reproducible output.
    #[arg(long)]
    seed: Option<u64>,
    /// Synthetic embedding table over the pseudonym dictionary.
    #[arg(long)]
    synthetic_table: bool,
    /// Embedding table file.
    #[arg(long, conflicts_with = "synthetic_table")]
    table: Option<PathBuf>,
}

#[derive(Args)]
struct ReverseArgs {
    #[command(flatten)]
    input: Input,
    #[arg(long)]
    session: PathBuf,
}

#[derive(Args)]
struct BuildBloomArgs {
    /// One entry per line, optionally followed by a tab and a label.
    #[arg(long)]
    names: PathBuf,
    #[arg(long, default_value_t = 0.025)]
    fp: f64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_BLOOM_SEED)]
    seed: u64,
}

#[derive(Args)]
struct BuildTableArgs {
    #[arg(long)]
    names: PathBuf,
    #[arg(long, default_value_t = DEFAULT_EMBEDDING_DIM)]
    dim: usize,
    #[arg(long, default_value_t = DEFAULT_SYNTHETIC_KEY)]
    key: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, value_delimiter = ',', default_values_t = SentenceConfig::ALL)]
    configs: Vec<SentenceConfig>,
    /// Word counts; `a-b` ranges are accepted, e.g. `1-100`.
    #[arg(long, default_value = "1-100")]
    lengths: String,
    #[arg(long, default_value_t = bench::DEFAULT_ITERATIONS)]
    iterations: usize,
    #[arg(long, default_value_t = 1.0)]
    epsilon: f64,
    /// Route names through embedding LDP over a synthetic table.
    #[arg(long)]
    embedding: bool,
    /// Allow the pipeline's sentence-level parallelism.
    #[arg(long)]
    parallel: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// CSV destination; standard output when unset.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Base-word list replacing the packaged one.
    #[arg(long)]
    base_words: Option<PathBuf>,
    /// Name list replacing the packaged one.
    #[arg(long)]
    bench_names: Option<PathBuf>,
}

/// An error and the exit status it maps to.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(m: impl ToString) -> Self {
        Self { code: 2, message: m.to_string() }
    }

    fn runtime(m: impl ToString) -> Self {
        Self { code: 1, message: m.to_string() }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Transform(a) => transform(a),
        Command::Reverse(a) => reverse(a),
        Command::BuildBloom(a) => build_bloom(a),
        Command::BuildTable(a) => build_table(a),
        Command::VerifyTable { path } => verify_table(&path),
        Command::Serve { config } => serve(&config),
        Command::Bench(a) => run_bench(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn load_policy(path: &Path) -> Result<TransformPolicy, Failure> {
    let text = fs::read_to_string(path).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?;
    let parsed = if path.extension().is_some_and(|e| e == "toml") {
        toml::from_str::<TransformPolicy>(&text).map_err(|e| e.to_string())
    } else {
        serde_json::from_str::<TransformPolicy>(&text).map_err(|e| e.to_string())
    };
    let policy = parsed.map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?;
    policy.validate().map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?;
    Ok(policy)
}

fn open_session(path: Option<&Path>) -> Result<SessionStore, Failure> {
    match path {
        Some(p) if p.exists() => SessionStore::load(p).map_err(|e| Failure::runtime(format!("{}: {e}", p.display()))),
        Some(p) => Ok(SessionStore::new(
            p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "cli".into()),
            None,
        )),
        None => Ok(SessionStore::new("cli", None)),
    }
}

fn transform(a: TransformArgs) -> Result<(), Failure> {
    let base = match &a.policy {
        Some(p) => load_policy(p)?,
        None => TransformPolicy::default(),
    };
    let overrides =
        PolicyOverrides { epsilon: a.epsilon, gender_debias: a.debias.then_some(true), ..Default::default() };
    let central = PolicySet { default: base, ..Default::default() };
    let policy = resolve_policy(DeploymentMode::Device, None, &central, Some(&overrides)).map_err(Failure::usage)?;

    let text = a.input.read()?;
    let store = open_session(a.session.as_deref())?;
    let mut pipeline = promptveil_cli::bench::bench_pipeline(a.synthetic_table);
    if let Some(t) = &a.table {
        let table = EmbeddingTable::load(t).map_err(|e| Failure::runtime(format!("{}: {e}", t.display())))?;
        pipeline = pipeline.with_table(Arc::new(table));
    }
    let mut rng = match a.seed {
        Some(s) => ChaCha20Rng::seed_from_u64(s),
        None => ChaCha20Rng::from_os_rng(),
    };
    let out = pipeline.transform_prompt(&text, &policy, &store, &mut rng).map_err(Failure::runtime)?;
    print!("{}", out.text);
    io::stdout().flush().map_err(Failure::runtime)?;

    let mut err = io::stderr().lock();
    for e in &out.report.entities {
        let mut line = serde_json::to_value(e).map_err(Failure::runtime)?;
        line["event"] = json!("entity");
        let _ = writeln!(err, "{line}");
    }
    let summary = json!({
        "event": "summary",
        "entities": out.report.entities.len(),
        "epsilon_spent": out.report.epsilon_spent_total,
        "session_epsilon_spent": store.budget().spent(),
        "degraded": out.report.degraded,
        "budget_exhausted": out.report.budget_exhausted,
        "total_ms": out.report.timing.total_ms,
    });
    let _ = writeln!(err, "{summary}");
    if let Some(p) = &a.session {
        store.save(p).map_err(|e| Failure::runtime(format!("{}: {e}", p.display())))?;
    }
    Ok(())
}

fn reverse(a: ReverseArgs) -> Result<(), Failure> {
    let store =
        SessionStore::load(&a.session).map_err(|e| Failure::runtime(format!("{}: {e}", a.session.display())))?;
    let text = a.input.read()?;
    print!("{}", store.reverse_transform(&text));
    io::stdout().flush().map_err(Failure::runtime)
}

fn build_bloom(a: BuildBloomArgs) -> Result<(), Failure> {
    let text = read_text(&a.names).map_err(|e| Failure::runtime(format!("{}: {e}", a.names.display())))?;
    let records = parse_records(&text).map_err(|e| Failure::runtime(format!("{}: {e}", a.names.display())))?;
    if records.is_empty() {
        return Err(Failure::runtime(format!("{}: no entries", a.names.display())));
    }
    let filter =
        BloomFilter::from_tokens(records.iter().map(|(name, _, _)| name), a.fp, a.seed).map_err(Failure::runtime)?;
    filter.save(&a.out).map_err(Failure::runtime)?;
    let n = records.len() as u64;
    let BloomParams { bits, hashes } = filter.params();
    println!(
        "n={n} fp={} bits={bits} hashes={hashes} bits_per_element={:.4} expected_fp={:.6} seed={:#x}",
        a.fp,
        filter.params().bits_per_element(n),
        filter.params().expected_fp_rate(n),
        a.seed
    );
    Ok(())
}

fn build_table(a: BuildTableArgs) -> Result<(), Failure> {
    let text = read_text(&a.names).map_err(|e| Failure::runtime(format!("{}: {e}", a.names.display())))?;
    let names = parse_gendered(&text).map_err(|e| Failure::runtime(format!("{}: {e}", a.names.display())))?;
    let table = EmbeddingTable::synthetic(names, a.dim, a.key).map_err(Failure::runtime)?;
    table.save(&a.out).map_err(Failure::runtime)?;
    println!("count={} dim={}", table.len(), table.dim());
    Ok(())
}

fn verify_table(path: &Path) -> Result<(), Failure> {
    let table = EmbeddingTable::load(path).map_err(|e| Failure::runtime(format!("{}: {e}", path.display())))?;
    println!("ok count={} dim={}", table.len(), table.dim());
    Ok(())
}

fn serve(path: &Path) -> Result<(), Failure> {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()))
        .with_writer(io::stderr)
        .init();
    let config = GatewayConfig::load(path).map_err(Failure::usage)?;
    let state = AppState::from_config(config).map_err(Failure::runtime)?;
    let rt = tokio::runtime::Runtime::new().map_err(Failure::runtime)?;
    rt.block_on(promptveil_gateway::serve(Arc::new(state))).map_err(Failure::runtime)
}

fn parse_lengths(spec: &str) -> Result<Vec<usize>, Failure> {
    let mut out = Vec::new();
    for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let bad = || Failure::usage(format!("invalid length {part:?}"));
        match part.split_once('-') {
            Some((a, b)) => {
                let (a, b): (usize, usize) = (a.parse().map_err(|_| bad())?, b.parse().map_err(|_| bad())?);
                if a > b {
                    return Err(bad());
                }
                out.extend(a..=b);
            }
            None => out.push(part.parse().map_err(|_| bad())?),
        }
    }
    Ok(out)
}

fn run_bench(a: BenchArgs) -> Result<(), Failure> {
    let cfg = BenchConfig {
        configs: a.configs,
        lengths: parse_lengths(&a.lengths)?,
        iterations: a.iterations,
        epsilon: a.epsilon,
        embedding: a.embedding,
        parallel: a.parallel,
        seed: a.seed,
    };
    cfg.validate().map_err(Failure::usage)?;
    let read = |p: &Option<PathBuf>, packaged: &'static str| -> Result<String, Failure> {
        match p {
            Some(p) => fs::read_to_string(p).map_err(|e| Failure::runtime(format!("{}: {e}", p.display()))),
            None => Ok(packaged.to_string()),
        }
    };
    let pools =
        WordPools::from_texts(&read(&a.base_words, bench::BASE_WORDS)?, &read(&a.bench_names, bench::BENCH_NAMES)?);
    let rows = bench::run_bench(&cfg, &bench::bench_pipeline(cfg.embedding), &pools).map_err(Failure::runtime)?;
    match &a.out {
        Some(p) => {
            let f = fs::File::create(p).map_err(|e| Failure::runtime(format!("{}: {e}", p.display())))?;
            bench::write_csv(&rows, io::BufWriter::new(f)).map_err(Failure::runtime)?;
            print!("{}", bench::format_summary(&bench::summarize(&rows)));
        }
        None => {
            bench::write_csv(&rows, io::stdout().lock()).map_err(Failure::runtime)?;
            eprint!("{}", bench::format_summary(&bench::summarize(&rows)));
        }
    }
    Ok(())
}
