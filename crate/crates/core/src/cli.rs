//! Operator entry point: run configuration, subcommands and JSON-line logs on stderr.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::corpus::{load_corpus, Corpus, Qrels};
use crate::desk::{desk_suite, DeskConfig};
use crate::encoder::{build_context_cache, ContextCache, Contextualizer, EncoderConfig, EncoderWeights, TaskPrefix};
use crate::error::{Error, Result};
use crate::harness::{
    ablate_anchor_count, ablate_context_size, ablate_k, default_workers, desk_pretraining_corpus, emit_report,
    run_condition, run_parallel, select_exemplars, Condition, ConditionName, EvalReport, Suite, A_VALUES, J_VALUES,
    K_VALUES,
};
use crate::provider::{NgramTable, Provider, ProviderConfig, ProviderKind};
use crate::retrieval::{build_index, search, write_trec_run, DenseIndex};
use crate::seed;
use crate::synthesis::{synthesize_corpus, SynthesisPlan};
use crate::trainer::{train_toy_encoder, write_training_log, TrainedEncoder, TrainingConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
/// Some runs of an evaluate or ablate invocation failed.
pub const EXIT_PARTIAL: i32 = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthesisSettings {
    pub k: usize,
    pub anchors: usize,
    pub j_prime: usize,
}

impl Default for SynthesisSettings {
    fn default() -> Self {
        SynthesisSettings { k: 5, anchors: 20, j_prime: 512 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainerSettings {
    pub steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub context_size: usize,
    pub tau: f64,
}

impl Default for TrainerSettings {
    fn default() -> Self {
        let t = TrainingConfig::default();
        TrainerSettings {
            steps: t.steps,
            learning_rate: t.learning_rate,
            batch_size: t.batch_size,
            context_size: t.context_size,
            tau: t.tau,
        }
    }
}

/// Evaluation suite files. Leaving target, queries, qrels and exemplar
/// source unset selects the built-in desk suite.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SuitePaths {
    pub exemplar_source: Option<PathBuf>,
    pub target: Option<PathBuf>,
    pub queries: Option<PathBuf>,
    pub qrels: Option<PathBuf>,
    pub off_domain: Option<PathBuf>,
    pub pretrain: Option<PathBuf>,
}

impl SuitePaths {
    fn required(&self) -> [(&'static str, &Option<PathBuf>); 4] {
        [
            ("suite.exemplar_source", &self.exemplar_source),
            ("suite.target", &self.target),
            ("suite.queries", &self.queries),
            ("suite.qrels", &self.qrels),
        ]
    }

    pub fn is_builtin(&self) -> bool {
        self.required().iter().all(|(_, p)| p.is_none())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub provider: ProviderConfig,
    pub synthesis: SynthesisSettings,
    pub encoder: EncoderConfig,
    pub trainer: TrainerSettings,
    pub suite: SuitePaths,
    /// Frozen weights; defaults to `<out>/weights.json` where a file is needed.
    pub weights: Option<PathBuf>,
    /// Context corpus for `embed`; defaults to the synthesized documents.
    pub context: Option<PathBuf>,
    pub conditions: Vec<ConditionName>,
    pub seeds: Vec<u64>,
    pub max_concurrency: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out: PathBuf::from("out"),
            provider: ProviderConfig::default(),
            synthesis: SynthesisSettings::default(),
            encoder: EncoderConfig::default(),
            trainer: TrainerSettings::default(),
            suite: SuitePaths::default(),
            weights: None,
            context: None,
            conditions: ConditionName::ALL.to_vec(),
            seeds: crate::harness::DEFAULT_SEEDS.collect(),
            max_concurrency: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Every problem with the configuration, in a stable order.
    pub fn problems(&self) -> Vec<String> {
        let mut out = self.provider.problems();
        let e = &self.encoder;
        if e.token_dim == 0 || e.stage1_dim == 0 || e.output_dim == 0 {
            out.push("encoder dimensions must be positive".into());
        }
        if !(0.0..=1.0).contains(&e.alpha) {
            out.push("encoder.alpha must lie in [0, 1]".into());
        }
        if self.trainer.steps == 0 {
            out.push("trainer.steps must be at least 1".into());
        }
        if self.trainer.batch_size < 2 {
            out.push("trainer.batch_size must be at least 2".into());
        }
        if !(self.trainer.tau > 0.0) {
            out.push("trainer.tau must be positive".into());
        }
        if !(self.trainer.learning_rate > 0.0) {
            out.push("trainer.learning_rate must be positive".into());
        }
        let s = &self.synthesis;
        if s.k == 0 {
            out.push("synthesis.k must be at least 1".into());
        }
        if s.anchors == 0 {
            out.push("synthesis.anchors must be at least 1".into());
        }
        if s.j_prime < s.anchors {
            out.push(format!("synthesis.j_prime ({}) must be at least synthesis.anchors ({})", s.j_prime, s.anchors));
        }
        if self.max_concurrency == Some(0) {
            out.push("max_concurrency must be at least 1".into());
        }
        if self.conditions.is_empty() {
            out.push("conditions must not be empty".into());
        }
        if self.seeds.is_empty() {
            out.push("seeds must not be empty".into());
        }
        let required = self.suite.required();
        if !self.suite.is_builtin() {
            for (name, p) in required {
                if p.is_none() {
                    out.push(format!("{name} is required when any suite file is given"));
                }
            }
        }
        let optional = [
            ("suite.off_domain", &self.suite.off_domain),
            ("suite.pretrain", &self.suite.pretrain),
            ("weights", &self.weights),
            ("context", &self.context),
        ];
        for (name, p) in required.into_iter().chain(optional) {
            if let Some(p) = p {
                if !p.exists() {
                    out.push(format!("{name}: {} does not exist", p.display()));
                }
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p.join("; ")))
        }
    }

    pub fn training_config(&self, pretrain_corpus: &str) -> TrainingConfig {
        let t = &self.trainer;
        TrainingConfig {
            steps: t.steps,
            learning_rate: t.learning_rate,
            batch_size: t.batch_size,
            context_size: t.context_size,
            tau: t.tau,
            seed: seed::derive(self.seed, "trainer"),
            pretrain_corpus: pretrain_corpus.to_string(),
            encoder: self.encoder.clone(),
        }
    }

    fn condition(&self, name: ConditionName) -> Condition {
        let c = Condition::new(name).with_k(self.synthesis.k).with_anchors(self.synthesis.anchors);
        if name == ConditionName::NoContext {
            c
        } else {
            c.with_j(self.synthesis.j_prime)
        }
    }

    fn workers(&self) -> usize {
        self.max_concurrency.unwrap_or_else(default_workers)
    }

    fn weights_path(&self) -> PathBuf {
        self.weights.clone().unwrap_or_else(|| self.out.join("weights.json"))
    }
}

#[derive(Debug, Parser)]
#[command(name = "ctxsynth", version, about = "Contextual retrieval with synthesized context corpora")]
pub struct Cli {
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Root seed; subsystem seeds are derived from it.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, value_name = "http_chat|mock")]
    pub provider: Option<String>,
    /// Output directory for all artifacts.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Caps concurrent provider requests and parallel runs.
    #[arg(long, global = true)]
    pub max_concurrency: Option<usize>,
    /// Comma-separated condition names.
    #[arg(long, global = true, value_name = "LIST")]
    pub conditions: Option<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Sweep {
    K,
    ContextSize,
    Anchors,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample and de-leak exemplars, then synthesize a context corpus.
    Synthesize {
        /// Use the single generic prompt instead of anchors.
        #[arg(long)]
        generic: bool,
    },
    /// Train the toy encoder and write frozen weights.
    Pretrain,
    /// Build the context cache from a context corpus.
    Embed {
        #[arg(long, value_name = "PATH")]
        context: Option<PathBuf>,
    },
    /// Embed the target corpus under the cached context.
    Index,
    /// Rank the indexed corpus for a query.
    Search {
        query: String,
        #[arg(long, default_value_t = 10)]
        k: usize,
    },
    /// Run every condition for every seed and emit reports.
    Evaluate,
    /// Run an ablation sweep and emit reports.
    Ablate {
        #[arg(long, value_enum, default_value_t = Sweep::ContextSize)]
        sweep: Sweep,
    },
}

pub fn parse_conditions(list: &str) -> Result<Vec<ConditionName>> {
    list.split(',').map(str::trim).filter(|s| !s.is_empty()).map(ConditionName::from_str).collect()
}

/// Defaults, then the config file, then flags.
pub fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(p) = &cli.provider {
        cfg.provider.kind = ProviderKind::from_str(p)?;
    }
    if let Some(o) = &cli.out {
        cfg.out = o.clone();
    }
    if let Some(n) = cli.max_concurrency {
        cfg.max_concurrency = Some(n);
    }
    if let Some(list) = &cli.conditions {
        cfg.conditions = parse_conditions(list)?;
    }
    if cfg.max_concurrency.is_some() {
        cfg.provider.max_in_flight = cfg.max_concurrency;
    }
    if let Command::Embed { context: Some(c) } = &cli.command {
        cfg.context = Some(c.clone());
    }
    Ok(cfg)
}

pub fn log_event(event: &str, fields: Value) {
    let mut line = json!({
        "ts": chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true),
        "event": event,
    });
    if let (Some(obj), Value::Object(extra)) = (line.as_object_mut(), fields) {
        obj.extend(extra);
    }
    let _ = writeln!(std::io::stderr().lock(), "{line}");
}

/// Parses arguments, runs the subcommand and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let cfg = match resolve_config(&cli).and_then(|c| c.validate().map(|_| c)) {
        Ok(c) => c,
        Err(e) => {
            log_event("usage_error", json!({ "message": e.to_string() }));
            eprintln!("error: {e}");
            return EXIT_USAGE;
        }
    };
    match dispatch(&cli.command, &cfg) {
        Ok(code) => code,
        Err(e) => {
            log_event("error", json!({ "message": e.to_string() }));
            eprintln!("error: {e}");
            EXIT_FAILURE
        }
    }
}

fn dispatch(command: &Command, cfg: &RunConfig) -> Result<i32> {
    match command {
        Command::Synthesize { generic } => cmd_synthesize(cfg, *generic).map(|_| EXIT_OK),
        Command::Pretrain => cmd_pretrain(cfg).map(|_| EXIT_OK),
        Command::Embed { .. } => cmd_embed(cfg).map(|_| EXIT_OK),
        Command::Index => cmd_index(cfg).map(|_| EXIT_OK),
        Command::Search { query, k } => {
            let hits = cmd_search(cfg, query, *k)?;
            let mut out = std::io::stdout().lock();
            for (rank, (doc, score)) in hits.iter().enumerate() {
                writeln!(out, "{}\t{doc}\t{score:.6}", rank + 1).map_err(|e| Error::io("<stdout>", e))?;
            }
            Ok(EXIT_OK)
        }
        Command::Evaluate => cmd_evaluate(cfg),
        Command::Ablate { sweep } => cmd_ablate(cfg, *sweep),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Corpora of the configured suite; the built-in desk suite is keyed by the root seed.
struct SuiteCorpora {
    exemplar_source: Corpus,
    target: Corpus,
    queries: Corpus,
    qrels: Qrels,
    off_domain: Corpus,
}

fn load_suite(cfg: &RunConfig, desk_seed: u64) -> Result<SuiteCorpora> {
    let paths = &cfg.suite;
    if paths.is_builtin() {
        let d = desk_suite(desk_seed, &DeskConfig::default());
        let off_domain = match &paths.off_domain {
            Some(p) => load_corpus(p)?,
            None => d.off_domain,
        };
        return Ok(SuiteCorpora {
            exemplar_source: d.exemplar_source,
            target: d.target,
            queries: d.queries,
            qrels: d.qrels,
            off_domain,
        });
    }
    let need = |p: &Option<PathBuf>| p.clone().ok_or_else(|| Error::Config("incomplete suite paths".into()));
    Ok(SuiteCorpora {
        exemplar_source: load_corpus(&need(&paths.exemplar_source)?)?,
        target: load_corpus(&need(&paths.target)?)?,
        queries: load_corpus(&need(&paths.queries)?)?,
        qrels: Qrels::load(&need(&paths.qrels)?)?,
        off_domain: match &paths.off_domain {
            Some(p) => load_corpus(p)?,
            None => Corpus::new("empty-off-domain", Vec::new()),
        },
    })
}

pub fn cmd_synthesize(cfg: &RunConfig, generic: bool) -> Result<PathBuf> {
    let suite = load_suite(cfg, cfg.seed)?;
    let s = &cfg.synthesis;
    let exemplars = select_exemplars(&suite.exemplar_source, &suite.target, &suite.queries, s.k, cfg.seed)?;
    let mut pcfg = cfg.provider.clone();
    pcfg.mock_seed = seed::derive(cfg.seed, "mock");
    let table = (pcfg.kind == ProviderKind::Mock).then(|| NgramTable::from_corpus(&exemplars));
    let provider = Provider::new(pcfg, table)?;
    let plan = if generic {
        SynthesisPlan::gsc(s.k, s.j_prime, cfg.seed)
    } else {
        SynthesisPlan::zest(s.k, s.anchors, s.j_prime, cfg.seed)?
    };
    log_event("synthesis_started", json!({ "provider": provider.name(), "k": s.k, "A": plan.anchors, "J_prime": s.j_prime }));
    let corpus = synthesize_corpus(&provider, &exemplars, &plan)?;
    let dir = cfg.out.join("synthetic");
    let paths = corpus.save(&dir)?;
    exemplars.write_jsonl(&dir.join("exemplars.jsonl"))?;
    log_event(
        "synthesis_finished",
        json!({ "anchors": corpus.anchors.len(), "documents": corpus.documents.len(), "path": paths.documents }),
    );
    Ok(dir)
}

fn train(cfg: &RunConfig) -> Result<TrainedEncoder> {
    let corpus = match &cfg.suite.pretrain {
        Some(p) => load_corpus(p)?,
        None => desk_pretraining_corpus(cfg.seed),
    };
    let tc = cfg.training_config(&corpus.name);
    log_event("training_started", json!({ "documents": corpus.len(), "steps": tc.steps }));
    let trained = train_toy_encoder(&tc, &corpus)?;
    log_event(
        "training_finished",
        json!({ "first_batch_loss": [trained.first_batch_loss.0, trained.first_batch_loss.1], "alpha": trained.weights.alpha }),
    );
    Ok(trained)
}

pub fn cmd_pretrain(cfg: &RunConfig) -> Result<PathBuf> {
    let trained = train(cfg)?;
    create_dir(&cfg.out)?;
    let path = cfg.out.join("weights.json");
    trained.weights.save(&path)?;
    write_training_log(&cfg.out.join("training_log.csv"), &trained.log)?;
    log_event("weights_written", json!({ "path": path, "fingerprint": trained.weights.fingerprint() }));
    Ok(path)
}

fn load_weights(cfg: &RunConfig) -> Result<EncoderWeights> {
    let path = cfg.weights_path();
    if !path.exists() {
        return Err(Error::Config(format!("{} does not exist; run `ctxsynth pretrain` first", path.display())));
    }
    EncoderWeights::load(&path)
}

fn cache_path(cfg: &RunConfig) -> PathBuf {
    cfg.out.join("context_cache.bin")
}

fn index_path(cfg: &RunConfig) -> PathBuf {
    cfg.out.join("index.json")
}

pub fn cmd_embed(cfg: &RunConfig) -> Result<PathBuf> {
    let weights = load_weights(cfg)?;
    let source = cfg.context.clone().unwrap_or_else(|| cfg.out.join("synthetic").join("documents.jsonl"));
    let context = load_corpus(&source)?;
    let cache = build_context_cache(&weights, &context)?;
    create_dir(&cfg.out)?;
    let path = cache_path(cfg);
    cache.save(&path)?;
    log_event("cache_written", json!({ "path": path, "vectors": cache.len(), "source": source }));
    Ok(path)
}

pub fn cmd_index(cfg: &RunConfig) -> Result<PathBuf> {
    let weights = load_weights(cfg)?;
    let cache = ContextCache::load(&cache_path(cfg))?;
    let suite = load_suite(cfg, cfg.seed)?;
    let index = build_index(&weights, &cache, &suite.target)?;
    let path = index_path(cfg);
    index.save(&path)?;
    log_event("index_written", json!({ "path": path, "documents": index.len() }));
    Ok(path)
}

pub fn cmd_search(cfg: &RunConfig, query: &str, k: usize) -> Result<Vec<(String, f64)>> {
    let weights = load_weights(cfg)?;
    let cache = ContextCache::load(&cache_path(cfg))?;
    let index = DenseIndex::load(&index_path(cfg))?;
    if index.encoder_fingerprint != weights.fingerprint() {
        return Err(Error::StaleCache { cache: index.encoder_fingerprint.clone(), weights: weights.fingerprint() });
    }
    if index.cache_fingerprint != cache.content_fingerprint() {
        return Err(Error::Config(format!(
            "index was built with context {} but the cache holds {}; rerun `ctxsynth index`",
            index.cache_fingerprint,
            cache.content_fingerprint()
        )));
    }
    let ctx = Contextualizer::new(&weights, &cache)?;
    let v = ctx.embed("query", query, TaskPrefix::SearchQuery)?;
    Ok(search(&index, "query", &v, k)?.entries)
}

fn encoder_for_runs(cfg: &RunConfig) -> Result<EncoderWeights> {
    match &cfg.weights {
        Some(p) => EncoderWeights::load(p),
        None => Ok(train(cfg)?.weights),
    }
}

fn suite_for(cfg: &RunConfig, weights: &EncoderWeights, run_seed: u64) -> Result<Suite> {
    let desk_seed = if cfg.suite.is_builtin() { run_seed } else { cfg.seed };
    let c = load_suite(cfg, desk_seed)?;
    Ok(Suite {
        weights: weights.clone(),
        target: c.target,
        queries: c.queries,
        qrels: c.qrels,
        exemplar_source: c.exemplar_source,
        off_domain: c.off_domain,
        provider: cfg.provider.clone(),
    })
}

/// Writes reports and run files, prints a status table and picks the exit code.
fn finish_runs(dir: &Path, outcomes: Vec<(String, u64, Result<Vec<EvalReport>>)>) -> Result<i32> {
    let mut reports = Vec::new();
    let mut failed = 0;
    for (label, seed, outcome) in outcomes {
        match outcome {
            Ok(r) => {
                log_event("run_finished", json!({ "run": label, "seed": seed, "status": "ok", "reports": r.len() }));
                reports.extend(r);
            }
            Err(e) => {
                failed += 1;
                log_event("run_finished", json!({ "run": label, "seed": seed, "status": "failed", "error": e.to_string() }));
            }
        }
    }
    if reports.is_empty() {
        return Err(Error::Evaluation("every run failed".into()));
    }
    let paths = emit_report(&reports, dir)?;
    let runs = dir.join("runs");
    create_dir(&runs)?;
    for r in &reports {
        let tag = format!("{}_k{}_A{}_J{}_seed{}", r.condition, r.k, r.anchors, r.j_prime, r.seed);
        write_trec_run(&runs.join(format!("{tag}.trec")), &r.rankings, &tag)?;
    }
    log_event("reports_written", json!({ "csv": paths.csv, "json": paths.json, "markdown": paths.markdown, "failed": failed }));
    Ok(if failed == 0 { EXIT_OK } else { EXIT_PARTIAL })
}

pub fn cmd_evaluate(cfg: &RunConfig) -> Result<i32> {
    let weights = encoder_for_runs(cfg)?;
    let jobs: Vec<(ConditionName, u64)> =
        cfg.conditions.iter().flat_map(|&c| cfg.seeds.iter().map(move |&s| (c, s))).collect();
    let results = run_parallel(&jobs, cfg.workers(), |&(name, s)| {
        let outcome = suite_for(cfg, &weights, s).and_then(|suite| run_condition(&cfg.condition(name), &suite, s));
        (name.to_string(), s, outcome.map(|r| vec![r]))
    });
    finish_runs(&cfg.out.join("reports"), results)
}

pub fn cmd_ablate(cfg: &RunConfig, sweep: Sweep) -> Result<i32> {
    let weights = encoder_for_runs(cfg)?;
    let s = &cfg.synthesis;
    let (label, dir) = match sweep {
        Sweep::K => ("k", "ablate-k"),
        Sweep::ContextSize => ("context_size", "ablate-context-size"),
        Sweep::Anchors => ("anchors", "ablate-anchors"),
    };
    let results: Vec<_> = cfg
        .seeds
        .iter()
        .map(|&seed| {
            let outcome = suite_for(cfg, &weights, seed).and_then(|suite| match sweep {
                Sweep::K => ablate_k(&suite, &K_VALUES, s.j_prime, s.anchors, &[seed]),
                Sweep::ContextSize => ablate_context_size(&suite, &J_VALUES, s.k, &[seed]),
                Sweep::Anchors => ablate_anchor_count(&suite, &A_VALUES, s.k, s.j_prime, &[seed]),
            });
            (label.to_string(), seed, outcome)
        })
        .collect();
    finish_runs(&cfg.out.join(dir), results)
}
