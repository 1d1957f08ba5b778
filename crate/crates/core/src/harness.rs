//! Experiment orchestration: baseline conditions, ablation sweeps and reports.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{deleak, sample_exemplars, Corpus, Qrels, LEAK_SPAN, MIN_TOKENS};
use crate::encoder::{build_context_cache, ContextCache, EncoderWeights};
use crate::error::{Error, Result};
use crate::provider::{NgramTable, Provider, ProviderConfig};
use crate::retrieval::{build_index, evaluate_run, RankedList};
use crate::seed;
use crate::synthesis::{synthesize_corpus, SynthesisPlan};
use crate::desk::{desk_suite, pretraining_corpus, DeskConfig};
use crate::trainer::{train_toy_encoder, TrainedEncoder, TrainingConfig};

pub const NDCG_K: usize = 10;
pub const DEFAULT_SEEDS: std::ops::RangeInclusive<u64> = 1..=10;
pub const K_VALUES: [usize; 4] = [1, 2, 5, 10];
pub const J_VALUES: [usize; 9] = [2, 4, 8, 16, 32, 64, 128, 256, 512];
pub const A_VALUES: [usize; 4] = [5, 10, 20, 40];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditionName {
    NoContext,
    RandomContext,
    Gsc,
    Zest,
    RealContext,
}

impl ConditionName {
    /// Report order.
    pub const ALL: [ConditionName; 5] = [
        ConditionName::NoContext,
        ConditionName::RandomContext,
        ConditionName::Gsc,
        ConditionName::Zest,
        ConditionName::RealContext,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ConditionName::NoContext => "no_context",
            ConditionName::RandomContext => "random_context",
            ConditionName::Gsc => "gsc",
            ConditionName::Zest => "zest",
            ConditionName::RealContext => "real_context",
        }
    }
}

impl fmt::Display for ConditionName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ConditionName {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        ConditionName::ALL.into_iter().find(|c| c.as_str() == s).ok_or_else(|| {
            let valid: Vec<&str> = ConditionName::ALL.iter().map(|c| c.as_str()).collect();
            Error::Argument(format!("unknown condition {s:?}; valid conditions: {}", valid.join(", ")))
        })
    }
}

/// One experimental cell. `j` is the context size (0 for no_context);
/// `k` and `anchors` only matter for synthesized conditions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Condition {
    pub name: ConditionName,
    pub j: usize,
    pub k: usize,
    pub anchors: usize,
}

impl Condition {
    pub fn new(name: ConditionName) -> Condition {
        let j = if name == ConditionName::NoContext { 0 } else { 512 };
        Condition { name, j, k: 5, anchors: 20 }
    }

    pub fn with_j(mut self, j: usize) -> Condition {
        self.j = j;
        self
    }

    pub fn with_k(mut self, k: usize) -> Condition {
        self.k = k;
        self
    }

    pub fn with_anchors(mut self, anchors: usize) -> Condition {
        self.anchors = anchors;
        self
    }
}

/// Everything a condition run reads.
#[derive(Debug, Clone)]
pub struct Suite {
    pub weights: EncoderWeights,
    pub target: Corpus,
    pub queries: Corpus,
    pub qrels: Qrels,
    pub exemplar_source: Corpus,
    pub off_domain: Corpus,
    pub provider: ProviderConfig,
}

impl Suite {
    /// The built-in desk suite for `suite_seed`, evaluated with `weights`.
    pub fn desk(weights: &EncoderWeights, suite_seed: u64, provider: &ProviderConfig) -> Suite {
        let d = desk_suite(suite_seed, &DeskConfig::default());
        Suite {
            weights: weights.clone(),
            target: d.target,
            queries: d.queries,
            qrels: d.qrels,
            exemplar_source: d.exemplar_source,
            off_domain: d.off_domain,
            provider: provider.clone(),
        }
    }
}

pub const PRETRAIN_DOMAINS: usize = 64;
pub const PRETRAIN_DOCS_PER_DOMAIN: usize = 64;

/// Training config for the desk encoder; the trainer seed is derived from `root_seed`.
pub fn desk_training_config(root_seed: u64) -> TrainingConfig {
    TrainingConfig {
        seed: seed::derive(root_seed, "trainer"),
        pretrain_corpus: "desk-pretrain".into(),
        ..TrainingConfig::default()
    }
}

pub fn desk_pretraining_corpus(root_seed: u64) -> Corpus {
    pretraining_corpus(
        PRETRAIN_DOMAINS,
        PRETRAIN_DOCS_PER_DOMAIN,
        seed::derive(root_seed, "pretrain"),
        &DeskConfig::default(),
    )
}

/// Toy-trained frozen encoder used by the desk experiments.
pub fn train_desk_encoder(root_seed: u64) -> Result<TrainedEncoder> {
    train_toy_encoder(&desk_training_config(root_seed), &desk_pretraining_corpus(root_seed))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub condition: ConditionName,
    pub seed: u64,
    pub k: usize,
    #[serde(rename = "A")]
    pub anchors: usize,
    #[serde(rename = "J_prime")]
    pub j_prime: usize,
    pub per_query: BTreeMap<String, f64>,
    pub ndcg_at_10_mean: f64,
    pub n_queries: usize,
    pub wall_clock_s: f64,
    pub context_fingerprint: String,
    pub corpus_fingerprints: BTreeMap<String, String>,
    pub config: Condition,
    pub provider: ProviderConfig,
    /// Set when the requested configuration had to be adjusted.
    pub adjustment: Option<String>,
    #[serde(skip)]
    pub rankings: Vec<RankedList>,
}

pub fn corpus_fingerprint(corpus: &Corpus) -> String {
    let mut h = Sha256::new();
    for d in &corpus.documents {
        h.update(d.id.as_bytes());
        h.update([0]);
        h.update(d.text.as_bytes());
        h.update([0]);
    }
    hex::encode(h.finalize())
}

/// Exemplars for a seed: sampled from the exemplar source, then de-leaked
/// against the target corpus and queries.
pub fn exemplars_for(suite: &Suite, k: usize, run_seed: u64) -> Result<Corpus> {
    select_exemplars(&suite.exemplar_source, &suite.target, &suite.queries, k, run_seed)
}

pub fn select_exemplars(source: &Corpus, target: &Corpus, queries: &Corpus, k: usize, run_seed: u64) -> Result<Corpus> {
    let s = seed::derive(run_seed, "sampler");
    let sampled = sample_exemplars(source, k, s, MIN_TOKENS)?;
    let mut eval = target.clone();
    eval.documents.extend(queries.documents.iter().cloned());
    deleak(&sampled, &eval, source, LEAK_SPAN, s)
}

fn sample_corpus(corpus: &Corpus, j: usize, run_seed: u64, label: &str) -> Corpus {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed::derive(run_seed, label));
    let n = j.min(corpus.len());
    let mut picks = rand::seq::index::sample(&mut rng, corpus.len(), n).into_vec();
    picks.sort_unstable();
    Corpus::new(corpus.name.clone(), picks.into_iter().map(|i| corpus.documents[i].clone()).collect())
}

/// Context corpus for a condition, plus a note when the plan was adjusted.
pub fn context_corpus(condition: &Condition, suite: &Suite, run_seed: u64) -> Result<(Corpus, Option<String>)> {
    match condition.name {
        ConditionName::NoContext => Ok((Corpus::new("empty", Vec::new()), None)),
        ConditionName::RandomContext => Ok((sample_corpus(&suite.off_domain, condition.j, run_seed, "random_context"), None)),
        ConditionName::RealContext => Ok((sample_corpus(&suite.target, condition.j, run_seed, "real_context"), None)),
        ConditionName::Gsc | ConditionName::Zest => {
            let exemplars = exemplars_for(suite, condition.k, run_seed)?;
            let mut cfg = suite.provider.clone();
            cfg.mock_seed = seed::derive(run_seed, "mock");
            let provider = Provider::new(cfg, Some(NgramTable::from_corpus(&exemplars)))?;
            let (plan, note) = if condition.name == ConditionName::Gsc {
                (SynthesisPlan::gsc(condition.k, condition.j, run_seed), None)
            } else {
                let anchors = condition.anchors.min(condition.j);
                let note = (anchors < condition.anchors)
                    .then(|| format!("A collapsed from {} to {} because J'={}", condition.anchors, anchors, condition.j));
                (SynthesisPlan::zest(condition.k, anchors, condition.j, run_seed)?, note)
            };
            Ok((synthesize_corpus(&provider, &exemplars, &plan)?.documents, note))
        }
    }
}

/// Builds the condition's context, cache and index and evaluates NDCG@10.
pub fn run_condition(condition: &Condition, suite: &Suite, run_seed: u64) -> Result<EvalReport> {
    let attach = |e: Error| Error::Condition { condition: condition.name.to_string(), source: Box::new(e) };
    let started = Instant::now();
    let (context, adjustment) = context_corpus(condition, suite, run_seed).map_err(attach)?;
    let cache = if context.is_empty() {
        ContextCache::empty(&suite.weights)
    } else {
        build_context_cache(&suite.weights, &context).map_err(attach)?
    };
    let index = build_index(&suite.weights, &cache, &suite.target).map_err(attach)?;
    let eval = evaluate_run(&index, &suite.queries, &suite.qrels, &suite.weights, &cache, NDCG_K).map_err(attach)?;
    let mut corpus_fingerprints = BTreeMap::new();
    corpus_fingerprints.insert("target".to_string(), corpus_fingerprint(&suite.target));
    corpus_fingerprints.insert("queries".to_string(), corpus_fingerprint(&suite.queries));
    corpus_fingerprints.insert("context".to_string(), corpus_fingerprint(&context));
    let synthesized = matches!(condition.name, ConditionName::Gsc | ConditionName::Zest);
    let anchors = match condition.name {
        ConditionName::Zest => condition.anchors.min(condition.j),
        _ => 0,
    };
    Ok(EvalReport {
        condition: condition.name,
        seed: run_seed,
        k: if synthesized { condition.k } else { 0 },
        anchors,
        j_prime: context.len(),
        n_queries: eval.per_query.len(),
        ndcg_at_10_mean: eval.mean,
        per_query: eval.per_query,
        rankings: eval.rankings,
        wall_clock_s: started.elapsed().as_secs_f64(),
        context_fingerprint: cache.content_fingerprint(),
        corpus_fingerprints,
        config: *condition,
        provider: suite.provider.clone(),
        adjustment,
    })
}

/// Runs jobs on up to `workers` threads; results come back in job order.
pub fn run_parallel<T, R, F>(jobs: &[T], workers: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync,
{
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<R>>> = Mutex::new((0..jobs.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..workers.clamp(1, jobs.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= jobs.len() {
                    break;
                }
                let r = f(&jobs[i]);
                slots.lock().unwrap()[i] = Some(r);
            });
        }
    });
    slots.into_inner().unwrap().into_iter().map(|r| r.expect("job completed")).collect()
}

pub fn default_workers() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

/// Runs every (condition, seed) pair; the first error aborts.
pub fn run_grid(conditions: &[Condition], suite: &Suite, seeds: &[u64], workers: usize) -> Result<Vec<EvalReport>> {
    let jobs: Vec<(Condition, u64)> = conditions.iter().flat_map(|c| seeds.iter().map(move |&s| (*c, s))).collect();
    run_parallel(&jobs, workers, |(c, s)| run_condition(c, suite, *s)).into_iter().collect()
}

pub fn ablate_k(suite: &Suite, k_values: &[usize], j_prime: usize, anchors: usize, seeds: &[u64]) -> Result<Vec<EvalReport>> {
    let conditions: Vec<Condition> = k_values
        .iter()
        .map(|&k| Condition::new(ConditionName::Zest).with_k(k).with_j(j_prime).with_anchors(anchors))
        .collect();
    run_grid(&conditions, suite, seeds, default_workers())
}

/// zest, gsc and real_context at every context size.
pub fn ablate_context_size(suite: &Suite, j_values: &[usize], k: usize, seeds: &[u64]) -> Result<Vec<EvalReport>> {
    let conditions: Vec<Condition> = j_values
        .iter()
        .flat_map(|&j| {
            [ConditionName::Zest, ConditionName::Gsc, ConditionName::RealContext]
                .map(|n| Condition::new(n).with_j(j).with_k(k))
        })
        .collect();
    run_grid(&conditions, suite, seeds, default_workers())
}

pub fn ablate_anchor_count(
    suite: &Suite,
    a_values: &[usize],
    k: usize,
    j_prime: usize,
    seeds: &[u64],
) -> Result<Vec<EvalReport>> {
    let conditions: Vec<Condition> = a_values
        .iter()
        .map(|&a| Condition::new(ConditionName::Zest).with_k(k).with_j(j_prime).with_anchors(a))
        .collect();
    run_grid(&conditions, suite, seeds, default_workers())
}

#[derive(Debug, Serialize)]
struct CsvRow<'a> {
    condition: &'a str,
    seed: u64,
    k: usize,
    #[serde(rename = "A")]
    anchors: usize,
    #[serde(rename = "J_prime")]
    j_prime: usize,
    ndcg_at_10_mean: f64,
    n_queries: usize,
    wall_clock_s: f64,
    context_fingerprint: &'a str,
}

pub struct ReportPaths {
    pub csv: PathBuf,
    pub json: PathBuf,
    pub markdown: PathBuf,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 { values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (mean, var.sqrt())
}

/// Markdown table: one row per (condition, k, A, J'), conditions in report order.
pub fn summary_markdown(reports: &[EvalReport]) -> String {
    let mut groups: BTreeMap<(ConditionName, usize, usize, usize), Vec<f64>> = BTreeMap::new();
    for r in reports {
        groups.entry((r.condition, r.k, r.anchors, r.j_prime)).or_default().push(r.ndcg_at_10_mean);
    }
    let mut out = String::from("| Condition | k | A | J' | NDCG@10 (mean ± std) | seeds |\n|---|---|---|---|---|---|\n");
    for ((c, k, a, j), v) in groups {
        let (m, s) = mean_std(&v);
        out.push_str(&format!("| {c} | {k} | {a} | {j} | {m:.4} ± {s:.4} | {} |\n", v.len()));
    }
    out
}

pub fn emit_report(reports: &[EvalReport], dir: &Path) -> Result<ReportPaths> {
    if reports.is_empty() {
        return Err(Error::Argument("no reports to emit".into()));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let paths = ReportPaths {
        csv: dir.join("reports.csv"),
        json: dir.join("reports.json"),
        markdown: dir.join("summary.md"),
    };
    let mut w = csv::Writer::from_path(&paths.csv)?;
    for r in reports {
        w.serialize(CsvRow {
            condition: r.condition.as_str(),
            seed: r.seed,
            k: r.k,
            anchors: r.anchors,
            j_prime: r.j_prime,
            ndcg_at_10_mean: r.ndcg_at_10_mean,
            n_queries: r.n_queries,
            wall_clock_s: r.wall_clock_s,
            context_fingerprint: &r.context_fingerprint,
        })?;
    }
    w.flush().map_err(|e| Error::io(&paths.csv, e))?;

    let file = File::create(&paths.json).map_err(|e| Error::io(&paths.json, e))?;
    let mut jw = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut jw, reports)?;
    jw.write_all(b"\n").map_err(|e| Error::io(&paths.json, e))?;
    jw.flush().map_err(|e| Error::io(&paths.json, e))?;

    std::fs::write(&paths.markdown, summary_markdown(reports)).map_err(|e| Error::io(&paths.markdown, e))?;
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn condition_names_round_trip() {
        for c in ConditionName::ALL {
            assert_eq!(c.as_str().parse::<ConditionName>().unwrap(), c);
        }
        let err = "bogus".parse::<ConditionName>().unwrap_err().to_string();
        assert!(err.contains("no_context") && err.contains("real_context"));
    }
}
