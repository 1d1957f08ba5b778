//! Documents, tokenization, JSONL corpus I/O, length filtering, exemplar
//! sampling and n-gram leakage control.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use unicode_general_category::{get_general_category, GeneralCategory};

use crate::error::{Error, Result};

/// Default minimum token count for exemplar eligibility.
pub const MIN_TOKENS: usize = 100;
/// Default span length for the leakage rule.
pub const LEAK_SPAN: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Exemplar,
    Anchor,
    Synthetic,
    Target,
    Query,
    Context,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub role: Option<Role>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
}

impl Document {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Self {
        Document { id: id.into(), text: text.into(), role: None, source: None }
    }

    pub fn with_role(mut self, role: Role) -> Self {
        self.role = Some(role);
        self
    }

    pub fn with_source(mut self, source: impl Into<String>) -> Self {
        self.source = Some(source.into());
        self
    }

    pub fn tokens(&self) -> TokenSequence {
        TokenSequence { tokens: tokenize(&self.text), source_doc: self.id.clone() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub tokens: Vec<String>,
    pub source_doc: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Corpus {
    pub name: String,
    pub documents: Vec<Document>,
}

impl Corpus {
    pub fn new(name: impl Into<String>, documents: Vec<Document>) -> Self {
        Corpus { name: name.into(), documents }
    }

    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }

    pub fn ids(&self) -> Vec<&str> {
        self.documents.iter().map(|d| d.id.as_str()).collect()
    }

    /// Writes one JSON object per line, LF-terminated.
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        for doc in &self.documents {
            serde_json::to_writer(&mut w, doc)?;
            w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

fn is_punctuation(c: char) -> bool {
    matches!(
        get_general_category(c),
        GeneralCategory::ConnectorPunctuation
            | GeneralCategory::DashPunctuation
            | GeneralCategory::OpenPunctuation
            | GeneralCategory::ClosePunctuation
            | GeneralCategory::InitialPunctuation
            | GeneralCategory::FinalPunctuation
            | GeneralCategory::OtherPunctuation
    )
}

/// Single-character case mapping; characters whose lowercase form expands to
/// several characters are left unchanged.
fn fold_char(c: char) -> char {
    let mut lower = c.to_lowercase();
    match (lower.next(), lower.next()) {
        (Some(l), None) => l,
        _ => c,
    }
}

/// Lowercases, splits on whitespace runs and strips punctuation from both
/// ends of every token. Empty tokens are dropped.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .filter_map(|raw| {
            let tok: String = raw.trim_matches(is_punctuation).chars().map(fold_char).collect();
            (!tok.is_empty()).then_some(tok)
        })
        .collect()
}

pub fn token_count(doc: &Document) -> usize {
    tokenize(&doc.text).len()
}

/// Reads a JSONL corpus. The corpus name is the file stem.
pub fn load_corpus(path: &Path) -> Result<Corpus> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let mut seen = HashSet::new();
    let mut documents = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let doc: Document = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: lineno,
            msg: e.to_string(),
        })?;
        if doc.id.is_empty() {
            return Err(Error::Validation { path: path.to_path_buf(), line: lineno, msg: "empty id".into() });
        }
        if doc.text.trim().is_empty() {
            return Err(Error::Validation {
                path: path.to_path_buf(),
                line: lineno,
                msg: format!("document {} has empty text", doc.id),
            });
        }
        if !seen.insert(doc.id.clone()) {
            return Err(Error::Validation {
                path: path.to_path_buf(),
                line: lineno,
                msg: format!("duplicate id {}", doc.id),
            });
        }
        documents.push(doc);
    }
    Ok(Corpus { name, documents })
}

/// Relevance judgements keyed by (query_id, doc_id).
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Qrels {
    grades: BTreeMap<String, BTreeMap<String, u32>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct QrelRecord {
    query_id: String,
    doc_id: String,
    relevance: i64,
}

impl Qrels {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, query_id: impl Into<String>, doc_id: impl Into<String>, grade: u32) {
        self.grades.entry(query_id.into()).or_default().insert(doc_id.into(), grade);
    }

    pub fn grade(&self, query_id: &str, doc_id: &str) -> u32 {
        self.grades.get(query_id).and_then(|m| m.get(doc_id)).copied().unwrap_or(0)
    }

    /// Judgements for one query, if any were recorded.
    pub fn for_query(&self, query_id: &str) -> Option<&BTreeMap<String, u32>> {
        self.grades.get(query_id)
    }

    pub fn query_ids(&self) -> impl Iterator<Item = &str> {
        self.grades.keys().map(String::as_str)
    }

    pub fn load(path: &Path) -> Result<Qrels> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut qrels = Qrels::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: QrelRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: e.to_string(),
            })?;
            let grade = u32::try_from(rec.relevance).map_err(|_| Error::Validation {
                path: path.to_path_buf(),
                line: i + 1,
                msg: format!("negative relevance {}", rec.relevance),
            })?;
            qrels.insert(rec.query_id, rec.doc_id, grade);
        }
        Ok(qrels)
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        for (q, docs) in &self.grades {
            for (d, g) in docs {
                let rec = QrelRecord { query_id: q.clone(), doc_id: d.clone(), relevance: i64::from(*g) };
                serde_json::to_writer(&mut w, &rec)?;
                w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

pub fn filter_min_length(corpus: &Corpus, min_tokens: usize) -> Corpus {
    Corpus {
        name: corpus.name.clone(),
        documents: corpus.documents.iter().filter(|d| token_count(d) >= min_tokens).cloned().collect(),
    }
}

fn ngrams(tokens: &[String], n: usize) -> HashSet<&[String]> {
    if n == 0 || tokens.len() < n {
        return HashSet::new();
    }
    tokens.windows(n).collect()
}

fn shares_ngram(a: &[String], b: &[String], n: usize) -> bool {
    let (small, large) = if a.len() <= b.len() { (a, b) } else { (b, a) };
    let grams = ngrams(small, n);
    !grams.is_empty() && large.windows(n).any(|w| grams.contains(w))
}

/// True iff the two documents share a contiguous run of `n` tokens.
pub fn span_overlap(a: &Document, b: &Document, n: usize) -> bool {
    shares_ngram(&tokenize(&a.text), &tokenize(&b.text), n)
}

/// Draws `k` distinct length-eligible documents uniformly without replacement.
pub fn sample_exemplars(corpus: &Corpus, k: usize, seed: u64, min_tokens: usize) -> Result<Corpus> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    draw_exemplars(corpus, k, &mut rng, min_tokens)
}

fn draw_exemplars(corpus: &Corpus, k: usize, rng: &mut impl Rng, min_tokens: usize) -> Result<Corpus> {
    let eligible = filter_min_length(corpus, min_tokens);
    if eligible.len() < k {
        return Err(Error::Capacity(format!(
            "requested {k} exemplars but only {} documents have at least {min_tokens} tokens",
            eligible.len()
        )));
    }
    let documents = index::sample(rng, eligible.len(), k)
        .into_iter()
        .map(|i| eligible.documents[i].clone().with_role(Role::Exemplar))
        .collect();
    Ok(Corpus { name: format!("{}-exemplars", corpus.name), documents })
}

/// Replaces every exemplar sharing an `n`-token span with the evaluation
/// corpus by a clean draw from `pool`. Replacement draws use stream 1 of the
/// exemplar sampling seed.
pub fn deleak(exemplars: &Corpus, eval_corpus: &Corpus, pool: &Corpus, n: usize, seed: u64) -> Result<Corpus> {
    let eval_tokens: Vec<Vec<String>> = eval_corpus.documents.iter().map(|d| tokenize(&d.text)).collect();
    let eval_grams: HashSet<&[String]> = eval_tokens.iter().flat_map(|t| ngrams(t, n)).collect();
    let leaks = |doc: &Document| {
        let toks = tokenize(&doc.text);
        toks.len() >= n && toks.windows(n).any(|w| eval_grams.contains(w))
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let mut used: HashSet<String> = exemplars.documents.iter().map(|d| d.id.clone()).collect();
    let mut candidates: Vec<&Document> =
        pool.documents.iter().filter(|d| token_count(d) >= MIN_TOKENS).collect();
    candidates.retain(|d| !used.contains(&d.id));

    let mut out = Vec::with_capacity(exemplars.len());
    for doc in &exemplars.documents {
        if !leaks(doc) {
            out.push(doc.clone());
            continue;
        }
        let replacement = loop {
            if candidates.is_empty() {
                return Err(Error::Capacity(format!(
                    "replacement pool exhausted while replacing leaked exemplar {}",
                    doc.id
                )));
            }
            let pick = candidates.swap_remove(rng.gen_range(0..candidates.len()));
            if used.contains(&pick.id) || leaks(pick) {
                continue;
            }
            break pick;
        };
        used.insert(replacement.id.clone());
        out.push(replacement.clone().with_role(Role::Exemplar));
    }
    Ok(Corpus { name: exemplars.name.clone(), documents: out })
}
