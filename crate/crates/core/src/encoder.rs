//! Two-stage context-conditioned reference encoder.
//!
//! Stage one maps a document to a unit vector `C = normalize(P1 · mean E(d))`.
//! Stage two embeds a text as `u = Q · P1 · mean E(prefix + text)` and
//! conditions it on the cached context through a ridge whitening step:
//! with context values `v_j = (beta·Q + K) · C_j` and
//! `S = Σ_j v_j v_jᵀ / (J + prior)`, the output is
//! `normalize((1 − alpha)·u + alpha·(I + S)⁻¹·u)`.
//! An empty cache yields `normalize(u)`.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{tokenize, Corpus, Document, TokenSequence};
use crate::error::{Error, Result};
use crate::linalg::{self, Cholesky};

const CACHE_MAGIC: &[u8; 4] = b"CTXC";
const CACHE_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskPrefix {
    SearchQuery,
    SearchDocument,
    Classification,
    Clustering,
}

impl TaskPrefix {
    pub fn rendered(self) -> &'static str {
        match self {
            TaskPrefix::SearchQuery => "search_query: ",
            TaskPrefix::SearchDocument => "search_document: ",
            TaskPrefix::Classification => "classification: ",
            TaskPrefix::Clustering => "clustering: ",
        }
    }
}

pub fn apply_prefix(prefix: TaskPrefix, text: &str) -> String {
    format!("{}{}", prefix.rendered(), text)
}

/// Hash-derived token vectors with independent components uniform on
/// [-√3, √3] (zero mean, unit variance).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenEmbedder {
    pub seed: u64,
    pub dim: usize,
}

impl TokenEmbedder {
    pub fn embed(&self, token: &str) -> Vec<f64> {
        let mut h = Sha256::new();
        h.update(b"token");
        h.update(self.seed.to_le_bytes());
        h.update(token.as_bytes());
        let mut rng = ChaCha8Rng::from_seed(h.finalize().into());
        let scale = 3f64.sqrt();
        (0..self.dim).map(|_| scale * (2.0 * rng.gen::<f64>() - 1.0)).collect()
    }

    /// Mean of the token vectors, summed in sequence order.
    pub fn mean(&self, tokens: &[String]) -> Option<Vec<f64>> {
        if tokens.is_empty() {
            return None;
        }
        let mut memo: HashMap<&str, Vec<f64>> = HashMap::new();
        let mut acc = vec![0.0; self.dim];
        for t in tokens {
            let v = memo.entry(t.as_str()).or_insert_with(|| self.embed(t));
            for (a, x) in acc.iter_mut().zip(v.iter()) {
                *a += x;
            }
        }
        let n = tokens.len() as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        Some(acc)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub token_dim: usize,
    pub stage1_dim: usize,
    pub output_dim: usize,
    pub hash_seed: u64,
    pub alpha: f64,
    pub context_scale: f64,
    pub context_prior: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            token_dim: 64,
            stage1_dim: 32,
            output_dim: 32,
            hash_seed: 0,
            alpha: 0.5,
            context_scale: 4.0,
            context_prior: 8.0,
        }
    }
}

/// Encoder parameters. Matrices are row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderWeights {
    pub token_dim: usize,
    pub stage1_dim: usize,
    pub output_dim: usize,
    pub hash_seed: u64,
    /// h×e
    pub stage1_projection: Vec<f64>,
    /// n×h, applied to the stage-one projection of the input.
    pub stage2_query_projection: Vec<f64>,
    /// n×h residual added to `context_scale · stage2_query_projection`
    /// when projecting context vectors.
    pub stage2_context_projection: Vec<f64>,
    pub context_scale: f64,
    /// Pseudo-count added to the context size when averaging outer products.
    pub context_prior: f64,
    pub alpha: f64,
    pub frozen: bool,
}

impl EncoderWeights {
    /// Random initialisation: Gaussian projections scaled by fan-in, zero
    /// context residual.
    pub fn init(config: &EncoderConfig, seed: u64) -> Result<EncoderWeights> {
        let (e, h, n) = (config.token_dim, config.stage1_dim, config.output_dim);
        if e == 0 || h == 0 || n == 0 {
            return Err(Error::Argument("encoder dimensions must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut gaussian = |len: usize, fan_in: usize| -> Vec<f64> {
            let s = 1.0 / (fan_in as f64).sqrt();
            (0..len).map(|_| { let z: f64 = StandardNormal.sample(&mut rng); s * z }).collect::<Vec<f64>>()
        };
        let stage1_projection = gaussian(h * e, e);
        let stage2_query_projection = gaussian(n * h, h);
        let w = EncoderWeights {
            token_dim: e,
            stage1_dim: h,
            output_dim: n,
            hash_seed: config.hash_seed,
            stage1_projection,
            stage2_query_projection,
            stage2_context_projection: vec![0.0; n * h],
            context_scale: config.context_scale,
            context_prior: config.context_prior,
            alpha: config.alpha,
            frozen: false,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        let (e, h, n) = (self.token_dim, self.stage1_dim, self.output_dim);
        let shapes = [
            ("stage1_projection", self.stage1_projection.len(), h * e),
            ("stage2_query_projection", self.stage2_query_projection.len(), n * h),
            ("stage2_context_projection", self.stage2_context_projection.len(), n * h),
        ];
        for (name, got, want) in shapes {
            if got != want {
                return Err(Error::Config(format!("{name} has {got} entries, expected {want}")));
            }
        }
        let all = self
            .stage1_projection
            .iter()
            .chain(&self.stage2_query_projection)
            .chain(&self.stage2_context_projection)
            .chain([&self.alpha, &self.context_scale, &self.context_prior]);
        if all.into_iter().any(|x| !x.is_finite()) {
            return Err(Error::Config("encoder weights contain non-finite values".into()));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if self.context_prior < 0.0 {
            return Err(Error::Config("context_prior must be non-negative".into()));
        }
        Ok(())
    }

    pub fn token_embedder(&self) -> TokenEmbedder {
        TokenEmbedder { seed: self.hash_seed, dim: self.token_dim }
    }

    /// SHA-256 over dimensions, hash seed and the bit patterns of all parameters.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for d in [self.token_dim, self.stage1_dim, self.output_dim] {
            h.update((d as u64).to_le_bytes());
        }
        h.update(self.hash_seed.to_le_bytes());
        for x in self
            .stage1_projection
            .iter()
            .chain(&self.stage2_query_projection)
            .chain(&self.stage2_context_projection)
            .chain([&self.context_scale, &self.context_prior, &self.alpha])
        {
            h.update(x.to_bits().to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    /// `P1 · m` for a mean token embedding `m`.
    pub fn stage1_raw(&self, mean: &[f64]) -> Vec<f64> {
        linalg::matvec(&self.stage1_projection, self.stage1_dim, self.token_dim, mean)
    }

    /// `beta · Q + K`, the map from stage-one vectors to context values.
    pub fn value_projection(&self) -> Vec<f64> {
        self.stage2_query_projection
            .iter()
            .zip(&self.stage2_context_projection)
            .map(|(q, k)| self.context_scale * q + k)
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        serde_json::to_writer(&mut w, self)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<EncoderWeights> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let w: EncoderWeights = serde_json::from_reader(BufReader::new(file))?;
        w.validate()?;
        Ok(w)
    }
}

pub fn embed_tokens(weights: &EncoderWeights, tokens: &TokenSequence) -> Vec<Vec<f64>> {
    let emb = weights.token_embedder();
    tokens.tokens.iter().map(|t| emb.embed(t)).collect()
}

/// Stage-one output for a document: unit-norm h-vector.
pub fn embed_first_stage(weights: &EncoderWeights, doc: &Document) -> Result<Vec<f64>> {
    let tokens = tokenize(&doc.text);
    let mean = weights.token_embedder().mean(&tokens).ok_or_else(|| Error::Encoding {
        doc_id: doc.id.clone(),
        msg: "no tokens after tokenization".into(),
    })?;
    normalized(weights.stage1_raw(&mean)).ok_or_else(|| Error::Encoding {
        doc_id: doc.id.clone(),
        msg: "zero stage-one projection".into(),
    })
}

fn normalized(mut v: Vec<f64>) -> Option<Vec<f64>> {
    let n = linalg::norm(&v);
    if n == 0.0 || !n.is_finite() {
        return None;
    }
    v.iter_mut().for_each(|x| *x /= n);
    Some(v)
}

/// Precomputed stage-one vectors of a context corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextCache {
    pub vectors: Vec<Vec<f64>>,
    pub source_corpus: String,
    pub source_doc_ids: Vec<String>,
    pub encoder_fingerprint: String,
}

impl ContextCache {
    /// The zero-document cache used by the no-context condition.
    pub fn empty(weights: &EncoderWeights) -> ContextCache {
        ContextCache {
            vectors: Vec::new(),
            source_corpus: String::new(),
            source_doc_ids: Vec::new(),
            encoder_fingerprint: weights.fingerprint(),
        }
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    /// Hash of the cached vectors and their ids, independent of cache order.
    pub fn content_fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.encoder_fingerprint.as_bytes());
        for i in sorted_order(&self.source_doc_ids) {
            h.update(self.source_doc_ids[i].as_bytes());
            h.update([0u8]);
            for x in &self.vectors[i] {
                h.update(x.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Reorders entries; used to check order independence.
    pub fn permuted(&self, order: &[usize]) -> ContextCache {
        ContextCache {
            vectors: order.iter().map(|&i| self.vectors[i].clone()).collect(),
            source_corpus: self.source_corpus.clone(),
            source_doc_ids: order.iter().map(|&i| self.source_doc_ids[i].clone()).collect(),
            encoder_fingerprint: self.encoder_fingerprint.clone(),
        }
    }

    /// Binary layout: magic, version, h, count, 32-byte fingerprint, then
    /// count×h little-endian f32 values, then a trailer with the corpus name
    /// and document ids as length-prefixed UTF-8.
    pub fn save(&self, path: &Path) -> Result<()> {
        let dim = self.vectors.first().map_or(0, Vec::len);
        let fp = hex::decode(&self.encoder_fingerprint)
            .map_err(|_| Error::Config("cache fingerprint is not hex".into()))?;
        let mut buf = Vec::with_capacity(48 + self.len() * dim * 4);
        buf.extend_from_slice(CACHE_MAGIC);
        buf.extend_from_slice(&CACHE_VERSION.to_le_bytes());
        buf.extend_from_slice(&(dim as u32).to_le_bytes());
        buf.extend_from_slice(&(self.len() as u32).to_le_bytes());
        buf.extend_from_slice(&fp);
        for v in &self.vectors {
            for x in v {
                buf.extend_from_slice(&(*x as f32).to_le_bytes());
            }
        }
        let mut put_str = |s: &str| {
            buf.extend_from_slice(&(s.len() as u32).to_le_bytes());
            buf.extend_from_slice(s.as_bytes());
        };
        put_str(&self.source_corpus);
        for id in &self.source_doc_ids {
            put_str(id);
        }
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<ContextCache> {
        let mut bytes = Vec::new();
        File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        let bad = |msg: &str| Error::Config(format!("{}: {msg}", path.display()));
        let mut pos = 0usize;
        let mut take = |n: usize| -> Result<&[u8]> {
            let s = bytes.get(pos..pos + n).ok_or_else(|| bad("truncated cache file"))?;
            pos += n;
            Ok(s)
        };
        if take(4)? != CACHE_MAGIC {
            return Err(bad("not a context cache file"));
        }
        let u32_at = |s: &[u8]| u32::from_le_bytes(s.try_into().unwrap());
        let version = u32_at(take(4)?);
        if version != CACHE_VERSION {
            return Err(bad(&format!("unsupported cache version {version}")));
        }
        let dim = u32_at(take(4)?) as usize;
        let count = u32_at(take(4)?) as usize;
        let encoder_fingerprint = hex::encode(take(32)?);
        let mut vectors = Vec::with_capacity(count);
        for _ in 0..count {
            let raw = take(dim * 4)?;
            vectors.push(
                raw.chunks_exact(4).map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap()))).collect(),
            );
        }
        let mut get_str = || -> Result<String> {
            let len = u32_at(take(4)?) as usize;
            String::from_utf8(take(len)?.to_vec()).map_err(|_| bad("invalid utf-8 in trailer"))
        };
        let source_corpus = get_str()?;
        let source_doc_ids = (0..count).map(|_| get_str()).collect::<Result<Vec<_>>>()?;
        Ok(ContextCache { vectors, source_corpus, source_doc_ids, encoder_fingerprint })
    }
}

fn sorted_order(ids: &[String]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.sort_by(|&a, &b| ids[a].cmp(&ids[b]));
    order
}

pub fn build_context_cache(weights: &EncoderWeights, corpus: &Corpus) -> Result<ContextCache> {
    if corpus.is_empty() {
        return Err(Error::Argument(format!("context corpus {} is empty", corpus.name)));
    }
    let vectors = corpus.documents.iter().map(|d| embed_first_stage(weights, d)).collect::<Result<Vec<_>>>()?;
    Ok(ContextCache {
        vectors,
        source_corpus: corpus.name.clone(),
        source_doc_ids: corpus.documents.iter().map(|d| d.id.clone()).collect(),
        encoder_fingerprint: weights.fingerprint(),
    })
}

/// `I + Σ_j v_j v_jᵀ / (J + prior)` accumulated in the given order.
pub fn context_system(weights: &EncoderWeights, vectors: &[&[f64]]) -> Vec<f64> {
    let n = weights.output_dim;
    let proj = weights.value_projection();
    let mut a = vec![0.0; n * n];
    for c in vectors {
        let v = linalg::matvec(&proj, n, weights.stage1_dim, c);
        linalg::add_outer(&mut a, &v, &v, 1.0);
    }
    let denom = vectors.len() as f64 + weights.context_prior;
    for (i, x) in a.iter_mut().enumerate() {
        *x /= denom;
        if i / n == i % n {
            *x += 1.0;
        }
    }
    a
}

/// Stage-two encoder bound to one context cache.
#[derive(Debug, Clone)]
pub struct Contextualizer<'a> {
    weights: &'a EncoderWeights,
    system: Option<Cholesky>,
}

impl<'a> Contextualizer<'a> {
    pub fn new(weights: &'a EncoderWeights, cache: &ContextCache) -> Result<Contextualizer<'a>> {
        let fp = weights.fingerprint();
        if cache.encoder_fingerprint != fp {
            return Err(Error::StaleCache { cache: cache.encoder_fingerprint.clone(), weights: fp });
        }
        if let Some(bad) = cache.vectors.iter().find(|v| v.len() != weights.stage1_dim) {
            return Err(Error::Dimension { expected: weights.stage1_dim, got: bad.len() });
        }
        let system = if cache.is_empty() {
            None
        } else {
            let ordered: Vec<&[f64]> =
                sorted_order(&cache.source_doc_ids).into_iter().map(|i| cache.vectors[i].as_slice()).collect();
            let a = context_system(weights, &ordered);
            Some(
                Cholesky::factor(&a, weights.output_dim)
                    .ok_or_else(|| Error::Config("context system is not positive definite".into()))?,
            )
        };
        Ok(Contextualizer { weights, system })
    }

    /// Final embedding from a mean token embedding.
    pub fn embed_mean(&self, mean: &[f64]) -> Option<Vec<f64>> {
        let w = self.weights;
        let s = w.stage1_raw(mean);
        let u = linalg::matvec(&w.stage2_query_projection, w.output_dim, w.stage1_dim, &s);
        let z = match &self.system {
            None => u,
            Some(chol) => {
                let white = chol.solve(&u);
                u.iter().zip(&white).map(|(a, b)| (1.0 - w.alpha) * a + w.alpha * b).collect()
            }
        };
        normalized(z)
    }

    /// Tokenizes `prefix + text` and embeds it under the bound context.
    pub fn embed(&self, id: &str, text: &str, prefix: TaskPrefix) -> Result<Vec<f64>> {
        let tokens = tokenize(&apply_prefix(prefix, text));
        let fail = |msg: &str| Error::Encoding { doc_id: id.to_string(), msg: msg.into() };
        let mean = self.weights.token_embedder().mean(&tokens).ok_or_else(|| fail("no tokens"))?;
        self.embed_mean(&mean).ok_or_else(|| fail("zero embedding"))
    }
}

pub fn embed_with_context(
    weights: &EncoderWeights,
    cache: &ContextCache,
    doc: &Document,
    prefix: TaskPrefix,
) -> Result<Vec<f64>> {
    Contextualizer::new(weights, cache)?.embed(&doc.id, &doc.text, prefix)
}

pub fn score(doc_vec: &[f64], query_vec: &[f64]) -> Result<f64> {
    if doc_vec.len() != query_vec.len() {
        return Err(Error::Dimension { expected: doc_vec.len(), got: query_vec.len() });
    }
    Ok(linalg::dot(doc_vec, query_vec))
}
