//! Exact dense search, NDCG@k and TREC run output.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Qrels};
use crate::encoder::{score, ContextCache, Contextualizer, EncoderWeights, TaskPrefix};
use crate::error::{Error, Result};

/// Row-major matrix of unit-norm document embeddings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseIndex {
    pub doc_ids: Vec<String>,
    pub dim: usize,
    pub matrix: Vec<f64>,
    pub encoder_fingerprint: String,
    pub cache_fingerprint: String,
}

impl DenseIndex {
    pub fn len(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.doc_ids.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.matrix[i * self.dim..(i + 1) * self.dim]
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        serde_json::to_writer(BufWriter::new(file), self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<DenseIndex> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_reader(std::io::BufReader::new(file))?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedList {
    pub query_id: String,
    pub entries: Vec<(String, f64)>,
    pub k: usize,
}

/// Embeds every document with the search-document prefix under the cached context.
pub fn build_index(weights: &EncoderWeights, cache: &ContextCache, corpus: &Corpus) -> Result<DenseIndex> {
    let ctx = Contextualizer::new(weights, cache)?;
    let mut matrix = Vec::with_capacity(corpus.len() * weights.output_dim);
    for doc in &corpus.documents {
        matrix.extend(ctx.embed(&doc.id, &doc.text, TaskPrefix::SearchDocument)?);
    }
    Ok(DenseIndex {
        doc_ids: corpus.documents.iter().map(|d| d.id.clone()).collect(),
        dim: weights.output_dim,
        matrix,
        encoder_fingerprint: weights.fingerprint(),
        cache_fingerprint: cache.content_fingerprint(),
    })
}

fn rank_order(a: &(String, f64), b: &(String, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0))
}

/// Exact top-k by dot product; ties go to the smaller doc id.
pub fn search(index: &DenseIndex, query_id: &str, query_vec: &[f64], k: usize) -> Result<RankedList> {
    if query_vec.len() != index.dim {
        return Err(Error::Dimension { expected: index.dim, got: query_vec.len() });
    }
    let mut scored = Vec::with_capacity(index.len());
    for (i, id) in index.doc_ids.iter().enumerate() {
        // Adding 0.0 maps -0.0 to 0.0 so that equal scores tie under total_cmp.
        scored.push((id.clone(), score(index.row(i), query_vec)? + 0.0));
    }
    let keep = k.min(scored.len());
    if keep > 0 && keep < scored.len() {
        scored.select_nth_unstable_by(keep - 1, rank_order);
        scored.truncate(keep);
    }
    scored.sort_by(rank_order);
    scored.truncate(keep);
    Ok(RankedList { query_id: query_id.to_string(), entries: scored, k })
}

/// Graded NDCG with gain 2^rel - 1 and discount log2(rank + 1).
/// A query without relevant documents scores 0.
pub fn ndcg_at_k(ranked: &RankedList, qrels: &Qrels, k: usize) -> f64 {
    let gain = |g: u32| 2f64.powi(g as i32) - 1.0;
    let discount = |i: usize| (i as f64 + 2.0).log2();
    let dcg: f64 = ranked
        .entries
        .iter()
        .take(k)
        .enumerate()
        .map(|(i, (doc, _))| gain(qrels.grade(&ranked.query_id, doc)) / discount(i))
        .sum();
    let mut ideal: Vec<u32> = qrels
        .for_query(&ranked.query_id)
        .map(|m| m.values().copied().filter(|&g| g > 0).collect())
        .unwrap_or_default();
    ideal.sort_unstable_by(|a, b| b.cmp(a));
    let idcg: f64 = ideal.iter().take(k).enumerate().map(|(i, &g)| gain(g) / discount(i)).sum();
    if idcg == 0.0 {
        0.0
    } else {
        dcg / idcg
    }
}

fn has_relevant(qrels: &Qrels, query_id: &str) -> bool {
    qrels.for_query(query_id).is_some_and(|m| m.values().any(|&g| g > 0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunEvaluation {
    pub k: usize,
    /// NDCG@k for every query with at least one relevant document.
    pub per_query: BTreeMap<String, f64>,
    /// Queries skipped because they have no relevant documents.
    pub without_relevant: Vec<String>,
    pub mean: f64,
    #[serde(skip)]
    pub rankings: Vec<RankedList>,
}

/// Embeds queries with the search-query prefix, ranks the index and
/// averages NDCG@k over queries that have relevant documents.
pub fn evaluate_run(
    index: &DenseIndex,
    queries: &Corpus,
    qrels: &Qrels,
    weights: &EncoderWeights,
    cache: &ContextCache,
    k: usize,
) -> Result<RunEvaluation> {
    let ctx = Contextualizer::new(weights, cache)?;
    let mut per_query = BTreeMap::new();
    let mut without_relevant = Vec::new();
    let mut rankings = Vec::with_capacity(queries.len());
    for q in &queries.documents {
        let v = ctx.embed(&q.id, &q.text, TaskPrefix::SearchQuery)?;
        let ranked = search(index, &q.id, &v, k)?;
        if has_relevant(qrels, &q.id) {
            per_query.insert(q.id.clone(), ndcg_at_k(&ranked, qrels, k));
        } else {
            without_relevant.push(q.id.clone());
        }
        rankings.push(ranked);
    }
    if per_query.is_empty() {
        return Err(Error::Evaluation("no query has a relevant document in the qrels".into()));
    }
    let mean = per_query.values().sum::<f64>() / per_query.len() as f64;
    Ok(RunEvaluation { k, per_query, without_relevant, mean, rankings })
}

/// Writes `qid Q0 doc rank score tag` lines.
pub fn write_trec_run(path: &Path, rankings: &[RankedList], tag: &str) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for list in rankings {
        for (rank, (doc, s)) in list.entries.iter().enumerate() {
            writeln!(w, "{} Q0 {} {} {:.9} {}", list.query_id, doc, rank + 1, s, tag).map_err(|e| Error::io(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_metrics(path: &Path, eval: &RunEvaluation) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, eval)?;
    w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn list(qid: &str, docs: &[&str]) -> RankedList {
        RankedList {
            query_id: qid.into(),
            entries: docs.iter().enumerate().map(|(i, d)| (d.to_string(), -(i as f64))).collect(),
            k: 10,
        }
    }

    #[test]
    fn ndcg_hand_values() {
        let mut qrels = Qrels::new();
        qrels.insert("q", "d1", 1);
        assert_eq!(ndcg_at_k(&list("q", &["d1", "d2"]), &qrels, 10), 1.0);
        let v = ndcg_at_k(&list("q", &["d2", "d1"]), &qrels, 10);
        assert!((v - 1.0 / 3f64.log2()).abs() < 1e-12);
        assert_eq!(ndcg_at_k(&list("q", &["d2", "d3"]), &qrels, 10), 0.0);
        assert_eq!(ndcg_at_k(&list("other", &["d1"]), &qrels, 10), 0.0);
    }

    #[test]
    fn ties_break_by_doc_id() {
        let index = DenseIndex {
            doc_ids: vec!["c".into(), "a".into(), "b".into()],
            dim: 1,
            matrix: vec![1.0, 1.0, 1.0],
            encoder_fingerprint: String::new(),
            cache_fingerprint: String::new(),
        };
        let r = search(&index, "q", &[1.0], 2).unwrap();
        let ids: Vec<_> = r.entries.iter().map(|e| e.0.as_str()).collect();
        assert_eq!(ids, ["a", "b"]);
    }
}
