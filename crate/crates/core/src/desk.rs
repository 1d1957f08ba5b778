//! Built-in desk-scale benchmark: synthetic domains with disjoint vocabularies,
//! a target corpus with single-relevant-document queries, an exemplar source,
//! an off-domain pool and a multi-domain pretraining corpus.

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Document, Qrels, Role};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DeskConfig {
    pub boilerplate_words: usize,
    pub common_words: usize,
    pub topics: usize,
    pub topic_words: usize,
    pub common_rate: f64,
    pub key_rate: f64,
    /// Boilerplate rate of each document half is uniform on [0, this].
    pub max_boilerplate_rate: f64,
    pub keys_per_doc: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub query_keys: usize,
    pub query_common: usize,
    pub target_docs: usize,
    pub queries: usize,
    pub exemplar_source_docs: usize,
    pub off_domain_docs: usize,
}

impl Default for DeskConfig {
    fn default() -> Self {
        DeskConfig {
            boilerplate_words: 5,
            common_words: 95,
            topics: 8,
            topic_words: 50,
            common_rate: 0.35,
            key_rate: 0.25,
            max_boilerplate_rate: 0.6,
            keys_per_doc: 6,
            min_len: 100,
            max_len: 200,
            query_keys: 5,
            query_common: 3,
            target_docs: 200,
            queries: 50,
            exemplar_source_docs: 60,
            off_domain_docs: 600,
        }
    }
}

impl DeskConfig {
    pub fn vocabulary_size(&self) -> usize {
        self.boilerplate_words + self.common_words + self.topics * self.topic_words
    }
}

fn zipf(n: usize, s: f64) -> WeightedIndex<f64> {
    WeightedIndex::new((1..=n).map(|r| 1.0 / (r as f64).powf(s))).expect("non-empty vocabulary")
}

/// One synthetic domain. Word strings are prefixed with the domain name, so
/// distinct domains never share vocabulary.
#[derive(Debug, Clone)]
pub struct Domain {
    pub name: String,
    boilerplate: Vec<String>,
    common: Vec<String>,
    topics: Vec<Vec<String>>,
    common_dist: WeightedIndex<f64>,
    topic_dist: WeightedIndex<f64>,
    cfg: DeskConfig,
}

/// A generated document with the key words its queries draw from.
pub struct Generated {
    pub text: String,
    pub topic: usize,
    pub keys: Vec<String>,
}

impl Domain {
    pub fn new(name: &str, cfg: &DeskConfig) -> Domain {
        Domain {
            name: name.to_string(),
            boilerplate: (0..cfg.boilerplate_words).map(|i| format!("{name}b{i}")).collect(),
            common: (0..cfg.common_words).map(|i| format!("{name}c{i}")).collect(),
            topics: (0..cfg.topics)
                .map(|t| (0..cfg.topic_words).map(|i| format!("{name}t{t}w{i}")).collect())
                .collect(),
            common_dist: zipf(cfg.common_words, 1.0),
            topic_dist: zipf(cfg.topic_words, 0.8),
            cfg: cfg.clone(),
        }
    }

    /// Two halves of equal length, each with its own boilerplate rate.
    pub fn document(&self, rng: &mut ChaCha8Rng) -> Generated {
        let c = &self.cfg;
        let topic = rng.gen_range(0..self.topics.len());
        let len = rng.gen_range(c.min_len..c.max_len);
        let words = &self.topics[topic];
        let keys: Vec<String> =
            index::sample(rng, words.len(), c.keys_per_doc).into_iter().map(|i| words[i].clone()).collect();
        let mut tokens: Vec<&str> = Vec::with_capacity(len);
        for _ in 0..2 {
            let boiler = rng.gen_range(0.0..c.max_boilerplate_rate);
            for _ in 0..len / 2 {
                let r: f64 = rng.gen();
                let tok = if r < boiler {
                    &self.boilerplate[rng.gen_range(0..self.boilerplate.len())]
                } else if r < boiler + c.common_rate {
                    &self.common[self.common_dist.sample(rng)]
                } else if r < boiler + c.common_rate + c.key_rate {
                    &keys[rng.gen_range(0..keys.len())]
                } else {
                    &words[self.topic_dist.sample(rng)]
                };
                tokens.push(tok);
            }
        }
        Generated { text: tokens.join(" "), topic, keys }
    }

    pub fn query(&self, rng: &mut ChaCha8Rng, keys: &[String]) -> String {
        let mut q: Vec<&str> = (0..self.cfg.query_keys).map(|_| keys[rng.gen_range(0..keys.len())].as_str()).collect();
        q.extend((0..self.cfg.query_common).map(|_| self.common[self.common_dist.sample(rng)].as_str()));
        q.join(" ")
    }
}

#[derive(Debug, Clone)]
pub struct DeskSuite {
    pub target: Corpus,
    pub queries: Corpus,
    pub qrels: Qrels,
    pub exemplar_source: Corpus,
    pub off_domain: Corpus,
}

/// Target domain "a", off-domain pool from domain "b". The first `queries`
/// target documents each have one query for which they are the only relevant document.
pub fn desk_suite(seed: u64, cfg: &DeskConfig) -> DeskSuite {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let target_domain = Domain::new("a", cfg);
    let off = Domain::new("b", cfg);
    let mut target = Vec::with_capacity(cfg.target_docs);
    let mut queries = Vec::with_capacity(cfg.queries);
    let mut qrels = Qrels::new();
    for i in 0..cfg.target_docs {
        let g = target_domain.document(&mut rng);
        let id = format!("a{i:04}");
        if i < cfg.queries {
            let qid = format!("q{i:04}");
            queries.push(Document::new(&qid, target_domain.query(&mut rng, &g.keys)).with_role(Role::Query));
            qrels.insert(qid, &id, 1);
        }
        target.push(Document::new(id, g.text).with_role(Role::Target));
    }
    let exemplar_source = (0..cfg.exemplar_source_docs)
        .map(|i| Document::new(format!("ax{i:04}"), target_domain.document(&mut rng).text))
        .collect();
    let off_domain = (0..cfg.off_domain_docs)
        .map(|i| Document::new(format!("b{i:04}"), off.document(&mut rng).text))
        .collect();
    DeskSuite {
        target: Corpus::new("desk-target", target),
        queries: Corpus::new("desk-queries", queries),
        qrels,
        exemplar_source: Corpus::new("desk-exemplar-source", exemplar_source),
        off_domain: Corpus::new("desk-off-domain", off_domain),
    }
}

/// Documents from `domains` fresh domains, `per_domain` each; every
/// document's source names its domain.
pub fn pretraining_corpus(domains: usize, per_domain: usize, seed: u64, cfg: &DeskConfig) -> Corpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut docs = Vec::with_capacity(domains * per_domain);
    for d in 0..domains {
        let domain = Domain::new(&format!("p{d}"), cfg);
        for i in 0..per_domain {
            docs.push(Document::new(format!("p{d}-{i:04}"), domain.document(&mut rng).text).with_source(&domain.name));
        }
    }
    Corpus::new("desk-pretrain", docs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::tokenize;
    use std::collections::HashSet;

    #[test]
    fn domains_have_disjoint_500_word_vocabularies() {
        let cfg = DeskConfig::default();
        assert_eq!(cfg.vocabulary_size(), 500);
        let s = desk_suite(1, &cfg);
        let vocab = |c: &Corpus| -> HashSet<String> { c.documents.iter().flat_map(|d| tokenize(&d.text)).collect() };
        assert!(vocab(&s.target).is_disjoint(&vocab(&s.off_domain)));
        assert_eq!(s.target.len(), 200);
        assert_eq!(s.queries.len(), 50);
        assert!(s.target.documents.iter().all(|d| tokenize(&d.text).len() >= 100));
    }
}
