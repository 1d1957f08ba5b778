//! Hierarchical proxy-corpus construction: sequential anchors, per-anchor
//! count planning, batched expansion and delimiter parsing.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::{load_corpus, Corpus, Document, Role};
use crate::error::{Error, Result};
use crate::provider::{GenerationRequest, Provider};
use crate::seed;

pub const DELIMITER: &str = "---DOCUMENT END---";
/// Maximum documents requested per expansion call.
pub const EXPANSION_BATCH: usize = 8;
/// Consecutive unparseable responses tolerated before an expansion fails.
const MAX_EMPTY_CALLS: usize = 3;

pub(crate) const ANCHOR_SECTION: &str = "Domain Anchor:\n\"\"\"\n";
pub(crate) const TEMPLATE_CLOSE: &str = "\n\"\"\"";
const COUNT_PREFIX: &str = "Generate ";
const COUNT_SUFFIX: &str = " such documents,";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthesisCondition {
    ZestAnchored,
    GscGeneric,
}

/// Length instruction in the anchor prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnchorLength {
    #[default]
    Exemplar,
    Brief,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthesisPlan {
    pub k: usize,
    /// Anchor count; 0 for the generic baseline.
    pub anchors: usize,
    pub j_prime: usize,
    /// Documents per anchor; empty for the generic baseline.
    pub per_anchor: Vec<usize>,
    pub seed: u64,
    pub condition: SynthesisCondition,
    #[serde(default)]
    pub anchor_length: AnchorLength,
}

impl SynthesisPlan {
    pub fn zest(k: usize, anchors: usize, j_prime: usize, seed: u64) -> Result<SynthesisPlan> {
        Ok(SynthesisPlan {
            k,
            anchors,
            j_prime,
            per_anchor: plan_per_anchor_counts(j_prime, anchors)?,
            seed,
            condition: SynthesisCondition::ZestAnchored,
            anchor_length: AnchorLength::default(),
        })
    }

    pub fn gsc(k: usize, j_prime: usize, seed: u64) -> SynthesisPlan {
        SynthesisPlan {
            k,
            anchors: 0,
            j_prime,
            per_anchor: Vec::new(),
            seed,
            condition: SynthesisCondition::GscGeneric,
            anchor_length: AnchorLength::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.j_prime == 0 {
            return Err(Error::Argument("J' must be at least 1".into()));
        }
        if self.condition == SynthesisCondition::ZestAnchored {
            let sum: usize = self.per_anchor.iter().sum();
            let max = self.per_anchor.iter().max().copied().unwrap_or(0);
            let min = self.per_anchor.iter().min().copied().unwrap_or(0);
            if self.per_anchor.len() != self.anchors
                || sum != self.j_prime
                || max - min > 1
                || self.per_anchor.windows(2).any(|w| w[0] < w[1])
            {
                return Err(Error::Argument(format!(
                    "per-anchor counts {:?} do not split J'={} over A={}",
                    self.per_anchor, self.j_prime, self.anchors
                )));
            }
        }
        Ok(())
    }
}

/// `J' / A` each, with the first `J' mod A` anchors taking one extra.
pub fn plan_per_anchor_counts(j_prime: usize, anchors: usize) -> Result<Vec<usize>> {
    if anchors == 0 {
        return Err(Error::Argument("anchor count must be at least 1".into()));
    }
    if j_prime < anchors {
        return Err(Error::Argument(format!("J'={j_prime} is smaller than A={anchors}")));
    }
    let base = j_prime / anchors;
    let extra = j_prime % anchors;
    Ok((0..anchors).map(|i| base + usize::from(i < extra)).collect())
}

pub fn render_anchor_prompt(exemplars: &Corpus, prior_anchors: &[Document]) -> String {
    render_anchor_prompt_with(exemplars, prior_anchors, AnchorLength::default())
}

pub fn render_anchor_prompt_with(exemplars: &Corpus, prior_anchors: &[Document], length: AnchorLength) -> String {
    let mut p = format!(
        "Systematically examine the {} exemplar documents provided below to extract and synthesize \n\
         their core themes, stylistic patterns, and domain-specific terminology. Leverage this \n\
         analysis to craft a new domain anchor document that encapsulates these elements.\n\n\
         Here are the exemplar documents:\n\n",
        exemplars.len()
    );
    for (i, doc) in exemplars.documents.iter().enumerate() {
        p.push_str(&format!("Exemplar {}:\n\"\"\"\n{}\n\"\"\"\n\n", i + 1, doc.text));
    }
    if !prior_anchors.is_empty() {
        p.push_str("Previously generated anchor documents (if any):\n");
        for a in prior_anchors {
            p.push_str(&format!("- {}\n", a.text));
        }
        p.push('\n');
    }
    let length_rule = match length {
        AnchorLength::Exemplar => "1. Be approximately as long as the exemplar documents.",
        AnchorLength::Brief => "1. Be brief, noticeably shorter than the exemplar documents.",
    };
    p.push_str("Your task is to generate a new, concise domain anchor document. This document should:\n");
    p.push_str(length_rule);
    p.push_str(
        "\n2. Capture a distinct and specific topical theme, concept, or stylistic characteristic\n   \
         evident in the exemplar documents.\n\
         3. Cover key terminology, entities, and typical writing style of the domain as\n   \
         represented by the exemplars.\n\
         4. If previous anchors were mentioned, ensure this new anchor explores a\n   \
         DIFFERENT facet or theme than those already covered to maximize diversity.\n\
         5. The anchor should be a coherent piece of text, similar to the exemplar documents, \n   \
         not just a list of keywords.\n\n\
         Generate only the domain anchor document itself.",
    );
    p
}

pub fn render_expansion_prompt(anchor: &Document, count: usize) -> String {
    let mut p = format!(
        "You are tasked with generating a document that is representative of a specific \n\
         domain and theme.\n\n\
         You are given the following domain anchor document to build on, which encapsulates \n\
         a key theme or stylistic element of the target domain:\n\n\
         {ANCHOR_SECTION}{}{TEMPLATE_CLOSE}\n\n\
         Your task is to generate another full synthetic document that elaborates on,\n\
         exemplifies, and diversifies the core theme and style presented in the domain anchor.\n\
         This new document should:\n\
         1. Be topically coherent with the provided domain anchor.\n\
         2. Be a complete, well-structured document (e.g., an article, a report excerpt,\n   \
         a descriptive passage) of similar length.\n\
         3. Should explore various sub-topics, perspectives, or aspects related to the main \n   \
         theme of the anchor, ensuring diversity among them.\n\
         4. Maintain a style (e.g., tone, vocabulary, sentence structure) consistent with the\n   \
         domain anchor and typical of the implied domain.\n\
         5. Be factually plausible and internally consistent, even if entirely synthetic.\n\n\
         Respond only with your generated document. Ensure the document is clearly separated\n\
         by placing \"{DELIMITER}\" at the end of the document you generate.",
        anchor.text
    );
    p.push_str(&format!(
        "\n\n{COUNT_PREFIX}{count}{COUNT_SUFFIX} each a distinct document on its own, and place \"{DELIMITER}\" \
         on its own line after every one of them."
    ));
    p
}

/// Number of documents requested by an expansion prompt.
pub(crate) fn count_instruction_value(prompt: &str) -> Option<usize> {
    let start = prompt.rfind(COUNT_PREFIX)? + COUNT_PREFIX.len();
    let len = prompt[start..].find(COUNT_SUFFIX)?;
    prompt[start..start + len].parse().ok()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedDocuments {
    pub documents: Vec<String>,
    /// How many documents were missing relative to the request.
    pub shortfall: usize,
}

/// Splits on the delimiter, trims, drops empty segments and keeps at most
/// `expected` documents.
pub fn parse_documents(response: &str, expected: usize) -> Result<ParsedDocuments> {
    let mut documents: Vec<String> =
        response.split(DELIMITER).map(str::trim).filter(|s| !s.is_empty()).map(String::from).collect();
    if documents.is_empty() {
        return Err(Error::DocumentParse("response contains no documents".into()));
    }
    documents.truncate(expected);
    let shortfall = expected - documents.len();
    Ok(ParsedDocuments { documents, shortfall })
}

/// Generates `count` anchors one at a time; each prompt lists all earlier anchors.
pub fn generate_anchors(provider: &Provider, exemplars: &Corpus, count: usize) -> Result<Vec<Document>> {
    generate_anchors_with(provider, exemplars, count, AnchorLength::default())
}

fn generate_anchors_with(
    provider: &Provider,
    exemplars: &Corpus,
    count: usize,
    length: AnchorLength,
) -> Result<Vec<Document>> {
    if count == 0 {
        return Err(Error::Argument("anchor count must be at least 1".into()));
    }
    if exemplars.is_empty() {
        return Err(Error::Argument("exemplar set is empty".into()));
    }
    let mut anchors: Vec<Document> = Vec::with_capacity(count);
    for i in 1..=count {
        let prompt = render_anchor_prompt_with(exemplars, &anchors, length);
        let id = format!("anchor_{i}");
        let request = GenerationRequest::new(prompt, provider.config().max_output_tokens, id.clone());
        let text = match provider.complete(&request) {
            Ok(r) => r.text.trim().to_string(),
            Err(e) => return Err(Error::AnchorGeneration { completed: anchors, source: Box::new(e) }),
        };
        anchors.push(Document::new(id, text).with_role(Role::Anchor));
    }
    Ok(anchors)
}

/// Requests batches of at most `EXPANSION_BATCH` documents until `count`
/// documents exist. Each call uses its own mock seed derived from `seed`.
pub fn expand_anchor(provider: &Provider, anchor: &Document, count: usize, seed: u64) -> Result<Vec<Document>> {
    if count == 0 {
        return Err(Error::Argument("expansion count must be at least 1".into()));
    }
    let mut texts: Vec<String> = Vec::with_capacity(count);
    let mut call = 0usize;
    let mut empty_calls = 0usize;
    let per_doc = provider.config().max_output_tokens;
    while texts.len() < count {
        let want = EXPANSION_BATCH.min(count - texts.len());
        let call_seed = seed::derive(provider.config().mock_seed, &format!("{seed}/{}/{call}", anchor.id));
        let request = GenerationRequest::new(
            render_expansion_prompt(anchor, want),
            per_doc * want,
            format!("{}#{call}", anchor.id),
        );
        call += 1;
        let fail = |e: Error, have: usize| Error::Expansion {
            anchor_id: anchor.id.clone(),
            deficit: count - have,
            source: Box::new(e),
        };
        let response = provider.reseeded(call_seed).complete(&request).map_err(|e| fail(e, texts.len()))?;
        match parse_documents(&response.text, want) {
            Ok(parsed) => {
                empty_calls = 0;
                texts.extend(parsed.documents);
            }
            Err(e) => {
                empty_calls += 1;
                if empty_calls >= MAX_EMPTY_CALLS {
                    return Err(fail(e, texts.len()));
                }
            }
        }
    }
    let source = format!("generated:{}", anchor.id);
    Ok(texts
        .into_iter()
        .enumerate()
        .map(|(j, t)| Document::new(format!("{}_d{}", anchor.id, j + 1), t).with_role(Role::Synthetic).with_source(&source))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesisMetadata {
    pub plan: SynthesisPlan,
    pub provider_name: String,
    pub started_at: String,
    pub finished_at: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub anchors: Corpus,
    pub documents: Corpus,
    pub metadata: SynthesisMetadata,
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

/// Builds the synthetic corpus for a plan. Anchors run sequentially; anchor
/// expansions run concurrently and are assembled in anchor order.
pub fn synthesize_corpus(provider: &Provider, exemplars: &Corpus, plan: &SynthesisPlan) -> Result<SyntheticCorpus> {
    plan.validate()?;
    if exemplars.is_empty() {
        return Err(Error::Argument("exemplar set is empty".into()));
    }
    let started_at = now();
    let provider = provider.reseeded(seed::derive(provider.config().mock_seed, &format!("synthesis/{}", plan.seed)));
    let (anchors, documents) = match plan.condition {
        SynthesisCondition::GscGeneric => {
            let body = exemplars.documents.iter().map(|d| d.text.as_str()).collect::<Vec<_>>().join("\n\n");
            let generic = Document::new("gsc", body);
            (Vec::new(), expand_anchor(&provider, &generic, plan.j_prime, plan.seed)?)
        }
        SynthesisCondition::ZestAnchored => {
            let anchors = generate_anchors_with(&provider, exemplars, plan.anchors, plan.anchor_length)?;
            let results: Vec<Result<Vec<Document>>> = std::thread::scope(|s| {
                let handles: Vec<_> = anchors
                    .iter()
                    .zip(&plan.per_anchor)
                    .map(|(a, &n)| {
                        let p = &provider;
                        s.spawn(move || expand_anchor(p, a, n, plan.seed))
                    })
                    .collect();
                handles.into_iter().map(|h| h.join().expect("expansion thread panicked")).collect()
            });
            let mut documents = Vec::with_capacity(plan.j_prime);
            for r in results {
                documents.extend(r?);
            }
            (anchors, documents)
        }
    };
    let tag = match plan.condition {
        SynthesisCondition::ZestAnchored => "zest",
        SynthesisCondition::GscGeneric => "gsc",
    };
    Ok(SyntheticCorpus {
        anchors: Corpus::new(format!("{tag}-anchors"), anchors),
        documents: Corpus::new(format!("{tag}-synthetic"), documents),
        metadata: SynthesisMetadata {
            plan: plan.clone(),
            provider_name: provider.name(),
            started_at,
            finished_at: now(),
        },
    })
}

pub struct CorpusPaths {
    pub anchors: PathBuf,
    pub documents: PathBuf,
    pub metadata: PathBuf,
}

impl CorpusPaths {
    pub fn in_dir(dir: &Path) -> CorpusPaths {
        CorpusPaths {
            anchors: dir.join("anchors.jsonl"),
            documents: dir.join("documents.jsonl"),
            metadata: dir.join("metadata.json"),
        }
    }
}

impl SyntheticCorpus {
    pub fn save(&self, dir: &Path) -> Result<CorpusPaths> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let paths = CorpusPaths::in_dir(dir);
        self.anchors.write_jsonl(&paths.anchors)?;
        self.documents.write_jsonl(&paths.documents)?;
        let file = File::create(&paths.metadata).map_err(|e| Error::io(&paths.metadata, e))?;
        let mut w = BufWriter::new(file);
        serde_json::to_writer_pretty(&mut w, &self.metadata)?;
        w.write_all(b"\n").map_err(|e| Error::io(&paths.metadata, e))?;
        w.flush().map_err(|e| Error::io(&paths.metadata, e))?;
        Ok(paths)
    }

    pub fn load(dir: &Path) -> Result<SyntheticCorpus> {
        let paths = CorpusPaths::in_dir(dir);
        let file = File::open(&paths.metadata).map_err(|e| Error::io(&paths.metadata, e))?;
        let metadata = serde_json::from_reader(std::io::BufReader::new(file))?;
        Ok(SyntheticCorpus {
            anchors: load_corpus(&paths.anchors)?,
            documents: load_corpus(&paths.documents)?,
            metadata,
        })
    }
}
