//! Text generation behind one interface: a chat-completions HTTP client and a
//! deterministic offline mock driven by an exemplar n-gram table.

use std::collections::{HashMap, HashSet};
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{tokenize, Corpus};
use crate::error::{Error, Result};
use crate::synthesis::{count_instruction_value, ANCHOR_SECTION, DELIMITER, TEMPLATE_CLOSE};

pub const DEFAULT_MAX_OUTPUT_TOKENS: usize = 512;
const MOCK_MIN_TOKENS: usize = 150;
const MOCK_MAX_TOKENS: usize = 350;
const FOCUS_RATE: f64 = 0.1;
const MOCK_OPENING: usize = 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderKind {
    HttpChat,
    Mock,
}

impl std::str::FromStr for ProviderKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "http_chat" => Ok(ProviderKind::HttpChat),
            "mock" => Ok(ProviderKind::Mock),
            other => Err(Error::Argument(format!("unknown provider {other:?}; expected http_chat or mock"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProviderConfig {
    pub kind: ProviderKind,
    pub endpoint_url: String,
    pub model_name: String,
    pub api_key_env: String,
    pub max_retries: u32,
    pub base_backoff_ms: u64,
    pub timeout_ms: u64,
    pub mock_seed: u64,
    pub max_output_tokens: usize,
    /// Upper bound on concurrent requests through one provider.
    pub max_in_flight: Option<usize>,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        ProviderConfig {
            kind: ProviderKind::Mock,
            endpoint_url: "https://api.openai.com/v1/chat/completions".into(),
            model_name: "gpt-4o-2024-11-20".into(),
            api_key_env: "OPENAI_API_KEY".into(),
            max_retries: 5,
            base_backoff_ms: 500,
            timeout_ms: 120_000,
            mock_seed: 0,
            max_output_tokens: DEFAULT_MAX_OUTPUT_TOKENS,
            max_in_flight: None,
        }
    }
}

impl ProviderConfig {
    /// Returns every problem found, without touching the network.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.timeout_ms == 0 {
            out.push("provider timeout must be positive".to_string());
        }
        if self.max_output_tokens == 0 {
            out.push("max_output_tokens must be at least 1".to_string());
        }
        if self.max_in_flight == Some(0) {
            out.push("max_in_flight must be at least 1".to_string());
        }
        if self.kind == ProviderKind::HttpChat {
            if self.endpoint_url.is_empty() {
                out.push("endpoint_url is required for http_chat".to_string());
            }
            match std::env::var(&self.api_key_env) {
                Ok(v) if !v.is_empty() => {}
                _ => out.push(format!("environment variable {} is not set", self.api_key_env)),
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

    /// Exponential backoff ceiling before jitter.
    pub fn backoff_ceiling(&self, attempt: u32) -> Duration {
        Duration::from_millis(self.base_backoff_ms.saturating_mul(1u64 << attempt.min(20)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampling {
    #[default]
    ProviderDefault,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub system_prompt: Option<String>,
    pub user_prompt: String,
    pub max_output_tokens: usize,
    pub sampling: Sampling,
    pub request_tag: String,
}

impl GenerationRequest {
    pub fn new(user_prompt: impl Into<String>, max_output_tokens: usize, tag: impl Into<String>) -> Self {
        GenerationRequest {
            system_prompt: None,
            user_prompt: user_prompt.into(),
            max_output_tokens,
            sampling: Sampling::ProviderDefault,
            request_tag: tag.into(),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.user_prompt.is_empty() {
            return Err(Error::Argument("user prompt is empty".into()));
        }
        if self.max_output_tokens == 0 {
            return Err(Error::Argument("max_output_tokens must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationResponse {
    pub text: String,
    pub provider_name: String,
    pub latency: Duration,
    pub attempt_count: u32,
}

/// Order-2 transition table over exemplar tokens with order-1 backoff.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct NgramTable {
    vocab: Vec<String>,
    index: HashMap<String, u32>,
    bigram_next: HashMap<(u32, u32), Vec<u32>>,
    unigram_next: HashMap<u32, Vec<u32>>,
    /// Bigrams in order of first occurrence.
    starts: Vec<(u32, u32)>,
}

impl NgramTable {
    pub fn from_corpus(exemplars: &Corpus) -> NgramTable {
        let mut t = NgramTable::default();
        for doc in &exemplars.documents {
            let ids: Vec<u32> = tokenize(&doc.text).iter().map(|tok| t.intern(tok)).collect();
            for w in ids.windows(2) {
                t.unigram_next.entry(w[0]).or_default().push(w[1]);
            }
            for w in ids.windows(3) {
                let key = (w[0], w[1]);
                let next = t.bigram_next.entry(key).or_default();
                if next.is_empty() {
                    t.starts.push(key);
                }
                next.push(w[2]);
            }
        }
        t
    }

    fn intern(&mut self, tok: &str) -> u32 {
        if let Some(&i) = self.index.get(tok) {
            return i;
        }
        let i = self.vocab.len() as u32;
        self.vocab.push(tok.to_string());
        self.index.insert(tok.to_string(), i);
        i
    }

    pub fn is_empty(&self) -> bool {
        self.starts.is_empty()
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    fn walker<'a>(&'a self, focus: &'a [String], prefer: Option<&'a [bool]>) -> Walker<'a> {
        let ok = |id: u32| prefer.is_none_or(|p| p[id as usize]);
        let preferred: Vec<(u32, u32)> = self.starts.iter().copied().filter(|&(a, b)| ok(a) && ok(b)).collect();
        let starts = if preferred.is_empty() { self.starts.clone() } else { preferred };
        Walker { table: self, focus, prefer, starts, state: (None, None), out: Vec::new() }
    }
}

/// Order-2 walk state. `focus` tokens are emitted at `FOCUS_RATE`; `prefer`
/// restricts starts and successors to marked tokens when possible.
struct Walker<'a> {
    table: &'a NgramTable,
    focus: &'a [String],
    prefer: Option<&'a [bool]>,
    starts: Vec<(u32, u32)>,
    state: (Option<u32>, Option<u32>),
    out: Vec<String>,
}

impl Walker<'_> {
    fn ok(&self, id: u32) -> bool {
        self.prefer.is_none_or(|p| p[id as usize])
    }

    /// Extends the output to `len` tokens drawing from `rng`.
    fn run_to(&mut self, rng: &mut ChaCha8Rng, len: usize) {
        let t = self.table;
        while self.out.len() < len {
            let (Some(prev), Some(cur)) = (self.state.0.or(self.state.1), self.state.1) else {
                let (a, b) = self.starts[rng.gen_range(0..self.starts.len())];
                self.out.push(t.vocab[a as usize].clone());
                self.out.push(t.vocab[b as usize].clone());
                self.state = (Some(a), Some(b));
                continue;
            };
            if !self.focus.is_empty() && rng.gen::<f64>() < FOCUS_RATE {
                let tok = &self.focus[rng.gen_range(0..self.focus.len())];
                self.out.push(tok.clone());
                self.state = match t.index.get(tok) {
                    Some(&id) => (Some(cur), Some(id)),
                    None => (None, None),
                };
                continue;
            }
            let candidates = self
                .state
                .0
                .and_then(|_| t.bigram_next.get(&(prev, cur)))
                .or_else(|| t.unigram_next.get(&cur));
            let Some(all) = candidates else {
                self.state = (None, None);
                continue;
            };
            let preferred: Vec<u32> = if self.prefer.is_some() {
                all.iter().copied().filter(|&c| self.ok(c)).collect()
            } else {
                Vec::new()
            };
            let pool: &[u32] = if preferred.is_empty() { all } else { &preferred };
            let next = pool[rng.gen_range(0..pool.len())];
            self.out.push(t.vocab[next as usize].clone());
            self.state = (Some(cur), Some(next));
        }
    }

    fn finish(mut self, len: usize) -> Vec<String> {
        self.out.truncate(len);
        self.out
    }
}

fn prompt_rng(seed: u64, prompt: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(prompt.as_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

/// Body of the "Domain Anchor" section of an expansion prompt, if present.
fn anchor_body(prompt: &str) -> Option<&str> {
    let start = prompt.find(ANCHOR_SECTION)? + ANCHOR_SECTION.len();
    let len = prompt[start..].find(TEMPLATE_CLOSE)?;
    Some(&prompt[start..start + len])
}

/// Offline stand-in for an LLM. Anchor prompts yield one document walked over
/// the tokens of the exemplar least covered by the anchors already listed.
/// Expansion prompts yield the requested number of documents biased toward
/// the anchor's tokens, each followed by the delimiter line. The first `MOCK_OPENING` tokens of each document slot
/// depend on the prompt alone, so repeated identical prompts give documents
/// with the same opening.
pub fn mock_generate(seed: u64, prompt: &str, max_output_tokens: usize, table: &NgramTable) -> Result<String> {
    if table.is_empty() {
        return Err(Error::Config("mock provider needs a non-empty exemplar n-gram table".into()));
    }
    let mut rng = prompt_rng(seed, prompt);
    let mut budget = max_output_tokens;
    let mut length = |rng: &mut ChaCha8Rng| {
        let n = rng.gen_range(MOCK_MIN_TOKENS..=MOCK_MAX_TOKENS).min(budget);
        budget -= n;
        n
    };
    match anchor_body(prompt) {
        Some(body) => {
            let focus = tokenize(body);
            let count = count_instruction_value(prompt).unwrap_or(1);
            let mut docs = Vec::with_capacity(count);
            for slot in 0..count {
                let n = length(&mut rng);
                if n == 0 {
                    break;
                }
                let mut opening = prompt_rng(u64::MAX - slot as u64, prompt);
                let mut walker = table.walker(&focus, None);
                walker.run_to(&mut opening, MOCK_OPENING.min(n));
                walker.run_to(&mut rng, n);
                docs.push(format!("{}\n{DELIMITER}\n", walker.finish(n).join(" ")));
            }
            Ok(docs.concat())
        }
        None => {
            let prefer = facet_preference(prompt, table);
            let n = length(&mut rng);
            let mut walker = table.walker(&[], Some(&prefer));
            walker.run_to(&mut rng, n);
            Ok(walker.finish(n).join(" "))
        }
    }
}

/// Tokens of the exemplar least covered by the anchors already listed in the prompt.
fn facet_preference(prompt: &str, table: &NgramTable) -> Vec<bool> {
    let mut exemplars: Vec<HashSet<String>> = Vec::new();
    let mut rest = prompt;
    while let Some(i) = rest.find("Exemplar ") {
        let after = &rest[i..];
        let Some(open) = after.find("\n\"\"\"\n") else { break };
        let body_start = open + 5;
        let Some(close) = after[body_start..].find("\n\"\"\"") else { break };
        exemplars.push(tokenize(&after[body_start..body_start + close]).into_iter().collect());
        rest = &after[body_start + close..];
    }
    let prior: HashSet<String> = prompt
        .lines()
        .filter_map(|l| l.strip_prefix("- "))
        .flat_map(tokenize)
        .collect();
    let coverage = |e: &HashSet<String>| e.iter().filter(|t| prior.contains(*t)).count() as f64 / e.len().max(1) as f64;
    let mut best = 0;
    for (i, e) in exemplars.iter().enumerate() {
        if coverage(e) < coverage(&exemplars[best]) {
            best = i;
        }
    }
    let mut mark = vec![false; table.vocab.len()];
    if let Some(e) = exemplars.get(best) {
        for t in e {
            if let Some(&id) = table.index.get(t) {
                mark[id as usize] = true;
            }
        }
    }
    mark
}

/// Counting gate for the in-flight limit.
#[derive(Debug, Default)]
struct Gate {
    limit: Option<usize>,
    busy: Mutex<usize>,
    freed: Condvar,
}

impl Gate {
    fn enter(&self) -> GateGuard<'_> {
        if let Some(limit) = self.limit {
            let mut busy = self.busy.lock().unwrap();
            while *busy >= limit {
                busy = self.freed.wait(busy).unwrap();
            }
            *busy += 1;
        }
        GateGuard(self)
    }
}

struct GateGuard<'a>(&'a Gate);

impl Drop for GateGuard<'_> {
    fn drop(&mut self) {
        if self.0.limit.is_some() {
            *self.0.busy.lock().unwrap() -= 1;
            self.0.freed.notify_one();
        }
    }
}

/// A configured provider. Cheap to clone; clones share the in-flight gate.
#[derive(Debug, Clone)]
pub struct Provider {
    config: ProviderConfig,
    table: Option<Arc<NgramTable>>,
    gate: Arc<Gate>,
}

impl Provider {
    /// `table` is required for the mock and ignored by the HTTP client.
    pub fn new(config: ProviderConfig, table: Option<NgramTable>) -> Result<Provider> {
        config.validate()?;
        if config.kind == ProviderKind::Mock && table.is_none() {
            return Err(Error::Config("mock provider needs an exemplar n-gram table".into()));
        }
        let gate = Arc::new(Gate { limit: config.max_in_flight, ..Gate::default() });
        Ok(Provider { config, table: table.map(Arc::new), gate })
    }

    pub fn config(&self) -> &ProviderConfig {
        &self.config
    }

    pub fn name(&self) -> String {
        match self.config.kind {
            ProviderKind::Mock => "mock".into(),
            ProviderKind::HttpChat => format!("http_chat:{}", self.config.model_name),
        }
    }

    /// Same provider with a different mock seed.
    pub fn reseeded(&self, mock_seed: u64) -> Provider {
        let mut p = self.clone();
        p.config.mock_seed = mock_seed;
        p
    }

    pub fn complete(&self, request: &GenerationRequest) -> Result<GenerationResponse> {
        request.validate()?;
        let _slot = self.gate.enter();
        let started = Instant::now();
        let (text, attempt_count) = match self.config.kind {
            ProviderKind::Mock => {
                let table = self.table.as_deref().expect("checked at construction");
                (mock_generate(self.config.mock_seed, &request.user_prompt, request.max_output_tokens, table)?, 1)
            }
            ProviderKind::HttpChat => http_complete(&self.config, request)?,
        };
        Ok(GenerationResponse { text, provider_name: self.name(), latency: started.elapsed(), attempt_count })
    }
}

fn retryable(status: u16) -> bool {
    status == 429 || (500..600).contains(&status)
}

fn http_complete(config: &ProviderConfig, request: &GenerationRequest) -> Result<(String, u32)> {
    let key = std::env::var(&config.api_key_env)
        .ok()
        .filter(|k| !k.is_empty())
        .ok_or_else(|| Error::Config(format!("environment variable {} is not set", config.api_key_env)))?;
    let client = reqwest::blocking::Client::builder()
        .timeout(Duration::from_millis(config.timeout_ms))
        .build()
        .map_err(|e| Error::Config(format!("http client: {e}")))?;
    let mut messages = Vec::new();
    if let Some(system) = &request.system_prompt {
        messages.push(serde_json::json!({"role": "system", "content": system}));
    }
    messages.push(serde_json::json!({"role": "user", "content": request.user_prompt}));
    let body = serde_json::json!({
        "model": config.model_name,
        "messages": messages,
        "max_tokens": request.max_output_tokens,
    });

    let attempts = config.max_retries + 1;
    let mut last_status = None;
    let mut last_msg = String::new();
    for attempt in 0..attempts {
        match client.post(&config.endpoint_url).bearer_auth(&key).json(&body).send() {
            Err(e) => {
                last_status = None;
                last_msg = e.to_string();
            }
            Ok(resp) => {
                let status = resp.status().as_u16();
                let text = resp.text().unwrap_or_default();
                if (200..300).contains(&status) {
                    return Ok((extract_content(&text)?, attempt + 1));
                }
                if !retryable(status) {
                    return Err(Error::Request { status, body: text });
                }
                last_status = Some(status);
                last_msg = text;
            }
        }
        if attempt + 1 < attempts {
            let ceiling = config.backoff_ceiling(attempt).as_secs_f64();
            std::thread::sleep(Duration::from_secs_f64(rand::thread_rng().gen_range(0.0..=ceiling)));
        }
    }
    Err(Error::Transport { attempts, status: last_status, msg: last_msg })
}

fn extract_content(body: &str) -> Result<String> {
    let v: serde_json::Value =
        serde_json::from_str(body).map_err(|e| Error::Protocol(format!("response is not JSON: {e}")))?;
    match v.pointer("/choices/0/message/content").and_then(|c| c.as_str()) {
        Some(s) if !s.trim().is_empty() => Ok(s.to_string()),
        Some(_) => Err(Error::Protocol("empty content in first choice".into())),
        None => Err(Error::Protocol("missing choices[0].message.content".into())),
    }
}
