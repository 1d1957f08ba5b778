//! Reference implementations used as test oracles. The encoder and ranking
//! oracles are straight-line code; the gradient oracle differentiates the
//! inference path numerically.
#![allow(dead_code)]

use std::collections::BTreeMap;

use ctxsynth::corpus::tokenize;
use ctxsynth::encoder::EncoderWeights;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Compares every window of `a` against every window of `b`.
pub fn brute_overlap(a: &[String], b: &[String], n: usize) -> bool {
    if n == 0 || a.len() < n || b.len() < n {
        return false;
    }
    for i in 0..=a.len() - n {
        for j in 0..=b.len() - n {
            if (0..n).all(|t| a[i + t] == b[j + t]) {
                return true;
            }
        }
    }
    false
}

/// DCG with gain 2^g - 1 and discount log2(rank + 1), normalized by the ideal ordering.
pub fn brute_ndcg(ranking: &[String], grades: &BTreeMap<String, u32>, k: usize) -> f64 {
    let gain = |g: u32| 2f64.powi(g as i32) - 1.0;
    let mut dcg = 0.0;
    for (i, d) in ranking.iter().take(k).enumerate() {
        let g = grades.get(d).copied().unwrap_or(0);
        dcg += gain(g) / ((i + 2) as f64).log2();
    }
    let mut ideal: Vec<u32> = grades.values().copied().filter(|&g| g > 0).collect();
    ideal.sort_unstable_by(|a, b| b.cmp(a));
    let mut idcg = 0.0;
    for (i, g) in ideal.iter().take(k).enumerate() {
        idcg += gain(*g) / ((i + 2) as f64).log2();
    }
    if idcg == 0.0 {
        0.0
    } else {
        dcg / idcg
    }
}

fn token_vector(seed: u64, dim: usize, token: &str) -> Vec<f64> {
    let mut h = Sha256::new();
    h.update(b"token");
    h.update(seed.to_le_bytes());
    h.update(token.as_bytes());
    let mut rng = ChaCha8Rng::from_seed(h.finalize().into());
    (0..dim).map(|_| 3f64.sqrt() * (2.0 * rng.gen::<f64>() - 1.0)).collect()
}

fn mean_vector(w: &EncoderWeights, text: &str) -> Vec<f64> {
    let toks = tokenize(text);
    let mut m = vec![0.0; w.token_dim];
    for t in &toks {
        let v = token_vector(w.hash_seed, w.token_dim, t);
        for c in 0..w.token_dim {
            m[c] += v[c];
        }
    }
    for x in m.iter_mut() {
        *x /= toks.len() as f64;
    }
    m
}

fn mat_vec(m: &[f64], rows: usize, cols: usize, v: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; rows];
    for r in 0..rows {
        for c in 0..cols {
            out[r] += m[r * cols + c] * v[c];
        }
    }
    out
}

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

/// Gaussian elimination with partial pivoting.
pub fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for col in 0..n {
        let p = (col..n).max_by(|&i, &j| a[i][col].abs().partial_cmp(&a[j][col].abs()).unwrap()).unwrap();
        a.swap(col, p);
        b.swap(col, p);
        for r in col + 1..n {
            let f = a[r][col] / a[col][col];
            for c in col..n {
                a[r][c] -= f * a[col][c];
            }
            b[r] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|c| a[r][c] * x[c]).sum();
        x[r] = (b[r] - s) / a[r][r];
    }
    x
}

/// Stage-one vector of a document computed from its text.
pub fn oracle_first_stage(w: &EncoderWeights, text: &str) -> Vec<f64> {
    unit(mat_vec(&w.stage1_projection, w.stage1_dim, w.token_dim, &mean_vector(w, text)))
}

/// Final embedding of `text` (prefix already applied) given stage-one context vectors.
pub fn oracle_embed_with_vectors(w: &EncoderWeights, context: &[Vec<f64>], text: &str) -> Vec<f64> {
    let (n, h) = (w.output_dim, w.stage1_dim);
    let s = mat_vec(&w.stage1_projection, h, w.token_dim, &mean_vector(w, text));
    let u = mat_vec(&w.stage2_query_projection, n, h, &s);
    if context.is_empty() {
        return unit(u);
    }
    let mut a = vec![vec![0.0; n]; n];
    for c in context {
        let mut v = vec![0.0; n];
        for r in 0..n {
            for k in 0..h {
                v[r] += (w.context_scale * w.stage2_query_projection[r * h + k] + w.stage2_context_projection[r * h + k]) * c[k];
            }
        }
        for i in 0..n {
            for j in 0..n {
                a[i][j] += v[i] * v[j];
            }
        }
    }
    let denom = context.len() as f64 + w.context_prior;
    for (i, row) in a.iter_mut().enumerate() {
        for x in row.iter_mut() {
            *x /= denom;
        }
        row[i] += 1.0;
    }
    let white = solve(a, u.clone());
    unit(u.iter().zip(&white).map(|(x, y)| (1.0 - w.alpha) * x + w.alpha * y).collect())
}

/// Final embedding with the context vectors recomputed inline from the context texts.
pub fn oracle_embed(w: &EncoderWeights, context_texts: &[String], text: &str) -> Vec<f64> {
    let vectors: Vec<Vec<f64>> = context_texts.iter().map(|t| oracle_first_stage(w, t)).collect();
    oracle_embed_with_vectors(w, &vectors, text)
}

/// Random text over a small vocabulary, so that n-gram collisions actually happen.
pub fn random_text(rng: &mut impl Rng, len: usize, vocab: usize) -> String {
    (0..len).map(|_| format!("w{}", rng.gen_range(0..vocab))).collect::<Vec<_>>().join(" ")
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub mod gradient {
    use ctxsynth::encoder::{ContextCache, Contextualizer, EncoderConfig, EncoderWeights};
    use ctxsynth::trainer::{contrastive_loss, loss_gradient, FeatureBatch};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub const STEP: f64 = 1e-4;

    /// Batch loss recomputed through the inference path.
    pub fn oracle_loss(w: &EncoderWeights, b: &FeatureBatch) -> f64 {
        let mut cache = ContextCache::empty(w);
        for (j, m) in b.context.iter().enumerate() {
            let s: Vec<f64> = (0..w.stage1_dim)
                .map(|r| (0..w.token_dim).map(|c| w.stage1_projection[r * w.token_dim + c] * m[c]).sum())
                .collect();
            let norm = s.iter().map(|x| x * x).sum::<f64>().sqrt();
            cache.vectors.push(s.iter().map(|x| x / norm).collect());
            cache.source_doc_ids.push(format!("c{j:03}"));
        }
        let ctx = Contextualizer::new(w, &cache).unwrap();
        let qs: Vec<Vec<f64>> = b.queries.iter().map(|m| ctx.embed_mean(m).unwrap()).collect();
        let ps: Vec<Vec<f64>> = b.positives.iter().map(|m| ctx.embed_mean(m).unwrap()).collect();
        let mut total = 0.0;
        for (i, q) in qs.iter().enumerate() {
            let scores: Vec<f64> = ps.iter().map(|p| q.iter().zip(p).map(|(a, b)| a * b).sum()).collect();
            total += contrastive_loss(&scores, i, b.tau).unwrap();
        }
        total / qs.len() as f64
    }

    /// Random weights and features with every dimension in 2..=8.
    pub fn instance(seed: u64, with_context: bool) -> (EncoderWeights, FeatureBatch) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = EncoderConfig {
            token_dim: rng.gen_range(2..=8),
            stage1_dim: rng.gen_range(2..=8),
            output_dim: rng.gen_range(2..=8),
            hash_seed: seed,
            alpha: rng.gen_range(0.1..0.9),
            context_scale: rng.gen_range(0.5..4.0),
            context_prior: rng.gen_range(0.0..4.0),
        };
        let mut w = EncoderWeights::init(&cfg, seed).unwrap();
        for k in w.stage2_context_projection.iter_mut() {
            *k = rng.gen_range(-0.5..0.5);
        }
        let e = cfg.token_dim;
        let mut vecs = |n: usize| -> Vec<Vec<f64>> {
            (0..n).map(|_| (0..e).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect()
        };
        let batch = FeatureBatch {
            queries: vecs(4),
            positives: vecs(4),
            context: if with_context { vecs(5) } else { Vec::new() },
            tau: 0.5,
        };
        (w, batch)
    }

    pub struct FdReport {
        pub components: usize,
        pub max_rel_error: f64,
        pub worst: String,
        /// |analytic-path loss - inference-path loss|.
        pub loss_gap: f64,
    }

    /// Central differences of the inference-path loss against the analytic gradient.
    pub fn fd_report(w: &EncoderWeights, b: &FeatureBatch) -> FdReport {
        let (loss, g) = loss_gradient(w, b).unwrap();
        let mut report =
            FdReport { components: 0, max_rel_error: 0.0, worst: String::new(), loss_gap: (loss - oracle_loss(w, b)).abs() };
        let mut record = |analytic: f64, plus: f64, minus: f64, what: String| {
            let fd = (plus - minus) / (2.0 * STEP);
            let rel = (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-6);
            report.components += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = what;
            }
        };
        type Field = fn(&mut EncoderWeights) -> &mut Vec<f64>;
        let groups: [(&str, Field, &Vec<f64>); 3] = [
            ("stage1", |w| &mut w.stage1_projection, &g.stage1_projection),
            ("query", |w| &mut w.stage2_query_projection, &g.stage2_query_projection),
            ("context", |w| &mut w.stage2_context_projection, &g.stage2_context_projection),
        ];
        for (name, field, grad) in groups {
            for i in 0..grad.len() {
                let mut wp = w.clone();
                field(&mut wp)[i] += STEP;
                let mut wm = w.clone();
                field(&mut wm)[i] -= STEP;
                record(grad[i], oracle_loss(&wp, b), oracle_loss(&wm, b), format!("{name}[{i}]"));
            }
        }
        let mut wp = w.clone();
        wp.alpha += STEP;
        let mut wm = w.clone();
        wm.alpha -= STEP;
        record(g.alpha, oracle_loss(&wp, b), oracle_loss(&wm, b), "alpha".into());
        report
    }
}

/// Minimal HTTP/1.1 server that answers each POST from a scripted handler
/// and records the JSON bodies it received.
pub mod stub {
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;
    use std::sync::{Arc, Mutex};

    use serde_json::Value;

    pub type Handler = Box<dyn Fn(usize, &Value) -> (u16, String) + Send + Sync>;

    pub struct StubServer {
        pub url: String,
        pub requests: Arc<Mutex<Vec<Value>>>,
    }

    impl StubServer {
        pub fn start(handler: Handler) -> StubServer {
            let listener = TcpListener::bind("127.0.0.1:0").unwrap();
            let url = format!("http://{}/v1/chat/completions", listener.local_addr().unwrap());
            let requests = Arc::new(Mutex::new(Vec::new()));
            let log = Arc::clone(&requests);
            std::thread::spawn(move || {
                for stream in listener.incoming() {
                    let Ok(mut stream) = stream else { continue };
                    let mut reader = BufReader::new(stream.try_clone().unwrap());
                    let mut length = 0usize;
                    loop {
                        let mut line = String::new();
                        if reader.read_line(&mut line).unwrap_or(0) == 0 {
                            break;
                        }
                        let line = line.trim_end();
                        if line.is_empty() {
                            break;
                        }
                        if let Some((k, v)) = line.split_once(':') {
                            if k.eq_ignore_ascii_case("content-length") {
                                length = v.trim().parse().unwrap_or(0);
                            }
                        }
                    }
                    let mut body = vec![0u8; length];
                    if reader.read_exact(&mut body).is_err() {
                        continue;
                    }
                    let value: Value = serde_json::from_slice(&body).unwrap_or(Value::Null);
                    let call = {
                        let mut log = log.lock().unwrap();
                        log.push(value.clone());
                        log.len() - 1
                    };
                    let (status, text) = handler(call, &value);
                    let reply = format!(
                        "HTTP/1.1 {status} STATUS\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{text}",
                        text.len()
                    );
                    let _ = stream.write_all(reply.as_bytes());
                }
            });
            StubServer { url, requests }
        }

        pub fn calls(&self) -> usize {
            self.requests.lock().unwrap().len()
        }

        pub fn bodies(&self) -> Vec<Value> {
            self.requests.lock().unwrap().clone()
        }
    }

    /// A chat-completions success body carrying `content`.
    pub fn completion(content: &str) -> String {
        serde_json::json!({"choices": [{"message": {"role": "assistant", "content": content}}]}).to_string()
    }

    /// The user message of a recorded request.
    pub fn user_prompt(body: &Value) -> String {
        body["messages"].as_array().unwrap().last().unwrap()["content"].as_str().unwrap().to_string()
    }
}
