//! Contrastive pretraining of the reference encoder with in-batch negatives.

use std::collections::BTreeMap;
use std::fs::File;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{tokenize, Corpus, Document};
use crate::encoder::{apply_prefix, EncoderConfig, EncoderWeights, TaskPrefix};
use crate::error::{Error, Result};
use crate::linalg::{self, Cholesky};

/// `-log softmax(scores / tau)[positive]`, computed with max subtraction.
pub fn contrastive_loss(scores: &[f64], positive: usize, tau: f64) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(Error::Argument(format!("temperature must be positive, got {tau}")));
    }
    if positive >= scores.len() {
        return Err(Error::Argument(format!("positive index {positive} out of range for {} scores", scores.len())));
    }
    let scaled: Vec<f64> = scores.iter().map(|s| s / tau).collect();
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = scaled.iter().map(|s| (s - max).exp()).sum();
    Ok(max + sum.ln() - scaled[positive])
}

/// Aligned query/positive pairs plus the proxy context shared by the batch.
/// Negatives for each query are the other positives in the batch.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingBatch {
    pub queries: Vec<Document>,
    pub positives: Vec<Document>,
    pub context: Vec<Document>,
    pub tau: f64,
}

impl TrainingBatch {
    pub fn validate(&self) -> Result<()> {
        if self.queries.len() != self.positives.len() {
            return Err(Error::Argument(format!(
                "{} queries but {} positives",
                self.queries.len(),
                self.positives.len()
            )));
        }
        if self.queries.is_empty() {
            return Err(Error::Argument("empty training batch".into()));
        }
        if !(self.tau > 0.0) {
            return Err(Error::Argument(format!("temperature must be positive, got {}", self.tau)));
        }
        Ok(())
    }

    /// Mean token embeddings for every text in the batch.
    pub fn features(&self, weights: &EncoderWeights) -> Result<FeatureBatch> {
        self.validate()?;
        let emb = weights.token_embedder();
        let mean = |d: &Document| {
            emb.mean(&tokenize(&d.text))
                .ok_or_else(|| Error::Encoding { doc_id: d.id.clone(), msg: "no tokens".into() })
        };
        Ok(FeatureBatch {
            queries: self.queries.iter().map(mean).collect::<Result<_>>()?,
            positives: self.positives.iter().map(mean).collect::<Result<_>>()?,
            context: self.context.iter().map(mean).collect::<Result<_>>()?,
            tau: self.tau,
        })
    }
}

/// A batch reduced to mean token embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBatch {
    pub queries: Vec<Vec<f64>>,
    pub positives: Vec<Vec<f64>>,
    pub context: Vec<Vec<f64>>,
    pub tau: f64,
}

/// Gradient with the same layout as the trainable encoder fields.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub stage1_projection: Vec<f64>,
    pub stage2_query_projection: Vec<f64>,
    pub stage2_context_projection: Vec<f64>,
    pub alpha: f64,
}

impl Gradient {
    fn zeros(w: &EncoderWeights) -> Gradient {
        Gradient {
            stage1_projection: vec![0.0; w.stage1_projection.len()],
            stage2_query_projection: vec![0.0; w.stage2_query_projection.len()],
            stage2_context_projection: vec![0.0; w.stage2_context_projection.len()],
            alpha: 0.0,
        }
    }

    pub fn norm(&self) -> f64 {
        let sq: f64 = self
            .stage1_projection
            .iter()
            .chain(&self.stage2_query_projection)
            .chain(&self.stage2_context_projection)
            .map(|g| g * g)
            .sum();
        (sq + self.alpha * self.alpha).sqrt()
    }
}

/// Forward state for one encoded text.
struct Encoded {
    mean: Vec<f64>,
    stage1: Vec<f64>,
    u: Vec<f64>,
    white: Option<Vec<f64>>,
    z_norm: f64,
    out: Vec<f64>,
}

struct ContextState {
    means: Vec<Vec<f64>>,
    stage1_norms: Vec<f64>,
    units: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    value_proj: Vec<f64>,
    denom: f64,
    chol: Cholesky,
}

fn context_state(w: &EncoderWeights, means: &[Vec<f64>]) -> Result<Option<ContextState>> {
    if means.is_empty() {
        return Ok(None);
    }
    let (h, n) = (w.stage1_dim, w.output_dim);
    let value_proj = w.value_projection();
    let mut stage1_norms = Vec::with_capacity(means.len());
    let mut units = Vec::with_capacity(means.len());
    let mut values = Vec::with_capacity(means.len());
    let mut a = vec![0.0; n * n];
    for m in means {
        let s = w.stage1_raw(m);
        let norm = linalg::norm(&s);
        if norm == 0.0 {
            return Err(Error::Encoding { doc_id: "context".into(), msg: "zero stage-one projection".into() });
        }
        let c: Vec<f64> = s.iter().map(|x| x / norm).collect();
        let v = linalg::matvec(&value_proj, n, h, &c);
        linalg::add_outer(&mut a, &v, &v, 1.0);
        stage1_norms.push(norm);
        units.push(c);
        values.push(v);
    }
    let denom = means.len() as f64 + w.context_prior;
    for (i, x) in a.iter_mut().enumerate() {
        *x /= denom;
        if i / n == i % n {
            *x += 1.0;
        }
    }
    let chol = Cholesky::factor(&a, n).ok_or_else(|| Error::Config("context system is not positive definite".into()))?;
    Ok(Some(ContextState { means: means.to_vec(), stage1_norms, units, values, value_proj, denom, chol }))
}

fn encode(w: &EncoderWeights, ctx: Option<&ContextState>, mean: &[f64]) -> Result<Encoded> {
    let stage1 = w.stage1_raw(mean);
    let u = linalg::matvec(&w.stage2_query_projection, w.output_dim, w.stage1_dim, &stage1);
    let (z, white) = match ctx {
        None => (u.clone(), None),
        Some(c) => {
            let white = c.chol.solve(&u);
            let z = u.iter().zip(&white).map(|(a, b)| (1.0 - w.alpha) * a + w.alpha * b).collect();
            (z, Some(white))
        }
    };
    let z_norm = linalg::norm(&z);
    if z_norm == 0.0 || !z_norm.is_finite() {
        return Err(Error::Encoding { doc_id: "batch".into(), msg: "degenerate embedding".into() });
    }
    let out = z.iter().map(|x| x / z_norm).collect();
    Ok(Encoded { mean: mean.to_vec(), stage1, u, white, z_norm, out })
}

/// Mean in-batch contrastive loss of a feature batch.
pub fn batch_loss(weights: &EncoderWeights, batch: &FeatureBatch) -> Result<f64> {
    Ok(forward(weights, batch)?.0)
}

type Forward = (f64, Vec<Encoded>, Vec<Encoded>, Option<ContextState>, Vec<Vec<f64>>);

fn forward(w: &EncoderWeights, batch: &FeatureBatch) -> Result<Forward> {
    let ctx = context_state(w, &batch.context)?;
    let qs = batch.queries.iter().map(|m| encode(w, ctx.as_ref(), m)).collect::<Result<Vec<_>>>()?;
    let ps = batch.positives.iter().map(|m| encode(w, ctx.as_ref(), m)).collect::<Result<Vec<_>>>()?;
    let b = qs.len();
    let mut loss = 0.0;
    let mut probs = Vec::with_capacity(b);
    for (i, q) in qs.iter().enumerate() {
        let scores: Vec<f64> = ps.iter().map(|p| linalg::dot(&q.out, &p.out)).collect();
        loss += contrastive_loss(&scores, i, batch.tau)?;
        let scaled: Vec<f64> = scores.iter().map(|s| s / batch.tau).collect();
        let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = scaled.iter().map(|s| (s - max).exp()).collect();
        let total: f64 = e.iter().sum();
        probs.push(e.into_iter().map(|x| x / total).collect());
    }
    Ok((loss / b as f64, qs, ps, ctx, probs))
}

/// Loss and its analytic gradient with respect to both projections stages,
/// the context residual and alpha. Token vectors are fixed.
pub fn loss_gradient(weights: &EncoderWeights, batch: &FeatureBatch) -> Result<(f64, Gradient)> {
    let w = weights;
    let (h, n) = (w.stage1_dim, w.output_dim);
    let (loss, qs, ps, ctx, probs) = forward(w, batch)?;
    let b = qs.len();
    let mut grad = Gradient::zeros(w);

    // dL/dout for queries and positives.
    let scale = 1.0 / (b as f64 * batch.tau);
    let mut g_q = vec![vec![0.0; n]; b];
    let mut g_p = vec![vec![0.0; n]; b];
    for i in 0..b {
        for k in 0..b {
            let d = (probs[i][k] - if i == k { 1.0 } else { 0.0 }) * scale;
            for t in 0..n {
                g_q[i][t] += d * ps[k].out[t];
                g_p[k][t] += d * qs[i].out[t];
            }
        }
    }

    let mut g_system = vec![0.0; n * n];
    for (enc, g_out) in qs.iter().zip(&g_q).chain(ps.iter().zip(&g_p)) {
        let radial = linalg::dot(&enc.out, g_out);
        let g_z: Vec<f64> = g_out.iter().zip(&enc.out).map(|(g, o)| (g - o * radial) / enc.z_norm).collect();
        let g_u = match (&ctx, &enc.white) {
            (Some(c), Some(white)) => {
                grad.alpha += g_z.iter().zip(white.iter().zip(&enc.u)).map(|(g, (wh, u))| g * (wh - u)).sum::<f64>();
                let g_white: Vec<f64> = g_z.iter().map(|g| w.alpha * g).collect();
                let y = c.chol.solve(&g_white);
                linalg::add_outer(&mut g_system, &y, white, -1.0);
                g_z.iter().zip(&y).map(|(g, yv)| (1.0 - w.alpha) * g + yv).collect()
            }
            _ => g_z,
        };
        linalg::add_outer(&mut grad.stage2_query_projection, &g_u, &enc.stage1, 1.0);
        let g_s = linalg::matvec_t(&w.stage2_query_projection, n, h, &g_u);
        linalg::add_outer(&mut grad.stage1_projection, &g_s, &enc.mean, 1.0);
    }

    if let Some(c) = &ctx {
        let mut g_vp = vec![0.0; n * h];
        for j in 0..c.values.len() {
            let v = &c.values[j];
            let mut g_v = vec![0.0; n];
            for r in 0..n {
                for s in 0..n {
                    g_v[r] += (g_system[r * n + s] + g_system[s * n + r]) * v[s];
                }
            }
            g_v.iter_mut().for_each(|x| *x /= c.denom);
            linalg::add_outer(&mut g_vp, &g_v, &c.units[j], 1.0);
            let g_c = linalg::matvec_t(&c.value_proj, n, h, &g_v);
            let radial = linalg::dot(&c.units[j], &g_c);
            let g_s: Vec<f64> =
                g_c.iter().zip(&c.units[j]).map(|(g, u)| (g - u * radial) / c.stage1_norms[j]).collect();
            linalg::add_outer(&mut grad.stage1_projection, &g_s, &c.means[j], 1.0);
        }
        for (i, g) in g_vp.iter().enumerate() {
            grad.stage2_query_projection[i] += w.context_scale * g;
            grad.stage2_context_projection[i] += g;
        }
    }
    Ok((loss, grad))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Documents in the proxy context on context steps.
    pub context_size: usize,
    pub tau: f64,
    pub seed: u64,
    pub pretrain_corpus: String,
    pub encoder: EncoderConfig,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            steps: 500,
            learning_rate: 0.05,
            batch_size: 32,
            context_size: 32,
            tau: 0.05,
            seed: 0,
            pretrain_corpus: String::new(),
            encoder: EncoderConfig::default(),
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Argument("steps must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Argument("learning_rate must be positive".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Argument("batch_size must be at least 2".into()));
        }
        if !(self.tau > 0.0) {
            return Err(Error::Argument("tau must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub loss: f64,
    pub gradient_norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedEncoder {
    pub weights: EncoderWeights,
    pub log: Vec<LogRow>,
    /// Loss on the first batch before and after training.
    pub first_batch_loss: (f64, f64),
}

/// Splits a document's tokens into a query half and a positive half.
pub fn halve(doc: &Document) -> Option<(String, String)> {
    let tokens = tokenize(&doc.text);
    if tokens.len() < 2 {
        return None;
    }
    let mid = tokens.len() / 2;
    Some((tokens[..mid].join(" "), tokens[mid..].join(" ")))
}

struct Pool {
    queries: Vec<Vec<f64>>,
    positives: Vec<Vec<f64>>,
    full: Vec<Vec<f64>>,
}

/// Gradient descent on halved documents. Batches are drawn from one source
/// group at a time; on odd steps the rest of that group provides the proxy
/// context, on even steps the context is empty.
pub fn train_toy_encoder(config: &TrainingConfig, pretrain: &Corpus) -> Result<TrainedEncoder> {
    config.validate()?;
    if pretrain.len() < config.batch_size {
        return Err(Error::Argument(format!(
            "pretraining corpus has {} documents, batch size is {}",
            pretrain.len(),
            config.batch_size
        )));
    }
    let mut weights = EncoderWeights::init(&config.encoder, config.seed)?;
    let emb = weights.token_embedder();
    let mut memo: std::collections::HashMap<String, Vec<f64>> = std::collections::HashMap::new();
    let mut mean_of = |text: &str, id: &str| -> Result<Vec<f64>> {
        let tokens = tokenize(text);
        if tokens.is_empty() {
            return Err(Error::Encoding { doc_id: id.to_string(), msg: "no tokens".into() });
        }
        let mut acc = vec![0.0; emb.dim];
        for t in &tokens {
            let v = memo.entry(t.clone()).or_insert_with(|| emb.embed(t));
            acc.iter_mut().zip(v.iter()).for_each(|(a, x)| *a += x);
        }
        acc.iter_mut().for_each(|a| *a /= tokens.len() as f64);
        Ok(acc)
    };

    let mut groups: BTreeMap<String, Pool> = BTreeMap::new();
    for doc in &pretrain.documents {
        let Some((q, p)) = halve(doc) else { continue };
        let pool = groups
            .entry(doc.source.clone().unwrap_or_default())
            .or_insert_with(|| Pool { queries: Vec::new(), positives: Vec::new(), full: Vec::new() });
        pool.queries.push(mean_of(&apply_prefix(TaskPrefix::SearchQuery, &q), &doc.id)?);
        pool.positives.push(mean_of(&apply_prefix(TaskPrefix::SearchDocument, &p), &doc.id)?);
        pool.full.push(mean_of(&doc.text, &doc.id)?);
    }
    let pools: Vec<Pool> = groups.into_values().filter(|p| p.queries.len() >= 2).collect();
    if pools.is_empty() {
        return Err(Error::Argument("no source group has two usable documents".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let draw = |step: usize, rng: &mut ChaCha8Rng| -> FeatureBatch {
        let pool = &pools[rng.gen_range(0..pools.len())];
        let mut order: Vec<usize> = (0..pool.queries.len()).collect();
        order.shuffle(rng);
        let b = config.batch_size.min(order.len());
        let (batch, rest) = order.split_at(b);
        let context = if step % 2 == 1 {
            rest.iter().take(config.context_size).map(|&i| pool.full[i].clone()).collect()
        } else {
            Vec::new()
        };
        FeatureBatch {
            queries: batch.iter().map(|&i| pool.queries[i].clone()).collect(),
            positives: batch.iter().map(|&i| pool.positives[i].clone()).collect(),
            context,
            tau: config.tau,
        }
    };

    let mut log = Vec::with_capacity(config.steps);
    let mut first = None;
    for step in 0..config.steps {
        let batch = draw(step, &mut rng);
        let (loss, grad) = loss_gradient(&weights, &batch)?;
        if !loss.is_finite() {
            return Err(Error::Divergence { step, loss });
        }
        let gradient_norm = grad.norm();
        log.push(LogRow { step, loss, gradient_norm });
        if first.is_none() {
            first = Some((batch, loss));
        }
        let lr = config.learning_rate;
        let update = |p: &mut Vec<f64>, g: &[f64]| p.iter_mut().zip(g).for_each(|(x, d)| *x -= lr * d);
        update(&mut weights.stage1_projection, &grad.stage1_projection);
        update(&mut weights.stage2_query_projection, &grad.stage2_query_projection);
        update(&mut weights.stage2_context_projection, &grad.stage2_context_projection);
        weights.alpha = (weights.alpha - lr * grad.alpha).clamp(0.0, 1.0);
        if weights.stage1_projection.iter().any(|x| !x.is_finite()) {
            return Err(Error::Divergence { step, loss: f64::NAN });
        }
    }
    let (first_batch, initial) = first.expect("at least one step");
    let last = batch_loss(&weights, &first_batch).map_err(|_| Error::Divergence { step: config.steps, loss: f64::NAN })?;
    weights.frozen = true;
    weights.validate()?;
    Ok(TrainedEncoder { weights, log, first_batch_loss: (initial, last) })
}

pub fn write_training_log(path: &Path, log: &[LogRow]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    for row in log {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
