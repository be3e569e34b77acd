//! Gradient descent on the router alone over a frozen synthetic corpus.

use std::io::Write;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{total_loss, LinearRouter, LossTerms, LossWeights, RoutingLimits, TokenMatrix, TrainingBatch};
use crate::error::{Error, Result};
use crate::router::RouterParams;
use crate::scoring::EncodedSequence;
use crate::synthetic::{generate_synthetic, lexical_router, SyntheticConfig, SyntheticData};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyTrainConfig {
    pub data: SyntheticConfig,
    pub steps: usize,
    pub learning_rate: f64,
    pub alpha: f64,
    pub beta: f64,
    /// Seeds negatives and batch sampling; the corpus has its own seed in
    /// `data`.
    pub seed: u64,
    /// Queries per step; at least the query count means full-batch descent.
    pub batch_size: usize,
    pub negatives: usize,
    pub query_keys: usize,
    pub doc_keys: usize,
    /// Multiplies every frozen token vector before training.
    pub vector_scale: f32,
    /// Scale and offset of the prototype-based router initialization.
    pub init_gain: f32,
    pub init_bias: f32,
}

impl Default for ToyTrainConfig {
    fn default() -> Self {
        let w = LossWeights::default();
        let lim = RoutingLimits::default();
        Self {
            data: SyntheticConfig {
                docs: 200,
                tokens_per_doc: 10,
                queries: 24,
                query_tokens: 4,
                dim: 8,
                vocab: 30,
                cluster_count: 3,
                skew: 1.0,
                noise: 0.3,
                seed: 0,
            },
            steps: 200,
            learning_rate: 0.2,
            alpha: w.alpha,
            beta: w.beta,
            seed: 0,
            batch_size: 24,
            negatives: 2,
            query_keys: lim.query_keys,
            doc_keys: lim.doc_keys,
            vector_scale: 0.3,
            init_gain: 1.0 / 0.3,
            init_bias: -2.0,
        }
    }
}

impl ToyTrainConfig {
    pub fn weights(&self) -> Result<LossWeights> {
        LossWeights::new(self.alpha, self.beta)
    }

    pub fn limits(&self) -> RoutingLimits {
        RoutingLimits {
            query_keys: self.query_keys,
            doc_keys: self.doc_keys,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TraceRecord {
    pub step: usize,
    #[serde(flatten)]
    pub terms: LossTerms,
    /// Max over mean posting size across keys after routing every corpus
    /// token with the current router.
    pub balance_ratio: f64,
    pub deactivated_tokens: usize,
}

#[derive(Debug, Clone)]
pub struct ToyTrainResult {
    pub params: RouterParams,
    /// One record per step, evaluated before that step's update.
    pub trace: Vec<TraceRecord>,
    pub final_balance_ratio: f64,
    pub final_deactivated_tokens: usize,
}

/// Posting-size balance and deactivation count of the corpus under `router`.
pub fn routing_summary(docs: &[EncodedSequence], router: &LinearRouter, doc_keys: usize) -> (f64, usize) {
    let mut counts = vec![0usize; router.key_count];
    let mut deactivated = 0;
    for t in docs.iter().flat_map(|d| &d.tokens) {
        let x: Vec<f64> = t.vector.iter().map(|&v| v as f64).collect();
        let z = router.logits(&x);
        let mut active: Vec<usize> = (0..z.len()).filter(|&k| z[k] > 0.0).collect();
        if active.is_empty() {
            deactivated += 1;
            continue;
        }
        active.sort_by(|&a, &b| z[b].total_cmp(&z[a]).then(a.cmp(&b)));
        for &k in active.iter().take(doc_keys) {
            counts[k] += 1;
        }
    }
    let total: usize = counts.iter().sum();
    let ratio = if total == 0 {
        0.0
    } else {
        let mean = total as f64 / counts.len() as f64;
        *counts.iter().max().unwrap() as f64 / mean
    };
    (ratio, deactivated)
}

fn matrix(seq: &EncodedSequence) -> TokenMatrix {
    seq.tokens
        .iter()
        .map(|t| t.vector.iter().map(|&v| v as f64).collect())
        .collect()
}

/// Fixed negatives for every query, drawn once per run.
fn draw_negatives(data: &SyntheticData, count: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    data.sources
        .iter()
        .map(|&src| {
            (0..count)
                .map(|_| {
                    let d = rng.random_range(0..data.docs.len());
                    if d == src && data.docs.len() > 1 {
                        (d + 1) % data.docs.len()
                    } else {
                        d
                    }
                })
                .collect()
        })
        .collect()
}

fn draw_batch(data: &SyntheticData, negatives: &[Vec<usize>], size: usize, rng: &mut ChaCha8Rng) -> TrainingBatch {
    let mut picks: Vec<usize> = if size >= data.queries.len() {
        (0..data.queries.len()).collect()
    } else {
        sample(rng, data.queries.len(), size).into_vec()
    };
    picks.sort_unstable();
    TrainingBatch {
        queries: picks.iter().map(|&q| matrix(&data.queries[q])).collect(),
        positives: picks.iter().map(|&q| matrix(&data.docs[data.sources[q]])).collect(),
        negatives: picks
            .iter()
            .map(|&q| negatives[q].iter().map(|&d| matrix(&data.docs[d])).collect())
            .collect(),
    }
}

/// The frozen corpus `toy_train` uses: the generated data with every token
/// vector multiplied by `vector_scale`. Prototypes and cls vectors are left
/// unscaled.
pub fn toy_corpus(cfg: &ToyTrainConfig) -> Result<SyntheticData> {
    if !(cfg.vector_scale > 0.0 && cfg.vector_scale.is_finite()) {
        return Err(Error::contract("vector_scale must be positive"));
    }
    let mut data = generate_synthetic(&cfg.data)?;
    if cfg.vector_scale != 1.0 {
        for t in data.docs.iter_mut().chain(&mut data.queries).flat_map(|s| &mut s.tokens) {
            t.vector.iter_mut().for_each(|v| *v *= cfg.vector_scale);
        }
    }
    Ok(data)
}

/// Trains W and b with plain gradient descent. The router starts from the
/// prototype initialization of the generated corpus; token vectors stay
/// fixed. Each query keeps the same negatives for the whole run, and
/// batches depend only on `seed`, so runs that differ only in loss weights
/// see the same data.
pub fn toy_train(cfg: &ToyTrainConfig) -> Result<ToyTrainResult> {
    if cfg.batch_size == 0 || cfg.negatives == 0 {
        return Err(Error::contract("batch_size and negatives must be >= 1"));
    }
    if !(cfg.learning_rate > 0.0 && cfg.learning_rate.is_finite()) {
        return Err(Error::contract("learning_rate must be positive"));
    }
    let weights = cfg.weights()?;
    let limits = cfg.limits();
    let data = toy_corpus(cfg)?;
    if data.queries.is_empty() {
        return Err(Error::contract("toy training needs at least one query"));
    }
    let init = lexical_router(&data.prototypes, cfg.init_gain, cfg.init_bias)?;
    let mut router = LinearRouter::from_params(&init);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let negatives = draw_negatives(&data, cfg.negatives, &mut rng);
    let mut trace = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let batch = draw_batch(&data, &negatives, cfg.batch_size, &mut rng);
        let eval = total_loss(&batch, &router, weights, limits)?;
        if !eval.terms.total.is_finite() {
            return Err(Error::Divergence { step });
        }
        let (balance_ratio, deactivated_tokens) = routing_summary(&data.docs, &router, limits.doc_keys);
        trace.push(TraceRecord {
            step,
            terms: eval.terms,
            balance_ratio,
            deactivated_tokens,
        });
        for (w, g) in router.weights.iter_mut().zip(&eval.grads.weights) {
            *w -= cfg.learning_rate * g;
        }
        for (b, g) in router.bias.iter_mut().zip(&eval.grads.bias) {
            *b -= cfg.learning_rate * g;
        }
        // parameters are stored as f32, so overflowing that range diverges
        if router.weights.iter().chain(&router.bias).any(|v| !(v.abs() <= f32::MAX as f64)) {
            return Err(Error::Divergence { step });
        }
    }

    let (final_balance_ratio, final_deactivated_tokens) = routing_summary(&data.docs, &router, limits.doc_keys);
    let params = if cfg.steps == 0 { init } else { router.to_params()? };
    Ok(ToyTrainResult {
        params,
        trace,
        final_balance_ratio,
        final_deactivated_tokens,
    })
}

/// Writes one JSON object per trace record.
pub fn write_trace<W: Write>(trace: &[TraceRecord], mut out: W) -> Result<()> {
    for rec in trace {
        serde_json::to_writer(&mut out, rec)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}
