//! Seeded synthetic corpora: clustered Gaussian token vectors with Zipfian
//! token ids, queries sampled from a source document, and graded judgments.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Zipf};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::Qrels;
use crate::router::{RoutedToken, RouterParams};
use crate::scoring::{EncodedDocument, EncodedQuery, EncodedSequence};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub docs: usize,
    pub tokens_per_doc: usize,
    pub queries: usize,
    pub query_tokens: usize,
    pub dim: usize,
    pub vocab: usize,
    pub seed: u64,
    pub cluster_count: usize,
    /// Zipf exponent of the token-id distribution; 0 is uniform.
    pub skew: f64,
    /// Standard deviation of per-token noise around the token prototype.
    pub noise: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            docs: 100,
            tokens_per_doc: 30,
            queries: 20,
            query_tokens: 8,
            dim: 8,
            vocab: 50,
            seed: 0,
            cluster_count: 10,
            skew: 1.0,
            noise: 0.3,
        }
    }
}

impl SyntheticConfig {
    fn validate(&self) -> Result<()> {
        let sizes = [
            ("docs", self.docs),
            ("tokens_per_doc", self.tokens_per_doc),
            ("query_tokens", self.query_tokens),
            ("dim", self.dim),
            ("vocab", self.vocab),
            ("cluster_count", self.cluster_count),
        ];
        for (name, v) in sizes {
            if v == 0 {
                return Err(Error::contract(format!("synthetic {name} must be >= 1")));
            }
        }
        if self.vocab > u32::MAX as usize {
            return Err(Error::contract("synthetic vocab too large"));
        }
        if !(self.skew >= 0.0 && self.skew.is_finite()) {
            return Err(Error::contract("synthetic skew must be finite and >= 0"));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::contract("synthetic noise must be finite and >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    pub docs: Vec<EncodedDocument>,
    pub queries: Vec<EncodedQuery>,
    /// Each query judges its source document with grade 2.
    pub qrels: Qrels,
    /// Mean vector of each token id.
    pub prototypes: Vec<Vec<f32>>,
    /// Source document index of each query.
    pub sources: Vec<usize>,
}

fn gaussian(rng: &mut ChaCha8Rng, dim: usize, scale: f64) -> Vec<f64> {
    (0..dim)
        .map(|_| {
            let x: f64 = StandardNormal.sample(rng);
            scale * x
        })
        .collect()
}

fn with_cls(id: String, tokens: Vec<RoutedToken>) -> EncodedSequence {
    let dim = tokens.first().map_or(0, |t| t.vector.len());
    let mut cls = vec![0.0f32; dim];
    for t in &tokens {
        for (c, v) in cls.iter_mut().zip(&t.vector) {
            *c += v;
        }
    }
    let n = tokens.len().max(1) as f32;
    cls.iter_mut().for_each(|c| *c /= n);
    EncodedSequence {
        id,
        tokens,
        cls: Some(cls),
    }
}

/// Generates a corpus, queries and judgments. Token id `t` belongs to
/// cluster `t % cluster_count`; its prototype is the cluster center plus a
/// smaller per-id offset, and each occurrence adds `noise`.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<SyntheticData> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let centers: Vec<Vec<f64>> = (0..cfg.cluster_count)
        .map(|_| gaussian(&mut rng, cfg.dim, 1.0))
        .collect();
    let prototypes: Vec<Vec<f64>> = (0..cfg.vocab)
        .map(|t| {
            let offset = gaussian(&mut rng, cfg.dim, 0.5);
            centers[t % cfg.cluster_count]
                .iter()
                .zip(offset)
                .map(|(c, o)| c + o)
                .collect()
        })
        .collect();
    let zipf = Zipf::new(cfg.vocab as f64, cfg.skew).map_err(|e| Error::contract(e.to_string()))?;

    let token = |rng: &mut ChaCha8Rng, tid: usize, noise: f64| {
        let v: Vec<f32> = prototypes[tid]
            .iter()
            .zip(gaussian(rng, cfg.dim, noise))
            .map(|(p, n)| (p + n) as f32)
            .collect();
        RoutedToken::unrouted(tid as u32, v)
    };

    let mut docs = Vec::with_capacity(cfg.docs);
    for i in 0..cfg.docs {
        let tokens = (0..cfg.tokens_per_doc)
            .map(|_| {
                let tid = (zipf.sample(&mut rng) as usize - 1).min(cfg.vocab - 1);
                token(&mut rng, tid, cfg.noise)
            })
            .collect();
        docs.push(with_cls(format!("d{i}"), tokens));
    }

    let mut queries = Vec::with_capacity(cfg.queries);
    let mut sources = Vec::with_capacity(cfg.queries);
    let mut qrels = Qrels::new();
    for i in 0..cfg.queries {
        let src = rng.random_range(0..cfg.docs);
        let tokens = (0..cfg.query_tokens)
            .map(|_| {
                let j = rng.random_range(0..cfg.tokens_per_doc);
                let base = &docs[src].tokens[j];
                let v = base
                    .vector
                    .iter()
                    .zip(gaussian(&mut rng, cfg.dim, cfg.noise * 0.5))
                    .map(|(b, n)| b + n as f32)
                    .collect();
                RoutedToken::unrouted(base.token_id, v)
            })
            .collect();
        let qid = format!("q{i}");
        qrels.entry(qid.clone()).or_default().insert(format!("d{src}"), 2);
        queries.push(with_cls(qid, tokens));
        sources.push(src);
    }

    Ok(SyntheticData {
        docs,
        queries,
        qrels,
        prototypes: prototypes
            .into_iter()
            .map(|p| p.into_iter().map(|x| x as f32).collect())
            .collect(),
        sources,
    })
}

/// A router initialized from token prototypes with one key per token id:
/// `W[:, k] = gain · p_k / |p_k|` and `b_k = bias`. Tokens land on the keys
/// of their own and similar ids, so key loads follow token frequencies.
pub fn lexical_router(prototypes: &[Vec<f32>], gain: f32, bias: f32) -> Result<RouterParams> {
    let keys = prototypes.len();
    let dim = prototypes
        .first()
        .map(Vec::len)
        .ok_or_else(|| Error::contract("lexical router needs at least one prototype"))?;
    let mut weights = vec![0.0f32; dim * keys];
    for (k, p) in prototypes.iter().enumerate() {
        crate::error::check_dim(dim, p.len())?;
        let norm = p.iter().map(|x| x * x).sum::<f32>().sqrt().max(f32::MIN_POSITIVE);
        for (c, x) in p.iter().enumerate() {
            weights[c * keys + k] = gain * x / norm;
        }
    }
    RouterParams::new(dim, keys, weights, vec![bias; keys])
}
