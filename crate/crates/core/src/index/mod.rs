//! Inverted index of routed token vectors, one posting list per lexical key.
//!
//! Each entry stores the document's dense id, the original routing weight and
//! the pre-scaled vector `w·v`. Keeping the weight lets an index be pruned to
//! a higher threshold later without re-encoding the corpus. Sequence-level
//! vectors live in a dense per-document store that plays the role of the
//! reserved semantic key.

mod format;
mod stats;

use std::collections::HashSet;

use rayon::prelude::*;

use crate::error::{check_dim, Error, Result};
use crate::scoring::{EncodedDocument, Scheme};

pub use format::{load_index, save_index};
pub use stats::{index_stats, IndexStats};

/// Stored vectors of one posting list.
#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    /// `len × dim` fp32 values.
    Dense(Vec<f32>),
    /// `len × num_subspaces` product-quantization codes.
    Codes(Vec<u8>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PostingList {
    pub doc_ids: Vec<u32>,
    pub weights: Vec<f32>,
    pub payload: Payload,
}

impl PostingList {
    pub fn len(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.doc_ids.is_empty()
    }

    /// Scaled vector of entry `i` when the list is not quantized.
    pub fn dense_vector(&self, i: usize, dim: usize) -> Option<&[f32]> {
        match &self.payload {
            Payload::Dense(v) => v.get(i * dim..(i + 1) * dim),
            Payload::Codes(_) => None,
        }
    }

    /// Keeps entries whose weight is strictly above `tau`.
    fn retain_above(&self, tau: f32, stride: usize) -> PostingList {
        let keep: Vec<usize> = (0..self.len()).filter(|&i| self.weights[i] > tau).collect();
        let payload = match &self.payload {
            Payload::Dense(v) => Payload::Dense(
                keep.iter()
                    .flat_map(|&i| v[i * stride..(i + 1) * stride].iter().copied())
                    .collect(),
            ),
            Payload::Codes(c) => Payload::Codes(
                keep.iter()
                    .flat_map(|&i| c[i * stride..(i + 1) * stride].iter().copied())
                    .collect(),
            ),
        };
        PostingList {
            doc_ids: keep.iter().map(|&i| self.doc_ids[i]).collect(),
            weights: keep.iter().map(|&i| self.weights[i]).collect(),
            payload,
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct IndexMeta {
    pub dim: usize,
    pub cls_dim: usize,
    pub key_count: usize,
    pub tau: f32,
    pub doc_count: usize,
    pub scheme: Scheme,
    /// Set when posting payloads are PQ codes.
    pub quantized_subspaces: Option<usize>,
}

/// Route weights of every corpus token that survived pruning, used for the
/// activated-keys histogram. `route_counts[t]` weights belong to token `t`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TokenActivations {
    pub route_counts: Vec<u8>,
    pub weights: Vec<f32>,
}

impl TokenActivations {
    fn retain_above(&self, tau: f32) -> Self {
        let mut out = TokenActivations {
            route_counts: Vec::with_capacity(self.route_counts.len()),
            weights: Vec::new(),
        };
        let mut offset = 0;
        for &n in &self.route_counts {
            let ws = &self.weights[offset..offset + n as usize];
            offset += n as usize;
            let before = out.weights.len();
            out.weights.extend(ws.iter().copied().filter(|&w| w > tau));
            out.route_counts.push((out.weights.len() - before) as u8);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InvertedIndex {
    pub meta: IndexMeta,
    pub postings: Vec<PostingList>,
    /// `doc_count × cls_dim` sequence-level vectors, when built with cls.
    pub cls_store: Option<Vec<f32>>,
    /// External id of each dense document id.
    pub doc_ids: Vec<String>,
    pub activations: Option<TokenActivations>,
}

impl InvertedIndex {
    pub fn total_entries(&self) -> usize {
        self.postings.iter().map(PostingList::len).sum()
    }

    pub fn posting(&self, key: u32) -> Option<&PostingList> {
        self.postings.get(key as usize)
    }

    pub fn cls_vector(&self, doc: u32) -> Option<&[f32]> {
        let d = self.meta.cls_dim;
        self.cls_store
            .as_ref()
            .and_then(|s| s.get(doc as usize * d..(doc as usize + 1) * d))
    }

    /// Width of one entry's payload: vector dim, or number of codes.
    pub(crate) fn payload_stride(&self) -> usize {
        self.meta.quantized_subspaces.unwrap_or(self.meta.dim)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IndexConfig {
    pub key_count: usize,
    pub tau: f32,
    pub with_cls: bool,
    pub scheme: Scheme,
}

impl IndexConfig {
    pub fn new(key_count: usize, tau: f32) -> Self {
        Self {
            key_count,
            tau,
            with_cls: false,
            scheme: Scheme::Dynamic,
        }
    }

    pub fn with_cls(mut self, with_cls: bool) -> Self {
        self.with_cls = with_cls;
        self
    }

    pub fn scheme(mut self, scheme: Scheme) -> Self {
        self.scheme = scheme;
        self
    }
}

fn check_tau(tau: f32) -> Result<()> {
    if tau.is_nan() || tau < 0.0 {
        return Err(Error::contract(format!("pruning threshold must be >= 0, got {tau}")));
    }
    Ok(())
}

struct ChunkOutput {
    /// (key, doc, weight) in document, token, route order.
    entries: Vec<(u32, u32, f32)>,
    vectors: Vec<f32>,
    activations: TokenActivations,
}

fn index_chunk(docs: &[EncodedDocument], first_doc: u32, dim: usize, cfg: &IndexConfig) -> Result<ChunkOutput> {
    let mut out = ChunkOutput {
        entries: Vec::new(),
        vectors: Vec::new(),
        activations: TokenActivations::default(),
    };
    for (offset, doc) in docs.iter().enumerate() {
        let doc_id = first_doc + offset as u32;
        for token in &doc.tokens {
            check_dim(dim, token.vector.len())?;
            if token.routes.len() > u8::MAX as usize {
                return Err(Error::contract("a token may carry at most 255 routes"));
            }
            let before = out.activations.weights.len();
            for route in &token.routes {
                if route.key as usize >= cfg.key_count {
                    return Err(Error::contract(format!(
                        "route key {} out of range for {} keys (document {:?})",
                        route.key, cfg.key_count, doc.id
                    )));
                }
                if !route.weight.is_finite() {
                    return Err(Error::contract(format!("non-finite route weight in {:?}", doc.id)));
                }
                if route.weight > cfg.tau {
                    out.entries.push((route.key, doc_id, route.weight));
                    out.vectors.extend(token.vector.iter().map(|x| route.weight * x));
                    out.activations.weights.push(route.weight);
                }
            }
            let kept = out.activations.weights.len() - before;
            out.activations.route_counts.push(kept as u8);
        }
    }
    Ok(out)
}

const BUILD_CHUNK: usize = 64;

/// Builds the index, keeping a route iff its weight is strictly above `tau`.
///
/// Documents are processed in parallel chunks and merged in document order,
/// so the result does not depend on the thread count.
pub fn build_index(docs: &[EncodedDocument], cfg: IndexConfig) -> Result<InvertedIndex> {
    check_tau(cfg.tau)?;
    if cfg.key_count == 0 {
        return Err(Error::contract("key_count must be >= 1"));
    }
    let doc_count = u32::try_from(docs.len()).map_err(|_| Error::contract("too many documents"))?;
    let mut seen = HashSet::with_capacity(docs.len());
    for d in docs {
        if !seen.insert(d.id.as_str()) {
            return Err(Error::contract(format!("duplicate document id {:?}", d.id)));
        }
    }
    let dim = docs.iter().find_map(EncodedDocument::token_dim).unwrap_or(0);

    let (cls_dim, cls_store) = if cfg.with_cls {
        let cls_dim = docs.first().and_then(|d| d.cls.as_ref()).map_or(0, Vec::len);
        let mut store = Vec::with_capacity(docs.len() * cls_dim);
        for d in docs {
            let cls = d.cls.as_ref().ok_or_else(|| {
                Error::contract(format!("document {:?} has no cls vector", d.id))
            })?;
            check_dim(cls_dim, cls.len())?;
            store.extend_from_slice(cls);
        }
        (cls_dim, Some(store))
    } else {
        (0, None)
    };

    let chunks: Vec<ChunkOutput> = docs
        .par_chunks(BUILD_CHUNK)
        .enumerate()
        .map(|(i, chunk)| index_chunk(chunk, (i * BUILD_CHUNK) as u32, dim, &cfg))
        .collect::<Result<_>>()?;

    let mut lists: Vec<(Vec<u32>, Vec<f32>, Vec<f32>)> = vec![Default::default(); cfg.key_count];
    let mut activations = TokenActivations::default();
    for chunk in chunks {
        for (i, &(key, doc, weight)) in chunk.entries.iter().enumerate() {
            let list = &mut lists[key as usize];
            list.0.push(doc);
            list.1.push(weight);
            list.2.extend_from_slice(&chunk.vectors[i * dim..(i + 1) * dim]);
        }
        activations.route_counts.extend(chunk.activations.route_counts);
        activations.weights.extend(chunk.activations.weights);
    }

    Ok(InvertedIndex {
        meta: IndexMeta {
            dim,
            cls_dim,
            key_count: cfg.key_count,
            tau: cfg.tau,
            doc_count: doc_count as usize,
            scheme: cfg.scheme,
            quantized_subspaces: None,
        },
        postings: lists
            .into_iter()
            .map(|(doc_ids, weights, vectors)| PostingList {
                doc_ids,
                weights,
                payload: Payload::Dense(vectors),
            })
            .collect(),
        cls_store,
        doc_ids: docs.iter().map(|d| d.id.clone()).collect(),
        activations: Some(activations),
    })
}

/// Raises the pruning threshold of an existing index. The result equals a
/// fresh build at `tau`.
pub fn prune_index(index: &InvertedIndex, tau: f32) -> Result<InvertedIndex> {
    check_tau(tau)?;
    if tau < index.meta.tau {
        return Err(Error::contract(format!(
            "cannot prune to {tau}: index already built at {}",
            index.meta.tau
        )));
    }
    let stride = index.payload_stride();
    Ok(InvertedIndex {
        meta: IndexMeta {
            tau,
            ..index.meta.clone()
        },
        postings: index
            .postings
            .iter()
            .map(|p| p.retain_above(tau, stride))
            .collect(),
        cls_store: index.cls_store.clone(),
        doc_ids: index.doc_ids.clone(),
        activations: index.activations.as_ref().map(|a| a.retain_above(tau)),
    })
}
