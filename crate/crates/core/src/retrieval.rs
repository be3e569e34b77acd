//! Query pipeline over an inverted index: query routing, token-level
//! retrieval over posting lists, scatter-max/scatter-add merging into
//! per-document scores, and top-k sorting. Each stage is timed separately.

use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{check_dim, Error, Result};
use crate::index::{InvertedIndex, Payload};
use crate::quantizer::{decode_u8_into, PqCodebook};
use crate::scoring::{dot, rank_order, scaled, EncodedQuery};

/// Wall time spent in each pipeline stage, in nanoseconds.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct LatencyBreakdown {
    pub routing_ns: u64,
    pub token_retrieval_ns: u64,
    pub scatter_ns: u64,
    pub sort_ns: u64,
}

impl LatencyBreakdown {
    pub fn stage_sum(&self) -> u64 {
        self.routing_ns + self.token_retrieval_ns + self.scatter_ns + self.sort_ns
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchResult {
    /// `(doc_id, score)` by descending score, ascending id on ties.
    pub ranked: Vec<(String, f32)>,
    pub dot_products_used: u64,
    pub latency: LatencyBreakdown,
}

/// Search front end for an immutable index, optionally quantized.
#[derive(Debug, Clone, Copy)]
pub struct Searcher<'a> {
    index: &'a InvertedIndex,
    codebook: Option<&'a PqCodebook>,
    parallel: bool,
}

fn elapsed_ns(t: Instant) -> u64 {
    t.elapsed().as_nanos() as u64
}

impl<'a> Searcher<'a> {
    pub fn new(index: &'a InvertedIndex) -> Self {
        Self {
            index,
            codebook: None,
            parallel: false,
        }
    }

    /// Attaches the codebook needed to score a quantized index.
    pub fn with_codebook(mut self, codebook: &'a PqCodebook) -> Result<Self> {
        check_dim(self.index.meta.dim, codebook.dim())?;
        if let Some(s) = self.index.meta.quantized_subspaces {
            check_dim(s, codebook.num_subspaces())?;
        }
        self.codebook = Some(codebook);
        Ok(self)
    }

    /// Scans the posting lists of different query routes on the rayon pool.
    /// Results are identical to the sequential path.
    pub fn parallel(mut self, parallel: bool) -> Self {
        self.parallel = parallel;
        self
    }

    pub fn index(&self) -> &InvertedIndex {
        self.index
    }

    fn check_query(&self, query: &EncodedQuery, with_cls: bool) -> Result<()> {
        for t in &query.tokens {
            if !t.routes.is_empty() {
                check_dim(self.index.meta.dim, t.vector.len())?;
            }
        }
        if with_cls {
            if self.index.cls_store.is_none() {
                return Err(Error::contract("index was built without a cls store"));
            }
            let cls = query
                .cls
                .as_ref()
                .ok_or_else(|| Error::contract("query has no cls vector"))?;
            check_dim(self.index.meta.cls_dim, cls.len())?;
        }
        if self.index.meta.quantized_subspaces.is_some() && self.codebook.is_none() {
            return Err(Error::contract("quantized index needs a codebook"));
        }
        Ok(())
    }

    /// Exact number of dot products `search` performs for this query.
    pub fn count_dot_products(&self, query: &EncodedQuery, with_cls: bool) -> u64 {
        let tokens: u64 = query
            .tokens
            .iter()
            .flat_map(|t| &t.routes)
            .map(|r| self.index.posting(r.key).map_or(0, |p| p.len() as u64))
            .sum();
        tokens + if with_cls { self.index.meta.doc_count as u64 } else { 0 }
    }

    /// Scores one query route against its posting list, keeping the best
    /// score per document.
    fn scan(&self, key: u32, u: &[f32]) -> Vec<(u32, f32)> {
        let Some(list) = self.index.posting(key) else {
            return Vec::new();
        };
        let dim = self.index.meta.dim;
        let mut hits: Vec<(u32, f32)> = Vec::new();
        let mut push = |doc: u32, s: f32| match hits.last_mut() {
            Some((d, best)) if *d == doc => {
                if s > *best {
                    *best = s;
                }
            }
            _ => hits.push((doc, s)),
        };
        match &list.payload {
            Payload::Dense(v) => {
                for (&doc, row) in list.doc_ids.iter().zip(v.chunks_exact(dim.max(1))) {
                    push(doc, dot(u, row));
                }
            }
            Payload::Codes(codes) => {
                let cb = self.codebook.expect("checked in check_query");
                let stride = cb.num_subspaces();
                let mut buf = vec![0.0f32; dim];
                for (&doc, row) in list.doc_ids.iter().zip(codes.chunks_exact(stride)) {
                    decode_u8_into(row, cb, &mut buf);
                    push(doc, dot(u, &buf));
                }
            }
        }
        hits
    }

    pub fn search(&self, query: &EncodedQuery, top_k: usize, with_cls: bool) -> Result<SearchResult> {
        if top_k == 0 {
            return Err(Error::contract("top_k must be >= 1"));
        }
        self.check_query(query, with_cls)?;
        let mut latency = LatencyBreakdown::default();

        let t = Instant::now();
        let routes: Vec<(u32, Vec<f32>)> = query
            .tokens
            .iter()
            .flat_map(|tok| tok.routes.iter().map(move |r| (r.key, scaled(&tok.vector, r.weight))))
            .collect();
        latency.routing_ns = elapsed_ns(t);

        let t = Instant::now();
        let hits: Vec<Vec<(u32, f32)>> = if self.parallel {
            routes.par_iter().map(|(k, u)| self.scan(*k, u)).collect()
        } else {
            routes.iter().map(|(k, u)| self.scan(*k, u)).collect()
        };
        latency.token_retrieval_ns = elapsed_ns(t);
        let mut dots: u64 = routes
            .iter()
            .map(|(k, _)| self.index.posting(*k).map_or(0, |p| p.len() as u64))
            .sum();

        let t = Instant::now();
        let n = self.index.meta.doc_count;
        let mut scores = vec![0.0f32; n];
        let mut touched = vec![false; n];
        for route_hits in &hits {
            for &(doc, s) in route_hits {
                scores[doc as usize] += s;
                touched[doc as usize] = true;
            }
        }
        if with_cls {
            let q_cls = query.cls.as_deref().expect("checked in check_query");
            for (doc, score) in scores.iter_mut().enumerate() {
                let d_cls = self.index.cls_vector(doc as u32).expect("cls store sized by doc_count");
                *score += dot(q_cls, d_cls);
            }
            touched.iter_mut().for_each(|x| *x = true);
            dots += n as u64;
        }
        latency.scatter_ns = elapsed_ns(t);

        let t = Instant::now();
        let ids = &self.index.doc_ids;
        let order = |a: &(u32, f32), b: &(u32, f32)| {
            b.1.total_cmp(&a.1).then_with(|| ids[a.0 as usize].cmp(&ids[b.0 as usize]))
        };
        let mut candidates: Vec<(u32, f32)> = (0..n)
            .filter(|&d| touched[d])
            .map(|d| (d as u32, scores[d]))
            .collect();
        if candidates.len() > top_k {
            candidates.select_nth_unstable_by(top_k - 1, order);
            candidates.truncate(top_k);
        }
        candidates.sort_unstable_by(order);
        let ranked: Vec<(String, f32)> = candidates
            .into_iter()
            .map(|(d, s)| (ids[d as usize].clone(), s))
            .collect();
        debug_assert!(ranked.windows(2).all(|w| rank_order(&w[0], &w[1]).is_le()));
        latency.sort_ns = elapsed_ns(t);

        Ok(SearchResult {
            ranked,
            dot_products_used: dots,
            latency,
        })
    }
}

/// Searches a dense index.
pub fn search(query: &EncodedQuery, index: &InvertedIndex, top_k: usize, with_cls: bool) -> Result<SearchResult> {
    Searcher::new(index).search(query, top_k, with_cls)
}

/// Upper bound on dot products: posting sizes of every query route key, plus
/// one per document for the cls term.
pub fn count_dot_products(query: &EncodedQuery, index: &InvertedIndex, with_cls: bool) -> u64 {
    Searcher::new(index).count_dot_products(query, with_cls)
}

/// Outcome of comparing index search with exhaustive scoring.
#[derive(Debug, Clone, Default, Serialize)]
pub struct OracleReport {
    pub queries: usize,
    pub compared_ranks: usize,
    pub max_relative_error: f64,
    /// Human-readable description of every disagreement.
    pub mismatches: Vec<String>,
}

impl OracleReport {
    pub fn passed(&self) -> bool {
        self.mismatches.is_empty()
    }
}

fn rel_err(a: f32, b: f32) -> f64 {
    let (a, b) = (a as f64, b as f64);
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Checks `search` against dynamic-scheme brute force over the documents the
/// index was built from. Routes at or below the index threshold are dropped
/// first; without the cls term only documents sharing a key with the query
/// can be retrieved, so the brute-force corpus is restricted to those.
pub fn verify_against_brute_force(
    index: &InvertedIndex,
    docs: &[crate::scoring::EncodedDocument],
    queries: &[EncodedQuery],
    top_k: usize,
    with_cls: bool,
    rel_tol: f64,
) -> Result<OracleReport> {
    if index.meta.quantized_subspaces.is_some() {
        return Err(Error::contract("oracle check needs an unquantized index"));
    }
    check_dim(index.meta.doc_count, docs.len())?;
    let pruned: Vec<_> = docs.iter().map(|d| d.pruned(index.meta.tau)).collect();
    let searcher = Searcher::new(index);
    let mut report = OracleReport {
        queries: queries.len(),
        ..Default::default()
    };
    for q in queries {
        let got = searcher.search(q, top_k, with_cls)?.ranked;
        let corpus: Vec<_> = pruned
            .iter()
            .filter(|d| with_cls || crate::scoring::shares_key(q, d))
            .cloned()
            .collect();
        let want = if corpus.is_empty() {
            Vec::new()
        } else {
            crate::scoring::brute_force_rank(q, &corpus, top_k, crate::scoring::Scheme::Dynamic, with_cls)?
        };
        if got.len() != want.len() {
            report
                .mismatches
                .push(format!("{}: {} results, expected {}", q.id, got.len(), want.len()));
            continue;
        }
        for (rank, (g, w)) in got.iter().zip(&want).enumerate() {
            report.compared_ranks += 1;
            let err = rel_err(g.1, w.1);
            report.max_relative_error = report.max_relative_error.max(err);
            // equal-score documents may swap places under float rounding
            let same_doc = g.0 == w.0 || want.iter().any(|x| x.0 == g.0 && rel_err(x.1, g.1) <= rel_tol);
            if err > rel_tol || !same_doc {
                report.mismatches.push(format!(
                    "{} rank {}: got ({}, {}), expected ({}, {})",
                    q.id,
                    rank + 1,
                    g.0,
                    g.1,
                    w.0,
                    w.1
                ));
            }
        }
    }
    Ok(report)
}

/// Per-stage averages over a query set, from the fastest of several trials.
#[derive(Debug, Clone, Serialize)]
pub struct LatencyReport {
    pub queries: usize,
    pub trials: usize,
    pub routing_ns: f64,
    pub token_retrieval_ns: f64,
    pub scatter_ns: f64,
    pub sort_ns: f64,
    pub total_ns: f64,
    /// Average total latency of every trial, in run order.
    pub trial_totals_ns: Vec<f64>,
}

/// Runs every query one at a time (batch size 1) for `trials` rounds and
/// reports the round with the lowest average total latency.
pub fn measure_latency(
    queries: &[EncodedQuery],
    searcher: &Searcher<'_>,
    top_k: usize,
    trials: usize,
    with_cls: bool,
) -> Result<LatencyReport> {
    if queries.is_empty() {
        return Err(Error::contract("latency measurement needs at least one query"));
    }
    if trials == 0 {
        return Err(Error::contract("trials must be >= 1"));
    }
    let n = queries.len() as f64;
    let mut best: Option<LatencyReport> = None;
    let mut trial_totals = Vec::with_capacity(trials);
    for _ in 0..trials {
        let mut sums = [0u64; 5];
        for q in queries {
            let t = Instant::now();
            let r = searcher.search(q, top_k, with_cls)?;
            let total = elapsed_ns(t);
            let l = r.latency;
            sums[0] += l.routing_ns;
            sums[1] += l.token_retrieval_ns;
            sums[2] += l.scatter_ns;
            sums[3] += l.sort_ns;
            sums[4] += total;
        }
        let report = LatencyReport {
            queries: queries.len(),
            trials,
            routing_ns: sums[0] as f64 / n,
            token_retrieval_ns: sums[1] as f64 / n,
            scatter_ns: sums[2] as f64 / n,
            sort_ns: sums[3] as f64 / n,
            total_ns: sums[4] as f64 / n,
            trial_totals_ns: Vec::new(),
        };
        trial_totals.push(report.total_ns);
        if best.as_ref().is_none_or(|b| report.total_ns < b.total_ns) {
            best = Some(report);
        }
    }
    let mut best = best.expect("trials >= 1");
    best.trial_totals_ns = trial_totals;
    Ok(best)
}
