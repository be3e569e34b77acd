//! Similarity functions for the four token-routing schemes and a brute-force
//! corpus ranker that serves as the reference for index search.
//!
//! * single-vector: `v_qᵀ v_d` over sequence-level vectors
//! * all-to-all: MaxSim over every query/document token pair
//! * static lexical: MaxSim restricted to equal token ids
//! * dynamic lexical: MaxSim restricted to shared router keys, with each side
//!   scaled by its routing weight

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::router::RoutedToken;

/// A contextualized token vector with its vocabulary id.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenEmbedding {
    pub vector: Vec<f32>,
    pub token_id: u32,
    pub position: u32,
}

/// Read access shared by plain and routed tokens.
pub trait TokenView {
    fn vector(&self) -> &[f32];
    fn token_id(&self) -> u32;
}

impl TokenView for TokenEmbedding {
    fn vector(&self) -> &[f32] {
        &self.vector
    }
    fn token_id(&self) -> u32 {
        self.token_id
    }
}

impl TokenView for RoutedToken {
    fn vector(&self) -> &[f32] {
        &self.vector
    }
    fn token_id(&self) -> u32 {
        self.token_id
    }
}

/// A query or document: routed tokens plus an optional sequence-level vector.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EncodedSequence {
    pub id: String,
    pub tokens: Vec<RoutedToken>,
    pub cls: Option<Vec<f32>>,
}

pub type EncodedQuery = EncodedSequence;
pub type EncodedDocument = EncodedSequence;

impl EncodedSequence {
    /// Token vector width, or `None` for an empty sequence.
    pub fn token_dim(&self) -> Option<usize> {
        self.tokens.first().map(|t| t.vector.len())
    }

    /// Copy with every route of weight `<= tau` removed.
    pub fn pruned(&self, tau: f32) -> EncodedSequence {
        EncodedSequence {
            id: self.id.clone(),
            tokens: self
                .tokens
                .iter()
                .map(|t| RoutedToken {
                    token_id: t.token_id,
                    vector: t.vector.clone(),
                    routes: t.routes.iter().copied().filter(|r| r.weight > tau).collect(),
                })
                .collect(),
            cls: self.cls.clone(),
        }
    }

    pub fn token_embeddings(&self) -> Vec<TokenEmbedding> {
        self.tokens
            .iter()
            .enumerate()
            .map(|(i, t)| TokenEmbedding {
                vector: t.vector.clone(),
                token_id: t.token_id,
                position: i as u32,
            })
            .collect()
    }
}

/// True when some query route key also appears among the document's routes.
pub fn shares_key(query: &EncodedQuery, doc: &EncodedDocument) -> bool {
    query.tokens.iter().flat_map(|t| &t.routes).any(|qr| {
        doc.tokens
            .iter()
            .flat_map(|t| &t.routes)
            .any(|dr| dr.key == qr.key)
    })
}

#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub(crate) fn scaled(v: &[f32], w: f32) -> Vec<f32> {
    v.iter().map(|x| w * x).collect()
}

pub fn score_single_vector(vq: &[f32], vd: &[f32]) -> Result<f32> {
    check_dim(vq.len(), vd.len())?;
    Ok(dot(vq, vd))
}

/// `Σ_i max_j v_qiᵀ v_dj`.
pub fn score_all_to_all<Q: TokenView, D: TokenView>(q: &[Q], d: &[D]) -> Result<f32> {
    if d.is_empty() {
        return Err(Error::contract("all-to-all scoring needs a non-empty document"));
    }
    let mut total = 0.0f32;
    for qt in q {
        let mut best = f32::NEG_INFINITY;
        for dt in d {
            check_dim(qt.vector().len(), dt.vector().len())?;
            best = best.max(dot(qt.vector(), dt.vector()));
        }
        total += best;
    }
    Ok(total)
}

fn cls_term(with_cls: bool, q_cls: Option<&[f32]>, d_cls: Option<&[f32]>) -> Result<f32> {
    if !with_cls {
        return Ok(0.0);
    }
    match (q_cls, d_cls) {
        (Some(q), Some(d)) => score_single_vector(q, d),
        _ => Err(Error::contract(
            "sequence-level scoring requested but a cls vector is missing",
        )),
    }
}

/// Exact-match MaxSim; a query token with no same-id document token adds 0.
/// With `with_cls`, the sequence-level dot product is added.
pub fn score_static_lexical<Q: TokenView, D: TokenView>(
    q: &[Q],
    d: &[D],
    with_cls: bool,
    q_cls: Option<&[f32]>,
    d_cls: Option<&[f32]>,
) -> Result<f32> {
    let mut total = 0.0f32;
    for qt in q {
        let mut best: Option<f32> = None;
        for dt in d.iter().filter(|dt| dt.token_id() == qt.token_id()) {
            check_dim(qt.vector().len(), dt.vector().len())?;
            let s = dot(qt.vector(), dt.vector());
            best = Some(best.map_or(s, |b| b.max(s)));
        }
        if let Some(b) = best {
            total += b;
        }
    }
    Ok(total + cls_term(with_cls, q_cls, d_cls)?)
}

/// Dynamic lexical routing score. For every query route `(key, w_q)` the
/// best `(w_q v_q)ᵀ(w_d v_d)` over document routes on the same key is
/// summed; keys absent from the document add 0.
pub fn score_dynamic(q: &EncodedQuery, d: &EncodedDocument, with_cls: bool) -> Result<f32> {
    let doc_routes: Vec<(u32, Vec<f32>)> = d
        .tokens
        .iter()
        .flat_map(|t| t.routes.iter().map(move |r| (r.key, scaled(&t.vector, r.weight))))
        .collect();
    let mut total = 0.0f32;
    for qt in &q.tokens {
        for qr in &qt.routes {
            let u = scaled(&qt.vector, qr.weight);
            let mut best: Option<f32> = None;
            for (_, dv) in doc_routes.iter().filter(|(k, _)| *k == qr.key) {
                check_dim(u.len(), dv.len())?;
                let s = dot(&u, dv);
                best = Some(best.map_or(s, |b| b.max(s)));
            }
            if let Some(b) = best {
                total += b;
            }
        }
    }
    Ok(total + cls_term(with_cls, q.cls.as_deref(), d.cls.as_deref())?)
}

/// Token-routing scheme used to score a query against a document.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Single,
    AllToAll,
    Static,
    Dynamic,
}

impl Scheme {
    pub fn tag(self) -> u8 {
        match self {
            Scheme::Single => 0,
            Scheme::AllToAll => 1,
            Scheme::Static => 2,
            Scheme::Dynamic => 3,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Some(match tag {
            0 => Scheme::Single,
            1 => Scheme::AllToAll,
            2 => Scheme::Static,
            3 => Scheme::Dynamic,
            _ => return None,
        })
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scheme::Single => "single",
            Scheme::AllToAll => "all_to_all",
            Scheme::Static => "static",
            Scheme::Dynamic => "dynamic",
        })
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" => Ok(Scheme::Single),
            "all_to_all" | "all-to-all" => Ok(Scheme::AllToAll),
            "static" => Ok(Scheme::Static),
            "dynamic" => Ok(Scheme::Dynamic),
            other => Err(Error::contract(format!("unknown scheme {other:?}"))),
        }
    }
}

pub fn score(q: &EncodedQuery, d: &EncodedDocument, scheme: Scheme, with_cls: bool) -> Result<f32> {
    match scheme {
        Scheme::Single => match (&q.cls, &d.cls) {
            (Some(a), Some(b)) => score_single_vector(a, b),
            _ => Err(Error::contract("single-vector scoring needs cls vectors")),
        },
        Scheme::AllToAll => {
            Ok(score_all_to_all(&q.tokens, &d.tokens)?
                + cls_term(with_cls, q.cls.as_deref(), d.cls.as_deref())?)
        }
        Scheme::Static => score_static_lexical(
            &q.tokens,
            &d.tokens,
            with_cls,
            q.cls.as_deref(),
            d.cls.as_deref(),
        ),
        Scheme::Dynamic => score_dynamic(q, d, with_cls),
    }
}

/// Descending score, then ascending id.
pub(crate) fn rank_order(a: &(String, f32), b: &(String, f32)) -> Ordering {
    b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0))
}

pub(crate) fn sort_and_truncate(mut scored: Vec<(String, f32)>, top_k: usize) -> Vec<(String, f32)> {
    if scored.len() > top_k {
        scored.select_nth_unstable_by(top_k - 1, rank_order);
        scored.truncate(top_k);
    }
    scored.sort_unstable_by(rank_order);
    scored
}

/// Scores every document exhaustively and returns the best `top_k`.
pub fn brute_force_rank(
    query: &EncodedQuery,
    corpus: &[EncodedDocument],
    top_k: usize,
    scheme: Scheme,
    with_cls: bool,
) -> Result<Vec<(String, f32)>> {
    if top_k == 0 {
        return Err(Error::contract("top_k must be >= 1"));
    }
    let scored = corpus
        .iter()
        .map(|d| Ok((d.id.clone(), score(query, d, scheme, with_cls)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(sort_and_truncate(scored, top_k))
}
