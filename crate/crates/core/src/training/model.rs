//! Full training objective over a batch of token matrices with a linear
//! router, evaluated in fp64 with hand-derived gradients.
//!
//! For every token `x`: `z = Wᵀx + b`, `φ = log(1 + relu(z))`, and the token
//! is routed to its top keys of `φ` (zero weights dropped). The objective is
//! `L_e + L_r + α·L_b + β·L_s`:
//!
//! * `L_e`: contrastive loss over dynamic-routing scores, mean over queries
//! * `L_r`: contrastive loss over max-pooled router representations
//! * `L_b`: load balancing on `z`, queries and documents separately
//! * `L_s`: ℓ1 of `φ`, queries and documents separately
//!
//! Route selection, max pooling and the argmax inside `L_b` are piecewise
//! constant; gradients use the subgradient at the selected element.

use serde::Serialize;

use super::losses::{argmax, contrastive_loss_grad, load_balance_grad, load_balance_loss, router_contrastive_loss_grad};
use crate::error::{check_dim, Error, Result};
use crate::router::RouterParams;

/// Rows are token vectors.
pub type TokenMatrix = Vec<Vec<f64>>;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingBatch {
    pub queries: Vec<TokenMatrix>,
    pub positives: Vec<TokenMatrix>,
    /// Negatives of query `i` are `negatives[i]`.
    pub negatives: Vec<Vec<TokenMatrix>>,
}

impl TrainingBatch {
    fn sequences(&self) -> impl Iterator<Item = &TokenMatrix> {
        self.queries
            .iter()
            .chain(&self.positives)
            .chain(self.negatives.iter().flatten())
    }

    fn doc_count(&self) -> usize {
        self.positives.len() + self.negatives.iter().map(Vec::len).sum::<usize>()
    }

    fn validate(&self, dim: usize) -> Result<()> {
        if self.queries.is_empty() {
            return Err(Error::contract("training batch needs at least one query"));
        }
        check_dim(self.queries.len(), self.positives.len())?;
        check_dim(self.queries.len(), self.negatives.len())?;
        for row in self.sequences().flatten() {
            check_dim(dim, row.len())?;
        }
        Ok(())
    }
}

/// Regularization weights `α` (load balancing) and `β` (ℓ1).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 1e-2,
            beta: 1e-5,
        }
    }
}

impl LossWeights {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        if !(alpha >= 0.0 && beta >= 0.0) {
            return Err(Error::contract("loss weights must be non-negative"));
        }
        Ok(Self { alpha, beta })
    }
}

/// Maximum routing keys per query token and per document token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct RoutingLimits {
    pub query_keys: usize,
    pub doc_keys: usize,
}

impl Default for RoutingLimits {
    fn default() -> Self {
        Self {
            query_keys: 1,
            doc_keys: 5,
        }
    }
}

/// fp64 linear router; `weights` is row-major `dim × key_count`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearRouter {
    pub dim: usize,
    pub key_count: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LinearRouter {
    pub fn new(dim: usize, key_count: usize, weights: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        if dim == 0 || key_count == 0 {
            return Err(Error::contract("router needs dim >= 1 and key_count >= 1"));
        }
        check_dim(dim * key_count, weights.len())?;
        check_dim(key_count, bias.len())?;
        Ok(Self {
            dim,
            key_count,
            weights,
            bias,
        })
    }

    pub fn from_params(p: &RouterParams) -> Self {
        Self {
            dim: p.dim(),
            key_count: p.key_count(),
            weights: p.weights().iter().map(|&x| x as f64).collect(),
            bias: p.bias().iter().map(|&x| x as f64).collect(),
        }
    }

    pub fn to_params(&self) -> Result<RouterParams> {
        RouterParams::new(
            self.dim,
            self.key_count,
            self.weights.iter().map(|&x| x as f32).collect(),
            self.bias.iter().map(|&x| x as f32).collect(),
        )
    }

    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        let mut z = self.bias.clone();
        for (row, &xi) in self.weights.chunks_exact(self.key_count).zip(x) {
            for (zk, w) in z.iter_mut().zip(row) {
                *zk += w * xi;
            }
        }
        z
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct LossTerms {
    pub embed: f64,
    pub router: f64,
    pub balance: f64,
    pub sparsity: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub queries: Vec<TokenMatrix>,
    pub positives: Vec<TokenMatrix>,
    pub negatives: Vec<Vec<TokenMatrix>>,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct LossEvaluation {
    pub terms: LossTerms,
    pub grads: Gradients,
    /// Smallest distance of any piecewise decision (ReLU sign, route
    /// selection, max, argmax) from flipping. Finite-difference checks are
    /// only meaningful when this is well above the step size.
    pub kink_margin: f64,
}

/// Forward state of one token sequence.
struct SeqState {
    z: Vec<Vec<f64>>,
    phi: Vec<Vec<f64>>,
    /// `(key, weight)` per token, heaviest first.
    routes: Vec<Vec<(usize, f64)>>,
    pooled: Vec<f64>,
    pool_arg: Vec<usize>,
}

fn forward_seq(x: &TokenMatrix, router: &LinearRouter, max_keys: usize, margin: &mut f64) -> SeqState {
    let z: Vec<Vec<f64>> = x.iter().map(|row| router.logits(row)).collect();
    let phi: Vec<Vec<f64>> = z
        .iter()
        .map(|zr| zr.iter().map(|&v| v.max(0.0).ln_1p()).collect())
        .collect();
    let mut routes = Vec::with_capacity(x.len());
    for (zr, pr) in z.iter().zip(&phi) {
        for &v in zr {
            *margin = margin.min(v.abs());
        }
        let mut order: Vec<usize> = (0..pr.len()).filter(|&k| pr[k] > 0.0).collect();
        order.sort_by(|&a, &b| pr[b].total_cmp(&pr[a]).then(a.cmp(&b)));
        if order.len() > max_keys {
            *margin = margin.min(pr[order[max_keys - 1]] - pr[order[max_keys]]);
        }
        order.truncate(max_keys);
        routes.push(order.into_iter().map(|k| (k, pr[k])).collect());
    }
    let keys = router.key_count;
    let mut pooled = vec![0.0; keys];
    let mut pool_arg = vec![0; keys];
    for k in 0..keys {
        let mut best = f64::NEG_INFINITY;
        let mut second = f64::NEG_INFINITY;
        for (j, pr) in phi.iter().enumerate() {
            if pr[k] > best {
                second = best;
                best = pr[k];
                pool_arg[k] = j;
            } else if pr[k] > second {
                second = pr[k];
            }
        }
        if x.is_empty() {
            best = 0.0;
        }
        pooled[k] = best;
        if best > 0.0 && second.is_finite() {
            *margin = margin.min(best - second);
        }
    }
    for zr in &z {
        let top = argmax(zr);
        for (k, &v) in zr.iter().enumerate() {
            if k != top {
                *margin = margin.min(zr[top] - v);
            }
        }
    }
    SeqState {
        z,
        phi,
        routes,
        pooled,
        pool_arg,
    }
}

fn dot64(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// One contributing `(query route, document route)` pair of a score.
struct Match {
    qi: usize,
    key: usize,
    qw: f64,
    dj: usize,
    dw: f64,
    dot: f64,
}

/// Dynamic-routing score between two sequences and the maximizing pairs.
fn dynamic_score(
    qx: &TokenMatrix,
    q: &SeqState,
    dx: &TokenMatrix,
    d: &SeqState,
    margin: &mut f64,
) -> (f64, Vec<Match>) {
    let mut total = 0.0;
    let mut matches = Vec::new();
    for (qi, q_routes) in q.routes.iter().enumerate() {
        for &(key, qw) in q_routes {
            let mut best: Option<Match> = None;
            let mut best_val = f64::NEG_INFINITY;
            let mut second = f64::NEG_INFINITY;
            for (dj, d_routes) in d.routes.iter().enumerate() {
                for &(dkey, dw) in d_routes {
                    if dkey != key {
                        continue;
                    }
                    let dot = dot64(&qx[qi], &dx[dj]);
                    let val = qw * dw * dot;
                    if val > best_val {
                        second = best_val;
                        best_val = val;
                        best = Some(Match { qi, key, qw, dj, dw, dot });
                    } else if val > second {
                        second = val;
                    }
                }
            }
            if let Some(m) = best {
                if second.is_finite() {
                    *margin = margin.min(best_val - second);
                }
                total += best_val;
                matches.push(m);
            }
        }
    }
    (total, matches)
}

fn zeros_like(x: &TokenMatrix) -> TokenMatrix {
    x.iter().map(|r| vec![0.0; r.len()]).collect()
}

/// Evaluates the full objective and its gradients with respect to every
/// token vector and the router parameters.
pub fn total_loss(
    batch: &TrainingBatch,
    router: &LinearRouter,
    weights: LossWeights,
    limits: RoutingLimits,
) -> Result<LossEvaluation> {
    batch.validate(router.dim)?;
    if limits.query_keys == 0 || limits.doc_keys == 0 {
        return Err(Error::contract("routing limits must be >= 1"));
    }
    let b = batch.queries.len();
    let mut margin = f64::INFINITY;

    // all sequences in order: queries, positives, negatives (query-major)
    let seqs: Vec<&TokenMatrix> = batch.sequences().collect();
    let is_query = |s: usize| s < b;
    let states: Vec<SeqState> = seqs
        .iter()
        .enumerate()
        .map(|(s, x)| {
            let n = if is_query(s) { limits.query_keys } else { limits.doc_keys };
            forward_seq(x, router, n, &mut margin)
        })
        .collect();
    // document sequence indices per query: positive first
    let mut doc_index = Vec::with_capacity(b);
    let mut next_neg = 2 * b;
    for i in 0..b {
        let mut v = vec![b + i];
        for _ in &batch.negatives[i] {
            v.push(next_neg);
            next_neg += 1;
        }
        doc_index.push(v);
    }

    let mut d_phi: Vec<TokenMatrix> = states.iter().map(|s| zeros_like(&s.phi)).collect();
    let mut d_x: Vec<TokenMatrix> = seqs.iter().map(|x| zeros_like(x)).collect();
    let mut terms = LossTerms::default();
    let inv_b = 1.0 / b as f64;

    for (i, docs) in doc_index.iter().enumerate() {
        // dynamic-routing contrastive loss
        let scored: Vec<(f64, Vec<Match>)> = docs
            .iter()
            .map(|&d| dynamic_score(seqs[i], &states[i], seqs[d], &states[d], &mut margin))
            .collect();
        let (loss, g_pos, g_negs) = contrastive_loss_grad(scored[0].0, &scored[1..].iter().map(|s| s.0).collect::<Vec<_>>());
        terms.embed += inv_b * loss;
        let upstream = std::iter::once(g_pos).chain(g_negs);
        for ((&d, (_, matches)), g) in docs.iter().zip(&scored).zip(upstream) {
            let g = g * inv_b;
            for m in matches {
                d_phi[i][m.qi][m.key] += g * m.dw * m.dot;
                d_phi[d][m.dj][m.key] += g * m.qw * m.dot;
                let s = g * m.qw * m.dw;
                for c in 0..router.dim {
                    d_x[i][m.qi][c] += s * seqs[d][m.dj][c];
                    d_x[d][m.dj][c] += s * seqs[i][m.qi][c];
                }
            }
        }

        // router contrastive loss over pooled representations
        let negs: Vec<Vec<f64>> = docs[1..].iter().map(|&d| states[d].pooled.clone()).collect();
        let rc = router_contrastive_loss_grad(&states[i].pooled, &states[docs[0]].pooled, &negs)?;
        terms.router += inv_b * rc.loss;
        let pooled_grads = std::iter::once((i, &rc.query))
            .chain(std::iter::once((docs[0], &rc.positive)))
            .chain(docs[1..].iter().copied().zip(&rc.negatives));
        for (s, g) in pooled_grads {
            for k in 0..router.key_count {
                if states[s].pooled[k] > 0.0 {
                    d_phi[s][states[s].pool_arg[k]][k] += inv_b * g[k];
                }
            }
        }
    }

    // regularizers, applied to queries and documents as separate batches
    let groups: [(Vec<usize>, f64); 2] = [
        ((0..b).collect(), inv_b),
        ((b..seqs.len()).collect(), 1.0 / batch.doc_count().max(1) as f64),
    ];
    let mut d_z_extra: Vec<TokenMatrix> = states.iter().map(|s| zeros_like(&s.z)).collect();
    for (members, inv_group) in &groups {
        if members.is_empty() {
            continue;
        }
        let logits: Vec<Vec<Vec<f64>>> = members.iter().map(|&s| states[s].z.clone()).collect();
        let lb = load_balance_loss(&logits)?;
        terms.balance += lb.loss;
        let g = load_balance_grad(&logits, &lb.f);
        for (&s, gs) in members.iter().zip(g) {
            for (dst, row) in d_z_extra[s].iter_mut().zip(gs) {
                for (d, v) in dst.iter_mut().zip(row) {
                    *d += weights.alpha * v;
                }
            }
        }
        let l1: f64 = members.iter().map(|&s| states[s].phi.iter().flatten().sum::<f64>()).sum();
        terms.sparsity += inv_group * l1;
        for &s in members {
            for row in &mut d_phi[s] {
                for v in row.iter_mut() {
                    *v += weights.beta * inv_group;
                }
            }
        }
    }
    terms.total = terms.embed + terms.router + weights.alpha * terms.balance + weights.beta * terms.sparsity;

    // back through φ = log(1 + relu(z)) and z = Wᵀx + b
    let keys = router.key_count;
    let mut g_w = vec![0.0; router.weights.len()];
    let mut g_b = vec![0.0; keys];
    for s in 0..seqs.len() {
        for (t, x) in seqs[s].iter().enumerate() {
            let dz: Vec<f64> = (0..keys)
                .map(|k| {
                    let z = states[s].z[t][k];
                    let through_phi = if z > 0.0 { d_phi[s][t][k] / (1.0 + z) } else { 0.0 };
                    through_phi + d_z_extra[s][t][k]
                })
                .collect();
            for (c, &xc) in x.iter().enumerate() {
                let row = &router.weights[c * keys..(c + 1) * keys];
                let g_row = &mut g_w[c * keys..(c + 1) * keys];
                let mut acc = 0.0;
                for k in 0..keys {
                    g_row[k] += xc * dz[k];
                    acc += row[k] * dz[k];
                }
                d_x[s][t][c] += acc;
            }
            for k in 0..keys {
                g_b[k] += dz[k];
            }
        }
    }

    let mut d_x = d_x.into_iter();
    let queries: Vec<TokenMatrix> = d_x.by_ref().take(b).collect();
    let positives: Vec<TokenMatrix> = d_x.by_ref().take(b).collect();
    let negatives = batch
        .negatives
        .iter()
        .map(|negs| d_x.by_ref().take(negs.len()).collect())
        .collect();

    Ok(LossEvaluation {
        terms,
        grads: Gradients {
            queries,
            positives,
            negatives,
            weights: g_w,
            bias: g_b,
        },
        kink_margin: margin,
    })
}
