//! Scalar training losses and their gradients with respect to their direct
//! inputs (scores, pooled representations, router outputs, logits).

use crate::error::{check_dim, Result};

/// Stable `log Σ exp(x)`.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    if max == f64::INFINITY {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// `−log(e^{s⁺} / (e^{s⁺} + Σ e^{s⁻}))`.
pub fn contrastive_loss(pos: f64, negs: &[f64]) -> f64 {
    contrastive_loss_grad(pos, negs).0
}

/// Loss, `∂/∂s⁺` and `∂/∂s⁻` of the contrastive loss.
pub fn contrastive_loss_grad(pos: f64, negs: &[f64]) -> (f64, f64, Vec<f64>) {
    let mut all = Vec::with_capacity(negs.len() + 1);
    all.push(pos);
    all.extend_from_slice(negs);
    let lse = log_sum_exp(&all);
    let loss = lse - pos;
    let d_pos = (pos - lse).exp() - 1.0;
    let d_negs = negs.iter().map(|s| (s - lse).exp()).collect();
    (loss, d_pos, d_negs)
}

/// Gradients of [`router_contrastive_loss`].
#[derive(Debug, Clone, PartialEq)]
pub struct RouterContrastiveGrad {
    pub loss: f64,
    pub query: Vec<f64>,
    pub positive: Vec<f64>,
    pub negatives: Vec<Vec<f64>>,
}

fn dot64(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Contrastive loss over pooled router representations with `s = Φ_qᵀ Φ_d`.
pub fn router_contrastive_loss(query: &[f64], positive: &[f64], negatives: &[Vec<f64>]) -> Result<f64> {
    Ok(router_contrastive_loss_grad(query, positive, negatives)?.loss)
}

pub fn router_contrastive_loss_grad(
    query: &[f64],
    positive: &[f64],
    negatives: &[Vec<f64>],
) -> Result<RouterContrastiveGrad> {
    check_dim(query.len(), positive.len())?;
    for n in negatives {
        check_dim(query.len(), n.len())?;
    }
    let s_pos = dot64(query, positive);
    let s_negs: Vec<f64> = negatives.iter().map(|n| dot64(query, n)).collect();
    let (loss, g_pos, g_negs) = contrastive_loss_grad(s_pos, &s_negs);
    let mut g_query: Vec<f64> = positive.iter().map(|x| g_pos * x).collect();
    for (n, g) in negatives.iter().zip(&g_negs) {
        for (gq, x) in g_query.iter_mut().zip(n) {
            *gq += g * x;
        }
    }
    Ok(RouterContrastiveGrad {
        loss,
        query: g_query,
        positive: query.iter().map(|x| g_pos * x).collect(),
        negatives: g_negs
            .iter()
            .map(|g| query.iter().map(|x| g * x).collect())
            .collect(),
    })
}

/// `(1/B) Σ_i Σ_j Σ_k rep[i][j][k]` over a batch of token-level router
/// representations. The gradient is `1/B` everywhere.
pub fn l1_loss(reps: &[Vec<Vec<f64>>]) -> f64 {
    if reps.is_empty() {
        return 0.0;
    }
    let total: f64 = reps.iter().flatten().flatten().sum();
    total / reps.len() as f64
}

/// Softmax of one logit row.
pub fn softmax(z: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(z);
    z.iter().map(|x| (x - lse).exp()).collect()
}

/// Index of the largest entry, lowest index on ties.
pub(crate) fn argmax(z: &[f64]) -> usize {
    let mut best = 0;
    for (k, &x) in z.iter().enumerate() {
        if x > z[best] {
            best = k;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadBalance {
    pub loss: f64,
    /// Batch-averaged routing probability mass per key.
    pub p: Vec<f64>,
    /// Batch-averaged count of tokens whose argmax is each key.
    pub f: Vec<f64>,
}

/// `Σ_k f_k · p_k` with `p_k = (1/B) Σ softmax(z)_k` and
/// `f_k = (1/B) Σ 1{argmax z = k}`; argmax ties go to the lowest key.
pub fn load_balance_loss(logits: &[Vec<Vec<f64>>]) -> Result<LoadBalance> {
    let keys = logits
        .iter()
        .flatten()
        .next()
        .map_or(0, Vec::len);
    let mut p = vec![0.0; keys];
    let mut f = vec![0.0; keys];
    if logits.is_empty() {
        return Ok(LoadBalance { loss: 0.0, p, f });
    }
    let inv_b = 1.0 / logits.len() as f64;
    for z in logits.iter().flatten() {
        check_dim(keys, z.len())?;
        for (pk, s) in p.iter_mut().zip(softmax(z)) {
            *pk += inv_b * s;
        }
        f[argmax(z)] += inv_b;
    }
    let loss = dot64(&f, &p);
    Ok(LoadBalance { loss, p, f })
}

/// Gradient of [`load_balance_loss`] with respect to every logit, holding the
/// piecewise-constant `f` fixed: `(1/B) s_m (f_m − Σ_k f_k s_k)`.
pub fn load_balance_grad(logits: &[Vec<Vec<f64>>], f: &[f64]) -> Vec<Vec<Vec<f64>>> {
    let inv_b = if logits.is_empty() { 0.0 } else { 1.0 / logits.len() as f64 };
    logits
        .iter()
        .map(|seq| {
            seq.iter()
                .map(|z| {
                    let s = softmax(z);
                    let mean_f = dot64(f, &s);
                    s.iter()
                        .zip(f)
                        .map(|(sm, fm)| inv_b * sm * (fm - mean_f))
                        .collect()
                })
                .collect()
        })
        .collect()
}
