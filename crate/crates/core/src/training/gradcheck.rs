//! Central finite-difference verification of the analytic gradients of
//! [`total_loss`](super::total_loss) on random small problems.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use super::model::{total_loss, LinearRouter, LossWeights, RoutingLimits, TokenMatrix, TrainingBatch};
use crate::error::{Error, Result};

/// A random objective instance.
#[derive(Debug, Clone)]
pub struct GradProblem {
    pub batch: TrainingBatch,
    pub router: LinearRouter,
    pub weights: LossWeights,
    pub limits: RoutingLimits,
}

/// Upper bounds on the random problem sizes.
#[derive(Debug, Clone, Copy)]
pub struct ProblemBounds {
    pub batch: usize,
    pub tokens: usize,
    pub keys: usize,
    pub dim: usize,
}

impl Default for ProblemBounds {
    fn default() -> Self {
        Self {
            batch: 4,
            tokens: 6,
            keys: 10,
            dim: 8,
        }
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn matrix(rng: &mut ChaCha8Rng, rows: usize, dim: usize) -> TokenMatrix {
    (0..rows).map(|_| (0..dim).map(|_| normal(rng)).collect()).collect()
}

pub fn random_problem(rng: &mut ChaCha8Rng, bounds: ProblemBounds) -> GradProblem {
    let b = rng.random_range(1..=bounds.batch);
    let keys = rng.random_range(2..=bounds.keys.max(2));
    let dim = rng.random_range(1..=bounds.dim);
    let seq = |rng: &mut ChaCha8Rng| {
        let t = rng.random_range(1..=bounds.tokens);
        matrix(rng, t, dim)
    };
    let queries = (0..b).map(|_| seq(rng)).collect();
    let positives = (0..b).map(|_| seq(rng)).collect();
    let negatives = (0..b)
        .map(|_| {
            let n = rng.random_range(1..=2);
            (0..n).map(|_| seq(rng)).collect()
        })
        .collect();
    let scale = 1.0 / (dim as f64).sqrt();
    let router = LinearRouter {
        dim,
        key_count: keys,
        weights: (0..dim * keys).map(|_| normal(rng) * scale * 1.5).collect(),
        bias: (0..keys).map(|_| normal(rng) * 0.5 + 0.3).collect(),
    };
    GradProblem {
        batch: TrainingBatch {
            queries,
            positives,
            negatives,
        },
        router,
        weights: LossWeights {
            alpha: rng.random_range(0.0..1.0),
            beta: rng.random_range(0.0..0.2),
        },
        limits: RoutingLimits {
            query_keys: rng.random_range(1..=2),
            doc_keys: rng.random_range(1..=5),
        },
    }
}

/// Relative error with a floor on the denominator for near-zero gradients.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Largest relative error between analytic and central-difference
/// gradients over every token coordinate, router weight and bias.
pub fn check_problem(p: &GradProblem, h: f64) -> Result<f64> {
    let eval = total_loss(&p.batch, &p.router, p.weights, p.limits)?;
    let loss_at = |batch: &TrainingBatch, router: &LinearRouter| -> Result<f64> {
        Ok(total_loss(batch, router, p.weights, p.limits)?.terms.total)
    };
    let mut worst = 0.0f64;

    let mut router = p.router.clone();
    for i in 0..router.weights.len() {
        let orig = router.weights[i];
        router.weights[i] = orig + h;
        let up = loss_at(&p.batch, &router)?;
        router.weights[i] = orig - h;
        let down = loss_at(&p.batch, &router)?;
        router.weights[i] = orig;
        worst = worst.max(relative_error(eval.grads.weights[i], (up - down) / (2.0 * h)));
    }
    for i in 0..router.bias.len() {
        let orig = router.bias[i];
        router.bias[i] = orig + h;
        let up = loss_at(&p.batch, &router)?;
        router.bias[i] = orig - h;
        let down = loss_at(&p.batch, &router)?;
        router.bias[i] = orig;
        worst = worst.max(relative_error(eval.grads.bias[i], (up - down) / (2.0 * h)));
    }

    let mut batch = p.batch.clone();
    let g = &eval.grads;
    let analytic: Vec<&TokenMatrix> = g
        .queries
        .iter()
        .chain(&g.positives)
        .chain(g.negatives.iter().flatten())
        .collect();
    let n_seq = analytic.len();
    for s in 0..n_seq {
        let rows = seq_mut(&mut batch, s).len();
        for t in 0..rows {
            for c in 0..p.router.dim {
                let orig = seq_mut(&mut batch, s)[t][c];
                seq_mut(&mut batch, s)[t][c] = orig + h;
                let up = loss_at(&batch, &p.router)?;
                seq_mut(&mut batch, s)[t][c] = orig - h;
                let down = loss_at(&batch, &p.router)?;
                seq_mut(&mut batch, s)[t][c] = orig;
                worst = worst.max(relative_error(analytic[s][t][c], (up - down) / (2.0 * h)));
            }
        }
    }
    Ok(worst)
}

fn seq_mut(batch: &mut TrainingBatch, s: usize) -> &mut TokenMatrix {
    let b = batch.queries.len();
    if s < b {
        return &mut batch.queries[s];
    }
    if s < 2 * b {
        return &mut batch.positives[s - b];
    }
    let mut rest = s - 2 * b;
    for negs in &mut batch.negatives {
        if rest < negs.len() {
            return &mut negs[rest];
        }
        rest -= negs.len();
    }
    unreachable!("sequence index out of range")
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub configs: usize,
    /// Random draws rejected for sitting too close to a kink.
    pub rejected: usize,
    pub max_relative_error: f64,
}

/// Checks `configs` random problems whose kink margin is at least
/// `min_margin`.
pub fn run_gradient_checks(configs: usize, seed: u64, h: f64, min_margin: f64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rejected = 0;
    let mut worst = 0.0f64;
    for _ in 0..configs {
        let problem = loop {
            let p = random_problem(&mut rng, ProblemBounds::default());
            let margin = total_loss(&p.batch, &p.router, p.weights, p.limits)?.kink_margin;
            if margin >= min_margin {
                break p;
            }
            rejected += 1;
            if rejected > 100 * configs.max(1) {
                return Err(Error::contract("could not draw problems away from kinks"));
            }
        };
        worst = worst.max(check_problem(&problem, h)?);
    }
    Ok(GradCheckReport {
        configs,
        rejected,
        max_relative_error: worst,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn analytic_gradients_match_finite_differences() {
        let report = run_gradient_checks(10, 3, 1e-5, 1e-3).unwrap();
        assert!(report.max_relative_error < 1e-4, "{report:?}");
    }
}
