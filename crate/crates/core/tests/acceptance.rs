//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails. Reference values are computed here by
//! straightforward implementations that do not share code with the crate.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::Instant;

use lexroute::eval::{evaluate, EvalOptions, Metric, Qrels, Run};
use lexroute::index::{build_index, index_stats, prune_index, IndexConfig, InvertedIndex};
use lexroute::quantizer::{bits_per_dimension, quantize_index, sample_index_vectors, train_pq, PqCodebook, PqTrainConfig};
use lexroute::router::{route_by_token_id, route_sequence, route_to_single_key, Route, RoutedToken, RouterParams};
use lexroute::scoring::{brute_force_rank, score_all_to_all, score_dynamic, score_static_lexical, EncodedSequence, Scheme};
use lexroute::training::{
    contrastive_loss, contrastive_loss_grad, l1_loss, load_balance_grad, load_balance_loss, random_problem,
    router_contrastive_loss, router_contrastive_loss_grad, toy_corpus, toy_train, total_loss, GradProblem,
    LinearRouter, LossEvaluation, ProblemBounds, ToyTrainConfig, TokenMatrix, TrainingBatch,
};
use lexroute::{count_dot_products, generate_synthetic, search, Searcher, SyntheticConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

type Outcome = Result<String, Box<dyn std::error::Error + Send + Sync>>;

macro_rules! check {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+).into());
        }
    };
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| normal(rng) as f32).collect()
}

/// Random linear router with unit-variance logits for unit-variance inputs.
fn random_router(rng: &mut ChaCha8Rng, dim: usize, keys: usize) -> RouterParams {
    let scale = 1.0 / (dim as f32).sqrt();
    let w = gaussian(rng, dim * keys).into_iter().map(|x| x * scale).collect();
    RouterParams::new(dim, keys, w, vec![0.0; keys]).unwrap()
}

fn route_all(
    seqs: &[EncodedSequence],
    router: &RouterParams,
    max_keys: usize,
) -> lexroute::Result<Vec<EncodedSequence>> {
    seqs.iter().map(|s| route_sequence(s, router, max_keys)).collect()
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

fn dot64(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

/// Dynamic routing score from the definition, in f64, without cls.
fn naive_dynamic(q: &EncodedSequence, d: &EncodedSequence) -> f64 {
    let mut total = 0.0;
    for qt in &q.tokens {
        for qr in &qt.routes {
            let mut best: Option<f64> = None;
            for dt in &d.tokens {
                for dr in dt.routes.iter().filter(|r| r.key == qr.key) {
                    let s = qr.weight as f64 * dr.weight as f64 * dot64(&qt.vector, &dt.vector);
                    best = Some(best.map_or(s, |b: f64| b.max(s)));
                }
            }
            total += best.unwrap_or(0.0);
        }
    }
    total
}

fn naive_static(q: &EncodedSequence, d: &EncodedSequence) -> f64 {
    q.tokens
        .iter()
        .map(|qt| {
            d.tokens
                .iter()
                .filter(|dt| dt.token_id == qt.token_id)
                .map(|dt| dot64(&qt.vector, &dt.vector))
                .fold(None, |b: Option<f64>, s| Some(b.map_or(s, |b| b.max(s))))
                .unwrap_or(0.0)
        })
        .sum()
}

fn naive_maxsim(q: &EncodedSequence, d: &EncodedSequence) -> f64 {
    q.tokens
        .iter()
        .map(|qt| {
            d.tokens
                .iter()
                .map(|dt| dot64(&qt.vector, &dt.vector))
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .sum()
}

fn keys_of(s: &EncodedSequence) -> BTreeSet<u32> {
    s.tokens.iter().flat_map(|t| t.routes.iter().map(|r| r.key)).collect()
}

fn without_routes_above(d: &EncodedSequence, tau: f32) -> EncodedSequence {
    let mut out = d.clone();
    for t in &mut out.tokens {
        t.routes.retain(|r| r.weight > tau);
    }
    out
}

fn oracle_equivalence() -> Outcome {
    let start = Instant::now();
    let (mut compared, mut same_id, mut worst) = (0usize, 0usize, 0.0f64);
    for seed in 0..20u64 {
        let cfg = SyntheticConfig {
            docs: 100,
            tokens_per_doc: 30,
            queries: 10,
            query_tokens: 8,
            dim: 8,
            vocab: 50,
            seed,
            ..Default::default()
        };
        let data = generate_synthetic(&cfg)?;
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let router = random_router(&mut rng, 8, 50);
        let docs = route_all(&data.docs, &router, 5)?;
        let queries = route_all(&data.queries, &router, 1)?;
        for tau in [0.0f32, 0.3, 0.9] {
            let index = build_index(&docs, IndexConfig::new(50, tau))?;
            let kept: Vec<EncodedSequence> = docs.iter().map(|d| without_routes_above(d, tau)).collect();
            let by_id: HashMap<&str, &EncodedSequence> = kept.iter().map(|d| (d.id.as_str(), d)).collect();
            for q in &queries {
                let got = search(q, &index, 10, false)?.ranked;
                let qk = keys_of(q);
                let reachable: Vec<EncodedSequence> =
                    kept.iter().filter(|d| !keys_of(d).is_disjoint(&qk)).cloned().collect();
                let want = if reachable.is_empty() {
                    Vec::new()
                } else {
                    brute_force_rank(q, &reachable, 10, Scheme::Dynamic, false)?
                };
                check!(
                    got.len() == want.len(),
                    "seed {seed} tau {tau} {}: {} results, brute force {}",
                    q.id,
                    got.len(),
                    want.len()
                );
                let ids: BTreeSet<&str> = got.iter().map(|g| g.0.as_str()).collect();
                check!(ids.len() == got.len(), "duplicate ids for {}", q.id);
                for (rank, (g, w)) in got.iter().zip(&want).enumerate() {
                    compared += 1;
                    same_id += (g.0 == w.0) as usize;
                    let e = rel(g.1 as f64, w.1 as f64);
                    // the returned doc must really have the returned score
                    let truth = naive_dynamic(q, by_id[g.0.as_str()]);
                    let e2 = rel(g.1 as f64, truth);
                    worst = worst.max(e).max(e2);
                    check!(
                        e <= 1e-5 && e2 <= 1e-5,
                        "seed {seed} tau {tau} {} rank {}: got {:?}, brute force {:?}, fp64 {truth}",
                        q.id,
                        rank + 1,
                        g,
                        w
                    );
                }
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    check!(secs < 10.0, "took {secs:.2}s");
    Ok(format!(
        "20 corpora x 3 thresholds, {compared} ranks, {same_id} identical ids, max rel err {worst:.2e}, {secs:.2}s"
    ))
}

fn random_sequence(rng: &mut ChaCha8Rng, id: &str, dim: usize, vocab: u32) -> EncodedSequence {
    let n = rng.random_range(1..=12);
    EncodedSequence {
        id: id.into(),
        tokens: (0..n)
            .map(|_| RoutedToken::unrouted(rng.random_range(0..vocab), gaussian(rng, dim)))
            .collect(),
        cls: None,
    }
}

/// Sum over query tokens of the largest `Σ_c |q_c d_c|` among the document
/// tokens `pair` admits; bounds the magnitude f32 rounding acts on.
fn magnitude(q: &EncodedSequence, d: &EncodedSequence, pair: impl Fn(u32, u32) -> bool) -> f64 {
    q.tokens
        .iter()
        .map(|qt| {
            d.tokens
                .iter()
                .filter(|dt| pair(qt.token_id, dt.token_id))
                .map(|dt| qt.vector.iter().zip(&dt.vector).map(|(a, b)| (a * b).abs() as f64).sum::<f64>())
                .fold(0.0, f64::max)
        })
        .sum()
}

fn routing_reductions() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (mut worst_static, mut worst_all, mut worst_ref) = (0.0f64, 0.0f64, 0.0f64);
    for i in 0..100 {
        let dim = rng.random_range(1..=16);
        let vocab = rng.random_range(1..=10);
        let q = random_sequence(&mut rng, "q", dim, vocab);
        let d = random_sequence(&mut rng, "d", dim, vocab);

        let dynamic = score_dynamic(&route_by_token_id(&q), &route_by_token_id(&d), false)? as f64;
        let lexical = score_static_lexical(&q.tokens, &d.tokens, false, None, None)? as f64;
        let e = rel(dynamic, lexical);
        worst_static = worst_static.max(e);
        check!(e <= 1e-6, "instance {i}: identity routing {dynamic} vs static lexical {lexical}");
        // both must also agree with an fp64 evaluation, up to f32 rounding
        let reference = naive_static(&q, &d);
        let e = (dynamic - reference).abs() / magnitude(&q, &d, |a, b| a == b).max(1e-6);
        worst_ref = worst_ref.max(e);
        check!(e <= 1e-6, "instance {i}: static lexical {dynamic} vs fp64 {reference}");

        let dynamic = score_dynamic(&route_to_single_key(&q, 0), &route_to_single_key(&d, 0), false)? as f64;
        let maxsim = score_all_to_all(&q.tokens, &d.tokens)? as f64;
        let e = rel(dynamic, maxsim);
        worst_all = worst_all.max(e);
        check!(e <= 1e-6, "instance {i}: single-key routing {dynamic} vs all-to-all {maxsim}");
        let reference = naive_maxsim(&q, &d);
        let e = (dynamic - reference).abs() / magnitude(&q, &d, |_, _| true).max(1e-6);
        worst_ref = worst_ref.max(e);
        check!(e <= 1e-6, "instance {i}: all-to-all {dynamic} vs fp64 {reference}");
    }
    Ok(format!(
        "100 instances each, max rel err identity vs static {worst_static:.2e}, single key vs all-to-all \
         {worst_all:.2e}; fp64 reference within {worst_ref:.2e} of the score magnitude"
    ))
}

fn flatten(b: &TrainingBatch) -> Vec<TokenMatrix> {
    b.queries
        .iter()
        .chain(&b.positives)
        .chain(b.negatives.iter().flatten())
        .cloned()
        .collect()
}

fn rebuild(shape: &TrainingBatch, flat: &[TokenMatrix]) -> TrainingBatch {
    let b = shape.queries.len();
    let mut rest = flat[2 * b..].iter();
    TrainingBatch {
        queries: flat[..b].to_vec(),
        positives: flat[b..2 * b].to_vec(),
        negatives: shape
            .negatives
            .iter()
            .map(|n| rest.by_ref().take(n.len()).cloned().collect())
            .collect(),
    }
}

/// Largest relative error of central differences of the full objective
/// over router weights, biases and every token coordinate.
fn fd_total(p: &GradProblem, eval: &LossEvaluation, h: f64) -> lexroute::Result<f64> {
    let loss = |batch: &TrainingBatch, router: &LinearRouter| -> lexroute::Result<f64> {
        Ok(total_loss(batch, router, p.weights, p.limits)?.terms.total)
    };
    let mut worst = 0.0f64;
    let n_w = p.router.weights.len();
    let shifted = |i: usize, d: f64| {
        let mut r = p.router.clone();
        if i < n_w {
            r.weights[i] += d;
        } else {
            r.bias[i - n_w] += d;
        }
        r
    };
    for i in 0..n_w + p.router.bias.len() {
        let up = loss(&p.batch, &shifted(i, h))?;
        let down = loss(&p.batch, &shifted(i, -h))?;
        let analytic = if i < n_w { eval.grads.weights[i] } else { eval.grads.bias[i - n_w] };
        worst = worst.max(rel(analytic, (up - down) / (2.0 * h)));
    }
    let mut flat = flatten(&p.batch);
    let grads: Vec<TokenMatrix> = eval
        .grads
        .queries
        .iter()
        .chain(&eval.grads.positives)
        .chain(eval.grads.negatives.iter().flatten())
        .cloned()
        .collect();
    for s in 0..flat.len() {
        for t in 0..flat[s].len() {
            for c in 0..flat[s][t].len() {
                let orig = flat[s][t][c];
                flat[s][t][c] = orig + h;
                let up = loss(&rebuild(&p.batch, &flat), &p.router)?;
                flat[s][t][c] = orig - h;
                let down = loss(&rebuild(&p.batch, &flat), &p.router)?;
                flat[s][t][c] = orig;
                worst = worst.max(rel(grads[s][t][c], (up - down) / (2.0 * h)));
            }
        }
    }
    Ok(worst)
}

fn softmax64(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

/// Load-balancing objective with the assignment fractions held fixed.
fn balance_with_fixed_f(logits: &[Vec<Vec<f64>>], f: &[f64]) -> f64 {
    let b = logits.len() as f64;
    let mut p = vec![0.0; f.len()];
    for z in logits.iter().flatten() {
        for (pk, s) in p.iter_mut().zip(softmax64(z)) {
            *pk += s / b;
        }
    }
    p.iter().zip(f).map(|(a, b)| a * b).sum()
}

fn central(h: f64, mut at: impl FnMut(f64) -> f64) -> f64 {
    (at(h) - at(-h)) / (2.0 * h)
}

fn nonneg(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| normal(rng).abs()).collect()
}

fn gradient_verification() -> Outcome {
    const H: f64 = 1e-5;
    const MIN_MARGIN: f64 = 1e-3;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let bounds = ProblemBounds {
        batch: 4,
        tokens: 6,
        keys: 10,
        dim: 8,
    };
    let mut problems = Vec::new();
    let mut rejected = 0;
    while problems.len() < 50 {
        let p = random_problem(&mut rng, bounds);
        let eval = total_loss(&p.batch, &p.router, p.weights, p.limits)?;
        if eval.kink_margin < MIN_MARGIN {
            rejected += 1;
            continue;
        }
        problems.push((p, eval));
    }
    let composite = problems
        .par_iter()
        .map(|(p, e)| fd_total(p, e, H))
        .collect::<lexroute::Result<Vec<f64>>>()?
        .into_iter()
        .fold(0.0, f64::max);

    let (mut e6, mut e8, mut e10, mut e11) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for _ in 0..50 {
        let n = rng.random_range(1..=4);
        let pos = 3.0 * normal(&mut rng);
        let negs: Vec<f64> = (0..n).map(|_| 3.0 * normal(&mut rng)).collect();
        let (_, g_pos, g_negs) = contrastive_loss_grad(pos, &negs);
        e6 = e6.max(rel(g_pos, central(H, |d| contrastive_loss(pos + d, &negs))));
        for j in 0..n {
            let fd = central(H, |d| {
                let mut m = negs.clone();
                m[j] += d;
                contrastive_loss(pos, &m)
            });
            e6 = e6.max(rel(g_negs[j], fd));
        }

        let v = rng.random_range(1..=10);
        let q = nonneg(&mut rng, v);
        let dp = nonneg(&mut rng, v);
        let dn: Vec<Vec<f64>> = (0..n).map(|_| nonneg(&mut rng, v)).collect();
        let g = router_contrastive_loss_grad(&q, &dp, &dn)?;
        for k in 0..v {
            let fq = central(H, |d| {
                let mut x = q.clone();
                x[k] += d;
                router_contrastive_loss(&x, &dp, &dn).unwrap()
            });
            let fp = central(H, |d| {
                let mut x = dp.clone();
                x[k] += d;
                router_contrastive_loss(&q, &x, &dn).unwrap()
            });
            e8 = e8.max(rel(g.query[k], fq)).max(rel(g.positive[k], fp));
            for j in 0..n {
                let fn_ = central(H, |d| {
                    let mut x = dn.clone();
                    x[j][k] += d;
                    router_contrastive_loss(&q, &dp, &x).unwrap()
                });
                e8 = e8.max(rel(g.negatives[j][k], fn_));
            }
        }

        let b = rng.random_range(1..=4);
        let reps: Vec<Vec<Vec<f64>>> = (0..b)
            .map(|_| (0..rng.random_range(1..=6)).map(|_| nonneg(&mut rng, v)).collect())
            .collect();
        let (i, t) = (rng.random_range(0..b), 0);
        for k in 0..v {
            let fd = central(H, |d| {
                let mut x = reps.clone();
                x[i][t][k] += d;
                l1_loss(&x)
            });
            e10 = e10.max(rel(1.0 / b as f64, fd));
        }

        let logits: Vec<Vec<Vec<f64>>> = reps
            .iter()
            .map(|s| s.iter().map(|r| r.iter().map(|_| 2.0 * normal(&mut rng)).collect()).collect())
            .collect();
        let lb = load_balance_loss(&logits)?;
        // independent p and f
        let bf = b as f64;
        let mut p = vec![0.0; v];
        let mut f = vec![0.0; v];
        for z in logits.iter().flatten() {
            for (pk, s) in p.iter_mut().zip(softmax64(z)) {
                *pk += s / bf;
            }
            let top = (0..v).fold(0, |best, k| if z[k] > z[best] { k } else { best });
            f[top] += 1.0 / bf;
        }
        for k in 0..v {
            check!((lb.p[k] - p[k]).abs() < 1e-12 && (lb.f[k] - f[k]).abs() < 1e-12, "p/f mismatch at key {k}");
        }
        let loss: f64 = p.iter().zip(&f).map(|(a, b)| a * b).sum();
        check!((lb.loss - loss).abs() < 1e-12, "balance loss {} vs {loss}", lb.loss);
        let grad = load_balance_grad(&logits, &lb.f);
        for (si, seq) in logits.iter().enumerate() {
            for (ti, row) in seq.iter().enumerate() {
                for k in 0..row.len() {
                    let fd = central(H, |d| {
                        let mut x = logits.clone();
                        x[si][ti][k] += d;
                        balance_with_fixed_f(&x, &f)
                    });
                    e11 = e11.max(rel(grad[si][ti][k], fd));
                }
            }
        }
    }
    let worst = composite.max(e6).max(e8).max(e10).max(e11);
    let detail = format!(
        "50 composite configs ({rejected} redrawn near kinks), max rel err: composite {composite:.2e}, \
         contrastive {e6:.2e}, router contrastive {e8:.2e}, l1 {e10:.2e}, balance {e11:.2e}"
    );
    check!(worst < 1e-4, "{detail}");
    Ok(detail)
}

fn paired_runs(
    vary: impl Fn(&mut ToyTrainConfig, bool) + Sync,
    measure: impl Fn(&lexroute::training::ToyTrainResult) -> f64 + Sync,
) -> lexroute::Result<Vec<(f64, f64)>> {
    (0..10u64)
        .into_par_iter()
        .map(|seed| {
            let run = |on: bool| -> lexroute::Result<f64> {
                let mut cfg = ToyTrainConfig {
                    seed,
                    ..Default::default()
                };
                cfg.data.seed = seed;
                vary(&mut cfg, on);
                Ok(measure(&toy_train(&cfg)?))
            };
            Ok((run(true)?, run(false)?))
        })
        .collect()
}

fn load_balancing() -> Outcome {
    let pairs = paired_runs(
        |cfg, on| cfg.alpha = if on { 1e-2 } else { 0.0 },
        |r| r.final_balance_ratio,
    )?;
    let wins = pairs.iter().filter(|(with, without)| with < without).count();

    let hand = load_balance_loss(&[vec![vec![0.0, 0.0]]])?;
    // p = [1/2, 1/2], the tie goes to key 0 so f = [1, 0]
    let expected = 0.5 * 1.0 + 0.5 * 0.0;
    let detail = format!(
        "alpha 1e-2 lower max/mean ratio in {wins}/10 seeds {:?}; equal-logit hand case {}",
        pairs
            .iter()
            .map(|(a, b)| format!("{a:.3}<{b:.3}"))
            .collect::<Vec<_>>(),
        hand.loss
    );
    check!(wins >= 8, "{detail}");
    check!((hand.loss - expected).abs() < 1e-12, "{detail}");
    Ok(detail)
}

fn sparsification() -> Outcome {
    let pairs = paired_runs(
        |cfg, on| cfg.beta = if on { 1e-3 } else { 0.0 },
        |r| r.final_deactivated_tokens as f64,
    )?;
    let wins = pairs.iter().filter(|(with, without)| with > without).count();
    let detail = format!(
        "beta 1e-3 deactivates more tokens in {wins}/10 seeds {:?}",
        pairs
            .iter()
            .map(|(a, b)| format!("{a}>{b}"))
            .collect::<Vec<_>>()
    );
    check!(wins >= 8, "{detail}");
    Ok(detail)
}

fn pruning_tradeoff() -> Outcome {
    let cfg = ToyTrainConfig::default();
    let trained = toy_train(&cfg)?;
    let data = toy_corpus(&cfg)?;
    let keys = trained.params.key_count();
    let docs = route_all(&data.docs, &trained.params, 5)?;
    let queries = route_all(&data.queries, &trained.params, 1)?;
    let taus = [0.0f32, 0.5, 0.9, 1.1, 1.5];
    let base = build_index(&docs, IndexConfig::new(keys, 0.0).with_cls(true))?;
    let mut entries = Vec::new();
    let mut dots: Vec<Vec<u64>> = Vec::new();
    let mut built: Vec<InvertedIndex> = Vec::new();
    for &tau in &taus {
        let index = build_index(&docs, IndexConfig::new(keys, tau).with_cls(true))?;
        let expected: usize = docs
            .iter()
            .flat_map(|d| &d.tokens)
            .map(|t| t.routes.iter().filter(|r| r.weight > tau).count())
            .sum();
        check!(
            index.total_entries() == expected,
            "tau {tau}: {} entries, {expected} routes above tau",
            index.total_entries()
        );
        check!(prune_index(&base, tau)? == index, "prune(build(0), {tau}) differs from build({tau})");
        entries.push(index.total_entries());
        dots.push(queries.iter().map(|q| count_dot_products(q, &index, false)).collect());
        built.push(index);
    }
    for i in 0..taus.len() {
        for j in i..taus.len() {
            check!(
                prune_index(&built[i], taus[j])? == built[j],
                "prune(build({}), {}) differs from build({})",
                taus[i],
                taus[j],
                taus[j]
            );
        }
    }
    for w in entries.windows(2) {
        check!(w[1] <= w[0], "entries increase: {entries:?}");
    }
    for w in dots.windows(2) {
        for (q, (a, b)) in w[0].iter().zip(&w[1]).enumerate() {
            check!(b <= a, "query {q} dot products increase: {a} -> {b}");
        }
    }
    let totals: Vec<u64> = dots.iter().map(|d| d.iter().sum()).collect();
    Ok(format!(
        "tau {taus:?}: entries {entries:?}, dot products over {} queries {totals:?}",
        queries.len()
    ))
}

/// Dot products for one corpus under all-to-all, static and dynamic routing,
/// each checked against a direct count.
fn proxy_counts(seed: u64) -> Result<(u64, u64, u64, f64, f64), Box<dyn std::error::Error + Send + Sync>> {
    let vocab = 1000;
    // token vectors vary with context, so one token id spreads over keys
    let cfg = SyntheticConfig {
        docs: 300,
        tokens_per_doc: 30,
        queries: 20,
        query_tokens: 8,
        dim: 32,
        vocab,
        cluster_count: 50,
        skew: 1.0,
        noise: 1.0,
        seed,
    };
    let data = generate_synthetic(&cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let router = random_router(&mut rng, cfg.dim, vocab);
    let docs = route_all(&data.docs, &router, 5)?;
    let queries = route_all(&data.queries, &router, 1)?;
    let dynamic_index = build_index(&docs, IndexConfig::new(vocab, 0.0))?;
    let static_docs: Vec<EncodedSequence> = data.docs.iter().map(route_by_token_id).collect();
    let static_index = build_index(&static_docs, IndexConfig::new(vocab, 0.0).scheme(Scheme::Static))?;

    let doc_tokens: usize = data.docs.iter().map(|d| d.tokens.len()).sum();
    let mut per_key = vec![0u64; vocab];
    for r in docs.iter().flat_map(|d| &d.tokens).flat_map(|t| &t.routes) {
        per_key[r.key as usize] += 1;
    }
    let mut per_id = vec![0u64; vocab];
    for t in data.docs.iter().flat_map(|d| &d.tokens) {
        per_id[t.token_id as usize] += 1;
    }
    let (mut all, mut stat, mut dynm) = (0u64, 0u64, 0u64);
    for (q, routed) in data.queries.iter().zip(&queries) {
        let s = count_dot_products(&route_by_token_id(q), &static_index, false);
        let d = count_dot_products(routed, &dynamic_index, false);
        let s_ref: u64 = q.tokens.iter().map(|t| per_id[t.token_id as usize]).sum();
        let d_ref: u64 = routed
            .tokens
            .iter()
            .flat_map(|t| &t.routes)
            .map(|r: &Route| per_key[r.key as usize])
            .sum();
        check_counts(s, s_ref, d, d_ref, &q.id)?;
        all += (q.tokens.len() * doc_tokens) as u64;
        stat += s;
        dynm += d;
    }
    Ok((
        all,
        stat,
        dynm,
        index_stats(&static_index).balance_ratio(),
        index_stats(&dynamic_index).balance_ratio(),
    ))
}

fn check_counts(s: u64, s_ref: u64, d: u64, d_ref: u64, id: &str) -> Result<(), Box<dyn std::error::Error + Send + Sync>> {
    if s != s_ref || d != d_ref {
        return Err(format!("{id}: counts {s}/{d}, expected {s_ref}/{d_ref}").into());
    }
    Ok(())
}

fn dot_product_proxy() -> Outcome {
    let mut lines = Vec::new();
    let mut ok = true;
    for seed in 0..6 {
        let (all, stat, dynm, static_ratio, dynamic_ratio) = proxy_counts(seed)?;
        ok &= dynm < all && dynm < stat;
        lines.push(format!(
            "seed {seed}: all-to-all {all}, static {stat}, dynamic {dynm} (posting max/mean {static_ratio:.0} vs {dynamic_ratio:.0})"
        ));
    }
    let detail = format!("Zipf corpora, 20 queries each; {}", lines.join("; "));
    check!(ok, "{detail}");
    Ok(detail)
}

fn pq_behavior() -> Outcome {
    for dim in [8usize, 16, 32, 64, 128, 768] {
        for (m, want) in [(4usize, 2.0f64), (8, 1.0)] {
            let by_formula = (dim / m) as f64 * (256f64).log2() / dim as f64;
            let got = bits_per_dimension(dim, m, 256);
            check!(got == want && by_formula == want, "dim {dim} m {m}: {got} bits/dim");
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let sample = gaussian(&mut rng, 4000 * 8);
    let (cb, _) = train_pq(
        &sample,
        8,
        PqTrainConfig {
            subvector_dim: 4,
            k: 256,
            iterations: 3,
            seed: 0,
        },
    )?;
    check!(cb.bits_per_dimension() == 2.0, "trained codebook reports {}", cb.bits_per_dimension());

    let cfg = SyntheticConfig {
        docs: 100,
        tokens_per_doc: 30,
        queries: 20,
        dim: 8,
        seed: 9,
        ..Default::default()
    };
    let data = generate_synthetic(&cfg)?;
    let router = random_router(&mut rng, 8, cfg.vocab);
    let docs = route_all(&data.docs, &router, 5)?;
    let queries = route_all(&data.queries, &router, 1)?;
    let index = build_index(&docs, IndexConfig::new(cfg.vocab, 0.0))?;
    let vectors = sample_index_vectors(&index, lexroute::quantizer::DEFAULT_SAMPLE_LIMIT, 0)?;
    let (cb, report) = train_pq(
        &vectors,
        8,
        PqTrainConfig {
            subvector_dim: 2,
            k: 16,
            iterations: lexroute::quantizer::DEFAULT_ITERATIONS,
            seed: 0,
        },
    )?;
    for w in report.mse_trace.windows(2) {
        check!(w[1] <= w[0], "k-means MSE increased: {:?}", report.mse_trace);
    }
    let quantized = quantize_index(&index, &cb)?;
    let exact = Searcher::new(&index);
    let approx = Searcher::new(&quantized).with_codebook(&cb)?;
    let mut overlap = 0.0;
    for q in &queries {
        let a: BTreeSet<String> = exact.search(q, 10, false)?.ranked.into_iter().map(|r| r.0).collect();
        let b: BTreeSet<String> = approx.search(q, 10, false)?.ranked.into_iter().map(|r| r.0).collect();
        overlap += a.intersection(&b).count() as f64 / a.len().max(1) as f64;
    }
    overlap /= queries.len() as f64;
    let detail = format!(
        "2 and 1 bits/dim exact; k=16 m=2 top-10 overlap {overlap:.3} over {} queries; MSE {:.4} -> {:.4} in {} steps",
        queries.len(),
        report.mse_trace[0],
        report.mse_trace[report.mse_trace.len() - 1],
        report.mse_trace.len() - 1
    );
    check!(overlap >= 0.7, "{detail}");
    Ok(detail)
}

/// Reference metric values; `None` when the query does not count.
fn naive_metric(metric: &str, k: usize, ranked: &[(String, f32)], judged: &BTreeMap<String, u32>) -> Option<f64> {
    let grade = |d: &String| *judged.get(d).unwrap_or(&0);
    let cut = ranked.len().min(k);
    match metric {
        "mrr" => {
            for (i, (d, _)) in ranked[..cut].iter().enumerate() {
                if grade(d) >= 1 {
                    return Some(1.0 / (i as f64 + 1.0));
                }
            }
            Some(0.0)
        }
        "ndcg" => {
            let mut dcg = 0.0;
            for (i, (d, _)) in ranked[..cut].iter().enumerate() {
                dcg += (2f64.powi(grade(d) as i32) - 1.0) / (i as f64 + 2.0).log2();
            }
            let mut grades: Vec<u32> = judged.values().copied().collect();
            grades.sort();
            grades.reverse();
            let mut idcg = 0.0;
            for (i, g) in grades.iter().take(k).enumerate() {
                idcg += (2f64.powi(*g as i32) - 1.0) / (i as f64 + 2.0).log2();
            }
            if idcg == 0.0 {
                None
            } else {
                Some(dcg / idcg)
            }
        }
        _ => {
            let relevant = judged.values().filter(|&&g| g >= 1).count();
            if relevant == 0 {
                return None;
            }
            let hit = ranked[..cut].iter().filter(|(d, _)| grade(d) >= 1).count();
            Some(hit as f64 / relevant as f64)
        }
    }
}

fn metrics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let mut run = Run::new();
        let mut qrels = Qrels::new();
        for q in 0..rng.random_range(1..=8) {
            let qid = format!("q{q}");
            let mut pool: Vec<usize> = (0..30).collect();
            let n = rng.random_range(0..=25);
            let mut ranked = Vec::new();
            for i in 0..n {
                let d = pool.swap_remove(rng.random_range(0..pool.len()));
                ranked.push((format!("d{d}"), 100.0 - i as f32));
            }
            run.insert(qid.clone(), ranked);
            if rng.random_bool(0.8) {
                let judged = (0..rng.random_range(0..=10))
                    .map(|_| (format!("d{}", rng.random_range(0..30)), rng.random_range(0..=3)))
                    .collect();
                qrels.insert(qid, judged);
            }
        }
        // judgments for a query absent from the run
        qrels.insert("extra".into(), BTreeMap::from([("d1".to_string(), 2)]));
        for (name, k) in [("mrr", 10usize), ("ndcg", 10), ("recall", rng.random_range(1..=30))] {
            let metric: Metric = format!("{name}@{k}").parse()?;
            let got = evaluate(&run, &qrels, metric, &EvalOptions::default())?;
            let values: Vec<f64> = run
                .iter()
                .filter_map(|(q, ranked)| naive_metric(name, k, ranked, qrels.get(q)?))
                .collect();
            let want = if values.is_empty() {
                0.0
            } else {
                values.iter().sum::<f64>() / values.len() as f64
            };
            let e = (got.value - want).abs();
            worst = worst.max(e);
            check!(e <= 1e-9, "{metric}: {} vs reference {want}", got.value);
            check!(got.evaluated == values.len(), "{metric}: {} queries evaluated, expected {}", got.evaluated, values.len());
        }
    }

    let run = Run::from([("q".to_string(), vec![("g1".to_string(), 2.0), ("g2".to_string(), 1.0)])]);
    let qrels = Qrels::from([("q".to_string(), BTreeMap::from([("g1".to_string(), 1), ("g2".to_string(), 2)]))]);
    let got = evaluate(&run, &qrels, Metric::Ndcg(2), &EvalOptions::default())?.value;
    let l3 = 3f64.log2();
    let hand = (1.0 / 1.0 + 3.0 / l3) / (3.0 / 1.0 + 1.0 / l3);
    let detail = format!(
        "100 random run/qrels pairs, max abs diff {worst:.1e}; hand nDCG@2 {got:.6} vs (1/1 + 3/log2 3)/(3/1 + 1/log2 3) = {hand:.6} \
         (the quoted 0.6131 does not equal this expression)"
    );
    check!((got - hand).abs() <= 1e-4, "{detail}");
    Ok(detail)
}

/// Runs `f` and reports whether it panicked.
fn panics(f: impl FnOnce()) -> bool {
    catch_unwind(AssertUnwindSafe(f)).is_err()
}

fn serialization() -> Outcome {
    let cfg = SyntheticConfig {
        docs: 40,
        tokens_per_doc: 12,
        queries: 1,
        dim: 8,
        seed: 21,
        ..Default::default()
    };
    let data = generate_synthetic(&cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let router = random_router(&mut rng, 8, cfg.vocab);
    let docs = route_all(&data.docs, &router, 5)?;
    let index = build_index(&docs, IndexConfig::new(cfg.vocab, 0.2).with_cls(true))?;
    let vectors = sample_index_vectors(&index, 10_000, 0)?;
    let (cb, _) = train_pq(
        &vectors,
        8,
        PqTrainConfig {
            subvector_dim: 2,
            k: 16,
            iterations: 5,
            seed: 0,
        },
    )?;
    let quantized = quantize_index(&index, &cb)?;

    let index_bytes = index.to_bytes()?;
    let quantized_bytes = quantized.to_bytes()?;
    let cb_bytes = cb.to_bytes()?;
    let router_bytes = router.to_bytes();
    let back = InvertedIndex::from_bytes(&index_bytes)?;
    check!(back == index && back.to_bytes()? == index_bytes, "index round trip differs");
    let back = InvertedIndex::from_bytes(&quantized_bytes)?;
    check!(back == quantized && back.to_bytes()? == quantized_bytes, "quantized index round trip differs");
    let back = PqCodebook::from_bytes(&cb_bytes)?;
    check!(back == cb && back.to_bytes()? == cb_bytes, "codebook round trip differs");
    let back = RouterParams::from_bytes(&router_bytes)?;
    check!(back == router && back.to_bytes() == router_bytes, "router round trip differs");

    type Decode = fn(&[u8]) -> bool;
    let formats: [(&str, &[u8], Decode); 4] = [
        ("index", &index_bytes, |b| InvertedIndex::from_bytes(b).is_ok()),
        ("quantized index", &quantized_bytes, |b| InvertedIndex::from_bytes(b).is_ok()),
        ("codebook", &cb_bytes, |b| PqCodebook::from_bytes(b).is_ok()),
        ("router", &router_bytes, |b| RouterParams::from_bytes(b).is_ok()),
    ];
    let quiet = std::panic::take_hook();
    std::panic::set_hook(Box::new(|_| {}));
    let result = (|| -> Outcome {
        let mut mutated_ok = 0;
        for (name, bytes, decode) in formats {
            for (at, what) in [(0usize, "magic"), (4, "version")] {
                let mut bad = bytes.to_vec();
                bad[at] ^= 0xff;
                check!(!decode(&bad), "{name}: corrupted {what} accepted");
            }
            for i in 0..1000 {
                let cut = rng.random_range(0..bytes.len());
                let mut accepted = false;
                check!(
                    !panics(|| accepted = decode(&bytes[..cut])),
                    "{name}: panic on truncation {i} to {cut} bytes"
                );
                check!(!accepted, "{name}: truncation to {cut} of {} bytes accepted", bytes.len());
            }
            for i in 0..1000 {
                let mut bad = bytes.to_vec();
                let at = rng.random_range(0..bad.len().min(48));
                bad[at] = rng.random();
                let mut accepted = false;
                check!(!panics(|| accepted = decode(&bad)), "{name}: panic on header mutation {i} at byte {at}");
                mutated_ok += accepted as usize;
            }
        }
        Ok(format!(
            "index, quantized index, codebook and router round trips bit-identical; bad magic/version rejected; \
             4x1000 truncations all rejected, 4x1000 header mutations without panics ({mutated_ok} still decodable)"
        ))
    })();
    std::panic::set_hook(quiet);
    result
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("oracle equivalence", oracle_equivalence),
        ("routing reductions", routing_reductions),
        ("gradient verification", gradient_verification),
        ("load balancing effect", load_balancing),
        ("sparsification effect", sparsification),
        ("pruning trade-off", pruning_tradeoff),
        ("dot-product proxy", dot_product_proxy),
        ("product quantization", pq_behavior),
        ("metrics", metrics),
        ("serialization", serialization),
    ];
    let mut failed = 0;
    for (name, run) in criteria {
        let start = Instant::now();
        let outcome = catch_unwind(run).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}").into())
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {name} ({secs:.2}s): {detail}"),
            Err(e) => {
                failed += 1;
                println!("FAIL {name} ({secs:.2}s): {e}");
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
