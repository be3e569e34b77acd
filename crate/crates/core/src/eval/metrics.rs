use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use super::{Qrels, Run};
use crate::error::{Error, Result};

/// What to do with a run query that has no judgments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub enum MissingQuery {
    #[default]
    Skip,
    Zero,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct EvalOptions {
    /// Minimum grade counted as relevant by MRR and recall.
    pub relevance_threshold: u32,
    pub missing: MissingQuery,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            relevance_threshold: 1,
            missing: MissingQuery::Skip,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Metric {
    Mrr(usize),
    Ndcg(usize),
    Recall(usize),
}

impl Metric {
    fn cutoff(self) -> usize {
        match self {
            Metric::Mrr(k) | Metric::Ndcg(k) | Metric::Recall(k) => k,
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Metric::Mrr(k) => write!(f, "mrr@{k}"),
            Metric::Ndcg(k) => write!(f, "ndcg@{k}"),
            Metric::Recall(k) => write!(f, "recall@{k}"),
        }
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (name, k) = s
            .split_once('@')
            .ok_or_else(|| Error::contract(format!("metric {s:?} needs a cutoff, e.g. mrr@10")))?;
        let k: usize = k
            .parse()
            .map_err(|_| Error::contract(format!("bad cutoff in {s:?}")))?;
        match name.to_ascii_lowercase().as_str() {
            "mrr" => Ok(Metric::Mrr(k)),
            "ndcg" => Ok(Metric::Ndcg(k)),
            "recall" | "r" => Ok(Metric::Recall(k)),
            _ => Err(Error::contract(format!("unknown metric {name:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricReport {
    pub metric: String,
    pub value: f64,
    pub evaluated: usize,
    /// Run queries absent from the judgments.
    pub missing: Vec<String>,
    /// Queries skipped because nothing could be relevant for them.
    pub skipped: usize,
}

fn per_query(metric: Metric, ranked: &[(String, f32)], judged: &std::collections::BTreeMap<String, u32>, opts: &EvalOptions) -> Option<f64> {
    let cutoff = metric.cutoff();
    let top = &ranked[..ranked.len().min(cutoff)];
    let grade = |doc: &str| judged.get(doc).copied().unwrap_or(0);
    let relevant = |doc: &str| grade(doc) >= opts.relevance_threshold;
    match metric {
        Metric::Mrr(_) => Some(
            top.iter()
                .position(|(d, _)| relevant(d))
                .map_or(0.0, |r| 1.0 / (r + 1) as f64),
        ),
        Metric::Ndcg(_) => {
            let gain = |g: u32| 2f64.powi(g as i32) - 1.0;
            let discount = |rank: usize| ((rank + 2) as f64).log2();
            let dcg: f64 = top
                .iter()
                .enumerate()
                .map(|(r, (d, _))| gain(grade(d)) / discount(r))
                .sum();
            let mut ideal: Vec<u32> = judged.values().copied().collect();
            ideal.sort_unstable_by(|a, b| b.cmp(a));
            let idcg: f64 = ideal
                .iter()
                .take(cutoff)
                .enumerate()
                .map(|(r, &g)| gain(g) / discount(r))
                .sum();
            (idcg > 0.0).then(|| dcg / idcg)
        }
        Metric::Recall(_) => {
            let total = judged.values().filter(|&&g| g >= opts.relevance_threshold).count();
            if total == 0 {
                return None;
            }
            let found = top.iter().filter(|(d, _)| relevant(d)).count();
            Some(found as f64 / total as f64)
        }
    }
}

/// Mean of a metric over the queries of `run`.
pub fn evaluate(run: &Run, qrels: &Qrels, metric: Metric, opts: &EvalOptions) -> Result<MetricReport> {
    if metric.cutoff() == 0 {
        return Err(Error::contract("metric cutoff must be >= 1"));
    }
    let mut sum = 0.0;
    let mut evaluated = 0;
    let mut skipped = 0;
    let mut missing = Vec::new();
    for (qid, ranked) in run {
        match qrels.get(qid) {
            None => {
                missing.push(qid.clone());
                if opts.missing == MissingQuery::Zero {
                    evaluated += 1;
                }
            }
            Some(judged) => match per_query(metric, ranked, judged, opts) {
                Some(v) => {
                    sum += v;
                    evaluated += 1;
                }
                None => skipped += 1,
            },
        }
    }
    Ok(MetricReport {
        metric: metric.to_string(),
        value: if evaluated == 0 { 0.0 } else { sum / evaluated as f64 },
        evaluated,
        missing,
        skipped,
    })
}

pub fn metric_mrr(run: &Run, qrels: &Qrels, cutoff: usize) -> Result<f64> {
    Ok(evaluate(run, qrels, Metric::Mrr(cutoff), &EvalOptions::default())?.value)
}

pub fn metric_ndcg(run: &Run, qrels: &Qrels, cutoff: usize) -> Result<f64> {
    Ok(evaluate(run, qrels, Metric::Ndcg(cutoff), &EvalOptions::default())?.value)
}

pub fn metric_recall(run: &Run, qrels: &Qrels, cutoff: usize) -> Result<f64> {
    Ok(evaluate(run, qrels, Metric::Recall(cutoff), &EvalOptions::default())?.value)
}
