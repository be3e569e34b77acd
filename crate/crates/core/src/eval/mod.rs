//! Relevance judgments, run files and ranking metrics.

mod metrics;
mod trec;

pub use metrics::{evaluate, metric_mrr, metric_ndcg, metric_recall, EvalOptions, Metric, MetricReport, MissingQuery};
pub use trec::{parse_qrels, parse_run, read_qrels, read_run, write_qrels, write_run};

use std::collections::BTreeMap;

/// `query_id → doc_id → grade`.
pub type Qrels = BTreeMap<String, BTreeMap<String, u32>>;

/// `query_id → [(doc_id, score)]` in rank order.
pub type Run = BTreeMap<String, Vec<(String, f32)>>;
