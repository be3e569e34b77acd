use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use lexroute::eval::MissingQuery;
use lexroute::{EmbeddingFormat, Scheme};

#[derive(Parser, Debug)]
#[command(name = "lexroute", version, about = "Multi-vector retrieval with dynamic lexical routing")]
pub struct Cli {
    /// JSON file of default flag values; flags given on the command line win.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic corpus, queries, judgments and a starting router.
    Generate(GenerateArgs),
    /// Route token embeddings with a router.
    Route(RouteArgs),
    /// Build an inverted index from document embeddings.
    Index(IndexArgs),
    /// Drop postings with weight at or below a threshold.
    Prune(PruneArgs),
    /// Train a product quantizer and compress an index.
    Quantize(QuantizeArgs),
    /// Retrieve documents for a query file.
    Search(SearchArgs),
    /// Score a run file against judgments.
    Eval(EvalArgs),
    /// Report the posting-size distribution of an index.
    Stats(StatsArgs),
    /// Measure per-stage search latency.
    Bench(BenchArgs),
    /// Verify training-loss gradients with finite differences.
    Losscheck(LosscheckArgs),
    /// Train a router on synthetic data with gradient descent.
    Toytrain(ToytrainArgs),
}

fn parse_missing(s: &str) -> Result<MissingQuery, String> {
    match s {
        "skip" => Ok(MissingQuery::Skip),
        "zero" => Ok(MissingQuery::Zero),
        _ => Err(format!("expected skip or zero, got {s:?}")),
    }
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 100)]
    pub docs: usize,
    #[arg(long, default_value_t = 30)]
    pub tokens_per_doc: usize,
    #[arg(long, default_value_t = 20)]
    pub queries: usize,
    #[arg(long, default_value_t = 8)]
    pub query_tokens: usize,
    #[arg(long, default_value_t = 8)]
    pub dim: usize,
    #[arg(long, default_value_t = 50)]
    pub vocab: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 10)]
    pub clusters: usize,
    #[arg(long, default_value_t = 1.0)]
    pub skew: f64,
    #[arg(long, default_value_t = 0.3)]
    pub noise: f64,
    #[arg(long, default_value_t = EmbeddingFormat::Jsonl)]
    pub format: EmbeddingFormat,
    #[arg(long, default_value_t = 1.0)]
    pub router_gain: f32,
    #[arg(long, default_value_t = 0.0)]
    pub router_bias: f32,
}

#[derive(Args, Debug)]
pub struct RouteArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub router: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub max_keys: usize,
    #[arg(long, default_value_t = EmbeddingFormat::Jsonl)]
    pub format: EmbeddingFormat,
}

/// How token routes are obtained for a scheme.
#[derive(Args, Debug, Clone)]
pub struct RoutingArgs {
    /// Router applied to dynamic-scheme inputs; without it the routes
    /// stored in the embedding file are used.
    #[arg(long)]
    pub router: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub query_keys: usize,
    #[arg(long, default_value_t = 5)]
    pub doc_keys: usize,
}

#[derive(Args, Debug)]
pub struct IndexArgs {
    #[arg(long)]
    pub docs: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0.0)]
    pub tau: f32,
    #[arg(long, default_value_t = Scheme::Dynamic)]
    pub scheme: Scheme,
    /// Key vocabulary size; inferred from the router or the data if absent.
    #[arg(long)]
    pub keys: Option<usize>,
    #[arg(long)]
    pub with_cls: bool,
    #[command(flatten)]
    pub routing: RoutingArgs,
}

#[derive(Args, Debug)]
pub struct PruneArgs {
    #[arg(long)]
    pub index: PathBuf,
    #[arg(long)]
    pub tau: f32,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct QuantizeArgs {
    #[arg(long)]
    pub index: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub codebook_out: PathBuf,
    /// Subvector dimension.
    #[arg(long, short = 'm', default_value_t = 2)]
    pub subvector_dim: usize,
    #[arg(long, short = 'k', default_value_t = 256)]
    pub k: usize,
    #[arg(long, default_value_t = lexroute::quantizer::DEFAULT_ITERATIONS)]
    pub iterations: usize,
    #[arg(long, default_value_t = lexroute::quantizer::DEFAULT_SAMPLE_LIMIT)]
    pub sample_limit: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct SearchArgs {
    #[arg(long)]
    pub index: PathBuf,
    #[arg(long)]
    pub queries: PathBuf,
    /// Must match the scheme the index was built with.
    #[arg(long)]
    pub scheme: Option<Scheme>,
    #[arg(long, default_value_t = 1000)]
    pub top_k: usize,
    #[arg(long)]
    pub with_cls: bool,
    #[arg(long)]
    pub codebook: Option<PathBuf>,
    /// Run file to write; printed to stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Compare every query against exhaustive scoring of `--docs`.
    #[arg(long, requires = "docs")]
    pub oracle_check: bool,
    #[arg(long)]
    pub docs: Option<PathBuf>,
    #[arg(long, default_value_t = 1e-5)]
    pub oracle_tolerance: f64,
    #[arg(long)]
    pub parallel: bool,
    #[command(flatten)]
    pub routing: RoutingArgs,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long)]
    pub qrels: PathBuf,
    /// Comma-separated metrics such as `mrr@10,ndcg@10,recall@1000`.
    #[arg(long, default_value = "mrr@10,ndcg@10,recall@1000")]
    pub metrics: String,
    /// Treatment of run queries without judgments: skip or zero.
    #[arg(long, default_value = "skip", value_parser = parse_missing)]
    pub missing: MissingQuery,
    #[arg(long, default_value_t = 1)]
    pub relevance_threshold: u32,
}

#[derive(Args, Debug)]
pub struct StatsArgs {
    #[arg(long)]
    pub index: PathBuf,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    #[arg(long)]
    pub index: PathBuf,
    #[arg(long)]
    pub queries: PathBuf,
    #[arg(long, default_value_t = 1000)]
    pub top_k: usize,
    #[arg(long, default_value_t = 5)]
    pub trials: usize,
    #[arg(long)]
    pub with_cls: bool,
    #[arg(long)]
    pub codebook: Option<PathBuf>,
    #[arg(long)]
    pub parallel: bool,
    #[command(flatten)]
    pub routing: RoutingArgs,
}

#[derive(Args, Debug)]
pub struct LosscheckArgs {
    #[arg(long, default_value_t = 50)]
    pub configs: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1e-5)]
    pub step: f64,
    /// Problems closer than this to a non-differentiable point are redrawn.
    #[arg(long, default_value_t = 1e-3)]
    pub min_margin: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
}

#[derive(Args, Debug)]
pub struct ToytrainArgs {
    #[arg(long, default_value_t = 200)]
    pub steps: usize,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    /// Seeds both the corpus and batch sampling.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// JSON Lines trace; printed to stdout when absent.
    #[arg(long)]
    pub trace: Option<PathBuf>,
    #[arg(long)]
    pub router_out: Option<PathBuf>,
}
