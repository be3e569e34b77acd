mod args;
mod config;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use clap::Parser;
use lexroute::eval::{self, EvalOptions, Metric, Run};
use lexroute::index::{IndexMeta, InvertedIndex};
use lexroute::quantizer::{quantize_index, sample_index_vectors, PqTrainConfig};
use lexroute::router::{route_by_token_id, route_sequence, route_to_single_key};
use lexroute::training::{run_gradient_checks, toy_train, write_trace, ToyTrainConfig};
use lexroute::{
    atomic_write, build_index, generate_synthetic, index_stats, lexical_router, load_index, measure_latency,
    prune_index, read_embeddings, save_index, train_pq, verify_against_brute_force, write_embeddings,
    EncodedSequence, IndexConfig, PqCodebook, RouterParams, Scheme, Searcher, SyntheticConfig,
};
use serde_json::json;

use args::*;

fn print_json(value: &serde_json::Value) -> Result<()> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

fn load_embeddings(path: &Path) -> Result<Vec<EncodedSequence>> {
    read_embeddings(path).with_context(|| format!("reading embeddings {}", path.display()))
}

fn load_router(path: &Path) -> Result<RouterParams> {
    RouterParams::load(path).with_context(|| format!("reading router {}", path.display()))
}

/// Assigns routes according to `scheme`. Dynamic routing uses the router
/// when one is given and otherwise keeps the routes already in the file.
fn apply_scheme(
    seqs: &[EncodedSequence],
    scheme: Scheme,
    router: Option<&RouterParams>,
    max_keys: usize,
) -> Result<Vec<EncodedSequence>> {
    match scheme {
        Scheme::Dynamic => match router {
            Some(r) => seqs
                .iter()
                .map(|s| route_sequence(s, r, max_keys).map_err(Into::into))
                .collect(),
            None => Ok(seqs.to_vec()),
        },
        Scheme::Static => Ok(seqs.iter().map(route_by_token_id).collect()),
        Scheme::AllToAll => Ok(seqs.iter().map(|s| route_to_single_key(s, 0)).collect()),
        Scheme::Single => bail!("the single-vector scheme has no token index; use --with-cls"),
    }
}

fn infer_keys(seqs: &[EncodedSequence]) -> usize {
    seqs.iter()
        .flat_map(|s| &s.tokens)
        .flat_map(|t| &t.routes)
        .map(|r| r.key as usize + 1)
        .max()
        .unwrap_or(1)
}

fn meta_json(meta: &IndexMeta) -> serde_json::Value {
    serde_json::to_value(meta).unwrap_or_default()
}

fn generate(a: GenerateArgs) -> Result<()> {
    let cfg = SyntheticConfig {
        docs: a.docs,
        tokens_per_doc: a.tokens_per_doc,
        queries: a.queries,
        query_tokens: a.query_tokens,
        dim: a.dim,
        vocab: a.vocab,
        seed: a.seed,
        cluster_count: a.clusters,
        skew: a.skew,
        noise: a.noise,
    };
    let data = generate_synthetic(&cfg)?;
    std::fs::create_dir_all(&a.out_dir)?;
    let ext = match a.format {
        lexroute::EmbeddingFormat::Jsonl => "jsonl",
        lexroute::EmbeddingFormat::Binary => "ctem",
    };
    let docs = a.out_dir.join(format!("docs.{ext}"));
    let queries = a.out_dir.join(format!("queries.{ext}"));
    let qrels = a.out_dir.join("qrels.txt");
    let router = a.out_dir.join("router.lxrt");
    write_embeddings(&data.docs, &docs, a.format)?;
    write_embeddings(&data.queries, &queries, a.format)?;
    eval::write_qrels(&data.qrels, &qrels)?;
    lexical_router(&data.prototypes, a.router_gain, a.router_bias)?.save(&router)?;
    print_json(&json!({
        "docs": docs, "queries": queries, "qrels": qrels, "router": router,
        "config": cfg,
    }))
}

fn route(a: RouteArgs) -> Result<()> {
    let router = load_router(&a.router)?;
    let seqs = load_embeddings(&a.input)?;
    let routed = apply_scheme(&seqs, Scheme::Dynamic, Some(&router), a.max_keys)?;
    write_embeddings(&routed, &a.output, a.format)?;
    let deactivated = routed.iter().flat_map(|s| &s.tokens).filter(|t| t.is_deactivated()).count();
    print_json(&json!({"sequences": routed.len(), "deactivated_tokens": deactivated}))
}

fn index(a: IndexArgs) -> Result<()> {
    let router = a.routing.router.as_deref().map(load_router).transpose()?;
    let docs = apply_scheme(&load_embeddings(&a.docs)?, a.scheme, router.as_ref(), a.routing.doc_keys)?;
    let keys = match (a.keys, &router, a.scheme) {
        (Some(k), _, _) => k,
        (None, _, Scheme::AllToAll) => 1,
        (None, Some(r), Scheme::Dynamic) => r.key_count(),
        (None, _, _) => infer_keys(&docs),
    };
    let cfg = IndexConfig::new(keys, a.tau).with_cls(a.with_cls).scheme(a.scheme);
    let built = build_index(&docs, cfg)?;
    save_index(&built, &a.out)?;
    let stats = index_stats(&built);
    print_json(&json!({
        "meta": meta_json(&built.meta),
        "total_entries": built.total_entries(),
        "balance_ratio": stats.balance_ratio(),
        "deactivated_tokens": stats.deactivated_tokens(),
    }))
}

fn prune(a: PruneArgs) -> Result<()> {
    let idx = load_index(&a.index)?;
    let before = idx.total_entries();
    let pruned = prune_index(&idx, a.tau)?;
    save_index(&pruned, &a.out)?;
    print_json(&json!({"tau": a.tau, "entries_before": before, "entries_after": pruned.total_entries()}))
}

fn quantize(a: QuantizeArgs) -> Result<()> {
    let idx = load_index(&a.index)?;
    ensure!(idx.meta.quantized_subspaces.is_none(), "index is already quantized");
    let sample = sample_index_vectors(&idx, a.sample_limit, a.seed)?;
    let cfg = PqTrainConfig {
        subvector_dim: a.subvector_dim,
        k: a.k,
        iterations: a.iterations,
        seed: a.seed,
    };
    let (cb, report) = train_pq(&sample, idx.meta.dim, cfg)?;
    let q = quantize_index(&idx, &cb)?;
    cb.save(&a.codebook_out)?;
    save_index(&q, &a.out)?;
    print_json(&json!({
        "bits_per_dimension": cb.bits_per_dimension(),
        "effective_k": report.effective_k,
        "mse_trace": report.mse_trace,
        "sampled_vectors": sample.len() / idx.meta.dim.max(1),
    }))
}

fn load_codebook(path: Option<&Path>, idx: &InvertedIndex) -> Result<Option<PqCodebook>> {
    match path {
        Some(p) => Ok(Some(
            PqCodebook::load(p).with_context(|| format!("reading codebook {}", p.display()))?,
        )),
        None if idx.meta.quantized_subspaces.is_some() => bail!("quantized index needs --codebook"),
        None => Ok(None),
    }
}

fn searcher<'a>(idx: &'a InvertedIndex, cb: Option<&'a PqCodebook>, parallel: bool) -> Result<Searcher<'a>> {
    let s = Searcher::new(idx).parallel(parallel);
    Ok(match cb {
        Some(cb) => s.with_codebook(cb)?,
        None => s,
    })
}

fn search(a: SearchArgs) -> Result<()> {
    let idx = load_index(&a.index)?;
    let scheme = idx.meta.scheme;
    if let Some(s) = a.scheme {
        ensure!(s == scheme, "index was built with the {scheme} scheme, not {s}");
    }
    let router = a.routing.router.as_deref().map(load_router).transpose()?;
    let queries = apply_scheme(&load_embeddings(&a.queries)?, scheme, router.as_ref(), a.routing.query_keys)?;
    let cb = load_codebook(a.codebook.as_deref(), &idx)?;
    let s = searcher(&idx, cb.as_ref(), a.parallel)?;

    let mut run = Run::new();
    let mut dots = 0u64;
    for q in &queries {
        let r = s.search(q, a.top_k, a.with_cls)?;
        dots += r.dot_products_used;
        run.insert(q.id.clone(), r.ranked);
    }
    match &a.out {
        Some(p) => eval::write_run(&run, p)?,
        None => {
            let mut out = std::io::stdout().lock();
            for (qid, ranked) in &run {
                for (i, (doc, score)) in ranked.iter().enumerate() {
                    writeln!(out, "{qid} {doc} {} {score}", i + 1)?;
                }
            }
        }
    }
    let mut summary = json!({
        "queries": queries.len(),
        "mean_dot_products": dots as f64 / queries.len().max(1) as f64,
    });
    if a.oracle_check {
        let docs_path = a.docs.as_deref().expect("clap requires --docs");
        let docs = apply_scheme(&load_embeddings(docs_path)?, scheme, router.as_ref(), a.routing.doc_keys)?;
        let report = verify_against_brute_force(&idx, &docs, &queries, a.top_k, a.with_cls, a.oracle_tolerance)?;
        summary["oracle"] = serde_json::to_value(&report)?;
        if !report.passed() {
            eprintln!("{}", serde_json::to_string_pretty(&summary)?);
            bail!("oracle check failed: {} mismatches", report.mismatches.len());
        }
    }
    eprintln!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

fn evaluate(a: EvalArgs) -> Result<()> {
    let run = eval::read_run(&a.run)?;
    let qrels = eval::read_qrels(&a.qrels)?;
    let opts = EvalOptions {
        relevance_threshold: a.relevance_threshold,
        missing: a.missing,
    };
    let mut results = BTreeMap::new();
    let mut missing = Vec::new();
    for name in a.metrics.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let metric: Metric = name.parse()?;
        let report = eval::evaluate(&run, &qrels, metric, &opts)?;
        missing = report.missing.clone();
        results.insert(report.metric.clone(), json!({"value": report.value, "evaluated": report.evaluated, "skipped": report.skipped}));
    }
    if !missing.is_empty() {
        eprintln!(
            "warning: {} run queries have no judgments ({})",
            missing.len(),
            if a.missing == eval::MissingQuery::Skip { "skipped" } else { "scored 0" }
        );
    }
    print_json(&json!({"metrics": results, "queries_without_judgments": missing}))
}

fn stats(a: StatsArgs) -> Result<()> {
    let idx = load_index(&a.index)?;
    let st = index_stats(&idx);
    print_json(&json!({
        "meta": meta_json(&idx.meta),
        "balance_ratio": st.balance_ratio(),
        "deactivated_tokens": st.deactivated_tokens(),
        "stats": st,
    }))
}

fn bench(a: BenchArgs) -> Result<()> {
    let idx = load_index(&a.index)?;
    let router = a.routing.router.as_deref().map(load_router).transpose()?;
    let queries = apply_scheme(&load_embeddings(&a.queries)?, idx.meta.scheme, router.as_ref(), a.routing.query_keys)?;
    let cb = load_codebook(a.codebook.as_deref(), &idx)?;
    let s = searcher(&idx, cb.as_ref(), a.parallel)?;
    let report = measure_latency(&queries, &s, a.top_k, a.trials, a.with_cls)?;
    let dots: u64 = queries.iter().map(|q| s.count_dot_products(q, a.with_cls)).sum();
    print_json(&json!({
        "latency": report,
        "mean_dot_products": dots as f64 / queries.len() as f64,
        "threads": rayon::current_num_threads(),
    }))
}

fn losscheck(a: LosscheckArgs) -> Result<()> {
    let report = run_gradient_checks(a.configs, a.seed, a.step, a.min_margin)?;
    print_json(&serde_json::to_value(&report)?)?;
    ensure!(
        report.max_relative_error < a.tolerance,
        "max relative error {} exceeds {}",
        report.max_relative_error,
        a.tolerance
    );
    Ok(())
}

fn toytrain(a: ToytrainArgs) -> Result<()> {
    let mut cfg = ToyTrainConfig {
        steps: a.steps,
        seed: a.seed,
        ..Default::default()
    };
    cfg.data.seed = a.seed;
    if let Some(lr) = a.learning_rate {
        cfg.learning_rate = lr;
    }
    if let Some(alpha) = a.alpha {
        cfg.alpha = alpha;
    }
    if let Some(beta) = a.beta {
        cfg.beta = beta;
    }
    let result = toy_train(&cfg)?;
    let mut buf = Vec::new();
    write_trace(&result.trace, &mut buf)?;
    match &a.trace {
        Some(p) => atomic_write(p, &buf)?,
        None => std::io::stdout().lock().write_all(&buf)?,
    }
    if let Some(p) = &a.router_out {
        result.params.save(p)?;
    }
    eprintln!(
        "{}",
        json!({
            "final_balance_ratio": result.final_balance_ratio,
            "final_deactivated_tokens": result.final_deactivated_tokens,
        })
    );
    Ok(())
}

fn init_threads() -> Result<()> {
    let Ok(raw) = std::env::var("LEXROUTE_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .with_context(|| format!("LEXROUTE_THREADS must be a positive integer, got {raw:?}"))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

fn run() -> Result<()> {
    let argv = config::merge_config(std::env::args_os().collect())?;
    let cli = args::Cli::parse_from(argv);
    init_threads()?;
    match cli.command {
        Command::Generate(a) => generate(a),
        Command::Route(a) => route(a),
        Command::Index(a) => index(a),
        Command::Prune(a) => prune(a),
        Command::Quantize(a) => quantize(a),
        Command::Search(a) => search(a),
        Command::Eval(a) => evaluate(a),
        Command::Stats(a) => stats(a),
        Command::Bench(a) => bench(a),
        Command::Losscheck(a) => losscheck(a),
        Command::Toytrain(a) => toytrain(a),
    }
}

fn is_broken_pipe(e: &anyhow::Error) -> bool {
    e.chain().any(|c| {
        let kind = c
            .downcast_ref::<std::io::Error>()
            .map(std::io::Error::kind)
            .or_else(|| c.downcast_ref::<serde_json::Error>().and_then(serde_json::Error::io_error_kind));
        kind == Some(std::io::ErrorKind::BrokenPipe)
    })
}

fn main() -> std::process::ExitCode {
    match run() {
        Ok(()) => std::process::ExitCode::SUCCESS,
        // a closed stdout (e.g. piped into `head`) is not a failure
        Err(e) if is_broken_pipe(&e) => std::process::ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            std::process::ExitCode::FAILURE
        }
    }
}
