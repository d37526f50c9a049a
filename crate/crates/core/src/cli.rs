use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

use ragbench::ablation::{
    pareto_front, render_chunking_summary, render_grid_csv, render_grid_matrix, render_pareto,
    run_grid, AblationGrid, GridCell, ParetoPoint,
};
use ragbench::chunking::write_chunks;
use ragbench::config::RunConfig;
use ragbench::corpus::{corpus_stats, write_beir_corpus, Corpus};
use ragbench::embedding::{Embedder, EmbedderSpec, TaskType};
use ragbench::evaluation::{
    aggregate_chunks_to_docs, build_chunk_index, chunk_all, evaluate_run, render_metric_csv,
    render_metric_table, Granularity, RankedList,
};
use ragbench::index::write_index;
use ragbench::latency::{measure_latency, render_latency_csv, render_latency_table, LatencyRow};
use ragbench::{Error, Result};

#[derive(Debug, Parser)]
#[command(name = "ragbench", version, about = "Dense retrieval benchmark harness")]
pub struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Run configuration (TOML).
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,

    /// Overrides `output_dir`.
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,

    /// Overrides `cache_dir`.
    #[arg(long, global = true)]
    cache_dir: Option<PathBuf>,

    /// Overrides `seed` everywhere it is used.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Caps worker threads.
    #[arg(long, global = true)]
    jobs: Option<usize>,
}

#[derive(Debug, Args, Default)]
struct ChunkArgs {
    #[arg(long)]
    strategy: Option<String>,
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    tau: Option<f64>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum CacheAction {
    Stats,
    Verify,
    Gc,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthesized corpus in BEIR layout.
    Synth {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Chunk the corpus and write chunk records.
    Chunk(ChunkArgs),
    /// Embed all chunks and queries into the cache.
    Embed(ChunkArgs),
    /// Build and persist the chunk index.
    Index(ChunkArgs),
    /// Full retrieval evaluation.
    Eval {
        #[command(flatten)]
        chunk: ChunkArgs,
        /// Recall cutoffs, e.g. `1,5,10`.
        #[arg(long, value_delimiter = ',')]
        k: Option<Vec<usize>>,
    },
    /// Single-query latency protocol.
    Latency(ChunkArgs),
    /// Strategy x size grid plus latency/quality front.
    Ablate,
    /// Inspect the embedding cache.
    Cache {
        #[arg(value_enum)]
        action: CacheAction,
    },
    /// Merge metric summaries from earlier runs into one table.
    Report {
        /// Run directories or metrics.jsonl files.
        #[arg(required = true)]
        paths: Vec<PathBuf>,
        #[arg(long)]
        csv: bool,
    },
}

fn load_config(cli: &Cli, chunk: Option<&ChunkArgs>) -> Result<RunConfig> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Error::Config("--config is required".into()))?;
    let mut cfg = RunConfig::load(path)?;
    if let Some(d) = &cli.output_dir {
        cfg.output_dir = d.clone();
    }
    if let Some(d) = &cli.cache_dir {
        cfg.cache_dir = Some(d.clone());
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
        cfg.propagate_seed();
    }
    if let Some(j) = cli.jobs {
        cfg.jobs = j;
    }
    if let Some(c) = chunk {
        if let Some(s) = &c.strategy {
            cfg.chunking.strategy = s.parse()?;
        }
        if let Some(s) = c.size {
            cfg.chunking.size = s;
        }
        if let Some(t) = c.tau {
            cfg.chunking.tau = t;
        }
    }
    if let Command::Eval { k: Some(k), .. } = &cli.command {
        cfg.eval.k_values = k.clone();
    }
    cfg.validate()?;
    if cfg.jobs > 0 {
        // only the first call can set the global pool
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.jobs)
            .build_global();
    }
    Ok(cfg)
}

fn write(path: &Path, contents: &str) -> Result<()> {
    if let Some(p) = path.parent() {
        fs::create_dir_all(p).map_err(|e| Error::io(p, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn echo_config(cfg: &RunConfig) -> Result<()> {
    write(&cfg.output_dir.join("config.resolved.toml"), &cfg.to_toml())
}

fn model_dir(cfg: &RunConfig, spec: &EmbedderSpec) -> PathBuf {
    let safe: String = spec
        .name
        .chars()
        .map(|c| if c.is_alphanumeric() || "-_.".contains(c) { c } else { '_' })
        .collect();
    cfg.output_dir.join(safe)
}

fn embedder(cfg: &RunConfig, spec: &EmbedderSpec) -> Result<Embedder> {
    Embedder::from_spec(spec.clone(), cfg.open_cache()?)
}

fn to_json(v: &impl serde::Serialize) -> String {
    serde_json::to_string_pretty(v).expect("serializable") + "\n"
}

pub fn run(cli: Cli) -> Result<u8> {
    match &cli.command {
        Command::Synth { out } => cmd_synth(&load_config(&cli, None)?, out.as_deref()),
        Command::Chunk(c) => cmd_chunk(&load_config(&cli, Some(c))?),
        Command::Embed(c) => cmd_embed(&load_config(&cli, Some(c))?),
        Command::Index(c) => cmd_index(&load_config(&cli, Some(c))?),
        Command::Eval { chunk, .. } => cmd_eval(&load_config(&cli, Some(chunk))?),
        Command::Latency(c) => cmd_latency(&load_config(&cli, Some(c))?),
        Command::Ablate => cmd_ablate(&load_config(&cli, None)?),
        Command::Cache { action } => cmd_cache(&load_config(&cli, None)?, *action),
        Command::Report { paths, csv } => cmd_report(paths, *csv),
    }
}

fn cmd_synth(cfg: &RunConfig, out: Option<&Path>) -> Result<u8> {
    if cfg.corpus.synth.is_none() {
        return Err(Error::Config("synth needs a [corpus.synth] section".into()));
    }
    let corpus = cfg.load_corpus()?;
    let out = out.map_or_else(|| cfg.output_dir.join("corpus"), Path::to_path_buf);
    write_beir_corpus(&corpus, &out)?;
    let stats = corpus_stats(&corpus);
    write(&out.join("stats.json"), &to_json(&stats))?;
    echo_config(cfg)?;
    println!(
        "wrote {} documents, {} queries to {}",
        stats.num_documents,
        stats.num_queries,
        out.display()
    );
    Ok(0)
}

fn first_embedder(cfg: &RunConfig) -> Result<Embedder> {
    embedder(cfg, &cfg.embedders()[0])
}

fn cmd_chunk(cfg: &RunConfig) -> Result<u8> {
    let corpus = cfg.load_corpus()?;
    let emb = first_embedder(cfg)?;
    let chunks = chunk_all(&corpus, &cfg.chunking, &emb)?;
    let path = cfg
        .output_dir
        .join(format!("chunks-{}.jsonl", cfg.chunking.label()));
    write_chunks(&chunks, &path)?;
    echo_config(cfg)?;
    println!("wrote {} chunks to {}", chunks.len(), path.display());
    Ok(0)
}

fn cmd_embed(cfg: &RunConfig) -> Result<u8> {
    if cfg.cache_dir.is_none() {
        log::warn!("no cache_dir configured; embeddings will not persist");
    }
    let corpus = cfg.load_corpus()?;
    for spec in cfg.embedders() {
        let emb = embedder(cfg, &spec)?;
        let chunks = chunk_all(&corpus, &cfg.chunking, &emb).map_err(|e| e.in_stage("chunk"))?;
        let texts: Vec<String> = chunks.iter().map(|c| c.text.clone()).collect();
        if !texts.is_empty() {
            emb.embed_batch(&texts, TaskType::RetrievalDocument)
                .map_err(|e| e.in_stage("embed"))?;
        }
        let queries: Vec<String> = corpus.queries.iter().map(|q| q.text.clone()).collect();
        if !queries.is_empty() {
            emb.embed_batch(&queries, TaskType::RetrievalQuery)
                .map_err(|e| e.in_stage("embed"))?;
        }
        println!("{}: {}", spec.name, serde_json::to_string(&emb.stats()).unwrap());
    }
    Ok(0)
}

fn cmd_index(cfg: &RunConfig) -> Result<u8> {
    let corpus = cfg.load_corpus()?;
    for spec in cfg.embedders() {
        let emb = embedder(cfg, &spec)?;
        let chunks = chunk_all(&corpus, &cfg.chunking, &emb).map_err(|e| e.in_stage("chunk"))?;
        let (index, _) = build_chunk_index(&chunks, &emb, &cfg.eval)?;
        let path = model_dir(cfg, &spec).join(format!("index-{}.bin", cfg.chunking.label()));
        write_index(&index, &path)?;
        println!(
            "{}: {} vectors, dim {}, {} vector bytes -> {}",
            spec.name,
            index.len(),
            index.dim(),
            index.vector_bytes(),
            path.display()
        );
    }
    echo_config(cfg)?;
    Ok(0)
}

fn cmd_eval(cfg: &RunConfig) -> Result<u8> {
    let corpus = cfg.load_corpus()?;
    let mut runs = Vec::new();
    for spec in cfg.embedders() {
        let emb = embedder(cfg, &spec)?;
        let run = evaluate_run(&corpus, &cfg.chunking, &emb, &cfg.eval)?;
        let dir = model_dir(cfg, &spec);
        write(&dir.join("metrics.jsonl"), &run.metrics.to_jsonl(&run.label()))?;
        write(&dir.join("run.json"), &to_json(&run))?;
        runs.push(run);
    }
    let rows: Vec<(String, Option<&_>)> = runs.iter().map(|r| (r.model.clone(), Some(&r.metrics))).collect();
    let table = render_metric_table(&rows);
    write(&cfg.output_dir.join("table.txt"), &table)?;
    write(&cfg.output_dir.join("table.csv"), &render_metric_csv(&rows))?;
    echo_config(cfg)?;
    print!("{table}");
    Ok(0)
}

/// Query-to-documents closure used for timing: query embedding skips the
/// cache so each run pays for encoding.
fn measure_model(cfg: &RunConfig, corpus: &Corpus, spec: &EmbedderSpec) -> Result<LatencyRow> {
    let emb = embedder(cfg, spec)?;
    let chunks = chunk_all(corpus, &cfg.chunking, &emb).map_err(|e| e.in_stage("chunk"))?;
    let (index, _) = build_chunk_index(&chunks, &emb, &cfg.eval)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.latency.seed);
    let query = corpus
        .queries
        .choose(&mut rng)
        .ok_or_else(|| Error::Data("latency needs at least one query".into()))?;
    let depth = cfg.eval.depth();
    let chunk_k = (depth * cfg.eval.oversample).min(index.len()).max(1);
    let text = vec![query.text.clone()];
    let stats = measure_latency(
        || {
            let v = emb.embed_uncached(&text, TaskType::RetrievalQuery)?;
            let hits = index.search(&v[0], chunk_k)?;
            let list = RankedList {
                query_id: query.query_id.clone(),
                hits: hits.into_iter().map(|h| (h.id, h.score)).collect(),
                granularity: Granularity::Chunk,
            };
            Ok(aggregate_chunks_to_docs(&list, depth))
        },
        &cfg.latency,
    )?;
    Ok(LatencyRow {
        model: spec.name.clone(),
        stats,
        cost_per_million_tokens: cfg.cost_per_million_tokens,
    })
}

fn cmd_latency(cfg: &RunConfig) -> Result<u8> {
    let corpus = cfg.load_corpus()?;
    let mut rows = Vec::new();
    for spec in cfg.embedders() {
        rows.push(measure_model(cfg, &corpus, &spec)?);
    }
    let table = render_latency_table(&rows);
    write(&cfg.output_dir.join("latency.txt"), &table)?;
    write(&cfg.output_dir.join("latency.csv"), &render_latency_csv(&rows))?;
    let mut jsonl = String::new();
    for r in &rows {
        jsonl.push_str(&serde_json::to_string(r).unwrap());
        jsonl.push('\n');
    }
    write(&cfg.output_dir.join("latency.jsonl"), &jsonl)?;
    echo_config(cfg)?;
    print!("{table}");
    Ok(0)
}

fn cmd_ablate(cfg: &RunConfig) -> Result<u8> {
    let corpus = cfg.load_corpus()?;
    let mut grids: Vec<AblationGrid> = Vec::new();
    let mut points = Vec::new();
    let mut tidy = String::new();
    for spec in cfg.embedders() {
        let emb = embedder(cfg, &spec)?;
        let grid = run_grid(
            &corpus,
            &emb,
            &cfg.ablation.strategies,
            &cfg.ablation.sizes,
            &cfg.chunking,
            &cfg.eval,
        );
        let dir = model_dir(cfg, &spec);
        write(&dir.join("grid.txt"), &render_grid_matrix(&grid))?;
        write(&dir.join("grid.json"), &to_json(&grid))?;
        let csv = render_grid_csv(&grid);
        if tidy.is_empty() {
            tidy.push_str(&csv);
        } else {
            tidy.extend(csv.lines().skip(1).map(|l| format!("{l}\n")));
        }
        print!("{}", render_grid_matrix(&grid));

        let quality = match grid.cell(cfg.chunking.strategy, cfg.chunking.size) {
            Some(GridCell::Done(c)) => c.metrics.ndcg,
            Some(GridCell::Failed { .. }) => None,
            None => evaluate_run(&corpus, &cfg.chunking, &emb, &cfg.eval)
                .ok()
                .and_then(|r| r.metrics.ndcg),
        };
        match (quality, measure_model(cfg, &corpus, &spec)) {
            (Some(q), Ok(row)) => points.push(ParetoPoint {
                label: spec.name.clone(),
                latency_ms: row.stats.median_ms,
                quality: q,
            }),
            (_, Err(e)) => log::warn!("{}: latency failed, left off the front: {e}", spec.name),
            (None, _) => log::warn!("{}: no quality at {}, left off the front", spec.name, cfg.chunking.label()),
        }
        grids.push(grid);
    }
    write(&cfg.output_dir.join("ablation.csv"), &tidy)?;
    let summary = render_chunking_summary(&grids);
    write(&cfg.output_dir.join("chunking_summary.txt"), &summary)?;
    write(&cfg.output_dir.join("pareto.csv"), &render_pareto(&points))?;
    echo_config(cfg)?;
    print!("{summary}");
    let front: Vec<String> = pareto_front(&points).into_iter().map(|p| p.label).collect();
    println!("pareto front: {}", front.join(", "));
    if grids.iter().any(AblationGrid::is_partial) {
        eprintln!("warning: some grid cells failed and are reported as absent");
    }
    Ok(0)
}

fn cmd_cache(cfg: &RunConfig, action: CacheAction) -> Result<u8> {
    let cache = cfg
        .open_cache()?
        .ok_or_else(|| Error::Config("cache commands need cache_dir".into()))?;
    match action {
        CacheAction::Stats => {
            let s = cache.stats()?;
            println!("entries: {}\nbytes: {}", s.entries, s.bytes);
            Ok(0)
        }
        CacheAction::Verify => {
            let problems = cache.verify()?;
            for p in &problems {
                println!("corrupt: {} ({})", p.path.display(), p.reason);
            }
            println!("{} corrupt entries", problems.len());
            Ok(if problems.is_empty() { 0 } else { 2 })
        }
        CacheAction::Gc => {
            let r = cache.gc()?;
            println!(
                "removed {} temporary files, {} corrupt entries",
                r.removed_temp_files, r.removed_corrupt
            );
            Ok(0)
        }
    }
}

fn find_metrics(path: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    if path.is_file() {
        out.push(path.to_path_buf());
        return Ok(());
    }
    let mut entries: Vec<PathBuf> = fs::read_dir(path)
        .map_err(|e| Error::io(path, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    entries.sort();
    for e in entries {
        if e.is_dir() {
            find_metrics(&e, out)?;
        } else if e.file_name().is_some_and(|n| n == "metrics.jsonl") {
            out.push(e);
        }
    }
    Ok(())
}

fn cmd_report(paths: &[PathBuf], csv: bool) -> Result<u8> {
    let mut files = Vec::new();
    for p in paths {
        find_metrics(p, &mut files)?;
    }
    if files.is_empty() {
        return Err(Error::Data("no metrics.jsonl files found".into()));
    }
    let mut columns: Vec<String> = Vec::new();
    let mut rows: Vec<(String, serde_json::Map<String, Value>)> = Vec::new();
    for f in &files {
        let text = fs::read_to_string(f).map_err(|e| Error::io(f, e))?;
        let lines: Vec<&str> = text.lines().collect();
        let (line_no, line) = lines
            .iter()
            .copied()
            .enumerate()
            .rev()
            .find(|(_, l)| !l.trim().is_empty())
            .ok_or_else(|| Error::parse(f, 0, "empty metrics file"))?;
        let v: Value = serde_json::from_str(line).map_err(|e| Error::parse(f, line_no + 1, e.to_string()))?;
        let Value::Object(obj) = v else {
            return Err(Error::parse(f, line_no + 1, "summary is not an object"));
        };
        if obj.get("record").and_then(Value::as_str) != Some("summary") {
            return Err(Error::parse(f, line_no + 1, "last record is not a summary"));
        }
        let mut metric_keys: Vec<&String> = obj
            .keys()
            .filter(|k| k.starts_with("recall@") || k.starts_with("ndcg@") || *k == "mrr")
            .collect();
        metric_keys.sort_by_key(|k| {
            let (group, k_val) = match k.split_once('@') {
                Some((g, n)) => (if g == "recall" { 0 } else { 2 }, n.parse::<usize>().unwrap_or(0)),
                None => (1, 0),
            };
            (group, k_val)
        });
        for k in metric_keys {
            if !columns.contains(k) {
                columns.push(k.clone());
            }
        }
        let label = obj
            .get("run")
            .and_then(Value::as_str)
            .unwrap_or("?")
            .to_string();
        rows.push((label, obj));
    }
    let cell = |obj: &serde_json::Map<String, Value>, c: &str| obj.get(c).and_then(Value::as_f64);
    let mut out = String::new();
    if csv {
        out.push_str("run");
        for c in &columns {
            out.push(',');
            out.push_str(c);
        }
        out.push('\n');
        for (label, obj) in &rows {
            out.push_str(label);
            for c in &columns {
                out.push(',');
                if let Some(v) = cell(obj, c) {
                    out.push_str(&format!("{v:.6}"));
                }
            }
            out.push('\n');
        }
    } else {
        let width = rows.iter().map(|(l, _)| l.len()).max().unwrap_or(3).max(3);
        out.push_str(&format!("{:<width$}", "run"));
        for c in &columns {
            out.push_str(&format!("  {c:>9}"));
        }
        out.push('\n');
        for (label, obj) in &rows {
            out.push_str(&format!("{label:<width$}"));
            for c in &columns {
                let v = cell(obj, c).map_or_else(|| "-".to_string(), |v| format!("{v:.3}"));
                out.push_str(&format!("  {v:>9}"));
            }
            out.push('\n');
        }
    }
    print!("{out}");
    Ok(0)
}
