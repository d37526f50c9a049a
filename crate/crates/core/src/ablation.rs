//! Strategy x chunk-size ablation grid and latency/quality Pareto fronts.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::Serialize;

use crate::chunking::{ChunkingConfig, Strategy};
use crate::corpus::Corpus;
use crate::embedding::Embedder;
use crate::evaluation::{evaluate_run, EvalConfig, IndexSummary, MetricReport};
use crate::index::bytes_to_mb;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellResult {
    pub metrics: MetricReport,
    pub num_chunks: usize,
    pub index: IndexSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum GridCell {
    Done(Box<CellResult>),
    /// Failed cells are reported as absent, not as zero.
    Failed { error: String },
}

impl GridCell {
    pub fn ndcg(&self) -> Option<f64> {
        match self {
            GridCell::Done(c) => c.metrics.ndcg,
            GridCell::Failed { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationGrid {
    pub corpus: String,
    pub embedder: String,
    pub strategies: Vec<Strategy>,
    pub sizes: Vec<usize>,
    #[serde(serialize_with = "cells_as_list")]
    pub cells: BTreeMap<(Strategy, usize), GridCell>,
}

fn cells_as_list<S: serde::Serializer>(
    cells: &BTreeMap<(Strategy, usize), GridCell>,
    ser: S,
) -> Result<S::Ok, S::Error> {
    #[derive(Serialize)]
    struct Entry<'a> {
        strategy: Strategy,
        size: usize,
        cell: &'a GridCell,
    }
    ser.collect_seq(cells.iter().map(|(&(strategy, size), cell)| Entry {
        strategy,
        size,
        cell,
    }))
}

impl AblationGrid {
    pub fn is_partial(&self) -> bool {
        self.cells.values().any(|c| matches!(c, GridCell::Failed { .. }))
    }

    pub fn cell(&self, strategy: Strategy, size: usize) -> Option<&GridCell> {
        self.cells.get(&(strategy, size))
    }

    /// Best-scoring cell by nDCG; ties go to the smaller size, then strategy order.
    pub fn peak(&self) -> Option<((Strategy, usize), f64)> {
        self.cells
            .iter()
            .filter_map(|(k, c)| c.ndcg().map(|v| (*k, v)))
            .fold(None, |best, (k, v)| match best {
                Some((_, bv)) if bv >= v => best,
                _ => Some((k, v)),
            })
    }
}

/// Evaluates every (strategy, size) pair on the same corpus and query set.
/// A failing cell is recorded and the grid carries on.
pub fn run_grid(
    corpus: &Corpus,
    embedder: &Embedder,
    strategies: &[Strategy],
    sizes: &[usize],
    base: &ChunkingConfig,
    eval: &EvalConfig,
) -> AblationGrid {
    let mut cells = BTreeMap::new();
    for &strategy in strategies {
        for &size in sizes {
            let cfg = ChunkingConfig {
                strategy,
                size,
                ..*base
            };
            let cell = match evaluate_run(corpus, &cfg, embedder, eval) {
                Ok(run) => GridCell::Done(Box::new(CellResult {
                    metrics: run.metrics,
                    num_chunks: run.num_chunks,
                    index: run.index,
                })),
                Err(e) => {
                    log::warn!("ablation cell {} failed: {e}", cfg.label());
                    GridCell::Failed {
                        error: e.to_string(),
                    }
                }
            };
            cells.insert((strategy, size), cell);
        }
    }
    AblationGrid {
        corpus: corpus.name.clone(),
        embedder: embedder.spec().name.clone(),
        strategies: strategies.to_vec(),
        sizes: sizes.to_vec(),
        cells,
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{v:.3}"))
}

/// nDCG matrix: one row per size, one column per strategy.
pub fn render_grid_matrix(grid: &AblationGrid) -> String {
    let mut out = format!("# {} on {}: nDCG@k by chunk size\n", grid.embedder, grid.corpus);
    let _ = write!(out, "{:>6}", "L");
    for s in &grid.strategies {
        let _ = write!(out, "  {:>9}", s.as_str());
    }
    out.push('\n');
    for &size in &grid.sizes {
        let _ = write!(out, "{size:>6}");
        for &s in &grid.strategies {
            let v = grid.cell(s, size).and_then(GridCell::ndcg);
            let _ = write!(out, "  {:>9}", fmt_opt(v));
        }
        out.push('\n');
    }
    out
}

/// Tidy records: `strategy,L,metric,value`. Failed cells emit no rows.
pub fn render_grid_csv(grid: &AblationGrid) -> String {
    let mut out = String::from("model,strategy,L,metric,value\n");
    for ((strategy, size), cell) in &grid.cells {
        let GridCell::Done(c) = cell else {
            continue;
        };
        let mut row = |metric: String, value: String| {
            let _ = writeln!(out, "{},{strategy},{size},{metric},{value}", grid.embedder);
        };
        if let Some(v) = c.metrics.ndcg {
            row(format!("ndcg@{}", c.metrics.ndcg_k), format!("{v:.6}"));
        }
        if let Some(v) = c.metrics.mrr {
            row("mrr".into(), format!("{v:.6}"));
        }
        for (k, v) in &c.metrics.recall_at {
            if let Some(v) = v {
                row(format!("recall@{k}"), format!("{v:.6}"));
            }
        }
        row("num_chunks".into(), c.num_chunks.to_string());
        row("storage_bytes".into(), c.index.storage_bytes.to_string());
    }
    out
}

/// Fixed-32 score, best strategy, peak score and fixed-32 vector storage.
pub fn render_chunking_summary(grids: &[AblationGrid]) -> String {
    let mut out = format!(
        "{:<12}  {:>10}  {:>12}  {:>9}  {:>12}\n",
        "Model", "@fixed-32", "best", "peak", "storage(MB)"
    );
    for g in grids {
        let fixed32 = g.cell(Strategy::Fixed, 32);
        let storage = match fixed32 {
            Some(GridCell::Done(c)) => format!("{:.1}", bytes_to_mb(c.index.storage_bytes)),
            _ => "-".into(),
        };
        let (best, peak) = match g.peak() {
            Some(((s, l), v)) => (format!("{}-{l}", s.as_str()), Some(v)),
            None => ("-".into(), None),
        };
        let _ = writeln!(
            out,
            "{:<12}  {:>10}  {:>12}  {:>9}  {:>12}",
            g.embedder,
            fmt_opt(fixed32.and_then(GridCell::ndcg)),
            best,
            fmt_opt(peak),
            storage
        );
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParetoPoint {
    pub label: String,
    pub latency_ms: f64,
    pub quality: f64,
}

/// `a` dominates `b`: no slower, no worse, and strictly better in one.
pub fn dominates(a: &ParetoPoint, b: &ParetoPoint) -> bool {
    a.latency_ms <= b.latency_ms
        && a.quality >= b.quality
        && (a.latency_ms < b.latency_ms || a.quality > b.quality)
}

/// Non-dominated points sorted by latency ascending.
///
/// Sweeps by latency, then by quality descending; a point survives iff its
/// quality beats every strictly faster survivor and it ties the best quality
/// at its own latency. Exact duplicates are all kept.
pub fn pareto_front(points: &[ParetoPoint]) -> Vec<ParetoPoint> {
    let mut sorted: Vec<&ParetoPoint> = points.iter().collect();
    sorted.sort_by(|a, b| {
        a.latency_ms
            .total_cmp(&b.latency_ms)
            .then(b.quality.total_cmp(&a.quality))
            .then_with(|| a.label.cmp(&b.label))
    });
    let mut front: Vec<ParetoPoint> = Vec::new();
    let mut best_faster = f64::NEG_INFINITY;
    let mut i = 0;
    while i < sorted.len() {
        let lat = sorted[i].latency_ms;
        let top = sorted[i].quality;
        let mut j = i;
        while j < sorted.len() && sorted[j].latency_ms == lat {
            if sorted[j].quality == top && top > best_faster {
                front.push(sorted[j].clone());
            }
            j += 1;
        }
        best_faster = best_faster.max(top);
        i = j;
    }
    front
}

/// Every point with a flag marking front membership.
pub fn render_pareto(points: &[ParetoPoint]) -> String {
    let front = pareto_front(points);
    let mut out = String::from("label,latency_ms,quality,on_front\n");
    for p in points {
        let on = front.iter().any(|f| f == p);
        let _ = writeln!(out, "{},{:.3},{:.6},{}", p.label, p.latency_ms, p.quality, on);
    }
    out
}
