//! Retrieval runs and the metrics they are scored with.
//!
//! Chunk hits are mapped to their parent documents with max-score
//! aggregation, then Recall@k, reciprocal rank and nDCG@k are computed per
//! query against graded judgments. A document is relevant when its grade is
//! above zero. Queries without any relevant document are skipped and counted,
//! never scored as zero.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::chunking::{chunk_document, parent_of, Chunk, ChunkingConfig};
use crate::corpus::{Corpus, RelevanceJudgments, MAX_GRADE};
use crate::embedding::{EmbedStats, Embedder, TaskType};
use crate::error::{Error, Result};
use crate::index::{hit_order, storage_bytes, HnswParams, IndexKind, VectorIndex};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Granularity {
    Chunk,
    Document,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankedList {
    pub query_id: String,
    pub hits: Vec<(String, f64)>,
    pub granularity: Granularity,
}

impl RankedList {
    pub fn documents(query_id: &str, hits: Vec<(String, f64)>) -> Self {
        Self {
            query_id: query_id.to_string(),
            hits,
            granularity: Granularity::Document,
        }
    }

    pub fn doc_ids(&self) -> impl Iterator<Item = &str> {
        self.hits.iter().map(|(d, _)| d.as_str())
    }
}

/// Max-score aggregation of chunk hits into a top-`k` document list.
pub fn aggregate_chunks_to_docs(chunk_hits: &RankedList, k: usize) -> RankedList {
    let mut best: HashMap<&str, f64> = HashMap::new();
    for (chunk_id, score) in &chunk_hits.hits {
        let doc = parent_of(chunk_id);
        best.entry(doc)
            .and_modify(|s| {
                if *score > *s {
                    *s = *score
                }
            })
            .or_insert(*score);
    }
    let mut docs: Vec<(String, f64)> = best.into_iter().map(|(d, s)| (d.to_string(), s)).collect();
    docs.sort_by(|a, b| hit_order(a.1, &a.0, b.1, &b.0));
    docs.truncate(k);
    RankedList::documents(&chunk_hits.query_id, docs)
}

/// Fraction of relevant documents found in the top `k`. `None` when the
/// query has no relevant documents.
pub fn recall_at_k(ranked: &RankedList, judgments: &RelevanceJudgments, k: usize) -> Option<f64> {
    let relevant = judgments.relevant(&ranked.query_id);
    if relevant.is_empty() {
        return None;
    }
    let found = ranked
        .doc_ids()
        .take(k)
        .filter(|d| relevant.contains(d))
        .count();
    Some(found as f64 / relevant.len() as f64)
}

/// `1 / rank` of the first relevant document, 0 if none is retrieved.
pub fn reciprocal_rank(ranked: &RankedList, judgments: &RelevanceJudgments) -> Option<f64> {
    let relevant = judgments.relevant(&ranked.query_id);
    if relevant.is_empty() {
        return None;
    }
    Some(
        ranked
            .doc_ids()
            .position(|d| relevant.contains(d))
            .map_or(0.0, |i| 1.0 / (i + 1) as f64),
    )
}

/// Mean reciprocal rank over the queries that have relevant documents.
pub fn mrr(lists: &[RankedList], judgments: &RelevanceJudgments) -> Option<f64> {
    mean(lists.iter().filter_map(|l| reciprocal_rank(l, judgments)))
}

fn gain(grade: u8) -> f64 {
    ((1u32 << grade) - 1) as f64
}

fn discount(rank: usize) -> f64 {
    ((rank + 1) as f64).log2()
}

/// DCG@k of a grade sequence in rank order (rank 1 first).
pub fn dcg(grades: &[u8], k: usize) -> f64 {
    grades
        .iter()
        .take(k)
        .enumerate()
        .map(|(i, &g)| gain(g) / discount(i + 1))
        .sum()
}

/// nDCG@k. `None` when the ideal DCG is zero.
pub fn ndcg_at_k(ranked: &RankedList, judgments: &RelevanceJudgments, k: usize) -> Result<Option<f64>> {
    let grades: Vec<u8> = ranked
        .doc_ids()
        .take(k)
        .map(|d| judgments.grade(&ranked.query_id, d))
        .collect();
    let mut ideal: Vec<u8> = judgments
        .for_query(&ranked.query_id)
        .map(|m| m.values().copied().collect())
        .unwrap_or_default();
    if let Some(g) = grades.iter().chain(&ideal).find(|&&g| g > MAX_GRADE) {
        return Err(Error::Data(format!("grade {g} outside {{0,1,2}}")));
    }
    ideal.sort_unstable_by(|a, b| b.cmp(a));
    let idcg = dcg(&ideal, k);
    if idcg == 0.0 {
        return Ok(None);
    }
    Ok(Some(dcg(&grades, k) / idcg))
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QueryMetrics {
    pub recall_at: BTreeMap<usize, f64>,
    pub reciprocal_rank: f64,
    pub ndcg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QueryResult {
    pub query_id: String,
    pub num_relevant: usize,
    /// `None` for skipped queries.
    pub metrics: Option<QueryMetrics>,
    pub ranking: Vec<(String, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricReport {
    pub k_values: Vec<usize>,
    pub ndcg_k: usize,
    pub per_query: Vec<QueryResult>,
    pub recall_at: BTreeMap<usize, Option<f64>>,
    pub mrr: Option<f64>,
    pub ndcg: Option<f64>,
    pub num_queries: usize,
    pub num_skipped_no_relevant: usize,
}

impl MetricReport {
    /// Scores document-level rankings, one per query, in the given order.
    pub fn from_rankings(
        lists: &[RankedList],
        judgments: &RelevanceJudgments,
        k_values: &[usize],
        ndcg_k: usize,
    ) -> Result<Self> {
        let mut per_query = Vec::with_capacity(lists.len());
        for l in lists {
            if l.granularity != Granularity::Document {
                return Err(Error::InvalidInput(format!(
                    "query {}: metrics need a document-level ranking",
                    l.query_id
                )));
            }
            let num_relevant = judgments.relevant(&l.query_id).len();
            let metrics = match ndcg_at_k(l, judgments, ndcg_k)? {
                Some(ndcg) if num_relevant > 0 => Some(QueryMetrics {
                    recall_at: k_values
                        .iter()
                        .map(|&k| (k, recall_at_k(l, judgments, k).expect("has relevant")))
                        .collect(),
                    reciprocal_rank: reciprocal_rank(l, judgments).expect("has relevant"),
                    ndcg,
                }),
                _ => None,
            };
            per_query.push(QueryResult {
                query_id: l.query_id.clone(),
                num_relevant,
                metrics,
                ranking: l.hits.clone(),
            });
        }
        let scored = || per_query.iter().filter_map(|q| q.metrics.as_ref());
        let recall_at = k_values
            .iter()
            .map(|&k| (k, mean(scored().map(|m| m.recall_at[&k]))))
            .collect();
        let mrr = mean(scored().map(|m| m.reciprocal_rank));
        let ndcg = mean(scored().map(|m| m.ndcg));
        let skipped = per_query.iter().filter(|q| q.metrics.is_none()).count();
        Ok(Self {
            k_values: k_values.to_vec(),
            ndcg_k,
            recall_at,
            mrr,
            ndcg,
            num_queries: per_query.len(),
            num_skipped_no_relevant: skipped,
            per_query,
        })
    }

    fn metric_fields(&self, obj: &mut serde_json::Map<String, Value>, recall: impl Fn(usize) -> Option<f64>, rr: Option<f64>, ndcg: Option<f64>) {
        for &k in &self.k_values {
            obj.insert(format!("recall@{k}"), json!(recall(k)));
        }
        obj.insert("mrr".into(), json!(rr));
        obj.insert(format!("ndcg@{}", self.ndcg_k), json!(ndcg));
    }

    /// One JSON record per query followed by a summary record.
    pub fn to_jsonl(&self, run_label: &str) -> String {
        let mut out = String::new();
        for q in &self.per_query {
            let mut obj = serde_json::Map::new();
            obj.insert("record".into(), json!("query"));
            obj.insert("query_id".into(), json!(q.query_id));
            obj.insert("num_relevant".into(), json!(q.num_relevant));
            obj.insert("skipped".into(), json!(q.metrics.is_none()));
            let m = q.metrics.as_ref();
            self.metric_fields(
                &mut obj,
                |k| m.map(|m| m.recall_at[&k]),
                m.map(|m| m.reciprocal_rank),
                m.map(|m| m.ndcg),
            );
            obj.insert(
                "ranking".into(),
                Value::Array(
                    q.ranking
                        .iter()
                        .map(|(d, s)| json!({"doc_id": d, "score": s}))
                        .collect(),
                ),
            );
            out.push_str(&Value::Object(obj).to_string());
            out.push('\n');
        }
        let mut obj = serde_json::Map::new();
        obj.insert("record".into(), json!("summary"));
        obj.insert("run".into(), json!(run_label));
        obj.insert("num_queries".into(), json!(self.num_queries));
        obj.insert("num_skipped_no_relevant".into(), json!(self.num_skipped_no_relevant));
        obj.insert("means_defined".into(), json!(self.mrr.is_some()));
        self.metric_fields(&mut obj, |k| self.recall_at[&k], self.mrr, self.ndcg);
        out.push_str(&Value::Object(obj).to_string());
        out.push('\n');
        out
    }

    fn headers(&self) -> Vec<String> {
        let mut h: Vec<String> = self.k_values.iter().map(|k| format!("R@{k}")).collect();
        h.push("MRR".into());
        h.push(format!("nDCG@{}", self.ndcg_k));
        h
    }

    fn cells(&self) -> Vec<Option<f64>> {
        let mut c: Vec<Option<f64>> = self.k_values.iter().map(|k| self.recall_at[k]).collect();
        c.push(self.mrr);
        c.push(self.ndcg);
        c
    }
}

fn fmt_cell(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{v:.3}"))
}

/// Rows are runs (e.g. models), columns are metrics. `None` rows mark a
/// configuration that failed and is reported as absent.
pub fn render_metric_table(rows: &[(String, Option<&MetricReport>)]) -> String {
    let headers = rows
        .iter()
        .find_map(|(_, r)| r.map(MetricReport::headers))
        .unwrap_or_default();
    let width = rows.iter().map(|(l, _)| l.len()).max().unwrap_or(5).max(5);
    let mut out = format!("{:<width$}", "Model");
    for h in &headers {
        let _ = write!(out, "  {h:>8}");
    }
    out.push('\n');
    for (label, report) in rows {
        let _ = write!(out, "{label:<width$}");
        match report {
            Some(r) => {
                for c in r.cells() {
                    let _ = write!(out, "  {:>8}", fmt_cell(c));
                }
            }
            None => {
                for _ in &headers {
                    let _ = write!(out, "  {:>8}", "-");
                }
            }
        }
        out.push('\n');
    }
    out
}

pub fn render_metric_csv(rows: &[(String, Option<&MetricReport>)]) -> String {
    let headers = rows
        .iter()
        .find_map(|(_, r)| r.map(MetricReport::headers))
        .unwrap_or_default();
    let mut out = String::from("model");
    for h in &headers {
        out.push(',');
        out.push_str(h);
    }
    out.push('\n');
    for (label, report) in rows {
        out.push_str(label);
        let cells = report.map(|r| r.cells()).unwrap_or_else(|| vec![None; headers.len()]);
        for c in cells {
            out.push(',');
            if let Some(v) = c {
                let _ = write!(out, "{v:.6}");
            }
        }
        out.push('\n');
    }
    out
}

fn default_k_values() -> Vec<usize> {
    vec![1, 5, 10]
}

fn default_ndcg_k() -> usize {
    10
}

fn default_oversample() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    #[serde(default = "default_k_values")]
    pub k_values: Vec<usize>,
    #[serde(default = "default_ndcg_k")]
    pub ndcg_k: usize,
    /// Chunk-level depth multiplier applied before document aggregation.
    #[serde(default = "default_oversample")]
    pub oversample: usize,
    /// Forces an index kind; unset picks by collection size.
    #[serde(default)]
    pub index: Option<IndexKind>,
    #[serde(default)]
    pub hnsw: HnswParams,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            k_values: default_k_values(),
            ndcg_k: default_ndcg_k(),
            oversample: default_oversample(),
            index: None,
            hnsw: HnswParams::default(),
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_values.is_empty() || self.k_values.contains(&0) {
            return Err(Error::Config("k_values must be non-empty and >= 1".into()));
        }
        if self.ndcg_k == 0 || self.oversample == 0 {
            return Err(Error::Config("ndcg_k and oversample must be >= 1".into()));
        }
        self.hnsw.validate()
    }

    /// Document-level depth needed by the largest cutoff.
    pub fn depth(&self) -> usize {
        self.k_values.iter().copied().max().unwrap_or(1).max(self.ndcg_k)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IndexSummary {
    pub kind: IndexKind,
    pub dim: usize,
    pub vectors: usize,
    pub storage_bytes: u64,
    pub graph_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChunkSkew {
    pub chunks_per_doc_mean: f64,
    pub chunks_per_doc_max: usize,
}

/// Everything one (model, corpus, chunking) configuration produced.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunReport {
    pub model: String,
    pub corpus: String,
    pub chunking: String,
    pub metrics: MetricReport,
    pub num_chunks: usize,
    pub skew: ChunkSkew,
    pub index: IndexSummary,
    pub embedding: EmbedStats,
}

impl RunReport {
    pub fn label(&self) -> String {
        format!("{}/{}/{}", self.model, self.corpus, self.chunking)
    }
}

/// Chunks every document, in corpus order.
pub fn chunk_all(corpus: &Corpus, cfg: &ChunkingConfig, embedder: &Embedder) -> Result<Vec<Chunk>> {
    cfg.validate()?;
    let per_doc: Vec<Vec<Chunk>> = corpus
        .documents
        .par_iter()
        .map(|d| chunk_document(d, cfg, embedder))
        .collect::<Result<_>>()?;
    Ok(per_doc.into_iter().flatten().collect())
}

/// Chunk, embed, index, retrieve and score one configuration.
pub fn evaluate_run(
    corpus: &Corpus,
    chunking: &ChunkingConfig,
    embedder: &Embedder,
    cfg: &EvalConfig,
) -> Result<RunReport> {
    cfg.validate()?;
    let chunks = chunk_all(corpus, chunking, embedder).map_err(|e| e.in_stage("chunk"))?;
    let (index, _) = build_chunk_index(&chunks, embedder, cfg)?;
    let lists = retrieve(corpus, &index, embedder, cfg)?;
    let metrics = MetricReport::from_rankings(&lists, &corpus.judgments, &cfg.k_values, cfg.ndcg_k)
        .map_err(|e| e.in_stage("score"))?;

    let mut per_doc: HashMap<&str, usize> = HashMap::new();
    for c in &chunks {
        *per_doc.entry(c.parent_doc_id.as_str()).or_default() += 1;
    }
    let skew = ChunkSkew {
        chunks_per_doc_mean: if corpus.documents.is_empty() {
            0.0
        } else {
            chunks.len() as f64 / corpus.documents.len() as f64
        },
        chunks_per_doc_max: per_doc.values().copied().max().unwrap_or(0),
    };
    Ok(RunReport {
        model: embedder.spec().name.clone(),
        corpus: corpus.name.clone(),
        chunking: chunking.label(),
        metrics,
        num_chunks: chunks.len(),
        skew,
        index: IndexSummary {
            kind: index.kind(),
            dim: index.dim(),
            vectors: index.len(),
            storage_bytes: storage_bytes(index.dim(), index.len()),
            graph_bytes: index.graph_bytes(),
        },
        embedding: embedder.stats(),
    })
}

/// Embeds chunks as documents and indexes them under their chunk ids.
pub fn build_chunk_index(
    chunks: &[Chunk],
    embedder: &Embedder,
    cfg: &EvalConfig,
) -> Result<(VectorIndex, usize)> {
    if chunks.is_empty() {
        return Err(Error::Data("corpus produced no chunks".into()).in_stage("chunk"));
    }
    let texts: Vec<String> = chunks.iter().map(|c| c.text.clone()).collect();
    let vectors = embedder
        .embed_batch(&texts, TaskType::RetrievalDocument)
        .map_err(|e| e.in_stage("embed"))?;
    let index = VectorIndex::build(
        chunks.iter().map(|c| c.chunk_id.clone()).zip(vectors),
        cfg.index,
        cfg.hnsw,
    )
    .map_err(|e| e.in_stage("index"))?;
    Ok((index, chunks.len()))
}

/// Document rankings for every query, in corpus query order.
pub fn retrieve(
    corpus: &Corpus,
    index: &VectorIndex,
    embedder: &Embedder,
    cfg: &EvalConfig,
) -> Result<Vec<RankedList>> {
    if corpus.queries.is_empty() {
        return Ok(Vec::new());
    }
    let texts: Vec<String> = corpus.queries.iter().map(|q| q.text.clone()).collect();
    let qvecs = embedder
        .embed_batch(&texts, TaskType::RetrievalQuery)
        .map_err(|e| e.in_stage("embed"))?;
    let depth = cfg.depth();
    let chunk_k = (depth * cfg.oversample).min(index.len()).max(1);
    corpus
        .queries
        .par_iter()
        .zip(qvecs.par_iter())
        .map(|(q, v)| {
            let hits = index.search(v, chunk_k).map_err(|e| e.in_stage("search"))?;
            let chunk_list = RankedList {
                query_id: q.query_id.clone(),
                hits: hits.into_iter().map(|h| (h.id, h.score)).collect(),
                granularity: Granularity::Chunk,
            };
            Ok(aggregate_chunks_to_docs(&chunk_list, depth))
        })
        .collect()
}
