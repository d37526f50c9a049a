//! Retrieval corpora: BEIR-style loading and export, template-based
//! synthesis, and length statistics.
//!
//! On-disk layout (shared by the loader and [`write_beir_corpus`]):
//!
//! ```text
//! <root>/corpus.jsonl    {"_id": .., "title": .., "text": .., "metadata": {"source": ..}}
//! <root>/queries.jsonl   {"_id": .., "text": ..}
//! <root>/qrels/test.tsv  query-id<TAB>corpus-id<TAB>score   (first line is a header)
//! ```

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use log::warn;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::chunking::tokenize_ws;
use crate::error::{Error, Result};

/// Relevance grade. Only 0, 1 and 2 are valid.
pub type Grade = u8;

pub const MAX_GRADE: Grade = 2;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: String,
    pub title: String,
    pub body: String,
    pub source_tag: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Query {
    pub query_id: String,
    pub text: String,
}

/// Graded judgments keyed by query then document. Absent pairs are grade 0.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RelevanceJudgments {
    grades: BTreeMap<String, BTreeMap<String, Grade>>,
}

impl RelevanceJudgments {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, query_id: &str, doc_id: &str, grade: Grade) -> Result<()> {
        if grade > MAX_GRADE {
            return Err(Error::Data(format!(
                "grade {grade} for ({query_id}, {doc_id}) outside {{0,1,2}}"
            )));
        }
        self.grades
            .entry(query_id.to_string())
            .or_default()
            .insert(doc_id.to_string(), grade);
        Ok(())
    }

    pub fn grade(&self, query_id: &str, doc_id: &str) -> Grade {
        self.grades
            .get(query_id)
            .and_then(|m| m.get(doc_id))
            .copied()
            .unwrap_or(0)
    }

    /// All stored grades for a query, including explicit zeros.
    pub fn for_query(&self, query_id: &str) -> Option<&BTreeMap<String, Grade>> {
        self.grades.get(query_id)
    }

    /// Documents with grade > 0 for the query.
    pub fn relevant(&self, query_id: &str) -> BTreeSet<&str> {
        self.grades
            .get(query_id)
            .map(|m| {
                m.iter()
                    .filter(|(_, g)| **g > 0)
                    .map(|(d, _)| d.as_str())
                    .collect()
            })
            .unwrap_or_default()
    }

    /// Number of stored (query, doc) pairs.
    pub fn len(&self) -> usize {
        self.grades.values().map(BTreeMap::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str, Grade)> {
        self.grades.iter().flat_map(|(q, docs)| {
            docs.iter()
                .map(move |(d, g)| (q.as_str(), d.as_str(), *g))
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    pub name: String,
    pub documents: Vec<Document>,
    pub queries: Vec<Query>,
    pub judgments: RelevanceJudgments,
    /// qrels rows dropped at load time because they referenced unknown ids.
    pub dropped_qrels: usize,
}

impl Corpus {
    /// Checks id uniqueness, non-empty text and judgment referential integrity.
    pub fn validate(&self) -> Result<()> {
        let mut doc_ids = HashSet::new();
        for d in &self.documents {
            if !doc_ids.insert(d.doc_id.as_str()) {
                return Err(Error::Data(format!("duplicate doc_id {:?}", d.doc_id)));
            }
            if d.body.trim().is_empty() {
                return Err(Error::Data(format!("document {:?} has an empty body", d.doc_id)));
            }
        }
        let mut query_ids = HashSet::new();
        for q in &self.queries {
            if !query_ids.insert(q.query_id.as_str()) {
                return Err(Error::Data(format!("duplicate query_id {:?}", q.query_id)));
            }
            if q.text.trim().is_empty() {
                return Err(Error::Data(format!("query {:?} has empty text", q.query_id)));
            }
        }
        for (q, d, _) in self.judgments.iter() {
            if !query_ids.contains(q) || !doc_ids.contains(d) {
                return Err(Error::Data(format!("judgment ({q}, {d}) references an unknown id")));
            }
        }
        Ok(())
    }

    pub fn document(&self, doc_id: &str) -> Option<&Document> {
        self.documents.iter().find(|d| d.doc_id == doc_id)
    }
}

#[derive(Debug, Deserialize)]
struct BeirDoc {
    #[serde(rename = "_id")]
    id: String,
    #[serde(default)]
    title: String,
    text: String,
    #[serde(default)]
    metadata: Option<BeirMetadata>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct BeirMetadata {
    #[serde(default)]
    source: Option<String>,
}

#[derive(Debug, Deserialize)]
struct BeirQuery {
    #[serde(rename = "_id")]
    id: String,
    text: String,
}

fn read_lines(path: &Path) -> Result<Vec<(usize, String)>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() {
            out.push((i + 1, line));
        }
    }
    Ok(out)
}

/// Loads a corpus from the BEIR disk layout using the `test` qrels split.
pub fn load_beir_corpus(root: &Path) -> Result<Corpus> {
    load_beir_corpus_split(root, "test")
}

pub fn load_beir_corpus_split(root: &Path, split: &str) -> Result<Corpus> {
    let corpus_path = root.join("corpus.jsonl");
    let queries_path = root.join("queries.jsonl");
    let qrels_path = root.join("qrels").join(format!("{split}.tsv"));

    let mut documents = Vec::new();
    for (line_no, line) in read_lines(&corpus_path)? {
        let rec: BeirDoc = serde_json::from_str(&line)
            .map_err(|e| Error::parse(&corpus_path, line_no, e.to_string()))?;
        if rec.text.trim().is_empty() {
            return Err(Error::parse(&corpus_path, line_no, "empty document text"));
        }
        documents.push(Document {
            doc_id: rec.id,
            title: rec.title,
            body: rec.text,
            source_tag: rec
                .metadata
                .and_then(|m| m.source)
                .unwrap_or_else(|| "beir".to_string()),
        });
    }
    if documents.is_empty() {
        return Err(Error::parse(&corpus_path, 0, "corpus file contains no documents"));
    }

    let mut queries = Vec::new();
    for (line_no, line) in read_lines(&queries_path)? {
        let rec: BeirQuery = serde_json::from_str(&line)
            .map_err(|e| Error::parse(&queries_path, line_no, e.to_string()))?;
        if rec.text.trim().is_empty() {
            return Err(Error::parse(&queries_path, line_no, "empty query text"));
        }
        queries.push(Query {
            query_id: rec.id,
            text: rec.text,
        });
    }
    if queries.is_empty() {
        return Err(Error::parse(&queries_path, 0, "queries file contains no queries"));
    }

    let doc_ids: HashSet<&str> = documents.iter().map(|d| d.doc_id.as_str()).collect();
    let query_ids: HashSet<&str> = queries.iter().map(|q| q.query_id.as_str()).collect();
    let mut judgments = RelevanceJudgments::new();
    let mut dropped = 0;
    for (idx, (line_no, line)) in read_lines(&qrels_path)?.into_iter().enumerate() {
        let fields: Vec<&str> = line.split('\t').map(str::trim).collect();
        if idx == 0 && fields.first() == Some(&"query-id") {
            continue;
        }
        // TREC-style rows carry an extra iteration column.
        let (q, d, g) = match fields.as_slice() {
            [q, d, g] => (*q, *d, *g),
            [q, _, d, g] => (*q, *d, *g),
            _ => {
                return Err(Error::parse(
                    &qrels_path,
                    line_no,
                    format!("expected 3 tab-separated fields, found {}", fields.len()),
                ))
            }
        };
        let grade: i64 = g
            .parse()
            .map_err(|_| Error::parse(&qrels_path, line_no, format!("bad grade {g:?}")))?;
        if !(0..=MAX_GRADE as i64).contains(&grade) {
            return Err(Error::parse(
                &qrels_path,
                line_no,
                format!("grade {grade} outside {{0,1,2}}"),
            ));
        }
        if !doc_ids.contains(d) || !query_ids.contains(q) {
            dropped += 1;
            continue;
        }
        judgments.insert(q, d, grade as Grade)?;
    }
    if dropped > 0 {
        warn!(
            "{}: dropped {dropped} qrels row(s) referencing unknown ids",
            qrels_path.display()
        );
    }

    let name = root
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "corpus".to_string());
    let corpus = Corpus {
        name,
        documents,
        queries,
        judgments,
        dropped_qrels: dropped,
    };
    corpus.validate()?;
    Ok(corpus)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

/// Serializes the three BEIR files into memory, in corpus order.
pub fn render_beir(corpus: &Corpus) -> (String, String, String) {
    let mut docs = String::new();
    for d in &corpus.documents {
        let rec = serde_json::json!({
            "_id": d.doc_id,
            "title": d.title,
            "text": d.body,
            "metadata": {"source": d.source_tag},
        });
        docs.push_str(&rec.to_string());
        docs.push('\n');
    }
    let mut queries = String::new();
    for q in &corpus.queries {
        queries.push_str(&serde_json::json!({"_id": q.query_id, "text": q.text}).to_string());
        queries.push('\n');
    }
    let mut qrels = String::from("query-id\tcorpus-id\tscore\n");
    for (q, d, g) in corpus.judgments.iter() {
        qrels.push_str(&format!("{q}\t{d}\t{g}\n"));
    }
    (docs, queries, qrels)
}

/// Writes the corpus in the same layout [`load_beir_corpus`] reads.
pub fn write_beir_corpus(corpus: &Corpus, root: &Path) -> Result<Vec<PathBuf>> {
    let (docs, queries, qrels) = render_beir(corpus);
    let paths = vec![
        root.join("corpus.jsonl"),
        root.join("queries.jsonl"),
        root.join("qrels").join("test.tsv"),
    ];
    write_file(&paths[0], docs.as_bytes())?;
    write_file(&paths[1], queries.as_bytes())?;
    write_file(&paths[2], qrels.as_bytes())?;
    Ok(paths)
}

fn default_seed() -> u64 {
    42
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    /// Corpus name recorded in outputs.
    #[serde(default = "default_synth_name")]
    pub name: String,
    /// Passages to draw per source tag.
    pub passage_counts: BTreeMap<String, usize>,
    pub query_count: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// Query templates with `{title}` and `{keyphrase}` slots.
    #[serde(default)]
    pub templates: Vec<String>,
    /// File with one template per line; used when `templates` is empty.
    #[serde(default)]
    pub templates_file: Option<PathBuf>,
    /// Raw text pool per source tag.
    pub source_texts: BTreeMap<String, PathBuf>,
    /// Pool passages shorter than this (whitespace tokens) are ineligible.
    #[serde(default)]
    pub min_passage_tokens: Option<usize>,
    /// Pool passages longer than this are ineligible.
    #[serde(default)]
    pub max_passage_tokens: Option<usize>,
}

fn default_synth_name() -> String {
    "synthetic".to_string()
}

impl SynthConfig {
    pub fn resolved_templates(&self) -> Result<Vec<String>> {
        if !self.templates.is_empty() {
            return Ok(self.templates.clone());
        }
        let Some(path) = &self.templates_file else {
            return Err(Error::Config("no query templates configured".into()));
        };
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let templates: Vec<String> = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(String::from)
            .collect();
        if templates.is_empty() {
            return Err(Error::parse(path, 0, "template file has no templates"));
        }
        Ok(templates)
    }
}

#[derive(Debug, Clone)]
struct PoolPassage {
    title: String,
    body: String,
}

/// Reads a text pool: blank-line separated blocks, first line the title and
/// the remaining lines the body. Single-line blocks use their first tokens as title.
fn read_pool(path: &Path) -> Result<Vec<PoolPassage>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for block in text.split("\n\n") {
        let lines: Vec<&str> = block
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .collect();
        match lines.as_slice() {
            [] => {}
            [only] => {
                let title = tokenize_ws(only).into_iter().take(6).collect::<Vec<_>>().join(" ");
                out.push(PoolPassage {
                    title,
                    body: (*only).to_string(),
                });
            }
            [title, rest @ ..] => out.push(PoolPassage {
                title: (*title).to_string(),
                body: rest.join(" "),
            }),
        }
    }
    Ok(out)
}

const STOPWORDS: &[&str] = &[
    "a", "ad", "al", "alla", "alle", "allo", "agli", "ai", "anche", "che", "chi", "come", "con",
    "cui", "da", "dal", "dalla", "dalle", "dei", "del", "della", "delle", "dello", "degli", "di",
    "e", "ed", "è", "gli", "i", "il", "in", "la", "le", "lo", "ma", "nel", "nella", "nelle",
    "non", "o", "per", "più", "se", "si", "sono", "su", "sul", "sulla", "tra", "fra", "un",
    "una", "uno", "questo", "questa", "quale", "the", "an", "and", "of", "to", "is", "are", "for",
    "on", "with", "by", "as", "at", "or", "be", "it", "this", "that", "from", "was", "were",
];

fn normalize_token(tok: &str) -> String {
    tok.trim_matches(|c: char| !c.is_alphanumeric())
        .to_lowercase()
}

fn is_stopword(tok: &str) -> bool {
    STOPWORDS.contains(&tok)
}

/// Highest-frequency bigram of non-stopword tokens, ties to first occurrence.
///
/// Tokens are lowercased and stripped of surrounding punctuation. Falls back
/// to the first content word, then to the first token.
pub fn extract_keyphrase(body: &str) -> String {
    let toks: Vec<String> = tokenize_ws(body)
        .into_iter()
        .map(normalize_token)
        .filter(|t| !t.is_empty())
        .collect();
    let mut counts: HashMap<(&str, &str), (usize, usize)> = HashMap::new();
    for (i, pair) in toks.windows(2).enumerate() {
        if is_stopword(&pair[0]) || is_stopword(&pair[1]) {
            continue;
        }
        let e = counts
            .entry((pair[0].as_str(), pair[1].as_str()))
            .or_insert((0, i));
        e.0 += 1;
    }
    if let Some(((a, b), _)) = counts
        .iter()
        .max_by(|x, y| x.1 .0.cmp(&y.1 .0).then(y.1 .1.cmp(&x.1 .1)))
    {
        return format!("{a} {b}");
    }
    toks.iter()
        .find(|t| !is_stopword(t))
        .or_else(|| toks.first())
        .cloned()
        .unwrap_or_default()
}

fn fill_template(template: &str, title: &str, keyphrase: &str) -> String {
    template
        .replace("{title}", title)
        .replace("{keyphrase}", keyphrase)
}

/// Builds a template-based benchmark corpus. Pure function of `cfg`.
///
/// Passages are sampled without replacement from each source pool. Each
/// query fills one random template with the title and keyphrase of a random
/// sampled document, which receives grade 1 for that query.
pub fn synthesize_corpus(cfg: &SynthConfig) -> Result<Corpus> {
    let total: usize = cfg.passage_counts.values().sum();
    if total == 0 {
        return Err(Error::Config("passage_counts must sum to more than zero".into()));
    }
    let templates = cfg.resolved_templates()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut documents = Vec::with_capacity(total);
    for (tag, &count) in &cfg.passage_counts {
        if count == 0 {
            continue;
        }
        let path = cfg
            .source_texts
            .get(tag)
            .ok_or_else(|| Error::Config(format!("no source text pool for tag {tag:?}")))?;
        let pool: Vec<PoolPassage> = read_pool(path)?
            .into_iter()
            .filter(|p| {
                let n = tokenize_ws(&p.body).len();
                n > 0
                    && cfg.min_passage_tokens.is_none_or(|m| n >= m)
                    && cfg.max_passage_tokens.is_none_or(|m| n <= m)
            })
            .collect();
        if pool.len() < count {
            return Err(Error::Data(format!(
                "source pool {} for tag {tag:?} has {} eligible passages, {count} requested (short by {})",
                path.display(),
                pool.len(),
                count - pool.len()
            )));
        }
        let mut picks: Vec<usize> = rand::seq::index::sample(&mut rng, pool.len(), count).into_vec();
        picks.sort_unstable();
        for (i, idx) in picks.into_iter().enumerate() {
            let p = &pool[idx];
            documents.push(Document {
                doc_id: format!("{tag}-{i:05}"),
                title: p.title.clone(),
                body: p.body.clone(),
                source_tag: tag.clone(),
            });
        }
    }

    let mut queries = Vec::with_capacity(cfg.query_count);
    let mut judgments = RelevanceJudgments::new();
    for qi in 0..cfg.query_count {
        let doc = &documents[rng.gen_range(0..documents.len())];
        let template = templates
            .choose(&mut rng)
            .expect("templates checked non-empty");
        let query_id = format!("q{qi:05}");
        let mut text = fill_template(template, &doc.title, &extract_keyphrase(&doc.body));
        if text.trim().is_empty() {
            text = doc.title.clone();
        }
        judgments.insert(&query_id, &doc.doc_id, 1)?;
        queries.push(Query { query_id, text });
    }

    let corpus = Corpus {
        name: cfg.name.clone(),
        documents,
        queries,
        judgments,
        dropped_qrels: 0,
    };
    corpus.validate()?;
    Ok(corpus)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorpusStats {
    pub num_documents: usize,
    pub num_queries: usize,
    pub num_judgments: usize,
    pub queries_without_relevant: usize,
    pub mean_doc_tokens: f64,
    pub median_doc_tokens: f64,
    pub max_doc_tokens: usize,
}

pub fn corpus_stats(c: &Corpus) -> CorpusStats {
    let mut lens: Vec<usize> = c
        .documents
        .iter()
        .map(|d| tokenize_ws(&d.body).len())
        .collect();
    lens.sort_unstable();
    let n = lens.len();
    let mean = if n == 0 {
        0.0
    } else {
        lens.iter().sum::<usize>() as f64 / n as f64
    };
    let median = match n {
        0 => 0.0,
        _ if n % 2 == 1 => lens[n / 2] as f64,
        _ => (lens[n / 2 - 1] + lens[n / 2]) as f64 / 2.0,
    };
    CorpusStats {
        num_documents: n,
        num_queries: c.queries.len(),
        num_judgments: c.judgments.len(),
        queries_without_relevant: c
            .queries
            .iter()
            .filter(|q| c.judgments.relevant(&q.query_id).is_empty())
            .count(),
        mean_doc_tokens: mean,
        median_doc_tokens: median,
        max_doc_tokens: lens.last().copied().unwrap_or(0),
    }
}
