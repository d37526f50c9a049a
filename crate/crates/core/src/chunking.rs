//! Document chunking: fixed, sliding-window and semantic strategies over
//! whitespace tokens.
//!
//! Every chunk records the half-open token span it covers in its parent, and
//! its text is the parent's tokens over that span joined by single spaces.
//!
//! Retention rules shared by all strategies:
//! - a fragment of `f` tokens is kept iff `f >= L/4` (checked as `4f >= L`);
//! - a document that would otherwise yield no chunk becomes one whole-document chunk.
//!
//! Sliding windows that run past the end of the document are truncated and
//! then subject to the same `L/4` rule.

use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::Document;
use crate::embedding::EmbeddingVector;
use crate::error::{Error, Result};
use crate::index::cosine;

/// Sizes used by the standard ablation grid.
pub const STANDARD_SIZES: [usize; 5] = [8, 16, 32, 64, 128];

pub const DEFAULT_TAU: f64 = 0.75;

/// Half-open `[start, end)` range of whitespace-token offsets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TokenSpan {
    pub start: usize,
    pub end: usize,
}

impl TokenSpan {
    pub fn new(start: usize, end: usize) -> Self {
        debug_assert!(start <= end);
        Self { start, end }
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start == self.end
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chunk {
    pub chunk_id: String,
    pub parent_doc_id: String,
    pub token_span: TokenSpan,
    pub text: String,
}

impl Chunk {
    fn from_tokens(doc_id: &str, tokens: &[&str], span: TokenSpan) -> Self {
        Chunk {
            chunk_id: chunk_id(doc_id, span),
            parent_doc_id: doc_id.to_string(),
            token_span: span,
            text: tokens[span.start..span.end].join(" "),
        }
    }
}

/// `"{parent_doc_id}#{start}-{end}"`.
pub fn chunk_id(doc_id: &str, span: TokenSpan) -> String {
    format!("{doc_id}#{}-{}", span.start, span.end)
}

/// Recovers the parent document id from a chunk id.
pub fn parent_of(chunk_id: &str) -> &str {
    chunk_id.rsplit_once('#').map_or(chunk_id, |(doc, _)| doc)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Fixed,
    Sliding,
    Semantic,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::Fixed, Strategy::Sliding, Strategy::Semantic];

    pub fn as_str(&self) -> &'static str {
        match self {
            Strategy::Fixed => "fixed",
            Strategy::Sliding => "sliding",
            Strategy::Semantic => "semantic",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fixed" => Ok(Strategy::Fixed),
            "sliding" | "sliding_window" | "sliding-window" => Ok(Strategy::Sliding),
            "semantic" => Ok(Strategy::Semantic),
            other => Err(Error::Config(format!("unknown chunking strategy {other:?}"))),
        }
    }
}

fn default_tau() -> f64 {
    DEFAULT_TAU
}

fn default_trailing() -> f64 {
    0.25
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChunkingConfig {
    pub strategy: Strategy,
    /// Target size `L` in whitespace tokens.
    pub size: usize,
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default = "default_trailing")]
    pub trailing_min_fraction: f64,
}

impl ChunkingConfig {
    pub fn new(strategy: Strategy, size: usize) -> Self {
        Self {
            strategy,
            size,
            tau: DEFAULT_TAU,
            trailing_min_fraction: default_trailing(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.size == 0 {
            return Err(Error::Config("chunk size must be at least 1".into()));
        }
        if self.strategy != Strategy::Fixed && self.size < 2 {
            return Err(Error::Config(format!(
                "{} chunking needs a size of at least 2",
                self.strategy
            )));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::Config(format!("tau {} outside [0, 1]", self.tau)));
        }
        if !(0.0..=1.0).contains(&self.trailing_min_fraction) {
            return Err(Error::Config(format!(
                "trailing_min_fraction {} outside [0, 1]",
                self.trailing_min_fraction
            )));
        }
        Ok(())
    }

    /// Label used in reports, e.g. `fixed-32`.
    pub fn label(&self) -> String {
        format!("{}-{}", self.strategy, self.size)
    }

    fn keeps(&self, fragment: usize) -> bool {
        fragment as f64 >= self.trailing_min_fraction * self.size as f64
    }
}

/// Splits on runs of Unicode whitespace. Never yields empty tokens.
pub fn tokenize_ws(text: &str) -> Vec<&str> {
    text.split_whitespace().collect()
}

fn check_size(size: usize, min: usize) -> Result<()> {
    if size < min {
        return Err(Error::InvalidInput(format!(
            "chunk size {size} below minimum {min}"
        )));
    }
    Ok(())
}

/// Fixed split of `[offset, offset + n)` into spans of `size`. Returns the
/// kept spans and the discarded trailing span, if any.
fn fixed_spans(
    offset: usize,
    n: usize,
    size: usize,
    keeps: impl Fn(usize) -> bool,
) -> (Vec<TokenSpan>, Option<TokenSpan>) {
    let mut spans = Vec::with_capacity(n / size + 1);
    let mut start = 0;
    while start + size <= n {
        spans.push(TokenSpan::new(offset + start, offset + start + size));
        start += size;
    }
    let mut dropped = None;
    if start < n {
        let tail = TokenSpan::new(offset + start, offset + n);
        if keeps(tail.len()) {
            spans.push(tail);
        } else {
            dropped = Some(tail);
        }
    }
    (spans, dropped)
}

fn whole_document(doc: &Document, tokens: &[&str]) -> Vec<Chunk> {
    if tokens.is_empty() {
        return Vec::new();
    }
    vec![Chunk::from_tokens(
        &doc.doc_id,
        tokens,
        TokenSpan::new(0, tokens.len()),
    )]
}

pub fn chunk_fixed(doc: &Document, size: usize) -> Result<Vec<Chunk>> {
    chunk_fixed_with(doc, &ChunkingConfig::new(Strategy::Fixed, size))
}

fn chunk_fixed_with(doc: &Document, cfg: &ChunkingConfig) -> Result<Vec<Chunk>> {
    check_size(cfg.size, 1)?;
    let tokens = tokenize_ws(&doc.body);
    let (spans, _) = fixed_spans(0, tokens.len(), cfg.size, |f| cfg.keeps(f));
    if spans.is_empty() {
        return Ok(whole_document(doc, &tokens));
    }
    Ok(spans
        .into_iter()
        .map(|s| Chunk::from_tokens(&doc.doc_id, &tokens, s))
        .collect())
}

/// Windows of `size` tokens at stride `size / 2`.
pub fn chunk_sliding(doc: &Document, size: usize) -> Result<Vec<Chunk>> {
    chunk_sliding_with(doc, &ChunkingConfig::new(Strategy::Sliding, size))
}

fn chunk_sliding_with(doc: &Document, cfg: &ChunkingConfig) -> Result<Vec<Chunk>> {
    check_size(cfg.size, 2)?;
    let tokens = tokenize_ws(&doc.body);
    let n = tokens.len();
    let stride = cfg.size / 2;
    let mut chunks = Vec::new();
    let mut start = 0;
    while start < n {
        let span = TokenSpan::new(start, (start + cfg.size).min(n));
        if cfg.keeps(span.len()) {
            chunks.push(Chunk::from_tokens(&doc.doc_id, &tokens, span));
        }
        start += stride;
    }
    if chunks.is_empty() {
        return Ok(whole_document(doc, &tokens));
    }
    Ok(chunks)
}

/// A sentence and its token span within the text it was split from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sentence {
    pub text: String,
    pub span: TokenSpan,
}

/// Sentence boundaries fall after any token ending in `.`, `!`, `?` or `;`.
/// No abbreviation handling. Spans tile the token sequence.
pub fn split_sentences(text: &str) -> Vec<Sentence> {
    let tokens = tokenize_ws(text);
    let mut out = Vec::new();
    let mut start = 0;
    for (i, tok) in tokens.iter().enumerate() {
        let last = i + 1 == tokens.len();
        if last || tok.ends_with(['.', '!', '?', ';']) {
            let span = TokenSpan::new(start, i + 1);
            out.push(Sentence {
                text: tokens[span.start..span.end].join(" "),
                span,
            });
            start = i + 1;
        }
    }
    out
}

/// Encodes sentences for boundary detection.
pub trait SentenceEncoder {
    fn encode_sentences(&self, sentences: &[String]) -> Result<Vec<EmbeddingVector>>;
}

impl<F> SentenceEncoder for F
where
    F: Fn(&[String]) -> Result<Vec<EmbeddingVector>>,
{
    fn encode_sentences(&self, sentences: &[String]) -> Result<Vec<EmbeddingVector>> {
        self(sentences)
    }
}

/// A semantic chunk plus whether it came from the fixed-split fallback.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticPiece {
    pub chunk: Chunk,
    pub fallback: bool,
}

pub fn chunk_semantic(
    doc: &Document,
    size: usize,
    tau: f64,
    encoder: &dyn SentenceEncoder,
) -> Result<Vec<Chunk>> {
    let cfg = ChunkingConfig {
        tau,
        ..ChunkingConfig::new(Strategy::Semantic, size)
    };
    Ok(chunk_semantic_traced(doc, &cfg, encoder)?
        .into_iter()
        .map(|p| p.chunk)
        .collect())
}

/// Semantic chunking with fallback provenance.
///
/// Adjacent sentences whose cosine is strictly below `tau` are separated;
/// the remaining runs merge into segments. Segments outside `[L/2, 2L]` are
/// re-split by the fixed strategy at `L`, affecting only that segment.
pub fn chunk_semantic_traced(
    doc: &Document,
    cfg: &ChunkingConfig,
    encoder: &dyn SentenceEncoder,
) -> Result<Vec<SemanticPiece>> {
    check_size(cfg.size, 2)?;
    let tokens = tokenize_ws(&doc.body);
    let sentences = split_sentences(&doc.body);
    if sentences.is_empty() {
        return Ok(Vec::new());
    }

    let mut segments: Vec<TokenSpan> = Vec::new();
    if sentences.len() == 1 {
        segments.push(sentences[0].span);
    } else {
        let texts: Vec<String> = sentences.iter().map(|s| s.text.clone()).collect();
        let vectors = encoder.encode_sentences(&texts)?;
        if vectors.len() != texts.len() {
            return Err(Error::Contract(format!(
                "encoder returned {} vectors for {} sentences",
                vectors.len(),
                texts.len()
            )));
        }
        let mut current = sentences[0].span;
        for i in 1..sentences.len() {
            let sim = cosine(&vectors[i - 1], &vectors[i])?;
            if sim < cfg.tau {
                segments.push(current);
                current = sentences[i].span;
            } else {
                current.end = sentences[i].span.end;
            }
        }
        segments.push(current);
    }

    let lo = cfg.size.div_ceil(2);
    let hi = 2 * cfg.size;
    let mut pieces = Vec::new();
    for seg in segments {
        if (lo..=hi).contains(&seg.len()) {
            pieces.push(SemanticPiece {
                chunk: Chunk::from_tokens(&doc.doc_id, &tokens, seg),
                fallback: false,
            });
        } else {
            let (spans, _) = fixed_spans(seg.start, seg.len(), cfg.size, |f| cfg.keeps(f));
            pieces.extend(spans.into_iter().map(|s| SemanticPiece {
                chunk: Chunk::from_tokens(&doc.doc_id, &tokens, s),
                fallback: true,
            }));
        }
    }
    if pieces.is_empty() {
        return Ok(whole_document(doc, &tokens)
            .into_iter()
            .map(|chunk| SemanticPiece {
                chunk,
                fallback: true,
            })
            .collect());
    }
    Ok(pieces)
}

/// Chunks one document under `cfg`. The encoder is used only by `Semantic`.
pub fn chunk_document(
    doc: &Document,
    cfg: &ChunkingConfig,
    encoder: &dyn SentenceEncoder,
) -> Result<Vec<Chunk>> {
    cfg.validate()?;
    match cfg.strategy {
        Strategy::Fixed => chunk_fixed_with(doc, cfg),
        Strategy::Sliding => chunk_sliding_with(doc, cfg),
        Strategy::Semantic => Ok(chunk_semantic_traced(doc, cfg, encoder)?
            .into_iter()
            .map(|p| p.chunk)
            .collect()),
    }
}

pub fn chunk_corpus(
    docs: &[Document],
    cfg: &ChunkingConfig,
    encoder: &dyn SentenceEncoder,
) -> Result<Vec<Chunk>> {
    let mut out = Vec::new();
    for doc in docs {
        out.extend(chunk_document(doc, cfg, encoder)?);
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct ChunkRecord {
    chunk_id: String,
    parent_doc_id: String,
    token_span: [usize; 2],
    text: String,
}

/// Writes chunks as line-delimited JSON records.
pub fn write_chunks(chunks: &[Chunk], path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    for c in chunks {
        let rec = ChunkRecord {
            chunk_id: c.chunk_id.clone(),
            parent_doc_id: c.parent_doc_id.clone(),
            token_span: [c.token_span.start, c.token_span.end],
            text: c.text.clone(),
        };
        serde_json::to_writer(&mut buf, &rec).expect("chunk record serializes");
        buf.push(b'\n');
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn read_chunks(path: &Path) -> Result<Vec<Chunk>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ChunkRecord =
            serde_json::from_str(&line).map_err(|e| Error::parse(path, i + 1, e.to_string()))?;
        if rec.token_span[0] > rec.token_span[1] {
            return Err(Error::parse(path, i + 1, "token_span start after end"));
        }
        out.push(Chunk {
            chunk_id: rec.chunk_id,
            parent_doc_id: rec.parent_doc_id,
            token_span: TokenSpan::new(rec.token_span[0], rec.token_span[1]),
            text: rec.text,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::mock_embed;

    fn doc_of_len(n: usize) -> Document {
        Document {
            doc_id: "d".into(),
            title: String::new(),
            body: (0..n).map(|i| format!("t{i}")).collect::<Vec<_>>().join(" "),
            source_tag: "t".into(),
        }
    }

    fn spans(chunks: &[Chunk]) -> Vec<(usize, usize)> {
        chunks
            .iter()
            .map(|c| (c.token_span.start, c.token_span.end))
            .collect()
    }

    fn mock_encoder(dim: usize) -> impl Fn(&[String]) -> Result<Vec<EmbeddingVector>> {
        move |s: &[String]| Ok(s.iter().map(|t| mock_embed(t, dim)).collect())
    }

    #[test]
    fn tokenize_examples() {
        assert_eq!(tokenize_ws("il gatto  dorme"), vec!["il", "gatto", "dorme"]);
        assert!(tokenize_ws("").is_empty());
        assert_eq!(tokenize_ws("a\tb\nc"), vec!["a", "b", "c"]);
        assert_eq!(tokenize_ws("x\u{2003}y"), vec!["x", "y"]);
    }

    #[test]
    fn fixed_discards_short_trailing_fragment() {
        let c = chunk_fixed(&doc_of_len(70), 32).unwrap();
        assert_eq!(spans(&c), vec![(0, 32), (32, 64)]);
    }

    #[test]
    fn fixed_exact_multiple() {
        let c = chunk_fixed(&doc_of_len(64), 32).unwrap();
        assert_eq!(spans(&c), vec![(0, 32), (32, 64)]);
    }

    #[test]
    fn fixed_keeps_trailing_at_quarter_boundary() {
        let c = chunk_fixed(&doc_of_len(72), 32).unwrap();
        assert_eq!(spans(&c), vec![(0, 32), (32, 64), (64, 72)]);
    }

    #[test]
    fn fixed_short_document_is_one_chunk() {
        let c = chunk_fixed(&doc_of_len(5), 32).unwrap();
        assert_eq!(spans(&c), vec![(0, 5)]);
        assert_eq!(c[0].text, "t0 t1 t2 t3 t4");
        assert_eq!(c[0].chunk_id, "d#0-5");
    }

    #[test]
    fn sliding_examples() {
        let c = chunk_sliding(&doc_of_len(64), 32).unwrap();
        assert_eq!(spans(&c), vec![(0, 32), (16, 48), (32, 64), (48, 64)]);
        let c = chunk_sliding(&doc_of_len(32), 32).unwrap();
        assert_eq!(spans(&c), vec![(0, 32), (16, 32)]);
        let c = chunk_sliding(&doc_of_len(7), 32).unwrap();
        assert_eq!(spans(&c), vec![(0, 7)]);
    }

    #[test]
    fn sliding_rejects_size_one() {
        assert!(chunk_sliding(&doc_of_len(7), 1).is_err());
    }

    #[test]
    fn sentence_examples() {
        assert_eq!(split_sentences("A b. C d.").len(), 2);
        assert_eq!(split_sentences("no terminator").len(), 1);
        let s = split_sentences("x? y! z.");
        assert_eq!(s.len(), 3);
        assert_eq!(s[1].text, "y!");
        assert_eq!(s[2].span, TokenSpan::new(2, 3));
        assert!(split_sentences("").is_empty());
        assert_eq!(split_sentences("uno; due").len(), 2);
    }

    #[test]
    fn semantic_single_sentence() {
        let d = doc_of_len(32);
        let c = chunk_semantic(&d, 32, 0.75, &mock_encoder(64)).unwrap();
        assert_eq!(spans(&c), vec![(0, 32)]);
    }

    #[test]
    fn semantic_identical_sentences_merge() {
        let sent = "alpha beta gamma delta epsilon zeta eta theta.";
        let d = Document {
            doc_id: "d".into(),
            title: String::new(),
            body: format!("{sent} {sent}"),
            source_tag: "t".into(),
        };
        let c = chunk_semantic(&d, 8, 0.75, &mock_encoder(64)).unwrap();
        assert_eq!(spans(&c), vec![(0, 16)]);
        // 16 > 2L at L=4: fixed fallback
        let c = chunk_semantic(&d, 4, 0.75, &mock_encoder(64)).unwrap();
        assert_eq!(spans(&c), vec![(0, 4), (4, 8), (8, 12), (12, 16)]);
    }

    #[test]
    fn semantic_boundary_between_unrelated_sentences() {
        let a = "uno due tre quattro cinque sei sette otto.";
        let b = "rosso verde blu giallo nero bianco viola grigio.";
        let enc = mock_encoder(256);
        let va = mock_embed(a, 256);
        let vb = mock_embed(b, 256);
        assert!(cosine(&va, &vb).unwrap() < 0.75);
        let d = Document {
            doc_id: "d".into(),
            title: String::new(),
            body: format!("{a} {b}"),
            source_tag: "t".into(),
        };
        let c = chunk_semantic(&d, 8, 0.75, &enc).unwrap();
        assert_eq!(spans(&c), vec![(0, 8), (8, 16)]);
    }

    #[test]
    fn semantic_tau_tie_merges() {
        let enc = |s: &[String]| -> Result<Vec<EmbeddingVector>> {
            // cosine exactly 0.5 between the two sentences
            Ok(vec![
                EmbeddingVector::new(vec![1.0, 0.0]).unwrap(),
                EmbeddingVector::new(vec![0.5, 0.75f32.sqrt()]).unwrap(),
            ][..s.len()]
                .to_vec())
        };
        let d = Document {
            doc_id: "d".into(),
            title: String::new(),
            body: "a b c d. e f g h.".into(),
            source_tag: "t".into(),
        };
        let merged = chunk_semantic(&d, 8, 0.5, &enc).unwrap();
        assert_eq!(spans(&merged), vec![(0, 8)]);
        let split = chunk_semantic(&d, 8, 0.5001, &enc).unwrap();
        assert_eq!(spans(&split), vec![(0, 4), (4, 8)]);
    }

    #[test]
    fn parent_of_handles_hash_in_doc_id() {
        assert_eq!(parent_of("doc#1#0-32"), "doc#1");
        assert_eq!(parent_of("plain"), "plain");
    }

    #[test]
    fn chunk_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("chunks.jsonl");
        let chunks = chunk_sliding(&doc_of_len(50), 16).unwrap();
        write_chunks(&chunks, &path).unwrap();
        assert_eq!(read_chunks(&path).unwrap(), chunks);
    }
}
