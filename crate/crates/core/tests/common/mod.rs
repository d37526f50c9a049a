#![allow(dead_code)]

use std::cell::Cell;
use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use rand::seq::SliceRandom;
use rand::Rng;

use ragbench::ablation::ParetoPoint;
use ragbench::corpus::Document;
use ragbench::latency::Clock;

// ---------------------------------------------------------------- HTTP stub

#[derive(Debug, Clone)]
pub struct Recorded {
    pub method: String,
    pub path: String,
    pub headers: Vec<(String, String)>,
    pub body: String,
}

impl Recorded {
    pub fn header(&self, name: &str) -> Option<&str> {
        self.headers
            .iter()
            .find(|(k, _)| k.eq_ignore_ascii_case(name))
            .map(|(_, v)| v.as_str())
    }
}

type Handler = dyn Fn(&Recorded, usize) -> (u16, String) + Send + Sync;

/// Minimal HTTP/1.1 server on an ephemeral port. The handler receives each
/// request and its 0-based arrival index.
pub struct MockServer {
    pub url: String,
    pub requests: Arc<Mutex<Vec<Recorded>>>,
}

impl MockServer {
    pub fn start(handler: impl Fn(&Recorded, usize) -> (u16, String) + Send + Sync + 'static) -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}", listener.local_addr().unwrap());
        let requests = Arc::new(Mutex::new(Vec::new()));
        let handler: Arc<Handler> = Arc::new(handler);
        let counter = Arc::new(AtomicUsize::new(0));
        let reqs = requests.clone();
        std::thread::spawn(move || {
            for stream in listener.incoming() {
                let Ok(stream) = stream else { continue };
                let (h, r, c) = (handler.clone(), reqs.clone(), counter.clone());
                std::thread::spawn(move || serve_connection(stream, &*h, &r, &c));
            }
        });
        Self { url, requests }
    }

    pub fn count(&self) -> usize {
        self.requests.lock().unwrap().len()
    }

    pub fn recorded(&self) -> Vec<Recorded> {
        self.requests.lock().unwrap().clone()
    }
}

fn serve_connection(stream: TcpStream, handler: &Handler, log: &Mutex<Vec<Recorded>>, counter: &AtomicUsize) {
    let mut reader = BufReader::new(stream.try_clone().unwrap());
    let mut writer = stream;
    loop {
        let mut line = String::new();
        if reader.read_line(&mut line).unwrap_or(0) == 0 {
            return;
        }
        let mut parts = line.split_whitespace();
        let method = parts.next().unwrap_or_default().to_string();
        let path = parts.next().unwrap_or_default().to_string();
        let mut headers = Vec::new();
        loop {
            let mut h = String::new();
            if reader.read_line(&mut h).unwrap_or(0) == 0 {
                return;
            }
            let h = h.trim_end();
            if h.is_empty() {
                break;
            }
            if let Some((k, v)) = h.split_once(':') {
                headers.push((k.trim().to_string(), v.trim().to_string()));
            }
        }
        let len = headers
            .iter()
            .find(|(k, _)| k.eq_ignore_ascii_case("content-length"))
            .and_then(|(_, v)| v.parse::<usize>().ok())
            .unwrap_or(0);
        let mut body = vec![0u8; len];
        if reader.read_exact(&mut body).is_err() {
            return;
        }
        let req = Recorded {
            method,
            path,
            headers,
            body: String::from_utf8_lossy(&body).into_owned(),
        };
        let idx = counter.fetch_add(1, Ordering::SeqCst);
        log.lock().unwrap().push(req.clone());
        let (status, body) = handler(&req, idx);
        let reason = match status {
            200 => "OK",
            400 => "Bad Request",
            404 => "Not Found",
            429 => "Too Many Requests",
            503 => "Service Unavailable",
            _ => "Status",
        };
        let resp = format!(
            "HTTP/1.1 {status} {reason}\r\nContent-Type: application/json\r\nContent-Length: {}\r\n\r\n{body}",
            body.len()
        );
        if writer.write_all(resp.as_bytes()).is_err() {
            return;
        }
    }
}

/// Handler that answers /embed with mock embeddings of `dim` and /healthz
/// with the given model list.
pub fn mock_protocol(dim: usize, models: Vec<String>) -> impl Fn(&Recorded, usize) -> (u16, String) + Send + Sync {
    move |req, _| match (req.method.as_str(), req.path.as_str()) {
        ("GET", "/healthz") => (200, serde_json::json!({"status": "ok", "models": models}).to_string()),
        ("POST", "/embed") => {
            let v: serde_json::Value = match serde_json::from_str(&req.body) {
                Ok(v) => v,
                Err(_) => return (400, r#"{"error":"malformed"}"#.into()),
            };
            if !models.iter().any(|m| Some(m.as_str()) == v["model"].as_str()) {
                return (404, r#"{"error":"unknown model"}"#.into());
            }
            let vectors: Vec<Vec<f32>> = v["texts"]
                .as_array()
                .unwrap()
                .iter()
                .map(|t| ragbench::embedding::mock_embed(t.as_str().unwrap(), dim).into_values())
                .collect();
            (200, serde_json::json!({"dim": dim, "vectors": vectors}).to_string())
        }
        _ => (404, "{}".into()),
    }
}

/// An address nothing listens on.
pub fn dead_endpoint() -> String {
    let l = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = l.local_addr().unwrap();
    drop(l);
    format!("http://{addr}")
}

// ---------------------------------------------------------------- clocks

pub struct FakeClock(pub Cell<Duration>);

impl FakeClock {
    pub fn new() -> Self {
        Self(Cell::new(Duration::ZERO))
    }

    pub fn advance(&self, d: Duration) {
        self.0.set(self.0.get() + d);
    }
}

impl Clock for FakeClock {
    fn now(&self) -> Duration {
        self.0.get()
    }
}

// ---------------------------------------------------------------- oracles

/// Brute-force metric evaluator. The ideal DCG is the maximum over every
/// ordering of the judged documents.
pub struct OracleMetrics {
    pub recall: BTreeMap<usize, f64>,
    pub rr: f64,
    pub ndcg: f64,
}

fn permutations(items: &[u8]) -> Vec<Vec<u8>> {
    if items.len() <= 1 {
        return vec![items.to_vec()];
    }
    let mut out = Vec::new();
    for i in 0..items.len() {
        let mut rest = items.to_vec();
        let x = rest.remove(i);
        for mut p in permutations(&rest) {
            p.insert(0, x);
            out.push(p);
        }
    }
    out
}

fn oracle_dcg(grades: &[u8], k: usize) -> f64 {
    let mut s = 0.0;
    for (i, g) in grades.iter().enumerate() {
        if i >= k {
            break;
        }
        let gain = 2f64.powi(*g as i32) - 1.0;
        s += gain / ((i + 2) as f64).log2();
    }
    s
}

/// `None` when no judged document has a positive grade.
pub fn oracle_metrics(
    ranking: &[String],
    grades: &BTreeMap<String, u8>,
    ks: &[usize],
    ndcg_k: usize,
) -> Option<OracleMetrics> {
    let relevant: Vec<&String> = grades.iter().filter(|(_, g)| **g > 0).map(|(d, _)| d).collect();
    if relevant.is_empty() {
        return None;
    }
    let mut recall = BTreeMap::new();
    for &k in ks {
        let mut hit = 0;
        for r in &relevant {
            if ranking.iter().take(k).any(|d| d == *r) {
                hit += 1;
            }
        }
        recall.insert(k, hit as f64 / relevant.len() as f64);
    }
    let mut rr = 0.0;
    for (i, d) in ranking.iter().enumerate() {
        if grades.get(d).copied().unwrap_or(0) > 0 {
            rr = 1.0 / (i as f64 + 1.0);
            break;
        }
    }
    let got: Vec<u8> = ranking.iter().map(|d| grades.get(d).copied().unwrap_or(0)).collect();
    let judged: Vec<u8> = grades.values().copied().collect();
    let ideal = if judged.len() <= 8 {
        permutations(&judged)
            .iter()
            .map(|p| oracle_dcg(p, ndcg_k))
            .fold(0.0, f64::max)
    } else {
        let mut s = judged.clone();
        s.sort_unstable_by(|a, b| b.cmp(a));
        oracle_dcg(&s, ndcg_k)
    };
    Some(OracleMetrics {
        recall,
        rr,
        ndcg: oracle_dcg(&got, ndcg_k) / ideal,
    })
}

/// Exhaustive cosine ranking in f64 from the raw inputs: score descending,
/// id ascending on ties.
pub fn brute_force_top_k(vectors: &[(String, Vec<f32>)], q: &[f32], k: usize) -> Vec<(String, f64)> {
    let norm = |v: &[f32]| v.iter().map(|x| (*x as f64) * (*x as f64)).sum::<f64>().sqrt();
    let qn = norm(q);
    let mut scored: Vec<(String, f64)> = vectors
        .iter()
        .map(|(id, v)| {
            let dot: f64 = v.iter().zip(q).map(|(a, b)| *a as f64 * *b as f64).sum();
            (id.clone(), dot / (norm(v) * qn))
        })
        .collect();
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0)));
    scored.truncate(k);
    scored
}

/// O(n^2) Pareto oracle: a point survives iff no other point is at least as
/// good on both axes and strictly better on one.
pub fn pareto_oracle(points: &[ParetoPoint]) -> Vec<ParetoPoint> {
    points
        .iter()
        .filter(|p| {
            !points.iter().any(|o| {
                o.latency_ms <= p.latency_ms
                    && o.quality >= p.quality
                    && (o.latency_ms < p.latency_ms || o.quality > p.quality)
            })
        })
        .cloned()
        .collect()
}

pub fn sorted_points(mut v: Vec<ParetoPoint>) -> Vec<ParetoPoint> {
    v.sort_by(|a, b| {
        a.latency_ms
            .total_cmp(&b.latency_ms)
            .then(a.quality.total_cmp(&b.quality))
            .then_with(|| a.label.cmp(&b.label))
    });
    v
}

// ---------------------------------------------------------------- generators

pub const VOCAB: &[&str] = &[
    "pensione", "contributi", "domanda", "assegno", "reddito", "imposta", "medico", "ricetta",
    "comune", "residenza", "certificato", "portale", "scadenza", "modulo", "famiglia", "lavoro",
    "rimborso", "tessera", "esenzione", "visita", "passaporto", "ufficio", "termine", "importo",
];

pub fn random_text(rng: &mut impl Rng, n_tokens: usize) -> String {
    let mut words = Vec::with_capacity(n_tokens);
    for i in 0..n_tokens {
        let mut w = VOCAB.choose(rng).unwrap().to_string();
        if rng.gen_bool(0.12) || i + 1 == n_tokens {
            w.push('.');
        }
        words.push(w);
    }
    words.join(" ")
}

pub fn doc(id: &str, body: &str) -> Document {
    Document {
        doc_id: id.to_string(),
        title: String::new(),
        body: body.to_string(),
        source_tag: "t".to_string(),
    }
}

pub fn random_unit(rng: &mut impl Rng, dim: usize) -> Vec<f32> {
    loop {
        let v: Vec<f32> = (0..dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        let n: f32 = v.iter().map(|x| x * x).sum::<f32>().sqrt();
        if n > 1e-3 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Writes a text pool of `n` passages in the block format the synthesizer reads.
pub fn write_pool(path: &Path, tag: &str, n: usize, rng: &mut impl Rng) {
    let mut out = String::new();
    for i in 0..n {
        let len = rng.gen_range(30..120);
        out.push_str(&format!("{tag} passaggio {i}\n{}\n\n", random_text(rng, len)));
    }
    std::fs::write(path, out).unwrap();
}

// ---------------------------------------------------------------- chunking

/// Coverage, overlap, length bounds and provenance for one document.
pub fn check_chunk_invariants(
    d: &Document,
    cfg: &ragbench::chunking::ChunkingConfig,
    chunks: &[ragbench::chunking::Chunk],
) -> Result<(), String> {
    use ragbench::chunking::{parent_of, Strategy};
    let tokens: Vec<&str> = d.body.split_whitespace().collect();
    let n = tokens.len();
    let l = cfg.size;
    let min_keep = |len: usize| len as f64 >= cfg.trailing_min_fraction * l as f64;

    if n == 0 {
        return if chunks.is_empty() { Ok(()) } else { Err("chunks from an empty document".into()) };
    }
    if chunks.is_empty() {
        return Err("non-empty document produced no chunks".into());
    }
    for c in chunks {
        let s = c.token_span;
        if s.start >= s.end || s.end > n {
            return Err(format!("bad span {s:?} for {n} tokens"));
        }
        if c.parent_doc_id != d.doc_id || parent_of(&c.chunk_id) != d.doc_id {
            return Err(format!("provenance lost for {}", c.chunk_id));
        }
        if c.chunk_id != format!("{}#{}-{}", d.doc_id, s.start, s.end) {
            return Err(format!("chunk id {} does not encode its span", c.chunk_id));
        }
        if c.text != tokens[s.start..s.end].join(" ") {
            return Err(format!("text of {} does not match its span", c.chunk_id));
        }
    }
    let whole = chunks.len() == 1 && chunks[0].token_span.start == 0 && chunks[0].token_span.end == n;
    match cfg.strategy {
        Strategy::Fixed => {
            if whole && !min_keep(n) {
                return Ok(());
            }
            let mut expect = 0;
            for c in chunks {
                if c.token_span.start != expect {
                    return Err(format!("fixed chunks not contiguous at {}", c.chunk_id));
                }
                let len = c.token_span.end - c.token_span.start;
                if len != l && !(c.token_span.end == n && len < l && min_keep(len)) {
                    return Err(format!("fixed chunk {} has length {len}", c.chunk_id));
                }
                expect = c.token_span.end;
            }
            let tail = n - expect;
            if tail >= l || (tail > 0 && min_keep(tail)) {
                return Err(format!("{tail} uncovered trailing tokens should have been kept"));
            }
        }
        Strategy::Sliding => {
            if whole && !min_keep(n) {
                return Ok(());
            }
            let stride = l / 2;
            if chunks[0].token_span.start != 0 {
                return Err("sliding does not start at 0".into());
            }
            for w in chunks.windows(2) {
                let (a, b) = (w[0].token_span, w[1].token_span);
                if b.start != a.start + stride {
                    return Err(format!("stride {} != {stride}", b.start - a.start));
                }
                if a.end - a.start == l && a.end - b.start != l - stride {
                    return Err(format!("overlap {} != {}", a.end - b.start, l - stride));
                }
            }
            for c in chunks {
                let len = c.token_span.end - c.token_span.start;
                if len > l || (len < l && (c.token_span.end != n || !min_keep(len))) {
                    return Err(format!("sliding window {} has length {len}", c.chunk_id));
                }
            }
            let last_end = chunks.iter().map(|c| c.token_span.end).max().unwrap();
            let tail = n - last_end;
            if tail > 0 && min_keep(tail) {
                return Err(format!("{tail} trailing tokens uncovered"));
            }
        }
        Strategy::Semantic => {
            if whole {
                return Ok(());
            }
            for w in chunks.windows(2) {
                if w[1].token_span.start < w[0].token_span.end {
                    return Err("semantic chunks overlap or are out of order".into());
                }
            }
            for c in chunks {
                let len = c.token_span.end - c.token_span.start;
                if len > 2 * l || !min_keep(len) {
                    return Err(format!("semantic chunk {} has length {len} outside bounds", c.chunk_id));
                }
            }
        }
    }
    Ok(())
}
