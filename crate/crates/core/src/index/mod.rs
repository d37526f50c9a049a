//! Cosine-similarity vector search.
//!
//! Vectors are L2-normalized on insert, so scoring is an inner product.
//! Flat search is exact; HNSW sits behind the same [`VectorIndex::search`].
//! Results are ordered by descending score, ties by ascending id.

mod hnsw;
mod persist;

use std::cmp::Ordering;
use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::embedding::EmbeddingVector;
use crate::error::{Error, Result};

pub use persist::{read_index, write_index, INDEX_MAGIC, INDEX_VERSION};

/// Cosine similarity of two non-zero vectors of equal dimension.
pub fn cosine(u: &EmbeddingVector, v: &EmbeddingVector) -> Result<f64> {
    if u.dim() != v.dim() {
        return Err(Error::InvalidInput(format!(
            "cosine of vectors with dims {} and {}",
            u.dim(),
            v.dim()
        )));
    }
    let (mut dot, mut nu, mut nv) = (0.0f64, 0.0f64, 0.0f64);
    for (&a, &b) in u.values().iter().zip(v.values()) {
        let (a, b) = (a as f64, b as f64);
        dot += a * b;
        nu += a * a;
        nv += b * b;
    }
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::UndefinedSimilarity);
    }
    Ok((dot / (nu.sqrt() * nv.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IndexKind {
    #[default]
    Flat,
    Hnsw,
}

fn default_m() -> usize {
    32
}
fn default_ef_construction() -> usize {
    200
}
fn default_ef_search() -> usize {
    100
}
fn default_activation() -> usize {
    100_000
}
fn default_seed() -> u64 {
    42
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HnswParams {
    #[serde(default = "default_m")]
    pub m: usize,
    #[serde(default = "default_ef_construction")]
    pub ef_construction: usize,
    #[serde(default = "default_ef_search")]
    pub ef_search: usize,
    /// Collections at least this large get an HNSW index in `auto` mode.
    #[serde(default = "default_activation")]
    pub activation_threshold: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
}

impl Default for HnswParams {
    fn default() -> Self {
        Self {
            m: default_m(),
            ef_construction: default_ef_construction(),
            ef_search: default_ef_search(),
            activation_threshold: default_activation(),
            seed: default_seed(),
        }
    }
}

impl HnswParams {
    pub fn validate(&self) -> Result<()> {
        if self.m < 2 {
            return Err(Error::Config(format!("HNSW M must be >= 2, got {}", self.m)));
        }
        if self.ef_search == 0 || self.ef_construction == 0 {
            return Err(Error::Config("HNSW ef values must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SearchHit {
    pub id: String,
    pub score: f64,
}

/// Descending score, then ascending id.
pub(crate) fn hit_order(a_score: f64, a_id: &str, b_score: f64, b_id: &str) -> Ordering {
    b_score.total_cmp(&a_score).then_with(|| a_id.cmp(b_id))
}

#[derive(Debug, Clone, PartialEq)]
pub struct VectorIndex {
    dim: usize,
    ids: Vec<String>,
    /// Row-major unit vectors.
    data: Vec<f32>,
    graph: Option<hnsw::HnswGraph>,
}

fn normalize_into(v: &[f32], out: &mut Vec<f32>) -> bool {
    let norm = v.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt();
    if norm == 0.0 {
        return false;
    }
    out.extend(v.iter().map(|&x| (x as f64 / norm) as f32));
    true
}

impl VectorIndex {
    fn collect<I>(vectors: I) -> Result<(usize, Vec<String>, Vec<f32>)>
    where
        I: IntoIterator<Item = (String, EmbeddingVector)>,
    {
        let mut dim = None;
        let mut ids = Vec::new();
        let mut data = Vec::new();
        let mut seen = HashSet::new();
        for (id, v) in vectors {
            let d = *dim.get_or_insert(v.dim());
            if v.dim() != d {
                return Err(Error::IndexBuild(format!(
                    "vector {id:?} has dim {}, expected {d}",
                    v.dim()
                )));
            }
            if !seen.insert(id.clone()) {
                return Err(Error::IndexBuild(format!("duplicate id {id:?}")));
            }
            if !normalize_into(v.values(), &mut data) {
                return Err(Error::IndexBuild(format!("vector {id:?} is all zeros")));
            }
            ids.push(id);
        }
        Ok((dim.unwrap_or(0), ids, data))
    }

    /// Exact index over `vectors`, kept in the given order.
    pub fn build_flat<I>(vectors: I) -> Result<Self>
    where
        I: IntoIterator<Item = (String, EmbeddingVector)>,
    {
        let (dim, ids, data) = Self::collect(vectors)?;
        Ok(Self {
            dim,
            ids,
            data,
            graph: None,
        })
    }

    /// HNSW index; construction is single-threaded and seeded by `params.seed`.
    pub fn build_hnsw<I>(vectors: I, params: HnswParams) -> Result<Self>
    where
        I: IntoIterator<Item = (String, EmbeddingVector)>,
    {
        params.validate()?;
        let (dim, ids, data) = Self::collect(vectors)?;
        let graph = hnsw::HnswGraph::build(&data, dim, params);
        Ok(Self {
            dim,
            ids,
            data,
            graph: Some(graph),
        })
    }

    /// Flat unless `kind` is HNSW, or `auto` and the size crosses the threshold.
    pub fn build<I>(vectors: I, kind: Option<IndexKind>, params: HnswParams) -> Result<Self>
    where
        I: IntoIterator<Item = (String, EmbeddingVector)>,
    {
        let vectors: Vec<_> = vectors.into_iter().collect();
        let kind = kind.unwrap_or(if vectors.len() >= params.activation_threshold {
            IndexKind::Hnsw
        } else {
            IndexKind::Flat
        });
        match kind {
            IndexKind::Flat => Self::build_flat(vectors),
            IndexKind::Hnsw => Self::build_hnsw(vectors, params),
        }
    }

    pub fn kind(&self) -> IndexKind {
        if self.graph.is_some() {
            IndexKind::Hnsw
        } else {
            IndexKind::Flat
        }
    }

    pub fn hnsw_params(&self) -> Option<HnswParams> {
        self.graph.as_ref().map(|g| g.params)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn vector(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    /// Bytes held by the vectors alone.
    pub fn vector_bytes(&self) -> u64 {
        storage_bytes(self.dim, self.len())
    }

    /// Bytes held by HNSW adjacency lists (4 bytes per edge), 0 for flat.
    pub fn graph_bytes(&self) -> u64 {
        self.graph.as_ref().map_or(0, |g| g.edge_count() * 4)
    }

    fn score(&self, query: &[f64], i: usize) -> f64 {
        self.vector(i)
            .iter()
            .zip(query)
            .map(|(&x, &q)| x as f64 * q)
            .sum()
    }

    fn unit_query(&self, query: &EmbeddingVector) -> Result<Vec<f64>> {
        if query.dim() != self.dim {
            return Err(Error::InvalidInput(format!(
                "query dim {} does not match index dim {}",
                query.dim(),
                self.dim
            )));
        }
        let norm = query.norm();
        if norm == 0.0 {
            return Err(Error::UndefinedSimilarity);
        }
        Ok(query.values().iter().map(|&x| x as f64 / norm).collect())
    }

    /// Top-`k` entries by cosine to `query`. Exact for flat indexes.
    pub fn search(&self, query: &EmbeddingVector, k: usize) -> Result<Vec<SearchHit>> {
        if k == 0 {
            return Err(Error::InvalidInput("k must be at least 1".into()));
        }
        if self.is_empty() {
            return Ok(Vec::new());
        }
        let q = self.unit_query(query)?;
        let candidates: Vec<usize> = match &self.graph {
            None => (0..self.len()).collect(),
            Some(g) => {
                let q32: Vec<f32> = q.iter().map(|&x| x as f32).collect();
                g.search(&self.data, self.dim, &q32, k)
            }
        };
        let mut scored: Vec<(f64, usize)> = candidates.into_iter().map(|i| (self.score(&q, i), i)).collect();
        let cmp = |a: &(f64, usize), b: &(f64, usize)| hit_order(a.0, &self.ids[a.1], b.0, &self.ids[b.1]);
        if scored.len() > k {
            scored.select_nth_unstable_by(k - 1, cmp);
            scored.truncate(k);
        }
        scored.sort_by(cmp);
        Ok(scored
            .into_iter()
            .map(|(score, i)| SearchHit {
                id: self.ids[i].clone(),
                score: score.clamp(-1.0, 1.0),
            })
            .collect())
    }
}

/// `dim * 4 * count`: bytes of 32-bit vectors, excluding any graph.
pub fn storage_bytes(dim: usize, count: usize) -> u64 {
    dim as u64 * 4 * count as u64
}

/// Bytes to binary megabytes (2^20), the unit used in storage tables.
pub fn bytes_to_mb(bytes: u64) -> f64 {
    bytes as f64 / (1024.0 * 1024.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ev(v: &[f32]) -> EmbeddingVector {
        EmbeddingVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn cosine_examples() {
        assert!((cosine(&ev(&[3.0, 4.0]), &ev(&[3.0, 4.0])).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(cosine(&ev(&[1.0, 0.0]), &ev(&[0.0, 1.0])).unwrap(), 0.0);
        let c = cosine(&ev(&[1.0, 1.0]), &ev(&[1.0, 0.0])).unwrap();
        assert!((c - 0.70710678).abs() < 1e-6);
        assert!(matches!(
            cosine(&ev(&[0.0, 0.0]), &ev(&[1.0, 0.0])),
            Err(Error::UndefinedSimilarity)
        ));
    }

    #[test]
    fn build_flat_basics() {
        let idx = VectorIndex::build_flat(vec![
            ("a".to_string(), ev(&[1.0, 0.0])),
            ("b".to_string(), ev(&[0.0, 2.0])),
            ("c".to_string(), ev(&[0.6, 0.8])),
        ])
        .unwrap();
        assert_eq!(idx.len(), 3);
        assert_eq!(idx.vector(1), &[0.0, 1.0]);
        assert_eq!(idx.vector(2), &[0.6, 0.8]);
        let err = VectorIndex::build_flat(vec![
            ("a".to_string(), ev(&[1.0, 0.0])),
            ("bad".to_string(), ev(&[1.0, 0.0, 0.0])),
        ])
        .unwrap_err();
        assert!(err.to_string().contains("\"bad\""));
    }

    #[test]
    fn search_exact_match_first_and_k_overflow() {
        let idx = VectorIndex::build_flat(vec![
            ("a".to_string(), ev(&[1.0, 0.0])),
            ("b".to_string(), ev(&[0.0, 1.0])),
            ("c".to_string(), ev(&[0.6, 0.8])),
        ])
        .unwrap();
        let hits = idx.search(&ev(&[0.0, 1.0]), 10).unwrap();
        assert_eq!(hits.len(), 3);
        assert_eq!(hits[0].id, "b");
        assert!((hits[0].score - 1.0).abs() < 1e-9);
        assert_eq!(hits[1].id, "c");
        assert_eq!(hits[2].id, "a");
    }

    #[test]
    fn ties_break_by_id() {
        let idx = VectorIndex::build_flat(vec![
            ("z".to_string(), ev(&[1.0, 0.0])),
            ("m".to_string(), ev(&[1.0, 0.0])),
            ("a".to_string(), ev(&[1.0, 0.0])),
        ])
        .unwrap();
        let ids: Vec<_> = idx.search(&ev(&[1.0, 0.0]), 2).unwrap().into_iter().map(|h| h.id).collect();
        assert_eq!(ids, vec!["a", "m"]);
    }

    #[test]
    fn empty_index_returns_nothing() {
        let idx = VectorIndex::build_flat(Vec::new()).unwrap();
        assert!(idx.search(&ev(&[1.0]), 3).unwrap().is_empty());
    }

    #[test]
    fn single_vector_hnsw() {
        let idx =
            VectorIndex::build_hnsw(vec![("only".to_string(), ev(&[0.3, 0.1]))], HnswParams::default()).unwrap();
        for q in [[1.0, 0.0], [-1.0, 0.5], [0.0, -1.0]] {
            assert_eq!(idx.search(&ev(&q), 5).unwrap()[0].id, "only");
        }
    }

    #[test]
    fn hnsw_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let vecs: Vec<(String, EmbeddingVector)> = (0..300)
            .map(|i| {
                let v: Vec<f32> = (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect();
                (format!("v{i:04}"), ev(&v))
            })
            .collect();
        let a = VectorIndex::build_hnsw(vecs.clone(), HnswParams::default()).unwrap();
        let b = VectorIndex::build_hnsw(vecs, HnswParams::default()).unwrap();
        assert_eq!(a, b);
        let q = ev(&[0.5; 16]);
        assert_eq!(a.search(&q, 10).unwrap(), b.search(&q, 10).unwrap());
    }

    #[test]
    fn storage_arithmetic() {
        assert_eq!(storage_bytes(768, 3200), 9_830_400);
        assert_eq!(storage_bytes(1024, 3200), 13_107_200);
        assert_eq!(storage_bytes(0, 3200), 0);
        assert_eq!(storage_bytes(768, 0), 0);
        assert_eq!(bytes_to_mb(13_107_200), 12.5);
    }
}
