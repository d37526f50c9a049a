use super::{Backend, EmbeddingVector, TaskType};
use crate::chunking::tokenize_ws;
use crate::error::{Error, Result};

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(FNV_OFFSET, |h, &b| (h ^ b as u64).wrapping_mul(FNV_PRIME))
}

/// Bucket a token lands in: FNV-1a 64 of its UTF-8 bytes, mod `dim`.
pub fn mock_bucket(token: &str, dim: usize) -> usize {
    (fnv1a(token.as_bytes()) % dim as u64) as usize
}

/// Deterministic bag-of-hashed-tokens embedding, L2-normalized.
///
/// Empty text maps to the first basis vector. Texts sharing more tokens
/// have higher cosine.
pub fn mock_embed(text: &str, dim: usize) -> EmbeddingVector {
    assert!(dim > 0, "mock_embed needs dim > 0");
    let mut counts = vec![0u32; dim];
    for tok in tokenize_ws(text) {
        counts[mock_bucket(tok, dim)] += 1;
    }
    let norm = counts
        .iter()
        .map(|&c| (c as f64) * (c as f64))
        .sum::<f64>()
        .sqrt();
    let values = if norm == 0.0 {
        let mut v = vec![0.0f32; dim];
        v[0] = 1.0;
        v
    } else {
        counts.iter().map(|&c| (c as f64 / norm) as f32).collect()
    };
    EmbeddingVector::new(values).expect("mock vector is finite and non-empty")
}

/// Backend serving [`mock_embed`] vectors. Ignores the task type.
#[derive(Debug, Clone)]
pub struct MockBackend {
    dim: usize,
}

impl MockBackend {
    pub fn new(dim: usize) -> Self {
        Self { dim }
    }
}

impl Backend for MockBackend {
    fn embed(&self, texts: &[String], _task: TaskType) -> Result<Vec<Vec<f32>>> {
        if self.dim == 0 {
            return Err(Error::Config("mock backend dim must be > 0".into()));
        }
        Ok(texts
            .iter()
            .map(|t| mock_embed(t, self.dim).into_values())
            .collect())
    }
}
