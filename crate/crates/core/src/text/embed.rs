use crate::error::{Error, Result};

use super::terms;

pub const DEFAULT_EMBED_DIM: usize = 256;
pub const DEFAULT_EMBED_SEED: u64 = 0x5ECA_C4E;

/// Unit-norm embedding vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    values: Vec<f64>,
    degenerate: bool,
}

impl Embedding {
    /// Normalizes `values`; a zero (or empty) vector becomes the first axis and is flagged degenerate.
    pub fn new(mut values: Vec<f64>) -> Self {
        let dim = values.len().max(1);
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            let mut axis = vec![0.0; dim];
            axis[0] = 1.0;
            return Embedding {
                values: axis,
                degenerate: true,
            };
        }
        for v in &mut values {
            *v /= norm;
        }
        Embedding {
            values,
            degenerate: false,
        }
    }

    pub fn axis(dim: usize, i: usize) -> Self {
        let mut v = vec![0.0; dim];
        v[i] = 1.0;
        Self::new(v)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn is_degenerate(&self) -> bool {
        self.degenerate
    }
}

/// Cosine similarity, clamped to `[-1, 1]`.
pub fn cosine_similarity(a: &Embedding, b: &Embedding) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch {
            left: a.dim(),
            right: b.dim(),
        });
    }
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (x, y) in a.values.iter().zip(&b.values) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    Ok((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
}

/// Text embedding model.
pub trait Embedder: Send + Sync {
    fn name(&self) -> &str;
    fn dim(&self) -> usize;
    fn embed(&self, text: &str) -> Embedding;
}

/// Signed feature hashing of word unigrams and bigrams (FNV-1a, seeded).
#[derive(Debug, Clone)]
pub struct HashEmbedder {
    dim: usize,
    seed: u64,
}

impl HashEmbedder {
    pub fn new(dim: usize, seed: u64) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        HashEmbedder { dim, seed }
    }

    fn hash(&self, feature: &str) -> u64 {
        const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
        const PRIME: u64 = 0x0100_0000_01b3;
        let mut h = OFFSET;
        for b in self.seed.to_le_bytes().iter().chain(feature.as_bytes()) {
            h ^= u64::from(*b);
            h = h.wrapping_mul(PRIME);
        }
        h
    }

    fn add(&self, acc: &mut [f64], feature: &str) {
        let h = self.hash(feature);
        let sign = if h >> 63 == 1 { -1.0 } else { 1.0 };
        acc[(h % self.dim as u64) as usize] += sign;
    }
}

impl Default for HashEmbedder {
    fn default() -> Self {
        Self::new(DEFAULT_EMBED_DIM, DEFAULT_EMBED_SEED)
    }
}

impl Embedder for HashEmbedder {
    fn name(&self) -> &str {
        "hash"
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Embedding {
        let words = terms(text);
        let mut acc = vec![0.0; self.dim];
        for w in &words {
            self.add(&mut acc, w);
        }
        for pair in words.windows(2) {
            self.add(&mut acc, &format!("{} {}", pair[0], pair[1]));
        }
        Embedding::new(acc)
    }
}
