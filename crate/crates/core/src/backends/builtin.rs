use std::collections::HashSet;

use super::{BackendError, EmbedInput, Embedder, RelevanceScorer};
use crate::text::{fnv1a, tokenize};

/// Signed feature-hashing bag-of-words embedder. Deterministic and
/// dependency-free; useful offline and in tests when no encoder is served.
#[derive(Debug, Clone)]
pub struct HashEmbedder {
    dimension: usize,
}

impl HashEmbedder {
    pub fn new(dimension: usize) -> Self {
        assert!(dimension > 0, "embedding dimension must be positive");
        HashEmbedder { dimension }
    }
}

impl Embedder for HashEmbedder {
    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed(&self, input: EmbedInput<'_>) -> Result<Vec<f64>, BackendError> {
        let mut v = vec![0.0; self.dimension];
        let tokens = match input {
            EmbedInput::Text(t) => tokenize(t),
            // Image handles are opaque; hash the handle itself.
            EmbedInput::Image(r) => vec![format!("image:{r}")],
        };
        for tok in tokens {
            let h = fnv1a(tok.as_bytes());
            let slot = (h % self.dimension as u64) as usize;
            let sign = if (h >> 63) == 0 { 1.0 } else { -1.0 };
            v[slot] += sign;
        }
        Ok(v)
    }
}

/// Overlap coefficient between query and passage token sets.
#[derive(Debug, Clone, Copy, Default)]
pub struct LexicalRelevance;

impl RelevanceScorer for LexicalRelevance {
    fn score(&self, query: &str, passage: &str) -> Result<f64, BackendError> {
        let q: HashSet<String> = tokenize(query).into_iter().collect();
        let p: HashSet<String> = tokenize(passage).into_iter().collect();
        let smaller = q.len().min(p.len());
        if smaller == 0 {
            return Ok(0.0);
        }
        Ok(q.intersection(&p).count() as f64 / smaller as f64)
    }
}
