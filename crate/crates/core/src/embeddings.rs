//! Embedding providers and cosine similarity.
//!
//! Everything downstream (anchoring, filtering, judging, coherence) only
//! looks at cosine geometry, so any provider that returns unit vectors of a
//! fixed dimension will do. [`HashEmbedder`] is the deterministic default;
//! [`TableEmbedder`] serves precomputed vectors, e.g. from a real model.

use std::collections::HashMap;
use std::io::BufRead;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::numerics::{dot, norm};
use crate::{Error, Result};

pub trait EmbeddingProvider: Send + Sync {
    fn id(&self) -> &str;
    fn dimension(&self) -> usize;
    fn is_deterministic(&self) -> bool {
        true
    }
    /// Unit-norm embedding of a piece of text.
    fn embed_text(&self, text: &str) -> Result<Vec<f64>>;
    /// Unit-norm embedding of a frame, addressed by a stable key such as
    /// `"<video_id>/<frame_index>"`.
    fn embed_frame(&self, key: &str) -> Result<Vec<f64>>;
}

/// `a·b / (|a||b|)`, clamped to `[-1, 1]`.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch(format!("{} vs {}", a.len(), b.len())));
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroNorm);
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

pub fn normalize(v: &mut [f64]) -> Result<()> {
    let n = norm(v);
    if n == 0.0 || !n.is_finite() {
        return Err(Error::ZeroNorm);
    }
    v.iter_mut().for_each(|x| *x /= n);
    Ok(())
}

/// Seeded hashing provider. Text is split into lowercase alphanumeric words;
/// each word hashes to a pseudo-random direction and the text embedding is
/// the normalized sum, so texts sharing words score higher. Frames hash
/// their key to a single direction.
#[derive(Clone, Debug)]
pub struct HashEmbedder {
    id: String,
    dim: usize,
    seed: u64,
}

impl HashEmbedder {
    pub const DEFAULT_DIM: usize = 64;

    pub fn new(dim: usize, seed: u64) -> Self {
        Self {
            id: format!("hash-v1:d{dim}:s{seed}"),
            dim,
            seed,
        }
    }

    fn direction(&self, domain: &str, item: &str) -> Vec<f64> {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(domain.as_bytes());
        h.update([0u8]);
        h.update(item.as_bytes());
        let digest = h.finalize();
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&digest);
        let mut rng = ChaCha8Rng::from_seed(seed);
        (0..self.dim).map(|_| rng.random_range(-1.0..1.0)).collect()
    }
}

impl Default for HashEmbedder {
    fn default() -> Self {
        Self::new(Self::DEFAULT_DIM, 0)
    }
}

impl EmbeddingProvider for HashEmbedder {
    fn id(&self) -> &str {
        &self.id
    }

    fn dimension(&self) -> usize {
        self.dim
    }

    fn embed_text(&self, text: &str) -> Result<Vec<f64>> {
        if text.is_empty() {
            return Err(Error::EmptyInput("text"));
        }
        let mut acc = vec![0.0; self.dim];
        let mut any = false;
        for word in text.split(|c: char| !c.is_alphanumeric()).filter(|w| !w.is_empty()) {
            any = true;
            let w = self.direction("word", &word.to_lowercase());
            acc.iter_mut().zip(&w).for_each(|(a, b)| *a += b);
        }
        if !any {
            acc = self.direction("text", text);
        }
        normalize(&mut acc)?;
        Ok(acc)
    }

    fn embed_frame(&self, key: &str) -> Result<Vec<f64>> {
        if key.is_empty() {
            return Err(Error::EmptyInput("frame key"));
        }
        let mut v = self.direction("frame", key);
        normalize(&mut v)?;
        Ok(v)
    }
}

/// One line of an embedding table file.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub kind: EmbeddingKind,
    pub key: String,
    pub vector: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingKind {
    Text,
    Frame,
}

/// Lookup provider over precomputed vectors. Vectors are normalized on insert.
#[derive(Clone, Debug)]
pub struct TableEmbedder {
    id: String,
    dim: usize,
    table: HashMap<(EmbeddingKind, String), Vec<f64>>,
}

impl TableEmbedder {
    pub fn new(id: impl Into<String>, dim: usize) -> Self {
        Self {
            id: id.into(),
            dim,
            table: HashMap::new(),
        }
    }

    pub fn insert(&mut self, kind: EmbeddingKind, key: impl Into<String>, mut vector: Vec<f64>) -> Result<()> {
        if vector.len() != self.dim {
            return Err(Error::DimensionMismatch(format!(
                "vector of length {} for a {}-dimensional table",
                vector.len(),
                self.dim
            )));
        }
        normalize(&mut vector)?;
        self.table.insert((kind, key.into()), vector);
        Ok(())
    }

    /// Read `{"kind", "key", "vector"}` lines. The first record fixes the
    /// dimension.
    pub fn from_jsonl(id: impl Into<String>, reader: impl BufRead) -> Result<Self> {
        let mut out: Option<Self> = None;
        let id = id.into();
        for line in reader.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: EmbeddingRecord = serde_json::from_str(&line)?;
            let table = out.get_or_insert_with(|| Self::new(id.clone(), rec.vector.len()));
            table.insert(rec.kind, rec.key, rec.vector)?;
        }
        out.ok_or(Error::EmptyInput("embedding table"))
    }

    fn lookup(&self, kind: EmbeddingKind, key: &str) -> Result<Vec<f64>> {
        if key.is_empty() {
            return Err(Error::EmptyInput("embedding key"));
        }
        self.table
            .get(&(kind, key.to_string()))
            .cloned()
            .ok_or_else(|| Error::UnknownEmbedding(key.to_string()))
    }
}

impl EmbeddingProvider for TableEmbedder {
    fn id(&self) -> &str {
        &self.id
    }

    fn dimension(&self) -> usize {
        self.dim
    }

    fn embed_text(&self, text: &str) -> Result<Vec<f64>> {
        self.lookup(EmbeddingKind::Text, text)
    }

    fn embed_frame(&self, key: &str) -> Result<Vec<f64>> {
        self.lookup(EmbeddingKind::Frame, key)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn deterministic_and_unit_norm() {
        let e = HashEmbedder::default();
        let a = e.embed_text("the chef slices onions").unwrap();
        assert_eq!(a, e.embed_text("the chef slices onions").unwrap());
        assert!((norm(&a) - 1.0).abs() < 1e-12);
        assert!((cosine(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert!(e.embed_text("").is_err());
        assert!(e.embed_frame("").is_err());
    }

    #[test]
    fn shared_words_raise_similarity() {
        let e = HashEmbedder::default();
        let a = e.embed_text("a red car turns left").unwrap();
        let b = e.embed_text("the red car turns right").unwrap();
        let c = e.embed_text("penguins swim under ice").unwrap();
        assert!(cosine(&a, &b).unwrap() > cosine(&a, &c).unwrap());
    }

    #[test]
    fn punctuation_only_text_still_embeds() {
        let e = HashEmbedder::default();
        let v = e.embed_text("?!").unwrap();
        assert!((norm(&v) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 2.0]).unwrap(), 0.0);
        assert!((cosine(&[1.0, 2.0], &[1.0, 2.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!(matches!(cosine(&[0.0, 0.0], &[1.0, 0.0]), Err(Error::ZeroNorm)));
        assert!(cosine(&[1.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn table_reads_jsonl() {
        let text = r#"{"kind": "text", "key": "hello", "vector": [3.0, 4.0]}
{"kind": "frame", "key": "v/0", "vector": [0.0, 2.0]}
"#;
        let t = TableEmbedder::from_jsonl("file:test", text.as_bytes()).unwrap();
        assert_eq!(t.embed_text("hello").unwrap(), vec![0.6, 0.8]);
        assert_eq!(t.embed_frame("v/0").unwrap(), vec![0.0, 1.0]);
        assert!(matches!(t.embed_text("v/0"), Err(Error::UnknownEmbedding(_))));
        let bad = r#"{"kind": "text", "key": "a", "vector": [1.0]}
{"kind": "text", "key": "b", "vector": [1.0, 2.0]}"#;
        assert!(TableEmbedder::from_jsonl("x", bad.as_bytes()).is_err());
    }

    proptest! {
        #[test]
        fn hash_vectors_are_unit(text in "[a-z ]{1,40}", seed in any::<u64>()) {
            let e = HashEmbedder::new(64, seed);
            let v = e.embed_text(&text).unwrap();
            prop_assert!((norm(&v) - 1.0).abs() < 1e-12);
            let f = e.embed_frame(&text).unwrap();
            prop_assert!((norm(&f) - 1.0).abs() < 1e-12);
        }

        #[test]
        fn cosine_matches_direct_formula(
            a in proptest::collection::vec(-5.0f64..5.0, 12),
            b in proptest::collection::vec(-5.0f64..5.0, 12),
            alpha in 0.01f64..100.0,
        ) {
            prop_assume!(norm(&a) > 1e-6 && norm(&b) > 1e-6);
            let c = cosine(&a, &b).unwrap();
            let direct: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum::<f64>()
                / (a.iter().map(|x| x * x).sum::<f64>().sqrt() * b.iter().map(|x| x * x).sum::<f64>().sqrt());
            prop_assert!((c - direct).abs() < 1e-12);
            prop_assert_eq!(c, cosine(&b, &a).unwrap());
            let scaled: Vec<f64> = a.iter().map(|x| x * alpha).collect();
            prop_assert!((cosine(&scaled, &b).unwrap() - c).abs() < 1e-12);
        }
    }
}
