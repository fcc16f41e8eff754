//! Pluggable frozen text encoders.
//!
//! The built-in stub maps every token to a fixed unit-norm vector derived from
//! a seeded hash, so embeddings are deterministic across runs and platforms
//! without shipping any pretrained weights. External encoders plug in through
//! a JSON embedding file holding precomputed token vectors per prompt.

use crate::error::{Error, Result};
use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Deserialize;
use std::collections::BTreeMap;
use std::path::Path;

pub const DEFAULT_TEXT_DIM: usize = 64;
pub const DEFAULT_MAX_TOKENS: usize = 32;

/// Lowercases, strips punctuation, splits on whitespace.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split_whitespace()
        .map(|w| w.chars().filter(|c| c.is_alphanumeric()).collect::<String>())
        .filter(|w| !w.is_empty())
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextEmbedding {
    /// `K x dim` token vectors, K >= 1.
    pub tokens: Array2<f64>,
    /// Sentence-level vector (mean of token vectors).
    pub pooled: Array1<f64>,
    /// Alignment handles: the token strings, in order.
    pub token_strings: Vec<String>,
    /// Whether this is the reserved null condition (empty prompt).
    pub is_null: bool,
}

impl TextEmbedding {
    pub fn n_tokens(&self) -> usize {
        self.tokens.nrows()
    }

    pub fn dim(&self) -> usize {
        self.tokens.ncols()
    }
}

pub trait TextEncoder {
    fn encode(&self, text: &str) -> Result<TextEmbedding>;
    fn dim(&self) -> usize;
    /// Identifier stored in checkpoints to select the encoder at load time.
    fn name(&self) -> &str;
}

/// Deterministic hash-based stub standing in for a pretrained text encoder.
#[derive(Debug, Clone)]
pub struct StubEncoder {
    pub dim: usize,
    pub max_tokens: usize,
    pub seed: u64,
}

impl Default for StubEncoder {
    fn default() -> Self {
        StubEncoder { dim: DEFAULT_TEXT_DIM, max_tokens: DEFAULT_MAX_TOKENS, seed: 0 }
    }
}

const NULL_TOKEN_HASH: u64 = 0;

/// FNV-1a, fixed here (not the std hasher) so vectors are stable across
/// platforms and Rust versions.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

impl StubEncoder {
    fn token_vector(&self, token_hash: u64) -> Array1<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ token_hash);
        let mut v = Array1::from_shape_fn(self.dim, |_| {
            <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)
        });
        let norm = v.dot(&v).sqrt();
        if norm > 0.0 {
            v /= norm;
        }
        v
    }
}

impl TextEncoder for StubEncoder {
    fn encode(&self, text: &str) -> Result<TextEmbedding> {
        let words = tokenize(text);
        if words.len() > self.max_tokens {
            return Err(Error::Text(format!(
                "prompt has {} tokens, maximum is {}",
                words.len(),
                self.max_tokens
            )));
        }
        let (token_strings, hashes, is_null) = if words.is_empty() {
            // Reserved null condition: a single zero-hash token.
            (vec![String::new()], vec![NULL_TOKEN_HASH], true)
        } else {
            let hashes = words.iter().map(|w| fnv1a(w.as_bytes()).max(1)).collect();
            (words, hashes, false)
        };
        let mut tokens = Array2::zeros((hashes.len(), self.dim));
        for (i, h) in hashes.iter().enumerate() {
            tokens.row_mut(i).assign(&self.token_vector(*h));
        }
        let pooled = tokens.mean_axis(ndarray::Axis(0)).unwrap();
        Ok(TextEmbedding { tokens, pooled, token_strings, is_null })
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn name(&self) -> &str {
        "stub"
    }
}

#[derive(Debug, Deserialize)]
struct EmbeddingFileEntry {
    text: String,
    tokens: Vec<String>,
    vectors: Vec<Vec<f64>>,
}

/// Encoder backed by precomputed embeddings: a JSON array of
/// `{ "text": ..., "tokens": [...], "vectors": [[...], ...] }` entries.
/// Prompts are matched on their tokenized form; the empty prompt entry, if
/// present, overrides the null condition.
pub struct FileEncoder {
    dim: usize,
    entries: BTreeMap<String, (Vec<String>, Array2<f64>)>,
    fallback_null: StubEncoder,
}

impl FileEncoder {
    pub fn load(path: &Path) -> Result<Self> {
        let raw: Vec<EmbeddingFileEntry> = serde_json::from_str(&std::fs::read_to_string(path)?)
            .map_err(|e| Error::Text(format!("embedding file: {e}")))?;
        let mut dim = 0usize;
        let mut entries = BTreeMap::new();
        for entry in raw {
            if entry.tokens.is_empty() || entry.vectors.len() != entry.tokens.len() {
                return Err(Error::Text(format!(
                    "embedding entry '{}': token/vector count mismatch",
                    entry.text
                )));
            }
            let d = entry.vectors[0].len();
            if dim == 0 {
                dim = d;
            }
            if entry.vectors.iter().any(|v| v.len() != dim) {
                return Err(Error::Text("inconsistent embedding widths".into()));
            }
            let mut mat = Array2::zeros((entry.tokens.len(), dim));
            for (i, v) in entry.vectors.iter().enumerate() {
                mat.row_mut(i).assign(&Array1::from_vec(v.clone()));
            }
            entries.insert(tokenize(&entry.text).join(" "), (entry.tokens, mat));
        }
        if dim == 0 {
            return Err(Error::Text("embedding file has no entries".into()));
        }
        Ok(FileEncoder {
            dim,
            entries,
            fallback_null: StubEncoder { dim, ..StubEncoder::default() },
        })
    }
}

impl TextEncoder for FileEncoder {
    fn encode(&self, text: &str) -> Result<TextEmbedding> {
        let key = tokenize(text).join(" ");
        if let Some((tokens, mat)) = self.entries.get(&key) {
            let pooled = mat.mean_axis(ndarray::Axis(0)).unwrap();
            return Ok(TextEmbedding {
                tokens: mat.clone(),
                pooled,
                token_strings: tokens.clone(),
                is_null: key.is_empty(),
            });
        }
        if key.is_empty() {
            return self.fallback_null.encode("");
        }
        Err(Error::Text(format!("no precomputed embedding for prompt '{text}'")))
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn name(&self) -> &str {
        "file"
    }
}
