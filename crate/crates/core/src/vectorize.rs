//! TF-IDF vectors, cosine similarity and a file-backed embedding cache.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use unicode_normalization::UnicodeNormalization;

use crate::corpus::Document;
use crate::error::{Error, Result};

/// Pinned tokenization rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TokenizerSpec {
    /// Lowercase, split on runs of non-alphanumeric chars, keep tokens of at
    /// least `min_len` chars.
    LowercaseAlnumV1 { min_len: usize },
}

impl Default for TokenizerSpec {
    fn default() -> Self {
        TokenizerSpec::LowercaseAlnumV1 { min_len: 2 }
    }
}

impl TokenizerSpec {
    pub fn tokenize(&self, text: &str) -> Vec<String> {
        let TokenizerSpec::LowercaseAlnumV1 { min_len } = *self;
        text.to_lowercase()
            .split(|c: char| !c.is_alphanumeric())
            .filter(|t| t.chars().count() >= min_len.max(1))
            .map(str::to_string)
            .collect()
    }
}

/// Sparse vector as sorted `(column, value)` pairs.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SparseVector {
    pub entries: Vec<(usize, f64)>,
}

impl SparseVector {
    pub fn norm(&self) -> f64 {
        self.entries.iter().map(|(_, v)| v * v).sum::<f64>().sqrt()
    }

    pub fn dot(&self, other: &SparseVector) -> f64 {
        let (mut i, mut j, mut acc) = (0, 0, 0.0);
        while i < self.entries.len() && j < other.entries.len() {
            let (ci, vi) = self.entries[i];
            let (cj, vj) = other.entries[j];
            match ci.cmp(&cj) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => {
                    acc += vi * vj;
                    i += 1;
                    j += 1;
                }
            }
        }
        acc
    }

    pub fn is_zero(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TfidfModel {
    pub vocabulary: BTreeMap<String, usize>,
    pub idf: Vec<f64>,
    pub tokenizer: TokenizerSpec,
    pub n_docs: usize,
}

pub fn tfidf_fit(docs: &[Document]) -> Result<TfidfModel> {
    tfidf_fit_with(docs, TokenizerSpec::default())
}

/// Fit with smoothed idf `ln((1 + D) / (1 + df)) + 1`.
///
/// Columns are assigned in lexicographic token order so the model does not
/// depend on document order.
pub fn tfidf_fit_with(docs: &[Document], tokenizer: TokenizerSpec) -> Result<TfidfModel> {
    if docs.is_empty() {
        return Err(Error::InvalidArgument("cannot fit tf-idf on an empty corpus".into()));
    }
    let mut df: BTreeMap<String, usize> = BTreeMap::new();
    for doc in docs {
        let mut tokens = tokenizer.tokenize(&doc.text);
        tokens.sort();
        tokens.dedup();
        for t in tokens {
            *df.entry(t).or_default() += 1;
        }
    }
    let d = docs.len() as f64;
    let mut vocabulary = BTreeMap::new();
    let mut idf = Vec::with_capacity(df.len());
    for (col, (token, count)) in df.into_iter().enumerate() {
        idf.push(((1.0 + d) / (1.0 + count as f64)).ln() + 1.0);
        vocabulary.insert(token, col);
    }
    Ok(TfidfModel {
        vocabulary,
        idf,
        tokenizer,
        n_docs: docs.len(),
    })
}

impl TfidfModel {
    pub fn idf_of(&self, token: &str) -> Option<f64> {
        self.vocabulary.get(token).map(|&c| self.idf[c])
    }

    /// Raw-count tf times idf, L2-normalized; OOV tokens are dropped.
    pub fn transform(&self, text: &str) -> SparseVector {
        let mut counts: BTreeMap<usize, f64> = BTreeMap::new();
        for token in self.tokenizer.tokenize(text) {
            if let Some(&col) = self.vocabulary.get(&token) {
                *counts.entry(col).or_default() += 1.0;
            }
        }
        let mut entries: Vec<(usize, f64)> = counts
            .into_iter()
            .map(|(c, tf)| (c, tf * self.idf[c]))
            .collect();
        let norm = entries.iter().map(|(_, v)| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            for (_, v) in &mut entries {
                *v /= norm;
            }
        }
        SparseVector { entries }
    }
}

pub fn tfidf_vector(model: &TfidfModel, doc: &Document) -> SparseVector {
    model.transform(&doc.text)
}

/// Dense cosine; zero vectors have similarity 0.
pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::LengthMismatch {
            expected: u.len(),
            actual: v.len(),
        });
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Ok(0.0);
    }
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

pub fn sparse_cosine(u: &SparseVector, v: &SparseVector) -> f64 {
    let (nu, nv) = (u.norm(), v.norm());
    if nu == 0.0 || nv == 0.0 {
        return 0.0;
    }
    (u.dot(v) / (nu * nv)).clamp(-1.0, 1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    pub values: Vec<f64>,
    pub model_id: String,
    pub dim: usize,
}

/// Anything that can embed a batch of texts with a named model.
pub trait EmbeddingProvider: Send + Sync {
    fn embed_batch(&self, model_id: &str, texts: &[String]) -> Result<Vec<Vec<f64>>>;
}

#[derive(Serialize, Deserialize)]
struct CachedEmbedding {
    dim: usize,
    values: Vec<f64>,
}

/// `cache/embeddings/<model_id>/<sha256(nfc text)>.json`, written atomically.
#[derive(Debug, Clone)]
pub struct EmbeddingCache {
    root: PathBuf,
}

pub fn content_hash(text: &str) -> String {
    let nfc: String = text.nfc().collect();
    hex::encode(Sha256::digest(nfc.as_bytes()))
}

fn sanitize_component(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() || "-_.".contains(c) { c } else { '_' })
        .collect()
}

/// Write via a temporary sibling and rename, so readers never see partial files.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let tmp = path.with_extension(format!(
        "tmp.{}.{:?}",
        std::process::id(),
        std::thread::current().id()
    ));
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

impl EmbeddingCache {
    /// `cache_root` is the top-level cache directory; entries live under `embeddings/`.
    pub fn new(cache_root: impl Into<PathBuf>) -> Self {
        Self {
            root: cache_root.into().join("embeddings"),
        }
    }

    pub fn path_for(&self, model_id: &str, text: &str) -> PathBuf {
        self.root
            .join(sanitize_component(model_id))
            .join(format!("{}.json", content_hash(text)))
    }

    pub fn get(&self, model_id: &str, text: &str) -> Result<Option<Vec<f64>>> {
        let path = self.path_for(model_id, text);
        match fs::read(&path) {
            Ok(bytes) => {
                let cached: CachedEmbedding = serde_json::from_slice(&bytes)?;
                if cached.values.len() != cached.dim {
                    return Err(Error::Data(format!("corrupt embedding cache entry {}", path.display())));
                }
                Ok(Some(cached.values))
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(Error::io(path, e)),
        }
    }

    pub fn put(&self, model_id: &str, text: &str, values: &[f64]) -> Result<()> {
        let entry = CachedEmbedding {
            dim: values.len(),
            values: values.to_vec(),
        };
        write_atomic(&self.path_for(model_id, text), &serde_json::to_vec(&entry)?)
    }
}

/// Cache-first embedding. Only cache misses reach the provider, in one batch.
///
/// With `provider = None` every text must already be cached (offline replay).
pub fn embed(
    provider: Option<&dyn EmbeddingProvider>,
    cache: &EmbeddingCache,
    texts: &[String],
    model_id: &str,
) -> Result<Vec<EmbeddingVector>> {
    let mut values: Vec<Option<Vec<f64>>> = Vec::with_capacity(texts.len());
    let mut missing: Vec<usize> = Vec::new();
    let mut pending: HashMap<String, Vec<usize>> = HashMap::new();
    for (i, text) in texts.iter().enumerate() {
        let hit = cache.get(model_id, text)?;
        if hit.is_none() {
            let slots = pending.entry(text.clone()).or_default();
            if slots.is_empty() {
                missing.push(i);
            }
            slots.push(i);
        }
        values.push(hit);
    }
    if !missing.is_empty() {
        let provider = provider.ok_or_else(|| {
            Error::ReplayMiss(format!("embedding {} for {:?}", model_id, texts[missing[0]]))
        })?;
        let batch: Vec<String> = missing.iter().map(|&i| texts[i].clone()).collect();
        let fresh = provider.embed_batch(model_id, &batch)?;
        if fresh.len() != batch.len() {
            return Err(Error::Gateway(format!(
                "embedding provider returned {} vectors for {} texts",
                fresh.len(),
                batch.len()
            )));
        }
        for (text, vector) in batch.iter().zip(fresh) {
            if vector.iter().any(|v| !v.is_finite()) {
                return Err(Error::Gateway("embedding contains non-finite values".into()));
            }
            cache.put(model_id, text, &vector)?;
            for &slot in &pending[text] {
                values[slot] = Some(vector.clone());
            }
        }
    }
    let values: Vec<Vec<f64>> = values.into_iter().map(|v| v.expect("filled")).collect();
    let dim = values.first().map_or(0, Vec::len);
    if dim == 0 && !values.is_empty() {
        return Err(Error::Gateway("embedding provider returned empty vectors".into()));
    }
    if let Some(bad) = values.iter().find(|v| v.len() != dim) {
        return Err(Error::Gateway(format!(
            "inconsistent embedding dimension for {model_id}: {} vs {dim}",
            bad.len()
        )));
    }
    Ok(values
        .into_iter()
        .map(|values| EmbeddingVector {
            dim: values.len(),
            values,
            model_id: model_id.to_string(),
        })
        .collect())
}
