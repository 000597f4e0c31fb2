//! Evidence for the proposer: class groups, band-matched contrastive pairs and
//! the uncovered-positive sample.

use std::collections::{BTreeSet, HashSet};

use rand::seq::{index, SliceRandom};
use serde::{Deserialize, Serialize};

use crate::corpus::{Document, LabeledDataset};
use crate::error::{Error, Result};
use crate::rng;
use crate::vectorize::{cosine, sparse_cosine, EmbeddingVector, SparseVector, TfidfModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Lane {
    Lexical,
    Semantic,
}

impl Lane {
    pub const ALL: [Lane; 2] = [Lane::Lexical, Lane::Semantic];

    pub fn as_str(&self) -> &'static str {
        match self {
            Lane::Lexical => "lexical",
            Lane::Semantic => "semantic",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContrastivePair {
    pub pos_id: String,
    pub neg_id: String,
    pub similarity: f64,
    pub lane: Lane,
}

/// Percentile window on the cross-class similarity distribution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandSpec {
    pub lo_pct: f64,
    pub hi_pct: f64,
}

impl Default for BandSpec {
    fn default() -> Self {
        Self {
            lo_pct: 40.0,
            hi_pct: 75.0,
        }
    }
}

impl BandSpec {
    pub fn new(lo_pct: f64, hi_pct: f64) -> Result<Self> {
        let band = Self { lo_pct, hi_pct };
        band.validate()?;
        Ok(band)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=100.0).contains(&self.lo_pct)
            || !(0.0..=100.0).contains(&self.hi_pct)
            || self.lo_pct >= self.hi_pct
        {
            return Err(Error::InvalidArgument(format!(
                "band must satisfy 0 <= lo < hi <= 100, got ({}, {})",
                self.lo_pct, self.hi_pct
            )));
        }
        Ok(())
    }
}

/// Similarity between two documents of one dataset, by index.
pub trait PairSimilarity {
    fn similarity(&self, a: usize, b: usize) -> f64;
}

/// TF-IDF cosine over precomputed document vectors.
pub struct TfidfSimilarity {
    vectors: Vec<SparseVector>,
}

impl TfidfSimilarity {
    pub fn new(model: &TfidfModel, docs: &[Document]) -> Self {
        Self {
            vectors: docs.iter().map(|d| model.transform(&d.text)).collect(),
        }
    }
}

impl PairSimilarity for TfidfSimilarity {
    fn similarity(&self, a: usize, b: usize) -> f64 {
        sparse_cosine(&self.vectors[a], &self.vectors[b])
    }
}

/// Embedding cosine, floored at 0.
pub struct EmbeddingSimilarity {
    vectors: Vec<EmbeddingVector>,
}

impl EmbeddingSimilarity {
    pub fn new(vectors: Vec<EmbeddingVector>) -> Self {
        Self { vectors }
    }
}

impl PairSimilarity for EmbeddingSimilarity {
    fn similarity(&self, a: usize, b: usize) -> f64 {
        cosine(&self.vectors[a].values, &self.vectors[b].values)
            .unwrap_or(0.0)
            .max(0.0)
    }
}

/// Cap on cross-class pairs scored for percentile estimation and matching.
pub const MAX_SCORED_PAIRS: usize = 50_000;

fn class_indices(ds: &LabeledDataset, label: u8) -> Vec<usize> {
    (0..ds.len())
        .filter(|&i| ds.documents[i].label == label)
        .collect()
}

/// Draw `k_per_class` documents from each class without replacement.
///
/// Returns `(positive ids, negative ids)`, each in dataset order.
pub fn bootstrap_groups(
    train: &LabeledDataset,
    k_per_class: usize,
    seed: u64,
) -> Result<(Vec<String>, Vec<String>)> {
    if k_per_class == 0 {
        return Err(Error::InvalidArgument("k_per_class must be positive".into()));
    }
    let mut groups = Vec::with_capacity(2);
    for label in [1u8, 0] {
        let idx = class_indices(train, label);
        if idx.len() < k_per_class {
            return Err(Error::InsufficientClass {
                label,
                needed: k_per_class,
                available: idx.len(),
            });
        }
        let mut rng = rng::stream(seed, "bootstrap", label as u64);
        let mut picked: Vec<usize> = index::sample(&mut rng, idx.len(), k_per_class)
            .into_iter()
            .map(|p| idx[p])
            .collect();
        picked.sort_unstable();
        groups.push(
            picked
                .into_iter()
                .map(|i| train.documents[i].id.clone())
                .collect(),
        );
    }
    let neg = groups.pop().unwrap();
    let pos = groups.pop().unwrap();
    Ok((pos, neg))
}

/// Linear-interpolation percentile of sorted values.
fn percentile(sorted: &[f64], pct: f64) -> f64 {
    if sorted.len() == 1 {
        return sorted[0];
    }
    let rank = pct / 100.0 * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (rank - lo as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairSample {
    pub pairs: Vec<ContrastivePair>,
    /// How many fewer than the requested number of pairs were found.
    pub shortfall: usize,
    pub band_lo: f64,
    pub band_hi: f64,
}

/// Sample up to `m` disjoint outcome-opposed pairs whose similarity falls in
/// the band's percentile window.
///
/// A seeded draw of at most `10 m` in-band pairs is matched greedily from the
/// most similar down; any remaining slots are filled from the rest of the band.
pub fn sample_band_pairs(
    train: &LabeledDataset,
    sim: &dyn PairSimilarity,
    lane: Lane,
    band: BandSpec,
    m: usize,
    seed: u64,
) -> Result<PairSample> {
    band.validate()?;
    if m == 0 {
        return Err(Error::InvalidArgument("pair count must be positive".into()));
    }
    train.require_both_classes()?;
    let pos = class_indices(train, 1);
    let neg = class_indices(train, 0);
    let total = pos.len() * neg.len();
    let mut rng = rng::stream(seed, "band-pairs", lane as u64);

    let pool: Vec<(usize, usize)> = if total <= MAX_SCORED_PAIRS {
        pos.iter()
            .flat_map(|&p| neg.iter().map(move |&n| (p, n)))
            .collect()
    } else {
        let mut picks: Vec<usize> = index::sample(&mut rng, total, MAX_SCORED_PAIRS).into_vec();
        picks.sort_unstable();
        picks
            .into_iter()
            .map(|k| (pos[k / neg.len()], neg[k % neg.len()]))
            .collect()
    };
    let scored: Vec<(usize, usize, f64)> = pool
        .into_iter()
        .map(|(p, n)| (p, n, sim.similarity(p, n)))
        .collect();
    let mut sorted: Vec<f64> = scored.iter().map(|s| s.2).collect();
    sorted.sort_by(f64::total_cmp);
    let lo = percentile(&sorted, band.lo_pct);
    let hi = percentile(&sorted, band.hi_pct);

    let mut in_band: Vec<(usize, usize, f64)> = scored
        .into_iter()
        .filter(|&(_, _, s)| s >= lo && s <= hi)
        .collect();
    if in_band.is_empty() {
        return Err(Error::EmptyBand);
    }
    in_band.shuffle(&mut rng);
    let split = in_band.len().min(m.saturating_mul(10));
    let (head, tail) = in_band.split_at_mut(split);
    let by_similarity = |a: &(usize, usize, f64), b: &(usize, usize, f64)| {
        b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1))
    };
    head.sort_by(by_similarity);
    tail.sort_by(by_similarity);

    let mut used: HashSet<usize> = HashSet::new();
    let mut pairs = Vec::with_capacity(m);
    for &(p, n, s) in head.iter().chain(tail.iter()) {
        if pairs.len() == m {
            break;
        }
        if used.contains(&p) || used.contains(&n) {
            continue;
        }
        used.insert(p);
        used.insert(n);
        let (pd, nd) = (&train.documents[p], &train.documents[n]);
        debug_assert!(pd.label != nd.label);
        pairs.push(ContrastivePair {
            pos_id: pd.id.clone(),
            neg_id: nd.id.clone(),
            similarity: s,
            lane,
        });
    }
    Ok(PairSample {
        shortfall: m - pairs.len(),
        pairs,
        band_lo: lo,
        band_hi: hi,
    })
}

/// Positive-class training ids fired on by at least one admitted feature.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoverageState {
    pub covered: BTreeSet<String>,
}

/// Seeded sample of up to `sample_n` positive documents not yet covered,
/// returned in dataset order.
pub fn uncovered_positives(
    coverage: &CoverageState,
    train: &LabeledDataset,
    sample_n: usize,
    seed: u64,
) -> Vec<Document> {
    let candidates: Vec<&Document> = train
        .documents
        .iter()
        .filter(|d| d.label == 1 && !coverage.covered.contains(&d.id))
        .collect();
    let take = sample_n.min(candidates.len());
    let mut rng = rng::stream(seed, "uncovered", 0);
    let mut picks = index::sample(&mut rng, candidates.len(), take).into_vec();
    picks.sort_unstable();
    picks.into_iter().map(|i| candidates[i].clone()).collect()
}

/// Add every positive document the column fires on.
pub fn update_coverage(
    coverage: &CoverageState,
    column: &[u8],
    train: &LabeledDataset,
) -> Result<CoverageState> {
    if column.len() != train.len() {
        return Err(Error::LengthMismatch {
            expected: train.len(),
            actual: column.len(),
        });
    }
    let mut next = coverage.clone();
    for (doc, &fires) in train.documents.iter().zip(column) {
        if fires != 0 && doc.label == 1 {
            next.covered.insert(doc.id.clone());
        }
    }
    Ok(next)
}
