//! Exact and approximate maximum-inner-product search over an embedding
//! store.

mod clustered;
mod flat;
mod store;

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fusion::{FeatureFusionEmbedding, ScoreFusionEmbedding};

pub use clustered::{build_clustered, search_clustered, ClusteredIndex, ClusteredIndexFile, DEFAULT_MAX_ITERS};
pub use flat::{build_flat, search_flat, FlatIndex};
pub use store::{read_embeddings, write_embeddings, EmbeddingStore, StoreMode};

#[derive(Debug, Error)]
pub enum IndexError {
    #[error("bad magic: not an embedding file")]
    BadMagic,
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u16),
    #[error("checksum mismatch (corrupt or truncated file)")]
    ChecksumMismatch,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("query mode does not match the store mode")]
    ModeMismatch,
    #[error("too few rows ({rows}) for {lists} lists")]
    TooFewRows { rows: usize, lists: usize },
    #[error("k must be at least 1")]
    InvalidK,
    #[error("invalid n_probe {n_probe} for {n_lists} lists")]
    InvalidProbe { n_probe: usize, n_lists: usize },
    #[error("duplicate id {0:?}")]
    DuplicateId(String),
    #[error("malformed embedding data: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A query embedding in either fusion mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum QueryEmbedding {
    Score(ScoreFusionEmbedding),
    Feature(FeatureFusionEmbedding),
}

impl QueryEmbedding {
    pub fn mode(&self) -> StoreMode {
        match self {
            QueryEmbedding::Score(_) => StoreMode::ScoreFusion,
            QueryEmbedding::Feature(_) => StoreMode::FeatureFusion,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            QueryEmbedding::Score(e) => e.dim(),
            QueryEmbedding::Feature(e) => e.dim(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    pub did: String,
    pub score: f64,
}

/// Ranked hits, score descending with ties broken by ascending id.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub entries: Vec<Hit>,
}

impl RetrievalResult {
    pub fn ids(&self) -> Vec<&str> {
        self.entries.iter().map(|h| h.did.as_str()).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Anything that answers top-k queries.
pub trait Searcher: Send + Sync {
    fn search(&self, query: &QueryEmbedding, k: usize) -> Result<RetrievalResult, IndexError>;
    fn store(&self) -> &EmbeddingStore;
}

/// Result order: higher score first, then smaller id.
pub(crate) fn rank_order(a: (f64, &str), b: (f64, &str)) -> Ordering {
    b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal).then_with(|| a.1.cmp(b.1))
}

/// Exact top-k over `(score, row)` pairs under the result order.
pub(crate) fn top_k(store: &EmbeddingStore, mut scored: Vec<(f64, usize)>, k: usize) -> RetrievalResult {
    let ids = store.ids();
    let cmp = |a: &(f64, usize), b: &(f64, usize)| rank_order((a.0, &ids[a.1]), (b.0, &ids[b.1]));
    if scored.len() > k {
        scored.select_nth_unstable_by(k - 1, cmp);
        scored.truncate(k);
    }
    scored.sort_unstable_by(cmp);
    RetrievalResult { entries: scored.into_iter().map(|(score, i)| Hit { did: ids[i].clone(), score }).collect() }
}
