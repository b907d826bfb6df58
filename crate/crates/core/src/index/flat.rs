use std::sync::Arc;

use crate::fusion::{fuse_score_level_f64, FusionWeights};

use super::{top_k, EmbeddingStore, IndexError, QueryEmbedding, RetrievalResult, Searcher, StoreMode};

/// Exhaustive search over a shared store.
#[derive(Debug, Clone)]
pub struct FlatIndex {
    store: Arc<EmbeddingStore>,
    weights: FusionWeights,
}

pub fn build_flat(store: Arc<EmbeddingStore>, weights: FusionWeights) -> FlatIndex {
    debug_assert!(weights.is_finite());
    FlatIndex { store, weights }
}

impl FlatIndex {
    pub fn weights(&self) -> &FusionWeights {
        &self.weights
    }

    pub fn shared_store(&self) -> Arc<EmbeddingStore> {
        Arc::clone(&self.store)
    }
}

/// Query prepared against a store. In score mode the query is fused once as
/// `u = w1·qI + w2·qT` and each row scores `w3·⟨u, cI⟩ + w4·⟨u, cT⟩`, which
/// equals the four-term similarity by bilinearity.
pub(crate) struct Scorer<'a> {
    store: &'a EmbeddingStore,
    query: Vec<f64>,
    w3: f64,
    w4: f64,
}

impl<'a> Scorer<'a> {
    pub(crate) fn new(store: &'a EmbeddingStore, weights: &FusionWeights, query: &QueryEmbedding) -> Result<Self, IndexError> {
        if query.mode() != store.mode() {
            return Err(IndexError::ModeMismatch);
        }
        if query.dim() != store.dim() {
            return Err(IndexError::DimMismatch { expected: store.dim(), got: query.dim() });
        }
        let (query, w3, w4) = match query {
            QueryEmbedding::Score(e) => {
                let u = fuse_score_level_f64(e, weights.w1, weights.w2)
                    .map_err(|_| IndexError::DimMismatch { expected: store.dim(), got: e.dim() })?;
                (u, weights.w3, weights.w4)
            }
            QueryEmbedding::Feature(e) => (e.fused_vec.to_f64(), 1.0, 0.0),
        };
        Ok(Self { store, query, w3, w4 })
    }

    pub(crate) fn query_vector(&self) -> &[f64] {
        &self.query
    }

    pub(crate) fn score(&self, row: usize) -> f64 {
        let dot = |r: &[f32]| -> f64 { self.query.iter().zip(r).map(|(&q, &x)| q * f64::from(x)).sum() };
        match self.store.mode() {
            StoreMode::FeatureFusion => dot(self.store.primary_row(row)),
            StoreMode::ScoreFusion => {
                let mut s = 0.0;
                if self.store.has_image(row) {
                    s += self.w3 * dot(self.store.primary_row(row));
                }
                if self.store.has_text(row) {
                    s += self.w4 * dot(self.store.text_row(row));
                }
                s
            }
        }
    }
}

/// Exact top-k by exhaustive scoring.
pub fn search_flat(index: &FlatIndex, query: &QueryEmbedding, k: usize) -> Result<RetrievalResult, IndexError> {
    if k == 0 {
        return Err(IndexError::InvalidK);
    }
    let scorer = Scorer::new(&index.store, &index.weights, query)?;
    let scored = (0..index.store.len()).map(|r| (scorer.score(r), r)).collect();
    Ok(top_k(&index.store, scored, k))
}

impl Searcher for FlatIndex {
    fn search(&self, query: &QueryEmbedding, k: usize) -> Result<RetrievalResult, IndexError> {
        search_flat(self, query, k)
    }

    fn store(&self) -> &EmbeddingStore {
        &self.store
    }
}
