//! Inverted-file index: k-means lists over the searchable vectors, probed by
//! inner product with the list centroids.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::fusion::FusionWeights;
use crate::linalg::dot;

use super::flat::{build_flat, FlatIndex, Scorer};
use super::{top_k, EmbeddingStore, IndexError, QueryEmbedding, RetrievalResult, Searcher, StoreMode};

pub const DEFAULT_MAX_ITERS: usize = 25;

#[derive(Debug, Clone)]
pub struct ClusteredIndex {
    flat: FlatIndex,
    n_lists: usize,
    n_probe: usize,
    centroids: Vec<Vec<f64>>,
    assignments: Vec<usize>,
    lists: Vec<Vec<usize>>,
    inertia_history: Vec<f64>,
    seed: u64,
}

/// Serializable description of a built clustered index (everything except
/// the store itself).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusteredIndexFile {
    pub n_lists: usize,
    pub n_probe: usize,
    pub seed: u64,
    pub weights: FusionWeights,
    pub store_rows: usize,
    pub centroids: Vec<Vec<f64>>,
    pub assignments: Vec<usize>,
    pub inertia_history: Vec<f64>,
}

/// Vector each row is clustered on: the fused row in feature mode, or
/// `w3·image + w4·text` in score mode.
fn row_vector(store: &EmbeddingStore, weights: &FusionWeights, row: usize) -> Vec<f64> {
    match store.mode() {
        StoreMode::FeatureFusion => store.primary_row(row).iter().map(|&v| f64::from(v)).collect(),
        StoreMode::ScoreFusion => store
            .primary_row(row)
            .iter()
            .zip(store.text_row(row))
            .map(|(&i, &t)| weights.w3 * f64::from(i) + weights.w4 * f64::from(t))
            .collect(),
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(centroids: &[Vec<f64>], x: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, centroid) in centroids.iter().enumerate() {
        let d = sq_dist(centroid, x);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn kmeans_pp(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut chosen = vec![false; n];
    let first = rng.random_range(0..n);
    chosen[first] = true;
    let mut centroids = vec![points[first].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &points[first])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random_range(0.0..total);
            let mut pick = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if d <= 0.0 {
                    continue;
                }
                if target < d {
                    pick = i;
                    break;
                }
                target -= d;
            }
            while d2[pick] <= 0.0 {
                pick -= 1;
            }
            pick
        } else {
            // every remaining point coincides with a centroid
            chosen.iter().position(|&c| !c).expect("k <= n")
        };
        chosen[pick] = true;
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &points[pick]));
        }
        centroids.push(points[pick].clone());
    }
    centroids
}

/// k-means (k-means++ seeding, Lloyd iterations) over the store rows.
pub fn build_clustered(
    store: Arc<EmbeddingStore>,
    weights: FusionWeights,
    n_lists: usize,
    seed: u64,
    max_iters: usize,
) -> Result<ClusteredIndex, IndexError> {
    let n = store.len();
    if n_lists == 0 || n_lists > n {
        return Err(IndexError::TooFewRows { rows: n, lists: n_lists });
    }
    let points: Vec<Vec<f64>> = (0..n).map(|r| row_vector(&store, &weights, r)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = kmeans_pp(&points, n_lists, &mut rng);
    let mut assignments = vec![usize::MAX; n];
    let mut inertia_history = Vec::new();
    for _ in 0..max_iters.max(1) {
        let mut changed = false;
        let mut inertia = 0.0;
        for (a, p) in assignments.iter_mut().zip(&points) {
            let (c, d) = nearest(&centroids, p);
            inertia += d;
            if *a != c {
                *a = c;
                changed = true;
            }
        }
        inertia_history.push(inertia);
        if !changed {
            break;
        }
        let dim = store.dim();
        let mut sums = vec![vec![0.0; dim]; n_lists];
        let mut counts = vec![0usize; n_lists];
        for (&a, p) in assignments.iter().zip(&points) {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(p) {
                *s += v;
            }
        }
        for ((centroid, sum), &count) in centroids.iter_mut().zip(sums).zip(&counts) {
            if count > 0 {
                *centroid = sum.into_iter().map(|s| s / count as f64).collect();
            }
        }
    }
    let mut lists = vec![Vec::new(); n_lists];
    for (r, &a) in assignments.iter().enumerate() {
        lists[a].push(r);
    }
    Ok(ClusteredIndex {
        flat: build_flat(store, weights),
        n_lists,
        n_probe: 1,
        centroids,
        assignments,
        lists,
        inertia_history,
        seed,
    })
}

impl ClusteredIndex {
    pub fn n_lists(&self) -> usize {
        self.n_lists
    }

    pub fn n_probe(&self) -> usize {
        self.n_probe
    }

    pub fn with_n_probe(mut self, n_probe: usize) -> Result<Self, IndexError> {
        if n_probe == 0 || n_probe > self.n_lists {
            return Err(IndexError::InvalidProbe { n_probe, n_lists: self.n_lists });
        }
        self.n_probe = n_probe;
        Ok(self)
    }

    pub fn assignments(&self) -> &[usize] {
        &self.assignments
    }

    pub fn centroids(&self) -> &[Vec<f64>] {
        &self.centroids
    }

    /// Total squared distance to the assigned centroid after each
    /// assignment step.
    pub fn inertia_history(&self) -> &[f64] {
        &self.inertia_history
    }

    pub fn to_file(&self) -> ClusteredIndexFile {
        ClusteredIndexFile {
            n_lists: self.n_lists,
            n_probe: self.n_probe,
            seed: self.seed,
            weights: *self.flat.weights(),
            store_rows: self.flat.store().len(),
            centroids: self.centroids.clone(),
            assignments: self.assignments.clone(),
            inertia_history: self.inertia_history.clone(),
        }
    }

    /// Reattaches a saved clustering to its store.
    pub fn from_file(store: Arc<EmbeddingStore>, file: ClusteredIndexFile) -> Result<Self, IndexError> {
        if file.store_rows != store.len() || file.assignments.len() != store.len() {
            return Err(IndexError::DimMismatch { expected: store.len(), got: file.assignments.len() });
        }
        if file.centroids.len() != file.n_lists || file.centroids.iter().any(|c| c.len() != store.dim()) {
            return Err(IndexError::Malformed("centroid table does not match n_lists/dim".into()));
        }
        if file.centroids.iter().flatten().any(|v| !v.is_finite()) {
            return Err(IndexError::Malformed("non-finite centroid".into()));
        }
        let mut lists = vec![Vec::new(); file.n_lists];
        for (r, &a) in file.assignments.iter().enumerate() {
            lists.get_mut(a).ok_or_else(|| IndexError::Malformed(format!("row {r} assigned to list {a}")))?.push(r);
        }
        let index = ClusteredIndex {
            flat: build_flat(store, file.weights),
            n_lists: file.n_lists,
            n_probe: 1,
            centroids: file.centroids,
            assignments: file.assignments,
            lists,
            inertia_history: file.inertia_history,
            seed: file.seed,
        };
        index.with_n_probe(file.n_probe)
    }
}

/// Scans only the `n_probe` lists whose centroids have the largest inner
/// product with the (fused) query.
pub fn search_clustered(
    index: &ClusteredIndex,
    query: &QueryEmbedding,
    k: usize,
    n_probe: usize,
) -> Result<RetrievalResult, IndexError> {
    if k == 0 {
        return Err(IndexError::InvalidK);
    }
    if n_probe == 0 || n_probe > index.n_lists {
        return Err(IndexError::InvalidProbe { n_probe, n_lists: index.n_lists });
    }
    let store = index.flat.store();
    let scorer = Scorer::new(store, index.flat.weights(), query)?;
    let q = scorer.query_vector();
    let mut order: Vec<(f64, usize)> = index.centroids.iter().enumerate().map(|(c, cen)| (dot(q, cen), c)).collect();
    order.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(std::cmp::Ordering::Equal).then(a.1.cmp(&b.1)));
    let scored = order[..n_probe]
        .iter()
        .flat_map(|&(_, list)| index.lists[list].iter().map(|&r| (scorer.score(r), r)))
        .collect();
    Ok(top_k(store, scored, k))
}

impl Searcher for ClusteredIndex {
    fn search(&self, query: &QueryEmbedding, k: usize) -> Result<RetrievalResult, IndexError> {
        search_clustered(self, query, k, self.n_probe)
    }

    fn store(&self) -> &EmbeddingStore {
        self.flat.store()
    }
}
