//! Complete retrieval model: both toy encoders, fusion weights or the toy
//! fusion projection, and the contrastive logit scale. Embeds queries and
//! candidates for either fusion mode.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Candidate, Corpus, Instruction, Pool, QueryInstance};
use crate::encoders::{
    compose_query_text, image_forward, text_forward, EncoderError, FeatureLookup, ImageEncoderParams, Projected,
    TextEncoderParams, Vector,
};
use crate::fusion::{feature_fuse_forward, FeatureFusionEmbedding, FusionError, FusionWeights, ScoreFusionEmbedding};
use crate::index::{EmbeddingStore, IndexError, QueryEmbedding, StoreMode};
use crate::linalg::Matrix;

pub use crate::index::StoreMode as FusionMode;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error("item {0:?} has neither text nor image")]
    EmptyItem(String),
}

/// Default CLIP-style initial temperature.
pub const DEFAULT_TEMPERATURE: f64 = 0.07;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub mode: FusionMode,
    pub text: TextEncoderParams,
    pub image: ImageEncoderParams,
    pub weights: FusionWeights,
    /// `ln(1 / temperature)`.
    pub logit_scale: f64,
    /// `dim × 2·dim` projection used in feature-fusion mode.
    pub fusion_proj: Matrix,
}

impl ModelParams {
    /// Untrained model: near-identity projections, unit fusion weights.
    pub fn init(dim: usize, mode: FusionMode, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6675_7365);
        Self {
            mode,
            text: TextEncoderParams::new(dim, seed),
            image: ImageEncoderParams::new(dim, seed),
            weights: FusionWeights::default(),
            logit_scale: (1.0 / DEFAULT_TEMPERATURE).ln(),
            fusion_proj: Matrix::identity_with_noise(dim, 2 * dim, 0.01, &mut rng),
        }
    }

    pub fn dim(&self) -> usize {
        self.text.dim()
    }

    pub fn temperature(&self) -> f64 {
        (-self.logit_scale).exp()
    }

    pub fn is_finite(&self) -> bool {
        self.text.projection.is_finite()
            && self.image.projection.is_finite()
            && self.fusion_proj.is_finite()
            && self.weights.is_finite()
            && self.logit_scale.is_finite()
    }
}

/// Payload of one query or candidate.
#[derive(Debug, Clone, Copy)]
pub struct ItemRef<'a> {
    pub text: Option<&'a str>,
    pub image: Option<&'a [f32]>,
}

/// Forward pass of one item, kept for backpropagation.
#[derive(Debug, Clone)]
pub struct ItemForward {
    pub text: Option<Projected>,
    pub image: Option<Projected>,
    /// Feature mode only.
    pub fused: Option<Projected>,
    /// Final embedding used in the similarity.
    pub embedding: Vec<f64>,
}

/// Forward pass. `side_weights` is `(w1, w2)` for queries and `(w3, w4)` for
/// candidates.
pub fn forward_item(params: &ModelParams, item: ItemRef<'_>, side_weights: (f64, f64)) -> Result<ItemForward, ModelError> {
    let text = item.text.map(|t| text_forward(t, &params.text));
    let image = item.image.map(|raw| image_forward(raw, &params.image)).transpose()?;
    let dim = params.dim();
    match params.mode {
        StoreMode::ScoreFusion => {
            let mut embedding = vec![0.0; dim];
            for (p, w) in [(&image, side_weights.0), (&text, side_weights.1)] {
                if let Some(p) = p {
                    for (e, &v) in embedding.iter_mut().zip(&p.output) {
                        *e += w * v;
                    }
                }
            }
            Ok(ItemForward { text, image, fused: None, embedding })
        }
        StoreMode::FeatureFusion => {
            let fused = feature_fuse_forward(
                image.as_ref().map(|p| p.output.as_slice()),
                text.as_ref().map(|p| p.output.as_slice()),
                &params.fusion_proj,
            );
            let embedding = fused.output.clone();
            Ok(ItemForward { text, image, fused: Some(fused), embedding })
        }
    }
}

/// Embedding of one item in the representation its mode stores.
pub fn embed_item(params: &ModelParams, item: ItemRef<'_>) -> Result<QueryEmbedding, ModelError> {
    let text = item.text.map(|t| text_forward(t, &params.text));
    let image = item.image.map(|raw| image_forward(raw, &params.image)).transpose()?;
    match params.mode {
        StoreMode::ScoreFusion => Ok(QueryEmbedding::Score(ScoreFusionEmbedding::new(
            image.map(|p| Vector::from_f64(&p.output)),
            text.map(|p| Vector::from_f64(&p.output)),
        )?)),
        StoreMode::FeatureFusion => {
            let fused = feature_fuse_forward(
                image.as_ref().map(|p| p.output.as_slice()),
                text.as_ref().map(|p| p.output.as_slice()),
                &params.fusion_proj,
            );
            Ok(QueryEmbedding::Feature(FeatureFusionEmbedding { fused_vec: Vector::from_f64(&fused.output) }))
        }
    }
}

fn lookup<'a, F: FeatureLookup + ?Sized>(features: &'a F, image_ref: Option<&str>) -> Result<Option<&'a [f32]>, ModelError> {
    image_ref
        .map(|r| features.feature(r).ok_or_else(|| EncoderError::MissingFeature(r.to_string()).into()))
        .transpose()
}

pub fn embed_candidate<F: FeatureLookup + ?Sized>(
    params: &ModelParams,
    candidate: &Candidate,
    features: &F,
) -> Result<QueryEmbedding, ModelError> {
    let image = lookup(features, candidate.image_ref.as_deref())?;
    if candidate.text.is_none() && image.is_none() {
        return Err(ModelError::EmptyItem(candidate.did.clone()));
    }
    embed_item(params, ItemRef { text: candidate.text.as_deref(), image })
}

/// Query text after optional instruction prefixing.
pub fn query_text(q: &QueryInstance, instruction: Option<&Instruction>) -> Option<String> {
    compose_query_text(q.text.as_deref(), instruction)
}

pub fn embed_query<F: FeatureLookup + ?Sized>(
    params: &ModelParams,
    q: &QueryInstance,
    features: &F,
    instruction: Option<&Instruction>,
) -> Result<QueryEmbedding, ModelError> {
    let text = query_text(q, instruction);
    let image = lookup(features, q.image_ref.as_deref())?;
    if text.is_none() && image.is_none() {
        return Err(ModelError::EmptyItem(q.qid.clone()));
    }
    embed_item(params, ItemRef { text: text.as_deref(), image })
}

/// Image references of the corpus with no raw feature, in file order.
pub fn missing_features<F: FeatureLookup + ?Sized>(corpus: &Corpus, features: &F) -> Vec<String> {
    let refs = corpus
        .pool
        .candidates()
        .iter()
        .filter_map(|c| c.image_ref.as_deref())
        .chain(corpus.queries.iter().filter_map(|q| q.image_ref.as_deref()));
    let mut seen = std::collections::HashSet::new();
    refs.filter(|r| features.feature(r).is_none() && seen.insert(*r)).map(str::to_string).collect()
}

/// Embeds every candidate of the pool (in pool order) into a store.
pub fn embed_pool<F: FeatureLookup + Sync + ?Sized>(
    params: &ModelParams,
    pool: &Pool,
    features: &F,
) -> Result<EmbeddingStore, ModelError> {
    let embeddings: Vec<QueryEmbedding> = pool
        .candidates()
        .par_iter()
        .map(|c| embed_candidate(params, c, features))
        .collect::<Result<_, _>>()?;
    let mut store = match params.mode {
        StoreMode::ScoreFusion => EmbeddingStore::new_score(params.dim()),
        StoreMode::FeatureFusion => EmbeddingStore::new_feature(params.dim()),
    };
    for (c, e) in pool.candidates().iter().zip(&embeddings) {
        match e {
            QueryEmbedding::Score(e) => store.push_score(&c.did, e)?,
            QueryEmbedding::Feature(e) => store.push_feature(&c.did, e)?,
        }
    }
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Domain, Modality};
    use crate::fusion::similarity_score_fusion;
    use crate::linalg::dot;
    use std::collections::HashMap;

    fn cand(did: &str, text: Option<&str>, img: Option<&str>) -> Candidate {
        let modality = match (text, img) {
            (Some(_), Some(_)) => Modality::ImageText,
            (Some(_), None) => Modality::Text,
            _ => Modality::Image,
        };
        Candidate {
            did: did.into(),
            modality,
            domain: Domain::new("misc").unwrap(),
            text: text.map(String::from),
            image_ref: img.map(String::from),
            dataset: None,
        }
    }

    fn features() -> HashMap<String, Vec<f32>> {
        let mut f = HashMap::new();
        f.insert("i1".to_string(), (0..8).map(|i| i as f32 / 8.0).collect());
        f.insert("i2".to_string(), (0..8).map(|i| (8 - i) as f32 / 8.0).collect());
        f
    }

    #[test]
    fn score_mode_forward_matches_four_term_similarity() {
        let params = ModelParams::init(8, FusionMode::ScoreFusion, 3);
        let mut params = params;
        params.weights = FusionWeights::new(0.5, 1.5, 2.0, -0.5);
        let f = features();
        let q = ItemRef { text: Some("red dress"), image: Some(&f["i1"]) };
        let c = ItemRef { text: Some("blue shirt"), image: Some(&f["i2"]) };
        let fq = forward_item(&params, q, (params.weights.w1, params.weights.w2)).unwrap();
        let fc = forward_item(&params, c, (params.weights.w3, params.weights.w4)).unwrap();
        let direct = dot(&fq.embedding, &fc.embedding);
        let (QueryEmbedding::Score(eq), QueryEmbedding::Score(ec)) = (embed_item(&params, q).unwrap(), embed_item(&params, c).unwrap()) else {
            panic!("score mode");
        };
        let four = similarity_score_fusion(&eq, &ec, &params.weights).unwrap();
        assert!((direct - four).abs() < 1e-5);
    }

    #[test]
    fn pool_embedding_keeps_order_and_presence() {
        let params = ModelParams::init(8, FusionMode::ScoreFusion, 1);
        let pool = Pool::new(vec![cand("a", Some("x"), None), cand("b", None, Some("i1")), cand("c", Some("y"), Some("i2"))]).unwrap();
        let store = embed_pool(&params, &pool, &features()).unwrap();
        assert_eq!(store.ids(), &["a", "b", "c"]);
        assert!(!store.has_image(0) && store.has_text(0));
        assert!(store.has_image(1) && !store.has_text(1));
        assert!(store.has_image(2) && store.has_text(2));
    }

    #[test]
    fn feature_mode_pool_and_missing_features() {
        let params = ModelParams::init(8, FusionMode::FeatureFusion, 1);
        let pool = Pool::new(vec![cand("a", Some("x"), None), cand("b", None, Some("i1"))]).unwrap();
        let store = embed_pool(&params, &pool, &features()).unwrap();
        assert_eq!(store.mode(), StoreMode::FeatureFusion);
        let norm: f64 = store.primary_row(1).iter().map(|&v| f64::from(v).powi(2)).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-5);
        let bad = Pool::new(vec![cand("z", None, Some("missing"))]).unwrap();
        assert!(matches!(embed_pool(&params, &bad, &features()), Err(ModelError::Encoder(EncoderError::MissingFeature(_)))));
    }
}
