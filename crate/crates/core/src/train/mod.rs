//! In-batch query–target contrastive training with Adam.

mod adam;
mod backprop;
mod checkpoint;
mod gradcheck;
mod loss;

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::debug;

use crate::data::{select_instruction, Candidate, Corpus};
use crate::encoders::{EncoderError, FeatureLookup};
use crate::fusion::FusionWeights;
use crate::index::StoreMode;
use crate::model::{query_text, FusionMode, ModelError, ModelParams, DEFAULT_TEMPERATURE};

pub use adam::AdamState;
pub use backprop::{batch_loss, batch_loss_and_grad, forward_batch, in_batch_accuracy, Batch, BatchForward, Gradients, Item};
pub use checkpoint::{Checkpoint, CheckpointError};
pub use gradcheck::{checked_params, gradient_check, gradient_check_entries, relative_error, GradCheckEntry, ParamRef, PROJECTION_SAMPLES};
pub use loss::{contrastive_loss, contrastive_loss_with_negatives};

/// Upper bound on `exp(logit_scale)`, i.e. temperature ≥ 0.01.
pub const MAX_LOGIT_SCALE: f64 = 4.605_170_185_988_092;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("similarity matrix must be square (or wider, with hard negatives): {rows}x{cols}")]
    NonSquare { rows: usize, cols: usize },
    #[error("temperature must be positive, got {0}")]
    NonPositiveTemperature(f64),
    #[error("corpus has no training queries")]
    EmptyCorpus,
    #[error("batch size {0} is too small; in-batch negatives need at least 2")]
    BatchTooSmall(usize),
    #[error(transparent)]
    Model(#[from] ModelError),
}

impl From<EncoderError> for TrainError {
    fn from(e: EncoderError) -> Self {
        TrainError::Model(e.into())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub temperature_init: f64,
    pub seed: u64,
    pub use_instructions: bool,
    pub mode: FusionMode,
    /// Keep w1..w4 fixed at their initial values.
    pub freeze_weights: bool,
    /// Append annotated hard negatives as extra similarity columns.
    pub hard_negatives: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            epochs: 10,
            learning_rate: 1e-2,
            temperature_init: DEFAULT_TEMPERATURE,
            seed: 0,
            use_instructions: true,
            mode: FusionMode::ScoreFusion,
            freeze_weights: false,
            hard_negatives: true,
        }
    }
}

impl TrainConfig {
    /// Stable hash of the configuration, stored in checkpoints.
    pub fn hash(&self) -> u64 {
        crate::data::fnv1a64(serde_json::to_string(self).expect("config serializes").as_bytes())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchLossReport {
    pub epoch: usize,
    pub step: u64,
    pub loss: f64,
    pub accuracy_in_batch: f64,
    pub grad_norms: BTreeMap<String, f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub loss_curve: Vec<BatchLossReport>,
}

impl TrainOutcome {
    pub fn checkpoint(&self, config: &TrainConfig) -> Checkpoint {
        Checkpoint { params: self.params.clone(), config_hash: config.hash() }
    }
}

fn candidate_item<F: FeatureLookup + ?Sized>(c: &Candidate, features: &F) -> Result<Item, TrainError> {
    let image = match c.image_ref.as_deref() {
        Some(r) => Some(features.feature(r).ok_or_else(|| EncoderError::MissingFeature(r.to_string()))?.to_vec()),
        None => None,
    };
    Ok(Item { text: c.text.clone(), image })
}

/// Builds one batch: each query (optionally instruction-prefixed) paired
/// with one sampled positive, plus hard negatives when enabled.
pub fn make_batch<F: FeatureLookup + ?Sized>(
    corpus: &Corpus,
    features: &F,
    query_indices: &[usize],
    config: &TrainConfig,
    instruction_seed: u64,
    rng: &mut ChaCha8Rng,
) -> Result<Batch, TrainError> {
    let mut queries = Vec::with_capacity(query_indices.len());
    let mut positives = Vec::with_capacity(query_indices.len());
    let mut negatives = Vec::new();
    for &qi in query_indices {
        let q = &corpus.queries[qi];
        let inst = config.use_instructions.then(|| select_instruction(q, instruction_seed));
        let image = match q.image_ref.as_deref() {
            Some(r) => Some(features.feature(r).ok_or_else(|| EncoderError::MissingFeature(r.to_string()))?.to_vec()),
            None => None,
        };
        queries.push(Item { text: query_text(q, inst), image });
        let pos = &q.positives[rng.random_range(0..q.positives.len())];
        positives.push(candidate_item(corpus.pool.get(pos).expect("validated corpus"), features)?);
        if config.hard_negatives {
            for neg in &q.negatives {
                negatives.push(candidate_item(corpus.pool.get(neg).expect("validated corpus"), features)?);
            }
        }
    }
    positives.extend(negatives);
    Ok(Batch { queries, candidates: positives })
}

/// Trains from a freshly initialized model.
pub fn train<F: FeatureLookup + ?Sized>(corpus: &Corpus, features: &F, dim: usize, config: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    let mut params = ModelParams::init(dim, config.mode, config.seed);
    if !(config.temperature_init > 0.0) {
        return Err(TrainError::NonPositiveTemperature(config.temperature_init));
    }
    params.logit_scale = (1.0 / config.temperature_init).ln();
    train_from(params, corpus, features, config)
}

/// Adam optimizer state over every parameter group of a model.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub params: ModelParams,
    learning_rate: f64,
    freeze_weights: bool,
    step: u64,
    text: AdamState,
    image: AdamState,
    fusion: AdamState,
    weights: AdamState,
    scale: AdamState,
}

impl Trainer {
    pub fn new(params: ModelParams, learning_rate: f64, freeze_weights: bool) -> Self {
        let d = params.dim();
        Self {
            params,
            learning_rate,
            freeze_weights,
            step: 0,
            text: AdamState::new(d * d),
            image: AdamState::new(d * d),
            fusion: AdamState::new(2 * d * d),
            weights: AdamState::new(4),
            scale: AdamState::new(1),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One Adam update on `batch`; the report carries the pre-update loss.
    pub fn step(&mut self, batch: &Batch, epoch: usize) -> Result<BatchLossReport, TrainError> {
        if batch.len() < 2 {
            return Err(TrainError::BatchTooSmall(batch.len()));
        }
        let (loss, acc, grads) = batch_loss_and_grad(&self.params, batch)?;
        self.step += 1;
        let (lr, t) = (self.learning_rate, self.step);
        let p = &mut self.params;
        self.text.step(p.text.projection.as_mut_slice(), grads.text_proj.as_slice(), lr, t);
        self.image.step(p.image.projection.as_mut_slice(), grads.image_proj.as_slice(), lr, t);
        let mut grad_norms = BTreeMap::new();
        grad_norms.insert("text_proj".to_string(), grads.text_proj.frobenius_norm());
        grad_norms.insert("image_proj".to_string(), grads.image_proj.frobenius_norm());
        match p.mode {
            StoreMode::ScoreFusion => {
                if !self.freeze_weights {
                    let w = &mut p.weights;
                    let mut flat = [w.w1, w.w2, w.w3, w.w4];
                    self.weights.step(&mut flat, &grads.weights, lr, t);
                    *w = FusionWeights::new(flat[0], flat[1], flat[2], flat[3]);
                }
                grad_norms.insert("weights".to_string(), grads.weights.iter().map(|g| g * g).sum::<f64>().sqrt());
            }
            StoreMode::FeatureFusion => {
                self.fusion.step(p.fusion_proj.as_mut_slice(), grads.fusion_proj.as_slice(), lr, t);
                grad_norms.insert("fusion_proj".to_string(), grads.fusion_proj.frobenius_norm());
            }
        }
        let mut scale = [p.logit_scale];
        self.scale.step(&mut scale, &[grads.logit_scale], lr, t);
        p.logit_scale = scale[0].min(MAX_LOGIT_SCALE);
        grad_norms.insert("logit_scale".to_string(), grads.logit_scale.abs());
        Ok(BatchLossReport { epoch, step: t, loss, accuracy_in_batch: acc, grad_norms })
    }
}

/// Continues training `params` on the corpus.
pub fn train_from<F: FeatureLookup + ?Sized>(
    mut params: ModelParams,
    corpus: &Corpus,
    features: &F,
    config: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    if corpus.queries.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    if config.batch_size < 2 {
        return Err(TrainError::BatchTooSmall(config.batch_size));
    }
    params.mode = config.mode;
    let mut trainer = Trainer::new(params, config.learning_rate, config.freeze_weights);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..corpus.queries.len()).collect();
    let mut curve = Vec::new();
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let batch = make_batch(corpus, features, chunk, config, config.seed.wrapping_add(epoch as u64), &mut rng)?;
            curve.push(trainer.step(&batch, epoch)?);
        }
        if let Some(last) = curve.last() {
            debug!(epoch, loss = last.loss, acc = last.accuracy_in_batch, "epoch done");
        }
    }
    Ok(TrainOutcome { params: trainer.params, loss_curve: curve })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Matrix;
    use rand_distr::{Distribution, Normal};

    fn random_batch(n: usize, dim: usize, seed: u64, with_negatives: bool) -> Batch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let words = ["red", "blue", "dog", "cat", "news", "wiki", "shoe", "car", "tree", "sky", "find", "image"];
        let text = |rng: &mut ChaCha8Rng| {
            (0..4).map(|_| words[rng.random_range(0..words.len())]).collect::<Vec<_>>().join(" ")
        };
        let item = |rng: &mut ChaCha8Rng, k: usize| {
            let image: Vec<f32> = (0..dim).map(|_| normal.sample(rng) as f32).collect();
            match k % 3 {
                0 => Item { text: Some(text(rng)), image: None },
                1 => Item { text: None, image: Some(image) },
                _ => Item { text: Some(text(rng)), image: Some(image) },
            }
        };
        let queries = (0..n).map(|k| item(&mut rng, k)).collect();
        let mut candidates: Vec<Item> = (0..n).map(|k| item(&mut rng, k + 1)).collect();
        if with_negatives {
            candidates.push(item(&mut rng, 2));
        }
        Batch { queries, candidates }
    }

    fn perturbed_params(dim: usize, mode: FusionMode, seed: u64) -> ModelParams {
        let mut p = ModelParams::init(dim, mode, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        p.text.projection = Matrix::identity_with_noise(dim, dim, 0.3, &mut rng);
        p.image.projection = Matrix::identity_with_noise(dim, dim, 0.3, &mut rng);
        p.fusion_proj = Matrix::identity_with_noise(dim, 2 * dim, 0.3, &mut rng);
        p.weights = FusionWeights::new(
            rng.random_range(0.5..1.5),
            rng.random_range(0.5..1.5),
            rng.random_range(0.5..1.5),
            rng.random_range(0.5..1.5),
        );
        p.logit_scale = 1.0;
        p
    }

    #[test]
    fn random_batches_pass_gradient_check() {
        for mode in [FusionMode::ScoreFusion, FusionMode::FeatureFusion] {
            for seed in 0..3 {
                let params = perturbed_params(12, mode, seed);
                let batch = random_batch(8, 12, seed, seed == 1);
                let err = gradient_check(&params, &batch, 1e-4).unwrap();
                assert!(err < 1e-4, "{mode:?} seed {seed}: {err}");
            }
        }
    }

    #[test]
    fn linear_in_weights_toy_is_exact() {
        // identity encoders, images only: similarity = w1·w3·<qI, cI>
        let dim = 4;
        let mut p = ModelParams::init(dim, FusionMode::ScoreFusion, 0);
        p.text = crate::encoders::TextEncoderParams::identity(dim);
        p.image = crate::encoders::ImageEncoderParams::identity(dim);
        p.logit_scale = 0.0;
        let e = |i: usize| {
            let mut v = vec![0.0f32; dim];
            v[i] = 1.0;
            Item { text: None, image: Some(v) }
        };
        let batch = Batch { queries: vec![e(0), e(1)], candidates: vec![e(0), e(1)] };
        let entries = gradient_check_entries(&p, &batch, 1e-4).unwrap();
        for entry in entries.iter().filter(|e| matches!(e.param, ParamRef::Weight(_) | ParamRef::LogitScale)) {
            assert!(entry.rel_error < 1e-6, "{entry:?}");
        }
    }

    #[test]
    fn larger_epsilon_gives_larger_error() {
        let params = perturbed_params(10, FusionMode::ScoreFusion, 7);
        let batch = random_batch(8, 10, 7, false);
        let coarse = gradient_check(&params, &batch, 1e-2).unwrap();
        let fine = gradient_check(&params, &batch, 1e-4).unwrap();
        assert!(coarse > fine, "coarse {coarse} fine {fine}");
    }

    #[test]
    fn checked_params_cover_requirements() {
        let p = ModelParams::init(16, FusionMode::ScoreFusion, 0);
        let refs = checked_params(&p, 1);
        assert_eq!(refs.iter().filter(|r| matches!(r, ParamRef::Weight(_))).count(), 4);
        assert_eq!(refs.iter().filter(|r| matches!(r, ParamRef::TextProj(_))).count(), PROJECTION_SAMPLES);
        assert_eq!(refs.iter().filter(|r| matches!(r, ParamRef::ImageProj(_))).count(), PROJECTION_SAMPLES);
        assert!(refs.contains(&ParamRef::LogitScale));
        let f = ModelParams::init(16, FusionMode::FeatureFusion, 0);
        assert_eq!(checked_params(&f, 1).iter().filter(|r| matches!(r, ParamRef::FusionProj(_))).count(), PROJECTION_SAMPLES);
    }

    #[test]
    fn repeated_separable_batch_converges() {
        let dim = 16;
        let n = 8;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let centers: Vec<Vec<f32>> = (0..n).map(|_| (0..dim).map(|_| normal.sample(&mut rng) as f32).collect()).collect();
        let jitter = |c: &Vec<f32>, rng: &mut ChaCha8Rng| -> Vec<f32> { c.iter().map(|v| v + 0.2 * normal.sample(rng) as f32).collect() };
        let queries = centers.iter().map(|c| Item { text: None, image: Some(jitter(c, &mut rng)) }).collect();
        let candidates = centers.iter().map(|c| Item { text: None, image: Some(jitter(c, &mut rng)) }).collect();
        let batch = Batch { queries, candidates };
        let mut trainer = Trainer::new(ModelParams::init(dim, FusionMode::ScoreFusion, 0), 1e-2, false);
        let losses: Vec<f64> = (0..200).map(|_| trainer.step(&batch, 0).unwrap().loss).collect();
        let target = 0.1 * (n as f64).ln();
        let reached = losses.iter().position(|&l| l < target).expect("loss reaches 0.1 ln N");
        for t in 0..reached.saturating_sub(20) {
            assert!(losses[t + 20] < losses[t], "window at {t}: {} -> {}", losses[t], losses[t + 20]);
        }
    }

    #[test]
    fn trainer_rejects_singleton_batch() {
        let mut trainer = Trainer::new(ModelParams::init(4, FusionMode::ScoreFusion, 0), 1e-2, false);
        let one = Batch { queries: vec![Item { text: Some("a".into()), image: None }], candidates: vec![] };
        assert!(matches!(trainer.step(&one, 0), Err(TrainError::BatchTooSmall(1))));
    }
}
