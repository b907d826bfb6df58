//! Deterministic toy uni-modal encoders.
//!
//! Text goes through a signed feature-hashing bag of tokens followed by a
//! trainable square projection; images are precomputed raw feature vectors
//! followed by their own projection. Both outputs are L2-normalized, except
//! that an all-zero vector stays zero (the padding case for a missing
//! modality).

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{fnv1a64, Instruction};
use crate::linalg::{normalize_in_place, Matrix};

pub const DEFAULT_DIM: usize = 64;
const INIT_NOISE: f64 = 0.01;

#[derive(Debug, Error, PartialEq)]
pub enum EncoderError {
    #[error("no raw feature for image {0:?}")]
    MissingFeature(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
}

/// Embedding vector handed to the index. Entries are finite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Vector {
    values: Vec<f32>,
}

impl Vector {
    pub fn new(values: Vec<f32>) -> Self {
        debug_assert!(values.iter().all(|v| v.is_finite()));
        Self { values }
    }

    pub fn zeros(dim: usize) -> Self {
        Self { values: vec![0.0; dim] }
    }

    pub fn from_f64(values: &[f64]) -> Self {
        Self::new(values.iter().map(|&v| v as f32).collect())
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.values
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.values.iter().map(|&v| f64::from(v)).collect()
    }

    pub fn into_inner(self) -> Vec<f32> {
        self.values
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>().sqrt()
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextEncoderParams {
    pub projection: Matrix,
    pub hash_dim: usize,
    pub seed: u64,
}

impl TextEncoderParams {
    /// Identity projection plus seeded Gaussian noise of scale 0.01.
    pub fn new(dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7465_7874);
        Self { projection: Matrix::identity_with_noise(dim, dim, INIT_NOISE, &mut rng), hash_dim: dim, seed }
    }

    pub fn identity(dim: usize) -> Self {
        Self { projection: Matrix::identity(dim), hash_dim: dim, seed: 0 }
    }

    pub fn dim(&self) -> usize {
        self.projection.rows()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageEncoderParams {
    pub projection: Matrix,
    pub seed: u64,
}

impl ImageEncoderParams {
    pub fn new(dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x696d_6167);
        Self { projection: Matrix::identity_with_noise(dim, dim, INIT_NOISE, &mut rng), seed }
    }

    pub fn identity(dim: usize) -> Self {
        Self { projection: Matrix::identity(dim), seed: 0 }
    }

    pub fn dim(&self) -> usize {
        self.projection.rows()
    }
}

/// Lookup of raw (pre-projection) image features by image reference.
pub trait FeatureLookup {
    fn feature(&self, image_ref: &str) -> Option<&[f32]>;
}

impl FeatureLookup for HashMap<String, Vec<f32>> {
    fn feature(&self, image_ref: &str) -> Option<&[f32]> {
        self.get(image_ref).map(Vec::as_slice)
    }
}

/// Signed feature hashing of whitespace tokens, L2-normalized (zero for
/// empty text).
pub fn hash_features(text: &str, hash_dim: usize) -> Vec<f64> {
    assert!(hash_dim >= 1, "hash_dim must be positive");
    let mut out = vec![0.0; hash_dim];
    for tok in text.split_whitespace() {
        let h = fnv1a64(tok.as_bytes());
        let bucket = (h % hash_dim as u64) as usize;
        let sign = if h >> 63 == 1 { -1.0 } else { 1.0 };
        out[bucket] += sign;
    }
    normalize_in_place(&mut out);
    out
}

pub fn hash_embed_text(text: &str, hash_dim: usize) -> Vector {
    Vector::from_f64(&hash_features(text, hash_dim))
}

/// Text actually fed to the text encoder for a query: the instruction is a
/// prefix separated by one space. Image-only queries with an instruction use
/// the instruction alone.
pub fn compose_query_text(text: Option<&str>, instruction: Option<&Instruction>) -> Option<String> {
    compose_text(text, instruction.map(|i| i.text.as_str()))
}

/// [`compose_query_text`] over a bare instruction string.
pub fn compose_text(text: Option<&str>, instruction: Option<&str>) -> Option<String> {
    match (instruction, text) {
        (Some(inst), Some(t)) => Some(format!("{inst} {t}")),
        (Some(inst), None) => Some(inst.to_string()),
        (None, Some(t)) => Some(t.to_string()),
        (None, None) => None,
    }
}

/// Intermediate values of a projection followed by normalization, kept for
/// backpropagation.
#[derive(Debug, Clone)]
pub struct Projected {
    pub input: Vec<f64>,
    pub pre_norm: f64,
    pub output: Vec<f64>,
}

pub fn project(projection: &Matrix, input: Vec<f64>) -> Projected {
    let mut output = projection.matvec(&input);
    let pre_norm = normalize_in_place(&mut output);
    Projected { input, pre_norm, output }
}

pub fn text_forward(text: &str, params: &TextEncoderParams) -> Projected {
    project(&params.projection, hash_features(text, params.hash_dim))
}

pub fn image_forward(raw: &[f32], params: &ImageEncoderParams) -> Result<Projected, EncoderError> {
    if raw.len() != params.projection.cols() {
        return Err(EncoderError::DimMismatch { expected: params.projection.cols(), got: raw.len() });
    }
    Ok(project(&params.projection, raw.iter().map(|&v| f64::from(v)).collect()))
}

/// Encodes `instruction.text + " " + text` (or `text` alone).
pub fn encode_text(text: &str, instruction: Option<&Instruction>, params: &TextEncoderParams) -> Vector {
    let full = compose_query_text(Some(text), instruction).expect("text present");
    Vector::from_f64(&text_forward(&full, params).output)
}

pub fn encode_image<F: FeatureLookup + ?Sized>(
    image_ref: &str,
    features: &F,
    params: &ImageEncoderParams,
) -> Result<Vector, EncoderError> {
    let raw = features.feature(image_ref).ok_or_else(|| EncoderError::MissingFeature(image_ref.to_string()))?;
    Ok(Vector::from_f64(&image_forward(raw, params)?.output))
}
