//! Score-level and feature-level fusion of image and text embeddings.
//!
//! Score-level fusion represents a query as `w1·img + w2·txt` and a
//! candidate as `w3·img + w4·txt`; their inner product expands into two
//! within-modality and two cross-modality terms. A missing modality is the
//! zero vector. Feature-level fusion represents an item by a single vector;
//! the toy stand-in here is one linear map over the concatenated uni-modal
//! vectors.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoders::{project, Projected, Vector};
use crate::linalg::{dot_f32, Matrix};

#[derive(Debug, Error, PartialEq)]
pub enum FusionError {
    #[error("dimension mismatch: {0} vs {1}")]
    DimMismatch(usize, usize),
    #[error("score-fusion embedding needs at least one modality")]
    Empty,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusionWeights {
    pub w1: f64,
    pub w2: f64,
    pub w3: f64,
    pub w4: f64,
}

impl Default for FusionWeights {
    fn default() -> Self {
        Self { w1: 1.0, w2: 1.0, w3: 1.0, w4: 1.0 }
    }
}

impl FusionWeights {
    pub fn new(w1: f64, w2: f64, w3: f64, w4: f64) -> Self {
        Self { w1, w2, w3, w4 }
    }

    pub fn is_finite(&self) -> bool {
        [self.w1, self.w2, self.w3, self.w4].iter().all(|w| w.is_finite())
    }

    pub fn scaled(&self, lambda: f64) -> Self {
        Self::new(self.w1 * lambda, self.w2 * lambda, self.w3 * lambda, self.w4 * lambda)
    }
}

/// Separate image and text vectors of one item.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreFusionEmbedding {
    pub image_vec: Option<Vector>,
    pub text_vec: Option<Vector>,
}

impl ScoreFusionEmbedding {
    pub fn new(image_vec: Option<Vector>, text_vec: Option<Vector>) -> Result<Self, FusionError> {
        match (&image_vec, &text_vec) {
            (None, None) => return Err(FusionError::Empty),
            (Some(i), Some(t)) if i.dim() != t.dim() => return Err(FusionError::DimMismatch(i.dim(), t.dim())),
            _ => {}
        }
        Ok(Self { image_vec, text_vec })
    }

    pub fn dim(&self) -> usize {
        self.image_vec.as_ref().or(self.text_vec.as_ref()).map_or(0, Vector::dim)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureFusionEmbedding {
    pub fused_vec: Vector,
}

impl FeatureFusionEmbedding {
    pub fn dim(&self) -> usize {
        self.fused_vec.dim()
    }
}

/// `wa·image + wb·text`, missing modality as zero.
pub fn fuse_score_level(e: &ScoreFusionEmbedding, wa: f64, wb: f64) -> Result<Vector, FusionError> {
    Ok(Vector::from_f64(&fuse_score_level_f64(e, wa, wb)?))
}

/// [`fuse_score_level`] without the final rounding to `f32`.
pub fn fuse_score_level_f64(e: &ScoreFusionEmbedding, wa: f64, wb: f64) -> Result<Vec<f64>, FusionError> {
    let dim = e.dim();
    let mut out = vec![0.0f64; dim];
    for (v, w) in [(&e.image_vec, wa), (&e.text_vec, wb)] {
        if let Some(v) = v {
            if v.dim() != dim {
                return Err(FusionError::DimMismatch(dim, v.dim()));
            }
            for (o, &x) in out.iter_mut().zip(v.as_slice()) {
                *o += w * f64::from(x);
            }
        }
    }
    Ok(out)
}

fn pair_dot(a: &Option<Vector>, b: &Option<Vector>) -> Result<f64, FusionError> {
    match (a, b) {
        (Some(a), Some(b)) => {
            if a.dim() != b.dim() {
                return Err(FusionError::DimMismatch(a.dim(), b.dim()));
            }
            Ok(dot_f32(a.as_slice(), b.as_slice()))
        }
        _ => Ok(0.0),
    }
}

/// Four-term weighted sum of within- and cross-modality inner products.
pub fn similarity_score_fusion(
    q: &ScoreFusionEmbedding,
    c: &ScoreFusionEmbedding,
    w: &FusionWeights,
) -> Result<f64, FusionError> {
    if q.dim() != c.dim() {
        return Err(FusionError::DimMismatch(q.dim(), c.dim()));
    }
    let ii = pair_dot(&q.image_vec, &c.image_vec)?;
    let tt = pair_dot(&q.text_vec, &c.text_vec)?;
    let it = pair_dot(&q.image_vec, &c.text_vec)?;
    let ti = pair_dot(&q.text_vec, &c.image_vec)?;
    Ok(w.w1 * w.w3 * ii + w.w2 * w.w4 * tt + w.w1 * w.w4 * it + w.w2 * w.w3 * ti)
}

pub fn similarity_feature_fusion(q: &FeatureFusionEmbedding, c: &FeatureFusionEmbedding) -> Result<f64, FusionError> {
    if q.dim() != c.dim() {
        return Err(FusionError::DimMismatch(q.dim(), c.dim()));
    }
    Ok(dot_f32(q.fused_vec.as_slice(), c.fused_vec.as_slice()))
}

/// `[img ; txt]` with missing halves zero-filled.
pub(crate) fn concat_halves(img: Option<&[f64]>, txt: Option<&[f64]>, dim: usize) -> Vec<f64> {
    let mut x = vec![0.0; 2 * dim];
    if let Some(i) = img {
        x[..dim].copy_from_slice(i);
    }
    if let Some(t) = txt {
        x[dim..].copy_from_slice(t);
    }
    x
}

pub(crate) fn feature_fuse_forward(img: Option<&[f64]>, txt: Option<&[f64]>, proj: &Matrix) -> Projected {
    project(proj, concat_halves(img, txt, proj.rows()))
}

/// Toy feature-level fusion: `normalize(proj · [img ; txt])`, where `proj`
/// is `dim × 2·dim`.
pub fn fuse_feature_level_toy(
    img: Option<&Vector>,
    txt: Option<&Vector>,
    proj: &Matrix,
) -> Result<FeatureFusionEmbedding, FusionError> {
    let dim = proj.rows();
    if proj.cols() != 2 * dim {
        return Err(FusionError::DimMismatch(2 * dim, proj.cols()));
    }
    for v in [img, txt].into_iter().flatten() {
        if v.dim() != dim {
            return Err(FusionError::DimMismatch(dim, v.dim()));
        }
    }
    let img = img.map(Vector::to_f64);
    let txt = txt.map(Vector::to_f64);
    let out = feature_fuse_forward(img.as_deref(), txt.as_deref(), proj);
    Ok(FeatureFusionEmbedding { fused_vec: Vector::from_f64(&out.output) })
}
