//! Central finite-difference verification of the analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::index::StoreMode;
use crate::model::ModelParams;

use super::backprop::{batch_loss, batch_loss_and_grad, Batch, Gradients};
use super::TrainError;

/// Minimum number of entries sampled from each projection matrix.
pub const PROJECTION_SAMPLES: usize = 64;
const REL_FLOOR: f64 = 1e-6;

/// One scalar trainable parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamRef {
    TextProj(usize),
    ImageProj(usize),
    FusionProj(usize),
    Weight(usize),
    LogitScale,
}

impl ParamRef {
    pub fn get(self, p: &ModelParams) -> f64 {
        match self {
            ParamRef::TextProj(i) => p.text.projection.as_slice()[i],
            ParamRef::ImageProj(i) => p.image.projection.as_slice()[i],
            ParamRef::FusionProj(i) => p.fusion_proj.as_slice()[i],
            ParamRef::Weight(k) => [p.weights.w1, p.weights.w2, p.weights.w3, p.weights.w4][k],
            ParamRef::LogitScale => p.logit_scale,
        }
    }

    pub fn set(self, p: &mut ModelParams, v: f64) {
        match self {
            ParamRef::TextProj(i) => p.text.projection.as_mut_slice()[i] = v,
            ParamRef::ImageProj(i) => p.image.projection.as_mut_slice()[i] = v,
            ParamRef::FusionProj(i) => p.fusion_proj.as_mut_slice()[i] = v,
            ParamRef::Weight(0) => p.weights.w1 = v,
            ParamRef::Weight(1) => p.weights.w2 = v,
            ParamRef::Weight(2) => p.weights.w3 = v,
            ParamRef::Weight(_) => p.weights.w4 = v,
            ParamRef::LogitScale => p.logit_scale = v,
        }
    }

    pub fn grad(self, g: &Gradients) -> f64 {
        match self {
            ParamRef::TextProj(i) => g.text_proj.as_slice()[i],
            ParamRef::ImageProj(i) => g.image_proj.as_slice()[i],
            ParamRef::FusionProj(i) => g.fusion_proj.as_slice()[i],
            ParamRef::Weight(k) => g.weights[k],
            ParamRef::LogitScale => g.logit_scale,
        }
    }
}

/// Parameters checked: all fusion weights (score mode), the logit scale, and
/// a seeded sample of each projection matrix used by the mode.
pub fn checked_params(params: &ModelParams, sample_seed: u64) -> Vec<ParamRef> {
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed);
    let mut out = vec![ParamRef::LogitScale];
    let mut pick = |len: usize, make: fn(usize) -> ParamRef, out: &mut Vec<ParamRef>| {
        let n = PROJECTION_SAMPLES.min(len);
        let mut idx = sample(&mut rng, len, n).into_vec();
        idx.sort_unstable();
        out.extend(idx.into_iter().map(make));
    };
    let d = params.dim();
    pick(d * d, ParamRef::TextProj, &mut out);
    pick(d * d, ParamRef::ImageProj, &mut out);
    match params.mode {
        StoreMode::ScoreFusion => out.extend((0..4).map(ParamRef::Weight)),
        StoreMode::FeatureFusion => pick(2 * d * d, ParamRef::FusionProj, &mut out),
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckEntry {
    pub param: ParamRef,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Per-parameter comparison of analytic and central-difference gradients.
pub fn gradient_check_entries(params: &ModelParams, batch: &Batch, epsilon: f64) -> Result<Vec<GradCheckEntry>, TrainError> {
    let (_, _, grads) = batch_loss_and_grad(params, batch)?;
    let mut probe = params.clone();
    checked_params(params, 0x9c4e_c4ec)
        .into_iter()
        .map(|param| {
            let x = param.get(params);
            param.set(&mut probe, x + epsilon);
            let up = batch_loss(&probe, batch)?;
            param.set(&mut probe, x - epsilon);
            let down = batch_loss(&probe, batch)?;
            param.set(&mut probe, x);
            let numeric = (up - down) / (2.0 * epsilon);
            let analytic = param.grad(&grads);
            Ok(GradCheckEntry { param, analytic, numeric, rel_error: relative_error(analytic, numeric) })
        })
        .collect()
}

/// Largest relative error between analytic and finite-difference gradients.
pub fn gradient_check(params: &ModelParams, batch: &Batch, epsilon: f64) -> Result<f64, TrainError> {
    Ok(gradient_check_entries(params, batch, epsilon)?.iter().map(|e| e.rel_error).fold(0.0, f64::max))
}
