//! Batch forward pass and analytic gradients of the contrastive loss with
//! respect to every trainable parameter.

use crate::index::StoreMode;
use crate::linalg::{dot, normalize_backward, Matrix};
use crate::model::{forward_item, ItemForward, ItemRef, ModelParams};

use super::loss::contrastive_loss_with_negatives;
use super::TrainError;

/// Owned payload of one training item.
#[derive(Debug, Clone, PartialEq)]
pub struct Item {
    pub text: Option<String>,
    pub image: Option<Vec<f32>>,
}

impl Item {
    pub fn as_ref(&self) -> ItemRef<'_> {
        ItemRef { text: self.text.as_deref(), image: self.image.as_deref() }
    }
}

/// Queries with their positives on the diagonal; candidates beyond
/// `queries.len()` are hard negatives.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub queries: Vec<Item>,
    pub candidates: Vec<Item>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }
}

/// Gradients shaped like the trainable parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub text_proj: Matrix,
    pub image_proj: Matrix,
    pub fusion_proj: Matrix,
    pub weights: [f64; 4],
    pub logit_scale: f64,
}

impl Gradients {
    pub fn zeros_like(params: &ModelParams) -> Self {
        let d = params.dim();
        Self {
            text_proj: Matrix::zeros(d, d),
            image_proj: Matrix::zeros(d, d),
            fusion_proj: Matrix::zeros(d, 2 * d),
            weights: [0.0; 4],
            logit_scale: 0.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BatchForward {
    pub queries: Vec<ItemForward>,
    pub candidates: Vec<ItemForward>,
    pub sim: Matrix,
}

pub fn forward_batch(params: &ModelParams, batch: &Batch) -> Result<BatchForward, TrainError> {
    let w = params.weights;
    let queries = batch
        .queries
        .iter()
        .map(|q| forward_item(params, q.as_ref(), (w.w1, w.w2)))
        .collect::<Result<Vec<_>, _>>()?;
    let candidates = batch
        .candidates
        .iter()
        .map(|c| forward_item(params, c.as_ref(), (w.w3, w.w4)))
        .collect::<Result<Vec<_>, _>>()?;
    let mut sim = Matrix::zeros(queries.len(), candidates.len());
    for (i, q) in queries.iter().enumerate() {
        for (j, c) in candidates.iter().enumerate() {
            sim.set(i, j, dot(&q.embedding, &c.embedding));
        }
    }
    Ok(BatchForward { queries, candidates, sim })
}

/// Loss only (used by finite differences).
pub fn batch_loss(params: &ModelParams, batch: &Batch) -> Result<f64, TrainError> {
    let fwd = forward_batch(params, batch)?;
    Ok(contrastive_loss_with_negatives(&fwd.sim, params.temperature())?.0)
}

/// Fraction of queries whose highest-similarity candidate is their positive.
pub fn in_batch_accuracy(sim: &Matrix) -> f64 {
    let n = sim.rows();
    let correct = (0..n)
        .filter(|&i| {
            let best = (0..sim.cols()).fold(0, |b, j| if sim.get(i, j) > sim.get(i, b) { j } else { b });
            best == i
        })
        .count();
    correct as f64 / n.max(1) as f64
}

fn backward_item(
    params: &ModelParams,
    fwd: &ItemForward,
    grad_embedding: &[f64],
    weight_slots: (usize, usize),
    grads: &mut Gradients,
) {
    let dim = params.dim();
    let (grad_image, grad_text) = match params.mode {
        StoreMode::ScoreFusion => {
            let (wa, wb) = (weight_at(params, weight_slots.0), weight_at(params, weight_slots.1));
            let gi = fwd.image.as_ref().map(|p| {
                grads.weights[weight_slots.0] += dot(grad_embedding, &p.output);
                grad_embedding.iter().map(|g| g * wa).collect::<Vec<_>>()
            });
            let gt = fwd.text.as_ref().map(|p| {
                grads.weights[weight_slots.1] += dot(grad_embedding, &p.output);
                grad_embedding.iter().map(|g| g * wb).collect::<Vec<_>>()
            });
            (gi, gt)
        }
        StoreMode::FeatureFusion => {
            let fused = fwd.fused.as_ref().expect("feature mode forward keeps the fused projection");
            let du = normalize_backward(&fused.output, fused.pre_norm, grad_embedding);
            grads.fusion_proj.add_outer(&du, &fused.input, 1.0);
            let dx = params.fusion_proj.matvec_transposed(&du);
            let gi = fwd.image.as_ref().map(|_| dx[..dim].to_vec());
            let gt = fwd.text.as_ref().map(|_| dx[dim..].to_vec());
            (gi, gt)
        }
    };
    if let (Some(p), Some(g)) = (&fwd.image, grad_image) {
        let du = normalize_backward(&p.output, p.pre_norm, &g);
        grads.image_proj.add_outer(&du, &p.input, 1.0);
    }
    if let (Some(p), Some(g)) = (&fwd.text, grad_text) {
        let du = normalize_backward(&p.output, p.pre_norm, &g);
        grads.text_proj.add_outer(&du, &p.input, 1.0);
    }
}

fn weight_at(params: &ModelParams, slot: usize) -> f64 {
    let w = params.weights;
    [w.w1, w.w2, w.w3, w.w4][slot]
}

/// Loss, in-batch accuracy and analytic gradients.
pub fn batch_loss_and_grad(params: &ModelParams, batch: &Batch) -> Result<(f64, f64, Gradients), TrainError> {
    let fwd = forward_batch(params, batch)?;
    let (loss, grad_sim) = contrastive_loss_with_negatives(&fwd.sim, params.temperature())?;
    let mut grads = Gradients::zeros_like(params);
    // logits = sim · exp(logit_scale)
    grads.logit_scale = dot(grad_sim.as_slice(), fwd.sim.as_slice());
    let dim = params.dim();
    for (i, q) in fwd.queries.iter().enumerate() {
        let mut g = vec![0.0; dim];
        for (j, c) in fwd.candidates.iter().enumerate() {
            let s = grad_sim.get(i, j);
            for (gk, ck) in g.iter_mut().zip(&c.embedding) {
                *gk += s * ck;
            }
        }
        backward_item(params, q, &g, (0, 1), &mut grads);
    }
    for (j, c) in fwd.candidates.iter().enumerate() {
        let mut g = vec![0.0; dim];
        for (i, q) in fwd.queries.iter().enumerate() {
            let s = grad_sim.get(i, j);
            for (gk, qk) in g.iter_mut().zip(&q.embedding) {
                *gk += s * qk;
            }
        }
        backward_item(params, c, &g, (2, 3), &mut grads);
    }
    Ok((loss, in_batch_accuracy(&fwd.sim), grads))
}
