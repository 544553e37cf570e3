//! Large-margin cosine loss.
//!
//! `L = -1/N Σ_i log( e^{b(cos θ_{y_i,i} - m)} / (e^{b(cos θ_{y_i,i} - m)} + Σ_{j≠y_i} e^{b cos θ_{j,i}}) )`
//! with `cos θ_{j,i}` the dot product of the unit-norm class column `j`
//! and the unit-norm embedding `i`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamId};
use crate::real::Real;
use crate::tensor::Tensor;

/// How the logit scale `b` is chosen.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode", content = "value")]
pub enum ScaleMode {
    /// A constant scale.
    Fixed(f64),
    /// `b = ||z_i||` per sample, detached from the gradient.
    EmbeddingNorm,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CosFaceConfig {
    pub margin: f64,
    pub scale: ScaleMode,
}

impl Default for CosFaceConfig {
    fn default() -> Self {
        Self { margin: 0.35, scale: ScaleMode::Fixed(64.0) }
    }
}

impl CosFaceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.margin) {
            return Err(Error::Config(format!("margin must be in [0, 1), got {}", self.margin)));
        }
        if let ScaleMode::Fixed(b) = self.scale {
            if !(b > 0.0) {
                return Err(Error::Config(format!("scale must be positive, got {b}")));
            }
        }
        Ok(())
    }
}

/// Class weights `[d, classes]` with the loss hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CosFaceHead {
    pub weight: ParamId,
    pub config: CosFaceConfig,
}

/// Scales each embedding row to unit norm; zero rows are a numeric error.
pub fn l2_normalize_embedding<T: Real>(g: &mut Graph<T>, z: Var) -> Result<Var> {
    g.l2_normalize(z)
}

/// Cosine similarities `[N, classes]` between embeddings and class columns.
pub fn cosine_logits<T: Real>(g: &mut Graph<T>, embeddings: Var, weight: Var) -> Result<Var> {
    let z = l2_normalize_embedding(g, embeddings)?;
    let wt = g.transpose(weight)?;
    let wn = g.l2_normalize(wt)?;
    let w = g.transpose(wn)?;
    g.matmul(z, w)
}

fn check_labels(labels: &[usize], n: usize, classes: usize) -> Result<()> {
    if labels.len() != n {
        return Err(Error::Contract(format!("{} labels for a batch of {n}", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Contract(format!("label {bad} outside [0, {classes})")));
    }
    Ok(())
}

/// Margin-adjusted, scaled logits `b·(cos - m·onehot)`.
pub fn margin_logits<T: Real>(
    g: &mut Graph<T>,
    cos: Var,
    embeddings: Var,
    labels: &[usize],
    config: &CosFaceConfig,
) -> Result<Var> {
    let s = g.shape(cos).to_vec();
    let (n, c) = (s[0], s[1]);
    check_labels(labels, n, c)?;
    let mut shift = vec![T::zero(); n * c];
    for (i, &l) in labels.iter().enumerate() {
        shift[i * c + l] = T::of(config.margin);
    }
    let shift = g.constant(Tensor::new(&[n, c], shift)?);
    let adjusted = g.sub(cos, shift)?;
    match config.scale {
        ScaleMode::Fixed(b) => Ok(g.scale(adjusted, T::of(b))),
        ScaleMode::EmbeddingNorm => {
            let z = g.value(embeddings);
            let norms: Vec<T> = (0..n).map(|i| z.row(i).iter().map(|&v| v * v).sum::<T>().sqrt()).collect();
            let b = g.constant(Tensor::new(&[n, 1], norms)?);
            let b = g.broadcast(b, &[n, c])?;
            g.mul(adjusted, b)
        }
    }
}

/// Mean CosFace loss over the batch.
pub fn cosface_loss<T: Real>(
    g: &mut Graph<T>,
    p: &Bound,
    head: &CosFaceHead,
    embeddings: Var,
    labels: &[usize],
) -> Result<Var> {
    let cos = cosine_logits(g, embeddings, p[head.weight])?;
    loss_from_cosines(g, cos, embeddings, labels, &head.config)
}

pub fn loss_from_cosines<T: Real>(
    g: &mut Graph<T>,
    cos: Var,
    embeddings: Var,
    labels: &[usize],
    config: &CosFaceConfig,
) -> Result<Var> {
    let logits = margin_logits(g, cos, embeddings, labels, config)?;
    let logp = g.log_softmax(logits);
    let picked = g.pick(logp, labels)?;
    let m = g.mean(picked);
    Ok(g.scale(m, -T::one()))
}

/// Mixup objective `λ·L(labels_a) + (1-λ)·L(labels_b)`.
pub fn cosface_loss_mixed<T: Real>(
    g: &mut Graph<T>,
    p: &Bound,
    head: &CosFaceHead,
    embeddings: Var,
    labels_a: &[usize],
    labels_b: &[usize],
    lambda: f64,
) -> Result<Var> {
    let cos = cosine_logits(g, embeddings, p[head.weight])?;
    let la = loss_from_cosines(g, cos, embeddings, labels_a, &head.config)?;
    if lambda >= 1.0 {
        return Ok(la);
    }
    let lb = loss_from_cosines(g, cos, embeddings, labels_b, &head.config)?;
    let la = g.scale(la, T::of(lambda));
    let lb = g.scale(lb, T::of(1.0 - lambda));
    g.add(la, lb)
}
