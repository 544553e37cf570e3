//! One optimization step: forward, CosFace loss, backward, AdamW update.

use alloc::format;
use alloc::vec::Vec;

use rand::RngCore;

use crate::autodiff::Graph;
use crate::cosface::{cosface_loss_mixed, CosFaceConfig, CosFaceHead};
use crate::error::{Error, Result};
use crate::model::FaceModel;
use crate::optim::{global_norm, AdamW};
use crate::real::Real;
use crate::tensor::Tensor;
use crate::vit::Mode;

/// Mixup partner labels and the weight of the own labels.
#[derive(Clone, Copy, Debug)]
pub struct MixTarget<'a> {
    pub partner_labels: &'a [usize],
    pub lambda: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    /// Samples whose highest cosine is their own class.
    pub correct: usize,
    pub grad_norm: f64,
}

/// Index of the largest value in each row.
pub fn argmax_rows<T: Real>(t: &Tensor<T>) -> Vec<usize> {
    let cols = t.shape()[t.shape().len() - 1];
    t.data()
        .chunks(cols)
        .map(|row| {
            let mut best = 0;
            for (j, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Runs one training step. A non-finite loss or gradient aborts before the
/// parameters change, with the learning rate and gradient norm in the error.
#[allow(clippy::too_many_arguments)]
pub fn train_step<T: Real>(
    model: &mut FaceModel<T>,
    opt: &mut AdamW<T>,
    loss_cfg: &CosFaceConfig,
    images: Tensor<T>,
    labels: &[usize],
    mix: Option<MixTarget<'_>>,
    lr: f64,
    rng: &mut dyn RngCore,
) -> Result<StepStats> {
    let weight = model.head.ok_or_else(|| Error::Config("training needs a model with a classification head".into()))?;
    let head = CosFaceHead { weight, config: *loss_cfg };
    let mut g = Graph::new();
    let p = model.store.bind(&mut g);
    let x = g.constant(images);
    let out = model.forward(&mut g, &p, x, &mut Mode::Train(rng))?;
    let (partner, lambda) = match mix {
        Some(m) => (m.partner_labels, m.lambda),
        None => (labels, 1.0),
    };
    let loss = cosface_loss_mixed(&mut g, &p, &head, out.embedding, labels, partner, lambda)?;
    let loss_value = g.value(loss).data()[0].as_f64();
    let emb = g.value(out.embedding).clone();
    let w = model.store.get(weight).clone();
    let correct = {
        let mut eg = Graph::new();
        let e = eg.constant(emb);
        let wv = eg.constant(w);
        let cos = crate::cosface::cosine_logits(&mut eg, e, wv)?;
        argmax_rows(eg.value(cos)).iter().zip(labels).filter(|(a, b)| a == b).count()
    };
    if !loss_value.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss {loss_value} at lr {lr}")));
    }
    g.backward(loss)?;
    let grads = model.store.gradients(&g, &p);
    let grad_norm = global_norm(&grads);
    if !grad_norm.is_finite() {
        return Err(Error::Numeric(format!("non-finite gradient norm at lr {lr} (loss {loss_value})")));
    }
    opt.step(&mut model.store, &grads, lr)?;
    Ok(StepStats { loss: loss_value, correct, grad_norm })
}
