//! Batched eval-mode passes: embeddings, landmarks, attention and loss.

use partvit_core::cosface::{cosface_loss, cosine_logits, CosFaceConfig, CosFaceHead};
use partvit_core::eval::{attention_records, resolve_layer, AttentionRecord};
use partvit_core::train::argmax_rows;
use partvit_core::{FaceModel, Graph, Mode, Tensor};
use serde::{Deserialize, Serialize};

use crate::dataset::Sample;
use crate::error::{Error, Result};

/// Stacks `[3,H,W]` images into `[N,3,H,W]`.
pub fn stack(images: &[&Tensor<f32>]) -> Result<Tensor<f32>> {
    let first = images.first().ok_or_else(|| Error::Usage("cannot stack an empty batch".into()))?;
    let mut shape = vec![images.len()];
    shape.extend_from_slice(first.shape());
    let mut data = Vec::with_capacity(images.len() * first.len());
    for im in images {
        if im.shape() != first.shape() {
            return Err(Error::Usage(format!("image shapes {:?} and {:?} differ", first.shape(), im.shape())));
        }
        data.extend_from_slice(im.data());
    }
    Ok(Tensor::new(&shape, data)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbeddingRecord {
    pub id: String,
    pub label: usize,
    /// Unit norm.
    pub embedding: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LandmarkRecord {
    pub id: String,
    pub landmarks: Vec<[f64; 2]>,
}

pub fn embeddings(model: &FaceModel<f32>, samples: &[Sample], batch: usize) -> Result<Vec<EmbeddingRecord>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch.max(1)) {
        let x = stack(&chunk.iter().map(|s| &s.image).collect::<Vec<_>>())?;
        let e = model.embed(&x)?;
        for (i, s) in chunk.iter().enumerate() {
            let row: Vec<f64> = e.row(i).iter().map(|&v| v as f64).collect();
            out.push(EmbeddingRecord {
                id: s.id.clone(),
                label: s.label,
                embedding: partvit_core::eval::normalized(&row)?,
            });
        }
    }
    Ok(out)
}

pub fn landmarks(model: &FaceModel<f32>, samples: &[Sample], batch: usize) -> Result<Vec<LandmarkRecord>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch.max(1)) {
        let x = stack(&chunk.iter().map(|s| &s.image).collect::<Vec<_>>())?;
        let lm = model.landmarks(&x)?;
        let r = lm.shape()[1];
        for (i, s) in chunk.iter().enumerate() {
            let d = &lm.data()[i * r * 2..(i + 1) * r * 2];
            out.push(LandmarkRecord {
                id: s.id.clone(),
                landmarks: d.chunks(2).map(|p| [p[0] as f64, p[1] as f64]).collect(),
            });
        }
    }
    Ok(out)
}

/// Per-head attention of one image at `layer` (negative counts from the
/// end), with class-token maps placed at the landmarks for part models.
pub fn attention(model: &FaceModel<f32>, image: &Tensor<f32>, layer: i64) -> Result<Vec<AttentionRecord>> {
    let layer = resolve_layer(model.cfg.depth, layer)?;
    let mut g = Graph::new();
    let p = model.store.bind_frozen(&mut g);
    let x = stack(&[image])?;
    let xv = g.constant(x);
    let out = model.forward(&mut g, &p, xv, &mut Mode::Eval)?;
    let a = g.value(out.attention[layer]);
    let (heads, tokens) = (a.shape()[1], a.shape()[2]);
    let data: Vec<f64> = a.data().iter().map(|&v| v as f64).collect();
    let lms: Option<Vec<[f64; 2]>> =
        out.landmarks.map(|l| g.value(l).data().chunks(2).map(|c| [c[0] as f64, c[1] as f64]).collect());
    Ok(attention_records(layer, heads, tokens, &data, lms.as_deref())?)
}

/// Mean CosFace loss and classification accuracy in eval mode.
pub fn loss_and_accuracy(
    model: &FaceModel<f32>,
    loss: &CosFaceConfig,
    samples: &[Sample],
    batch: usize,
) -> Result<(f64, f64)> {
    let weight = model.head.ok_or_else(|| Error::Usage("model has no classification head".into()))?;
    let head = CosFaceHead { weight, config: *loss };
    let (mut total, mut correct) = (0.0, 0usize);
    for chunk in samples.chunks(batch.max(1)) {
        let x = stack(&chunk.iter().map(|s| &s.image).collect::<Vec<_>>())?;
        let labels: Vec<usize> = chunk.iter().map(|s| s.label).collect();
        let mut g = Graph::new();
        let p = model.store.bind_frozen(&mut g);
        let xv = g.constant(x);
        let out = model.forward(&mut g, &p, xv, &mut Mode::Eval)?;
        let l = cosface_loss(&mut g, &p, &head, out.embedding, &labels)?;
        total += g.value(l).data()[0] as f64 * chunk.len() as f64;
        let cos = cosine_logits(&mut g, out.embedding, p[weight])?;
        correct += argmax_rows(g.value(cos)).iter().zip(&labels).filter(|(a, b)| a == b).count();
    }
    let n = samples.len().max(1) as f64;
    Ok((total / n, correct as f64 / n))
}
