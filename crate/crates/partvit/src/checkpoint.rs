//! Checkpoint directories: `manifest.json` describing named tensors plus a
//! flat little-endian `f32` blob `weights.bin`. Optimizer moments, when
//! saved, live in `optimizer.bin` with the same layout (first moments, then
//! second moments), so the weight payload is exactly four bytes per scalar.

use std::fs;
use std::path::Path;

use partvit_core::cosface::CosFaceConfig;
use partvit_core::optim::{AdamW, AdamWConfig};
use partvit_core::tensor::numel;
use partvit_core::{DType, DecayGroup, FaceModel, ModelConfig, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.json";
pub const WEIGHTS: &str = "weights.bin";
pub const OPTIMIZER: &str = "optimizer.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: DType,
    /// Byte offset into the blob.
    pub offset: u64,
    pub group: DecayGroup,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerEntry {
    pub steps: u64,
    pub config: AdamWConfig,
    pub file: String,
}

/// Position of the training stream; all training randomness is keyed by
/// these values.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RngState {
    pub seed: u64,
    pub epoch: u64,
    pub step: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub model: ModelConfig,
    pub num_classes: usize,
    pub loss: CosFaceConfig,
    pub tensors: Vec<TensorEntry>,
    pub payload_bytes: u64,
    pub optimizer: Option<OptimizerEntry>,
    pub rng: RngState,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub manifest: CheckpointManifest,
    pub model: FaceModel<f32>,
    pub optimizer: Option<AdamW<f32>>,
}

fn to_bytes<'a>(tensors: impl Iterator<Item = &'a Tensor<f32>>) -> Vec<u8> {
    tensors.flat_map(|t| t.data().iter().flat_map(|v| v.to_le_bytes())).collect()
}

pub fn save(
    dir: &Path,
    model: &FaceModel<f32>,
    loss: &CosFaceConfig,
    optimizer: Option<&AdamW<f32>>,
    rng: RngState,
) -> Result<CheckpointManifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut offset = 0u64;
    let tensors: Vec<TensorEntry> = model
        .store
        .iter()
        .map(|(_, p)| {
            let e = TensorEntry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                dtype: DType::Float32,
                offset,
                group: p.group,
            };
            offset += 4 * p.value.len() as u64;
            e
        })
        .collect();
    let weights = to_bytes(model.store.iter().map(|(_, p)| &p.value));
    let path = dir.join(WEIGHTS);
    fs::write(&path, &weights).map_err(|e| Error::io(&path, e))?;
    let optimizer = match optimizer {
        Some(opt) => {
            let bytes = to_bytes(opt.first.iter().chain(&opt.second));
            let path = dir.join(OPTIMIZER);
            fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
            Some(OptimizerEntry { steps: opt.steps, config: opt.config, file: OPTIMIZER.into() })
        }
        None => None,
    };
    let manifest = CheckpointManifest {
        format_version: FORMAT_VERSION,
        model: model.cfg.clone(),
        num_classes: model.num_classes,
        loss: *loss,
        tensors,
        payload_bytes: offset,
        optimizer,
        rng,
    };
    let path = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

fn read_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let raw: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Error::format(&path, Some(e.line()), e.to_string()))?;
    let version = raw.get("format_version").and_then(|v| v.as_u64());
    if version != Some(FORMAT_VERSION as u64) {
        return Err(Error::checkpoint(
            dir,
            format!("format version {version:?} is not supported (expected {FORMAT_VERSION})"),
        ));
    }
    serde_json::from_value(raw).map_err(|e| Error::checkpoint(dir, e.to_string()))
}

fn check_layout(dir: &Path, m: &CheckpointManifest) -> Result<()> {
    let mut spans: Vec<(u64, u64, &str)> =
        m.tensors.iter().map(|t| (t.offset, t.offset + 4 * numel(&t.shape) as u64, t.name.as_str())).collect();
    spans.sort();
    for w in spans.windows(2) {
        if w[1].0 < w[0].1 {
            return Err(Error::checkpoint(dir, format!("tensors `{}` and `{}` overlap", w[0].2, w[1].2)));
        }
    }
    if let Some(last) = spans.last() {
        if last.1 > m.payload_bytes {
            return Err(Error::checkpoint(dir, format!("tensor `{}` extends past the payload", last.2)));
        }
    }
    if let Some(t) = m.tensors.iter().find(|t| t.dtype != DType::Float32) {
        return Err(Error::checkpoint(dir, format!("tensor `{}` is not float32", t.name)));
    }
    Ok(())
}

fn read_blob(dir: &Path, file: &str, expected: u64) -> Result<Vec<u8>> {
    let path = dir.join(file);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    if bytes.len() as u64 != expected {
        let kind = if (bytes.len() as u64) < expected { "truncated" } else { "oversized" };
        return Err(Error::checkpoint(
            dir,
            format!("{file} is {kind}: expected {expected} bytes, found {}", bytes.len()),
        ));
    }
    Ok(bytes)
}

fn slice_tensor(bytes: &[u8], offset: u64, shape: &[usize]) -> Result<Tensor<f32>> {
    let start = offset as usize;
    let n = numel(shape);
    let data =
        bytes[start..start + 4 * n].chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    Ok(Tensor::new(shape, data)?)
}

/// Loads a checkpoint, verifying version, layout, payload size and that
/// the tensor names match the recorded architecture exactly.
pub fn load(dir: &Path) -> Result<Checkpoint> {
    let manifest = read_manifest(dir)?;
    check_layout(dir, &manifest)?;
    let bytes = read_blob(dir, WEIGHTS, manifest.payload_bytes)?;
    let named = manifest
        .tensors
        .iter()
        .map(|t| Ok((t.name.clone(), slice_tensor(&bytes, t.offset, &t.shape)?)))
        .collect::<Result<Vec<_>>>()?;
    let model = FaceModel::from_named(manifest.model.clone(), manifest.num_classes, named).map_err(|e| match e {
        partvit_core::Error::UnknownKey(n) => Error::checkpoint(dir, format!("unknown tensor `{n}`")),
        partvit_core::Error::MissingKey(n) => Error::checkpoint(dir, format!("missing tensor `{n}`")),
        other => Error::checkpoint(dir, other.to_string()),
    })?;
    let optimizer = match &manifest.optimizer {
        Some(entry) => {
            let blob = read_blob(dir, &entry.file, 2 * manifest.payload_bytes)?;
            let mut opt = AdamW::new(entry.config, &model.store);
            for (i, t) in manifest.tensors.iter().enumerate() {
                opt.first[i] = slice_tensor(&blob, t.offset, &t.shape)?;
                opt.second[i] = slice_tensor(&blob, manifest.payload_bytes + t.offset, &t.shape)?;
            }
            opt.steps = entry.steps;
            Some(opt)
        }
        None => None,
    };
    Ok(Checkpoint { manifest, model, optimizer })
}

/// Loads a checkpoint that must match `cfg`; a mismatch names every
/// offending tensor.
pub fn load_expecting(dir: &Path, cfg: &ModelConfig) -> Result<Checkpoint> {
    let manifest = read_manifest(dir)?;
    let expected = FaceModel::<f32>::new(cfg.clone(), manifest.num_classes, 0)?;
    let mut problems = Vec::new();
    for t in &manifest.tensors {
        match expected.store.by_name(&t.name) {
            None => problems.push(format!("`{}` is not part of the requested model", t.name)),
            Some(e) if e.shape() != t.shape.as_slice() => {
                problems.push(format!("`{}` has shape {:?}, expected {:?}", t.name, t.shape, e.shape()))
            }
            _ => {}
        }
    }
    for (_, p) in expected.store.iter() {
        if !manifest.tensors.iter().any(|t| t.name == p.name) {
            problems.push(format!("`{}` is missing", p.name));
        }
    }
    if !problems.is_empty() {
        return Err(Error::checkpoint(dir, format!("config mismatch: {}", problems.join("; "))));
    }
    let ck = load(dir)?;
    if &ck.model.cfg != cfg {
        let a = serde_json::to_value(&ck.model.cfg).expect("config serializes");
        let b = serde_json::to_value(cfg).expect("config serializes");
        let fields: Vec<&str> = a
            .as_object()
            .expect("config is an object")
            .iter()
            .filter(|(k, v)| b.get(k.as_str()) != Some(v))
            .map(|(k, _)| k.as_str())
            .collect();
        return Err(Error::checkpoint(dir, format!("config mismatch in {}", fields.join(", "))));
    }
    Ok(ck)
}
