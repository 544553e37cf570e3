//! On-disk datasets: one directory per identity holding PNG images, a
//! `manifest.json` listing the splits, and optionally `parts.jsonl` with
//! ground-truth part centres.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use partvit_core::synth::{self, SyntheticFaceSpec};
use partvit_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MANIFEST: &str = "manifest.json";
pub const PARTS: &str = "parts.jsonl";

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Splits {
    pub train: Vec<String>,
    pub val: Vec<String>,
}

/// Image ids have the form `<identity dir>/<image stem>`; labels are the
/// rank of the identity directory name among all identities.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub splits: Splits,
    pub identities: usize,
}

impl Manifest {
    pub fn read(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: Manifest =
            serde_json::from_str(&text).map_err(|e| Error::format(&path, Some(e.line()), e.to_string()))?;
        m.labels().map_err(|msg| Error::format(&path, None, msg))?;
        Ok(m)
    }

    pub fn write(&self, root: &Path) -> Result<()> {
        let path = root.join(MANIFEST);
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }

    /// Identity directory name to label.
    pub fn labels(&self) -> std::result::Result<BTreeMap<String, usize>, String> {
        let mut names = BTreeMap::new();
        for id in self.splits.train.iter().chain(&self.splits.val) {
            let dir = identity_of(id).ok_or_else(|| format!("image id `{id}` is not <identity>/<image>"))?;
            names.insert(dir.to_string(), 0);
        }
        if names.len() != self.identities {
            return Err(format!("{} identity directories listed, manifest says {}", names.len(), self.identities));
        }
        for (i, v) in names.values_mut().enumerate() {
            *v = i;
        }
        Ok(names)
    }

    pub fn split(&self, name: &str) -> Result<&[String]> {
        match name {
            "train" => Ok(&self.splits.train),
            "val" => Ok(&self.splits.val),
            other => Err(Error::Usage(format!("unknown split `{other}` (expected train or val)"))),
        }
    }
}

pub fn identity_of(id: &str) -> Option<&str> {
    let (dir, stem) = id.split_once('/')?;
    (!dir.is_empty() && !stem.is_empty() && !stem.contains('/')).then_some(dir)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub label: usize,
    /// `[3,H,W]` in `[0,1]`.
    pub image: Tensor<f32>,
}

pub fn image_path(root: &Path, id: &str) -> PathBuf {
    root.join(format!("{id}.png"))
}

/// Loads one split of a dataset root.
pub fn load_split(root: &Path, split: &str) -> Result<(Manifest, Vec<Sample>)> {
    let manifest = Manifest::read(root)?;
    let labels = manifest.labels().map_err(|m| Error::format(root.join(MANIFEST), None, m))?;
    let samples = manifest
        .split(split)?
        .iter()
        .map(|id| {
            let dir = identity_of(id).expect("validated");
            Ok(Sample { id: id.clone(), label: labels[dir], image: read_png(&image_path(root, id))? })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, samples))
}

/// Decodes an 8-bit grey, grey-alpha, RGB or RGBA PNG into `[3,H,W]`.
pub fn read_png(path: &Path) -> Result<Tensor<f32>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder.read_info().map_err(|e| Error::format(path, None, e.to_string()))?;
    let size = reader.output_buffer_size().ok_or_else(|| Error::format(path, None, "image too large"))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::format(path, None, e.to_string()))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let stride = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        other => return Err(Error::format(path, None, format!("unsupported colour type {other:?}"))),
    };
    let mut out = vec![0f32; 3 * h * w];
    for i in 0..h * w {
        let px = &buf[i * stride..(i + 1) * stride];
        for c in 0..3 {
            let v = if stride >= 3 { px[c] } else { px[0] };
            out[c * h * w + i] = v as f32 / 255.0;
        }
    }
    Ok(Tensor::new(&[3, h, w], out)?)
}

/// Encodes a `[3,H,W]` image in `[0,1]` as 8-bit RGB.
pub fn write_png(path: &Path, image: &Tensor<f32>) -> Result<()> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::Usage(format!("expected a [3,H,W] image, got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let d = image.data();
    let mut bytes = Vec::with_capacity(3 * h * w);
    for i in 0..h * w {
        for c in 0..3 {
            bytes.push((d[c * h * w + i].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| Error::format(path, None, e.to_string()))?;
    writer.write_image_data(&bytes).map_err(|e| Error::format(path, None, e.to_string()))?;
    writer.finish().map_err(|e| Error::format(path, None, e.to_string()))
}

/// Ground-truth part centres of one image, normalized `(x, y)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartRecord {
    pub id: String,
    pub parts: Vec<[f64; 2]>,
}

/// Reads a JSON-lines file, naming the offending line on failure. Blank
/// lines are skipped.
pub fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::format(path, Some(i + 1), e.to_string()))?);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        let line = serde_json::to_string(r).expect("record serializes");
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_parts(root: &Path) -> Result<BTreeMap<String, Vec<[f64; 2]>>> {
    let path = root.join(PARTS);
    let recs: Vec<PartRecord> = read_jsonl(&path)?;
    Ok(recs.into_iter().map(|r| (r.id, r.parts)).collect())
}

pub fn synthetic_id(identity: usize, index: usize) -> String {
    format!("{identity:04}/{index:04}")
}

/// Writes a synthetic dataset: the last `val_per_identity` images of every
/// identity form the validation split.
pub fn write_synthetic(spec: &SyntheticFaceSpec, root: &Path, val_per_identity: usize) -> Result<Manifest> {
    spec.validate()?;
    if val_per_identity >= spec.images_per_identity {
        return Err(Error::Config(format!(
            "val_per_identity ({val_per_identity}) must leave training images (have {})",
            spec.images_per_identity
        )));
    }
    let mut splits = Splits::default();
    let mut parts = Vec::with_capacity(spec.len());
    for identity in 0..spec.num_identities {
        let dir = root.join(format!("{identity:04}"));
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for index in 0..spec.images_per_identity {
            let s = synth::generate_one(spec, identity, index);
            let id = synthetic_id(identity, index);
            write_png(&image_path(root, &id), &s.image)?;
            parts.push(PartRecord { id: id.clone(), parts: s.parts.to_vec() });
            if index >= spec.images_per_identity - val_per_identity {
                splits.val.push(id);
            } else {
                splits.train.push(id);
            }
        }
    }
    let manifest = Manifest { splits, identities: spec.num_identities };
    manifest.write(root)?;
    write_jsonl(&root.join(PARTS), &parts)?;
    Ok(manifest)
}
