//! The `partvit` command-line tool.
//!
//! Exit codes: 0 on success, 1 on runtime failure, 2 on usage or
//! validation errors (including missing input files).

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use partvit_core::eval::{
    aggregate_overlap, assign_folds, cosine, forward_error, overlap_rate, rank1_identification, resolve_layer,
    tar_at_far, verification_accuracy_kfold, ScoredPair,
};
use partvit_core::synth::{SyntheticFaceSpec, EYES};
use partvit_core::{PosEncoding, Preset, Variant};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::checkpoint::{self, Checkpoint};
use crate::config::TrainConfig;
use crate::dataset::{self, read_jsonl, write_jsonl, Manifest, Sample};
use crate::error::{Error, Result};
use crate::inference::{self, EmbeddingRecord, LandmarkRecord};
use crate::trainer::{self, TrainOptions};

pub const LOG_ENV: &str = "PARTVIT_LOG";

#[derive(Debug, Parser)]
#[command(name = "partvit", version, about = "Part-based face vision transformers at desk scale")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic identity dataset.
    Generate(GenerateArgs),
    /// Train a model and write metrics and a checkpoint.
    Train(TrainArgs),
    /// Dump unit-norm embeddings as JSON lines.
    Extract(DumpArgs),
    /// Dump predicted landmarks as JSON lines.
    Landmarks(DumpArgs),
    /// Dump per-head attention maps.
    Attention(AttentionArgs),
    /// Compute an evaluation metric from dumps.
    Evaluate(EvaluateArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum PresetArg {
    FvitB,
    FvitS,
    FvitTiny,
}

impl From<PresetArg> for Preset {
    fn from(p: PresetArg) -> Self {
        match p {
            PresetArg::FvitB => Preset::FvitB,
            PresetArg::FvitS => Preset::FvitS,
            PresetArg::FvitTiny => Preset::FvitTiny,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum VariantArg {
    Holistic,
    Part,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum PosEncArg {
    Trainable,
    Cosine,
    Coordinate,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Output dataset directory (created if absent).
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// JSON generator spec; flags below override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub identities: Option<usize>,
    #[arg(long)]
    pub images_per_identity: Option<usize>,
    #[arg(long)]
    pub image_size: Option<usize>,
    /// Images per identity held out for validation.
    #[arg(long, default_value_t = 10)]
    pub val_per_identity: usize,
}

#[derive(Debug, Args)]
pub struct ModelFlags {
    /// JSON training configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "fvit-tiny")]
    pub preset: PresetArg,
    #[arg(long, value_enum)]
    pub variant: Option<VariantArg>,
    /// Number of patches R (a square number).
    #[arg(long)]
    pub patches: Option<usize>,
    #[arg(long = "pos-enc", value_enum)]
    pub pos_enc: Option<PosEncArg>,
    #[arg(long)]
    pub bottleneck_violation: bool,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub workers: Option<usize>,
    /// Dotted `key=value` override, e.g. `schedule.base_lr=5e-4`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

impl ModelFlags {
    pub fn resolve(&self) -> Result<TrainConfig> {
        let mut overrides = self.overrides.clone();
        if let Some(v) = self.variant {
            let v = match v {
                VariantArg::Holistic => Variant::Holistic,
                VariantArg::Part => Variant::Part,
            };
            overrides.push(format!("model.variant={}", serde_json::to_string(&v).expect("enum")));
        }
        if let Some(p) = self.pos_enc {
            let p = match p {
                PosEncArg::Trainable => PosEncoding::Trainable,
                PosEncArg::Cosine => PosEncoding::Cosine,
                PosEncArg::Coordinate => PosEncoding::Coordinate,
            };
            overrides.push(format!("model.pos_encoding={}", serde_json::to_string(&p).expect("enum")));
        }
        if self.bottleneck_violation {
            overrides.push("model.bottleneck_violation=true".into());
        }
        if let Some(e) = self.epochs {
            overrides.push(format!("schedule.epochs={e}"));
        }
        if let Some(s) = self.seed {
            overrides.push(format!("seed={s}"));
        }
        if let Some(w) = self.workers {
            overrides.push(format!("workers={w}"));
        }
        if self.patches.is_none() {
            return TrainConfig::resolve(self.preset.into(), self.config.as_deref(), &overrides);
        }
        // the patch count also fixes the patch size, so apply it last
        let mut cfg = TrainConfig::resolve(self.preset.into(), self.config.as_deref(), &[])?;
        let mut doc = serde_json::to_value(&cfg).expect("config serializes");
        for o in &overrides {
            crate::config::apply_override(&mut doc, o)?;
        }
        cfg = serde_json::from_value(doc).map_err(|e| Error::Config(e.to_string()))?;
        if let Some(r) = self.patches {
            cfg.model = cfg.model.with_patches(r)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset root with `manifest.json`.
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for metrics and checkpoints.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub model: ModelFlags,
    /// Also checkpoint every N epochs.
    #[arg(long, default_value_t = 0)]
    pub checkpoint_every: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    All,
}

#[derive(Debug, Args)]
pub struct DumpArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Output JSON-lines file.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "all")]
    pub split: SplitArg,
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
    /// Accepted for uniformity; dumps are deterministic.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct AttentionArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for `attention.jsonl` and `attention.f32`.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "val")]
    pub split: SplitArg,
    /// Layer index; negative values count from the last layer.
    #[arg(long, default_value_t = -1, allow_hyphen_values = true)]
    pub layer: i64,
    /// Number of images to dump.
    #[arg(long, default_value_t = 4)]
    pub limit: usize,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum MetricArg {
    Verification,
    TarAtFar,
    Rank1,
    Overlap,
    ForwardError,
}

impl MetricArg {
    fn name(self) -> &'static str {
        match self {
            MetricArg::Verification => "verification_accuracy",
            MetricArg::TarAtFar => "tar_at_far",
            MetricArg::Rank1 => "rank1_identification",
            MetricArg::Overlap => "overlap_rate",
            MetricArg::ForwardError => "forward_error",
        }
    }
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long, value_enum)]
    pub metric: MetricArg,
    /// Embedding dump (verification, TAR@FAR, rank-1 probes).
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    /// Explicit rank-1 gallery dump; default is the first image of every
    /// identity in `--embeddings`.
    #[arg(long)]
    pub gallery: Option<PathBuf>,
    /// Scored pairs, one `{"score", "same"}` object per line.
    #[arg(long)]
    pub pairs: Option<PathBuf>,
    /// Score set `{"genuine": [...], "impostor": [...]}`.
    #[arg(long)]
    pub scores: Option<PathBuf>,
    /// Landmark dump (overlap, forward error).
    #[arg(long)]
    pub landmarks: Option<PathBuf>,
    /// Dataset root; forward error reads its splits and `parts.jsonl`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Checkpoint supplying patch and image size for the overlap rate.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub patch_size: Option<usize>,
    #[arg(long)]
    pub image_size: Option<usize>,
    #[arg(long, default_value_t = 1e-4)]
    pub far: f64,
    #[arg(long, default_value_t = 10)]
    pub folds: usize,
    /// Output file; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

type Rows = Vec<Vec<f64>>;

/// One metric result.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricRecord {
    pub metric: String,
    pub value: f64,
    pub config: Value,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairRecord {
    pub score: f64,
    pub same: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreSet {
    pub genuine: Vec<f64>,
    pub impostor: Vec<f64>,
}

/// Entry point; returns the process exit code.
pub fn main() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    init_logging();
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn init_logging() {
    let _ = env_logger::Builder::from_env(env_logger::Env::new().filter_or(LOG_ENV, "info")).try_init();
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate(a) => generate(&a),
        Command::Train(a) => train(&a),
        Command::Extract(a) => extract(&a),
        Command::Landmarks(a) => landmarks(&a),
        Command::Attention(a) => attention(&a),
        Command::Evaluate(a) => evaluate(&a),
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, Some(e.line()), e.to_string()))
}

fn generate(a: &GenerateArgs) -> Result<()> {
    let mut spec: SyntheticFaceSpec = match &a.config {
        Some(p) => read_json(p)?,
        None => SyntheticFaceSpec::default(),
    };
    spec.seed = a.seed;
    if let Some(n) = a.identities {
        spec.num_identities = n;
    }
    if let Some(n) = a.images_per_identity {
        spec.images_per_identity = n;
    }
    if let Some(n) = a.image_size {
        spec.image_size = n;
    }
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let m = dataset::write_synthetic(&spec, &a.out, a.val_per_identity)?;
    log::info!(
        "wrote {} train and {} val images of {} identities to {}",
        m.splits.train.len(),
        m.splits.val.len(),
        m.identities,
        a.out.display()
    );
    Ok(())
}

fn train(a: &TrainArgs) -> Result<()> {
    let cfg = a.model.resolve()?;
    let (manifest, train_set) = dataset::load_split(&a.data, "train")?;
    let (_, val_set) = dataset::load_split(&a.data, "val")?;
    let opts = TrainOptions { out_dir: Some(a.out.clone()), checkpoint_every: a.checkpoint_every };
    let out = trainer::train(&cfg, &train_set, &val_set, manifest.identities, &opts)?;
    if let Some(last) = out.history.last() {
        log::info!("finished: loss {:.4}, train accuracy {:.3}", last.loss, last.train_acc);
    }
    Ok(())
}

fn samples(data: &Path, split: SplitArg) -> Result<(Manifest, Vec<Sample>)> {
    match split {
        SplitArg::Train => dataset::load_split(data, "train"),
        SplitArg::Val => dataset::load_split(data, "val"),
        SplitArg::All => {
            let (m, mut t) = dataset::load_split(data, "train")?;
            let (_, v) = dataset::load_split(data, "val")?;
            t.extend(v);
            Ok((m, t))
        }
    }
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(())
}

fn extract(a: &DumpArgs) -> Result<()> {
    let ck: Checkpoint = checkpoint::load(&a.checkpoint)?;
    let (_, s) = samples(&a.data, a.split)?;
    let recs = inference::embeddings(&ck.model, &s, a.batch_size)?;
    ensure_parent(&a.out)?;
    write_jsonl(&a.out, &recs)
}

fn landmarks(a: &DumpArgs) -> Result<()> {
    let ck = checkpoint::load(&a.checkpoint)?;
    if ck.model.landmark.is_none() {
        return Err(Error::Usage("landmarks need a part-variant checkpoint".into()));
    }
    let (_, s) = samples(&a.data, a.split)?;
    let recs = inference::landmarks(&ck.model, &s, a.batch_size)?;
    ensure_parent(&a.out)?;
    write_jsonl(&a.out, &recs)
}

/// Attention record as dumped: the image id plus the per-head record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttentionDump {
    pub id: String,
    pub layer: usize,
    pub head: usize,
    pub rows: Vec<Vec<f64>>,
    pub spatial: Vec<f64>,
}

fn attention(a: &AttentionArgs) -> Result<()> {
    let ck = checkpoint::load(&a.checkpoint)?;
    resolve_layer(ck.model.cfg.depth, a.layer).map_err(|e| Error::Usage(e.to_string()))?;
    let (_, s) = samples(&a.data, a.split)?;
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let mut dumps = Vec::new();
    let mut raw = Vec::new();
    for sample in s.iter().take(a.limit) {
        for r in inference::attention(&ck.model, &sample.image, a.layer)? {
            for row in &r.rows {
                raw.extend(row.iter().flat_map(|&v| (v as f32).to_le_bytes()));
            }
            dumps.push(AttentionDump {
                id: sample.id.clone(),
                layer: r.layer,
                head: r.head,
                rows: r.rows,
                spatial: r.spatial,
            });
        }
    }
    write_jsonl(&a.out.join("attention.jsonl"), &dumps)?;
    let raw_path = a.out.join("attention.f32");
    fs::write(&raw_path, raw).map_err(|e| Error::io(&raw_path, e))
}

fn need<'a>(p: &'a Option<PathBuf>, flag: &str, metric: MetricArg) -> Result<&'a Path> {
    p.as_deref().ok_or_else(|| Error::Usage(format!("{} needs --{flag}", metric.name())))
}

fn all_pairs(recs: &[EmbeddingRecord]) -> (Vec<f64>, Vec<f64>) {
    let (mut genuine, mut impostor) = (Vec::new(), Vec::new());
    for i in 0..recs.len() {
        for j in i + 1..recs.len() {
            let s = cosine(&recs[i].embedding, &recs[j].embedding);
            if recs[i].label == recs[j].label {
                genuine.push(s);
            } else {
                impostor.push(s);
            }
        }
    }
    (genuine, impostor)
}

fn check_embeddings(path: &Path, recs: &[EmbeddingRecord]) -> Result<()> {
    let d = recs.first().map(|r| r.embedding.len()).unwrap_or(0);
    for (i, r) in recs.iter().enumerate() {
        if r.embedding.len() != d || d == 0 {
            return Err(Error::format(
                path,
                Some(i + 1),
                format!("embedding of length {} (expected {d})", r.embedding.len()),
            ));
        }
        if r.embedding.iter().any(|v| !v.is_finite()) {
            return Err(Error::format(path, Some(i + 1), "non-finite embedding value"));
        }
    }
    Ok(())
}

fn load_embeddings(path: &Path) -> Result<Vec<EmbeddingRecord>> {
    let recs: Vec<EmbeddingRecord> = read_jsonl(path)?;
    check_embeddings(path, &recs)?;
    Ok(recs)
}

fn load_landmarks(path: &Path) -> Result<Vec<LandmarkRecord>> {
    let recs: Vec<LandmarkRecord> = read_jsonl(path)?;
    let r = recs.first().map(|x| x.landmarks.len()).unwrap_or(0);
    for (i, rec) in recs.iter().enumerate() {
        if rec.landmarks.len() != r || rec.landmarks.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::format(path, Some(i + 1), "inconsistent or non-finite landmarks"));
        }
    }
    Ok(recs)
}

pub fn compute_metric(a: &EvaluateArgs) -> Result<MetricRecord> {
    let m = a.metric;
    let (value, config) = match m {
        MetricArg::Verification => {
            let scored: Vec<(f64, bool)> = match (&a.pairs, &a.embeddings) {
                (Some(p), _) => read_jsonl::<PairRecord>(p)?.into_iter().map(|r| (r.score, r.same)).collect(),
                (None, Some(e)) => {
                    let recs = load_embeddings(e)?;
                    let mut v = Vec::new();
                    for i in 0..recs.len() {
                        for j in i + 1..recs.len() {
                            v.push((cosine(&recs[i].embedding, &recs[j].embedding), recs[i].label == recs[j].label));
                        }
                    }
                    v
                }
                (None, None) => return Err(Error::Usage("verification needs --pairs or --embeddings".into())),
            };
            let pairs: Vec<ScoredPair> = scored
                .iter()
                .zip(assign_folds(scored.len(), a.folds))
                .map(|(&(score, same), fold)| ScoredPair { score, same, fold })
                .collect();
            let acc = verification_accuracy_kfold(&pairs, a.folds)?;
            (acc, json!({"folds": a.folds, "pairs": pairs.len()}))
        }
        MetricArg::TarAtFar => {
            let (genuine, impostor) = match (&a.scores, &a.embeddings) {
                (Some(p), _) => {
                    let s: ScoreSet = read_json(p)?;
                    (s.genuine, s.impostor)
                }
                (None, Some(e)) => all_pairs(&load_embeddings(e)?),
                (None, None) => return Err(Error::Usage("tar_at_far needs --scores or --embeddings".into())),
            };
            let r = tar_at_far(&genuine, &impostor, a.far)?;
            if r.underpowered {
                log::warn!("only {} impostor scores for FAR {}; the estimate is coarse", impostor.len(), a.far);
            }
            (
                r.tar,
                json!({"far": a.far, "threshold": r.threshold, "genuine": genuine.len(), "impostor": impostor.len()}),
            )
        }
        MetricArg::Rank1 => {
            let path = need(&a.embeddings, "embeddings", m)?;
            let recs = load_embeddings(path)?;
            let (gallery, probes): (Vec<EmbeddingRecord>, Vec<EmbeddingRecord>) = match &a.gallery {
                Some(g) => (load_embeddings(g)?, recs),
                None => {
                    let mut seen = BTreeMap::new();
                    let (mut g, mut p) = (Vec::new(), Vec::new());
                    for r in recs {
                        if seen.insert(r.label, ()).is_none() {
                            g.push(r);
                        } else {
                            p.push(r);
                        }
                    }
                    (g, p)
                }
            };
            let emb = |v: &[EmbeddingRecord]| v.iter().map(|r| r.embedding.clone()).collect::<Vec<_>>();
            let lab = |v: &[EmbeddingRecord]| v.iter().map(|r| r.label).collect::<Vec<_>>();
            let r = rank1_identification(&emb(&probes), &lab(&probes), &emb(&gallery), &lab(&gallery))?;
            (r.accuracy, json!({"probes": probes.len(), "gallery": gallery.len()}))
        }
        MetricArg::Overlap => {
            let path = need(&a.landmarks, "landmarks", m)?;
            let recs = load_landmarks(path)?;
            let (k, size) = match &a.checkpoint {
                Some(c) => {
                    let ck = checkpoint::load(c)?;
                    (ck.model.cfg.patch_size, ck.model.cfg.image_width)
                }
                None => (
                    a.patch_size.ok_or_else(|| Error::Usage("overlap needs --patch-size or --checkpoint".into()))?,
                    a.image_size.ok_or_else(|| Error::Usage("overlap needs --image-size or --checkpoint".into()))?,
                ),
            };
            let per: Vec<_> = recs
                .iter()
                .map(|r| overlap_rate(&r.landmarks, k, size, size))
                .collect::<std::result::Result<_, _>>()?;
            let agg = aggregate_overlap(&per);
            (agg.mean, json!({"patch_size": k, "image_size": size, "images": per.len(), "variance": agg.variance}))
        }
        MetricArg::ForwardError => {
            let path = need(&a.landmarks, "landmarks", m)?;
            let data = need(&a.data, "data", m)?;
            let recs = load_landmarks(path)?;
            let manifest = Manifest::read(data)?;
            let parts = dataset::read_parts(data)?;
            let by_id: BTreeMap<&str, &LandmarkRecord> = recs.iter().map(|r| (r.id.as_str(), r)).collect();
            let flat = |ids: &[String]| -> Result<(Rows, Rows)> {
                let mut p = Vec::new();
                let mut g = Vec::new();
                for id in ids {
                    let rec = by_id
                        .get(id.as_str())
                        .ok_or_else(|| Error::format(path, None, format!("no landmarks for `{id}`")))?;
                    let gt = parts.get(id).ok_or_else(|| {
                        Error::format(data.join(dataset::PARTS), None, format!("no parts for `{id}`"))
                    })?;
                    p.push(rec.landmarks.iter().flatten().copied().collect());
                    g.push(gt.iter().flatten().copied().collect());
                }
                Ok((p, g))
            };
            let (trp, trg) = flat(&manifest.splits.train)?;
            let (tep, teg) = flat(&manifest.splits.val)?;
            let r = forward_error(&trp, &trg, &tep, &teg, EYES)?;
            if r.regularized {
                log::warn!("landmark design matrix is rank deficient; solved with a ridge term");
            }
            (r.percent, json!({"train": trp.len(), "test": tep.len(), "regularized": r.regularized}))
        }
    };
    Ok(MetricRecord { metric: m.name().into(), value, config })
}

fn evaluate(a: &EvaluateArgs) -> Result<()> {
    let rec = compute_metric(a)?;
    let text = serde_json::to_string(&rec).expect("metric serializes");
    match &a.out {
        Some(p) => {
            ensure_parent(p)?;
            fs::write(p, text + "\n").map_err(|e| Error::io(p, e))
        }
        None => {
            let mut out = std::io::stdout().lock();
            writeln!(out, "{text}").map_err(|e| Error::io("<stdout>", e))
        }
    }
}
