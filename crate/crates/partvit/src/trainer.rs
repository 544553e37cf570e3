//! The training loop: shuffling, augmentation, mixup, scheduled AdamW
//! steps, per-epoch metrics and checkpoints.
//!
//! All randomness is keyed by `(seed, epoch, index)` so results do not
//! depend on the number of worker threads.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use partvit_core::augment::{augment, draw_mixup, sample_rng};
use partvit_core::optim::AdamW;
use partvit_core::train::{train_step, MixTarget};
use partvit_core::{FaceModel, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, RngState};
use crate::config::TrainConfig;
use crate::dataset::Sample;
use crate::error::{Error, Result};
use crate::inference::{loss_and_accuracy, stack};

pub const METRICS_CSV: &str = "metrics.csv";
pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const DIAGNOSTICS: &str = "diagnostics.json";

/// One row of the metrics CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Optimizer steps taken so far.
    pub step: usize,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
    /// Mean training loss over the epoch.
    pub loss: f64,
    /// Running accuracy over the epoch's augmented batches.
    pub train_acc: f64,
    /// Eval-mode loss on the validation split, when one is given.
    pub val_loss: Option<f64>,
}

/// Written next to the metrics when training aborts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub last_loss: Option<f64>,
    pub last_grad_norm: Option<f64>,
    pub message: String,
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Receives `metrics.csv`, `checkpoint/` and, on failure,
    /// `diagnostics.json`.
    pub out_dir: Option<PathBuf>,
    /// Also checkpoint every this many epochs (0 = only at the end).
    pub checkpoint_every: usize,
}

pub struct TrainOutcome {
    pub model: FaceModel<f32>,
    pub optimizer: AdamW<f32>,
    pub history: Vec<EpochMetrics>,
    pub rng: RngState,
}

fn keyed(seed: u64, epoch: u64, step: u64, tag: &[u8; 8]) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&epoch.to_le_bytes());
    key[16..24].copy_from_slice(&step.to_le_bytes());
    key[24..].copy_from_slice(tag);
    ChaCha8Rng::from_seed(key)
}

/// Augments a batch, splitting the work over `workers` threads.
fn augment_batch(cfg: &TrainConfig, samples: &[Sample], idx: &[usize], epoch: usize) -> Vec<Tensor<f32>> {
    let one = |i: usize| {
        let mut rng = sample_rng(cfg.seed, epoch as u64, i as u64);
        augment(&samples[i].image, &cfg.augment, &mut rng)
    };
    let workers = cfg.workers.max(1).min(idx.len().max(1));
    if workers == 1 {
        return idx.iter().map(|&i| one(i)).collect();
    }
    let per = idx.len().div_ceil(workers);
    std::thread::scope(|s| {
        let handles: Vec<_> =
            idx.chunks(per).map(|chunk| s.spawn(move || chunk.iter().map(|&i| one(i)).collect::<Vec<_>>())).collect();
        handles.into_iter().flat_map(|h| h.join().expect("augmentation worker panicked")).collect()
    })
}

struct CsvSink {
    path: PathBuf,
    writer: csv::Writer<fs::File>,
}

impl CsvSink {
    fn create(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(METRICS_CSV);
        let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut writer = csv::Writer::from_writer(file);
        writer
            .write_record(["epoch", "step", "lr", "loss", "train_acc", "val_loss"])
            .map_err(|e| Error::format(&path, None, e.to_string()))?;
        writer.flush().map_err(|e| Error::io(&path, e))?;
        Ok(Self { path, writer })
    }

    fn row(&mut self, m: &EpochMetrics) -> Result<()> {
        let rec = [
            m.epoch.to_string(),
            m.step.to_string(),
            format!("{:e}", m.lr),
            m.loss.to_string(),
            m.train_acc.to_string(),
            m.val_loss.map(|v| v.to_string()).unwrap_or_default(),
        ];
        self.writer.write_record(&rec).map_err(|e| Error::format(&self.path, None, e.to_string()))?;
        self.writer.flush().map_err(|e| Error::io(&self.path, e))
    }
}

/// Reads a metrics CSV back.
pub fn read_metrics(path: &Path) -> Result<Vec<EpochMetrics>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::format(path, None, e.to_string()))?;
    r.deserialize()
        .enumerate()
        .map(|(i, row)| row.map_err(|e| Error::format(path, Some(i + 2), e.to_string())))
        .collect()
}

fn val_diag(epoch: usize, step: usize, lr: f64, last: Option<(f64, f64)>, message: String) -> Diagnostics {
    Diagnostics {
        epoch,
        step,
        lr,
        last_loss: last.map(|l| l.0),
        last_grad_norm: last.map(|l| l.1),
        message: format!("validation: {message}"),
    }
}

/// Writes `diagnostics.json` (best effort) and builds the matching error.
fn diverged(opts: &TrainOptions, diag: Diagnostics) -> Error {
    if let Some(dir) = &opts.out_dir {
        let path = dir.join(DIAGNOSTICS);
        let text = serde_json::to_string_pretty(&diag).expect("diagnostics serialize");
        if let Err(e) = fs::write(&path, text) {
            log::error!("cannot write {}: {e}", path.display());
        }
    }
    Error::Diverged(serde_json::to_string(&diag).expect("diagnostics serialize"))
}

/// Trains a fresh model on `train`, scoring `val` (if non-empty) after every
/// epoch.
pub fn train(
    cfg: &TrainConfig,
    train: &[Sample],
    val: &[Sample],
    num_classes: usize,
    opts: &TrainOptions,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Usage("training split is empty".into()));
    }
    if let Some(s) = train.iter().chain(val).find(|s| s.label >= num_classes) {
        return Err(Error::Usage(format!("sample {} has label {} ≥ {num_classes}", s.id, s.label)));
    }
    let model = FaceModel::<f32>::new(cfg.effective_model(), num_classes, cfg.seed)?;
    let optimizer = AdamW::new(cfg.optimizer, &model.store);
    run(cfg, train, val, model, optimizer, opts)
}

fn run(
    cfg: &TrainConfig,
    train: &[Sample],
    val: &[Sample],
    mut model: FaceModel<f32>,
    mut opt: AdamW<f32>,
    opts: &TrainOptions,
) -> Result<TrainOutcome> {
    let batch = cfg.batch_size;
    let steps_per_epoch = train.len().div_ceil(batch);
    let sched = cfg.schedule(steps_per_epoch);
    sched.validate()?;
    let mut sink = opts.out_dir.as_deref().map(CsvSink::create).transpose()?;
    let mut history = Vec::with_capacity(cfg.schedule.epochs);
    let mut step = 0usize;
    let mut rng_state = RngState { seed: cfg.seed, epoch: 0, step: 0 };
    for epoch in 0..cfg.schedule.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut keyed(cfg.seed, epoch as u64, 0, b"shuffle\0"));
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        let mut lr = 0.0;
        let mut last: Option<(f64, f64)> = None;
        for idx in order.chunks(batch) {
            lr = sched.lr(step);
            let mut images = augment_batch(cfg, train, idx, epoch);
            let labels: Vec<usize> = idx.iter().map(|&i| train[i].label).collect();
            let mut mix_rng = keyed(cfg.seed, epoch as u64, step as u64, b"mixup\0\0\0");
            let mix = draw_mixup(idx.len(), &cfg.augment, &mut mix_rng);
            let partner_labels = mix.as_ref().map(|m| m.partner_labels(&labels));
            if let Some(m) = &mix {
                images = m.apply(&images)?;
            }
            let target = mix.as_ref().map(|m| MixTarget {
                partner_labels: partner_labels.as_deref().expect("set with mix"),
                lambda: m.lambda,
            });
            let x = stack(&images.iter().collect::<Vec<_>>())?;
            let mut step_rng = keyed(cfg.seed, epoch as u64, step as u64, b"depth\0\0\0");
            let stats = match train_step(&mut model, &mut opt, &cfg.loss, x, &labels, target, lr, &mut step_rng) {
                Ok(s) => s,
                Err(partvit_core::Error::Numeric(message)) => {
                    let diag = Diagnostics {
                        epoch,
                        step,
                        lr,
                        last_loss: last.map(|l| l.0),
                        last_grad_norm: last.map(|l| l.1),
                        message,
                    };
                    return Err(diverged(opts, diag));
                }
                Err(e) => return Err(e.into()),
            };
            last = Some((stats.loss, stats.grad_norm));
            loss_sum += stats.loss * idx.len() as f64;
            correct += stats.correct;
            step += 1;
        }
        let val_loss = if val.is_empty() {
            None
        } else {
            match loss_and_accuracy(&model, &cfg.loss, val, batch) {
                Ok((l, _)) if l.is_finite() => Some(l),
                Ok((l, _)) => {
                    return Err(diverged(opts, val_diag(epoch, step, lr, last, format!("validation loss is {l}"))))
                }
                Err(Error::Core(partvit_core::Error::Numeric(message))) => {
                    return Err(diverged(opts, val_diag(epoch, step, lr, last, message)))
                }
                Err(e) => return Err(e),
            }
        };
        let m = EpochMetrics {
            epoch,
            step,
            lr,
            loss: loss_sum / train.len() as f64,
            train_acc: correct as f64 / train.len() as f64,
            val_loss,
        };
        log::info!(
            "epoch {epoch}: loss {:.4} acc {:.3} lr {:.2e}{}",
            m.loss,
            m.train_acc,
            m.lr,
            val_loss.map(|v| format!(" val_loss {v:.4}")).unwrap_or_default()
        );
        if let Some(s) = sink.as_mut() {
            s.row(&m)?;
        }
        history.push(m);
        rng_state = RngState { seed: cfg.seed, epoch: epoch as u64 + 1, step: step as u64 };
        if let (Some(dir), true) =
            (&opts.out_dir, opts.checkpoint_every > 0 && (epoch + 1) % opts.checkpoint_every == 0)
        {
            checkpoint::save(
                &dir.join(format!("checkpoint-epoch{}", epoch + 1)),
                &model,
                &cfg.loss,
                Some(&opt),
                rng_state,
            )?;
        }
    }
    if let Some(dir) = &opts.out_dir {
        checkpoint::save(&dir.join(CHECKPOINT_DIR), &model, &cfg.loss, Some(&opt), rng_state)?;
        let path = dir.join("train_config.json");
        let text = serde_json::to_string_pretty(cfg).expect("config serializes");
        let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        writeln!(f, "{text}").map_err(|e| Error::io(&path, e))?;
    }
    Ok(TrainOutcome { model, optimizer: opt, history, rng: rng_state })
}
