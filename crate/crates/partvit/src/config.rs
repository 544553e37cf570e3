//! Training configuration documents and dotted-key overrides.
//!
//! Precedence is command line over file over preset defaults: the defaults
//! are serialized to JSON, the file is merged in, overrides are applied,
//! and the result is deserialized with unknown keys rejected.

use std::path::Path;

use partvit_core::augment::AugmentConfig;
use partvit_core::cosface::CosFaceConfig;
use partvit_core::optim::{AdamWConfig, Schedule};
use partvit_core::{ModelConfig, Preset};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub base_lr: f64,
    pub min_lr: f64,
    pub warmup_epochs: usize,
    pub epochs: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { base_lr: 3e-4, min_lr: 1e-6, warmup_epochs: 5, epochs: 30 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub loss: CosFaceConfig,
    pub optimizer: AdamWConfig,
    pub schedule: ScheduleConfig,
    pub augment: AugmentConfig,
    pub batch_size: usize,
    pub seed: u64,
    pub workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::for_preset(Preset::FvitTiny)
    }
}

impl TrainConfig {
    pub fn for_preset(preset: Preset) -> Self {
        Self {
            model: ModelConfig::preset(preset),
            loss: CosFaceConfig::default(),
            optimizer: AdamWConfig::default(),
            schedule: ScheduleConfig::default(),
            augment: AugmentConfig::default(),
            batch_size: 32,
            seed: 0,
            workers: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        self.optimizer.validate()?;
        self.augment.validate()?;
        self.schedule(1).validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        Ok(())
    }

    /// Model configuration as trained: stochastic depth follows its ladder
    /// toggle.
    pub fn effective_model(&self) -> ModelConfig {
        let mut m = self.model.clone();
        if !self.augment.stochastic_depth {
            m.stochastic_depth_prob = 0.0;
        }
        m
    }

    /// Learning-rate schedule; the warm-up follows its ladder toggle and is
    /// capped below the run length so short runs still decay.
    pub fn schedule(&self, steps_per_epoch: usize) -> Schedule {
        let s = self.schedule;
        let warmup = if self.augment.warmup { s.warmup_epochs.min(s.epochs.saturating_sub(1)) } else { 0 };
        Schedule {
            base_lr: s.base_lr,
            min_lr: s.min_lr,
            warmup_epochs: warmup,
            total_epochs: s.epochs,
            steps_per_epoch,
        }
    }

    /// Builds a configuration from preset defaults, an optional file and
    /// dotted `key=value` overrides.
    pub fn resolve(preset: Preset, file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut doc = serde_json::to_value(Self::for_preset(preset)).expect("config serializes");
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let user: Value =
                serde_json::from_str(&text).map_err(|e| Error::format(path, Some(e.line()), e.to_string()))?;
            merge(&mut doc, user, "")?;
        }
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let cfg: Self = serde_json::from_value(doc).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Deep-merges `src` into `dst`; objects merge key by key, anything else
/// replaces. Keys absent from `dst` are rejected.
pub fn merge(dst: &mut Value, src: Value, prefix: &str) -> Result<()> {
    match (dst, src) {
        (Value::Object(d), Value::Object(s)) => {
            for (k, v) in s {
                let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                match d.get_mut(&k) {
                    Some(slot) => merge(slot, v, &path)?,
                    None => return Err(Error::Config(format!("unknown config key `{path}`"))),
                }
            }
            Ok(())
        }
        (d, s) => {
            *d = s;
            Ok(())
        }
    }
}

/// Applies one `a.b.c=value` override. The value is parsed as JSON and
/// falls back to a plain string.
pub fn apply_override(doc: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) =
        assignment.split_once('=').ok_or_else(|| Error::Usage(format!("override `{assignment}` is not key=value")))?;
    let mut slot = &mut *doc;
    for part in key.split('.') {
        slot = slot
            .as_object_mut()
            .and_then(|o| o.get_mut(part))
            .ok_or_else(|| Error::Config(format!("unknown config key `{key}`")))?;
    }
    *slot = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok(())
}
