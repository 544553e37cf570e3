#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use partvit::config::TrainConfig;
use partvit::dataset::{self, Sample};
use partvit_core::synth::SyntheticFaceSpec;
use partvit_core::Preset;
use serde_json::Value;

pub const BIN: &str = env!("CARGO_BIN_EXE_partvit");

pub fn schema_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../schemas")
}

/// Validates every document against the named schema, reporting the first
/// failure with its index.
pub fn assert_schema(schema: &str, docs: &[Value]) {
    let path = schema_dir().join(schema);
    let text = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    let schema: Value = serde_json::from_str(&text).unwrap();
    let validator = jsonschema::validator_for(&schema).expect("schema compiles");
    for (i, d) in docs.iter().enumerate() {
        if let Err(e) = validator.validate(d) {
            panic!("{schema} rejects document {i}: {e}\n{d}");
        }
    }
}

pub fn jsonl(path: &Path) -> Vec<Value> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

pub fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

pub fn tiny_spec(seed: u64) -> SyntheticFaceSpec {
    SyntheticFaceSpec { num_identities: 4, images_per_identity: 6, seed, ..SyntheticFaceSpec::default() }
}

/// Writes a 4×6 dataset (2 validation images per identity) under `root`.
pub fn tiny_dataset(root: &Path) {
    dataset::write_synthetic(&tiny_spec(0), root, 2).unwrap();
}

pub fn splits(root: &Path) -> (usize, Vec<Sample>, Vec<Sample>) {
    let (m, train) = dataset::load_split(root, "train").unwrap();
    let (_, val) = dataset::load_split(root, "val").unwrap();
    (m.identities, train, val)
}

/// Fast fViT-tiny configuration for trainer tests.
pub fn quick_config(overrides: &[&str]) -> TrainConfig {
    let mut o: Vec<String> = vec!["batch_size=8".into(), "schedule.epochs=2".into(), "schedule.warmup_epochs=1".into()];
    o.extend(overrides.iter().map(|s| s.to_string()));
    TrainConfig::resolve(Preset::FvitTiny, None, &o).unwrap()
}

pub fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).env("PARTVIT_LOG", "warn").output().expect("binary runs")
}

pub fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(out.status.success(), "partvit {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}
