mod common;

use common::*;
use partvit::trainer::{self, read_metrics, TrainOptions, DIAGNOSTICS, METRICS_CSV};
use partvit::Error;
use partvit_core::FaceModel;

fn bits(m: &FaceModel<f32>) -> Vec<u32> {
    m.store.iter().flat_map(|(_, p)| p.value.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()).collect()
}

fn data() -> (tempfile::TempDir, usize, Vec<partvit::dataset::Sample>, Vec<partvit::dataset::Sample>) {
    let dir = tempfile::tempdir().unwrap();
    tiny_dataset(dir.path());
    let (n, train, val) = splits(dir.path());
    (dir, n, train, val)
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let (_d, n, train, val) = data();
    let cfg = quick_config(&["schedule.base_lr=0", "schedule.min_lr=0"]);
    let out = trainer::train(&cfg, &train, &val, n, &TrainOptions::default()).unwrap();
    let init = FaceModel::<f32>::new(cfg.effective_model(), n, cfg.seed).unwrap();
    assert_eq!(bits(&out.model), bits(&init));
    assert!(out.optimizer.steps > 0);
}

#[test]
fn same_seed_gives_identical_curves_and_weights() {
    let (_d, n, train, val) = data();
    let cfg = quick_config(&["seed=4"]);
    let a = trainer::train(&cfg, &train, &val, n, &TrainOptions::default()).unwrap();
    let b = trainer::train(&cfg, &train, &val, n, &TrainOptions::default()).unwrap();
    assert_eq!(a.history, b.history);
    assert_eq!(bits(&a.model), bits(&b.model));
    let c = trainer::train(&quick_config(&["seed=5"]), &train, &val, n, &TrainOptions::default()).unwrap();
    assert_ne!(bits(&a.model), bits(&c.model));
}

#[test]
fn worker_count_does_not_change_results() {
    let (_d, n, train, val) = data();
    let one = trainer::train(&quick_config(&["workers=1"]), &train, &val, n, &TrainOptions::default()).unwrap();
    let three = trainer::train(&quick_config(&["workers=3"]), &train, &val, n, &TrainOptions::default()).unwrap();
    assert_eq!(one.history, three.history);
    assert_eq!(bits(&one.model), bits(&three.model));
}

#[test]
fn metrics_csv_matches_history_and_schema() {
    let (_d, n, train, val) = data();
    let out_dir = tempfile::tempdir().unwrap();
    let opts = TrainOptions { out_dir: Some(out_dir.path().to_path_buf()), checkpoint_every: 1 };
    let cfg = quick_config(&[]);
    let out = trainer::train(&cfg, &train, &val, n, &opts).unwrap();
    let rows = read_metrics(&out_dir.path().join(METRICS_CSV)).unwrap();
    assert_eq!(rows.len(), cfg.schedule.epochs);
    for (r, h) in rows.iter().zip(&out.history) {
        assert_eq!(r.epoch, h.epoch);
        assert_eq!(r.step, h.step);
        assert!((r.loss - h.loss).abs() <= 1e-12 * h.loss.abs().max(1.0));
    }
    let header = std::fs::read_to_string(out_dir.path().join(METRICS_CSV)).unwrap();
    assert!(header.starts_with("epoch,step,lr,loss,train_acc,val_loss\n"));
    let docs: Vec<_> = rows.iter().map(|r| serde_json::to_value(r).unwrap()).collect();
    assert_schema("metrics_row.schema.json", &docs);
    assert!(out_dir.path().join("checkpoint/manifest.json").exists());
    assert!(out_dir.path().join("train_config.json").exists());
}

#[test]
fn divergence_writes_diagnostics() {
    let (_d, n, train, val) = data();
    let out_dir = tempfile::tempdir().unwrap();
    let opts = TrainOptions { out_dir: Some(out_dir.path().to_path_buf()), checkpoint_every: 0 };
    let cfg = quick_config(&["schedule.base_lr=1e30", "schedule.min_lr=1e30", "augment.warmup=false"]);
    let err = trainer::train(&cfg, &train, &val, n, &opts).map(|_| ()).unwrap_err();
    assert!(matches!(err, Error::Diverged(_)), "{err:?}");
    assert_eq!(err.exit_code(), 1);
    let diag = json(&out_dir.path().join(DIAGNOSTICS));
    assert_schema("diagnostics.schema.json", std::slice::from_ref(&diag));
    assert!(!diag["message"].as_str().unwrap().is_empty());
}

#[test]
fn labels_outside_the_head_are_rejected() {
    let (_d, _, train, val) = data();
    let err = trainer::train(&quick_config(&[]), &train, &val, 2, &TrainOptions::default()).map(|_| ()).unwrap_err();
    assert_eq!(err.exit_code(), 2, "{err}");
}
