mod common;

use std::fs;

use common::*;
use partvit::dataset::{self, read_jsonl, read_png, write_jsonl, write_png, Manifest, PartRecord};
use partvit::Error;
use partvit_core::synth::SyntheticFaceSpec;
use partvit_core::Tensor;
use proptest::prelude::*;
use sha2::{Digest, Sha256};

fn sha(path: &std::path::Path) -> Vec<u8> {
    Sha256::digest(fs::read(path).unwrap()).to_vec()
}

#[test]
fn manifest_lists_every_image() {
    let dir = tempfile::tempdir().unwrap();
    tiny_dataset(dir.path());
    let m = Manifest::read(dir.path()).unwrap();
    assert_eq!(m.identities, 4);
    assert_eq!(m.splits.train.len() + m.splits.val.len(), 4 * 6);
    assert_eq!(m.splits.val.len(), 4 * 2);
    for id in m.splits.train.iter().chain(&m.splits.val) {
        assert!(dataset::image_path(dir.path(), id).exists(), "{id}");
    }
    let parts = dataset::read_parts(dir.path()).unwrap();
    assert_eq!(parts.len(), 24);
    assert_schema("dataset_manifest.schema.json", &[json(&dir.path().join("manifest.json"))]);
    assert_schema("parts.schema.json", &jsonl(&dir.path().join("parts.jsonl")));
}

#[test]
fn same_seed_same_manifest_and_images() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    tiny_dataset(a.path());
    tiny_dataset(b.path());
    for f in ["manifest.json", "parts.jsonl", "0002/0003.png"] {
        assert_eq!(sha(&a.path().join(f)), sha(&b.path().join(f)), "{f}");
    }
    let c = tempfile::tempdir().unwrap();
    dataset::write_synthetic(&tiny_spec(1), c.path(), 2).unwrap();
    assert_ne!(sha(&a.path().join("parts.jsonl")), sha(&c.path().join("parts.jsonl")));
}

#[test]
fn zero_images_per_identity_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SyntheticFaceSpec { images_per_identity: 0, ..SyntheticFaceSpec::default() };
    let err = dataset::write_synthetic(&spec, dir.path(), 0).unwrap_err();
    assert_eq!(err.exit_code(), 2, "{err}");
}

#[test]
fn loaded_labels_follow_identity_order() {
    let dir = tempfile::tempdir().unwrap();
    tiny_dataset(dir.path());
    let (n, train, val) = splits(dir.path());
    assert_eq!(n, 4);
    for s in train.iter().chain(&val) {
        assert_eq!(s.label, s.id[..4].parse::<usize>().unwrap());
        assert_eq!(s.image.shape(), &[3, 56, 56]);
    }
}

#[test]
fn missing_image_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    tiny_dataset(dir.path());
    fs::remove_file(dir.path().join("0001/0000.png")).unwrap();
    let err = dataset::load_split(dir.path(), "train").unwrap_err();
    assert!(err.to_string().contains("0001/0000.png"), "{err}");
}

#[test]
fn jsonl_errors_carry_line_numbers() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("parts.jsonl");
    fs::write(&p, "{\"id\":\"0000/0000\",\"parts\":[[0.1,0.2]]}\n\n{\"id\":\"0000/0001\",\"parts\":7}\n").unwrap();
    let err = read_jsonl::<PartRecord>(&p).unwrap_err();
    match &err {
        Error::Format { line, .. } => assert_eq!(*line, Some(3)),
        e => panic!("unexpected {e:?}"),
    }
    assert!(err.to_string().contains("parts.jsonl:3:"), "{err}");
}

#[test]
fn jsonl_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("x.jsonl");
    let recs = vec![
        PartRecord { id: "0000/0001".into(), parts: vec![[0.25, 0.75]] },
        PartRecord { id: "0003/0000".into(), parts: vec![[1.0 / 3.0, 0.1], [0.0, 1.0]] },
    ];
    write_jsonl(&p, &recs).unwrap();
    assert_eq!(read_jsonl::<PartRecord>(&p).unwrap(), recs);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn png_round_trip_within_quantization(h in 1usize..9, w in 1usize..9, seed in any::<u64>()) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f32> = (0..3 * h * w).map(|_| rng.random::<f32>()).collect();
        let img = Tensor::new(&[3, h, w], data).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.png");
        write_png(&p, &img).unwrap();
        let back = read_png(&p).unwrap();
        prop_assert_eq!(back.shape(), img.shape());
        for (a, b) in img.data().iter().zip(back.data()) {
            prop_assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
    }
}
