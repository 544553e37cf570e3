mod common;

use partvit_core::augment::{
    augment, cutout, draw_mixup, flip_horizontal, resized_crop, sample_rng, AugmentConfig, Mixup, RandOp,
};
use partvit_core::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn image(seed: u64) -> Tensor<f32> {
    Tensor::rand_uniform(&[3, 16, 16], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[test]
fn disabled_ladder_is_identity() {
    let x = image(1);
    let mut rng = sample_rng(0, 0, 0);
    assert_eq!(augment(&x, &AugmentConfig::none(), &mut rng), x);
}

#[test]
fn flip_is_an_involution() {
    let x = image(2);
    let f = flip_horizontal(&x);
    assert_ne!(f, x);
    assert_eq!(f.data()[0], x.data()[15]);
    assert_eq!(flip_horizontal(&f), x);
}

#[test]
fn full_crop_is_identity() {
    let x = image(3);
    assert!(resized_crop(&x, 0.0, 0.0, 16.0, 16.0).max_abs_diff(&x) < 1e-6);
}

#[test]
fn cutout_zeroes_a_tenth_of_the_area() {
    let x = Tensor::<f32>::ones(&[1, 20, 20]);
    let side = (0.1f64 * 400.0).sqrt();
    let y = cutout(&x, 10.0, 10.0, side);
    let zeros = y.data().iter().filter(|&&v| v == 0.0).count();
    // a 6.32-pixel square rounds to a 6×6 or 7×7 block
    assert!((36..=49).contains(&zeros), "{zeros}");
}

#[test]
fn mixup_boundary_lambda_one() {
    let a = image(4);
    let b = image(5);
    let mix = Mixup { lambda: 1.0, partner: vec![1, 0] };
    let out = mix.apply(&[a.clone(), b]).unwrap();
    assert_eq!(out[0], a);
    assert_eq!(mix.label_weights(), (1.0, 0.0));
    assert_eq!(mix.partner_labels(&[7, 9]), vec![9, 7]);
}

#[test]
fn mixup_frequency_and_weights() {
    let cfg = AugmentConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let draws: Vec<_> = (0..4000).filter_map(|_| draw_mixup(8, &cfg, &mut rng)).collect();
    let rate = draws.len() as f64 / 4000.0;
    assert!((rate - 0.2).abs() < 0.03, "{rate}");
    for m in &draws {
        let (a, b) = m.label_weights();
        assert!((a + b - 1.0).abs() < 1e-12 && (0.0..=1.0).contains(&a));
        let mut p = m.partner.clone();
        p.sort();
        assert_eq!(p, (0..8).collect::<Vec<_>>());
    }
    assert!(draw_mixup(8, &AugmentConfig::none(), &mut rng).is_none());
}

#[test]
fn per_sample_streams_are_keyed() {
    let x = image(7);
    let cfg = AugmentConfig::default();
    let a = augment(&x, &cfg, &mut sample_rng(1, 2, 3));
    let b = augment(&x, &cfg, &mut sample_rng(1, 2, 3));
    assert_eq!(a, b);
    let others: Vec<_> = (0..8).map(|i| augment(&x, &cfg, &mut sample_rng(1, 2, 10 + i))).collect();
    assert!(others.iter().any(|o| *o != a));
}

#[test]
fn validation() {
    assert!(AugmentConfig::default().validate().is_ok());
    assert!(AugmentConfig { crop_range: (0.0, 1.0), ..AugmentConfig::default() }.validate().is_err());
    assert!(AugmentConfig { crop_range: (0.9, 1.1), ..AugmentConfig::default() }.validate().is_err());
    assert!(AugmentConfig { mixup_prob: 1.5, ..AugmentConfig::default() }.validate().is_err());
}

#[test]
fn zero_magnitude_geometric_ops_are_identity() {
    let x = image(8);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for op in [RandOp::Rotate, RandOp::TranslateX, RandOp::ShearY, RandOp::Brightness, RandOp::Color, RandOp::Posterize]
    {
        let y = op.apply(&x, 0.0, &mut rng);
        assert!(y.max_abs_diff(&x) < 1e-5, "{op:?}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn augmentation_preserves_shape_and_range(seed in 0u64..10_000, img in 0u64..50) {
        let x = image(img);
        let y = augment(&x, &AugmentConfig::default(), &mut sample_rng(seed, 0, 0));
        prop_assert_eq!(y.shape(), x.shape());
        prop_assert!(y.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn every_op_keeps_range(op in 0usize..12, seed in 0u64..1000, m in 0.0f64..30.0) {
        let x = image(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let y = RandOp::ALL[op].apply(&x, m, &mut rng);
        prop_assert_eq!(y.shape(), x.shape());
        prop_assert!(y.data().iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)));
    }
}
