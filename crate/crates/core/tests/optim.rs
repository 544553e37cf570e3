use partvit_core::optim::{global_norm, AdamW, AdamWConfig, Schedule};
use partvit_core::{DecayGroup, ParamStore, Tensor};

fn store(v: f64, group: DecayGroup) -> ParamStore<f64> {
    let mut s = ParamStore::new();
    s.add("w", Tensor::full(&[3], v), group);
    s
}

fn no_decay() -> AdamWConfig {
    AdamWConfig { weight_decay_backbone: 0.0, weight_decay_landmark: 0.0, ..AdamWConfig::default() }
}

#[test]
fn zero_gradient_without_decay_is_a_no_op() {
    let mut s = store(0.7, DecayGroup::Backbone);
    let before = s.clone();
    let mut opt = AdamW::new(no_decay(), &s);
    for _ in 0..5 {
        opt.step(&mut s, &[Tensor::zeros(&[3])], 1e-2).unwrap();
    }
    assert_eq!(s, before);
    assert_eq!(opt.steps, 5);
}

#[test]
fn sign_regime_first_step() {
    let mut s = ParamStore::<f64>::new();
    s.add("x", Tensor::scalar(0.0), DecayGroup::Backbone);
    let cfg = AdamWConfig { beta1: 0.0, beta2: 0.0, ..no_decay() };
    let mut opt = AdamW::new(cfg, &s);
    opt.step(&mut s, &[Tensor::scalar(1.0)], 0.1).unwrap();
    assert!((s.by_name("x").unwrap().data()[0] + 0.1).abs() < 1e-8);
}

#[test]
fn decoupled_decay_shrinks_geometrically() {
    for (group, wd) in [(DecayGroup::Backbone, 0.1), (DecayGroup::LandmarkNet, 0.05), (DecayGroup::NoDecay, 0.0)] {
        let mut s = store(2.0, group);
        let mut opt = AdamW::new(AdamWConfig::default(), &s);
        let lr = 0.01;
        for _ in 0..3 {
            opt.step(&mut s, &[Tensor::zeros(&[3])], lr).unwrap();
        }
        let want = 2.0 * (1.0f64 - lr * wd).powi(3);
        assert!((s.by_name("w").unwrap().data()[0] - want).abs() < 1e-12, "{group:?}");
    }
}

#[test]
fn gradient_shape_mismatch_is_an_error() {
    let mut s = store(1.0, DecayGroup::Backbone);
    let mut opt = AdamW::new(AdamWConfig::default(), &s);
    assert!(opt.step(&mut s, &[Tensor::zeros(&[4])], 0.1).is_err());
    assert!(opt.step(&mut s, &[], 0.1).is_err());
    assert_eq!(opt.steps, 0);
}

#[test]
fn moments_track_parameter_shapes() {
    let mut s = ParamStore::<f32>::new();
    s.add("a", Tensor::zeros(&[2, 3]), DecayGroup::Backbone);
    s.add("b", Tensor::zeros(&[5]), DecayGroup::NoDecay);
    let opt = AdamW::new(AdamWConfig::default(), &s);
    assert_eq!(opt.first[0].shape(), &[2, 3]);
    assert_eq!(opt.second[1].shape(), &[5]);
}

#[test]
fn adam_minimizes_a_quadratic() {
    let mut s = store(3.0, DecayGroup::NoDecay);
    let mut opt = AdamW::new(AdamWConfig::default(), &s);
    for _ in 0..2000 {
        let g = s.by_name("w").unwrap().map(|v| 2.0 * (v - 1.0));
        opt.step(&mut s, &[g], 0.01).unwrap();
    }
    assert!(s.by_name("w").unwrap().data().iter().all(|v| (v - 1.0).abs() < 1e-2));
}

#[test]
fn schedule_endpoints() {
    let sched = Schedule { base_lr: 1e-3, min_lr: 1e-5, warmup_epochs: 2, total_epochs: 10, steps_per_epoch: 5 };
    sched.validate().unwrap();
    assert_eq!(sched.lr(0), 0.0);
    assert!((sched.lr(5) - 5e-4).abs() < 1e-15);
    assert!((sched.lr(10) - 1e-3).abs() < 1e-15);
    assert!((sched.lr(49) - 1e-5).abs() < 1e-15);
    assert!((sched.lr(500) - 1e-5).abs() < 1e-15);
    let lrs: Vec<f64> = (10..50).map(|s| sched.lr(s)).collect();
    assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
}

#[test]
fn schedule_validation() {
    let bad = Schedule { warmup_epochs: 10, total_epochs: 10, ..Schedule::default() };
    assert!(bad.validate().is_err());
    let bad = Schedule { steps_per_epoch: 0, ..Schedule::default() };
    assert!(bad.validate().is_err());
    let no_warm = Schedule { warmup_epochs: 0, ..Schedule::default() };
    no_warm.validate().unwrap();
    assert_eq!(no_warm.lr(0), no_warm.base_lr);
}

#[test]
fn global_norm_of_gradients() {
    let g = [Tensor::new(&[2], vec![3.0f32, 0.0]).unwrap(), Tensor::new(&[1], vec![4.0]).unwrap()];
    assert!((global_norm(&g) - 5.0).abs() < 1e-12);
}
