mod common;

use common::toy_config;
use proptest::prelude::*;
use transfer_core::data::{
    generate_synthetic_dataset, synthetic_splits, upsample_balance, Dataset, Sample, Split,
};
use transfer_core::rng::seeded;
use transfer_core::train::{evaluate, train, NearestCentroid, RandomClassifier, Trainer};
use transfer_core::{RegularizerKind, Tensor, TrainConfig};

fn labelled(labels: &[usize], classes: usize) -> Dataset {
    Dataset {
        samples: labels
            .iter()
            .enumerate()
            .map(|(i, &label)| Sample {
                image: Tensor::full(&[2, 2, 3], i as f64 / labels.len() as f64),
                label,
                seed: i as u64,
            })
            .collect(),
        class_names: (0..classes).map(|c| format!("c{c}")).collect(),
        split: Split::Train,
    }
}

fn counts(labels: &[(usize, usize)]) -> Vec<usize> {
    labels.iter().flat_map(|&(c, n)| std::iter::repeat(c).take(n)).collect()
}

#[test]
fn upsampling_two_classes() {
    let data = labelled(&counts(&[(0, 10), (1, 5)]), 2);
    let out = upsample_balance(&data, &mut seeded(1)).unwrap();
    assert_eq!(out.class_counts(), vec![10, 10]);
    let originals: Vec<&Tensor> = data.samples.iter().filter(|s| s.label == 1).map(|s| &s.image).collect();
    for s in out.samples.iter().filter(|s| s.label == 1) {
        assert!(originals.iter().any(|o| o.bitwise_eq(&s.image)));
    }
}

#[test]
fn upsampling_three_classes() {
    let data = labelled(&counts(&[(0, 7), (1, 3), (2, 5)]), 3);
    let out = upsample_balance(&data, &mut seeded(2)).unwrap();
    assert_eq!(out.class_counts(), vec![7, 7, 7]);
    assert_eq!(out.len(), 21);
}

#[test]
fn upsampling_balanced_data_is_a_no_op() {
    let data = labelled(&counts(&[(0, 4), (1, 4)]), 2);
    let out = upsample_balance(&data, &mut seeded(3)).unwrap();
    let key = |d: &Dataset| {
        let mut v: Vec<u64> = d.samples.iter().map(|s| s.seed).collect();
        v.sort_unstable();
        v
    };
    assert_eq!(key(&out), key(&data));
}

#[test]
fn upsampling_rejects_empty_classes_and_test_data() {
    let data = labelled(&counts(&[(0, 4)]), 2);
    assert!(upsample_balance(&data, &mut seeded(0)).is_err());
    let mut test = labelled(&counts(&[(0, 2), (1, 1)]), 2);
    test.split = Split::Test;
    assert!(upsample_balance(&test, &mut seeded(0)).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn upsampling_equalises_to_the_largest_class(sizes in prop::collection::vec(1usize..12, 2..5), seed in 0u64..1000) {
        let pairs: Vec<(usize, usize)> = sizes.iter().copied().enumerate().collect();
        let data = labelled(&counts(&pairs), sizes.len());
        let out = upsample_balance(&data, &mut seeded(seed)).unwrap();
        let max = *sizes.iter().max().unwrap();
        prop_assert!(out.class_counts().iter().all(|&c| c == max));
        prop_assert_eq!(out.len(), max * sizes.len());
    }
}

#[test]
fn synthetic_data_is_deterministic_and_balanced() {
    let a = generate_synthetic_dataset(7, 100, 48, 5).unwrap();
    let b = generate_synthetic_dataset(7, 100, 48, 5).unwrap();
    assert_eq!(a.len(), 700);
    assert_eq!(a.class_counts(), vec![100; 7]);
    assert!(a.samples.iter().zip(&b.samples).all(|(x, y)| x.image.bitwise_eq(&y.image) && x.label == y.label));
    let c = generate_synthetic_dataset(7, 100, 48, 6).unwrap();
    assert!(!a.samples[0].image.bitwise_eq(&c.samples[0].image));
    a.validate().unwrap();
    assert!(generate_synthetic_dataset(1, 10, 48, 0).is_err());
}

#[test]
fn nearest_centroid_stays_below_the_structure_threshold() {
    let (train_set, test_set) = synthetic_splits(7, 100, 50, 48, 0).unwrap();
    let centroid = NearestCentroid::fit(&train_set).unwrap();
    let acc = evaluate(&centroid, &test_set).unwrap().overall_accuracy;
    assert!(acc < 0.6, "centroid accuracy {acc}");
    assert!(acc > 1.0 / 7.0, "centroid should still beat chance: {acc}");
}

#[test]
fn random_predictor_sits_at_chance() {
    let data = generate_synthetic_dataset(7, 300, 8, 1).unwrap();
    let metrics = evaluate(&RandomClassifier::new(7, 2), &data).unwrap();
    assert!((metrics.overall_accuracy - 1.0 / 7.0).abs() < 0.03, "{}", metrics.overall_accuracy);
    let mean: f64 = metrics.per_class_accuracy.iter().flatten().sum::<f64>() / 7.0;
    assert!((metrics.mean_class_accuracy - mean).abs() < 1e-12);
}

#[test]
fn evaluation_is_repeatable() {
    let (train_set, test_set) = synthetic_splits(3, 4, 4, 8, 2).unwrap();
    let out = train(
        TrainConfig {
            epochs: 1,
            batch_size: 4,
            ..toy_config()
        },
        &train_set,
        None,
    )
    .unwrap();
    let a = evaluate(&out.model, &test_set).unwrap();
    let b = evaluate(&out.model, &test_set).unwrap();
    assert_eq!(a, b);
}

fn tiny_run(cfg: TrainConfig) -> Vec<f64> {
    let (train_set, _) = synthetic_splits(3, 4, 1, 8, 3).unwrap();
    train(cfg, &train_set, None).unwrap().step_losses
}

#[test]
fn training_is_deterministic_per_seed() {
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 4,
        ..toy_config()
    };
    let a = tiny_run(cfg.clone());
    let b = tiny_run(cfg.clone());
    assert_eq!(a.len(), 6);
    assert_eq!(a, b);
    let c = tiny_run(TrainConfig { seed: 11, ..cfg });
    assert_ne!(a, c);
}

#[test]
fn regularizer_kinds_agree_when_rates_are_zero() {
    let first: Vec<f64> = [
        RegularizerKind::Mad,
        RegularizerKind::Dropout,
        RegularizerKind::DropBlock,
        RegularizerKind::SpatialDropout,
    ]
    .into_iter()
    .map(|kind| {
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 4,
            p1: 0.0,
            p2: 0.0,
            block_size: 1,
            augment: false,
            regularizer_kind: kind,
            ..toy_config()
        };
        tiny_run(cfg)[0]
    })
    .collect();
    assert!(first.windows(2).all(|w| w[0] == w[1]), "{first:?}");
}

#[test]
fn lr_schedule_is_applied_per_epoch() {
    let (train_set, _) = synthetic_splits(3, 2, 1, 8, 4).unwrap();
    let cfg = TrainConfig {
        epochs: 5,
        batch_size: 6,
        lr: 0.1,
        lr_decay_epochs: vec![2, 4],
        ..toy_config()
    };
    let out = train(cfg, &train_set, None).unwrap();
    let lrs: Vec<f64> = out.history.iter().map(|r| r.lr).collect();
    let expect = [0.1, 0.1, 0.01, 0.01, 0.001];
    assert!(lrs.iter().zip(expect).all(|(a, b)| (a - b).abs() < 1e-15), "{lrs:?}");
}

#[test]
fn zero_learning_rate_freezes_the_model() {
    let (train_set, _) = synthetic_splits(3, 4, 1, 8, 5).unwrap();
    let cfg = TrainConfig {
        lr: 0.0,
        batch_size: 4,
        ..toy_config()
    };
    let mut trainer = Trainer::new(cfg.clone()).unwrap();
    let before = trainer.model.params.clone();
    let untrained = evaluate(&trainer.model, &train_set).unwrap().overall_accuracy;
    trainer.run_epoch(&train_set).unwrap();
    for ((_, a), (_, b)) in before.iter().zip(trainer.model.params.iter()) {
        assert!(a.bitwise_eq(b));
    }
    assert_eq!(evaluate(&trainer.model, &train_set).unwrap().overall_accuracy, untrained);
}

#[test]
fn drop_log_records_every_site() {
    let (train_set, _) = synthetic_splits(3, 2, 1, 8, 6).unwrap();
    let cfg = TrainConfig {
        epochs: 1,
        batch_size: 6,
        log_drops: true,
        ..toy_config()
    };
    let out = train(cfg, &train_set, None).unwrap();
    // one local decision and one per block, for each of the 6 samples
    assert_eq!(out.drops.len(), 6 * 3);
}

#[test]
fn small_batch_can_be_memorised() {
    let (train_set, _) = synthetic_splits(3, 2, 1, 16, 7).unwrap();
    let cfg = TrainConfig {
        input_size: 16,
        p1: 0.0,
        p2: 0.0,
        lr: 0.01,
        augment: false,
        ..toy_config()
    };
    let (images, labels) = train_set.batch(&(0..6).collect::<Vec<_>>()).unwrap();
    let mut trainer = Trainer::new(cfg).unwrap();
    let first = trainer.train_step(&images, &labels, 0.01).unwrap().0;
    let mut last = first;
    for _ in 0..150 {
        last = trainer.train_step(&images, &labels, 0.01).unwrap().0;
    }
    assert!(last < 0.1 * first, "loss {first} -> {last}");
}
