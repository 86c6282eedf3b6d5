use std::collections::BTreeSet;

use introspect::adapt::{run_adaptation, AdaptConfig, AdaptInputs, BalancePolicy};
use introspect::bnn::{self, TrainConfig};
use introspect::dataio::{Dataset, Item, ShiftSpec, Split};
use introspect::experiments::{Benchmark, ClusterBenchmark};
use introspect::numerics::RngStream;

fn bench(seed: u64) -> Benchmark {
    ClusterBenchmark {
        classes: 3,
        dims: 4,
        separation: 5.0,
        source_per_class: 60,
        target_per_class: 150,
        validation_fraction: 0.2,
        shift: ShiftSpec {
            mean_offset: vec![2.0, -1.0, 0.5, 0.0],
            noise_scale: 1.0,
        },
        pool_fraction: 0.6,
        calibration_fraction: 0.2,
        pool_class_keep: None,
        ood_classes: 0,
    }
    .build(RngStream::new(seed))
    .unwrap()
}

fn quick(epochs: usize) -> TrainConfig {
    TrainConfig {
        hidden: vec![16, 16],
        max_epochs: epochs,
        patience: 3,
        init_dropout: 0.2,
        ..TrainConfig::default()
    }
}

fn config(seed: u64) -> AdaptConfig {
    AdaptConfig {
        manual_fraction: 0.05,
        train: quick(15),
        fine_tune: quick(8),
        mc_samples: 10,
        stream: RngStream::new(seed),
        ..AdaptConfig::default()
    }
}

fn pool_positions(target: &Dataset) -> Vec<usize> {
    target.items.iter().enumerate().filter(|(_, it)| it.split == Split::Pool).map(|(i, _)| i).collect()
}

#[test]
fn unqueried_pool_labels_never_reach_training() {
    let b = bench(1);
    let cfg = config(2);
    let first = run_adaptation(&cfg, AdaptInputs { source: &b.source, target: &b.target, base: None }).unwrap();
    let queried: BTreeSet<usize> = first.artifacts.manual.iter().map(|&(i, _)| i).collect();
    assert!(!queried.is_empty());

    let mut corrupted = b.target.clone();
    for (k, &pos) in pool_positions(&b.target).iter().enumerate() {
        if !queried.contains(&k) {
            let it = &mut corrupted.items[pos];
            it.y = (it.y + 1) % corrupted.c;
        }
    }
    let second = run_adaptation(&cfg, AdaptInputs { source: &b.source, target: &corrupted, base: None }).unwrap();
    assert_eq!(first.adapted, second.adapted);
    assert_eq!(first.artifacts.auto, second.artifacts.auto);
    assert_eq!(first.report.accuracy, second.report.accuracy);
    // only the post-hoc audit sees the corruption
    assert_ne!(first.report.auto_set_accuracy, second.report.auto_set_accuracy);
}

#[test]
fn calibration_and_manual_sets_are_disjoint() {
    for seed in 0..3 {
        let b = bench(10 + seed);
        let cfg = AdaptConfig {
            manual_fraction: 0.5,
            ..config(seed)
        };
        let out = run_adaptation(&cfg, AdaptInputs { source: &b.source, target: &b.target, base: None }).unwrap();
        let pool = pool_positions(&b.target);
        let manual: BTreeSet<usize> = out.artifacts.manual.iter().map(|&(i, _)| pool[i]).collect();
        let calibration: BTreeSet<usize> = out.artifacts.calibration_indices.iter().copied().collect();
        assert_eq!(calibration.len(), b.target.count(Split::Calibration));
        assert!(manual.is_disjoint(&calibration));
    }
}

#[test]
fn full_manual_labelling_is_plain_fine_tuning() {
    let b = bench(3);
    let cfg = AdaptConfig {
        manual_fraction: 1.0,
        auto_enabled: false,
        balance_policy: BalancePolicy::None,
        ..config(4)
    };
    let out = run_adaptation(&cfg, AdaptInputs { source: &b.source, target: &b.target, base: None }).unwrap();
    assert_eq!(out.report.auto_set_size, 0);
    assert_eq!(out.report.manual_set_size, b.target.count(Split::Pool));

    let pool: Vec<Item> = b.target.split(Split::Pool).map(|it| Item { split: Split::Train, ..it.clone() }).collect();
    let refs: Vec<&Item> = pool.iter().collect();
    let val: Vec<&Item> = b.target.split(Split::Calibration).collect();
    let ft = TrainConfig {
        stream: cfg.stream.derive(5).derive(2),
        ..cfg.fine_tune.clone()
    };
    let expected = bnn::fit(out.base.clone(), &ft, &refs, &val).unwrap().params;
    assert_eq!(out.adapted, expected);
}

#[test]
fn fixed_stream_gives_identical_reports() {
    let b = bench(5);
    let cfg = config(6);
    let run = || {
        let out = run_adaptation(&cfg, AdaptInputs { source: &b.source, target: &b.target, base: None }).unwrap();
        introspect::dataio::to_json_string(&out.report).unwrap()
    };
    assert_eq!(run(), run());
}

#[test]
fn auto_set_accuracy_tracks_the_target() {
    let target = 0.95;
    for seed in 0..10 {
        // five classes whose means span the space, shifted within their plane
        let b = ClusterBenchmark {
            classes: 5,
            dims: 6,
            separation: 6.0,
            source_per_class: 100,
            target_per_class: 200,
            validation_fraction: 0.2,
            shift: ShiftSpec {
                mean_offset: vec![2.5, -1.5, 1.0, 0.0, 0.0, 0.0],
                noise_scale: 1.0,
            },
            pool_fraction: 0.6,
            calibration_fraction: 0.25,
            pool_class_keep: None,
            ood_classes: 0,
        }
        .build(RngStream::new(100 + seed))
        .unwrap();
        assert!(b.target.count(Split::Calibration) >= 250);
        let cfg = AdaptConfig {
            target_accuracy: target,
            manual_fraction: 0.0,
            train: TrainConfig {
                hidden: vec![32, 32],
                init_dropout: 0.3,
                max_epochs: 60,
                patience: 8,
                ..TrainConfig::default()
            },
            fine_tune: quick(1),
            mc_samples: 30,
            stream: RngStream::new(200 + seed),
            ..AdaptConfig::default()
        };
        let out = run_adaptation(&cfg, AdaptInputs { source: &b.source, target: &b.target, base: None }).unwrap();
        if let Some(acc) = out.report.auto_set_accuracy {
            assert!(acc >= target - 0.05, "seed {seed}: audited auto-set accuracy {acc}");
        }
    }
}
