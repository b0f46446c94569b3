//! Property tests for the training modes.

use proptest::prelude::*;

use robustlab::defenses::{perturbed_rows, train, TrainingData, TrainingKind, TrainingMode, TrainingSchedule};
use robustlab::nn::{ArchitectureKind, Classifier, Layer};
use robustlab::tensor::Tensor;

const SIDE: usize = 6;
const CLASSES: usize = 3;

fn classifier(seed: u64) -> Classifier {
    let layers = vec![
        Layer::Flatten,
        Layer::Linear { inputs: SIDE * SIDE, outputs: 8 },
        Layer::Relu,
        Layer::BatchNorm { features: 8 },
        Layer::Linear { inputs: 8, outputs: CLASSES },
    ];
    Classifier::build(ArchitectureKind::Custom(layers), &[1, SIDE, SIDE], CLASSES, seed).unwrap()
}

fn dataset(n: usize) -> impl Strategy<Value = (Tensor, Vec<usize>)> {
    (prop::collection::vec(0.0f64..=1.0, n * SIDE * SIDE), prop::collection::vec(0usize..CLASSES, n))
        .prop_map(move |(d, y)| (Tensor::new(vec![n, 1, SIDE, SIDE], d).unwrap(), y))
}

fn image_kind() -> impl Strategy<Value = TrainingKind> {
    prop_oneof![
        Just(TrainingKind::AdvHalf),
        Just(TrainingKind::AdvFull),
        Just(TrainingKind::AdvWeak),
        Just(TrainingKind::AdvTransform),
        Just(TrainingKind::RandomImage),
    ]
}

fn schedule(epochs: usize) -> TrainingSchedule {
    TrainingSchedule { epochs, batch_size: 7, ..TrainingSchedule::default() }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn half_modes_perturb_the_last_ceil_half(b in 0usize..300) {
        for kind in TrainingKind::ALL {
            let r = perturbed_rows(kind, b);
            prop_assert_eq!(r.end, b);
            let expected = match kind {
                TrainingKind::Normal => 0,
                TrainingKind::AdvFull => b,
                _ => b.div_ceil(2),
            };
            prop_assert_eq!(r.len(), expected, "{}", kind);
        }
    }

    #[test]
    fn zero_budget_training_matches_normal_training(seed in any::<u64>(), (x, y) in dataset(20), kind in prop_oneof![Just(TrainingKind::AdvHalf), Just(TrainingKind::AdvFull), Just(TrainingKind::RandomImage)]) {
        let data = TrainingData::new(&x, &y);
        let normal = train(classifier(seed), &data, &TrainingMode::new(TrainingKind::Normal), &schedule(2), seed).unwrap();
        let adv = train(classifier(seed), &data, &TrainingMode::new(kind).with_epsilon(0.0), &schedule(2), seed).unwrap();
        prop_assert_eq!(&normal.classifier, &adv.classifier);
        prop_assert_eq!(&normal.epochs, &adv.epochs);
    }

    #[test]
    fn every_epoch_reports_rates_in_the_unit_interval(seed in any::<u64>(), (x, y) in dataset(15), kind in image_kind(), epochs in 1usize..4) {
        let mut data = TrainingData::new(&x, &y);
        data.test = Some((&x, &y));
        let mode = TrainingMode { attack: robustlab::attacks::AttackConfig { iterations: 3, ..TrainingMode::new(kind).attack }, ..TrainingMode::new(kind) };
        let out = train(classifier(seed), &data, &mode, &schedule(epochs), seed).unwrap();
        prop_assert_eq!(out.epochs.len(), epochs);
        for (i, m) in out.epochs.iter().enumerate() {
            prop_assert_eq!(m.epoch, i);
            prop_assert!((0.0..=1.0).contains(&m.train_error));
            prop_assert!(m.test_error.is_some_and(|e| (0.0..=1.0).contains(&e)));
            prop_assert!(m.train_loss >= 0.0 && m.learning_rate > 0.0);
        }
    }
}

#[test]
fn zero_epochs_and_latent_modes_without_codes_are_rejected() {
    let x = Tensor::full(&[4, 1, SIDE, SIDE], 0.5);
    let y = vec![0, 1, 2, 0];
    let data = TrainingData::new(&x, &y);
    assert!(train(classifier(0), &data, &TrainingMode::new(TrainingKind::Normal), &schedule(0), 0).is_err());
    for kind in [TrainingKind::OnManifold, TrainingKind::RandomLatent, TrainingKind::Combined] {
        assert!(train(classifier(0), &data, &TrainingMode::new(kind), &schedule(1), 0).is_err());
    }
}

#[test]
fn mode_names_round_trip() {
    for kind in TrainingKind::ALL {
        assert_eq!(kind.name().parse::<TrainingKind>().unwrap(), kind);
    }
    assert!("adv_quarter".parse::<TrainingKind>().is_err());
}
