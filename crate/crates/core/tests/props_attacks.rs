//! Property tests for the attack engine on small linear classifiers.

use proptest::prelude::*;

use robustlab::attacks::{
    attack, on_manifold_attack, pgd_attack, project_ball, random_perturbation_baseline, success_rate, AttackConfig, Norm, Threat,
};
use robustlab::manifold::{Decoder, ManifoldArch, ManifoldConfig, ManifoldModel, Scope};
use robustlab::nn::{ArchitectureKind, Classifier, Layer, Model};
use robustlab::tensor::Tensor;

const SIDE: usize = 8;
const PIXELS: usize = SIDE * SIDE;
const CLASSES: usize = 3;
const BATCH: usize = 6;

fn linear(seed: u64) -> Classifier {
    let layers = vec![Layer::Flatten, Layer::Linear { inputs: PIXELS, outputs: CLASSES }];
    Classifier::build(ArchitectureKind::Custom(layers), &[1, SIDE, SIDE], CLASSES, seed).unwrap()
}

fn images() -> impl Strategy<Value = Tensor> {
    prop::collection::vec(0.0f64..=1.0, BATCH * PIXELS).prop_map(|d| Tensor::new(vec![BATCH, 1, SIDE, SIDE], d).unwrap())
}

fn labels() -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(0usize..CLASSES, BATCH)
}

fn norm() -> impl Strategy<Value = Norm> {
    prop_oneof![Just(Norm::Linf), Just(Norm::L2)]
}

fn config(norm: Norm, epsilon: f64, seed: u64) -> AttackConfig {
    AttackConfig { norm, epsilon, iterations: 15, learning_rate: 0.05, restarts: 2, early_stop: true, seed }
}

fn indices() -> Vec<usize> {
    (0..BATCH).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn results_respect_the_ball_and_the_pixel_box(seed in any::<u64>(), x in images(), y in labels(), n in norm(), eps in 0.0f64..2.0) {
        let model = linear(seed);
        let res = pgd_attack(&model, &x, &y, &indices(), &config(n, eps, seed)).unwrap();
        for (i, r) in res.iter().enumerate() {
            prop_assert!(n.of(&r.perturbation) <= eps + 1e-9);
            prop_assert!(r.adversarial.iter().all(|v| (0.0..=1.0).contains(v)));
            for ((a, p), c) in r.adversarial.iter().zip(&r.perturbation).zip(x.row(i)) {
                prop_assert!((a - (c + p)).abs() < 1e-12);
            }
            prop_assert!((r.perturbation_norm - n.of(&r.perturbation)).abs() < 1e-12);
        }
    }

    #[test]
    fn success_means_misclassified(seed in any::<u64>(), x in images(), y in labels(), n in norm()) {
        let model = linear(seed);
        let res = pgd_attack(&model, &x, &y, &indices(), &config(n, 0.5, seed)).unwrap();
        let adv = Tensor::stack_rows(&[1, SIDE, SIDE], res.iter().map(|r| r.adversarial.as_slice())).unwrap();
        let pred = model.predict(&adv).unwrap();
        for (i, r) in res.iter().enumerate() {
            prop_assert_eq!(r.predicted, pred[i]);
            prop_assert_eq!(r.success, pred[i] != y[i]);
        }
    }

    #[test]
    fn attacks_are_deterministic(seed in any::<u64>(), x in images(), y in labels(), n in norm()) {
        let model = linear(seed);
        let cfg = config(n, 0.3, seed);
        prop_assert_eq!(pgd_attack(&model, &x, &y, &indices(), &cfg).unwrap(), pgd_attack(&model, &x, &y, &indices(), &cfg).unwrap());
    }

    #[test]
    fn a_row_does_not_depend_on_its_batch(seed in any::<u64>(), x in images(), y in labels(), n in norm(), row in 0usize..BATCH) {
        let model = linear(seed);
        let cfg = config(n, 0.3, seed);
        let all = pgd_attack(&model, &x, &y, &indices(), &cfg).unwrap();
        let one = pgd_attack(&model, &x.select_rows(&[row]), &[y[row]], &[row], &cfg).unwrap();
        prop_assert_eq!(&all[row], &one[0]);
    }

    #[test]
    fn zero_budget_leaves_inputs_unchanged(seed in any::<u64>(), x in images(), y in labels(), n in norm()) {
        let model = linear(seed);
        let res = pgd_attack(&model, &x, &y, &indices(), &config(n, 0.0, seed)).unwrap();
        let clean = model.predict(&x).unwrap();
        for (i, r) in res.iter().enumerate() {
            prop_assert_eq!(r.adversarial.as_slice(), x.row(i));
            prop_assert_eq!(r.success, clean[i] != y[i]);
        }
    }

    #[test]
    fn larger_budgets_do_not_lower_the_success_rate(seed in any::<u64>(), x in images(), y in labels(), n in norm()) {
        let model = linear(seed);
        let clean = model.predict(&x).unwrap();
        let eligible: Vec<bool> = clean.iter().zip(&y).map(|(p, l)| p == l).collect();
        prop_assume!(eligible.iter().any(|&e| e));
        let mut last = 0.0;
        for eps in [0.1, 0.2, 0.3] {
            let cfg = AttackConfig { iterations: 40, restarts: 3, ..config(n, eps, seed) };
            let res = pgd_attack(&model, &x, &y, &indices(), &cfg).unwrap();
            let s: Vec<bool> = res.iter().map(|r| r.success).collect();
            let rate = success_rate(&s, &eligible).unwrap();
            prop_assert!(rate >= last, "eps {eps}: {rate} < {last}");
            last = rate;
        }
    }

    #[test]
    fn optimization_never_loses_to_its_random_start(seed in any::<u64>(), x in images(), y in labels(), n in norm()) {
        let model = linear(seed);
        let cfg = AttackConfig { restarts: 1, early_stop: false, ..config(n, 0.3, seed) };
        let base = random_perturbation_baseline(&model, Threat::Image { x: &x }, &y, &indices(), &cfg).unwrap();
        let pgd = pgd_attack(&model, &x, &y, &indices(), &cfg).unwrap();
        for (b, p) in base.iter().zip(&pgd) {
            prop_assert_eq!(b.iterations_used, 0);
            if b.success == p.success {
                prop_assert!(b.final_loss <= p.final_loss + 1e-12, "{} > {}", b.final_loss, p.final_loss);
            } else {
                prop_assert!(p.success);
            }
        }
    }

    #[test]
    fn latent_adversaries_decode_from_the_latent_box(seed in any::<u64>(), z in prop::collection::vec(-2.0f64..=2.0, BATCH * 4), y in labels(), n in norm()) {
        let dec_cfg = ManifoldConfig { latent_dim: 4, arch: ManifoldArch::Mlp { hidden: 16 }, seed, ..ManifoldConfig::default() };
        let decoder = ManifoldModel::new(&[1, SIDE, SIDE], Scope::ClassAgnostic, dec_cfg).unwrap();
        let model = linear(seed);
        let z = Tensor::new(vec![BATCH, 4], z).unwrap();
        let res = on_manifold_attack(&model, &decoder, &z, &y, &indices(), &config(n, 1.0, seed)).unwrap();
        let (lo, hi) = decoder.bounds();
        for (i, r) in res.iter().enumerate() {
            prop_assert!(n.of(&r.perturbation) <= 1.0 + 1e-9);
            let moved: Vec<f64> = z.row(i).iter().zip(&r.perturbation).map(|(a, b)| a + b).collect();
            for (j, v) in moved.iter().enumerate() {
                prop_assert!(*v >= lo[j] - 1e-12 && *v <= hi[j] + 1e-12);
            }
            let decoded = decoder.decode_values(&Tensor::new(vec![1, 4], moved).unwrap()).unwrap();
            for (a, b) in decoded.data().iter().zip(&r.adversarial) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn ball_projection_lands_in_the_ball(v in prop::collection::vec(-5.0f64..5.0, 1..20), n in norm(), eps in 0.0f64..3.0) {
        let mut d = v.clone();
        project_ball(&mut d, n, eps);
        prop_assert!(n.of(&d) <= eps * (1.0 + 1e-12));
        if n.of(&v) <= eps {
            prop_assert_eq!(d, v);
        }
    }
}

#[test]
fn success_rate_ignores_ineligible_inputs() {
    assert_eq!(success_rate(&[true, true, false], &[false, true, true]), Some(0.5));
    assert_eq!(success_rate(&[true], &[false]), None);
}

#[test]
fn invalid_configurations_are_rejected() {
    let model = linear(0);
    let x = Tensor::full(&[1, 1, SIDE, SIDE], 0.5);
    for cfg in [
        AttackConfig::linf(-0.1),
        AttackConfig::linf(f64::NAN),
        AttackConfig { restarts: 0, ..AttackConfig::default() },
        AttackConfig { learning_rate: 0.0, ..AttackConfig::default() },
    ] {
        assert!(attack(&model, Threat::Image { x: &x }, &[0], &[0], &cfg).is_err());
    }
    assert!(pgd_attack(&model, &x, &[CLASSES], &[0], &AttackConfig::default()).is_err());
}
