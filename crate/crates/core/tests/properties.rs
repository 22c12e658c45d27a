mod support;

use bullettrain::corruption::{pgd_generate, AttackConfig, AttackObjective, Bounds};
use bullettrain::evaluation::{clean_accuracy, oracle_separation, robust_accuracy, robust_correct, EvalConfig};
use bullettrain::ledger::StepLedger;
use bullettrain::losses::{combined_bullettrain_loss, loss_var, LossConfig, Segment, Source};
use bullettrain::mining::{classify_batch, signed_variances, ExampleClass, Partition};
use bullettrain::model::{Architecture, Classifier};
use bullettrain::autodiff::Tape;
use bullettrain::tensor::{cross_entropy, Tensor};
use proptest::prelude::*;
use support::fuzz::{self, random_model, uniform};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn mean_ce(model: &Classifier, x: &Tensor, labels: &[usize]) -> f64 {
    let logits = model.forward(x).unwrap();
    labels.iter().enumerate().map(|(i, &y)| cross_entropy(logits.row(i), y).unwrap()).sum::<f64>() / labels.len() as f64
}

#[test]
fn pgd_projection_fuzz() {
    fuzz::pgd_projection(1000).unwrap();
}

#[test]
fn more_pgd_steps_raise_inner_loss() {
    let mut failures = 0;
    for trial in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(10_000 + trial);
        let (d, k, m) = (rng.random_range(2..6), rng.random_range(2..5), 8);
        let model = random_model(&mut rng, d, k);
        let x = uniform(&mut rng, m, d, 0.0, 1.0);
        let labels: Vec<usize> = (0..m).map(|_| rng.random_range(0..k)).collect();
        let eps = rng.random_range(0.05..0.3);
        let run = |steps: usize| {
            let cfg = AttackConfig {
                epsilon: eps,
                step_size: eps / 4.0,
                steps,
                random_init: false,
                bounds: Bounds::default(),
            };
            let adv = pgd_generate(&model, &x, &labels, &cfg, AttackObjective::CrossEntropy, trial, &mut StepLedger::default()).unwrap();
            mean_ce(&model, &adv, &labels)
        };
        if run(8) < run(2) - 1e-12 {
            failures += 1;
        }
    }
    assert!(failures <= 5, "{failures} of 100 instances lost loss with more steps");
}

#[test]
fn classify_batch_fuzz() {
    fuzz::classify(1000).unwrap();
}

fn class_strategy() -> impl Strategy<Value = ExampleClass> {
    prop_oneof![
        Just(ExampleClass::Boundary),
        Just(ExampleClass::Robust),
        Just(ExampleClass::Outlier)
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn grouped_order_is_a_bijection(classes in prop::collection::vec(class_strategy(), 1..64)) {
        let part = Partition::new(classes.clone());
        let order = part.order();
        let inverse = part.inverse_order();
        let mut seen = vec![false; classes.len()];
        for &i in &order {
            prop_assert!(!seen[i]);
            seen[i] = true;
        }
        for (pos, &i) in order.iter().enumerate() {
            prop_assert_eq!(inverse[i], pos);
        }
        let grouped: Vec<usize> = order.iter().map(|&i| classes[i].index()).collect();
        prop_assert!(grouped.windows(2).all(|w| w[0] <= w[1]));
    }
}

/// Loss with clean logits reused for zero-step rows against the same loss
/// on fully materialised views.
fn skip_matches_naive(cfg: LossConfig, trial: u64, boundary_fraction: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(30_000 + trial);
    let (m, k) = (20, rng.random_range(2..10));
    let clean = uniform(&mut rng, m, k, -4.0, 4.0);
    let labels: Vec<usize> = (0..m).map(|_| rng.random_range(0..k)).collect();
    let mut rows: Vec<usize> = (0..m).collect();
    rows.shuffle(&mut rng);
    let nb = (boundary_fraction * m as f64).round() as usize;
    let (active, idle) = rows.split_at(nb);
    let views: Vec<Tensor> = (0..cfg.kind.views()).map(|_| uniform(&mut rng, nb, k, -4.0, 4.0)).collect();
    let segments = vec![
        Segment {
            rows: active.to_vec(),
            source: Source::Computed(views.clone()),
        },
        Segment {
            rows: idle.to_vec(),
            source: Source::ReuseClean,
        },
    ];
    let fast = combined_bullettrain_loss(&clean, &segments, &labels, &cfg).unwrap();

    let full: Vec<Tensor> = views
        .iter()
        .map(|v| {
            let mut t = clean.clone();
            for (r, &i) in active.iter().enumerate() {
                t.row_mut(i).copy_from_slice(v.row(r));
            }
            t
        })
        .collect();
    let tape = Tape::new();
    let c = tape.constant(clean.clone());
    let vs: Vec<_> = full.iter().map(|t| tape.constant(t.clone())).collect();
    let naive = loss_var(c, &vs, &labels, &cfg).unwrap().value().data()[0];
    assert!((fast - naive).abs() <= 1e-10, "{:?}: {fast} vs {naive}", cfg.kind);
}

#[test]
fn skip_optimisation_is_exact() {
    for trial in 0..50 {
        skip_matches_naive(LossConfig::jsd(12.0), trial, 0.35);
        skip_matches_naive(LossConfig::trades(6.0), trial, 0.35);
        skip_matches_naive(LossConfig::at(), trial, 0.35);
        let f = (trial as f64 * 0.37) % 1.0;
        skip_matches_naive(LossConfig::jsd(12.0), 1000 + trial, f);
        skip_matches_naive(LossConfig::trades(6.0), 1000 + trial, f);
    }
}

fn balanced(rng: &mut ChaCha8Rng, n: usize, d: usize, k: usize) -> (Tensor, Vec<usize>) {
    (uniform(rng, n, d, 0.0, 1.0), (0..n).map(|i| i % k).collect())
}

#[test]
fn untrained_model_is_at_chance() {
    let (n, k) = (2000, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(40_000);
    let model = Classifier::new(Architecture::mlp(&[6, 16, k]), 5).unwrap();
    let (x, labels) = balanced(&mut rng, n, 6, k);
    let p = 1.0 / k as f64;
    let upper = p + 3.0 * (p * (1.0 - p) / n as f64).sqrt();
    let cfg = EvalConfig::pgd(0.1, 10, 1);
    let robust = robust_accuracy(&model, &x, &labels, &cfg).unwrap();
    let clean = clean_accuracy(&model, &x, &labels).unwrap();
    assert!(robust <= upper, "robust {robust} above chance bound {upper}");
    assert!(robust <= clean);
}

#[test]
fn evaluation_invariants() {
    let mut rng = ChaCha8Rng::seed_from_u64(40_001);
    let model = Classifier::new(Architecture::mlp(&[3, 12, 3]), 9).unwrap();
    let (x, labels) = balanced(&mut rng, 300, 3, 3);
    let before = model.checksum();

    let mut cfg = EvalConfig::pgd(0.0, 5, 1);
    assert_eq!(robust_accuracy(&model, &x, &labels, &cfg).unwrap(), clean_accuracy(&model, &x, &labels).unwrap());

    cfg = EvalConfig::pgd(0.2, 5, 1);
    cfg.seed = 17;
    cfg.batch_size = 64;
    let one = robust_correct(&model, &x, &labels, &cfg).unwrap();
    cfg.restarts = 2;
    let two = robust_correct(&model, &x, &labels, &cfg).unwrap();
    assert!(one.iter().zip(&two).all(|(&a, &b)| a || !b), "a second restart revived a sample");

    let attack = |steps, epsilon| AttackConfig {
        epsilon,
        step_size: 0.05,
        steps,
        random_init: true,
        bounds: Bounds::default(),
    };
    let streams: Vec<u64> = (0..300).collect();
    let mut ledger = StepLedger::default();
    let a = oracle_separation(&model, &x, &labels, &attack(10, 0.2), AttackObjective::CrossEntropy, 1, &streams, &mut ledger).unwrap();
    let b = oracle_separation(&model, &x, &labels, &attack(3, 0.05), AttackObjective::CrossEntropy, 2, &streams, &mut ledger).unwrap();
    let logits = model.forward(&x).unwrap();
    let mined = classify_batch(&signed_variances(&logits, &labels).unwrap(), 0.5).unwrap();
    for i in 0..300 {
        let o = ExampleClass::Outlier;
        assert_eq!(a[i] == o, b[i] == o);
        assert_eq!(a[i] == o, mined[i] == o);
    }
    assert_eq!(model.checksum(), before);
}
