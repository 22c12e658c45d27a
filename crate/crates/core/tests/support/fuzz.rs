//! Randomised invariant checks for PGD projection and batch classification.
//! Each returns the first violation found.

use bullettrain::corruption::{pgd_generate, AttackConfig, AttackObjective, Bounds};
use bullettrain::ledger::StepLedger;
use bullettrain::mining::{classify_batch, percentile, signed_variances, ExampleClass, Partition};
use bullettrain::model::{predict_label, Architecture, Classifier};
use bullettrain::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor {
    Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

pub fn random_model(rng: &mut ChaCha8Rng, d: usize, k: usize) -> Classifier {
    let hidden = rng.random_range(2..8);
    Classifier::new(Architecture::mlp(&[d, hidden, k]), rng.random()).unwrap()
}

fn check_ball(adv: &Tensor, x: &Tensor, cfg: &AttackConfig) -> Result<(), String> {
    for (a, b) in adv.data().iter().zip(x.data()) {
        if (a - b).abs() > cfg.epsilon + 1e-12 {
            return Err(format!("|δ| {} > ε {}", (a - b).abs(), cfg.epsilon));
        }
        if *a < cfg.bounds.low || *a > cfg.bounds.high {
            return Err(format!("{a} outside [{}, {}]", cfg.bounds.low, cfg.bounds.high));
        }
    }
    Ok(())
}

/// Random models, inputs, radii and step sizes at N = 10. One trial in ten
/// also checks every intermediate iterate, through shorter runs: with the
/// same seed a k-step run stops at the k-th iterate of a longer one.
pub fn pgd_projection(trials: u64) -> Result<(), String> {
    for trial in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(trial);
        let (d, k, m) = (rng.random_range(1..6), rng.random_range(2..5), rng.random_range(1..5));
        let model = random_model(&mut rng, d, k);
        let bounds = if trial % 4 == 0 {
            Bounds { low: -2.0, high: 0.5 }
        } else {
            Bounds::default()
        };
        let x = uniform(&mut rng, m, d, bounds.low, bounds.high);
        let labels: Vec<usize> = (0..m).map(|_| rng.random_range(0..k)).collect();
        let base = AttackConfig {
            epsilon: rng.random_range(0.0..0.6),
            step_size: rng.random_range(0.0..0.4),
            steps: 10,
            random_init: rng.random_bool(0.7),
            bounds,
        };
        let fail = |e: String| format!("trial {trial}: {e}");
        for steps in [0, 10] {
            let cfg = AttackConfig { steps, ..base };
            let mut ledger = StepLedger::default();
            let adv = pgd_generate(&model, &x, &labels, &cfg, AttackObjective::CrossEntropy, trial, &mut ledger)
                .map_err(|e| fail(e.to_string()))?;
            if ledger.generation_steps != (steps * m) as u64 {
                return Err(fail(format!("charged {} steps for {m}×{steps}", ledger.generation_steps)));
            }
            if steps == 0 && !cfg.random_init && adv != x {
                return Err(fail("zero-step run moved the input".into()));
            }
            check_ball(&adv, &x, &cfg).map_err(fail)?;
        }
        if trial % 10 == 0 {
            for steps in 1..10 {
                let cfg = AttackConfig { steps, ..base };
                let adv = pgd_generate(&model, &x, &labels, &cfg, AttackObjective::KlToClean, trial, &mut StepLedger::default())
                    .map_err(|e| fail(e.to_string()))?;
                check_ball(&adv, &x, &cfg).map_err(fail)?;
            }
        }
    }
    Ok(())
}

/// Partition, percentile rule, scale invariance, and outliers equal to the
/// clean misclassification oracle.
pub fn classify(trials: u64) -> Result<(), String> {
    for trial in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(20_000 + trial);
        let (m, k) = (rng.random_range(1..40), rng.random_range(2..11));
        let logits = uniform(&mut rng, m, k, -3.0, 3.0);
        let labels: Vec<usize> = (0..m).map(|_| rng.random_range(0..k)).collect();
        let svars = signed_variances(&logits, &labels).unwrap();
        let f_r = if trial % 7 == 0 { 0.0 } else { rng.random_range(0.0..=1.0) };
        let classes = classify_batch(&svars, f_r).unwrap();
        let fail = |e: String| Err(format!("trial {trial}: {e}"));
        if classes.len() != m || Partition::new(classes.clone()).counts().iter().sum::<usize>() != m {
            return fail("classes do not partition the batch".into());
        }
        let t = percentile(&svars, 1.0 - f_r).unwrap();
        for i in 0..m {
            let wrong = predict_label(logits.row(i)) != labels[i];
            if (classes[i] == ExampleClass::Outlier) != wrong {
                return fail(format!("row {i}: outlier flag disagrees with the misclassification oracle"));
            }
            let expect = if svars[i] < 0.0 {
                ExampleClass::Outlier
            } else if svars[i] < t {
                ExampleClass::Boundary
            } else {
                ExampleClass::Robust
            };
            if classes[i] != expect {
                return fail(format!("row {i}: {:?}, threshold rule says {expect:?}", classes[i]));
            }
        }
        let scaled: Vec<f64> = svars.iter().map(|s| s * 4.0).collect();
        if classify_batch(&scaled, f_r).unwrap() != classes {
            return fail("classes changed under positive rescaling".into());
        }
    }
    Ok(())
}
