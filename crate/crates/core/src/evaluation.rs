//! Clean and robust accuracy, oracle separation, and mining-quality stats.

use serde::{Deserialize, Serialize};

use crate::corruption::{AttackConfig, AttackObjective, Bounds, Pgd, SampleBudget};
use crate::error::{Error, Result};
use crate::ledger::StepLedger;
use crate::mining::{signed_variances, ExampleClass};
use crate::model::{predict_label, Classifier};
use crate::rng::derive_seed;
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub steps: usize,
    pub restarts: usize,
    pub epsilon: f64,
    pub step_size: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub bounds: Bounds,
    /// Rows per attack batch; only affects memory.
    #[serde(default = "default_eval_batch")]
    pub batch_size: usize,
}

fn default_eval_batch() -> usize {
    500
}

impl EvalConfig {
    pub fn pgd(epsilon: f64, steps: usize, restarts: usize) -> Self {
        Self {
            steps,
            restarts,
            epsilon,
            step_size: 2.5 * epsilon / steps.max(1) as f64,
            seed: 0,
            bounds: Bounds::default(),
            batch_size: default_eval_batch(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.restarts == 0 {
            return Err(Error::Argument(format!(
                "evaluation needs steps >= 1 and restarts >= 1, got {} and {}",
                self.steps, self.restarts
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Argument("evaluation batch size must be >= 1".into()));
        }
        self.attack().validate()
    }

    fn attack(&self) -> AttackConfig {
        AttackConfig {
            epsilon: self.epsilon,
            step_size: self.step_size,
            steps: self.steps,
            random_init: true,
            bounds: self.bounds,
        }
    }
}

fn check_rows<T: Real>(x: &Tensor<T>, labels: &[usize]) -> Result<()> {
    if x.rows() != labels.len() {
        return Err(Error::Shape(format!("{} rows for {} labels", x.rows(), labels.len())));
    }
    Ok(())
}

fn chunks(n: usize, size: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..n).step_by(size.max(1)).map(move |s| (s, (s + size).min(n)))
}

/// Per-sample correctness on clean inputs.
pub fn clean_correct<T: Real>(model: &Classifier<T>, x: &Tensor<T>, labels: &[usize]) -> Result<Vec<bool>> {
    check_rows(x, labels)?;
    let mut out = Vec::with_capacity(labels.len());
    for (s, e) in chunks(labels.len(), 1000) {
        let idx: Vec<usize> = (s..e).collect();
        let logits = model.forward(&x.select_rows(&idx))?;
        out.extend((0..idx.len()).map(|r| predict_label(logits.row(r)) == labels[s + r]));
    }
    Ok(out)
}

pub fn clean_accuracy<T: Real>(model: &Classifier<T>, x: &Tensor<T>, labels: &[usize]) -> Result<f64> {
    let c = clean_correct(model, x, labels)?;
    Ok(fraction(&c))
}

fn fraction(flags: &[bool]) -> f64 {
    if flags.is_empty() {
        return 0.0;
    }
    flags.iter().filter(|&&b| b).count() as f64 / flags.len() as f64
}

/// Per-sample robustness: correct on the clean point and under every restart.
pub fn robust_correct<T: Real>(
    model: &Classifier<T>,
    x: &Tensor<T>,
    labels: &[usize],
    cfg: &EvalConfig,
) -> Result<Vec<bool>> {
    cfg.validate()?;
    let mut ok = clean_correct(model, x, labels)?;
    if cfg.epsilon == 0.0 {
        return Ok(ok);
    }
    let attack = cfg.attack();
    let pgd = Pgd::new(model, &attack, AttackObjective::CrossEntropy);
    let mut scratch = StepLedger::default();
    for restart in 0..cfg.restarts {
        let seed = derive_seed(cfg.seed, &[restart as u64]);
        for (s, e) in chunks(labels.len(), cfg.batch_size) {
            let idx: Vec<usize> = (s..e).filter(|&i| ok[i]).collect();
            if idx.is_empty() {
                continue;
            }
            let xb = x.select_rows(&idx);
            let yb: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let budgets = vec![
                SampleBudget {
                    steps: cfg.steps,
                    step_size: cfg.step_size,
                };
                idx.len()
            ];
            let streams: Vec<u64> = idx.iter().map(|&i| i as u64).collect();
            let adv = pgd.run(&xb, &yb, &budgets, &streams, seed, &mut scratch)?;
            let logits = model.forward(&adv)?;
            for (r, &i) in idx.iter().enumerate() {
                if predict_label(logits.row(r)) != labels[i] {
                    ok[i] = false;
                }
            }
        }
    }
    Ok(ok)
}

/// Fraction of samples that survive the clean point and all restarts.
pub fn robust_accuracy<T: Real>(
    model: &Classifier<T>,
    x: &Tensor<T>,
    labels: &[usize],
    cfg: &EvalConfig,
) -> Result<f64> {
    Ok(fraction(&robust_correct(model, x, labels, cfg)?))
}

/// Ground-truth classes from a full `N`-step attack: clean mistakes are
/// outliers, samples the attack flips are boundary, the rest robust.
pub fn oracle_separation<T: Real>(
    model: &Classifier<T>,
    x: &Tensor<T>,
    labels: &[usize],
    attack: &AttackConfig,
    objective: AttackObjective,
    seed: u64,
    streams: &[u64],
    ledger: &mut StepLedger,
) -> Result<Vec<ExampleClass>> {
    check_rows(x, labels)?;
    if attack.steps == 0 {
        return Err(Error::Argument("oracle separation needs at least one attack step".into()));
    }
    attack.validate()?;
    let clean = model.forward(x)?;
    let m = labels.len();
    let mut classes = vec![ExampleClass::Robust; m];
    let correct: Vec<usize> = (0..m)
        .filter(|&i| {
            let ok = predict_label(clean.row(i)) == labels[i];
            if !ok {
                classes[i] = ExampleClass::Outlier;
            }
            ok
        })
        .collect();
    if correct.is_empty() {
        return Ok(classes);
    }
    let xb = x.select_rows(&correct);
    let yb: Vec<usize> = correct.iter().map(|&i| labels[i]).collect();
    let sb: Vec<u64> = correct.iter().map(|&i| streams[i]).collect();
    let budgets = vec![
        SampleBudget {
            steps: attack.steps,
            step_size: attack.step_size,
        };
        correct.len()
    ];
    let mut spent = StepLedger::default();
    let adv = Pgd::new(model, attack, objective).run(&xb, &yb, &budgets, &sb, seed, &mut spent)?;
    ledger.separation_steps += spent.generation_steps;
    let logits = model.forward(&adv)?;
    for (r, &i) in correct.iter().enumerate() {
        if predict_label(logits.row(r)) != labels[i] {
            classes[i] = ExampleClass::Boundary;
        }
    }
    Ok(classes)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiningQuality {
    /// `confusion[oracle][predicted]`, indexed boundary, robust, outlier.
    pub confusion: [[u64; 3]; 3],
    /// Mean SVar per oracle class; `None` when the class is empty.
    pub mean_svar: [Option<f64>; 3],
    /// Outlier ≤ boundary ≤ robust over the non-empty classes.
    pub ordered: bool,
}

impl MiningQuality {
    pub fn off_diagonal_fraction(&self) -> f64 {
        let total: u64 = self.confusion.iter().flatten().sum();
        if total == 0 {
            return 0.0;
        }
        let diag: u64 = (0..3).map(|i| self.confusion[i][i]).sum();
        (total - diag) as f64 / total as f64
    }
}

pub fn mining_quality(predicted: &[ExampleClass], oracle: &[ExampleClass], svars: &[f64]) -> Result<MiningQuality> {
    if predicted.len() != oracle.len() || svars.len() != oracle.len() {
        return Err(Error::Shape(format!(
            "{} predicted, {} oracle, {} svars",
            predicted.len(),
            oracle.len(),
            svars.len()
        )));
    }
    let mut confusion = [[0u64; 3]; 3];
    let mut sums = [0.0; 3];
    let mut counts = [0u64; 3];
    for ((p, o), s) in predicted.iter().zip(oracle).zip(svars) {
        confusion[o.index()][p.index()] += 1;
        sums[o.index()] += s;
        counts[o.index()] += 1;
    }
    let mean_svar: [Option<f64>; 3] =
        std::array::from_fn(|c| (counts[c] > 0).then(|| sums[c] / counts[c] as f64));
    let chain: Vec<f64> = [ExampleClass::Outlier, ExampleClass::Boundary, ExampleClass::Robust]
        .iter()
        .filter_map(|c| mean_svar[c.index()])
        .collect();
    let ordered = chain.windows(2).all(|w| w[0] <= w[1]);
    Ok(MiningQuality {
        confusion,
        mean_svar,
        ordered,
    })
}

/// Mining quality of one batch against the oracle, on the given model.
pub fn batch_mining_quality<T: Real>(
    model: &Classifier<T>,
    x: &Tensor<T>,
    labels: &[usize],
    predicted: &[ExampleClass],
    attack: &AttackConfig,
    seed: u64,
) -> Result<MiningQuality> {
    let streams: Vec<u64> = (0..labels.len() as u64).collect();
    let oracle = oracle_separation(
        model,
        x,
        labels,
        attack,
        AttackObjective::CrossEntropy,
        seed,
        &streams,
        &mut StepLedger::default(),
    )?;
    let svars = signed_variances(&model.forward(x)?, labels)?;
    mining_quality(predicted, &oracle, &svars)
}
