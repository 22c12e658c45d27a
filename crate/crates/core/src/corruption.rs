//! Corruption generators `G_N`: l∞ PGD, FGSM and a three-op augmentation chain.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::ledger::StepLedger;
use crate::model::Classifier;
use crate::rng::{derive_seed, sample_rng};
use crate::tensor::{softmax_rows, Real, Tensor, PROB_FLOOR};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bounds {
    pub low: f64,
    pub high: f64,
}

impl Default for Bounds {
    fn default() -> Self {
        Self {
            low: 0.0,
            high: 1.0,
        }
    }
}

impl Bounds {
    pub fn validate(&self) -> Result<()> {
        if self.low < self.high && self.low.is_finite() && self.high.is_finite() {
            Ok(())
        } else {
            Err(Error::Argument(format!(
                "input bounds need low < high, got [{}, {}]",
                self.low, self.high
            )))
        }
    }
}

/// Inner objective maximised by the attack.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AttackObjective {
    /// Cross-entropy against the true label (PGD adversarial training).
    #[default]
    CrossEntropy,
    /// `KL(softmax(h(x)) ‖ softmax(h(x')))` against the clean prediction.
    KlToClean,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    pub epsilon: f64,
    pub step_size: f64,
    pub steps: usize,
    pub random_init: bool,
    #[serde(default)]
    pub bounds: Bounds,
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Argument(format!("epsilon must be >= 0, got {}", self.epsilon)));
        }
        if !(self.step_size >= 0.0 && self.step_size.is_finite()) {
            return Err(Error::Argument(format!(
                "step size must be >= 0, got {}",
                self.step_size
            )));
        }
        self.bounds.validate()
    }
}

/// Step count and step size granted to one sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleBudget {
    pub steps: usize,
    pub step_size: f64,
}

/// Batched l∞ PGD against a fixed model.
///
/// Each sample runs its own number of steps. At iteration `t` only samples
/// with more than `t` steps are forwarded, so a batch ordered by decreasing
/// budget shrinks to a prefix as the iterations progress.
#[derive(Debug, Clone, Copy)]
pub struct Pgd<'m, T: Real> {
    pub model: &'m Classifier<T>,
    pub epsilon: f64,
    pub random_init: bool,
    pub bounds: Bounds,
    pub objective: AttackObjective,
}

impl<'m, T: Real> Pgd<'m, T> {
    pub fn new(model: &'m Classifier<T>, cfg: &AttackConfig, objective: AttackObjective) -> Self {
        Self {
            model,
            epsilon: cfg.epsilon,
            random_init: cfg.random_init,
            bounds: cfg.bounds,
            objective,
        }
    }

    /// Perturbs `x` row by row. `streams[i]` names the random stream of row
    /// `i`; zero-step rows are returned unchanged even with random init.
    pub fn run(
        &self,
        x: &Tensor<T>,
        labels: &[usize],
        budgets: &[SampleBudget],
        streams: &[u64],
        seed: u64,
        ledger: &mut StepLedger,
    ) -> Result<Tensor<T>> {
        let m = x.rows();
        if labels.len() != m || budgets.len() != m || streams.len() != m {
            return Err(Error::Shape(format!(
                "batch of {m} rows with {} labels, {} budgets, {} streams",
                labels.len(),
                budgets.len(),
                streams.len()
            )));
        }
        if !(self.epsilon >= 0.0) {
            return Err(Error::Argument("epsilon must be >= 0".into()));
        }
        self.bounds.validate()?;

        let d = x.row_len();
        let eps = T::from_f64_lossy(self.epsilon);
        let (low, high) = (
            T::from_f64_lossy(self.bounds.low),
            T::from_f64_lossy(self.bounds.high),
        );
        let mut adv = x.clone();

        if self.random_init && self.epsilon > 0.0 {
            for i in 0..m {
                if budgets[i].steps == 0 {
                    continue;
                }
                let mut rng = sample_rng(seed, streams[i]);
                let orig = x.row(i);
                for (j, v) in adv.row_mut(i).iter_mut().enumerate() {
                    let delta: f64 = rng.random_range(-self.epsilon..=self.epsilon);
                    *v = (orig[j] + T::from_f64_lossy(delta)).max(low).min(high);
                }
            }
        }

        let clean_probs = match self.objective {
            AttackObjective::KlToClean => Some(softmax_rows(&self.model.forward(x)?)?),
            AttackObjective::CrossEntropy => None,
        };

        let max_steps = budgets.iter().map(|b| b.steps).max().unwrap_or(0);
        for t in 0..max_steps {
            let active: Vec<usize> = (0..m).filter(|&i| budgets[i].steps > t).collect();
            let batch = adv.select_rows(&active);
            let batch_labels: Vec<usize> = active.iter().map(|&i| labels[i]).collect();
            let batch_probs = clean_probs.as_ref().map(|p| p.select_rows(&active));
            let grad = input_gradient(self.model, &batch, &batch_labels, self.objective, batch_probs.as_ref())?;
            for (r, &i) in active.iter().enumerate() {
                let g = grad.row(r);
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFiniteGradient { sample: i });
                }
                let alpha = T::from_f64_lossy(budgets[i].step_size);
                let orig = x.row(i);
                let row = &mut adv.data_mut()[i * d..(i + 1) * d];
                for j in 0..d {
                    let step = if g[j] > T::zero() {
                        alpha
                    } else if g[j] < T::zero() {
                        -alpha
                    } else {
                        T::zero()
                    };
                    let v = (row[j] + step).max(orig[j] - eps).min(orig[j] + eps);
                    row[j] = v.max(low).min(high);
                }
            }
            ledger.charge_generation(active.len() as u64);
        }
        Ok(adv)
    }
}

/// Gradient of the summed per-sample attack objective w.r.t. the input rows.
///
/// The objective is a sum, not a mean, so each row's gradient is independent
/// of which other rows share the batch.
pub fn input_gradient<T: Real>(
    model: &Classifier<T>,
    x: &Tensor<T>,
    labels: &[usize],
    objective: AttackObjective,
    clean_probs: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let tape = Tape::new();
    let params = model.parameter_vars(&tape, false);
    let xv = tape.leaf(x.clone());
    let logits = model.forward_on_tape(xv, &params)?;
    let loss = match objective {
        AttackObjective::CrossEntropy => logits.log_softmax().pick(labels)?.sum().scale(-T::one()),
        AttackObjective::KlToClean => {
            let probs = clean_probs
                .ok_or_else(|| Error::Usage("KL objective needs clean probabilities".into()))?;
            let floor = T::from_f64_lossy(PROB_FLOOR);
            let p = tape.constant(probs.clone());
            let log_p = tape.constant(probs.map(|v| v.max(floor).ln()));
            p.mul(log_p.sub(logits.log_softmax())?)?.sum()
        }
    };
    let grads = tape.backward(loss)?;
    grads
        .wrt(xv)
        .ok_or_else(|| Error::Internal("input gradient missing".into()))
}

/// `N`-step PGD with the same budget for every row. Streams are row indices.
pub fn pgd_generate<T: Real>(
    model: &Classifier<T>,
    x: &Tensor<T>,
    labels: &[usize],
    cfg: &AttackConfig,
    objective: AttackObjective,
    seed: u64,
    ledger: &mut StepLedger,
) -> Result<Tensor<T>> {
    cfg.validate()?;
    let budget = SampleBudget {
        steps: cfg.steps,
        step_size: cfg.step_size,
    };
    let m = x.rows();
    let streams: Vec<u64> = (0..m as u64).collect();
    Pgd::new(model, cfg, objective).run(x, labels, &vec![budget; m], &streams, seed, ledger)
}

/// Single-step FGSM: PGD with one step of size `ε`.
pub fn fgsm_generate<T: Real>(
    model: &Classifier<T>,
    x: &Tensor<T>,
    labels: &[usize],
    cfg: &AttackConfig,
    objective: AttackObjective,
    seed: u64,
    ledger: &mut StepLedger,
) -> Result<Tensor<T>> {
    let single = AttackConfig {
        steps: 1,
        step_size: cfg.epsilon,
        ..*cfg
    };
    pgd_generate(model, x, labels, &single, objective, seed, ledger)
}

/// Simplified augmentation chain: Gaussian noise, integer translation with
/// edge padding, and square cutout, optionally mixed with the original.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    /// `[channels, height, width]` of one row.
    pub image: [usize; 3],
    /// Number of ops drawn (with replacement) from the enabled ones.
    pub chain_length: usize,
    pub noise_sigma: f64,
    pub translate_px: usize,
    pub cutout_size: usize,
    /// Convex mix `β·x + (1−β)·chain(x)` with `β ~ U(0, 1)` per sample.
    pub mix: bool,
    #[serde(default)]
    pub bounds: Bounds,
}

impl AugmentConfig {
    pub fn new(image: [usize; 3]) -> Self {
        Self {
            image,
            chain_length: 3,
            noise_sigma: 0.1,
            translate_px: 2,
            cutout_size: 8,
            mix: true,
            bounds: Bounds::default(),
        }
    }

    fn enabled_ops(&self) -> Vec<AugmentOp> {
        let mut ops = Vec::new();
        if self.noise_sigma > 0.0 {
            ops.push(AugmentOp::Noise);
        }
        if self.translate_px > 0 {
            ops.push(AugmentOp::Translate);
        }
        if self.cutout_size > 0 {
            ops.push(AugmentOp::Cutout);
        }
        ops
    }
}

#[derive(Debug, Clone, Copy)]
enum AugmentOp {
    Noise,
    Translate,
    Cutout,
}

fn augment_row<T: Real>(row: &[T], cfg: &AugmentConfig, ops: &[AugmentOp], rng: &mut impl Rng) -> Vec<T> {
    let [c, h, w] = cfg.image;
    let mut img = row.to_vec();
    if !ops.is_empty() {
        for _ in 0..cfg.chain_length {
            match ops[rng.random_range(0..ops.len())] {
                AugmentOp::Noise => {
                    for v in img.iter_mut() {
                        let z: f64 = StandardNormal.sample(rng);
                        *v = *v + T::from_f64_lossy(cfg.noise_sigma * z);
                    }
                }
                AugmentOp::Translate => {
                    let t = cfg.translate_px as i64;
                    let dy = rng.random_range(-t..=t);
                    let dx = rng.random_range(-t..=t);
                    let src = img.clone();
                    for ch in 0..c {
                        for i in 0..h {
                            let si = (i as i64 - dy).clamp(0, h as i64 - 1) as usize;
                            for j in 0..w {
                                let sj = (j as i64 - dx).clamp(0, w as i64 - 1) as usize;
                                img[(ch * h + i) * w + j] = src[(ch * h + si) * w + sj];
                            }
                        }
                    }
                }
                AugmentOp::Cutout => {
                    let s = cfg.cutout_size;
                    let ci = rng.random_range(0..h) as i64;
                    let cj = rng.random_range(0..w) as i64;
                    let half = (s / 2) as i64;
                    let fill = T::from_f64_lossy(cfg.bounds.low);
                    for ch in 0..c {
                        for i in (ci - half).max(0)..(ci - half + s as i64).min(h as i64) {
                            for j in (cj - half).max(0)..(cj - half + s as i64).min(w as i64) {
                                img[(ch * h + i as usize) * w + j as usize] = fill;
                            }
                        }
                    }
                }
            }
        }
    }
    let beta = if cfg.mix {
        T::from_f64_lossy(rng.random_range(0.0..1.0))
    } else {
        T::zero()
    };
    let (low, high) = (
        T::from_f64_lossy(cfg.bounds.low),
        T::from_f64_lossy(cfg.bounds.high),
    );
    // x + (1−β)(chain − x) is exactly x whenever the chain left x untouched.
    img.iter()
        .zip(row)
        .map(|(&a, &x)| (x + (T::one() - beta) * (a - x)).max(low).min(high))
        .collect()
}

/// Two independently sampled augmented variants `(x′, x″)` of every row.
/// One generation step is charged per variant per row.
pub fn augment_generate<T: Real>(
    x: &Tensor<T>,
    cfg: &AugmentConfig,
    seed: u64,
    streams: &[u64],
    ledger: &mut StepLedger,
) -> Result<(Tensor<T>, Tensor<T>)> {
    cfg.bounds.validate()?;
    let d: usize = cfg.image.iter().product();
    if x.row_len() != d {
        return Err(Error::Shape(format!(
            "augmentation expects rows of {:?} = {d} values, got {}",
            cfg.image,
            x.row_len()
        )));
    }
    if streams.len() != x.rows() {
        return Err(Error::Shape(format!(
            "{} streams for {} rows",
            streams.len(),
            x.rows()
        )));
    }
    let ops = cfg.enabled_ops();
    let mut variants = Vec::with_capacity(2);
    for variant in 0..2u64 {
        let variant_seed = derive_seed(seed, &[variant]);
        let mut out = x.clone();
        for (i, &stream) in streams.iter().enumerate() {
            let mut rng = sample_rng(variant_seed, stream);
            let row = augment_row(x.row(i), cfg, &ops, &mut rng);
            out.row_mut(i).copy_from_slice(&row);
        }
        ledger.charge_generation(x.rows() as u64);
        variants.push(out);
    }
    let second = variants.pop().expect("two variants");
    let first = variants.pop().expect("two variants");
    Ok((first, second))
}
