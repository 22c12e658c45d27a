//! Baseline robust training and BulletTrain with per-class generation budgets.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::corruption::{augment_generate, AttackConfig, AttackObjective, AugmentConfig, Pgd, SampleBudget};
use crate::error::{Error, Result};
use crate::evaluation::oracle_separation;
use crate::ledger::{Fractions, StepLedger};
use crate::losses::{combined_loss_var, LossConfig, LossKind, Segment, Source};
use crate::mining::{classify_batch, measure_f_o, signed_variances, ExampleClass, MiningConfig, MiningState, Partition};
use crate::model::{Classifier, Gradients, Optimizer, OptimizerConfig};
use crate::rng::derive_seed;
use crate::tensor::{Real, Tensor};

/// Generation steps and step sizes per example class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComputeBudget {
    pub n_o: usize,
    pub n_r: usize,
    pub n_b: usize,
    pub alpha_o: f64,
    pub alpha_r: f64,
    pub alpha_b: f64,
}

impl ComputeBudget {
    /// Step sizes follow the attack's `α` for classes that get the full
    /// `N_B` steps and `1.7ε/N_c` for reduced ones. Ordering is checked.
    pub fn new(n_o: usize, n_r: usize, n_b: usize, attack: &AttackConfig) -> Result<Self> {
        let b = Self::unordered(n_o, n_r, n_b, attack);
        b.validate()?;
        Ok(b)
    }

    /// Like [`ComputeBudget::new`] without the `N_O ≤ N_R ≤ N_B` check, for
    /// leave-one-out studies that starve one class.
    pub fn unordered(n_o: usize, n_r: usize, n_b: usize, attack: &AttackConfig) -> Self {
        let alpha = |n: usize| {
            if n == 0 {
                0.0
            } else if n == n_b {
                attack.step_size
            } else {
                1.7 * attack.epsilon / n as f64
            }
        };
        Self {
            n_o,
            n_r,
            n_b,
            alpha_o: alpha(n_o),
            alpha_r: alpha(n_r),
            alpha_b: alpha(n_b),
        }
    }

    /// The same `N` steps and step size for every class.
    pub fn uniform(n: usize, alpha: f64) -> Self {
        Self {
            n_o: n,
            n_r: n,
            n_b: n,
            alpha_o: alpha,
            alpha_r: alpha,
            alpha_b: alpha,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.n_o <= self.n_r && self.n_r <= self.n_b) {
            return Err(Error::Argument(format!(
                "budget needs N_O <= N_R <= N_B, got ({}, {}, {})",
                self.n_o, self.n_r, self.n_b
            )));
        }
        self.validate_step_sizes()
    }

    fn validate_step_sizes(&self) -> Result<()> {
        for a in [self.alpha_o, self.alpha_r, self.alpha_b] {
            if !(a >= 0.0 && a.is_finite()) {
                return Err(Error::Argument(format!("step size {a} must be finite and >= 0")));
            }
        }
        Ok(())
    }

    pub fn for_class(&self, class: ExampleClass) -> SampleBudget {
        match class {
            ExampleClass::Boundary => SampleBudget {
                steps: self.n_b,
                step_size: self.alpha_b,
            },
            ExampleClass::Robust => SampleBudget {
                steps: self.n_r,
                step_size: self.alpha_r,
            },
            ExampleClass::Outlier => SampleBudget {
                steps: self.n_o,
                step_size: self.alpha_o,
            },
        }
    }
}

/// Fractions quoted to two decimals each can sum to anywhere within 0.015
/// of 1.
const FRACTION_SUM_TOLERANCE: f64 = 0.015;

fn check_fractions(f: &Fractions) -> Result<()> {
    let parts = [f.boundary, f.robust, f.outlier];
    if parts.iter().any(|v| !(0.0..=1.0).contains(v)) || (f.total() - 1.0).abs() > FRACTION_SUM_TOLERANCE {
        return Err(Error::Argument(format!(
            "fractions ({}, {}, {}) must lie in [0, 1] and sum to 1",
            f.boundary, f.robust, f.outlier
        )));
    }
    Ok(())
}

/// `(N+1) / (F_B·N_B + F_R·N_R + F_O·N_O + 1)`.
pub fn theoretical_speedup(n: usize, budget: &ComputeBudget, fractions: &Fractions) -> Result<f64> {
    check_fractions(fractions)?;
    let spent = fractions.boundary * budget.n_b as f64
        + fractions.robust * budget.n_r as f64
        + fractions.outlier * budget.n_o as f64;
    Ok((n as f64 + 1.0) / (spent + 1.0))
}

/// Pass-count speedup of JSD training when only boundary samples are
/// augmented: 3 passes per sample against `1 + 2·F_B`.
pub fn jsd_cost_speedup(f_b: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&f_b) {
        return Err(Error::Argument(format!("boundary fraction {f_b} outside [0, 1]")));
    }
    Ok(3.0 / (1.0 + 2.0 * f_b))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: OptimizerConfig,
    pub loss: LossConfig,
    /// Baseline generator; `steps` is the baseline `N`.
    pub attack: AttackConfig,
    #[serde(default = "default_shuffle")]
    pub shuffle: bool,
    /// Ramps `ε` and every step size linearly over this many epochs,
    /// reaching the full radius at the end of the ramp. 0 disables it.
    #[serde(default)]
    pub epsilon_warmup_epochs: usize,
}

fn default_shuffle() -> bool {
    true
}

impl TrainConfig {
    /// Fraction of the full radius used in `epoch`.
    pub fn epsilon_scale(&self, epoch: usize) -> f64 {
        if self.epsilon_warmup_epochs == 0 {
            1.0
        } else {
            ((epoch + 1) as f64 / self.epsilon_warmup_epochs as f64).min(1.0)
        }
    }

    fn at_epoch(&self, epoch: usize) -> Self {
        let s = self.epsilon_scale(epoch);
        if s == 1.0 {
            return *self;
        }
        let mut c = *self;
        c.attack.epsilon *= s;
        c.attack.step_size *= s;
        c
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Argument("batch size must be >= 1".into()));
        }
        self.loss.validate()?;
        self.optimizer.validate()?;
        self.attack.validate()
    }
}

/// How a batch is split into classes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Separation {
    /// Signed prediction variance against the running `F_R`.
    #[default]
    Mining,
    /// Ground truth from an `N`-step attack; costs are kept out of training.
    Oracle { steps: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BulletTrainConfig {
    pub budget: ComputeBudget,
    pub mining: MiningConfig,
    pub separation: Separation,
    /// Skip the budget ordering check (leave-one-out studies).
    pub allow_unordered: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Mode<'a> {
    Baseline,
    BulletTrain(&'a BulletTrainConfig),
}

/// Work and mining statistics of one epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub ledger: StepLedger,
    pub fractions: Fractions,
    pub f_r_estimate: f64,
    pub mean_loss: f64,
    pub wall_ms: u128,
}

/// Per-epoch hook; returning an error stops training.
pub trait Observer<T: Real> {
    fn on_batch(&mut self, _epoch: usize, _batch: usize, _info: &BatchInfo<'_, T>) -> Result<()> {
        Ok(())
    }

    fn on_epoch(&mut self, _model: &Classifier<T>, _stats: &EpochStats) -> Result<()> {
        Ok(())
    }
}

/// What the trainer saw for one batch, before the parameter update.
#[derive(Debug)]
pub struct BatchInfo<'a, T: Real> {
    pub model: &'a Classifier<T>,
    pub x: &'a Tensor<T>,
    pub labels: &'a [usize],
    pub classes: Option<&'a [ExampleClass]>,
}

pub struct NoObserver;

impl<T: Real> Observer<T> for NoObserver {}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub ledger: StepLedger,
    pub epochs: Vec<EpochStats>,
    pub mining: Option<MiningState>,
}

const DIVERGENCE_LIMIT: f64 = 1e6;
const DIVERGENCE_PATIENCE: usize = 3;

/// Alg. 1: every sample gets the full `N`-step corruption.
pub fn train_baseline<T: Real>(
    model: &mut Classifier<T>,
    x: &Tensor<T>,
    labels: &[usize],
    cfg: &TrainConfig,
    observer: &mut dyn Observer<T>,
) -> Result<TrainOutcome> {
    train(model, x, labels, cfg, Mode::Baseline, observer)
}

/// BulletTrain: per-batch separation, then class-specific budgets.
pub fn train_bullettrain<T: Real>(
    model: &mut Classifier<T>,
    x: &Tensor<T>,
    labels: &[usize],
    cfg: &TrainConfig,
    bt: &BulletTrainConfig,
    observer: &mut dyn Observer<T>,
) -> Result<TrainOutcome> {
    if bt.allow_unordered {
        bt.budget.validate_step_sizes()?;
    } else {
        bt.budget.validate()?;
    }
    bt.mining.validate()?;
    if let Separation::Oracle { steps: 0 } = bt.separation {
        return Err(Error::Argument("oracle separation needs at least one step".into()));
    }
    train(model, x, labels, cfg, Mode::BulletTrain(bt), observer)
}

fn objective(kind: LossKind) -> AttackObjective {
    match kind {
        LossKind::Trades => AttackObjective::KlToClean,
        _ => AttackObjective::CrossEntropy,
    }
}

/// Generator for JSD training: the attack's bounds and the model input
/// shape, with default magnitudes.
pub fn default_augment<T: Real>(model: &Classifier<T>, attack: &AttackConfig) -> AugmentConfig {
    let input = &model.architecture().input;
    let image = match input.as_slice() {
        [c, h, w] => [*c, *h, *w],
        _ => [1, 1, model.input_dim()],
    };
    AugmentConfig {
        bounds: attack.bounds,
        ..AugmentConfig::new(image)
    }
}

fn train<T: Real>(
    model: &mut Classifier<T>,
    x: &Tensor<T>,
    labels: &[usize],
    cfg: &TrainConfig,
    mode: Mode<'_>,
    observer: &mut dyn Observer<T>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    train_with_augment(model, x, labels, cfg, mode, None, observer)
}

/// Training with an explicit augmentation generator for JSD runs.
pub fn train_jsd<T: Real>(
    model: &mut Classifier<T>,
    x: &Tensor<T>,
    labels: &[usize],
    cfg: &TrainConfig,
    bt: Option<&BulletTrainConfig>,
    augment: &AugmentConfig,
    observer: &mut dyn Observer<T>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if cfg.loss.kind != LossKind::Jsd {
        return Err(Error::Usage("train_jsd needs the JSD loss".into()));
    }
    let mode = match bt {
        Some(b) => {
            b.budget.validate()?;
            b.mining.validate()?;
            Mode::BulletTrain(b)
        }
        None => Mode::Baseline,
    };
    train_with_augment(model, x, labels, cfg, mode, Some(augment), observer)
}

fn train_with_augment<T: Real>(
    model: &mut Classifier<T>,
    x: &Tensor<T>,
    labels: &[usize],
    cfg: &TrainConfig,
    mode: Mode<'_>,
    augment: Option<&AugmentConfig>,
    observer: &mut dyn Observer<T>,
) -> Result<TrainOutcome> {
    let n = labels.len();
    if x.rows() != n || n == 0 {
        return Err(Error::Shape(format!("{} rows for {} labels", x.rows(), n)));
    }
    if x.row_len() != model.input_dim() {
        return Err(Error::Shape(format!(
            "inputs have {} features, model expects {}",
            x.row_len(),
            model.input_dim()
        )));
    }
    let k = model.num_classes();
    if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::Argument(format!("label {bad} out of range for {k} classes")));
    }
    let default_aug;
    let augment = match (cfg.loss.kind, augment) {
        (LossKind::Jsd, Some(a)) => Some(a),
        (LossKind::Jsd, None) => {
            default_aug = default_augment(model, &cfg.attack);
            Some(&default_aug)
        }
        _ => None,
    };

    let mut opt = Optimizer::new(cfg.optimizer);
    let mut mining = match mode {
        Mode::BulletTrain(bt) => Some(MiningState::new(bt.mining)?),
        Mode::Baseline => None,
    };
    let mut total = StepLedger::default();
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut bad_streak = 0usize;
    let mut order: Vec<usize> = (0..n).collect();

    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let scale = cfg.epsilon_scale(epoch);
        let epoch_cfg = cfg.at_epoch(epoch);
        let cfg = &epoch_cfg;
        if cfg.shuffle {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[0x5348, epoch as u64]));
            order.shuffle(&mut rng);
        }
        let mut ledger = StepLedger::default();
        let mut loss_sum = 0.0;
        let mut loss_count = 0usize;
        for (batch, ids) in order.chunks(cfg.batch_size).enumerate() {
            let xb = x.select_rows(ids);
            let yb: Vec<usize> = ids.iter().map(|&i| labels[i]).collect();
            let streams: Vec<u64> = ids.iter().map(|&i| i as u64).collect();
            let seed = derive_seed(cfg.seed, &[epoch as u64, batch as u64]);
            let step = BatchStep {
                model,
                x: &xb,
                labels: &yb,
                streams: &streams,
                seed,
                cfg,
                augment,
            };
            let (grads, loss) = match mode {
                Mode::Baseline => {
                    let budget = SampleBudget {
                        steps: cfg.attack.steps,
                        step_size: cfg.attack.step_size,
                    };
                    observer.on_batch(epoch, batch, &BatchInfo { model, x: &xb, labels: &yb, classes: None })?;
                    let budgets = vec![budget; yb.len()];
                    let (g, l, _) = step.run(&budgets, None, &mut ledger)?;
                    for _ in 0..yb.len() {
                        ledger.record_class(ExampleClass::Boundary);
                    }
                    (g, l)
                }
                Mode::BulletTrain(bt) => {
                    let state = mining.as_mut().expect("mining state");
                    let clean = model.forward(&xb)?;
                    state.f_o = measure_f_o(&clean, &yb)?;
                    let classes = match bt.separation {
                        Separation::Mining => classify_batch(&signed_variances(&clean, &yb)?, state.f_r)?,
                        Separation::Oracle { steps } => {
                            let oracle_attack = AttackConfig { steps, ..cfg.attack };
                            oracle_separation(
                                model,
                                &xb,
                                &yb,
                                &oracle_attack,
                                objective(cfg.loss.kind),
                                derive_seed(seed, &[0x0c]),
                                &streams,
                                &mut ledger,
                            )?
                        }
                    };
                    observer.on_batch(epoch, batch, &BatchInfo { model, x: &xb, labels: &yb, classes: Some(&classes) })?;
                    for &c in &classes {
                        ledger.record_class(c);
                    }
                    let partition = Partition::new(classes);
                    let budgets: Vec<SampleBudget> = partition
                        .classes
                        .iter()
                        .map(|&c| {
                            let b = bt.budget.for_class(c);
                            SampleBudget {
                                steps: b.steps,
                                step_size: b.step_size * scale,
                            }
                        })
                        .collect();
                    let (g, l, corrupted) = step.run(&budgets, Some(&partition), &mut ledger)?;
                    state.update_f_r(&corrupted, &yb)?;
                    (g, l)
                }
            };
            if !loss.is_finite() || loss > DIVERGENCE_LIMIT || !grads.is_finite() {
                bad_streak += 1;
                if bad_streak >= DIVERGENCE_PATIENCE {
                    return Err(Error::Diverged { epoch, batch, loss });
                }
                continue;
            }
            bad_streak = 0;
            opt.step(model, &grads)?;
            ledger.updates += 1;
            loss_sum += loss;
            loss_count += 1;
        }
        let stats = EpochStats {
            epoch,
            fractions: ledger.fractions(),
            ledger: ledger.clone(),
            f_r_estimate: mining.map(|m| m.f_r).unwrap_or(0.0),
            mean_loss: if loss_count > 0 { loss_sum / loss_count as f64 } else { f64::NAN },
            wall_ms: started.elapsed().as_millis(),
        };
        total.absorb(&ledger);
        observer.on_epoch(model, &stats)?;
        epochs.push(stats);
    }
    Ok(TrainOutcome {
        ledger: total,
        epochs,
        mining,
    })
}

struct BatchStep<'a, T: Real> {
    model: &'a Classifier<T>,
    x: &'a Tensor<T>,
    labels: &'a [usize],
    streams: &'a [u64],
    seed: u64,
    cfg: &'a TrainConfig,
    augment: Option<&'a AugmentConfig>,
}

impl<T: Real> BatchStep<'_, T> {
    /// Generates corrupted inputs under per-sample budgets and evaluates the
    /// loss gradient. Returns gradients, loss value and the corrupted logits
    /// in batch order (clean logits where nothing was generated).
    ///
    /// With a partition, generation runs on the class-grouped batch
    /// (boundary, robust, outlier); the loss always sees batch order.
    fn run(
        &self,
        budgets: &[SampleBudget],
        partition: Option<&Partition>,
        ledger: &mut StepLedger,
    ) -> Result<(Gradients<T>, f64, Tensor<T>)> {
        let m = self.labels.len();
        let kind = self.cfg.loss.kind;
        let generated: Vec<usize> = (0..m).filter(|&i| budgets[i].steps > 0).collect();

        // Corrupted views, one m-row tensor each, in batch order.
        let views: Vec<Tensor<T>> = match self.augment {
            Some(aug) => {
                let xs = self.x.select_rows(&generated);
                let streams: Vec<u64> = generated.iter().map(|&i| self.streams[i]).collect();
                let (a, b) = augment_generate(&xs, aug, self.seed, &streams, ledger)?;
                [a, b]
                    .into_iter()
                    .map(|v| {
                        let mut full = self.x.clone();
                        for (r, &i) in generated.iter().enumerate() {
                            full.row_mut(i).copy_from_slice(v.row(r));
                        }
                        full
                    })
                    .collect()
            }
            None => {
                let pgd = Pgd::new(self.model, &self.cfg.attack, objective(kind));
                let adv = match partition {
                    None => pgd.run(self.x, self.labels, budgets, self.streams, self.seed, ledger)?,
                    Some(p) => {
                        let order = p.order();
                        let grouped = pgd.run(
                            &self.x.select_rows(&order),
                            &order.iter().map(|&i| self.labels[i]).collect::<Vec<_>>(),
                            &order.iter().map(|&i| budgets[i]).collect::<Vec<_>>(),
                            &order.iter().map(|&i| self.streams[i]).collect::<Vec<_>>(),
                            self.seed,
                            ledger,
                        )?;
                        grouped.select_rows(&p.inverse_order())
                    }
                };
                vec![adv]
            }
        };

        let tape = Tape::new();
        let params = self.model.parameter_vars(&tape, true);
        let clean_needed = kind != LossKind::At;
        let clean = if clean_needed {
            ledger.clean_passes += m as u64;
            Some(self.model.forward_on_tape(tape.constant(self.x.clone()), &params)?)
        } else {
            None
        };

        let (loss, corrupted_logits) = match clean {
            None => {
                // Adversarial CE always runs the corrupted pass on every row.
                ledger.corrupted_passes += m as u64;
                let logits = self.model.forward_on_tape(tape.constant(views[0].clone()), &params)?;
                let segs = [Segment {
                    rows: (0..m).collect(),
                    source: Source::Computed(vec![logits]),
                }];
                let loss = combined_loss_var(&tape, logits, &segs, self.labels, &self.cfg.loss)?;
                (loss, logits.value())
            }
            Some(clean) => {
                let skipped: Vec<usize> = (0..m).filter(|&i| budgets[i].steps == 0).collect();
                let mut blocks = Vec::with_capacity(views.len());
                if !generated.is_empty() {
                    for v in &views {
                        ledger.corrupted_passes += generated.len() as u64;
                        let xv = tape.constant(v.select_rows(&generated));
                        blocks.push(self.model.forward_on_tape(xv, &params)?);
                    }
                }
                let first = blocks.first().copied();
                let segs = [
                    Segment {
                        rows: generated.clone(),
                        source: Source::Computed(blocks),
                    },
                    Segment {
                        rows: skipped.clone(),
                        source: Source::ReuseClean,
                    },
                ];
                let loss = combined_loss_var(&tape, clean, &segs, self.labels, &self.cfg.loss)?;
                let mut z = clean.value();
                if let Some(block) = first {
                    let b = block.value();
                    for (r, &i) in generated.iter().enumerate() {
                        z.row_mut(i).copy_from_slice(b.row(r));
                    }
                }
                (loss, z)
            }
        };

        let value = loss.with_value(|t| t.data()[0].as_f64());
        let mut grads = tape.backward(loss)?;
        let tensors = params
            .iter()
            .map(|&p| {
                grads
                    .take(p)
                    .ok_or_else(|| Error::Internal("parameter gradient missing".into()))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((Gradients { tensors }, value, corrupted_logits))
    }
}
