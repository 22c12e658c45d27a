//! Experiment runs and their files: `manifest.json`, `metrics.csv`,
//! `summary.json` and `checkpoint.json`.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::corruption::Bounds;
use crate::error::{Error, Result};
use crate::evaluation::{clean_accuracy, robust_accuracy, EvalConfig};
use crate::harness::config::{BudgetSpec, ExperimentConfig, RunMode};
use crate::harness::data::Dataset;
use crate::harness::metrics::{to_csv, MetricsRow, CSV_SCHEMA_VERSION};
use crate::harness::write_atomic;
use crate::ledger::{Fractions, StepLedger};
use crate::losses::LossKind;
use crate::model::{Checkpoint, Classifier};
use crate::tensor::{Precision, Real, Tensor};
use crate::trainer::{
    jsd_cost_speedup, theoretical_speedup, train_baseline, train_bullettrain, train_jsd, EpochStats, Observer,
    Separation, TrainOutcome,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub mode: RunMode,
    pub clean_acc: f64,
    pub robust_acc: f64,
    pub fractions: Fractions,
    pub ledger: StepLedger,
    pub cost_units: u64,
    /// Formula speedup on the measured fractions (mined runs only).
    pub theoretical_speedup: Option<f64>,
    /// `3/(1+2F_B)` on the measured boundary fraction (JSD runs only).
    pub jsd_cost_speedup: Option<f64>,
    pub f_r_estimate: Option<f64>,
    pub epochs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    config: ExperimentConfig,
    seed: u64,
    version: String,
    csv_schema: u32,
    started_unix_ms: u128,
    finished_unix_ms: u128,
    wall_ms: u128,
    epoch_wall_ms: Vec<u128>,
}

fn unix_ms() -> u128 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis())
        .unwrap_or(0)
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Internal(e.to_string()))?;
    write_atomic(path, format!("{text}\n").as_bytes())
}

pub fn eval_config(cfg: &ExperimentConfig, bounds: Bounds) -> EvalConfig {
    let epsilon = cfg.eval.epsilon.unwrap_or(cfg.attack.epsilon);
    let steps = cfg.eval.steps;
    EvalConfig {
        steps,
        restarts: cfg.eval.restarts,
        epsilon,
        step_size: cfg.eval.step_size.unwrap_or(2.5 * epsilon / steps as f64),
        seed: cfg.seed,
        bounds,
        batch_size: 500,
    }
}

struct Recorder<'a, T: Real> {
    out_dir: &'a Path,
    test_x: Tensor<T>,
    test: &'a Dataset,
    eval: EvalConfig,
    every: usize,
    epochs: usize,
    record_wall: bool,
    rows: Vec<MetricsRow>,
    wall: Vec<u128>,
    last: Option<(f64, f64)>,
}

impl<T: Real> Observer<T> for Recorder<'_, T> {
    fn on_epoch(&mut self, model: &Classifier<T>, s: &EpochStats) -> Result<()> {
        let evaluate = (s.epoch + 1) % self.every == 0 || s.epoch + 1 == self.epochs;
        let (clean, robust) = if evaluate {
            let c = clean_accuracy(model, &self.test_x, &self.test.labels)?;
            let r = robust_accuracy(model, &self.test_x, &self.test.labels, &self.eval)?;
            self.last = Some((c, r));
            (Some(c), Some(r))
        } else {
            (None, None)
        };
        self.wall.push(s.wall_ms);
        self.rows.push(MetricsRow {
            epoch: s.epoch,
            clean_acc: clean,
            robust_acc: robust,
            f_b: s.fractions.boundary,
            f_r: s.fractions.robust,
            f_o: s.fractions.outlier,
            gen_steps: s.ledger.generation_steps,
            loss_passes: s.ledger.loss_passes(),
            wall_ms: self.record_wall.then_some(s.wall_ms),
            f_r_estimate: s.f_r_estimate,
        });
        write_atomic(&self.out_dir.join("metrics.csv"), to_csv(&self.rows).as_bytes())
    }
}

/// Runs one experiment and writes its files into `out_dir`.
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: &Path) -> Result<RunSummary> {
    cfg.validate()?;
    let (train, test) = cfg.load_data()?;
    run_on_data(cfg, &train, &test, out_dir)
}

/// [`run_experiment`] on already loaded data.
pub fn run_on_data(cfg: &ExperimentConfig, train: &Dataset, test: &Dataset, out_dir: &Path) -> Result<RunSummary> {
    cfg.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    match cfg.precision {
        Precision::F64 => run_typed::<f64>(cfg, train, test, out_dir),
        Precision::F32 => run_typed::<f32>(cfg, train, test, out_dir),
    }
}

fn run_typed<T: Real>(cfg: &ExperimentConfig, train: &Dataset, test: &Dataset, out_dir: &Path) -> Result<RunSummary> {
    let started = unix_ms();
    let clock = Instant::now();
    let arch = cfg.architecture(train);
    let mut model: Classifier<T> = Classifier::new(arch, cfg.init_seed.unwrap_or(cfg.seed))?;
    let x = train.inputs.cast::<T>();
    let tc = cfg.train_config(train.bounds);
    let bt = cfg.bullettrain_config(train.bounds);
    let mut rec = Recorder {
        out_dir,
        test_x: test.inputs.cast::<T>(),
        test,
        eval: eval_config(cfg, test.bounds),
        every: cfg.eval.every,
        epochs: cfg.epochs,
        record_wall: cfg.record_wall_time,
        rows: Vec::new(),
        wall: Vec::new(),
        last: None,
    };
    let outcome: TrainOutcome = if cfg.loss.kind == LossKind::Jsd {
        let aug = cfg
            .augment_config(train)
            .ok_or_else(|| Error::Config("the JSD loss needs an [augment] section".into()))?;
        train_jsd(&mut model, &x, &train.labels, &tc, bt.as_ref(), &aug, &mut rec)?
    } else {
        match &bt {
            Some(b) => train_bullettrain(&mut model, &x, &train.labels, &tc, b, &mut rec)?,
            None => train_baseline(&mut model, &x, &train.labels, &tc, &mut rec)?,
        }
    };
    let (clean_acc, robust_acc) = rec.last.ok_or_else(|| Error::Internal("no evaluation ran".into()))?;
    let fractions = outcome.ledger.fractions();
    let theoretical = match (&bt, cfg.loss.kind) {
        (Some(b), LossKind::At | LossKind::Trades) => Some(theoretical_speedup(cfg.attack.steps, &b.budget, &fractions)?),
        _ => None,
    };
    let jsd = match (&bt, cfg.loss.kind) {
        (Some(_), LossKind::Jsd) => Some(jsd_cost_speedup(fractions.boundary)?),
        _ => None,
    };
    let summary = RunSummary {
        mode: cfg.mode,
        clean_acc,
        robust_acc,
        fractions,
        cost_units: outcome.ledger.cost_units(),
        ledger: outcome.ledger.clone(),
        theoretical_speedup: theoretical,
        jsd_cost_speedup: jsd,
        f_r_estimate: outcome.mining.map(|m| m.f_r),
        epochs: cfg.epochs,
    };
    model.to_checkpoint().save(&out_dir.join("checkpoint.json"))?;
    write_json(&out_dir.join("summary.json"), &summary)?;
    write_json(
        &out_dir.join("manifest.json"),
        &Manifest {
            config: cfg.clone(),
            seed: cfg.seed,
            version: env!("CARGO_PKG_VERSION").to_string(),
            csv_schema: CSV_SCHEMA_VERSION,
            started_unix_ms: started,
            finished_unix_ms: unix_ms(),
            wall_ms: clock.elapsed().as_millis(),
            epoch_wall_ms: rec.wall,
        },
    )?;
    Ok(summary)
}

/// Evaluates a saved checkpoint on the configured test set.
pub fn evaluate_checkpoint(cfg: &ExperimentConfig, checkpoint: &Path) -> Result<(f64, f64)> {
    let (_, test) = cfg.load_data()?;
    let ck = Checkpoint::load(checkpoint)?;
    let model: Classifier = Classifier::from_checkpoint(&ck)?;
    let ev = eval_config(cfg, test.bounds);
    Ok((
        clean_accuracy(&model, &test.inputs, &test.labels)?,
        robust_accuracy(&model, &test.inputs, &test.labels, &ev)?,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub baseline: RunSummary,
    pub bullettrain: RunSummary,
    /// Baseline cost units over mined cost units.
    pub measured_speedup: f64,
    /// Same ratio counting loss passes only.
    pub measured_pass_speedup: f64,
    pub theoretical_speedup: Option<f64>,
    pub robust_acc_gap: f64,
}

/// Baseline and mined run on the same data and seed, in `baseline/` and
/// `bullettrain/` under `out_dir`, plus `comparison.json`.
pub fn compare(cfg: &ExperimentConfig, out_dir: &Path) -> Result<Comparison> {
    let (train, test) = cfg.load_data()?;
    let mut base_cfg = cfg.clone();
    base_cfg.mode = RunMode::Baseline;
    let mut bt_cfg = cfg.clone();
    bt_cfg.mode = RunMode::Bullettrain;
    bt_cfg.validate()?;
    let baseline = run_on_data(&base_cfg, &train, &test, &out_dir.join("baseline"))?;
    let bullettrain = run_on_data(&bt_cfg, &train, &test, &out_dir.join("bullettrain"))?;
    let ratio = |a: u64, b: u64| if b == 0 { f64::INFINITY } else { a as f64 / b as f64 };
    let cmp = Comparison {
        measured_speedup: ratio(baseline.cost_units, bullettrain.cost_units),
        measured_pass_speedup: ratio(baseline.ledger.loss_passes(), bullettrain.ledger.loss_passes()),
        theoretical_speedup: bullettrain.theoretical_speedup,
        robust_acc_gap: baseline.robust_acc - bullettrain.robust_acc,
        baseline,
        bullettrain,
    };
    write_json(&out_dir.join("comparison.json"), &cmp)?;
    Ok(cmp)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub assignment: String,
    pub summary: RunSummary,
}

fn dir_name(assignment: &str) -> PathBuf {
    PathBuf::from(
        assignment
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' || c == '_' || c == '=' { c } else { '_' })
            .collect::<String>(),
    )
}

/// One run per value of `key`, each in its own subdirectory, plus `sweep.csv`.
pub fn sweep(cfg: &ExperimentConfig, key: &str, values: &[String], out_dir: &Path) -> Result<Vec<SweepPoint>> {
    let (train, test) = cfg.load_data()?;
    let mut points = Vec::with_capacity(values.len());
    for v in values {
        let assignment = format!("{key}={v}");
        let mut c = cfg.clone();
        c.set(&assignment)?;
        let summary = run_on_data(&c, &train, &test, &out_dir.join(dir_name(&assignment)))?;
        points.push(SweepPoint { assignment, summary });
    }
    let mut csv = String::from("value,clean_acc,robust_acc,F_B,F_R,F_O,cost_units,theoretical_speedup\n");
    for (v, p) in values.iter().zip(&points) {
        let s = &p.summary;
        csv.push_str(&format!(
            "{v},{},{},{},{},{},{},{}\n",
            s.clean_acc,
            s.robust_acc,
            s.fractions.boundary,
            s.fractions.robust,
            s.fractions.outlier,
            s.cost_units,
            s.theoretical_speedup.map(|x| x.to_string()).unwrap_or_default()
        ));
    }
    write_atomic(&out_dir.join("sweep.csv"), csv.as_bytes())?;
    Ok(points)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LeftOut {
    Boundary,
    Outlier,
    Robust,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeaveOneOutPoint {
    pub left_out: LeftOut,
    pub n_o: usize,
    pub n_r: usize,
    pub n_b: usize,
    pub clean_acc: f64,
    pub robust_acc: f64,
}

/// Oracle-separated runs with one class at zero steps and the other two
/// taking every pair from `values`; writes `leaveoneout.csv`.
pub fn leave_one_out(
    cfg: &ExperimentConfig,
    left_out: &[LeftOut],
    values: &[usize],
    oracle_steps: usize,
    out_dir: &Path,
) -> Result<Vec<LeaveOneOutPoint>> {
    let (train, test) = cfg.load_data()?;
    let mut points = Vec::new();
    for &lo in left_out {
        for &a in values {
            for &b in values {
                let (n_o, n_r, n_b) = match lo {
                    LeftOut::Boundary => (a, b, 0),
                    LeftOut::Outlier => (0, a, b),
                    LeftOut::Robust => (a, 0, b),
                };
                let mut c = cfg.clone();
                c.mode = RunMode::Bullettrain;
                c.budget = Some(BudgetSpec { n_o, n_r, n_b, unordered: true });
                c.mining.separation = Separation::Oracle { steps: oracle_steps };
                let name = format!("{lo:?}_o{n_o}_r{n_r}_b{n_b}").to_lowercase();
                let s = run_on_data(&c, &train, &test, &out_dir.join(name))?;
                points.push(LeaveOneOutPoint {
                    left_out: lo,
                    n_o,
                    n_r,
                    n_b,
                    clean_acc: s.clean_acc,
                    robust_acc: s.robust_acc,
                });
            }
        }
    }
    let mut csv = String::from("left_out,n_o,n_r,n_b,clean_acc,robust_acc\n");
    for p in &points {
        csv.push_str(&format!(
            "{:?},{},{},{},{},{}\n",
            p.left_out, p.n_o, p.n_r, p.n_b, p.clean_acc, p.robust_acc
        ));
    }
    write_atomic(&out_dir.join("leaveoneout.csv"), csv.to_lowercase().as_bytes())?;
    Ok(points)
}
