//! Python bindings. Tensors cross the boundary as lists of rows; run
//! summaries come back as dictionaries.

use std::path::PathBuf;

use bullettrain::corruption::{pgd_generate, AttackConfig, AttackObjective, Bounds};
use bullettrain::evaluation::{clean_accuracy, robust_accuracy, EvalConfig};
use bullettrain::harness::config::ExperimentConfig;
use bullettrain::harness::data::{make_synthetic as synth, SyntheticKind};
use bullettrain::harness::experiment;
use bullettrain::ledger::{Fractions, StepLedger};
use bullettrain::losses;
use bullettrain::mining::{self, ExampleClass};
use bullettrain::model::{Checkpoint, Classifier};
use bullettrain::tensor::Tensor;
use bullettrain::trainer::{self, ComputeBudget};
use bullettrain::Error;
use pyo3::exceptions::{PyArithmeticError, PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyAny;

fn to_py(e: Error) -> PyErr {
    let msg = e.to_string();
    match e {
        Error::Io { .. } => PyOSError::new_err(msg),
        Error::Diverged { .. } | Error::Numeric(_) | Error::NonFiniteGradient { .. } => PyArithmeticError::new_err(msg),
        Error::Internal(_) => PyRuntimeError::new_err(msg),
        _ => PyValueError::new_err(msg),
    }
}

fn tensor(rows: Vec<Vec<f64>>) -> PyResult<Tensor> {
    Tensor::from_rows(&rows).map_err(to_py)
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

fn json_to_py<'py>(py: Python<'py>, value: &impl serde::Serialize) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn class_name(c: ExampleClass) -> &'static str {
    match c {
        ExampleClass::Boundary => "boundary",
        ExampleClass::Robust => "robust",
        ExampleClass::Outlier => "outlier",
    }
}

/// `(N + 1) / (F_B·N_B + F_R·N_R + F_O·N_O + 1)`.
#[pyfunction]
fn theoretical_speedup(n: usize, n_o: usize, n_r: usize, n_b: usize, f_b: f64, f_r: f64, f_o: f64) -> PyResult<f64> {
    let budget = ComputeBudget {
        n_o,
        n_r,
        n_b,
        alpha_o: 0.0,
        alpha_r: 0.0,
        alpha_b: 0.0,
    };
    trainer::theoretical_speedup(n, &budget, &Fractions::new(f_b, f_r, f_o)).map_err(to_py)
}

#[pyfunction]
fn jsd_cost_speedup(f_b: f64) -> PyResult<f64> {
    trainer::jsd_cost_speedup(f_b).map_err(to_py)
}

#[pyfunction]
fn signed_variance(logits: Vec<f64>, label: usize) -> PyResult<f64> {
    mining::signed_variance(&logits, label).map_err(to_py)
}

#[pyfunction]
fn signed_variances(logits: Vec<Vec<f64>>, labels: Vec<usize>) -> PyResult<Vec<f64>> {
    mining::signed_variances(&tensor(logits)?, &labels).map_err(to_py)
}

/// Nearest-rank percentile, `q` in `[0, 1]`.
#[pyfunction]
fn percentile(values: Vec<f64>, q: f64) -> PyResult<f64> {
    mining::percentile(&values, q).map_err(to_py)
}

/// Class names (`"boundary"`, `"robust"`, `"outlier"`) in batch order.
#[pyfunction]
fn classify_batch(svars: Vec<f64>, f_r: f64) -> PyResult<Vec<&'static str>> {
    Ok(mining::classify_batch(&svars, f_r).map_err(to_py)?.into_iter().map(class_name).collect())
}

#[pyfunction]
fn at_loss(corrupted_logits: Vec<Vec<f64>>, labels: Vec<usize>) -> PyResult<f64> {
    losses::at_loss(&tensor(corrupted_logits)?, &labels).map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (clean_logits, corrupted_logits, labels, beta = 6.0))]
fn trades_loss(clean_logits: Vec<Vec<f64>>, corrupted_logits: Vec<Vec<f64>>, labels: Vec<usize>, beta: f64) -> PyResult<f64> {
    losses::trades_loss(&tensor(clean_logits)?, &tensor(corrupted_logits)?, &labels, beta).map_err(to_py)
}

#[pyfunction]
fn jsd_loss(clean: Vec<Vec<f64>>, aug1: Vec<Vec<f64>>, aug2: Vec<Vec<f64>>) -> PyResult<f64> {
    losses::jsd_loss(&tensor(clean)?, &tensor(aug1)?, &tensor(aug2)?).map_err(to_py)
}

/// `kind` is `"blobs"` or `"rings"`. Returns `(inputs, labels)`.
#[pyfunction]
fn make_synthetic(kind: &str, n: usize, noise: f64, seed: u64) -> PyResult<(Vec<Vec<f64>>, Vec<usize>)> {
    let kind = match kind {
        "blobs" => SyntheticKind::Blobs,
        "rings" => SyntheticKind::Rings,
        other => return Err(PyValueError::new_err(format!("unknown synthetic kind {other:?}"))),
    };
    let d = synth(kind, n, noise, seed).map_err(to_py)?;
    Ok((rows(&d.inputs), d.labels))
}

fn parse_config(config: &str, sets: Vec<String>) -> PyResult<ExperimentConfig> {
    let mut cfg = ExperimentConfig::parse(config).map_err(to_py)?;
    for s in &sets {
        cfg.set(s).map_err(to_py)?;
    }
    cfg.validate().map_err(to_py)?;
    Ok(cfg)
}

/// Parses and validates a TOML or JSON config; returns it as a dictionary.
#[pyfunction]
#[pyo3(signature = (config, sets = Vec::new()))]
fn load_config<'py>(py: Python<'py>, config: &str, sets: Vec<String>) -> PyResult<Bound<'py, PyAny>> {
    json_to_py(py, &parse_config(config, sets)?)
}

/// Trains one run from config text and writes its files to `out_dir`.
#[pyfunction]
#[pyo3(signature = (config, out_dir, sets = Vec::new()))]
fn run_experiment<'py>(py: Python<'py>, config: &str, out_dir: PathBuf, sets: Vec<String>) -> PyResult<Bound<'py, PyAny>> {
    let cfg = parse_config(config, sets)?;
    let summary = py.detach(|| experiment::run_experiment(&cfg, &out_dir)).map_err(to_py)?;
    json_to_py(py, &summary)
}

/// Baseline and mined runs with the same seed, plus measured speedup.
#[pyfunction]
#[pyo3(signature = (config, out_dir, seed, sets = Vec::new()))]
fn compare<'py>(py: Python<'py>, config: &str, out_dir: PathBuf, seed: u64, sets: Vec<String>) -> PyResult<Bound<'py, PyAny>> {
    let mut cfg = parse_config(config, sets)?;
    cfg.seed = seed;
    let cmp = py.detach(|| experiment::compare(&cfg, &out_dir)).map_err(to_py)?;
    json_to_py(py, &cmp)
}

/// A trained classifier loaded from a checkpoint file.
#[pyclass(name = "Model")]
struct PyModel {
    inner: Classifier,
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ck = Checkpoint::load(&path).map_err(to_py)?;
        Ok(Self {
            inner: Classifier::from_checkpoint(&ck).map_err(to_py)?,
        })
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.num_classes()
    }

    #[getter]
    fn input_dim(&self) -> usize {
        self.inner.input_dim()
    }

    fn forward(&self, x: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        Ok(rows(&self.inner.forward(&tensor(x)?).map_err(to_py)?))
    }

    fn clean_accuracy(&self, x: Vec<Vec<f64>>, labels: Vec<usize>) -> PyResult<f64> {
        clean_accuracy(&self.inner, &tensor(x)?, &labels).map_err(to_py)
    }

    /// PGD evaluation with `α = 2.5ε/steps` unless `step_size` is given.
    #[pyo3(signature = (x, labels, epsilon, steps = 20, restarts = 1, step_size = None, seed = 0, low = 0.0, high = 1.0))]
    #[allow(clippy::too_many_arguments)]
    fn robust_accuracy(
        &self,
        x: Vec<Vec<f64>>,
        labels: Vec<usize>,
        epsilon: f64,
        steps: usize,
        restarts: usize,
        step_size: Option<f64>,
        seed: u64,
        low: f64,
        high: f64,
    ) -> PyResult<f64> {
        let mut cfg = EvalConfig::pgd(epsilon, steps, restarts);
        if let Some(a) = step_size {
            cfg.step_size = a;
        }
        cfg.seed = seed;
        cfg.bounds = Bounds { low, high };
        robust_accuracy(&self.inner, &tensor(x)?, &labels, &cfg).map_err(to_py)
    }

    /// l∞ PGD on the cross-entropy; returns the perturbed rows.
    #[pyo3(signature = (x, labels, epsilon, step_size, steps, seed = 0, random_init = true, low = 0.0, high = 1.0))]
    #[allow(clippy::too_many_arguments)]
    fn pgd(
        &self,
        x: Vec<Vec<f64>>,
        labels: Vec<usize>,
        epsilon: f64,
        step_size: f64,
        steps: usize,
        seed: u64,
        random_init: bool,
        low: f64,
        high: f64,
    ) -> PyResult<Vec<Vec<f64>>> {
        let cfg = AttackConfig {
            epsilon,
            step_size,
            steps,
            random_init,
            bounds: Bounds { low, high },
        };
        let adv = pgd_generate(
            &self.inner,
            &tensor(x)?,
            &labels,
            &cfg,
            AttackObjective::CrossEntropy,
            seed,
            &mut StepLedger::default(),
        )
        .map_err(to_py)?;
        Ok(rows(&adv))
    }
}

#[pymodule]
fn bullettrain_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(theoretical_speedup, m)?)?;
    m.add_function(wrap_pyfunction!(jsd_cost_speedup, m)?)?;
    m.add_function(wrap_pyfunction!(signed_variance, m)?)?;
    m.add_function(wrap_pyfunction!(signed_variances, m)?)?;
    m.add_function(wrap_pyfunction!(percentile, m)?)?;
    m.add_function(wrap_pyfunction!(classify_batch, m)?)?;
    m.add_function(wrap_pyfunction!(at_loss, m)?)?;
    m.add_function(wrap_pyfunction!(trades_loss, m)?)?;
    m.add_function(wrap_pyfunction!(jsd_loss, m)?)?;
    m.add_function(wrap_pyfunction!(make_synthetic, m)?)?;
    m.add_function(wrap_pyfunction!(load_config, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add_function(wrap_pyfunction!(compare, m)?)?;
    m.add_class::<PyModel>()?;
    Ok(())
}
