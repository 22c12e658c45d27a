//! Signed prediction variance and the outlier / boundary / robust split of a
//! mini-batch.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::predict_label;
use crate::tensor::{prediction_variance, softmax, Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExampleClass {
    Outlier,
    Boundary,
    Robust,
}

impl ExampleClass {
    pub const ALL: [ExampleClass; 3] = [ExampleClass::Boundary, ExampleClass::Robust, ExampleClass::Outlier];

    pub fn index(self) -> usize {
        match self {
            ExampleClass::Boundary => 0,
            ExampleClass::Robust => 1,
            ExampleClass::Outlier => 2,
        }
    }
}

/// +1 when the predicted label (lowest index on ties) is correct, −1 otherwise.
pub fn sign_of_prediction<T: Real>(logits: &[T], label: usize) -> Result<f64> {
    if label >= logits.len() {
        return Err(Error::Argument(format!(
            "label {label} out of range for {} classes",
            logits.len()
        )));
    }
    Ok(if predict_label(logits) == label { 1.0 } else { -1.0 })
}

pub fn signed_variance<T: Real>(logits: &[T], label: usize) -> Result<f64> {
    let sign = sign_of_prediction(logits, label)?;
    let var = prediction_variance(&softmax(logits)?)?;
    Ok(sign * var)
}

/// Signed variance of every row.
pub fn signed_variances<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> Result<Vec<f64>> {
    if logits.rows() != labels.len() {
        return Err(Error::Shape(format!(
            "{} logit rows for {} labels",
            logits.rows(),
            labels.len()
        )));
    }
    labels
        .iter()
        .enumerate()
        .map(|(i, &y)| signed_variance(logits.row(i), y))
        .collect()
}

/// Nearest-rank percentile: sorted element at 1-based rank `ceil(q·m)`,
/// with `q = 0` giving the minimum.
pub fn percentile(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Argument("percentile of an empty set".into()));
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::Argument(format!("percentile level {q} outside [0, 1]")));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let m = sorted.len();
    // 1e-9 keeps q·m = 3.0000000000000004 at rank 3.
    let rank = ((q * m as f64) - 1e-9).ceil().max(1.0) as usize;
    Ok(sorted[rank.min(m) - 1])
}

/// Classifies each sample from its signed variance and the robust fraction.
pub fn classify_batch(svars: &[f64], f_r: f64) -> Result<Vec<ExampleClass>> {
    if svars.is_empty() {
        return Err(Error::Argument("cannot classify an empty batch".into()));
    }
    if !(0.0..=1.0).contains(&f_r) {
        return Err(Error::Argument(format!("robust fraction {f_r} outside [0, 1]")));
    }
    if let Some(i) = svars.iter().position(|v| v.is_nan()) {
        return Err(Error::Numeric(format!("signed variance of sample {i} is NaN")));
    }
    let t = percentile(svars, 1.0 - f_r)?;
    Ok(svars
        .iter()
        .map(|&s| {
            if s < 0.0 {
                ExampleClass::Outlier
            } else if s < t {
                ExampleClass::Boundary
            } else {
                ExampleClass::Robust
            }
        })
        .collect())
}

/// Batch indices grouped by class in boundary, robust, outlier order.
/// Indices keep their ascending original order within each group.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    pub classes: Vec<ExampleClass>,
    pub boundary: Vec<usize>,
    pub robust: Vec<usize>,
    pub outlier: Vec<usize>,
}

impl Partition {
    pub fn new(classes: Vec<ExampleClass>) -> Self {
        let pick = |c| {
            classes
                .iter()
                .enumerate()
                .filter(|(_, &k)| k == c)
                .map(|(i, _)| i)
                .collect::<Vec<_>>()
        };
        let boundary = pick(ExampleClass::Boundary);
        let robust = pick(ExampleClass::Robust);
        let outlier = pick(ExampleClass::Outlier);
        Self {
            classes,
            boundary,
            robust,
            outlier,
        }
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn members(&self, class: ExampleClass) -> &[usize] {
        match class {
            ExampleClass::Boundary => &self.boundary,
            ExampleClass::Robust => &self.robust,
            ExampleClass::Outlier => &self.outlier,
        }
    }

    /// `order[k]` is the original index of the k-th grouped row.
    pub fn order(&self) -> Vec<usize> {
        let mut v = Vec::with_capacity(self.len());
        v.extend_from_slice(&self.boundary);
        v.extend_from_slice(&self.robust);
        v.extend_from_slice(&self.outlier);
        v
    }

    /// `inverse[i]` is the grouped position of original index `i`.
    pub fn inverse_order(&self) -> Vec<usize> {
        let mut inv = vec![0; self.len()];
        for (k, i) in self.order().into_iter().enumerate() {
            inv[i] = k;
        }
        inv
    }

    pub fn counts(&self) -> [usize; 3] {
        [self.boundary.len(), self.robust.len(), self.outlier.len()]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MiningConfig {
    pub momentum: f64,
    pub gamma: f64,
}

impl Default for MiningConfig {
    fn default() -> Self {
        Self {
            momentum: 0.9,
            gamma: 0.8,
        }
    }
}

impl MiningConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Argument(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::Argument(format!("gamma {} outside (0, 1]", self.gamma)));
        }
        Ok(())
    }
}

/// Running robust-fraction estimate plus the last measured outlier fraction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MiningState {
    pub f_r: f64,
    pub f_o: f64,
    pub momentum: f64,
    pub gamma: f64,
}

impl MiningState {
    pub fn new(cfg: MiningConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            f_r: 0.0,
            f_o: 0.0,
            momentum: cfg.momentum,
            gamma: cfg.gamma,
        })
    }

    /// Folds in the accuracy on this batch's corrupted samples.
    pub fn update_f_r<T: Real>(&mut self, corrupted_logits: &Tensor<T>, labels: &[usize]) -> Result<f64> {
        let acc = correct_fraction(corrupted_logits, labels)?;
        self.update_with_accuracy(acc);
        Ok(self.f_r)
    }

    pub fn update_with_accuracy(&mut self, accuracy: f64) {
        let p = self.momentum;
        self.f_r = (p * self.f_r + (1.0 - p) * self.gamma * accuracy).clamp(0.0, self.gamma);
    }

    pub fn measure_f_o<T: Real>(&mut self, clean_logits: &Tensor<T>, labels: &[usize]) -> Result<f64> {
        self.f_o = measure_f_o(clean_logits, labels)?;
        Ok(self.f_o)
    }
}

fn correct_fraction<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> Result<f64> {
    if logits.rows() != labels.len() {
        return Err(Error::Shape(format!(
            "{} logit rows for {} labels",
            logits.rows(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::Argument("empty batch".into()));
    }
    let correct = (0..labels.len())
        .filter(|&i| predict_label(logits.row(i)) == labels[i])
        .count();
    Ok(correct as f64 / labels.len() as f64)
}

/// Natural error rate of the batch.
pub fn measure_f_o<T: Real>(clean_logits: &Tensor<T>, labels: &[usize]) -> Result<f64> {
    Ok(1.0 - correct_fraction(clean_logits, labels)?)
}
