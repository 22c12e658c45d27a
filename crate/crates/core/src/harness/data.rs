//! In-memory datasets: synthetic 2D tasks and MNIST.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::corruption::Bounds;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    SyntheticBlobs,
    SyntheticRings,
    MnistIdx,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticKind {
    /// Two Gaussians centred at (−0.5, 0) and (0.5, 0).
    Blobs,
    /// Concentric annuli of radius 0.5 (class 0) and 1.0 (class 1).
    Rings,
}

/// Declared input range of the synthetic tasks.
pub const SYNTHETIC_BOUNDS: Bounds = Bounds { low: -3.0, high: 3.0 };

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub bounds: Bounds,
    /// `[channels, height, width]` for image data.
    pub image: Option<[usize; 3]>,
    pub provenance: Provenance,
    pub split: String,
}

impl Dataset {
    pub fn new(
        inputs: Tensor,
        labels: Vec<usize>,
        num_classes: usize,
        bounds: Bounds,
        provenance: Provenance,
    ) -> Result<Self> {
        let d = Self {
            inputs,
            labels,
            num_classes,
            bounds,
            image: None,
            provenance,
            split: "train".into(),
        };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        if self.inputs.ndim() != 2 || self.inputs.rows() != self.labels.len() {
            return Err(Error::Shape(format!(
                "inputs {:?} for {} labels",
                self.inputs.shape(),
                self.labels.len()
            )));
        }
        if let Some(&y) = self.labels.iter().find(|&&y| y >= self.num_classes) {
            return Err(Error::Argument(format!(
                "label {y} out of range for {} classes",
                self.num_classes
            )));
        }
        self.bounds.validate()?;
        if let Some(v) = self
            .inputs
            .data()
            .iter()
            .find(|v| !(**v >= self.bounds.low && **v <= self.bounds.high))
        {
            return Err(Error::Argument(format!(
                "input value {v} outside [{}, {}]",
                self.bounds.low, self.bounds.high
            )));
        }
        if let Some(img) = self.image {
            if img.iter().product::<usize>() != self.inputs.row_len() {
                return Err(Error::Shape(format!(
                    "image shape {img:?} does not match {} features",
                    self.inputs.row_len()
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            inputs: self.inputs.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            ..self.clone_meta()
        }
    }

    /// The first `n` samples (or all, if fewer).
    pub fn take(&self, n: usize) -> Self {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }

    pub fn with_split(mut self, split: &str) -> Self {
        self.split = split.into();
        self
    }

    fn clone_meta(&self) -> Self {
        Self {
            inputs: Tensor::zeros(&[0, self.inputs.row_len()]),
            labels: Vec::new(),
            num_classes: self.num_classes,
            bounds: self.bounds,
            image: self.image,
            provenance: self.provenance,
            split: self.split.clone(),
        }
    }
}

/// Deterministic two-class 2D dataset with alternating labels.
pub fn make_synthetic(kind: SyntheticKind, n: usize, noise: f64, seed: u64) -> Result<Dataset> {
    if n < 2 {
        return Err(Error::Argument(format!("need at least 2 samples, got {n}")));
    }
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err(Error::Argument(format!("noise must be >= 0, got {noise}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, noise.max(f64::MIN_POSITIVE)).expect("valid normal");
    let mut data = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let y = i % 2;
        let mut gauss = || if noise == 0.0 { 0.0 } else { normal.sample(&mut rng) };
        let (a, b) = match kind {
            SyntheticKind::Blobs => {
                let cx = if y == 0 { -0.5 } else { 0.5 };
                (cx + gauss(), gauss())
            }
            SyntheticKind::Rings => {
                let r = if y == 0 { 0.5 } else { 1.0 } + gauss();
                let theta: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                (r * theta.cos(), r * theta.sin())
            }
        };
        let clamp = |v: f64| v.clamp(SYNTHETIC_BOUNDS.low, SYNTHETIC_BOUNDS.high);
        data.push(clamp(a));
        data.push(clamp(b));
        labels.push(y);
    }
    let provenance = match kind {
        SyntheticKind::Blobs => Provenance::SyntheticBlobs,
        SyntheticKind::Rings => Provenance::SyntheticRings,
    };
    Dataset::new(Tensor::new(vec![n, 2], data)?, labels, 2, SYNTHETIC_BOUNDS, provenance)
}
