//! K-class classifiers, momentum SGD and the JSON checkpoint format.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ConvGeometry, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Precision, Real, Tensor};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerSpec {
    Dense {
        units: usize,
    },
    Relu,
    Conv {
        filters: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Flatten,
}

/// Layer list plus the per-sample input shape: `[d]` for flat inputs or
/// `[channels, height, width]` for images.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub input: Vec<usize>,
    pub layers: Vec<LayerSpec>,
}

impl Architecture {
    /// Fully connected ReLU network, e.g. `mlp(&[2, 64, 64, 2])`.
    pub fn mlp(widths: &[usize]) -> Self {
        let mut layers = Vec::new();
        for (i, &w) in widths.iter().enumerate().skip(1) {
            layers.push(LayerSpec::Dense { units: w });
            if i + 1 < widths.len() {
                layers.push(LayerSpec::Relu);
            }
        }
        Self {
            input: vec![widths.first().copied().unwrap_or(0)],
            layers,
        }
    }

    /// Two strided convolutions followed by two dense layers, for 28×28 digits.
    pub fn small_convnet(channels: usize, height: usize, width: usize, classes: usize) -> Self {
        Self {
            input: vec![channels, height, width],
            layers: vec![
                LayerSpec::Conv {
                    filters: 16,
                    kernel: 3,
                    stride: 2,
                    padding: 1,
                },
                LayerSpec::Relu,
                LayerSpec::Conv {
                    filters: 32,
                    kernel: 3,
                    stride: 2,
                    padding: 1,
                },
                LayerSpec::Relu,
                LayerSpec::Flatten,
                LayerSpec::Dense { units: 100 },
                LayerSpec::Relu,
                LayerSpec::Dense { units: classes },
            ],
        }
    }

    pub fn input_dim(&self) -> usize {
        self.input.iter().product()
    }

    fn resolve(&self) -> Result<Vec<Resolved>> {
        #[derive(Clone, Copy)]
        enum Shape {
            Flat(usize),
            Image(usize, usize, usize),
        }
        let mut shape = match self.input.as_slice() {
            [d] if *d > 0 => Shape::Flat(*d),
            [c, h, w] if c * h * w > 0 => Shape::Image(*c, *h, *w),
            other => {
                return Err(Error::Argument(format!(
                    "input shape must be [d] or [c, h, w], got {other:?}"
                )))
            }
        };
        let mut out = Vec::new();
        for layer in &self.layers {
            match (*layer, shape) {
                (LayerSpec::Dense { units }, Shape::Flat(d)) if units > 0 => {
                    out.push(Resolved::Dense { inputs: d, units });
                    shape = Shape::Flat(units);
                }
                (LayerSpec::Dense { .. }, Shape::Image(..)) => {
                    return Err(Error::Argument("dense layer on image input needs a flatten first".into()))
                }
                (LayerSpec::Relu, _) => out.push(Resolved::Relu),
                (
                    LayerSpec::Conv {
                        filters,
                        kernel,
                        stride,
                        padding,
                    },
                    Shape::Image(c, h, w),
                ) if filters > 0 => {
                    let geom = ConvGeometry {
                        channels: c,
                        height: h,
                        width: w,
                        filters,
                        kernel,
                        stride,
                        padding,
                    };
                    geom.validate()?;
                    shape = Shape::Image(filters, geom.out_height(), geom.out_width());
                    out.push(Resolved::Conv(geom));
                }
                (LayerSpec::Conv { .. }, Shape::Flat(_)) => {
                    return Err(Error::Argument("convolution needs an image-shaped input".into()))
                }
                (LayerSpec::Flatten, Shape::Image(c, h, w)) => shape = Shape::Flat(c * h * w),
                (LayerSpec::Flatten, Shape::Flat(_)) => {}
                (spec, _) => return Err(Error::Argument(format!("invalid layer {spec:?}"))),
            }
        }
        match (out.last(), shape) {
            (Some(Resolved::Dense { units, .. }), Shape::Flat(_)) if *units >= 2 => Ok(out),
            _ => Err(Error::Argument(
                "architecture must end in a dense layer with at least 2 units".into(),
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Resolved {
    Dense { inputs: usize, units: usize },
    Relu,
    Conv(ConvGeometry),
}

impl Resolved {
    fn param_shapes(&self) -> Vec<Vec<usize>> {
        match self {
            Resolved::Dense { inputs, units } => vec![vec![*inputs, *units], vec![*units]],
            Resolved::Conv(g) => vec![vec![g.filters, g.patch_len()], vec![g.filters]],
            Resolved::Relu => vec![],
        }
    }

    fn fan_in(&self) -> usize {
        match self {
            Resolved::Dense { inputs, .. } => *inputs,
            Resolved::Conv(g) => g.patch_len(),
            Resolved::Relu => 0,
        }
    }
}

/// Per-parameter tensors aligned with [`Classifier::parameters`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T: Real = f64> {
    pub tensors: Vec<Tensor<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn zeros_like(params: &[Tensor<T>]) -> Self {
        Self {
            tensors: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }
}

/// A K-class classifier `h_θ` producing logits.
#[derive(Debug, Clone, PartialEq)]
pub struct Classifier<T: Real = f64> {
    architecture: Architecture,
    layers: Vec<Resolved>,
    params: Vec<Tensor<T>>,
    num_classes: usize,
}

impl<T: Real> Classifier<T> {
    /// He-style uniform initialization, `U(-√(6/fan_in), √(6/fan_in))`, zero biases.
    pub fn new(architecture: Architecture, seed: u64) -> Result<Self> {
        let layers = architecture.resolve()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        for layer in &layers {
            let shapes = layer.param_shapes();
            if shapes.is_empty() {
                continue;
            }
            let bound = (6.0 / layer.fan_in() as f64).sqrt();
            let w_len: usize = shapes[0].iter().product();
            let w: Vec<T> = (0..w_len)
                .map(|_| T::from_f64_lossy(rng.random_range(-bound..bound)))
                .collect();
            params.push(Tensor::new(shapes[0].clone(), w)?);
            params.push(Tensor::zeros(&shapes[1]));
        }
        Self::from_parts(architecture, params)
    }

    /// A classifier whose parameters are all zero.
    pub fn zeros(architecture: Architecture) -> Result<Self> {
        let layers = architecture.resolve()?;
        let params = layers
            .iter()
            .flat_map(Resolved::param_shapes)
            .map(|s| Tensor::zeros(&s))
            .collect();
        Self::from_parts(architecture, params)
    }

    pub fn from_parts(architecture: Architecture, params: Vec<Tensor<T>>) -> Result<Self> {
        let layers = architecture.resolve()?;
        let shapes: Vec<Vec<usize>> = layers.iter().flat_map(Resolved::param_shapes).collect();
        if shapes.len() != params.len()
            || shapes.iter().zip(&params).any(|(s, p)| s.as_slice() != p.shape())
        {
            return Err(Error::Shape(format!(
                "parameters do not match architecture (expected shapes {shapes:?})"
            )));
        }
        let num_classes = match layers.last() {
            Some(Resolved::Dense { units, .. }) => *units,
            _ => unreachable!("resolve guarantees a final dense layer"),
        };
        Ok(Self {
            architecture,
            layers,
            params,
            num_classes,
        })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.architecture
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn input_dim(&self) -> usize {
        self.architecture.input_dim()
    }

    pub fn parameters(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn parameters_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    /// Records the parameters on `tape`, as leaves when `trainable`.
    pub fn parameter_vars<'t>(&self, tape: &'t Tape<T>, trainable: bool) -> Vec<Var<'t, T>> {
        self.params
            .iter()
            .map(|p| {
                if trainable {
                    tape.leaf(p.clone())
                } else {
                    tape.constant(p.clone())
                }
            })
            .collect()
    }

    /// Logits for an `m×d` batch recorded on `tape`.
    pub fn forward_on_tape<'t>(&self, x: Var<'t, T>, params: &[Var<'t, T>]) -> Result<Var<'t, T>> {
        if params.len() != self.params.len() {
            return Err(Error::Usage("parameter vars do not belong to this model".into()));
        }
        let shape = x.shape();
        if shape.len() != 2 || shape[1] != self.input_dim() {
            return Err(Error::Shape(format!(
                "model expects rows of {} values, got batch {shape:?}",
                self.input_dim()
            )));
        }
        let mut h = x;
        let mut p = 0;
        for layer in &self.layers {
            h = match layer {
                Resolved::Dense { .. } => {
                    let out = h.matmul(params[p])?.add_row(params[p + 1])?;
                    p += 2;
                    out
                }
                Resolved::Relu => h.relu(),
                Resolved::Conv(geom) => {
                    let out = h.conv2d(params[p], params[p + 1], *geom)?;
                    p += 2;
                    out
                }
            };
        }
        Ok(h)
    }

    /// Logits `m×K` for an `m×d` batch. Pure; no gradients recorded.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let params = self.parameter_vars(&tape, false);
        let xv = tape.constant(x.clone());
        Ok(self.forward_on_tape(xv, &params)?.value())
    }

    /// FNV-1a over the parameter bit patterns; used to detect mutation.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for p in &self.params {
            for v in p.data() {
                for b in v.as_f64().to_bits().to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x100000001b3);
                }
            }
        }
        h
    }

    pub fn cast<U: Real>(&self) -> Classifier<U> {
        Classifier {
            architecture: self.architecture.clone(),
            layers: self.layers.clone(),
            params: self.params.iter().map(Tensor::cast).collect(),
            num_classes: self.num_classes,
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            precision: T::PRECISION,
            architecture: self.architecture.clone(),
            num_classes: self.num_classes,
            parameters: self
                .params
                .iter()
                .map(|p| ParameterRecord {
                    shape: p.shape().to_vec(),
                    values: p.to_f64_vec(),
                })
                .collect(),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Argument(format!(
                "unsupported checkpoint version {}",
                ck.version
            )));
        }
        let params = ck
            .parameters
            .iter()
            .map(|r| Tensor::from_f64(r.shape.clone(), &r.values))
            .collect::<Result<Vec<_>>>()?;
        let model = Self::from_parts(ck.architecture.clone(), params)?;
        if model.num_classes != ck.num_classes {
            return Err(Error::Argument(format!(
                "checkpoint declares {} classes, architecture has {}",
                ck.num_classes, model.num_classes
            )));
        }
        Ok(model)
    }
}

/// Index of the largest logit; ties go to the lowest index.
pub fn predict_label<T: Real>(logits: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate().skip(1) {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

/// Fraction of rows whose predicted label equals the target.
pub fn accuracy<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let correct = (0..logits.rows())
        .filter(|&i| predict_label(logits.row(i)) == labels[i])
        .count();
    correct as f64 / labels.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    #[serde(default)]
    pub kind: OptimizerKind,
    pub lr: f64,
    /// SGD momentum μ; ignored by Adam.
    #[serde(default)]
    pub momentum: f64,
    #[serde(default)]
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 0.0,
        }
    }
}

impl OptimizerConfig {
    pub fn sgd(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            lr,
            momentum,
            weight_decay,
        }
    }

    pub fn adam(lr: f64) -> Self {
        Self {
            kind: OptimizerKind::Adam,
            lr,
            momentum: 0.0,
            weight_decay: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Argument(format!("learning rate must be > 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return Err(Error::Argument(format!(
                "momentum {} must be in [0, 1) and weight decay {} >= 0",
                self.momentum, self.weight_decay
            )));
        }
        Ok(())
    }
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Momentum SGD (`v ← μ·v + (g + λ·w)`, `w ← w − lr·v`) or Adam with
/// L2 weight decay folded into the gradient.
#[derive(Debug, Clone)]
pub struct Optimizer<T: Real = f64> {
    pub config: OptimizerConfig,
    first: Vec<Tensor<T>>,
    second: Vec<Tensor<T>>,
    steps: i32,
}

impl<T: Real> Optimizer<T> {
    pub fn new(config: OptimizerConfig) -> Self {
        Self {
            config,
            first: Vec::new(),
            second: Vec::new(),
            steps: 0,
        }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    pub fn step(&mut self, model: &mut Classifier<T>, grads: &Gradients<T>) -> Result<()> {
        let params = model.parameters_mut();
        if grads.tensors.len() != params.len()
            || grads
                .tensors
                .iter()
                .zip(params.iter())
                .any(|(g, p)| g.shape() != p.shape())
        {
            return Err(Error::Usage("gradients are not aligned with the parameters".into()));
        }
        if self.first.is_empty() {
            self.first = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
            if self.config.kind == OptimizerKind::Adam {
                self.second = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
            }
        }
        self.steps += 1;
        let lr = T::from_f64_lossy(self.config.lr);
        let wd = T::from_f64_lossy(self.config.weight_decay);
        match self.config.kind {
            OptimizerKind::Sgd => {
                let mu = T::from_f64_lossy(self.config.momentum);
                for ((p, g), v) in params.iter_mut().zip(&grads.tensors).zip(&mut self.first) {
                    for ((w, &gi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                        let d = if wd == T::zero() { gi } else { gi + wd * *w };
                        *vi = mu * *vi + d;
                        *w = *w - lr * *vi;
                    }
                }
            }
            OptimizerKind::Adam => {
                let (b1, b2) = (T::from_f64_lossy(ADAM_BETA1), T::from_f64_lossy(ADAM_BETA2));
                let c1 = T::from_f64_lossy(1.0 - ADAM_BETA1.powi(self.steps));
                let c2 = T::from_f64_lossy(1.0 - ADAM_BETA2.powi(self.steps));
                let eps = T::from_f64_lossy(ADAM_EPS);
                for (((p, g), m), v) in params
                    .iter_mut()
                    .zip(&grads.tensors)
                    .zip(&mut self.first)
                    .zip(&mut self.second)
                {
                    let (m, v) = (m.data_mut(), v.data_mut());
                    for (j, (w, &gi)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                        let d = if wd == T::zero() { gi } else { gi + wd * *w };
                        m[j] = b1 * m[j] + (T::one() - b1) * d;
                        v[j] = b2 * v[j] + (T::one() - b2) * d * d;
                        *w = *w - lr * (m[j] / c1) / ((v[j] / c2).sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParameterRecord {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// Versioned JSON checkpoint. Values are stored as `f64`; shortest
/// round-trip formatting makes 64-bit checkpoints bit-exact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub version: u32,
    pub precision: Precision,
    pub architecture: Architecture,
    pub num_classes: usize,
    pub parameters: Vec<ParameterRecord>,
}

impl Checkpoint {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| Error::Internal(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Argument(format!("bad checkpoint: {e}")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::harness::write_atomic(path, self.to_json()?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}
