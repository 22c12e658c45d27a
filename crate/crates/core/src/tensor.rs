//! Dense row-major tensors and the value-level probability helpers used by
//! the mining rule and the losses.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floor applied to probabilities before taking a logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

/// Tolerance on `sum(p) == 1` when validating a probability vector.
pub const DISTRIBUTION_TOLERANCE: f64 = 1e-6;

/// Floating point element type: `f64` by default, `f32` for speed runs.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + Debug + Display + Default + Sum + Send + Sync + 'static
{
    const PRECISION: Precision;

    /// `c = a · b (+ c if accumulate)` with arbitrary strides on `a` and `b`.
    #[allow(clippy::too_many_arguments)]
    fn gemm_strided(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        c: &mut [Self],
        accumulate: bool,
    );

    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("f64 converts to every Real")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("Real converts to f64")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

macro_rules! impl_real {
    ($t:ty, $precision:expr, $gemm:path) => {
        impl Real for $t {
            const PRECISION: Precision = $precision;

            fn gemm_strided(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                rsa: isize,
                csa: isize,
                b: &[Self],
                rsb: isize,
                csb: isize,
                c: &mut [Self],
                accumulate: bool,
            ) {
                assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
                if m == 0 || n == 0 {
                    return;
                }
                let beta = if accumulate { 1.0 } else { 0.0 };
                // SAFETY: the assert above bounds every index the kernel touches,
                // given that callers pass strides describing an m×k / k×n view of
                // contiguous row-major storage.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }
        }
    };
}

impl_real!(f64, Precision::F64, matrixmultiply::dgemm);
impl_real!(f32, Precision::F32, matrixmultiply::sgemm);

/// Row-major product helper. `ta`/`tb` read the stored operand transposed.
///
/// `a` is stored as `m×k` (or `k×m` when `ta`), `b` as `k×n` (or `n×k` when `tb`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    ta: bool,
    b: &[T],
    tb: bool,
    c: &mut [T],
    accumulate: bool,
) {
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    T::gemm_strided(m, k, n, a, rsa, csa, b, rsb, csb, c, accumulate);
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T: Real = f64> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} holds {numel} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); numel],
        }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<T>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    /// Builds a `rows.len() × d` matrix from equally sized rows.
    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let d = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::Shape("ragged rows".into()));
        }
        let data = rows.iter().flatten().copied().collect();
        Self::new(vec![rows.len(), d], data)
    }

    pub fn from_f64(shape: Vec<usize>, data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| T::from_f64_lossy(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// First dimension of a matrix; 1 for vectors and scalars.
    pub fn rows(&self) -> usize {
        if self.shape.len() >= 2 {
            self.shape[0]
        } else {
            1
        }
    }

    /// Length of one row: trailing dimensions multiplied together.
    pub fn row_len(&self) -> usize {
        if self.shape.len() >= 2 {
            self.shape[1..].iter().product()
        } else {
            self.data.len()
        }
    }

    pub fn row(&self, i: usize) -> &[T] {
        let d = self.row_len();
        &self.data[i * d..(i + 1) * d]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        let d = self.row_len();
        &mut self.data[i * d..(i + 1) * d]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    /// Copies the listed rows, in order, into a new matrix.
    pub fn select_rows(&self, indices: &[usize]) -> Self {
        let d = self.row_len();
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        let mut shape = self.shape.clone();
        if shape.is_empty() {
            shape = vec![indices.len(), d];
        } else if shape.len() == 1 {
            shape = vec![indices.len(), d];
        } else {
            shape[0] = indices.len();
        }
        Self { shape, data }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| U::from_f64_lossy(v.as_f64()))
                .collect(),
        }
    }

    /// Largest absolute elementwise difference; shapes must agree.
    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!(
                "{:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (*a - *b).abs().as_f64())
            .fold(0.0, f64::max))
    }
}

fn check_finite<T: Real>(values: &[T], what: &str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric(format!("{what} contains a non-finite value")))
    }
}

/// Max-subtracted softmax of one logit row, written into `out`.
pub(crate) fn softmax_into<T: Real>(logits: &[T], out: &mut [T]) {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for (o, &z) in out.iter_mut().zip(logits) {
        *o = (z - max).exp();
        total = total + *o;
    }
    for o in out.iter_mut() {
        *o = *o / total;
    }
}

/// Max-subtracted log-softmax of one logit row, written into `out`.
pub(crate) fn log_softmax_into<T: Real>(logits: &[T], out: &mut [T]) {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let total: T = logits.iter().map(|&z| (z - max).exp()).sum();
    let log_total = total.ln();
    for (o, &z) in out.iter_mut().zip(logits) {
        *o = z - max - log_total;
    }
}

/// Softmax over a single row of logits.
pub fn softmax<T: Real>(logits: &[T]) -> Result<Vec<T>> {
    if logits.len() < 2 {
        return Err(Error::Argument(format!(
            "softmax needs at least 2 classes, got {}",
            logits.len()
        )));
    }
    check_finite(logits, "logits")?;
    let mut out = vec![T::zero(); logits.len()];
    softmax_into(logits, &mut out);
    Ok(out)
}

/// Row-wise softmax of an `m×K` logit matrix.
pub fn softmax_rows<T: Real>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    check_finite(logits.data(), "logits")?;
    let mut out = Tensor::zeros(logits.shape());
    let k = logits.row_len();
    for i in 0..logits.rows() {
        softmax_into(logits.row(i), &mut out.data_mut()[i * k..(i + 1) * k]);
    }
    Ok(out)
}

/// `-log softmax(logits)[label]`, computed through log-softmax.
pub fn cross_entropy<T: Real>(logits: &[T], label: usize) -> Result<f64> {
    if label >= logits.len() {
        return Err(Error::Argument(format!(
            "label {label} out of range for {} classes",
            logits.len()
        )));
    }
    check_finite(logits, "logits")?;
    let mut out = vec![T::zero(); logits.len()];
    log_softmax_into(logits, &mut out);
    Ok(-out[label].as_f64())
}

fn check_distribution<T: Real>(p: &[T], what: &str) -> Result<()> {
    check_finite(p, what)?;
    if p.iter().any(|&v| v < T::zero()) {
        return Err(Error::Argument(format!("{what} has a negative entry")));
    }
    let total: f64 = p.iter().map(|v| v.as_f64()).sum();
    if (total - 1.0).abs() > DISTRIBUTION_TOLERANCE {
        return Err(Error::Argument(format!("{what} sums to {total}, not 1")));
    }
    Ok(())
}

/// `KL(p ‖ q) = Σ p_k ln(p_k / q_k)` with `q` floored at [`PROB_FLOOR`].
/// Terms with `p_k = 0` contribute nothing.
pub fn kl_divergence<T: Real>(p: &[T], q: &[T]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Shape(format!(
            "distributions of length {} and {}",
            p.len(),
            q.len()
        )));
    }
    check_distribution(p, "p")?;
    check_distribution(q, "q")?;
    let kl: f64 = p
        .iter()
        .zip(q)
        .filter(|(pk, _)| pk.as_f64() > 0.0)
        .map(|(pk, qk)| {
            let pk = pk.as_f64();
            let qk = qk.as_f64().max(PROB_FLOOR);
            pk * (pk.ln() - qk.ln())
        })
        .sum();
    // Rounding can leave a tiny negative residue when p ≈ q.
    Ok(kl.max(0.0))
}

/// Population variance of the `K` probability values.
pub fn prediction_variance<T: Real>(probs: &[T]) -> Result<f64> {
    if probs.is_empty() {
        return Err(Error::Argument("empty distribution".into()));
    }
    check_distribution(probs, "probabilities")?;
    Ok(population_variance(probs))
}

/// Pairwise form `Σ_{i<j} (v_i − v_j)² / K²`: exactly zero for equal values,
/// where the two-pass form leaves rounding residue.
pub(crate) fn population_variance<T: Real>(values: &[T]) -> f64 {
    let k = values.len() as f64;
    let mut acc = 0.0;
    for (i, a) in values.iter().enumerate() {
        let a = a.as_f64();
        for b in &values[i + 1..] {
            let d = a - b.as_f64();
            acc += d * d;
        }
    }
    acc / (k * k)
}
