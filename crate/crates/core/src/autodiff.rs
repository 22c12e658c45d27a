//! Reverse-mode differentiation over a recorded tape.
//!
//! The operation set covers what the classifiers and losses need: affine
//! layers, 2-D convolution, ReLU, (log-)softmax, elementwise arithmetic,
//! reductions and row gathers. Leaves created with [`Tape::leaf`] receive
//! gradients; [`Tape::constant`] leaves do not, and branches that depend only
//! on constants are skipped during the backward sweep.

use std::cell::{Ref, RefCell};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{gemm, log_softmax_into, softmax_into, Real, Tensor};

/// Geometry of a 2-D convolution over `channels × height × width` rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub filters: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn patch_len(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn input_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn output_len(&self) -> usize {
        self.filters * self.out_height() * self.out_width()
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel == 0 || self.stride == 0 {
            return Err(Error::Argument("kernel and stride must be positive".into()));
        }
        if self.height + 2 * self.padding < self.kernel || self.width + 2 * self.padding < self.kernel
        {
            return Err(Error::Argument(format!(
                "kernel {} larger than padded input {}x{}",
                self.kernel, self.height, self.width
            )));
        }
        Ok(())
    }

    /// Unfolds one sample into a `patch_len × (out_h·out_w)` column matrix.
    fn im2col<T: Real>(&self, input: &[T], cols: &mut [T]) {
        let (oh, ow) = (self.out_height(), self.out_width());
        let positions = oh * ow;
        for c in 0..self.channels {
            for ki in 0..self.kernel {
                for kj in 0..self.kernel {
                    let row = (c * self.kernel + ki) * self.kernel + kj;
                    let dst = &mut cols[row * positions..(row + 1) * positions];
                    for oi in 0..oh {
                        let ii = (oi * self.stride + ki) as isize - self.padding as isize;
                        for oj in 0..ow {
                            let jj = (oj * self.stride + kj) as isize - self.padding as isize;
                            dst[oi * ow + oj] = if ii >= 0
                                && jj >= 0
                                && (ii as usize) < self.height
                                && (jj as usize) < self.width
                            {
                                input[(c * self.height + ii as usize) * self.width + jj as usize]
                            } else {
                                T::zero()
                            };
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`Self::im2col`]: scatters column gradients back onto the input.
    fn col2im<T: Real>(&self, cols: &[T], grad_input: &mut [T]) {
        let (oh, ow) = (self.out_height(), self.out_width());
        let positions = oh * ow;
        for c in 0..self.channels {
            for ki in 0..self.kernel {
                for kj in 0..self.kernel {
                    let row = (c * self.kernel + ki) * self.kernel + kj;
                    let src = &cols[row * positions..(row + 1) * positions];
                    for oi in 0..oh {
                        let ii = (oi * self.stride + ki) as isize - self.padding as isize;
                        if ii < 0 || ii as usize >= self.height {
                            continue;
                        }
                        for oj in 0..ow {
                            let jj = (oj * self.stride + kj) as isize - self.padding as isize;
                            if jj < 0 || jj as usize >= self.width {
                                continue;
                            }
                            let at = (c * self.height + ii as usize) * self.width + jj as usize;
                            grad_input[at] = grad_input[at] + src[oi * ow + oj];
                        }
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone)]
enum Op<T: Real> {
    Leaf,
    MatMul(usize, usize),
    AddRow(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    Relu(usize),
    LogSoftmax(usize),
    Softmax(usize),
    LogFloor(usize, T),
    Sum(usize),
    Mean(usize),
    RowSum(usize),
    Pick(usize, Vec<usize>),
    GatherRows(usize, Vec<usize>),
    Assemble(Vec<(usize, Vec<usize>)>),
    Reshape(usize),
    Conv2d {
        input: usize,
        weight: usize,
        bias: usize,
        geom: ConvGeometry,
    },
}

impl<T: Real> Op<T> {
    fn parents(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::AddRow(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Relu(a)
            | Op::LogSoftmax(a)
            | Op::Softmax(a)
            | Op::LogFloor(a, _)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::RowSum(a)
            | Op::Pick(a, _)
            | Op::GatherRows(a, _)
            | Op::Reshape(a) => vec![*a],
            Op::Assemble(parts) => parts.iter().map(|(p, _)| *p).collect(),
            Op::Conv2d {
                input,
                weight,
                bias,
                ..
            } => vec![*input, *weight, *bias],
        }
    }
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records a forward computation for a later [`Tape::backward`] sweep.
///
/// A tape is single-threaded; build one per computation.
pub struct Tape<T: Real = f64> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Real = f64> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Real> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var").field("id", &self.id).finish()
    }
}

/// Gradients of one backward sweep, indexed by recorded variable.
pub struct Grads<T: Real = f64> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Grads<T> {
    /// Gradient of a leaf; zeros when the root does not depend on it and
    /// `None` for constants. Intermediate gradients are not retained.
    pub fn wrt(&self, var: Var<'_, T>) -> Option<Tensor<T>> {
        match self.grads.get(var.id) {
            Some(Some(g)) => Some(g.clone()),
            _ if var.requires_grad() => Some(Tensor::zeros(&var.shape())),
            _ => None,
        }
    }

    pub fn take(&mut self, var: Var<'_, T>) -> Option<Tensor<T>> {
        match self.grads.get_mut(var.id).and_then(Option::take) {
            Some(g) => Some(g),
            None if var.requires_grad() => Some(Tensor::zeros(&var.shape())),
            None => None,
        }
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, op: Op<T>) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = match op {
            Op::Leaf => false,
            _ => op.parents().iter().any(|&p| nodes[p].requires_grad),
        };
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// A differentiable input.
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// An input that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf)
    }

    /// Stacks rows from several sources into one `m`-row matrix.
    ///
    /// `parts[p] = (var, positions)` places row `r` of `var` at output row
    /// `positions[r]`. Every output row must be written exactly once.
    pub fn assemble_rows<'t>(&'t self, parts: &[(Var<'t, T>, Vec<usize>)], m: usize) -> Result<Var<'t, T>> {
        let Some((first, _)) = parts.first() else {
            return Err(Error::Argument("assemble_rows needs at least one part".into()));
        };
        let d = first.with_value(|v| v.row_len());
        let mut seen = vec![false; m];
        let mut out = vec![T::zero(); m * d];
        for (var, positions) in parts {
            var.with_value(|v| -> Result<()> {
                if v.row_len() != d || v.rows() != positions.len() {
                    return Err(Error::Internal(format!(
                        "assembled part has {} rows of {} values, expected {} rows of {d}",
                        v.rows(),
                        v.row_len(),
                        positions.len()
                    )));
                }
                for (r, &pos) in positions.iter().enumerate() {
                    if pos >= m || seen[pos] {
                        return Err(Error::Internal(format!(
                            "row position {pos} is out of range or assigned twice"
                        )));
                    }
                    seen[pos] = true;
                    out[pos * d..(pos + 1) * d].copy_from_slice(v.row(r));
                }
                Ok(())
            })?;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::Internal(format!("row {missing} never assigned")));
        }
        let value = Tensor::new(vec![m, d], out)?;
        let op = Op::Assemble(parts.iter().map(|(v, p)| (v.id, p.clone())).collect());
        Ok(self.push(value, op))
    }

    /// Gradients of the scalar `root` with respect to every recorded node.
    pub fn backward(&self, root: Var<'_, T>) -> Result<Grads<T>> {
        let nodes = self.nodes.borrow();
        let root_node = &nodes[root.id];
        if root_node.value.numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar root, got shape {:?}",
                root_node.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; root.id + 1];
        if !root_node.requires_grad {
            return Ok(Grads { grads });
        }
        grads[root.id] = Some(Tensor::full(root_node.value.shape(), T::one()));

        for id in (0..=root.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(g);
                continue;
            }
            for (parent, pg) in local_grads(&nodes, node, &g)? {
                if !nodes[parent].requires_grad {
                    continue;
                }
                match &mut grads[parent] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(pg.data()) {
                            *a = *a + *b;
                        }
                    }
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        Ok(Grads { grads })
    }
}

fn unary_map<T: Real>(g: &Tensor<T>, a: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = g.data().iter().zip(a.data()).map(|(&g, &a)| f(g, a)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

fn local_grads<T: Real>(
    nodes: &[Node<T>],
    node: &Node<T>,
    g: &Tensor<T>,
) -> Result<Vec<(usize, Tensor<T>)>> {
    let val = |i: usize| &nodes[i].value;
    let needs = |i: usize| nodes[i].requires_grad;
    let out = match &node.op {
        Op::Leaf => vec![],
        Op::MatMul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
            let mut res = Vec::new();
            if needs(*a) {
                let mut ga = Tensor::zeros(&[m, k]);
                gemm(m, n, k, g.data(), false, bv.data(), true, ga.data_mut(), false);
                res.push((*a, ga));
            }
            if needs(*b) {
                let mut gb = Tensor::zeros(&[k, n]);
                gemm(k, m, n, av.data(), true, g.data(), false, gb.data_mut(), false);
                res.push((*b, gb));
            }
            res
        }
        Op::AddRow(a, b) => {
            let n = val(*b).numel();
            let mut gb = Tensor::zeros(val(*b).shape());
            for row in g.data().chunks(n) {
                for (acc, &v) in gb.data_mut().iter_mut().zip(row) {
                    *acc = *acc + v;
                }
            }
            vec![(*a, g.clone()), (*b, gb)]
        }
        Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
        Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.map(|v| -v))],
        Op::Mul(a, b) => vec![
            (*a, unary_map(g, val(*b), |g, b| g * b)),
            (*b, unary_map(g, val(*a), |g, a| g * a)),
        ],
        Op::Scale(a, s) => vec![(*a, g.map(|v| v * *s))],
        Op::Relu(a) => vec![(
            *a,
            unary_map(g, val(*a), |g, x| if x > T::zero() { g } else { T::zero() }),
        )],
        Op::LogSoftmax(a) => {
            let out = &node.value;
            let k = out.row_len();
            let mut ga = Tensor::zeros(out.shape());
            for i in 0..out.rows() {
                let gs: T = g.row(i).iter().copied().sum();
                let dst = ga.row_mut(i);
                for j in 0..k {
                    dst[j] = g.row(i)[j] - out.row(i)[j].exp() * gs;
                }
            }
            vec![(*a, ga)]
        }
        Op::Softmax(a) => {
            let s = &node.value;
            let k = s.row_len();
            let mut ga = Tensor::zeros(s.shape());
            for i in 0..s.rows() {
                let dot: T = g.row(i).iter().zip(s.row(i)).map(|(&g, &s)| g * s).sum();
                let dst = ga.row_mut(i);
                for j in 0..k {
                    dst[j] = s.row(i)[j] * (g.row(i)[j] - dot);
                }
            }
            vec![(*a, ga)]
        }
        Op::LogFloor(a, floor) => vec![(
            *a,
            unary_map(g, val(*a), |g, x| if x > *floor { g / x } else { T::zero() }),
        )],
        Op::Sum(a) => vec![(*a, Tensor::full(val(*a).shape(), g.data()[0]))],
        Op::Mean(a) => {
            let n = T::from_usize(val(*a).numel()).unwrap();
            vec![(*a, Tensor::full(val(*a).shape(), g.data()[0] / n))]
        }
        Op::RowSum(a) => {
            let av = val(*a);
            let k = av.row_len();
            let mut ga = Tensor::zeros(av.shape());
            for i in 0..av.rows() {
                ga.row_mut(i).fill(g.data()[i]);
            }
            debug_assert_eq!(ga.numel(), av.rows() * k);
            vec![(*a, ga)]
        }
        Op::Pick(a, idx) => {
            let av = val(*a);
            let mut ga = Tensor::zeros(av.shape());
            for (i, &j) in idx.iter().enumerate() {
                ga.row_mut(i)[j] = g.data()[i];
            }
            vec![(*a, ga)]
        }
        Op::GatherRows(a, idx) => {
            let av = val(*a);
            let mut ga = Tensor::zeros(av.shape());
            for (r, &src) in idx.iter().enumerate() {
                let dst = ga.row_mut(src);
                for (d, &v) in dst.iter_mut().zip(g.row(r)) {
                    *d = *d + v;
                }
            }
            vec![(*a, ga)]
        }
        Op::Assemble(parts) => parts
            .iter()
            .map(|(p, positions)| (*p, g.select_rows(positions).reshape(val(*p).shape().to_vec())))
            .map(|(p, t)| t.map(|t| (p, t)))
            .collect::<Result<Vec<_>>>()?,
        Op::Reshape(a) => vec![(*a, g.clone().reshape(val(*a).shape().to_vec())?)],
        Op::Conv2d {
            input,
            weight,
            bias,
            geom,
        } => {
            let x = val(*input);
            let w = val(*weight);
            let m = x.rows();
            let positions = geom.out_height() * geom.out_width();
            let patch = geom.patch_len();
            let f = geom.filters;
            let mut gx = Tensor::zeros(x.shape());
            let mut gw = Tensor::zeros(w.shape());
            let mut gb = Tensor::zeros(val(*bias).shape());
            let mut cols = vec![T::zero(); patch * positions];
            let mut gcols = vec![T::zero(); patch * positions];
            for s in 0..m {
                let gout = g.row(s);
                if needs(*bias) {
                    for fi in 0..f {
                        let total: T = gout[fi * positions..(fi + 1) * positions].iter().copied().sum();
                        gb.data_mut()[fi] = gb.data_mut()[fi] + total;
                    }
                }
                if needs(*weight) {
                    geom.im2col(x.row(s), &mut cols);
                    // gw[f × patch] += gout[f × pos] · cols[patch × pos]^T
                    gemm(f, positions, patch, gout, false, &cols, true, gw.data_mut(), true);
                }
                if needs(*input) {
                    // gcols[patch × pos] = w[f × patch]^T · gout[f × pos]
                    gemm(patch, f, positions, w.data(), true, gout, false, &mut gcols, false);
                    geom.col2im(&gcols, gx.row_mut(s));
                }
            }
            vec![(*input, gx), (*weight, gw), (*bias, gb)]
        }
    };
    Ok(out)
}

impl<'t, T: Real> Var<'t, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Tensor<T> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn with_value<R>(&self, f: impl FnOnce(&Tensor<T>) -> R) -> R {
        let nodes: Ref<'_, Vec<Node<T>>> = self.tape.nodes.borrow();
        f(&nodes[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.with_value(|v| v.shape().to_vec())
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    fn same_tape(&self, other: &Var<'t, T>) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(Error::Usage("variables recorded on different tapes".into()))
        }
    }

    fn elementwise(&self, other: Var<'t, T>, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var<'t, T>> {
        self.same_tape(&other)?;
        let value = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id].value, &nodes[other.id].value);
            if a.shape() != b.shape() {
                return Err(Error::Shape(format!("{:?} vs {:?}", a.shape(), b.shape())));
            }
            let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(a.shape().to_vec(), data)?
        };
        Ok(self.tape.push(value, op))
    }

    pub fn add(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.elementwise(other, |a, b| a + b, Op::Add(self.id, other.id))
    }

    pub fn sub(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.elementwise(other, |a, b| a - b, Op::Sub(self.id, other.id))
    }

    pub fn mul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.elementwise(other, |a, b| a * b, Op::Mul(self.id, other.id))
    }

    pub fn scale(self, factor: T) -> Var<'t, T> {
        let value = self.with_value(|v| v.map(|x| x * factor));
        self.tape.push(value, Op::Scale(self.id, factor))
    }

    /// `[m×k] · [k×n]`.
    pub fn matmul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(&other)?;
        let value = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id].value, &nodes[other.id].value);
            if a.ndim() != 2 || b.ndim() != 2 || a.shape()[1] != b.shape()[0] {
                return Err(Error::Shape(format!(
                    "matmul {:?} · {:?}",
                    a.shape(),
                    b.shape()
                )));
            }
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            let mut out = Tensor::zeros(&[m, n]);
            gemm(m, k, n, a.data(), false, b.data(), false, out.data_mut(), false);
            out
        };
        Ok(self.tape.push(value, Op::MatMul(self.id, other.id)))
    }

    /// Adds a length-`n` bias vector to every row of an `m×n` matrix.
    pub fn add_row(self, bias: Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(&bias)?;
        let value = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id].value, &nodes[bias.id].value);
            if a.row_len() != b.numel() {
                return Err(Error::Shape(format!(
                    "bias of {} for rows of {}",
                    b.numel(),
                    a.row_len()
                )));
            }
            let mut out = a.clone();
            let n = b.numel();
            for row in out.data_mut().chunks_mut(n) {
                for (x, &bv) in row.iter_mut().zip(b.data()) {
                    *x = *x + bv;
                }
            }
            out
        };
        Ok(self.tape.push(value, Op::AddRow(self.id, bias.id)))
    }

    pub fn relu(self) -> Var<'t, T> {
        let value = self.with_value(|v| v.map(|x| if x > T::zero() { x } else { T::zero() }));
        self.tape.push(value, Op::Relu(self.id))
    }

    /// Row-wise log-softmax.
    pub fn log_softmax(self) -> Var<'t, T> {
        let value = self.with_value(|v| {
            let mut out = Tensor::zeros(v.shape());
            let k = v.row_len();
            for i in 0..v.rows() {
                log_softmax_into(v.row(i), &mut out.data_mut()[i * k..(i + 1) * k]);
            }
            out
        });
        self.tape.push(value, Op::LogSoftmax(self.id))
    }

    /// Row-wise softmax.
    pub fn softmax(self) -> Var<'t, T> {
        let value = self.with_value(|v| {
            let mut out = Tensor::zeros(v.shape());
            let k = v.row_len();
            for i in 0..v.rows() {
                softmax_into(v.row(i), &mut out.data_mut()[i * k..(i + 1) * k]);
            }
            out
        });
        self.tape.push(value, Op::Softmax(self.id))
    }

    /// `ln(max(x, floor))`; the gradient is zero where the floor is active.
    pub fn log_floor(self, floor: T) -> Var<'t, T> {
        let value = self.with_value(|v| v.map(|x| x.max(floor).ln()));
        self.tape.push(value, Op::LogFloor(self.id, floor))
    }

    pub fn sum(self) -> Var<'t, T> {
        let value = self.with_value(|v| Tensor::scalar(v.data().iter().copied().sum()));
        self.tape.push(value, Op::Sum(self.id))
    }

    pub fn mean(self) -> Var<'t, T> {
        let value = self.with_value(|v| {
            let n = T::from_usize(v.numel().max(1)).unwrap();
            Tensor::scalar(v.data().iter().copied().sum::<T>() / n)
        });
        self.tape.push(value, Op::Mean(self.id))
    }

    /// Sums each row of an `m×k` matrix into a length-`m` vector.
    pub fn row_sum(self) -> Var<'t, T> {
        let value = self.with_value(|v| {
            Tensor::vector((0..v.rows()).map(|i| v.row(i).iter().copied().sum()).collect())
        });
        self.tape.push(value, Op::RowSum(self.id))
    }

    /// `out[i] = self[i, index[i]]`.
    pub fn pick(self, index: &[usize]) -> Result<Var<'t, T>> {
        let value = self.with_value(|v| -> Result<Tensor<T>> {
            if v.rows() != index.len() {
                return Err(Error::Shape(format!(
                    "{} rows but {} indices",
                    v.rows(),
                    index.len()
                )));
            }
            let k = v.row_len();
            let mut out = Vec::with_capacity(index.len());
            for (i, &j) in index.iter().enumerate() {
                if j >= k {
                    return Err(Error::Argument(format!("index {j} out of range for {k} columns")));
                }
                out.push(v.row(i)[j]);
            }
            Ok(Tensor::vector(out))
        })?;
        Ok(self.tape.push(value, Op::Pick(self.id, index.to_vec())))
    }

    pub fn gather_rows(self, rows: &[usize]) -> Result<Var<'t, T>> {
        let value = self.with_value(|v| -> Result<Tensor<T>> {
            if let Some(&bad) = rows.iter().find(|&&r| r >= v.rows()) {
                return Err(Error::Argument(format!("row {bad} out of range for {}", v.rows())));
            }
            Ok(v.select_rows(rows))
        })?;
        Ok(self.tape.push(value, Op::GatherRows(self.id, rows.to_vec())))
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Var<'t, T>> {
        let value = self.value().reshape(shape)?;
        Ok(self.tape.push(value, Op::Reshape(self.id)))
    }

    /// Convolves every row (one `C×H×W` image) with `weight [F × C·k·k]`
    /// and adds `bias [F]`. Output rows are `F×out_h×out_w`.
    pub fn conv2d(self, weight: Var<'t, T>, bias: Var<'t, T>, geom: ConvGeometry) -> Result<Var<'t, T>> {
        self.same_tape(&weight)?;
        self.same_tape(&bias)?;
        geom.validate()?;
        let value = {
            let nodes = self.tape.nodes.borrow();
            let (x, w, b) = (
                &nodes[self.id].value,
                &nodes[weight.id].value,
                &nodes[bias.id].value,
            );
            if x.row_len() != geom.input_len()
                || w.shape() != [geom.filters, geom.patch_len()]
                || b.numel() != geom.filters
            {
                return Err(Error::Shape(format!(
                    "conv2d input {:?}, weight {:?}, bias {:?} for {geom:?}",
                    x.shape(),
                    w.shape(),
                    b.shape()
                )));
            }
            let m = x.rows();
            let positions = geom.out_height() * geom.out_width();
            let mut out = Tensor::zeros(&[m, geom.output_len()]);
            let mut cols = vec![T::zero(); geom.patch_len() * positions];
            for s in 0..m {
                geom.im2col(x.row(s), &mut cols);
                let dst = out.row_mut(s);
                gemm(geom.filters, geom.patch_len(), positions, w.data(), false, &cols, false, dst, false);
                for (fi, chunk) in dst.chunks_mut(positions).enumerate() {
                    for v in chunk {
                        *v = *v + b.data()[fi];
                    }
                }
            }
            out
        };
        Ok(self.tape.push(
            value,
            Op::Conv2d {
                input: self.id,
                weight: weight.id,
                bias: bias.id,
                geom,
            },
        ))
    }
}
