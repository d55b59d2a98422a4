//! Dense matrices with tape-based reverse-mode differentiation.
//!
//! The op set is exactly what one attention block needs. Every op works on
//! 2-D values (a 1-D shape `[n]` is read as `1 x n`, scalars are `1 x 1`).
//! Nodes are appended to a [`Graph`] in evaluation order, so the node list is
//! already topologically sorted and [`Graph::backward`] walks it in reverse.
//!
//! The graph is generic over the float type: training runs in `f32`, the
//! gradient checker re-runs the same graph in `f64`.

use std::fmt::Debug;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use thiserror::Error;

pub trait Real: Float + FromPrimitive + ToPrimitive + Debug + Default + Send + Sync + 'static {}

impl Real for f32 {}
impl Real for f64 {}

#[inline]
pub(crate) fn real<F: Real>(x: f64) -> F {
    F::from_f64(x).expect("finite constant")
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("invalid shape {shape:?} for {len} values")]
    BadShape { shape: Vec<usize>, len: usize },
    #[error("softmax row {row} is fully masked")]
    FullyMaskedRow { row: usize },
    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("backward already ran on this graph; call reset_grads first")]
    BackwardTwice,
}

pub type Result<T> = std::result::Result<T, TensorError>;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    values: Vec<F>,
}

impl<F: Real> Tensor<F> {
    pub fn new(shape: Vec<usize>, values: Vec<F>) -> Result<Self> {
        let ok = !shape.is_empty()
            && shape.len() <= 3
            && shape.iter().all(|&s| s > 0)
            && shape.iter().product::<usize>() == values.len();
        if !ok {
            return Err(TensorError::BadShape {
                shape,
                len: values.len(),
            });
        }
        Ok(Self { shape, values })
    }

    pub fn matrix(rows: usize, cols: usize, values: Vec<F>) -> Result<Self> {
        Self::new(vec![rows, cols], values)
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            shape: vec![rows, cols],
            values: vec![F::zero(); rows * cols],
        }
    }

    pub fn scalar(x: F) -> Self {
        Self {
            shape: vec![1, 1],
            values: vec![x],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(n, n);
        for i in 0..n {
            t.values[i * n + i] = F::one();
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[F] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [F] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<F> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Rows when read as a matrix (leading dims folded together).
    pub fn rows(&self) -> usize {
        self.values.len() / self.cols()
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().expect("non-empty shape")
    }

    pub fn get(&self, r: usize, c: usize) -> F {
        self.values[r * self.cols() + c]
    }

    pub fn row(&self, r: usize) -> &[F] {
        let c = self.cols();
        &self.values[r * c..(r + 1) * c]
    }

    /// The single value of a `1 x 1` tensor.
    pub fn item(&self) -> F {
        assert_eq!(self.values.len(), 1, "item() on non-scalar tensor");
        self.values[0]
    }

    pub fn cast<G: Real>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            values: self
                .values
                .iter()
                .map(|v| G::from_f64(v.to_f64().unwrap()).unwrap())
                .collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    fn dims2(&self) -> (usize, usize) {
        (self.rows(), self.cols())
    }
}

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<F> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    Transpose(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    /// `x + row`, with `row` (1 x c) added to every row of `x`.
    AddRow { x: Var, row: Var },
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<F>,
        inv_std: Vec<F>,
    },
    Gelu(Var),
    Bce { logit: Var, target: F },
    Sum(Var),
}

#[derive(Debug, Clone)]
struct Node<F> {
    value: Tensor<F>,
    grad: Option<Vec<F>>,
    requires_grad: bool,
    op: Op<F>,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.044_715;

/// Recorded computation. Confined to one thread while in use.
#[derive(Debug, Clone, Default)]
pub struct Graph<F> {
    nodes: Vec<Node<F>>,
    backward_done: bool,
}

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, false)
    }

    fn leaf(&mut self, value: Tensor<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dims2()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op: &'static str, value: Tensor<F>, inputs: &[Var], kind: Op<F>) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op });
        }
        let requires_grad = inputs.iter().any(|&v| self.needs(v));
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op: kind,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn mismatch(&self, op: &'static str, a: Var, b: Var) -> TensorError {
        TensorError::ShapeMismatch {
            op,
            left: self.nodes[a.0].value.shape.clone(),
            right: self.nodes[b.0].value.shape.clone(),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        if k != k2 {
            return Err(self.mismatch("matmul", a, b));
        }
        let out = matmul_raw(self.value(a).values(), self.value(b).values(), m, k, n);
        self.push("matmul", Tensor::zeros(m, n).with(out), &[a, b], Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(self.mismatch("add", a, b));
        }
        let (r, c) = self.shape(a);
        let out = zip(self.value(a).values(), self.value(b).values(), |x, y| x + y);
        self.push("add", Tensor::zeros(r, c).with(out), &[a, b], Op::Add(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(self.mismatch("mul", a, b));
        }
        let (r, c) = self.shape(a);
        let out = zip(self.value(a).values(), self.value(b).values(), |x, y| x * y);
        self.push("mul", Tensor::zeros(r, c).with(out), &[a, b], Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: F) -> Result<Var> {
        let (r, c) = self.shape(a);
        let out = self.value(a).values().iter().map(|&x| x * s).collect();
        self.push("scale", Tensor::zeros(r, c).with(out), &[a], Op::Scale(a, s))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.shape(a);
        let src = self.value(a).values();
        let mut out = vec![F::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        self.push("transpose", Tensor::zeros(c, r).with(out), &[a], Op::Transpose(a))
    }

    /// Stacks inputs vertically; all must share a column count.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(TensorError::BadShape {
            shape: vec![],
            len: 0,
        })?;
        let c = self.shape(first).1;
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            if self.shape(p).1 != c {
                return Err(self.mismatch("concat_rows", first, p));
            }
            rows += self.shape(p).0;
            out.extend_from_slice(self.value(p).values());
        }
        self.push(
            "concat_rows",
            Tensor::zeros(rows, c).with(out),
            parts,
            Op::ConcatRows(parts.to_vec()),
        )
    }

    /// Joins inputs side by side; all must share a row count.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(TensorError::BadShape {
            shape: vec![],
            len: 0,
        })?;
        let r = self.shape(first).0;
        for &p in parts {
            if self.shape(p).0 != r {
                return Err(self.mismatch("concat_cols", first, p));
            }
        }
        let total: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(i));
            }
        }
        self.push(
            "concat_cols",
            Tensor::zeros(r, total).with(out),
            parts,
            Op::ConcatCols(parts.to_vec()),
        )
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.shape(x);
        if len == 0 || start + len > r {
            return Err(TensorError::ShapeMismatch {
                op: "slice_rows",
                left: vec![r, c],
                right: vec![start, len],
            });
        }
        let out = self.value(x).values()[start * c..(start + len) * c].to_vec();
        self.push("slice_rows", Tensor::zeros(len, c).with(out), &[x], Op::SliceRows { x, start })
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.shape(x);
        if len == 0 || start + len > c {
            return Err(TensorError::ShapeMismatch {
                op: "slice_cols",
                left: vec![r, c],
                right: vec![start, len],
            });
        }
        let src = self.value(x);
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&src.row(i)[start..start + len]);
        }
        self.push("slice_cols", Tensor::zeros(r, len).with(out), &[x], Op::SliceCols { x, start })
    }

    /// Adds a `1 x c` row vector to every row of `x` (bias add).
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (r, c) = self.shape(x);
        if self.shape(row) != (1, c) {
            return Err(self.mismatch("add_row", x, row));
        }
        let b = self.value(row).values();
        let out = self
            .value(x)
            .values()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + b[i % c])
            .collect();
        self.push("add_row", Tensor::zeros(r, c).with(out), &[x, row], Op::AddRow { x, row })
    }

    /// Row-wise softmax. `mask[i*c + j] == false` excludes entry `(i, j)`,
    /// which then gets exactly 0.
    pub fn softmax_rows(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let (r, c) = self.shape(x);
        if let Some(m) = mask {
            if m.len() != r * c {
                return Err(TensorError::ShapeMismatch {
                    op: "softmax_rows",
                    left: vec![r, c],
                    right: vec![m.len()],
                });
            }
        }
        let src = self.value(x).values();
        let mut out = vec![F::zero(); r * c];
        for i in 0..r {
            let keep = |j: usize| mask.is_none_or(|m| m[i * c + j]);
            let mut max = F::neg_infinity();
            for j in 0..c {
                if keep(j) && src[i * c + j] > max {
                    max = src[i * c + j];
                }
            }
            if max == F::neg_infinity() {
                return Err(TensorError::FullyMaskedRow { row: i });
            }
            let mut total = F::zero();
            for j in 0..c {
                if keep(j) {
                    let e = (src[i * c + j] - max).exp();
                    out[i * c + j] = e;
                    total = total + e;
                }
            }
            for j in 0..c {
                out[i * c + j] = out[i * c + j] / total;
            }
        }
        self.push("softmax_rows", Tensor::zeros(r, c).with(out), &[x], Op::Softmax(x))
    }

    /// Per-row normalization to zero mean and unit variance (eps = 1e-5),
    /// then `gain * xhat + bias` with `gain`, `bias` of shape `1 x d`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.shape(x);
        if self.shape(gain) != (1, c) {
            return Err(self.mismatch("layer_norm", x, gain));
        }
        if self.shape(bias) != (1, c) {
            return Err(self.mismatch("layer_norm", x, bias));
        }
        let n = real::<F>(c as f64);
        let eps = real::<F>(LAYER_NORM_EPS);
        let src = self.value(x).values();
        let g = self.value(gain).values();
        let b = self.value(bias).values();
        let mut xhat = vec![F::zero(); r * c];
        let mut inv_std = vec![F::zero(); r];
        let mut out = vec![F::zero(); r * c];
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let mean = row.iter().fold(F::zero(), |a, &v| a + v) / n;
            let var = row.iter().fold(F::zero(), |a, &v| a + (v - mean) * (v - mean)) / n;
            let is = F::one() / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat[i * c + j] = h;
                out[i * c + j] = g[j] * h + b[j];
            }
        }
        self.push(
            "layer_norm",
            Tensor::zeros(r, c).with(out),
            &[x, gain, bias],
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        )
    }

    /// Tanh-form GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.shape(x);
        let out = self.value(x).values().iter().map(|&v| gelu(v)).collect();
        self.push("gelu", Tensor::zeros(r, c).with(out), &[x], Op::Gelu(x))
    }

    /// Numerically stable binary cross-entropy on a scalar logit.
    pub fn bce_with_logits(&mut self, logit: Var, target: F) -> Result<Var> {
        let (r, c) = self.shape(logit);
        if (r, c) != (1, 1) {
            return Err(TensorError::NonScalarLoss(vec![r, c]));
        }
        let z = self.value(logit).item();
        let loss = bce_value(z, target);
        self.push("bce_with_logits", Tensor::scalar(loss), &[logit], Op::Bce { logit, target })
    }

    /// Sum of all entries in storage order.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).values().iter().fold(F::zero(), |a, &v| a + v);
        self.push("sum", Tensor::scalar(s), &[x], Op::Sum(x))
    }

    /// Copy of `x` that blocks gradient flow.
    pub fn detach(&mut self, x: Var) -> Var {
        let v = self.value(x).clone();
        self.constant(v)
    }

    /// Populates gradients of every node that depends on a trainable leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(TensorError::BackwardTwice);
        }
        let shape = self.shape(loss);
        if shape != (1, 1) {
            return Err(TensorError::NonScalarLoss(vec![shape.0, shape.1]));
        }
        self.backward_done = true;
        if !self.needs(loss) {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![F::one()]);
        for idx in (0..=loss.0).rev() {
            let Some(grad) = self.nodes[idx].grad.take() else {
                continue;
            };
            self.propagate(idx, &grad);
            self.nodes[idx].grad = Some(grad);
        }
        Ok(())
    }

    /// Clears all gradients so `backward` may run again.
    pub fn reset_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.backward_done = false;
    }

    /// d(loss)/d(v) after [`Graph::backward`]; zeros for nodes the loss does
    /// not depend on.
    pub fn grad(&self, v: Var) -> Tensor<F> {
        let node = &self.nodes[v.0];
        let values = node
            .grad
            .clone()
            .unwrap_or_else(|| vec![F::zero(); node.value.len()]);
        Tensor {
            shape: node.value.shape.clone(),
            values,
        }
    }

    fn accumulate(&mut self, v: Var, contrib: Vec<F>) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        match &mut node.grad {
            Some(g) => {
                for (a, b) in g.iter_mut().zip(contrib) {
                    *a = *a + b;
                }
            }
            None => node.grad = Some(contrib),
        }
    }

    fn propagate(&mut self, idx: usize, grad: &[F]) {
        let (r, c) = self.nodes[idx].value.dims2();
        let op = self.nodes[idx].op.clone();
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.shape(a);
                let n = self.shape(b).1;
                if self.needs(a) {
                    // dA = dC * B^T
                    let bv = self.value(b).values();
                    let mut da = vec![F::zero(); m * k];
                    for i in 0..m {
                        for p in 0..k {
                            let mut acc = F::zero();
                            for j in 0..n {
                                acc = acc + grad[i * n + j] * bv[p * n + j];
                            }
                            da[i * k + p] = acc;
                        }
                    }
                    self.accumulate(a, da);
                }
                if self.needs(b) {
                    // dB = A^T * dC
                    let av = self.value(a).values();
                    let mut db = vec![F::zero(); k * n];
                    for i in 0..m {
                        for p in 0..k {
                            let aip = av[i * k + p];
                            for j in 0..n {
                                db[p * n + j] = db[p * n + j] + aip * grad[i * n + j];
                            }
                        }
                    }
                    self.accumulate(b, db);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(a, grad.to_vec());
                self.accumulate(b, grad.to_vec());
            }
            Op::Mul(a, b) => {
                if self.needs(a) {
                    let d = zip(grad, self.value(b).values(), |g, y| g * y);
                    self.accumulate(a, d);
                }
                if self.needs(b) {
                    let d = zip(grad, self.value(a).values(), |g, x| g * x);
                    self.accumulate(b, d);
                }
            }
            Op::Scale(a, s) => {
                self.accumulate(a, grad.iter().map(|&g| g * s).collect());
            }
            Op::Transpose(a) => {
                // output is r x c, input c x r
                let mut d = vec![F::zero(); r * c];
                for i in 0..r {
                    for j in 0..c {
                        d[j * r + i] = grad[i * c + j];
                    }
                }
                self.accumulate(a, d);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = self.nodes[p.0].value.len();
                    self.accumulate(p, grad[offset..offset + n].to_vec());
                    offset += n;
                }
            }
            Op::ConcatCols(parts) => {
                let mut col = 0;
                for p in parts {
                    let w = self.shape(p).1;
                    let mut d = Vec::with_capacity(r * w);
                    for i in 0..r {
                        d.extend_from_slice(&grad[i * c + col..i * c + col + w]);
                    }
                    self.accumulate(p, d);
                    col += w;
                }
            }
            Op::SliceRows { x, start } => {
                let (xr, xc) = self.shape(x);
                let mut d = vec![F::zero(); xr * xc];
                d[start * xc..start * xc + grad.len()].copy_from_slice(grad);
                self.accumulate(x, d);
            }
            Op::SliceCols { x, start } => {
                let (xr, xc) = self.shape(x);
                let mut d = vec![F::zero(); xr * xc];
                for i in 0..xr {
                    d[i * xc + start..i * xc + start + c].copy_from_slice(&grad[i * c..(i + 1) * c]);
                }
                self.accumulate(x, d);
            }
            Op::AddRow { x, row } => {
                self.accumulate(x, grad.to_vec());
                if self.needs(row) {
                    let mut d = vec![F::zero(); c];
                    for i in 0..r {
                        for j in 0..c {
                            d[j] = d[j] + grad[i * c + j];
                        }
                    }
                    self.accumulate(row, d);
                }
            }
            Op::Softmax(x) => {
                let y = self.nodes[idx].value.values();
                let mut d = vec![F::zero(); r * c];
                for i in 0..r {
                    let mut dot = F::zero();
                    for j in 0..c {
                        dot = dot + grad[i * c + j] * y[i * c + j];
                    }
                    for j in 0..c {
                        d[i * c + j] = y[i * c + j] * (grad[i * c + j] - dot);
                    }
                }
                self.accumulate(x, d);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let g = self.value(gain).values().to_vec();
                if self.needs(x) {
                    let n = real::<F>(c as f64);
                    let mut d = vec![F::zero(); r * c];
                    for i in 0..r {
                        let mut sum_dh = F::zero();
                        let mut sum_dh_h = F::zero();
                        for j in 0..c {
                            let dh = grad[i * c + j] * g[j];
                            sum_dh = sum_dh + dh;
                            sum_dh_h = sum_dh_h + dh * xhat[i * c + j];
                        }
                        for j in 0..c {
                            let dh = grad[i * c + j] * g[j];
                            d[i * c + j] =
                                inv_std[i] / n * (n * dh - sum_dh - xhat[i * c + j] * sum_dh_h);
                        }
                    }
                    self.accumulate(x, d);
                }
                if self.needs(gain) {
                    let mut d = vec![F::zero(); c];
                    for i in 0..r {
                        for j in 0..c {
                            d[j] = d[j] + grad[i * c + j] * xhat[i * c + j];
                        }
                    }
                    self.accumulate(gain, d);
                }
                if self.needs(bias) {
                    let mut d = vec![F::zero(); c];
                    for i in 0..r {
                        for j in 0..c {
                            d[j] = d[j] + grad[i * c + j];
                        }
                    }
                    self.accumulate(bias, d);
                }
            }
            Op::Gelu(x) => {
                let d = zip(grad, self.value(x).values(), |g, v| g * gelu_grad(v));
                self.accumulate(x, d);
            }
            Op::Bce { logit, target } => {
                let z = self.value(logit).item();
                self.accumulate(logit, vec![grad[0] * (sigmoid(z) - target)]);
            }
            Op::Sum(x) => {
                let n = self.nodes[x.0].value.len();
                self.accumulate(x, vec![grad[0]; n]);
            }
        }
    }
}

impl<F: Real> Tensor<F> {
    fn with(mut self, values: Vec<F>) -> Self {
        debug_assert_eq!(self.values.len(), values.len());
        self.values = values;
        self
    }
}

fn zip<F: Real>(a: &[F], b: &[F], f: impl Fn(F, F) -> F) -> Vec<F> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn matmul_raw<F: Real>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    let mut out = vec![F::zero(); m * n];
    for i in 0..m {
        for p in 0..k {
            let aip = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + aip * bv;
            }
        }
    }
    out
}

pub fn sigmoid<F: Real>(z: F) -> F {
    if z >= F::zero() {
        F::one() / (F::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (F::one() + e)
    }
}

/// `log(1 + exp(-z))` for target 1 and `log(1 + exp(z))` for target 0.
pub fn bce_value<F: Real>(z: F, target: F) -> F {
    z.max(F::zero()) - z * target + (F::one() + (-z.abs()).exp()).ln()
}

fn gelu<F: Real>(x: F) -> F {
    let k = real::<F>((2.0 / std::f64::consts::PI).sqrt());
    let half = real::<F>(0.5);
    let u = k * (x + real::<F>(GELU_C) * x * x * x);
    half * x * (F::one() + u.tanh())
}

fn gelu_grad<F: Real>(x: F) -> F {
    let k = real::<F>((2.0 / std::f64::consts::PI).sqrt());
    let half = real::<F>(0.5);
    let c = real::<F>(GELU_C);
    let u = k * (x + c * x * x * x);
    let t = u.tanh();
    half * (F::one() + t) + half * x * (F::one() - t * t) * k * (F::one() + real::<F>(3.0) * c * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor<f64> {
        Tensor::matrix(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Central differences of `f` with respect to every entry of `inputs[which]`.
    fn finite_diff(
        inputs: &[Tensor<f64>],
        which: usize,
        f: &dyn Fn(&[Tensor<f64>]) -> f64,
    ) -> Vec<f64> {
        let h = 1e-6;
        (0..inputs[which].len())
            .map(|i| {
                let mut plus = inputs.to_vec();
                plus[which].values_mut()[i] += h;
                let mut minus = inputs.to_vec();
                minus[which].values_mut()[i] -= h;
                (f(&plus) - f(&minus)) / (2.0 * h)
            })
            .collect()
    }

    fn assert_close(analytic: &[f64], numeric: &[f64]) {
        for (a, n) in analytic.iter().zip(numeric) {
            let err = if a.abs() < 1e-8 {
                (a - n).abs()
            } else {
                (a - n).abs() / a.abs().max(n.abs())
            };
            assert!(err <= 1e-5, "analytic {a} vs numeric {n} (err {err})");
        }
    }

    /// Builds `f` on a fresh graph, returns loss and grads of every input.
    fn run(
        inputs: &[Tensor<f64>],
        build: &dyn Fn(&mut Graph<f64>, &[Var]) -> Var,
    ) -> (f64, Vec<Vec<f64>>) {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
        let loss = build(&mut g, &vars);
        g.backward(loss).unwrap();
        let l = g.value(loss).item();
        (l, vars.iter().map(|&v| g.grad(v).into_values()).collect())
    }

    fn check(inputs: Vec<Tensor<f64>>, build: &dyn Fn(&mut Graph<f64>, &[Var]) -> Var) {
        let (_, grads) = run(&inputs, build);
        let f = |ins: &[Tensor<f64>]| run(ins, build).0;
        for (i, g) in grads.iter().enumerate() {
            assert_close(g, &finite_diff(&inputs, i, &f));
        }
    }

    #[test]
    fn matmul_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = rand_tensor(&mut rng, 2, 3);
        let mut g = Graph::new();
        let i = g.constant(Tensor::identity(2));
        let bv = g.constant(b.clone());
        let out = g.matmul(i, bv).unwrap();
        assert_eq!(g.value(out), &b);
    }

    #[test]
    fn matmul_matches_naive_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = rand_tensor(&mut rng, 3, 4);
        let b = rand_tensor(&mut rng, 4, 2);
        let mut g = Graph::new();
        let (av, bv) = (g.constant(a.clone()), g.constant(b.clone()));
        let out = g.matmul(av, bv).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                let mut s = 0.0;
                for k in 0..4 {
                    s += a.get(i, k) * b.get(k, j);
                }
                let got = g.value(out).get(i, j);
                assert!((got - s).abs() <= 1e-6 * s.abs().max(1e-12));
            }
        }
    }

    #[test]
    fn matmul_shape_mismatch() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(2, 3));
        let b = g.constant(Tensor::zeros(2, 3));
        assert!(matches!(g.matmul(a, b), Err(TensorError::ShapeMismatch { .. })));
    }

    #[test]
    fn grad_of_sum_matmul_is_b_transpose_broadcast() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = rand_tensor(&mut rng, 3, 4);
        let b = rand_tensor(&mut rng, 4, 2);
        let (_, grads) = run(&[a.clone(), b.clone()], &|g, v| {
            let c = g.matmul(v[0], v[1]).unwrap();
            g.sum(c).unwrap()
        });
        for i in 0..3 {
            for k in 0..4 {
                let row_sum: f64 = (0..2).map(|j| b.get(k, j)).sum();
                assert!((grads[0][i * 4 + k] - row_sum).abs() < 1e-12);
            }
        }
        check(vec![a, b], &|g, v| {
            let c = g.matmul(v[0], v[1]).unwrap();
            g.sum(c).unwrap()
        });
    }

    #[test]
    fn softmax_uniform_and_stable() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::matrix(1, 4, vec![0.3; 4]).unwrap());
        let y = g.softmax_rows(x, None).unwrap();
        assert_eq!(g.value(y).values(), &[0.25; 4]);

        let x = g.constant(Tensor::matrix(1, 2, vec![1000.0, 0.0]).unwrap());
        let y = g.softmax_rows(x, None).unwrap();
        assert_eq!(g.value(y).values(), &[1.0, 0.0]);

        let mut g32 = Graph::<f32>::new();
        let x = g32.constant(Tensor::matrix(1, 2, vec![1000.0, 0.0]).unwrap());
        let y = g32.softmax_rows(x, None).unwrap();
        assert_eq!(g32.value(y).values(), &[1.0, 0.0]);
    }

    #[test]
    fn softmax_mask() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::matrix(2, 2, vec![5.0, 1.0, 2.0, 3.0]).unwrap());
        let y = g.softmax_rows(x, Some(&[true, false, true, true])).unwrap();
        assert_eq!(g.value(y).row(0), &[1.0, 0.0]);
        assert!(matches!(
            g.softmax_rows(x, Some(&[false, false, true, true])),
            Err(TensorError::FullyMaskedRow { row: 0 })
        ));
    }

    #[test]
    fn softmax_rows_sum_to_one_and_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_tensor(&mut rng, 5, 7);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let y = g.softmax_rows(xv, None).unwrap();
        for i in 0..5 {
            let s: f64 = g.value(y).row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
        let w = rand_tensor(&mut rng, 5, 7);
        let mask: Vec<bool> = (0..35).map(|i| (i % 7) <= (i / 7)).collect();
        check(vec![x, w], &|g, v| {
            let s = g.softmax_rows(v[0], Some(&mask)).unwrap();
            let p = g.mul(s, v[1]).unwrap();
            g.sum(p).unwrap()
        });
    }

    #[test]
    fn layer_norm_cases() {
        let mut g = Graph::<f64>::new();
        let ones = g.constant(Tensor::matrix(1, 3, vec![1.0; 3]).unwrap());
        let zeros = g.constant(Tensor::zeros(1, 3));
        let x = g.constant(Tensor::matrix(1, 3, vec![4.0; 3]).unwrap());
        let y = g.layer_norm(x, ones, zeros).unwrap();
        assert_eq!(g.value(y).values(), &[0.0; 3]);

        let one2 = g.constant(Tensor::matrix(1, 2, vec![1.0; 2]).unwrap());
        let zero2 = g.constant(Tensor::zeros(1, 2));
        let x = g.constant(Tensor::matrix(1, 2, vec![1.0, -1.0]).unwrap());
        let y = g.layer_norm(x, one2, zero2).unwrap();
        let v = g.value(y).values();
        assert!((v[0] - 1.0).abs() < 1e-5 && (v[1] + 1.0).abs() < 1e-5);
    }

    #[test]
    fn layer_norm_moments_and_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_tensor(&mut rng, 4, 16);
        let mut g = Graph::new();
        let gain = g.constant(Tensor::matrix(1, 16, vec![1.0; 16]).unwrap());
        let bias = g.constant(Tensor::zeros(1, 16));
        let xv = g.constant(x.clone());
        let y = g.layer_norm(xv, gain, bias).unwrap();
        for i in 0..4 {
            let row = g.value(y).row(i);
            let mean: f64 = row.iter().sum::<f64>() / 16.0;
            let var: f64 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-5);
            assert!((var - 1.0).abs() < 1e-4, "var {var}");
        }
        let gain = rand_tensor(&mut rng, 1, 16);
        let bias = rand_tensor(&mut rng, 1, 16);
        let w = rand_tensor(&mut rng, 4, 16);
        check(vec![x, gain, bias, w], &|g, v| {
            let y = g.layer_norm(v[0], v[1], v[2]).unwrap();
            let p = g.mul(y, v[3]).unwrap();
            g.sum(p).unwrap()
        });
    }

    #[test]
    fn bce_values() {
        assert!((bce_value(0.0f64, 1.0) - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(bce_value(50.0f64, 1.0) < 1e-20);
        assert!((bce_value(50.0f64, 0.0) - 50.0).abs() < 1e-12);
        assert!(bce_value(-1000.0f32, 1.0).is_finite());
    }

    #[test]
    fn bce_grad_is_sigmoid_minus_target() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..20 {
            let z: f64 = rng.random_range(-6.0..6.0);
            let y = if rng.random_bool(0.5) { 1.0 } else { 0.0 };
            let (_, grads) = run(&[Tensor::scalar(z)], &|g, v| g.bce_with_logits(v[0], y).unwrap());
            assert!((grads[0][0] - (sigmoid(z) - y)).abs() < 1e-12);
            check(vec![Tensor::scalar(z)], &|g, v| g.bce_with_logits(v[0], y).unwrap());
        }
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let (_, grads) = run(&[Tensor::matrix(1, 5, vec![0.5; 5]).unwrap()], &|g, v| {
            g.sum(v[0]).unwrap()
        });
        assert_eq!(grads[0], vec![1.0; 5]);
    }

    #[test]
    fn detached_branch_gets_zero_grad() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::matrix(1, 3, vec![1.0, 2.0, 3.0]).unwrap());
        let w = g.param(Tensor::matrix(1, 3, vec![0.5, 0.5, 0.5]).unwrap());
        let unused = g.param(Tensor::scalar(7.0));
        let wd = g.detach(w);
        let p = g.mul(x, wd).unwrap();
        let loss = g.sum(p).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(w).values(), &[0.0; 3]);
        assert_eq!(g.grad(unused).values(), &[0.0]);
        assert_eq!(g.grad(x).values(), &[0.5; 3]);
    }

    #[test]
    fn backward_twice_is_an_error() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::scalar(1.0));
        let l = g.sum(x).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.backward(l), Err(TensorError::BackwardTwice));
        g.reset_grads();
        g.backward(l).unwrap();
    }

    #[test]
    fn composite_ops_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = rand_tensor(&mut rng, 3, 4);
        let b = rand_tensor(&mut rng, 3, 2);
        let row = rand_tensor(&mut rng, 1, 6);
        check(vec![a, b, row], &|g, v| {
            let cat = g.concat_cols(&[v[0], v[1]]).unwrap();
            let biased = g.add_row(cat, v[2]).unwrap();
            let act = g.gelu(biased).unwrap();
            let t = g.transpose(act).unwrap();
            let sc = g.slice_cols(t, 1, 2).unwrap();
            let sr = g.slice_rows(act, 2, 1).unwrap();
            let stacked = g.concat_rows(&[sr, sr]).unwrap();
            let sq = g.mul(stacked, stacked).unwrap();
            let s1 = g.sum(sq).unwrap();
            let s2 = g.sum(sc).unwrap();
            let s2 = g.scale(s2, 0.3).unwrap();
            g.add(s1, s2).unwrap()
        });
    }

    #[test]
    fn same_inputs_bit_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = rand_tensor(&mut rng, 4, 4).cast::<f32>();
        let go = || {
            let mut g = Graph::<f32>::new();
            let x = g.param(a.clone());
            let s = g.softmax_rows(x, None).unwrap();
            let m = g.matmul(s, x).unwrap();
            let l = g.sum(m).unwrap();
            g.backward(l).unwrap();
            (g.value(l).item().to_bits(), g.grad(x).values().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
        };
        assert_eq!(go(), go());
    }
}
