//! Dense row-major tensors with tape-based reverse-mode differentiation.
//!
//! The graph is a DAG of reference-counted nodes. Every op records its
//! parents and enough payload to replay the local gradient rule in
//! [`Tensor::backward`]. Graphs are freed when the output handles drop;
//! there is no support for higher-order derivatives.
//!
//! Everything is generic over the element type so gradient checks can run
//! at both 32-bit and 64-bit precision.

use std::cell::{Ref, RefCell};
use std::collections::HashSet;
use std::fmt;
use std::rc::Rc;

use num_traits::Float;
use thiserror::Error;

/// Element type of a [`Tensor`]. Implemented for `f32` and `f64`.
pub trait Scalar:
    Float + fmt::Debug + fmt::Display + 'static
{
    fn from_f64(v: f64) -> Self;
    fn to_f64_lossy(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64_lossy(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64_lossy(self) -> f64 {
        self
    }
}

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op} expects a matrix, got shape {shape:?}")]
    NotAMatrix { op: &'static str, shape: Vec<usize> },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("index {index} out of range for {what} of size {size}")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        size: usize,
    },
}

enum Op<S: Scalar> {
    Leaf,
    Add,
    /// parents: [matrix (r x c), row vector (c)]
    AddRowBroadcast,
    Mul,
    Matmul,
    Transpose,
    Scale(S),
    AddScalar(S),
    Exp,
    Ln,
    ClampMin(S),
    Gelu,
    SoftmaxRows,
    LogSoftmaxRows,
    Sum,
    /// output row i is parent row `rows[i]`
    GatherRows(Vec<usize>),
    /// output element i is parent[(row, col)] of entry i
    GatherRowCols(Vec<(usize, usize)>),
    SliceCols {
        start: usize,
        end: usize,
    },
    /// column widths of each parent, in order
    ConcatCols(Vec<usize>),
    /// parents: [x (r x c), gamma (c), beta (c)]
    LayerNormRows {
        eps: S,
    },
}

struct Node<S: Scalar> {
    shape: Vec<usize>,
    data: RefCell<Vec<S>>,
    grad: RefCell<Option<Vec<S>>>,
    requires_grad: bool,
    parents: Vec<Tensor<S>>,
    op: Op<S>,
}

/// A dense row-major tensor participating in a recorded computation graph.
#[derive(Clone)]
pub struct Tensor<S: Scalar>(Rc<Node<S>>);

/// Convenience alias for the default training precision.
pub type Tensor32 = Tensor<f32>;

const GELU_COEF: f64 = 0.044_715;
const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;

impl<S: Scalar> Tensor<S> {
    fn new(shape: Vec<usize>, data: Vec<S>, requires_grad: bool, parents: Vec<Tensor<S>>, op: Op<S>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor(Rc::new(Node {
            shape,
            data: RefCell::new(data),
            grad: RefCell::new(None),
            requires_grad,
            parents,
            op,
        }))
    }

    pub fn from_vec(shape: &[usize], data: Vec<S>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "data length must match shape"
        );
        Self::new(shape.to_vec(), data, false, vec![], Op::Leaf)
    }

    /// Leaf tensor that accumulates gradients.
    pub fn param(shape: &[usize], data: Vec<S>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        Self::new(shape.to_vec(), data, true, vec![], Op::Leaf)
    }

    pub fn scalar(v: S) -> Self {
        Self::from_vec(&[1], vec![v])
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::from_vec(shape, vec![S::zero(); shape.iter().product()])
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn len(&self) -> usize {
        self.0.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn data(&self) -> Ref<'_, Vec<S>> {
        self.0.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<S> {
        self.0.data.borrow().clone()
    }

    pub fn item(&self) -> S {
        assert_eq!(self.len(), 1, "item() requires a scalar tensor");
        self.0.data.borrow()[0]
    }

    /// Overwrite the stored values in place. Only meaningful for leaves
    /// (optimizer updates, finite-difference probes).
    pub fn set_data(&self, data: &[S]) {
        let mut d = self.0.data.borrow_mut();
        assert_eq!(d.len(), data.len());
        d.copy_from_slice(data);
    }

    pub fn grad(&self) -> Option<Vec<S>> {
        self.0.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    fn rows_cols(&self, op: &'static str) -> Result<(usize, usize), TensorError> {
        match self.0.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            _ => Err(TensorError::NotAMatrix {
                op,
                shape: self.0.shape.clone(),
            }),
        }
    }

    fn unary(&self, op: Op<S>, data: Vec<S>, shape: Vec<usize>) -> Tensor<S> {
        let rg = self.0.requires_grad;
        Tensor::new(shape, data, rg, vec![self.clone()], op)
    }

    pub fn add(&self, other: &Tensor<S>) -> Result<Tensor<S>, TensorError> {
        if self.0.shape != other.0.shape {
            return Err(TensorError::ShapeMismatch {
                op: "add",
                lhs: self.0.shape.clone(),
                rhs: other.0.shape.clone(),
            });
        }
        let a = self.0.data.borrow();
        let b = other.0.data.borrow();
        let data: Vec<S> = a.iter().zip(b.iter()).map(|(&x, &y)| x + y).collect();
        drop(a);
        drop(b);
        let rg = self.0.requires_grad || other.0.requires_grad;
        Ok(Tensor::new(
            self.0.shape.clone(),
            data,
            rg,
            vec![self.clone(), other.clone()],
            Op::Add,
        ))
    }

    /// `self` is (r x c); `bias` is a length-c vector added to every row.
    pub fn add_row_broadcast(&self, bias: &Tensor<S>) -> Result<Tensor<S>, TensorError> {
        let (r, c) = self.rows_cols("add_row_broadcast")?;
        if bias.len() != c {
            return Err(TensorError::ShapeMismatch {
                op: "add_row_broadcast",
                lhs: self.0.shape.clone(),
                rhs: bias.0.shape.clone(),
            });
        }
        let a = self.0.data.borrow();
        let b = bias.0.data.borrow();
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            for j in 0..c {
                data.push(a[i * c + j] + b[j]);
            }
        }
        drop(a);
        drop(b);
        let rg = self.0.requires_grad || bias.0.requires_grad;
        Ok(Tensor::new(
            self.0.shape.clone(),
            data,
            rg,
            vec![self.clone(), bias.clone()],
            Op::AddRowBroadcast,
        ))
    }

    pub fn mul(&self, other: &Tensor<S>) -> Result<Tensor<S>, TensorError> {
        if self.0.shape != other.0.shape {
            return Err(TensorError::ShapeMismatch {
                op: "mul",
                lhs: self.0.shape.clone(),
                rhs: other.0.shape.clone(),
            });
        }
        let a = self.0.data.borrow();
        let b = other.0.data.borrow();
        let data: Vec<S> = a.iter().zip(b.iter()).map(|(&x, &y)| x * y).collect();
        drop(a);
        drop(b);
        let rg = self.0.requires_grad || other.0.requires_grad;
        Ok(Tensor::new(
            self.0.shape.clone(),
            data,
            rg,
            vec![self.clone(), other.clone()],
            Op::Mul,
        ))
    }

    pub fn matmul(&self, other: &Tensor<S>) -> Result<Tensor<S>, TensorError> {
        let (m, k) = self.rows_cols("matmul")?;
        let (k2, n) = other.rows_cols("matmul")?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: self.0.shape.clone(),
                rhs: other.0.shape.clone(),
            });
        }
        let a = self.0.data.borrow();
        let b = other.0.data.borrow();
        let data = matmul_raw(&a, &b, m, k, n);
        drop(a);
        drop(b);
        let rg = self.0.requires_grad || other.0.requires_grad;
        Ok(Tensor::new(
            vec![m, n],
            data,
            rg,
            vec![self.clone(), other.clone()],
            Op::Matmul,
        ))
    }

    pub fn transpose(&self) -> Result<Tensor<S>, TensorError> {
        let (r, c) = self.rows_cols("transpose")?;
        let a = self.0.data.borrow();
        let mut data = vec![S::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = a[i * c + j];
            }
        }
        drop(a);
        Ok(self.unary(Op::Transpose, data, vec![c, r]))
    }

    pub fn scale(&self, factor: S) -> Tensor<S> {
        let data: Vec<S> = self.0.data.borrow().iter().map(|&x| x * factor).collect();
        self.unary(Op::Scale(factor), data, self.0.shape.clone())
    }

    pub fn add_scalar(&self, c: S) -> Tensor<S> {
        let data: Vec<S> = self.0.data.borrow().iter().map(|&x| x + c).collect();
        self.unary(Op::AddScalar(c), data, self.0.shape.clone())
    }

    pub fn exp(&self) -> Tensor<S> {
        let data: Vec<S> = self.0.data.borrow().iter().map(|&x| x.exp()).collect();
        self.unary(Op::Exp, data, self.0.shape.clone())
    }

    pub fn ln(&self) -> Tensor<S> {
        let data: Vec<S> = self.0.data.borrow().iter().map(|&x| x.ln()).collect();
        self.unary(Op::Ln, data, self.0.shape.clone())
    }

    pub fn clamp_min(&self, min: S) -> Tensor<S> {
        let data: Vec<S> = self
            .0
            .data
            .borrow()
            .iter()
            .map(|&x| if x < min { min } else { x })
            .collect();
        self.unary(Op::ClampMin(min), data, self.0.shape.clone())
    }

    pub fn gelu(&self) -> Tensor<S> {
        let data: Vec<S> = self.0.data.borrow().iter().map(|&x| gelu_val(x)).collect();
        self.unary(Op::Gelu, data, self.0.shape.clone())
    }

    pub fn softmax_rows(&self) -> Result<Tensor<S>, TensorError> {
        let (r, c) = self.rows_cols("softmax_rows")?;
        let a = self.0.data.borrow();
        let mut data = vec![S::zero(); r * c];
        for i in 0..r {
            let row = &a[i * c..(i + 1) * c];
            softmax_row(row, &mut data[i * c..(i + 1) * c]);
        }
        drop(a);
        Ok(self.unary(Op::SoftmaxRows, data, self.0.shape.clone()))
    }

    /// Numerically stabilized log-softmax along the last axis of a matrix.
    pub fn log_softmax_rows(&self) -> Result<Tensor<S>, TensorError> {
        let (r, c) = self.rows_cols("log_softmax_rows")?;
        let a = self.0.data.borrow();
        let mut data = vec![S::zero(); r * c];
        for i in 0..r {
            let row = &a[i * c..(i + 1) * c];
            log_softmax_row(row, &mut data[i * c..(i + 1) * c]);
        }
        drop(a);
        Ok(self.unary(Op::LogSoftmaxRows, data, self.0.shape.clone()))
    }

    pub fn sum(&self) -> Tensor<S> {
        let total = self
            .0
            .data
            .borrow()
            .iter()
            .fold(S::zero(), |acc, &x| acc + x);
        self.unary(Op::Sum, vec![total], vec![1])
    }

    /// Gather whole rows; also serves as the embedding lookup.
    pub fn gather_rows(&self, rows: &[usize]) -> Result<Tensor<S>, TensorError> {
        let (r, c) = self.rows_cols("gather_rows")?;
        for &i in rows {
            if i >= r {
                return Err(TensorError::IndexOutOfRange {
                    what: "row",
                    index: i,
                    size: r,
                });
            }
        }
        let a = self.0.data.borrow();
        let mut data = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            data.extend_from_slice(&a[i * c..(i + 1) * c]);
        }
        drop(a);
        Ok(self.unary(Op::GatherRows(rows.to_vec()), data, vec![rows.len(), c]))
    }

    /// Pick one element per (row, col) pair; yields a vector of that length.
    pub fn gather_row_cols(&self, idx: &[(usize, usize)]) -> Result<Tensor<S>, TensorError> {
        let (r, c) = self.rows_cols("gather_row_cols")?;
        for &(i, j) in idx {
            if i >= r {
                return Err(TensorError::IndexOutOfRange {
                    what: "row",
                    index: i,
                    size: r,
                });
            }
            if j >= c {
                return Err(TensorError::IndexOutOfRange {
                    what: "col",
                    index: j,
                    size: c,
                });
            }
        }
        let a = self.0.data.borrow();
        let data: Vec<S> = idx.iter().map(|&(i, j)| a[i * c + j]).collect();
        drop(a);
        Ok(self.unary(Op::GatherRowCols(idx.to_vec()), data, vec![idx.len()]))
    }

    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Tensor<S>, TensorError> {
        let (r, c) = self.rows_cols("slice_cols")?;
        if end > c || start >= end {
            return Err(TensorError::IndexOutOfRange {
                what: "col range",
                index: end,
                size: c,
            });
        }
        let a = self.0.data.borrow();
        let w = end - start;
        let mut data = Vec::with_capacity(r * w);
        for i in 0..r {
            data.extend_from_slice(&a[i * c + start..i * c + end]);
        }
        drop(a);
        Ok(self.unary(Op::SliceCols { start, end }, data, vec![r, w]))
    }

    pub fn concat_cols(parts: &[Tensor<S>]) -> Result<Tensor<S>, TensorError> {
        assert!(!parts.is_empty(), "concat_cols needs at least one part");
        let (r, _) = parts[0].rows_cols("concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let (pr, pc) = p.rows_cols("concat_cols")?;
            if pr != r {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: parts[0].0.shape.clone(),
                    rhs: p.0.shape.clone(),
                });
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for p in parts {
                let pc = p.0.shape[1];
                let d = p.0.data.borrow();
                data.extend_from_slice(&d[i * pc..(i + 1) * pc]);
            }
        }
        let rg = parts.iter().any(|p| p.0.requires_grad);
        Ok(Tensor::new(
            vec![r, total],
            data,
            rg,
            parts.to_vec(),
            Op::ConcatCols(widths),
        ))
    }

    /// Row-wise layer normalization with learned scale and shift.
    pub fn layer_norm(&self, gamma: &Tensor<S>, beta: &Tensor<S>, eps: S) -> Result<Tensor<S>, TensorError> {
        let (r, c) = self.rows_cols("layer_norm")?;
        if gamma.len() != c || beta.len() != c {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                lhs: self.0.shape.clone(),
                rhs: gamma.0.shape.clone(),
            });
        }
        let x = self.0.data.borrow();
        let g = gamma.0.data.borrow();
        let b = beta.0.data.borrow();
        let nc = S::from_f64(c as f64);
        let mut data = vec![S::zero(); r * c];
        for i in 0..r {
            let row = &x[i * c..(i + 1) * c];
            let mean = row.iter().fold(S::zero(), |a, &v| a + v) / nc;
            let var = row
                .iter()
                .fold(S::zero(), |a, &v| a + (v - mean) * (v - mean))
                / nc;
            let inv = (var + eps).sqrt().recip();
            for j in 0..c {
                data[i * c + j] = (row[j] - mean) * inv * g[j] + b[j];
            }
        }
        drop(x);
        drop(g);
        drop(b);
        let rg = self.0.requires_grad || gamma.0.requires_grad || beta.0.requires_grad;
        Ok(Tensor::new(
            self.0.shape.clone(),
            data,
            rg,
            vec![self.clone(), gamma.clone(), beta.clone()],
            Op::LayerNormRows { eps },
        ))
    }

    pub fn accumulate_grad(&self, delta: &[S]) {
        let mut g = self.0.grad.borrow_mut();
        match g.as_mut() {
            Some(existing) => {
                for (e, &d) in existing.iter_mut().zip(delta.iter()) {
                    *e = *e + d;
                }
            }
            None => *g = Some(delta.to_vec()),
        }
    }

    /// Reverse-mode sweep from a scalar loss. Grads of every reachable
    /// `requires_grad` node are accumulated; call repeatedly to sum.
    pub fn backward(&self) -> Result<(), TensorError> {
        if self.len() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: self.0.shape.clone(),
            });
        }
        // Iterative post-order topological sort over parents.
        let mut order: Vec<Tensor<S>> = Vec::new();
        let mut visited: HashSet<*const Node<S>> = HashSet::new();
        let mut stack: Vec<(Tensor<S>, usize)> = vec![(self.clone(), 0)];
        while let Some((node, child)) = stack.pop() {
            let key = Rc::as_ptr(&node.0);
            if child == 0 {
                if visited.contains(&key) {
                    continue;
                }
                visited.insert(key);
            }
            if child < node.0.parents.len() {
                let parent = node.0.parents[child].clone();
                stack.push((node, child + 1));
                if !visited.contains(&Rc::as_ptr(&parent.0)) && parent.0.requires_grad {
                    stack.push((parent, 0));
                }
            } else {
                order.push(node);
            }
        }
        self.accumulate_grad(&[S::one()]);
        for node in order.iter().rev() {
            if !node.0.requires_grad {
                continue;
            }
            let grad = match node.0.grad.borrow().clone() {
                Some(g) => g,
                None => continue,
            };
            node.backprop_into_parents(&grad);
            // Intermediate node grads are scratch space; keep only leaves.
            if !node.0.parents.is_empty() {
                *node.0.grad.borrow_mut() = None;
            }
        }
        Ok(())
    }

    fn backprop_into_parents(&self, grad: &[S]) {
        let parents = &self.0.parents;
        match &self.0.op {
            Op::Leaf => {}
            Op::Add => {
                for p in parents {
                    if p.0.requires_grad {
                        p.accumulate_grad(grad);
                    }
                }
            }
            Op::AddRowBroadcast => {
                let (r, c) = (self.0.shape[0], self.0.shape[1]);
                if parents[0].0.requires_grad {
                    parents[0].accumulate_grad(grad);
                }
                if parents[1].0.requires_grad {
                    let mut gb = vec![S::zero(); c];
                    for i in 0..r {
                        for j in 0..c {
                            gb[j] = gb[j] + grad[i * c + j];
                        }
                    }
                    parents[1].accumulate_grad(&gb);
                }
            }
            Op::Mul => {
                let a = parents[0].0.data.borrow();
                let b = parents[1].0.data.borrow();
                if parents[0].0.requires_grad {
                    let ga: Vec<S> = grad.iter().zip(b.iter()).map(|(&g, &y)| g * y).collect();
                    drop_and_acc(&parents[0], ga);
                }
                if parents[1].0.requires_grad {
                    let gb: Vec<S> = grad.iter().zip(a.iter()).map(|(&g, &x)| g * x).collect();
                    drop_and_acc(&parents[1], gb);
                }
            }
            Op::Matmul => {
                let (m, n) = (self.0.shape[0], self.0.shape[1]);
                let k = parents[0].0.shape[1];
                if parents[0].0.requires_grad {
                    // dA = dC . B^T
                    let b = parents[1].0.data.borrow();
                    let mut bt = vec![S::zero(); n * k];
                    for i in 0..k {
                        for j in 0..n {
                            bt[j * k + i] = b[i * n + j];
                        }
                    }
                    drop(b);
                    let ga = matmul_raw(grad, &bt, m, n, k);
                    parents[0].accumulate_grad(&ga);
                }
                if parents[1].0.requires_grad {
                    // dB = A^T . dC
                    let a = parents[0].0.data.borrow();
                    let mut at = vec![S::zero(); k * m];
                    for i in 0..m {
                        for j in 0..k {
                            at[j * m + i] = a[i * k + j];
                        }
                    }
                    drop(a);
                    let gb = matmul_raw(&at, grad, k, m, n);
                    parents[1].accumulate_grad(&gb);
                }
            }
            Op::Transpose => {
                if parents[0].0.requires_grad {
                    let (r, c) = (self.0.shape[0], self.0.shape[1]);
                    let mut gp = vec![S::zero(); r * c];
                    for i in 0..r {
                        for j in 0..c {
                            gp[j * r + i] = grad[i * c + j];
                        }
                    }
                    parents[0].accumulate_grad(&gp);
                }
            }
            Op::Scale(f) => {
                if parents[0].0.requires_grad {
                    let gp: Vec<S> = grad.iter().map(|&g| g * *f).collect();
                    parents[0].accumulate_grad(&gp);
                }
            }
            Op::AddScalar(_) => {
                if parents[0].0.requires_grad {
                    parents[0].accumulate_grad(grad);
                }
            }
            Op::Exp => {
                if parents[0].0.requires_grad {
                    let out = self.0.data.borrow();
                    let gp: Vec<S> = grad.iter().zip(out.iter()).map(|(&g, &y)| g * y).collect();
                    drop(out);
                    parents[0].accumulate_grad(&gp);
                }
            }
            Op::Ln => {
                if parents[0].0.requires_grad {
                    let x = parents[0].0.data.borrow();
                    let gp: Vec<S> = grad.iter().zip(x.iter()).map(|(&g, &v)| g / v).collect();
                    drop_and_acc(&parents[0], gp);
                }
            }
            Op::ClampMin(min) => {
                if parents[0].0.requires_grad {
                    let x = parents[0].0.data.borrow();
                    let gp: Vec<S> = grad
                        .iter()
                        .zip(x.iter())
                        .map(|(&g, &v)| if v > *min { g } else { S::zero() })
                        .collect();
                    drop_and_acc(&parents[0], gp);
                }
            }
            Op::Gelu => {
                if parents[0].0.requires_grad {
                    let x = parents[0].0.data.borrow();
                    let gp: Vec<S> = grad
                        .iter()
                        .zip(x.iter())
                        .map(|(&g, &v)| g * gelu_grad(v))
                        .collect();
                    drop_and_acc(&parents[0], gp);
                }
            }
            Op::SoftmaxRows => {
                if parents[0].0.requires_grad {
                    let (r, c) = (self.0.shape[0], self.0.shape[1]);
                    let s = self.0.data.borrow();
                    let mut gp = vec![S::zero(); r * c];
                    for i in 0..r {
                        let srow = &s[i * c..(i + 1) * c];
                        let grow = &grad[i * c..(i + 1) * c];
                        let dot = srow
                            .iter()
                            .zip(grow.iter())
                            .fold(S::zero(), |a, (&sv, &gv)| a + sv * gv);
                        for j in 0..c {
                            gp[i * c + j] = srow[j] * (grow[j] - dot);
                        }
                    }
                    drop(s);
                    parents[0].accumulate_grad(&gp);
                }
            }
            Op::LogSoftmaxRows => {
                if parents[0].0.requires_grad {
                    let (r, c) = (self.0.shape[0], self.0.shape[1]);
                    let out = self.0.data.borrow();
                    let mut gp = vec![S::zero(); r * c];
                    for i in 0..r {
                        let orow = &out[i * c..(i + 1) * c];
                        let grow = &grad[i * c..(i + 1) * c];
                        let gsum = grow.iter().fold(S::zero(), |a, &g| a + g);
                        for j in 0..c {
                            gp[i * c + j] = grow[j] - orow[j].exp() * gsum;
                        }
                    }
                    drop(out);
                    parents[0].accumulate_grad(&gp);
                }
            }
            Op::Sum => {
                if parents[0].0.requires_grad {
                    let gp = vec![grad[0]; parents[0].len()];
                    parents[0].accumulate_grad(&gp);
                }
            }
            Op::GatherRows(rows) => {
                if parents[0].0.requires_grad {
                    let c = parents[0].0.shape[1];
                    let mut gp = vec![S::zero(); parents[0].len()];
                    for (out_i, &src) in rows.iter().enumerate() {
                        for j in 0..c {
                            gp[src * c + j] = gp[src * c + j] + grad[out_i * c + j];
                        }
                    }
                    parents[0].accumulate_grad(&gp);
                }
            }
            Op::GatherRowCols(idx) => {
                if parents[0].0.requires_grad {
                    let c = parents[0].0.shape[1];
                    let mut gp = vec![S::zero(); parents[0].len()];
                    for (out_i, &(i, j)) in idx.iter().enumerate() {
                        gp[i * c + j] = gp[i * c + j] + grad[out_i];
                    }
                    parents[0].accumulate_grad(&gp);
                }
            }
            Op::SliceCols { start, end } => {
                if parents[0].0.requires_grad {
                    let c = parents[0].0.shape[1];
                    let r = self.0.shape[0];
                    let w = end - start;
                    let mut gp = vec![S::zero(); parents[0].len()];
                    for i in 0..r {
                        for j in 0..w {
                            gp[i * c + start + j] = grad[i * w + j];
                        }
                    }
                    parents[0].accumulate_grad(&gp);
                }
            }
            Op::ConcatCols(widths) => {
                let r = self.0.shape[0];
                let total = self.0.shape[1];
                let mut offset = 0usize;
                for (p, &w) in parents.iter().zip(widths.iter()) {
                    if p.0.requires_grad {
                        let mut gp = vec![S::zero(); r * w];
                        for i in 0..r {
                            gp[i * w..(i + 1) * w]
                                .copy_from_slice(&grad[i * total + offset..i * total + offset + w]);
                        }
                        p.accumulate_grad(&gp);
                    }
                    offset += w;
                }
            }
            Op::LayerNormRows { eps } => {
                let (r, c) = (self.0.shape[0], self.0.shape[1]);
                let x = parents[0].0.data.borrow();
                let g = parents[1].0.data.borrow();
                let nc = S::from_f64(c as f64);
                let mut gx = vec![S::zero(); r * c];
                let mut gg = vec![S::zero(); c];
                let mut gb = vec![S::zero(); c];
                for i in 0..r {
                    let row = &x[i * c..(i + 1) * c];
                    let grow = &grad[i * c..(i + 1) * c];
                    let mean = row.iter().fold(S::zero(), |a, &v| a + v) / nc;
                    let var = row
                        .iter()
                        .fold(S::zero(), |a, &v| a + (v - mean) * (v - mean))
                        / nc;
                    let inv = (var + *eps).sqrt().recip();
                    // dy/dgamma, dy/dbeta
                    for j in 0..c {
                        let xhat = (row[j] - mean) * inv;
                        gg[j] = gg[j] + grow[j] * xhat;
                        gb[j] = gb[j] + grow[j];
                    }
                    // dx: (h - mean(h) - xhat * mean(h * xhat)) * inv, h = g*grow
                    let mut h_mean = S::zero();
                    let mut hx_mean = S::zero();
                    for j in 0..c {
                        let h = g[j] * grow[j];
                        let xhat = (row[j] - mean) * inv;
                        h_mean = h_mean + h;
                        hx_mean = hx_mean + h * xhat;
                    }
                    h_mean = h_mean / nc;
                    hx_mean = hx_mean / nc;
                    for j in 0..c {
                        let h = g[j] * grow[j];
                        let xhat = (row[j] - mean) * inv;
                        gx[i * c + j] = (h - h_mean - xhat * hx_mean) * inv;
                    }
                }
                drop(x);
                drop(g);
                if parents[0].0.requires_grad {
                    parents[0].accumulate_grad(&gx);
                }
                if parents[1].0.requires_grad {
                    parents[1].accumulate_grad(&gg);
                }
                if parents[2].0.requires_grad {
                    parents[2].accumulate_grad(&gb);
                }
            }
        }
    }
}

fn drop_and_acc<S: Scalar>(t: &Tensor<S>, g: Vec<S>) {
    t.accumulate_grad(&g);
}

fn matmul_raw<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut c = vec![S::zero(); m * n];
    for i in 0..m {
        for kk in 0..k {
            let aik = a[i * k + kk];
            if aik == S::zero() {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] = crow[j] + aik * brow[j];
            }
        }
    }
    c
}

fn softmax_row<S: Scalar>(row: &[S], out: &mut [S]) {
    let max = row.iter().cloned().fold(S::neg_infinity(), S::max);
    let mut sum = S::zero();
    for (o, &x) in out.iter_mut().zip(row.iter()) {
        *o = (x - max).exp();
        sum = sum + *o;
    }
    for o in out.iter_mut() {
        *o = *o / sum;
    }
}

fn log_softmax_row<S: Scalar>(row: &[S], out: &mut [S]) {
    let max = row.iter().cloned().fold(S::neg_infinity(), S::max);
    let mut sum = S::zero();
    for &x in row {
        sum = sum + (x - max).exp();
    }
    let lse = max + sum.ln();
    for (o, &x) in out.iter_mut().zip(row.iter()) {
        *o = x - lse;
    }
}

fn gelu_val<S: Scalar>(x: S) -> S {
    let c = S::from_f64(SQRT_2_OVER_PI);
    let k = S::from_f64(GELU_COEF);
    let half = S::from_f64(0.5);
    let inner = c * (x + k * x * x * x);
    half * x * (S::one() + inner.tanh())
}

fn gelu_grad<S: Scalar>(x: S) -> S {
    let c = S::from_f64(SQRT_2_OVER_PI);
    let k = S::from_f64(GELU_COEF);
    let half = S::from_f64(0.5);
    let three = S::from_f64(3.0);
    let inner = c * (x + k * x * x * x);
    let t = inner.tanh();
    let sech2 = S::one() - t * t;
    half * (S::one() + t) + half * x * sech2 * c * (S::one() + three * k * x * x)
}

/// Central-difference gradient of `f` with respect to every coordinate of
/// `x`. The independent oracle used by the gradient acceptance checks; it
/// never touches the tape.
pub fn finite_diff_grad<S: Scalar>(
    mut f: impl FnMut(&Tensor<S>) -> S,
    x: &Tensor<S>,
    h: S,
) -> Vec<S> {
    assert!(h > S::zero(), "step size must be positive");
    let original = x.to_vec();
    let mut grad = vec![S::zero(); original.len()];
    let two = S::from_f64(2.0);
    for i in 0..original.len() {
        let mut plus = original.clone();
        plus[i] = plus[i] + h;
        x.set_data(&plus);
        let fp = f(x);
        let mut minus = original.clone();
        minus[i] = minus[i] - h;
        x.set_data(&minus);
        let fm = f(x);
        grad[i] = (fp - fm) / (two * h);
    }
    x.set_data(&original);
    grad
}

/// ||a - b||_2 / ||b||_2 with a floor on the denominator.
pub fn relative_l2_error<S: Scalar>(a: &[S], b: &[S]) -> f64 {
    assert_eq!(a.len(), b.len());
    let mut num = 0.0f64;
    let mut den = 0.0f64;
    for (&x, &y) in a.iter().zip(b.iter()) {
        let d = x.to_f64_lossy() - y.to_f64_lossy();
        num += d * d;
        den += y.to_f64_lossy() * y.to_f64_lossy();
    }
    (num.sqrt()) / den.sqrt().max(1e-12)
}
