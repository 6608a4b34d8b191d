//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records every primitive application in creation order, so
//! node ids are a topological order. Vector-Jacobian rules are written
//! with the same primitives, which makes gradients ordinary tape nodes:
//! with `higher_order = true` they can be differentiated again.
//!
//! Tensors have rank 0, 1 or 2. Elementwise ops require equal shapes;
//! there is no implicit broadcasting.

use std::cell::RefCell;
use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;

use rand::Rng;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AutodiffError {
    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("expected a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("{op}: index {index} out of range for {bound}")]
    IndexOutOfRange { op: &'static str, index: usize, bound: usize },
    #[error("data length {got} does not match shape {shape:?}")]
    BadData { shape: Vec<usize>, got: usize },
    #[error("finite-difference epsilon must be positive and finite, got {0}")]
    InvalidEpsilon(f64),
}

type Result<T> = std::result::Result<T, AutodiffError>;

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}{:?}", self.shape, self.data)
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.len() > 2 || shape.iter().product::<usize>() != data.len() {
            return Err(AutodiffError::BadData { shape, got: data.len() });
        }
        Ok(Tensor { shape, data })
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn filled(shape: &[usize], v: f64) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![v; shape.iter().product()],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor::filled(shape, 0.0)
    }

    /// Entries drawn uniformly from `[-scale, scale)`.
    pub fn uniform<R: Rng>(shape: &[usize], scale: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(|_| rng.gen_range(-scale..scale)).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on shape {:?}", self.shape);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn rows(&self) -> usize {
        self.shape[0]
    }

    fn cols(&self) -> usize {
        self.shape[1]
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn zip(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    /// `self - c * other`, the plain SGD update.
    pub fn sub_scaled(&self, other: &Tensor, c: f64) -> Result<Tensor> {
        same_shape("sub_scaled", self, other)?;
        Ok(self.zip(other, |a, b| a - c * b))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("add", self, other)?;
        Ok(self.zip(other, |a, b| a + b))
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape != b.shape {
        return Err(AutodiffError::ShapeMismatch {
            op,
            left: a.shape.clone(),
            right: b.shape.clone(),
        });
    }
    Ok(())
}

fn require_rank(op: &'static str, t: &Tensor, rank: usize) -> Result<()> {
    if t.shape.len() != rank {
        return Err(AutodiffError::ShapeMismatch {
            op,
            left: t.shape.clone(),
            right: vec![0; rank],
        });
    }
    Ok(())
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    MatMul(usize, usize),
    Transpose(usize),
    Sum(usize),
    Broadcast(usize),
    Exp(usize),
    LogSoftmax(usize),
    Gather(usize, Rc<[usize]>),
    Scatter(usize, Rc<[usize]>),
    Lookup(usize, Rc<[usize]>),
    IndexAdd(usize, Rc<[usize]>),
    Reshape(usize),
    SliceRows(usize, usize),
    PadRows(usize, usize),
}

impl Op {
    fn parents(&self) -> [Option<usize>; 2] {
        use Op::*;
        match *self {
            Leaf => [None, None],
            Add(a, b) | Sub(a, b) | Mul(a, b) | MatMul(a, b) => [Some(a), Some(b)],
            Scale(a, _) | Transpose(a) | Sum(a) | Broadcast(a) | Exp(a) | LogSoftmax(a) | Reshape(a) => [Some(a), None],
            Gather(a, _) | Scatter(a, _) | Lookup(a, _) | IndexAdd(a, _) => [Some(a), None],
            SliceRows(a, _) | PadRows(a, _) => [Some(a), None],
        }
    }
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of primitive applications. Not shared across
/// threads; build one tape per task.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a tape node.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.value().shape)
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// A leaf that gradients can be taken with respect to.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    fn value(&self, id: usize) -> Rc<Tensor> {
        self.nodes.borrow()[id].value.clone()
    }

    /// Gradients of the scalar `loss` with respect to each of `wrt`.
    ///
    /// With `higher_order` the returned gradients are differentiable
    /// expressions of the inputs; otherwise they are constants.
    pub fn grad<'t>(&'t self, loss: Var<'t>, wrt: &[Var<'t>], higher_order: bool) -> Result<Vec<Var<'t>>> {
        let loss_value = loss.value();
        if loss_value.len() != 1 || !loss_value.shape.is_empty() {
            return Err(AutodiffError::NotScalar(loss_value.shape.clone()));
        }
        let end = loss.id + 1;
        let mut needs = vec![false; end];
        for w in wrt {
            if w.id < end {
                needs[w.id] = true;
            }
        }
        {
            let nodes = self.nodes.borrow();
            for i in 0..end {
                if !needs[i] && nodes[i].requires_grad {
                    needs[i] = nodes[i].op.parents().iter().flatten().any(|&p| needs[p]);
                }
            }
        }

        let mut frozen: HashMap<usize, Var<'t>> = HashMap::new();
        let mut adjoint: Vec<Option<Var<'t>>> = vec![None; end];
        adjoint[loss.id] = Some(self.constant(Tensor::scalar(1.0)));
        for i in (0..end).rev() {
            let Some(g) = adjoint[i] else { continue };
            if !needs[i] {
                continue;
            }
            let op = self.nodes.borrow()[i].op.clone();
            if matches!(op, Op::Leaf) {
                continue;
            }
            let mut val = |id: usize| -> Var<'t> {
                if higher_order {
                    Var { tape: self, id }
                } else {
                    *frozen
                        .entry(id)
                        .or_insert_with(|| self.push((*self.value(id)).clone(), Op::Leaf, false))
                }
            };
            for (p, contrib) in self.vjp(i, &op, g, &mut val)? {
                if needs[p] {
                    adjoint[p] = Some(match adjoint[p] {
                        Some(acc) => acc.add(contrib)?,
                        None => contrib,
                    });
                }
            }
        }
        wrt.iter()
            .map(|w| match adjoint.get(w.id).copied().flatten() {
                Some(g) => Ok(g),
                None => Ok(self.constant(Tensor::zeros(&w.value().shape))),
            })
            .collect()
    }

    fn vjp<'t>(
        &'t self,
        id: usize,
        op: &Op,
        g: Var<'t>,
        val: &mut dyn FnMut(usize) -> Var<'t>,
    ) -> Result<Vec<(usize, Var<'t>)>> {
        let shape_of = |i: usize| self.value(i).shape.clone();
        Ok(match op {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![(*a, g), (*b, g)],
            Op::Sub(a, b) => vec![(*a, g), (*b, g.scale(-1.0))],
            Op::Mul(a, b) => vec![(*a, g.mul(val(*b))?), (*b, g.mul(val(*a))?)],
            Op::Scale(a, c) => vec![(*a, g.scale(*c))],
            Op::MatMul(a, b) => vec![
                (*a, g.matmul(val(*b).transpose()?)?),
                (*b, val(*a).transpose()?.matmul(g)?),
            ],
            Op::Transpose(a) => vec![(*a, g.transpose()?)],
            Op::Sum(a) => vec![(*a, g.broadcast(&shape_of(*a))?)],
            Op::Broadcast(a) => vec![(*a, g.sum())],
            Op::Exp(a) => vec![(*a, g.mul(val(id))?)],
            Op::LogSoftmax(a) => {
                let shape = shape_of(*a);
                let (r, c) = (shape[0], shape[1]);
                let row_sums = g.matmul(self.constant(Tensor::filled(&[c, 1], 1.0)))?;
                let spread = row_sums.matmul(self.constant(Tensor::filled(&[1, c], 1.0)))?;
                debug_assert_eq!(spread.value().shape, vec![r, c]);
                vec![(*a, g.sub(val(id).exp().mul(spread)?)?)]
            }
            Op::Gather(a, idx) => vec![(*a, g.scatter(idx.clone(), shape_of(*a)[1])?)],
            Op::Scatter(a, idx) => vec![(*a, g.gather_rc(idx.clone())?)],
            Op::Lookup(a, ids) => vec![(*a, g.index_add(ids.clone(), shape_of(*a)[0])?)],
            Op::IndexAdd(a, ids) => vec![(*a, g.lookup_rc(ids.clone())?)],
            Op::Reshape(a) => vec![(*a, g.reshape(&shape_of(*a))?)],
            Op::SliceRows(a, start) => vec![(*a, g.pad_rows(*start, shape_of(*a)[0])?)],
            Op::PadRows(a, start) => vec![(*a, g.slice_rows(*start, shape_of(*a)[0])?)],
        })
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape.clone()
    }

    /// Scalar value; panics on non-scalars.
    pub fn item(&self) -> f64 {
        self.value().item()
    }

    fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    fn unary(&self, value: Tensor, op: Op) -> Var<'t> {
        self.tape.push(value, op, self.requires_grad())
    }

    fn binary(&self, other: Var<'t>, value: Tensor, op: Op) -> Var<'t> {
        let rg = self.requires_grad() || other.requires_grad();
        self.tape.push(value, op, rg)
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Var<'t> {
        self.tape.constant((*self.value()).clone())
    }

    pub fn add(&self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        same_shape("add", &a, &b)?;
        Ok(self.binary(other, a.zip(&b, |x, y| x + y), Op::Add(self.id, other.id)))
    }

    pub fn sub(&self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        same_shape("sub", &a, &b)?;
        Ok(self.binary(other, a.zip(&b, |x, y| x - y), Op::Sub(self.id, other.id)))
    }

    pub fn mul(&self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        same_shape("mul", &a, &b)?;
        Ok(self.binary(other, a.zip(&b, |x, y| x * y), Op::Mul(self.id, other.id)))
    }

    pub fn scale(&self, c: f64) -> Var<'t> {
        self.unary(self.value().map(|x| x * c), Op::Scale(self.id, c))
    }

    pub fn matmul(&self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        if a.shape.len() != 2 || b.shape.len() != 2 || a.cols() != b.rows() {
            return Err(AutodiffError::ShapeMismatch {
                op: "matmul",
                left: a.shape.clone(),
                right: b.shape.clone(),
            });
        }
        let (m, k, n) = (a.rows(), a.cols(), b.cols());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let x = a.data[i * k + p];
                if x == 0.0 {
                    continue;
                }
                for (o, &y) in row.iter_mut().zip(&b.data[p * n..(p + 1) * n]) {
                    *o += x * y;
                }
            }
        }
        let value = Tensor {
            shape: vec![m, n],
            data: out,
        };
        Ok(self.binary(other, value, Op::MatMul(self.id, other.id)))
    }

    pub fn transpose(&self) -> Result<Var<'t>> {
        let a = self.value();
        require_rank("transpose", &a, 2)?;
        let (r, c) = (a.rows(), a.cols());
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = a.data[i * c + j];
            }
        }
        let value = Tensor {
            shape: vec![c, r],
            data,
        };
        Ok(self.unary(value, Op::Transpose(self.id)))
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&self) -> Var<'t> {
        let s = self.value().data.iter().sum();
        self.unary(Tensor::scalar(s), Op::Sum(self.id))
    }

    pub fn mean(&self) -> Var<'t> {
        let n = self.value().len().max(1);
        self.sum().scale(1.0 / n as f64)
    }

    /// Scalar repeated into `shape`.
    pub fn broadcast(&self, shape: &[usize]) -> Result<Var<'t>> {
        let a = self.value();
        if !a.shape.is_empty() {
            return Err(AutodiffError::NotScalar(a.shape.clone()));
        }
        Ok(self.unary(Tensor::filled(shape, a.data[0]), Op::Broadcast(self.id)))
    }

    pub fn exp(&self) -> Var<'t> {
        self.unary(self.value().map(f64::exp), Op::Exp(self.id))
    }

    /// Row-wise log-softmax of a matrix.
    pub fn log_softmax(&self) -> Result<Var<'t>> {
        let a = self.value();
        require_rank("log_softmax", &a, 2)?;
        let c = a.cols();
        let mut data = a.data.clone();
        for row in data.chunks_mut(c.max(1)) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|x| *x -= lse);
        }
        let value = Tensor {
            shape: a.shape.clone(),
            data,
        };
        Ok(self.unary(value, Op::LogSoftmax(self.id)))
    }

    /// `out[t] = self[t, idx[t]]` for a matrix.
    pub fn gather(&self, idx: &[usize]) -> Result<Var<'t>> {
        self.gather_rc(idx.into())
    }

    fn gather_rc(&self, idx: Rc<[usize]>) -> Result<Var<'t>> {
        let a = self.value();
        require_rank("gather", &a, 2)?;
        if idx.len() != a.rows() {
            return Err(AutodiffError::ShapeMismatch {
                op: "gather",
                left: a.shape.clone(),
                right: vec![idx.len()],
            });
        }
        let c = a.cols();
        let mut data = Vec::with_capacity(idx.len());
        for (t, &j) in idx.iter().enumerate() {
            if j >= c {
                return Err(AutodiffError::IndexOutOfRange {
                    op: "gather",
                    index: j,
                    bound: c,
                });
            }
            data.push(a.data[t * c + j]);
        }
        Ok(self.unary(Tensor::vector(data), Op::Gather(self.id, idx)))
    }

    /// Inverse layout of `gather`: a `len × cols` matrix with
    /// `out[t, idx[t]] = self[t]` and zeros elsewhere.
    pub fn scatter(&self, idx: Rc<[usize]>, cols: usize) -> Result<Var<'t>> {
        let a = self.value();
        require_rank("scatter", &a, 1)?;
        if idx.len() != a.len() {
            return Err(AutodiffError::ShapeMismatch {
                op: "scatter",
                left: a.shape.clone(),
                right: vec![idx.len()],
            });
        }
        let mut data = vec![0.0; idx.len() * cols];
        for (t, &j) in idx.iter().enumerate() {
            if j >= cols {
                return Err(AutodiffError::IndexOutOfRange {
                    op: "scatter",
                    index: j,
                    bound: cols,
                });
            }
            data[t * cols + j] = a.data[t];
        }
        let value = Tensor {
            shape: vec![idx.len(), cols],
            data,
        };
        Ok(self.unary(value, Op::Scatter(self.id, idx)))
    }

    /// Rows `ids` of an embedding table, as a `len × d` matrix.
    pub fn embedding_lookup(&self, ids: &[usize]) -> Result<Var<'t>> {
        self.lookup_rc(ids.into())
    }

    fn lookup_rc(&self, ids: Rc<[usize]>) -> Result<Var<'t>> {
        let a = self.value();
        require_rank("embedding_lookup", &a, 2)?;
        let (r, d) = (a.rows(), a.cols());
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids.iter() {
            if i >= r {
                return Err(AutodiffError::IndexOutOfRange {
                    op: "embedding_lookup",
                    index: i,
                    bound: r,
                });
            }
            data.extend_from_slice(&a.data[i * d..(i + 1) * d]);
        }
        let value = Tensor {
            shape: vec![ids.len(), d],
            data,
        };
        Ok(self.unary(value, Op::Lookup(self.id, ids)))
    }

    /// Adds row `t` of `self` into row `ids[t]` of a zero `rows × d` matrix.
    pub fn index_add(&self, ids: Rc<[usize]>, rows: usize) -> Result<Var<'t>> {
        let a = self.value();
        require_rank("index_add", &a, 2)?;
        if ids.len() != a.rows() {
            return Err(AutodiffError::ShapeMismatch {
                op: "index_add",
                left: a.shape.clone(),
                right: vec![ids.len()],
            });
        }
        let d = a.cols();
        let mut data = vec![0.0; rows * d];
        for (t, &i) in ids.iter().enumerate() {
            if i >= rows {
                return Err(AutodiffError::IndexOutOfRange {
                    op: "index_add",
                    index: i,
                    bound: rows,
                });
            }
            for (o, &x) in data[i * d..(i + 1) * d].iter_mut().zip(&a.data[t * d..(t + 1) * d]) {
                *o += x;
            }
        }
        let value = Tensor {
            shape: vec![rows, d],
            data,
        };
        Ok(self.unary(value, Op::IndexAdd(self.id, ids)))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let a = self.value();
        let value = Tensor::new(shape.to_vec(), a.data.clone()).map_err(|_| AutodiffError::ShapeMismatch {
            op: "reshape",
            left: a.shape.clone(),
            right: shape.to_vec(),
        })?;
        Ok(self.unary(value, Op::Reshape(self.id)))
    }

    /// Rows `start..start + len` of a matrix.
    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Var<'t>> {
        let a = self.value();
        require_rank("slice_rows", &a, 2)?;
        if start + len > a.rows() {
            return Err(AutodiffError::IndexOutOfRange {
                op: "slice_rows",
                index: start + len,
                bound: a.rows(),
            });
        }
        let d = a.cols();
        let value = Tensor {
            shape: vec![len, d],
            data: a.data[start * d..(start + len) * d].to_vec(),
        };
        Ok(self.unary(value, Op::SliceRows(self.id, start)))
    }

    /// Embeds a matrix at row `start` of a zero matrix with `rows` rows.
    pub fn pad_rows(&self, start: usize, rows: usize) -> Result<Var<'t>> {
        let a = self.value();
        require_rank("pad_rows", &a, 2)?;
        if start + a.rows() > rows {
            return Err(AutodiffError::IndexOutOfRange {
                op: "pad_rows",
                index: start + a.rows(),
                bound: rows,
            });
        }
        let d = a.cols();
        let mut data = vec![0.0; rows * d];
        data[start * d..(start + a.rows()) * d].copy_from_slice(&a.data);
        let value = Tensor {
            shape: vec![rows, d],
            data,
        };
        Ok(self.unary(value, Op::PadRows(self.id, start)))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax.
    pub fn cross_entropy(&self, targets: &[usize]) -> Result<Var<'t>> {
        let picked = self.log_softmax()?.gather(targets)?;
        Ok(picked.mean().scale(-1.0))
    }
}

/// Named parameter tensors in a fixed order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    entries: Vec<(String, Tensor)>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    /// Inserts or replaces `name`, keeping the original position.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        let name = name.into();
        match self.entries.iter_mut().find(|(n, _)| *n == name) {
            Some(slot) => slot.1 = value,
            None => self.entries.push((name, value)),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|(n, _)| n == name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.entries.iter().map(|(_, t)| t)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors().map(Tensor::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().all(Tensor::is_finite)
    }

    /// Records every tensor as a parameter leaf, in store order.
    pub fn load<'t>(&self, tape: &'t Tape) -> Vec<Var<'t>> {
        self.tensors().map(|t| tape.param(t.clone())).collect()
    }

    /// Same names as `self`, values taken from `vars`.
    pub fn with_values<'t>(&self, vars: &[Var<'t>]) -> ParamStore {
        ParamStore {
            entries: self
                .entries
                .iter()
                .zip(vars)
                .map(|((n, _), v)| (n.clone(), (*v.value()).clone()))
                .collect(),
        }
    }

    /// Same names as `self`, with the given tensors.
    pub fn with_tensors(&self, tensors: Vec<Tensor>) -> ParamStore {
        ParamStore {
            entries: self.entries.iter().map(|(n, _)| n.clone()).zip(tensors).collect(),
        }
    }

    pub fn zeros_like(&self) -> ParamStore {
        self.with_tensors(self.tensors().map(|t| Tensor::zeros(&t.shape)).collect())
    }

    /// `self += c * other`, entry by entry.
    pub fn add_scaled(&mut self, other: &ParamStore, c: f64) -> Result<()> {
        for ((_, a), (_, b)) in self.entries.iter_mut().zip(&other.entries) {
            same_shape("add_scaled", a, b)?;
            for (x, y) in a.data.iter_mut().zip(&b.data) {
                *x += c * y;
            }
        }
        Ok(())
    }

    pub fn max_abs_diff(&self, other: &ParamStore) -> f64 {
        self.tensors()
            .zip(other.tensors())
            .map(|(a, b)| a.max_abs_diff(b))
            .fold(0.0, f64::max)
    }
}

/// Largest relative error between the tape gradient of `f` and central
/// finite differences, over every parameter coordinate. The error of a
/// coordinate is `|analytic - numeric| / max(1, |analytic|)`.
pub fn finite_diff_check<E, F>(f: F, params: &ParamStore, eps: f64) -> std::result::Result<f64, E>
where
    E: From<AutodiffError>,
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> std::result::Result<Var<'t>, E>,
{
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(AutodiffError::InvalidEpsilon(eps).into());
    }
    let analytic: Vec<Tensor> = {
        let tape = Tape::new();
        let vars = params.load(&tape);
        let loss = f(&tape, &vars)?;
        let grads = tape.grad(loss, &vars, false)?;
        grads.iter().map(|g| (*g.value()).clone()).collect()
    };
    let eval = |p: &ParamStore| -> std::result::Result<f64, E> {
        let tape = Tape::new();
        let vars = p.load(&tape);
        let loss = f(&tape, &vars)?;
        let v = loss.value();
        if v.len() != 1 {
            return Err(AutodiffError::NotScalar(v.shape.clone()).into());
        }
        Ok(v.data[0])
    };
    let mut worst = 0.0f64;
    let mut probe = params.clone();
    for (k, grad) in analytic.iter().enumerate() {
        for c in 0..grad.len() {
            let original = probe.entries[k].1.data[c];
            probe.entries[k].1.data[c] = original + eps;
            let plus = eval(&probe)?;
            probe.entries[k].1.data[c] = original - eps;
            let minus = eval(&probe)?;
            probe.entries[k].1.data[c] = original;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = grad.data[c];
            worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
        }
    }
    Ok(worst)
}

/// Result of one finite-difference check.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub name: String,
    pub max_rel_error: f64,
}

/// Finite-difference checks of every primitive's gradient rule. Each
/// primitive output is reduced to a scalar through a fixed random
/// weighting so that every output coordinate contributes.
pub fn check_primitives(eps: f64, seed: u64) -> Result<Vec<GradCheck>> {
    let mut rng = crate::seeded_rng(seed);
    let mut store = ParamStore::new();
    store.insert("a", Tensor::uniform(&[3, 4], 1.0, &mut rng));
    store.insert("b", Tensor::uniform(&[3, 4], 1.0, &mut rng));
    store.insert("m", Tensor::uniform(&[4, 2], 1.0, &mut rng));
    store.insert("v", Tensor::uniform(&[5], 1.0, &mut rng));
    store.insert("s", Tensor::uniform(&[], 1.0, &mut rng));
    let mut weights = HashMap::new();
    for shape in [vec![3, 4], vec![3, 2], vec![4, 3], vec![3], vec![5, 4], vec![4, 4], vec![6, 4], vec![12], vec![5]] {
        weights.insert(shape.clone(), Tensor::uniform(&shape, 1.0, &mut rng));
    }
    let idx: Vec<usize> = vec![2, 0, 3];
    let ids: Vec<usize> = vec![1, 1, 0, 2, 1];

    type Check = for<'t> fn(&[Var<'t>], &[usize], &[usize]) -> Result<Var<'t>>;
    let cases: Vec<(&str, Check)> = vec![
        ("add", |p, _, _| p[0].add(p[1])),
        ("sub", |p, _, _| p[0].sub(p[1])),
        ("mul", |p, _, _| p[0].mul(p[1])),
        ("scale", |p, _, _| Ok(p[0].scale(-1.7))),
        ("matmul", |p, _, _| p[0].matmul(p[2])),
        ("transpose", |p, _, _| p[0].transpose()),
        ("sum", |p, _, _| p[0].sum().broadcast(&[3, 4])),
        ("mean", |p, _, _| p[0].mean().broadcast(&[3, 4])),
        ("broadcast", |p, _, _| p[4].broadcast(&[3, 4])),
        ("exp", |p, _, _| Ok(p[0].exp())),
        ("log_softmax", |p, _, _| p[0].log_softmax()),
        ("gather", |p, idx, _| p[0].gather(idx)),
        ("scatter", |p, idx, _| p[3].slice_rows_of_vector(3)?.scatter(idx.into(), 4)),
        ("embedding_lookup", |p, _, ids| p[1].embedding_lookup(ids)),
        ("index_add", |p, _, ids| p[3].reshape(&[5, 1])?.matmul(p[2].transpose()?.slice_rows(0, 1)?)?.index_add(ids.into(), 3)?.matmul(p[2])),
        ("reshape", |p, _, _| p[0].reshape(&[12])),
        ("slice_rows", |p, _, _| p[0].slice_rows(1, 2)?.transpose()?.matmul(p[1].slice_rows(0, 2)?)),
        ("pad_rows", |p, _, _| p[0].pad_rows(2, 6)),
        ("cross_entropy", |p, idx, _| p[0].cross_entropy(idx)?.broadcast(&[3])),
    ];

    let mut out = Vec::with_capacity(cases.len());
    for (name, case) in cases {
        let err = finite_diff_check(
            |_tape, p| {
                let y = case(p, &idx, &ids)?;
                // Squaring adds curvature; the random weighting mixes all
                // output coordinates into the scalar.
                let y = y.mul(y)?;
                let w = y.tape().constant(weights[&y.shape()].clone());
                Ok(y.mul(w)?.sum())
            },
            &store,
            eps,
        )?;
        out.push(GradCheck {
            name: name.to_string(),
            max_rel_error: err,
        });
    }
    Ok(out)
}

impl<'t> Var<'t> {
    /// First `n` entries of a vector (through a matrix view).
    fn slice_rows_of_vector(&self, n: usize) -> Result<Var<'t>> {
        let len = self.value().len();
        self.reshape(&[len, 1])?.slice_rows(0, n)?.reshape(&[n])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn tensor_shape_checked() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![1, 1, 1], vec![0.0]).is_err());
        assert_eq!(Tensor::zeros(&[2, 2]).len(), 4);
    }

    #[test]
    fn uniform_logits_give_ln_v() {
        let tape = Tape::new();
        let v = 7;
        let logits = tape.param(Tensor::zeros(&[3, v]));
        let loss = logits.cross_entropy(&[0, 4, 6]).unwrap();
        assert!(close(loss.item(), (v as f64).ln(), 1e-12));
    }

    #[test]
    fn matmul_shape() {
        let tape = Tape::new();
        let a = tape.param(Tensor::filled(&[2, 3], 1.0));
        let b = tape.param(Tensor::filled(&[3, 1], 2.0));
        let c = a.matmul(b).unwrap();
        assert_eq!(c.shape(), vec![2, 1]);
        assert_eq!(c.value().data(), &[6.0, 6.0]);
        match b.matmul(a) {
            Err(AutodiffError::ShapeMismatch { left, right, .. }) => {
                assert_eq!((left, right), (vec![3, 1], vec![2, 3]));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn cross_entropy_grad_is_softmax_minus_onehot() {
        let tape = Tape::new();
        let raw = vec![0.3, -1.2, 2.0, 0.5];
        let logits = tape.param(Tensor::matrix(1, 4, raw.clone()).unwrap());
        let loss = logits.cross_entropy(&[2]).unwrap();
        let g = tape.grad(loss, &[logits], false).unwrap()[0].value();
        let z: f64 = raw.iter().map(|x| x.exp()).sum();
        for (j, x) in raw.iter().enumerate() {
            let expected = x.exp() / z - if j == 2 { 1.0 } else { 0.0 };
            assert!(close(g.data()[j], expected, 1e-12));
        }
    }

    #[test]
    fn square_and_cube() {
        let tape = Tape::new();
        let x = tape.param(Tensor::scalar(3.0));
        let y = x.mul(x).unwrap();
        assert_eq!(tape.grad(y, &[x], false).unwrap()[0].item(), 6.0);

        let tape = Tape::new();
        let x = tape.param(Tensor::scalar(2.0));
        let y = x.mul(x).unwrap().mul(x).unwrap();
        let dy = tape.grad(y, &[x], true).unwrap()[0];
        assert_eq!(dy.item(), 12.0);
        let d2y = tape.grad(dy, &[x], true).unwrap()[0];
        assert_eq!(d2y.item(), 12.0);
        let d3y = tape.grad(d2y, &[x], false).unwrap()[0];
        assert_eq!(d3y.item(), 6.0);
    }

    #[test]
    fn first_order_grads_are_constants() {
        let tape = Tape::new();
        let x = tape.param(Tensor::scalar(2.0));
        let y = x.mul(x).unwrap().mul(x).unwrap();
        let dy = tape.grad(y, &[x], false).unwrap()[0];
        assert_eq!(tape.grad(dy, &[x], false).unwrap()[0].item(), 0.0);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let tape = Tape::new();
        let x = tape.param(Tensor::zeros(&[2]));
        assert!(matches!(tape.grad(x, &[x], false), Err(AutodiffError::NotScalar(_))));
    }

    #[test]
    fn unused_param_gets_zero_grad() {
        let tape = Tape::new();
        let x = tape.param(Tensor::scalar(1.0));
        let z = tape.param(Tensor::zeros(&[2, 2]));
        let g = tape.grad(x.scale(2.0), &[x, z], false).unwrap();
        assert_eq!(g[0].item(), 2.0);
        assert_eq!(*g[1].value(), Tensor::zeros(&[2, 2]));
    }

    #[test]
    fn epsilon_zero_rejected() {
        let store = ParamStore::new();
        let r: Result<f64> = finite_diff_check(|_, _| unreachable!(), &store, 0.0);
        assert_eq!(r, Err(AutodiffError::InvalidEpsilon(0.0)));
    }

    #[test]
    fn linear_function_checks_exactly() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::vector(vec![0.5, -2.0, 3.0]));
        let c = Tensor::vector(vec![1.0, 2.0, -0.5]);
        let err = finite_diff_check(
            |tape, p| -> Result<Var<'_>> { Ok(p[0].mul(tape.constant(c.clone()))?.sum()) },
            &store,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn every_primitive_passes_finite_differences() {
        for check in check_primitives(1e-5, 7).unwrap() {
            assert!(check.max_rel_error < 1e-6, "{check:?}");
        }
    }

    #[test]
    fn quadratic_maml_closed_form() {
        let (alpha, theta, a, b) = (0.1, [0.7, -1.3, 2.0], [0.2, 0.4, -1.0], [1.5, -0.5, 0.3]);
        let tape = Tape::new();
        let th = tape.param(Tensor::vector(theta.to_vec()));
        let av = tape.constant(Tensor::vector(a.to_vec()));
        let bv = tape.constant(Tensor::vector(b.to_vec()));
        let inner = th.sub(av).unwrap();
        let inner = inner.mul(inner).unwrap().sum();
        let g = tape.grad(inner, &[th], true).unwrap()[0];
        let th1 = th.sub(g.scale(alpha)).unwrap();
        let outer = th1.sub(bv).unwrap();
        let outer = outer.mul(outer).unwrap().sum();
        let meta = tape.grad(outer, &[th], false).unwrap()[0].value();
        for i in 0..3 {
            let t1 = theta[i] - alpha * 2.0 * (theta[i] - a[i]);
            let expected = (1.0 - 2.0 * alpha) * 2.0 * (t1 - b[i]);
            assert!(close(meta.data()[i], expected, 1e-12));
        }
    }

    #[test]
    fn replay_is_bit_identical() {
        let run = || {
            let tape = Tape::new();
            let mut rng = crate::seeded_rng(3);
            let w = tape.param(Tensor::uniform(&[4, 6], 1.0, &mut rng));
            let e = tape.param(Tensor::uniform(&[5, 4], 1.0, &mut rng));
            let h = e.embedding_lookup(&[0, 3, 3, 1]).unwrap().matmul(w).unwrap();
            let loss = h.cross_entropy(&[5, 0, 2, 1]).unwrap();
            let g = tape.grad(loss, &[w, e], true).unwrap();
            let gg = g[0].mul(g[0]).unwrap().sum();
            let second = tape.grad(gg, &[e], false).unwrap()[0].value();
            (loss.item().to_bits(), second.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
        };
        assert_eq!(run(), run());
    }
}
