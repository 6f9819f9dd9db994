use std::cell::RefCell;
use std::sync::atomic::{AtomicU64, Ordering};

use super::{axis_split, matmul_raw, softmax, Result, Tensor, TensorError};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Constant,
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Abs(usize),
    Relu(usize),
    Sigmoid(usize),
    Sum(usize),
    L1Sum(usize),
    L2NormSq(usize),
    Mean(usize),
    Softmax(usize, usize),
    Reshape(usize),
    ConcatRows(Vec<usize>),
    SelectCols(usize, Vec<usize>),
    StraightThrough(usize),
    CrossEntropy(usize, Vec<usize>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of one forward pass.
///
/// Nodes are stored in creation order, so inputs always precede the nodes
/// that consume them and a reverse sweep visits every node once.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: RefCell<Vec<Node>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by one [`Tape::backward`] call.
#[derive(Debug)]
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the root with respect to `var`, if `var` influenced it.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        if var.tape != self.tape {
            return None;
        }
        self.grads.get(var.index).and_then(Option::as_ref)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn owns(&self, var: Var) -> bool {
        var.tape == self.id
    }

    /// Registers a trainable input.
    pub fn leaf(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Registers a non-trainable input.
    pub fn constant(&self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    pub fn value(&self, var: Var) -> Tensor {
        self.nodes.borrow()[var.index].value.clone()
    }

    pub fn shape(&self, var: Var) -> Vec<usize> {
        self.nodes.borrow()[var.index].value.shape().to_vec()
    }

    /// Value of a one-element node.
    pub fn scalar(&self, var: Var) -> f64 {
        self.nodes.borrow()[var.index].value.item()
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self.id,
            index: nodes.len() - 1,
        }
    }

    fn idx(&self, var: Var) -> Result<usize> {
        if var.tape != self.id {
            return Err(TensorError::ForeignVar);
        }
        Ok(var.index)
    }

    fn record(&self, op: Op, inputs: &[usize], value: Tensor) -> Var {
        let rg = {
            let nodes = self.nodes.borrow();
            inputs.iter().any(|&i| nodes[i].requires_grad)
        };
        self.push(value, op, rg)
    }

    fn unary(&self, x: Var, op: impl FnOnce(usize) -> Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let i = self.idx(x)?;
        let value = self.nodes.borrow()[i].value.map(f);
        Ok(self.record(op(i), &[i], value))
    }

    fn binary(
        &self,
        a: Var,
        b: Var,
        name: &'static str,
        op: impl FnOnce(usize, usize) -> Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        let (i, j) = (self.idx(a)?, self.idx(b)?);
        let value = {
            let nodes = self.nodes.borrow();
            nodes[i].value.zip_map(&nodes[j].value, name, f)?
        };
        Ok(self.record(op(i, j), &[i, j], value))
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (i, j) = (self.idx(a)?, self.idx(b)?);
        let value = {
            let nodes = self.nodes.borrow();
            nodes[i].value.matmul(&nodes[j].value)?
        };
        Ok(self.record(Op::MatMul(i, j), &[i, j], value))
    }

    pub fn transpose(&self, a: Var) -> Result<Var> {
        let i = self.idx(a)?;
        let value = self.nodes.borrow()[i].value.transpose()?;
        Ok(self.record(Op::Transpose(i), &[i], value))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", Op::Add, |x, y| x + y)
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", Op::Sub, |x, y| x - y)
    }

    /// Hadamard product.
    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", Op::Mul, |x, y| x * y)
    }

    pub fn scale(&self, a: Var, s: f64) -> Result<Var> {
        self.unary(a, |i| Op::Scale(i, s), |v| v * s)
    }

    pub fn add_scalar(&self, a: Var, s: f64) -> Result<Var> {
        self.unary(a, Op::AddScalar, |v| v + s)
    }

    /// Elementwise `|x|`; the subgradient at 0 is 0.
    pub fn abs(&self, a: Var) -> Result<Var> {
        self.unary(a, Op::Abs, f64::abs)
    }

    /// Elementwise `max(x, 0)`; the subgradient at 0 is 0.
    pub fn relu(&self, a: Var) -> Result<Var> {
        self.unary(a, Op::Relu, |v| if v > 0.0 { v } else { 0.0 })
    }

    pub fn sigmoid(&self, a: Var) -> Result<Var> {
        self.unary(a, Op::Sigmoid, sigmoid)
    }

    pub fn sum(&self, a: Var) -> Result<Var> {
        let i = self.idx(a)?;
        let v = self.nodes.borrow()[i].value.sum();
        Ok(self.record(Op::Sum(i), &[i], Tensor::scalar(v)))
    }

    /// `Σ|x|`.
    pub fn l1_sum(&self, a: Var) -> Result<Var> {
        let i = self.idx(a)?;
        let v = self.nodes.borrow()[i].value.data().iter().map(|x| x.abs()).sum();
        Ok(self.record(Op::L1Sum(i), &[i], Tensor::scalar(v)))
    }

    /// `Σx²`.
    pub fn l2_norm_sq(&self, a: Var) -> Result<Var> {
        let i = self.idx(a)?;
        let v = self.nodes.borrow()[i].value.sum_sq();
        Ok(self.record(Op::L2NormSq(i), &[i], Tensor::scalar(v)))
    }

    pub fn mean(&self, a: Var) -> Result<Var> {
        let i = self.idx(a)?;
        let v = {
            let nodes = self.nodes.borrow();
            let t = &nodes[i].value;
            t.sum() / t.numel() as f64
        };
        Ok(self.record(Op::Mean(i), &[i], Tensor::scalar(v)))
    }

    pub fn softmax(&self, a: Var, axis: usize) -> Result<Var> {
        let i = self.idx(a)?;
        let value = softmax(&self.nodes.borrow()[i].value, axis)?;
        Ok(self.record(Op::Softmax(i, axis), &[i], value))
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let i = self.idx(a)?;
        let value = self.nodes.borrow()[i].value.reshape(shape)?;
        Ok(self.record(Op::Reshape(i), &[i], value))
    }

    pub fn concat_rows(&self, parts: &[Var]) -> Result<Var> {
        let idx = parts.iter().map(|&p| self.idx(p)).collect::<Result<Vec<_>>>()?;
        let value = {
            let nodes = self.nodes.borrow();
            let refs: Vec<&Tensor> = idx.iter().map(|&i| &nodes[i].value).collect();
            Tensor::concat_rows(&refs)?
        };
        Ok(self.record(Op::ConcatRows(idx.clone()), &idx, value))
    }

    /// Gathers the listed columns of a matrix, in the given order.
    pub fn select_cols(&self, a: Var, cols: &[usize]) -> Result<Var> {
        let i = self.idx(a)?;
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[i].value;
            let (r, c) = t.dims2("select_cols")?;
            if let Some(&bad) = cols.iter().find(|&&j| j >= c) {
                return Err(TensorError::Index {
                    op: "select_cols",
                    index: bad,
                    bound: c,
                });
            }
            let mut out = Vec::with_capacity(r * cols.len());
            for row in 0..r {
                out.extend(cols.iter().map(|&j| t.data()[row * c + j]));
            }
            Tensor::new(vec![r, cols.len()], out)?
        };
        Ok(self.record(Op::SelectCols(i, cols.to_vec()), &[i], value))
    }

    /// Forward value `hard`, backward gradient routed unchanged to `soft`.
    pub fn straight_through(&self, soft: Var, hard: Tensor) -> Result<Var> {
        let i = self.idx(soft)?;
        {
            let nodes = self.nodes.borrow();
            if nodes[i].value.shape() != hard.shape() {
                return Err(TensorError::Shape {
                    op: "straight_through",
                    lhs: nodes[i].value.shape().to_vec(),
                    rhs: hard.shape().to_vec(),
                });
            }
        }
        Ok(self.record(Op::StraightThrough(i), &[i], hard))
    }

    /// Mean softmax cross-entropy of `logits[B×C]` against class indices.
    pub fn cross_entropy(&self, logits: Var, targets: &[usize]) -> Result<Var> {
        let i = self.idx(logits)?;
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[i].value;
            let (b, c) = t.dims2("cross_entropy")?;
            if targets.len() != b {
                return Err(TensorError::Shape {
                    op: "cross_entropy",
                    lhs: t.shape().to_vec(),
                    rhs: vec![targets.len()],
                });
            }
            if !t.is_finite() {
                return Err(TensorError::NonFinite { op: "cross_entropy" });
            }
            let mut total = 0.0;
            for (r, &y) in targets.iter().enumerate() {
                if y >= c {
                    return Err(TensorError::Index {
                        op: "cross_entropy",
                        index: y,
                        bound: c,
                    });
                }
                let row = t.row(r);
                total += log_sum_exp(row) - row[y];
            }
            Tensor::scalar(total / b as f64)
        };
        Ok(self.record(Op::CrossEntropy(i, targets.to_vec()), &[i], value))
    }

    /// Reverse sweep from a scalar `root`. Each call starts from zeroed
    /// gradients; nothing accumulates across calls.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let r = self.idx(root)?;
        let nodes = self.nodes.borrow();
        if !nodes[r].value.is_scalar() {
            return Err(TensorError::NotScalar(nodes[r].value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; r + 1];
        grads[r] = Some(Tensor::ones(nodes[r].value.shape()));

        for n in (0..=r).rev() {
            let Some(g) = grads[n].take() else { continue };
            let node = &nodes[n];
            if !node.requires_grad {
                continue;
            }
            let val = |k: usize| &nodes[k].value;
            let mut push = |k: usize, t: Tensor| accumulate(&nodes, &mut grads, k, t);
            match &node.op {
                Op::Leaf | Op::Constant => {
                    grads[n] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let (m, k) = val(*a).dims2("matmul")?;
                    let nn = val(*b).cols();
                    // dA = dC·Bᵀ, dB = Aᵀ·dC
                    let bt = val(*b).transpose()?;
                    push(*a, Tensor::new(vec![m, k], matmul_raw(g.data(), bt.data(), m, nn, k))?);
                    let at = val(*a).transpose()?;
                    push(*b, Tensor::new(vec![k, nn], matmul_raw(at.data(), g.data(), k, m, nn))?);
                }
                Op::Transpose(a) => push(*a, g.transpose()?),
                Op::Add(a, b) => {
                    push(*a, g.clone());
                    push(*b, g);
                }
                Op::Sub(a, b) => {
                    push(*a, g.clone());
                    push(*b, g.scale(-1.0));
                }
                Op::Mul(a, b) => {
                    push(*a, g.mul(val(*b))?);
                    push(*b, g.mul(val(*a))?);
                }
                Op::Scale(a, s) => push(*a, g.scale(*s)),
                Op::AddScalar(a) => push(*a, g),
                Op::Abs(a) => push(*a, g.zip_map(val(*a), "abs", |gv, x| gv * sign(x))?),
                Op::Relu(a) => {
                    push(*a, g.zip_map(val(*a), "relu", |gv, x| if x > 0.0 { gv } else { 0.0 })?)
                }
                Op::Sigmoid(a) => {
                    push(*a, g.zip_map(&node.value, "sigmoid", |gv, y| gv * y * (1.0 - y))?)
                }
                Op::Sum(a) => push(*a, Tensor::full(val(*a).shape(), g.item())),
                Op::L1Sum(a) => push(*a, val(*a).map(|x| g.item() * sign(x))),
                Op::L2NormSq(a) => push(*a, val(*a).scale(2.0 * g.item())),
                Op::Mean(a) => {
                    let t = val(*a);
                    push(*a, Tensor::full(t.shape(), g.item() / t.numel() as f64))
                }
                Op::Softmax(a, axis) => push(*a, softmax_backward(&node.value, &g, *axis)?),
                Op::Reshape(a) => push(*a, g.reshape(val(*a).shape())?),
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let len = val(p).numel();
                        let piece = Tensor::new(val(p).shape().to_vec(), g.data()[offset..offset + len].to_vec())?;
                        offset += len;
                        push(p, piece);
                    }
                }
                Op::SelectCols(a, cols) => {
                    let src = val(*a);
                    let c = src.cols();
                    let mut out = Tensor::zeros(src.shape());
                    for row in 0..src.rows() {
                        for (k, &j) in cols.iter().enumerate() {
                            out.data_mut()[row * c + j] += g.data()[row * cols.len() + k];
                        }
                    }
                    push(*a, out);
                }
                Op::StraightThrough(a) => push(*a, g),
                Op::CrossEntropy(a, targets) => {
                    let logits = val(*a);
                    let (b, c) = logits.dims2("cross_entropy")?;
                    let mut out = vec![0.0; b * c];
                    let scale = g.item() / b as f64;
                    for (r, &y) in targets.iter().enumerate() {
                        let row = logits.row(r);
                        let lse = log_sum_exp(row);
                        for j in 0..c {
                            let p = (row[j] - lse).exp();
                            out[r * c + j] = scale * (p - if j == y { 1.0 } else { 0.0 });
                        }
                    }
                    push(*a, Tensor::new(vec![b, c], out)?);
                }
            }
        }
        Ok(Gradients {
            tape: self.id,
            grads,
        })
    }
}

fn accumulate(nodes: &[Node], grads: &mut [Option<Tensor>], k: usize, t: Tensor) {
    if !nodes[k].requires_grad {
        return;
    }
    match &mut grads[k] {
        Some(existing) => existing
            .add_assign(&t)
            .expect("gradient shape matches node shape"),
        slot @ None => *slot = Some(t),
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn softmax_backward(y: &Tensor, g: &Tensor, axis: usize) -> Result<Tensor> {
    let (outer, len, inner) = axis_split(y.shape(), axis);
    let mut out = vec![0.0; y.numel()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |k: usize| (o * len + k) * inner + i;
            let dot: f64 = (0..len).map(|k| g.data()[idx(k)] * y.data()[idx(k)]).sum();
            for k in 0..len {
                out[idx(k)] = y.data()[idx(k)] * (g.data()[idx(k)] - dot);
            }
        }
    }
    Tensor::new(y.shape().to_vec(), out)
}
