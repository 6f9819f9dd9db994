//! Dense row-major `f64` tensors and a tape-based reverse-mode engine.
//!
//! [`Tensor`] is a plain value type. Differentiable computation happens on a
//! [`Tape`]: leaves and constants are registered on it, every operation
//! appends a node, and [`Tape::backward`] walks the nodes in reverse to
//! produce [`Gradients`]. A tape is built fresh for every training step.
//!
//! There is no broadcasting beyond tensor-scalar (`scale`, `add_scalar`);
//! every binary operation requires identical shapes.

mod attention;
pub mod gradcheck;
mod tape;

pub use attention::cross_attention;
pub use tape::{sigmoid as sigmoid_value, Gradients, Tape, Var};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: expected rank {expected} tensor, got shape {got:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        got: Vec<usize>,
    },
    #[error("shape {shape:?} needs {expected} elements, got {got}")]
    Length {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("{op}: axis {axis} out of range for shape {shape:?}")]
    Axis {
        op: &'static str,
        axis: usize,
        shape: Vec<usize>,
    },
    #[error("{op}: non-finite input")]
    NonFinite { op: &'static str },
    #[error("backward root must be a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("variable belongs to a different tape")]
    ForeignVar,
    #[error("{op}: index {index} out of range ({bound})")]
    Index {
        op: &'static str,
        index: usize,
        bound: usize,
    },
}

pub type Result<T> = std::result::Result<T, TensorError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::Length {
                shape,
                expected,
                got: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    /// A rank-0 tensor holding one value.
    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Builds a matrix from equally long rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            if row.len() != cols {
                return Err(TensorError::Shape {
                    op: "from_rows",
                    lhs: vec![cols],
                    rhs: vec![row.len()],
                });
            }
            data.extend_from_slice(row);
        }
        Self::new(vec![rows.len(), cols], data)
    }

    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let n: usize = shape.iter().product();
        if std == 0.0 {
            return Self::zeros(shape);
        }
        let normal = Normal::new(0.0, std).expect("finite positive std");
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(|_| normal.sample(rng)).collect(),
        }
    }

    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(|_| lo + (hi - lo) * rng.random::<f64>()).collect(),
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

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert!(self.is_scalar(), "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            &[r, c] => Ok((r, c)),
            _ => Err(TensorError::Rank {
                op,
                expected: 2,
                got: self.shape.clone(),
            }),
        }
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    pub fn cols(&self) -> usize {
        self.shape.get(1).copied().unwrap_or(1)
    }

    /// Element `(i, j)` of a matrix.
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Self::new(shape.to_vec(), self.data.clone())
    }

    pub fn transpose(&self) -> Result<Self> {
        let (r, c) = self.dims2("transpose")?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Self::new(vec![c, r], out)
    }

    pub fn matmul(&self, rhs: &Tensor) -> Result<Self> {
        let (m, k) = self.dims2("matmul")?;
        let (k2, n) = rhs.dims2("matmul")?;
        if k != k2 {
            return Err(TensorError::Shape {
                op: "matmul",
                lhs: self.shape.clone(),
                rhs: rhs.shape.clone(),
            });
        }
        Ok(Self {
            shape: vec![m, n],
            data: matmul_raw(&self.data, &rhs.data, m, k, n),
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, rhs: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.check_same(rhs, op)?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&rhs.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, rhs: &Tensor) -> Result<Self> {
        self.zip_map(rhs, "add", |a, b| a + b)
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Self> {
        self.zip_map(rhs, "sub", |a, b| a - b)
    }

    pub fn mul(&self, rhs: &Tensor) -> Result<Self> {
        self.zip_map(rhs, "mul", |a, b| a * b)
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map(|v| v * s)
    }

    pub fn add_assign(&mut self, rhs: &Tensor) -> Result<()> {
        self.check_same(rhs, "add_assign")?;
        for (a, b) in self.data.iter_mut().zip(&rhs.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn sum_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    /// Frobenius (flattened L2) norm.
    pub fn norm(&self) -> f64 {
        self.sum_sq().sqrt()
    }

    pub fn max_abs_diff(&self, rhs: &Tensor) -> f64 {
        assert_eq!(self.shape, rhs.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&rhs.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Concatenates matrices with equal column counts along rows.
    pub fn concat_rows(parts: &[&Tensor]) -> Result<Self> {
        let cols = match parts.first() {
            Some(p) => p.dims2("concat_rows")?.1,
            None => return Self::new(vec![0, 0], Vec::new()),
        };
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            let (r, c) = p.dims2("concat_rows")?;
            if c != cols {
                return Err(TensorError::Shape {
                    op: "concat_rows",
                    lhs: parts[0].shape.clone(),
                    rhs: p.shape.clone(),
                });
            }
            rows += r;
            data.extend_from_slice(&p.data);
        }
        Self::new(vec![rows, cols], data)
    }

    fn check_same(&self, rhs: &Tensor, op: &'static str) -> Result<()> {
        if self.shape != rhs.shape {
            return Err(TensorError::Shape {
                op,
                lhs: self.shape.clone(),
                rhs: rhs.shape.clone(),
            });
        }
        Ok(())
    }
}

/// `a[m×k] · b[k×n]` with a fixed i-p-j accumulation order.
pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in row.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

/// Splits `shape` around `axis` into `(outer, len, inner)` strides.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Numerically stabilised softmax along `axis`.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    if axis >= x.shape.len() {
        return Err(TensorError::Axis {
            op: "softmax",
            axis,
            shape: x.shape.clone(),
        });
    }
    if !x.is_finite() {
        return Err(TensorError::NonFinite { op: "softmax" });
    }
    let (outer, len, inner) = axis_split(&x.shape, axis);
    let mut out = vec![0.0; x.data.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |k: usize| (o * len + k) * inner + i;
            let max = (0..len).map(|k| x.data[idx(k)]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for k in 0..len {
                let e = (x.data[idx(k)] - max).exp();
                out[idx(k)] = e;
                total += e;
            }
            for k in 0..len {
                out[idx(k)] /= total;
            }
        }
    }
    Tensor::new(x.shape.clone(), out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn length_is_checked() {
        assert!(matches!(
            Tensor::new(vec![2, 3], vec![0.0; 5]),
            Err(TensorError::Length { expected: 6, got: 5, .. })
        ));
    }

    #[test]
    fn identity_matmul() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(Tensor::eye(2).matmul(&a).unwrap(), a);
    }

    #[test]
    fn basis_selection_matmul() {
        let a = Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![2.0], vec![5.0]]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().data(), &[2.0]);
    }

    #[test]
    fn matmul_error_names_both_shapes() {
        let err = Tensor::zeros(&[2, 3]).matmul(&Tensor::zeros(&[2, 3])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("matmul"), "{msg}");
    }

    #[test]
    fn softmax_cases() {
        let s = softmax(&Tensor::new(vec![2], vec![0.0, 0.0]).unwrap(), 0).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = softmax(&Tensor::new(vec![2], vec![1000.0, 1000.0]).unwrap(), 0).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
        assert!(matches!(
            softmax(&Tensor::new(vec![2], vec![f64::NAN, 0.0]).unwrap(), 0),
            Err(TensorError::NonFinite { .. })
        ));
        assert!(matches!(
            softmax(&Tensor::zeros(&[2]), 1),
            Err(TensorError::Axis { .. })
        ));
    }

    #[test]
    fn softmax_matches_direct_formula() {
        // direct evaluation: e^k / (e + e^2 + e^3)
        let denom = 1f64.exp() + 2f64.exp() + 3f64.exp();
        let expect = [1f64.exp() / denom, 2f64.exp() / denom, 3f64.exp() / denom];
        let s = softmax(&Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap(), 0).unwrap();
        for (a, b) in s.data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_inner_axis() {
        let x = Tensor::from_rows(&[vec![1.0, 5.0], vec![2.0, -1.0], vec![0.5, 0.0]]).unwrap();
        let s = softmax(&x, 0).unwrap();
        for j in 0..2 {
            let col: f64 = (0..3).map(|i| s.at(i, j)).sum();
            assert!((col - 1.0).abs() < 1e-12);
        }
    }
}
