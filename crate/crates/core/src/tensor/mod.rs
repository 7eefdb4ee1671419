//! Dense f64 tensors and a define-by-run reverse-mode autodiff graph.
//!
//! The kernel is deliberately small: row-major storage, the handful of
//! operations a pre-norm transformer needs, and a tape that is rebuilt for
//! every forward pass. See [`Graph`] for the recording API and
//! [`grad_check`] for the finite-difference verifier used across the crate.

mod gradcheck;
mod graph;
pub(crate) mod kernels;

pub use gradcheck::{grad_check, grad_check_many, relative_error};
pub use graph::{Gradients, Graph, Var};

use crate::error::{Error, Result};

/// Row-major dense tensor of 64-bit floats.
///
/// A zero-dimensional shape (`[]`) denotes a scalar holding one value.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Dimension {
                op: "tensor",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    /// Builds a matrix from nested rows. Panics on ragged input.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            assert_eq!(row.len(), cols, "ragged rows");
            data.extend_from_slice(row);
        }
        Self {
            shape: vec![rows.len(), cols],
            data,
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn eye(n: usize) -> Self {
        Self::from_fn(&[n, n], |i| if i / n == i % n { 1.0 } else { 0.0 })
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Size of the trailing axis (1 for scalars).
    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// Number of rows when viewed as `[len / last_dim, last_dim]`.
    pub fn rows(&self) -> usize {
        let d = self.last_dim();
        if d == 0 {
            0
        } else {
            self.data.len() / d
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let d = self.last_dim();
        &self.data[i * d..(i + 1) * d]
    }

    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != self.data.len() {
            return Err(Error::Dimension {
                op: "reshape",
                lhs: self.shape,
                rhs: shape,
            });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Plain (untracked) matrix product.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.as_matrix("matmul")?;
        let (k2, n) = other.as_matrix("matmul")?;
        if k != k2 {
            return Err(Error::Dimension {
                op: "matmul",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul(&self.data, &other.data, m, k, n, &mut out);
        Ok(Tensor {
            shape: vec![m, n],
            data: out,
        })
    }

    pub(crate) fn as_matrix(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [m, n] => Ok((*m, *n)),
            _ => Err(Error::Dimension {
                op,
                lhs: self.shape.clone(),
                rhs: vec![],
            }),
        }
    }
}
