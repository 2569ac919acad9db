//! Dense tensors with reverse-mode automatic differentiation.
//!
//! [`Tensor`] is plain row-major storage (shape + contiguous data). All
//! differentiable computation goes through a [`Tape`]: operations append
//! nodes, [`Tape::backward`] walks them in reverse and accumulates gradients
//! additively into every `requires_grad` leaf reachable from the loss.

mod conv;
mod gemm;
mod ops;
mod probops;
mod tape;

pub use conv::Padding;
pub use tape::{Op, Tape, TapeError, Var};

use crate::scalar::Scalar;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ShapeError {
    #[error("shape {shape:?} implies {expected} elements, data has {got}")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("{op}: dimension mismatch on axis {axis}: {lhs} vs {rhs}")]
    DimMismatch {
        op: &'static str,
        axis: usize,
        lhs: usize,
        rhs: usize,
    },
    #[error("{op}: expected rank {expected}, got shape {shape:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
}

/// Dense row-major n-dimensional array.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<E> {
    shape: Vec<usize>,
    data: Vec<E>,
}

impl<E: Scalar> Tensor<E> {
    pub fn new(shape: Vec<usize>, data: Vec<E>) -> Result<Self, ShapeError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(ShapeError::DataLength {
                shape,
                expected,
                got: data.len(),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![E::zero(); n],
        }
    }

    pub fn full(shape: Vec<usize>, value: E) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; n],
        }
    }

    pub fn scalar(value: E) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
        }
    }

    /// Rank-1 tensor from a vec.
    pub fn vector(data: Vec<E>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn from_f64(shape: Vec<usize>, data: &[f64]) -> Result<Self, ShapeError> {
        Self::new(shape, data.iter().map(|&x| E::from_f64(x)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [E] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<E> {
        self.data
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.iter().all(|&d| d == 1)
    }

    pub fn item(&self) -> E {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    /// Number of rows when viewed as a matrix `[rows, row_len]`.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            _ => self.shape[0],
        }
    }

    /// Row length when viewed as a matrix; rank-1 tensors are one row.
    pub fn row_len(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => self.shape[0],
            _ => self.shape[1..].iter().product(),
        }
    }

    pub fn row(&self, r: usize) -> &[E] {
        let w = self.row_len();
        &self.data[r * w..(r + 1) * w]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Stack rank-1 tensors of equal length into a `[n, d]` matrix.
    pub fn stack_rows(rows: &[&Tensor<E>]) -> Result<Self, ShapeError> {
        let d = rows.first().map(|t| t.numel()).unwrap_or(0);
        let mut data = Vec::with_capacity(rows.len() * d);
        for (i, r) in rows.iter().enumerate() {
            if r.numel() != d {
                return Err(ShapeError::DimMismatch {
                    op: "stack_rows",
                    axis: i,
                    lhs: d,
                    rhs: r.numel(),
                });
            }
            data.extend_from_slice(r.data());
        }
        Tensor::new(vec![rows.len(), d], data)
    }
}
