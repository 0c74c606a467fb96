//! Dense row-major tensors.
//!
//! Shapes are kept fully general but in practice everything here is a
//! scalar (`[1]`), a vector, or a 2D matrix.

use crate::error::{Error, Result};
use crate::scalar::Real;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<F: Real> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Real> Tensor<F> {
    pub fn from_vec(shape: Vec<usize>, data: Vec<F>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::ShapeMismatch {
                op: "from_vec",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![F::zero(); n],
        }
    }

    pub fn full(shape: Vec<usize>, v: F) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![v; n],
        }
    }

    pub fn scalar(v: F) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<F>) -> Result<Self> {
        Self::from_vec(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Scalar payload; panics if the tensor is not a single element.
    pub fn item(&self) -> F {
        assert!(self.is_scalar(), "item() on non-scalar tensor");
        self.data[0]
    }

    /// Rows of a 2D tensor (vectors count as a single row).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[0],
            _ => 1,
        }
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[1],
            1 => self.shape[0],
            _ => 1,
        }
    }

    pub fn row(&self, i: usize) -> &[F] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn get2(&self, i: usize, j: usize) -> F {
        self.data[i * self.cols() + j]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn check_finite(&self, op: &'static str) -> Result<()> {
        if self.all_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite { op })
        }
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Tensor<F> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}
