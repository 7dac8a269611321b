//! Dense row-major f32 tensors.
//!
//! Everything in this crate is rank 1 or rank 2; internally a rank-1 tensor
//! of length `n` behaves as a `1 x n` matrix.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::DimMismatch {
                op: "Tensor::new",
                left: shape.clone(),
                right: vec![data.len()],
            });
        }
        if shape.is_empty() || shape.len() > 2 {
            return Err(Error::InvalidParameter(format!(
                "tensor rank must be 1 or 2, got shape {shape:?}"
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn vector(data: Vec<f32>) -> Self {
        let n = data.len();
        Tensor {
            shape: vec![n],
            data,
        }
    }

    pub fn scalar(v: f32) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            shape: vec![rows, cols],
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, v: f32) -> Self {
        Tensor {
            shape: vec![rows, cols],
            data: vec![v; rows * cols],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    /// (rows, cols) with rank-1 tensors viewed as a single row.
    pub fn dims(&self) -> (usize, usize) {
        match self.shape.len() {
            1 => (1, self.shape[0]),
            _ => (self.shape[0], self.shape[1]),
        }
    }

    pub fn rows(&self) -> usize {
        self.dims().0
    }

    pub fn cols(&self) -> usize {
        self.dims().1
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        let (_, c) = self.dims();
        self.data[row * c + col]
    }

    pub fn row(&self, row: usize) -> &[f32] {
        let (_, c) = self.dims();
        &self.data[row * c..(row + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Row-major identity matrix.
    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_product_must_match_data_len() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn rank_one_behaves_as_row() {
        let v = Tensor::vector(vec![1.0, 2.0, 3.0]);
        assert_eq!(v.dims(), (1, 3));
        assert_eq!(v.row(0), &[1.0, 2.0, 3.0]);
    }
}
