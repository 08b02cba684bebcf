//! Row-major dense matrix used by the evaluation and simulation code.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::autograd::kernels::gemm;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::contract(format!(
                "matrix {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.0 })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::contract("ragged rows"));
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
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

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn row_range(&self, range: Range<usize>) -> Matrix {
        Matrix {
            rows: range.len(),
            cols: self.cols,
            data: self.data[range.start * self.cols..range.end * self.cols].to_vec(),
        }
    }

    pub fn select_rows(&self, idx: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn select_cols(&self, idx: &[usize]) -> Matrix {
        Matrix::from_fn(self.rows, idx.len(), |i, j| self.get(i, idx[j]))
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    fn product(&self, a_t: bool, other: &Matrix, b_t: bool) -> Result<Matrix> {
        let (m, k) = if a_t { (self.cols, self.rows) } else { (self.rows, self.cols) };
        let (k2, n) = if b_t { (other.cols, other.rows) } else { (other.rows, other.cols) };
        if k != k2 {
            return Err(Error::contract(format!("inner dimensions differ: {k} vs {k2}")));
        }
        let mut out = Matrix::zeros(m, n);
        gemm(m, k, n, &self.data, a_t, &other.data, b_t, &mut out.data, 0.0);
        Ok(out)
    }

    /// `self * other`
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        self.product(false, other, false)
    }

    /// `self^T * other`
    pub fn t_matmul(&self, other: &Matrix) -> Result<Matrix> {
        self.product(true, other, false)
    }

    /// `self * other^T`
    pub fn matmul_t(&self, other: &Matrix) -> Result<Matrix> {
        self.product(false, other, true)
    }

    pub fn column_means(&self) -> Vec<f64> {
        let mut means = vec![0.0; self.cols];
        for i in 0..self.rows {
            for (m, v) in means.iter_mut().zip(self.row(i)) {
                *m += v;
            }
        }
        let n = self.rows.max(1) as f64;
        means.iter_mut().for_each(|m| *m /= n);
        means
    }

    /// Subtracts `offsets[j]` from column `j`.
    pub fn sub_row_vector(&mut self, offsets: &[f64]) {
        assert_eq!(offsets.len(), self.cols);
        for row in self.data.chunks_mut(self.cols.max(1)) {
            for (v, o) in row.iter_mut().zip(offsets) {
                *v -= o;
            }
        }
    }

    pub fn add_row_vector(&mut self, offsets: &[f64]) {
        assert_eq!(offsets.len(), self.cols);
        for row in self.data.chunks_mut(self.cols.max(1)) {
            for (v, o) in row.iter_mut().zip(offsets) {
                *v += o;
            }
        }
    }

    /// Centers and scales every column to zero mean and unit (population)
    /// variance. Constant columns are only centered.
    pub fn standardize_columns(&mut self) {
        let means = self.column_means();
        self.sub_row_vector(&means);
        let n = self.rows.max(1) as f64;
        for j in 0..self.cols {
            let ss: f64 = (0..self.rows).map(|i| self.get(i, j).powi(2)).sum();
            let sd = (ss / n).sqrt();
            if sd > 0.0 {
                for i in 0..self.rows {
                    self.data[i * self.cols + j] /= sd;
                }
            }
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn to_nalgebra(&self) -> nalgebra::DMatrix<f64> {
        nalgebra::DMatrix::from_row_slice(self.rows, self.cols, &self.data)
    }

    pub fn from_nalgebra(m: &nalgebra::DMatrix<f64>) -> Matrix {
        Matrix::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
    }

    /// Vertically stacks matrices with equal column counts.
    pub fn vstack(parts: &[Matrix]) -> Result<Matrix> {
        let cols = parts.first().map_or(0, |m| m.cols);
        if parts.iter().any(|m| m.cols != cols) {
            return Err(Error::contract("vstack: column counts differ"));
        }
        Ok(Matrix {
            rows: parts.iter().map(|m| m.rows).sum(),
            cols,
            data: parts.iter().flat_map(|m| m.data.iter().copied()).collect(),
        })
    }
}

/// Pearson r between columns `j` of `a` and `b`, with the flat-column
/// convention of returning 0.
pub fn column_pearson(a: &Matrix, b: &Matrix) -> Vec<f64> {
    assert_eq!((a.rows, a.cols), (b.rows, b.cols));
    (0..a.cols)
        .map(|j| crate::stats::pearson_r(&a.column(j), &b.column(j)).0)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn products_agree_with_transpose() {
        let a = Matrix::from_fn(3, 4, |i, j| (i * 4 + j) as f64 - 5.0);
        let b = Matrix::from_fn(3, 2, |i, j| (i + 2 * j) as f64);
        let direct = a.transpose().matmul(&b).unwrap();
        assert_eq!(a.t_matmul(&b).unwrap(), direct);
        let c = Matrix::from_fn(2, 4, |i, j| (i * j) as f64 + 1.0);
        assert_eq!(a.matmul_t(&c).unwrap(), a.matmul(&c.transpose()).unwrap());
        assert!(a.matmul(&b).is_err());
    }

    #[test]
    fn standardize_gives_unit_columns() {
        let mut m = Matrix::from_fn(5, 2, |i, j| if j == 0 { i as f64 * 3.0 + 1.0 } else { 2.0 });
        m.standardize_columns();
        let col = m.column(0);
        let mean: f64 = col.iter().sum::<f64>() / 5.0;
        let var: f64 = col.iter().map(|v| v * v).sum::<f64>() / 5.0;
        assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-12);
        assert!(m.column(1).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn nalgebra_round_trip() {
        let a = Matrix::from_fn(2, 3, |i, j| (i * 10 + j) as f64);
        assert_eq!(Matrix::from_nalgebra(&a.to_nalgebra()), a);
    }
}
