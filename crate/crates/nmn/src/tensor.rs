//! Dense f64 vectors and row-major matrices.
//!
//! Everything in this crate computes in f64; there is no generic scalar
//! type. Construction and shape mismatches report [`ShapeError`] instead of
//! panicking so callers can surface them as clean diagnostics.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ShapeError {
    #[error("matrix data length {len} does not match {rows}x{cols}")]
    BadMatrixData { rows: usize, cols: usize, len: usize },
    #[error("matrix-vector mismatch: {rows}x{cols} applied to vector of length {dim}")]
    MatVec { rows: usize, cols: usize, dim: usize },
    #[error("elementwise {op} on mismatched lengths {left} and {right}")]
    Elementwise {
        op: &'static str,
        left: usize,
        right: usize,
    },
    #[error("{op} requires a non-empty input")]
    Empty { op: &'static str },
    #[error("{op}: index {index} out of range for length {len}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        len: usize,
    },
    #[error("non-finite value at index {index} in {what}")]
    NonFinite { what: &'static str, index: usize },
}

fn check_finite(what: &'static str, data: &[f64]) -> Result<(), ShapeError> {
    match data.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(ShapeError::NonFinite { what, index }),
        None => Ok(()),
    }
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    /// Builds a matrix from row-major data. Every entry must be finite.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, ShapeError> {
        if data.len() != rows * cols {
            return Err(ShapeError::BadMatrixData {
                rows,
                cols,
                len: data.len(),
            });
        }
        check_finite("matrix", &data)?;
        Ok(Matrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Copies column `j` out as a plain vector.
    pub fn col(&self, j: usize) -> Result<Vec<f64>, ShapeError> {
        if j >= self.cols {
            return Err(ShapeError::IndexOutOfRange {
                op: "column extraction",
                index: j,
                len: self.cols,
            });
        }
        Ok((0..self.rows).map(|r| self.get(r, j)).collect())
    }

    /// y = M x.
    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>, ShapeError> {
        if x.len() != self.cols {
            return Err(ShapeError::MatVec {
                rows: self.rows,
                cols: self.cols,
                dim: x.len(),
            });
        }
        let mut y = vec![0.0; self.rows];
        for r in 0..self.rows {
            let row = &self.data[r * self.cols..(r + 1) * self.cols];
            let mut acc = 0.0;
            for (w, v) in row.iter().zip(x) {
                acc += w * v;
            }
            y[r] = acc;
        }
        Ok(y)
    }

    /// y = Mᵀ x, used when propagating adjoints back through a product.
    pub fn matvec_transposed(&self, x: &[f64]) -> Result<Vec<f64>, ShapeError> {
        if x.len() != self.rows {
            return Err(ShapeError::MatVec {
                rows: self.cols,
                cols: self.rows,
                dim: x.len(),
            });
        }
        let mut y = vec![0.0; self.cols];
        for r in 0..self.rows {
            let row = &self.data[r * self.cols..(r + 1) * self.cols];
            let xr = x[r];
            for (acc, w) in y.iter_mut().zip(row) {
                *acc += w * xr;
            }
        }
        Ok(y)
    }

    /// self += a ⊗ b (outer product), the weight-gradient update of an
    /// affine layer with adjoint `a` and input `b`.
    pub fn add_outer(&mut self, a: &[f64], b: &[f64]) -> Result<(), ShapeError> {
        if a.len() != self.rows || b.len() != self.cols {
            return Err(ShapeError::BadMatrixData {
                rows: self.rows,
                cols: self.cols,
                len: a.len() * b.len(),
            });
        }
        for (r, ar) in a.iter().enumerate() {
            let row = &mut self.data[r * self.cols..(r + 1) * self.cols];
            for (acc, bv) in row.iter_mut().zip(b) {
                *acc += ar * bv;
            }
        }
        Ok(())
    }

    pub fn add_scaled(&mut self, other: &Matrix, factor: f64) -> Result<(), ShapeError> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(ShapeError::Elementwise {
                op: "matrix accumulate",
                left: self.data.len(),
                right: other.data.len(),
            });
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += factor * b;
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        for v in &mut self.data {
            *v *= factor;
        }
    }
}

/// Dense vector. Thin wrapper kept so constructors can enforce finiteness.
#[derive(Debug, Clone, PartialEq)]
pub struct Vector {
    data: Vec<f64>,
}

impl Vector {
    pub fn new(data: Vec<f64>) -> Result<Self, ShapeError> {
        check_finite("vector", &data)?;
        Ok(Vector { data })
    }

    pub fn zeros(n: usize) -> Self {
        Vector { data: vec![0.0; n] }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, i: usize) -> f64 {
        self.data[i]
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn add_scaled(&mut self, other: &Vector, factor: f64) -> Result<(), ShapeError> {
        if self.len() != other.len() {
            return Err(ShapeError::Elementwise {
                op: "vector accumulate",
                left: self.len(),
                right: other.len(),
            });
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += factor * b;
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        for v in &mut self.data {
            *v *= factor;
        }
    }
}

impl From<Vec<f64>> for Vector {
    /// Infallible construction for internally computed data. Use
    /// [`Vector::new`] for anything that crossed an I/O boundary.
    fn from(data: Vec<f64>) -> Self {
        Vector { data }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Independent scalar-loop reference for M x, kept free of any shared
    /// helper so it can catch indexing bugs in `matvec`.
    fn matvec_reference(m: &Matrix, x: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(m.rows());
        for r in 0..m.rows() {
            let mut acc = 0.0;
            for c in 0..m.cols() {
                acc += m.get(r, c) * x[c];
            }
            out.push(acc);
        }
        out
    }

    #[test]
    fn identity_matvec_returns_input() {
        let m = Matrix::identity(3);
        let y = m.matvec(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(y, vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn zero_matrix_maps_to_zero() {
        let m = Matrix::zeros(2, 3);
        let y = m.matvec(&[4.0, 5.0, 6.0]).unwrap();
        assert_eq!(y, vec![0.0, 0.0]);
    }

    #[test]
    fn one_by_one_matvec_multiplies() {
        let m = Matrix::new(1, 1, vec![2.0]).unwrap();
        assert_eq!(m.matvec(&[3.0]).unwrap(), vec![6.0]);
    }

    #[test]
    fn matvec_matches_scalar_reference_on_seeded_input() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        for _ in 0..20 {
            let rows = rng.gen_range(1..7);
            let cols = rng.gen_range(1..7);
            let data: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let m = Matrix::new(rows, cols, data).unwrap();
            let x: Vec<f64> = (0..cols).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let got = m.matvec(&x).unwrap();
            let want = matvec_reference(&m, &x);
            for (g, w) in got.iter().zip(&want) {
                assert!(
                    (g - w).abs() < 1e-12,
                    "matvec disagrees with scalar loop: {g} vs {w}"
                );
            }
        }
    }

    #[test]
    fn transposed_matvec_matches_explicit_transpose() {
        let m = Matrix::new(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let y = m.matvec_transposed(&[1.0, -1.0]).unwrap();
        assert_eq!(y, vec![1.0 - 4.0, 2.0 - 5.0, 3.0 - 6.0]);
    }

    #[test]
    fn mismatched_matvec_reports_shapes() {
        let m = Matrix::zeros(2, 3);
        let err = m.matvec(&[1.0, 2.0]).unwrap_err();
        assert_eq!(
            err,
            ShapeError::MatVec {
                rows: 2,
                cols: 3,
                dim: 2
            }
        );
    }

    #[test]
    fn non_finite_entries_are_rejected_at_construction() {
        let err = Matrix::new(1, 2, vec![1.0, f64::NAN]).unwrap_err();
        assert!(matches!(err, ShapeError::NonFinite { index: 1, .. }));
        let err = Vector::new(vec![f64::INFINITY]).unwrap_err();
        assert!(matches!(err, ShapeError::NonFinite { index: 0, .. }));
    }

    #[test]
    fn outer_product_accumulates_per_entry() {
        let mut m = Matrix::zeros(2, 2);
        m.add_outer(&[1.0, 2.0], &[3.0, 4.0]).unwrap();
        m.add_outer(&[1.0, 0.0], &[1.0, 1.0]).unwrap();
        assert_eq!(m.as_slice(), &[4.0, 5.0, 6.0, 8.0]);
    }
}
