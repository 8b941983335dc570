//! Compressed sparse row matrices over a semiring.

use crate::error::{Error, Result};
use crate::matrix::Matrix;

pub trait Semiring {
    type Elem: Copy + PartialEq + std::fmt::Debug;

    fn zero() -> Self::Elem;
    fn add(a: Self::Elem, b: Self::Elem) -> Self::Elem;
    fn mul(a: Self::Elem, b: Self::Elem) -> Self::Elem;

    fn is_zero(a: Self::Elem) -> bool {
        a == Self::zero()
    }
}

/// Ordinary `(+, *)` over `f64`.
#[derive(Debug, Clone, Copy)]
pub struct Real;

impl Semiring for Real {
    type Elem = f64;

    fn zero() -> f64 {
        0.0
    }

    fn add(a: f64, b: f64) -> f64 {
        a + b
    }

    fn mul(a: f64, b: f64) -> f64 {
        a * b
    }
}

/// `(or, and)`: products of sparsity patterns.
#[derive(Debug, Clone, Copy)]
pub struct Boolean;

impl Semiring for Boolean {
    type Elem = bool;

    fn zero() -> bool {
        false
    }

    fn add(a: bool, b: bool) -> bool {
        a || b
    }

    fn mul(a: bool, b: bool) -> bool {
        a && b
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Csr<S: Semiring> {
    rows: usize,
    cols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<S::Elem>,
}

impl<S: Semiring> Csr<S> {
    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> S::Elem) -> Self {
        let mut indptr = Vec::with_capacity(rows + 1);
        let mut indices = Vec::new();
        let mut values = Vec::new();
        indptr.push(0);
        for r in 0..rows {
            for c in 0..cols {
                let v = f(r, c);
                if !S::is_zero(v) {
                    indices.push(c);
                    values.push(v);
                }
            }
            indptr.push(indices.len());
        }
        Self { rows, cols, indptr, indices, values }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, S::Elem)> + '_ {
        let span = self.indptr[r]..self.indptr[r + 1];
        self.indices[span.clone()].iter().copied().zip(self.values[span].iter().copied())
    }

    pub fn get(&self, r: usize, c: usize) -> S::Elem {
        self.row(r).find(|&(j, _)| j == c).map_or(S::zero(), |(_, v)| v)
    }

    pub fn transpose(&self) -> Self {
        let mut buckets: Vec<Vec<(usize, S::Elem)>> = vec![Vec::new(); self.cols];
        for r in 0..self.rows {
            for (c, v) in self.row(r) {
                buckets[c].push((r, v));
            }
        }
        let mut indptr = vec![0];
        let mut indices = Vec::with_capacity(self.nnz());
        let mut values = Vec::with_capacity(self.nnz());
        for bucket in buckets {
            for (r, v) in bucket {
                indices.push(r);
                values.push(v);
            }
            indptr.push(indices.len());
        }
        Self {
            rows: self.cols,
            cols: self.rows,
            indptr,
            indices,
            values,
        }
    }

    /// Row-by-row (Gustavson) product; entries that sum to zero are dropped.
    pub fn matmul(&self, rhs: &Self) -> Result<Self> {
        if self.cols != rhs.rows {
            return Err(Error::DimensionMismatch(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let mut acc = vec![S::zero(); rhs.cols];
        let mut touched = vec![false; rhs.cols];
        let mut pattern = Vec::new();
        let mut indptr = vec![0];
        let mut indices = Vec::new();
        let mut values = Vec::new();
        for r in 0..self.rows {
            for (k, a) in self.row(r) {
                for (c, b) in rhs.row(k) {
                    if !touched[c] {
                        touched[c] = true;
                        pattern.push(c);
                    }
                    acc[c] = S::add(acc[c], S::mul(a, b));
                }
            }
            pattern.sort_unstable();
            for &c in &pattern {
                if !S::is_zero(acc[c]) {
                    indices.push(c);
                    values.push(acc[c]);
                }
                acc[c] = S::zero();
                touched[c] = false;
            }
            pattern.clear();
            indptr.push(indices.len());
        }
        Ok(Self {
            rows: self.rows,
            cols: rhs.cols,
            indptr,
            indices,
            values,
        })
    }
}

impl Csr<Real> {
    pub fn from_dense(m: &Matrix) -> Self {
        Self::from_fn(m.rows(), m.cols(), |r, c| m[(r, c)])
    }

    pub fn to_dense(&self) -> Matrix {
        let mut out = Matrix::zeros(self.rows, self.cols);
        for r in 0..self.rows {
            for (c, v) in self.row(r) {
                out[(r, c)] = v;
            }
        }
        out
    }

    pub fn pattern(&self) -> Csr<Boolean> {
        Csr {
            rows: self.rows,
            cols: self.cols,
            indptr: self.indptr.clone(),
            indices: self.indices.clone(),
            values: vec![true; self.values.len()],
        }
    }
}
