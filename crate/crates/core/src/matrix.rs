//! Dense row-major matrices with square-block views.
//!
//! Block `(i, j)` of side `b` covers rows `i*b .. min((i+1)*b, rows)` and the
//! analogous column range; tail blocks are ragged, never padded.

use std::fmt;
use std::ops::Range;

use crate::error::{Error, Result};

/// Number of `b`-sized blocks needed to cover `len` elements.
pub fn num_blocks(len: usize, b: usize) -> usize {
    assert!(b > 0, "block side must be positive");
    len.div_ceil(b)
}

/// Index range of block `i` (0-based) when `len` elements are split into blocks of `b`.
pub fn block_span(len: usize, b: usize, i: usize) -> Range<usize> {
    let start = i * b;
    assert!(start < len, "block {i} of side {b} is out of range for length {len}");
    start..(start + b).min(len)
}

/// Iterator over all block spans covering `0..len`.
pub fn block_spans(len: usize, b: usize) -> impl Iterator<Item = Range<usize>> {
    (0..num_blocks(len, b)).map(move |i| block_span(len, b, i))
}

#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch(format!(
                "{} values cannot fill a {rows}x{cols} matrix",
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

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    /// Builds a matrix from row slices; all rows must have equal length.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::DimensionMismatch(format!(
                    "row {i} has {} entries, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn column(values: &[f64]) -> Self {
        Self {
            rows: values.len(),
            cols: 1,
            data: values.to_vec(),
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
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

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows).map(|r| self.row(r).to_vec()).collect()
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |r, c| self[(c, r)])
    }

    /// Standard matrix product; each entry sums `k = 0..inner` left to right.
    pub fn matmul(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.cols != rhs.rows {
            return Err(Error::DimensionMismatch(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            let a = self.row(i);
            for j in 0..rhs.cols {
                let mut acc = 0.0;
                for (k, &aik) in a.iter().enumerate() {
                    acc += aik * rhs.data[k * rhs.cols + j];
                }
                out.data[i * rhs.cols + j] = acc;
            }
        }
        Ok(out)
    }

    pub fn hadamard(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.shape() != rhs.shape() {
            return Err(Error::DimensionMismatch(format!(
                "hadamard of {}x{} and {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let data = self.data.iter().zip(&rhs.data).map(|(a, b)| a * b).collect();
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    /// `self * 1`, each row summed left to right.
    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.rows)
            .map(|r| self.row(r).iter().fold(0.0, |acc, &x| acc + x))
            .collect()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m: f64, x| m.max(x.abs()))
    }

    pub fn count_nonzero(&self) -> usize {
        self.data.iter().filter(|&&x| x != 0.0).count()
    }

    /// Copy of the sub-matrix `rows x cols`.
    pub fn sub(&self, rows: Range<usize>, cols: Range<usize>) -> Matrix {
        let (nr, nc) = (rows.len(), cols.len());
        let mut data = Vec::with_capacity(nr * nc);
        for r in rows {
            data.extend_from_slice(&self.data[r * self.cols + cols.start..r * self.cols + cols.end]);
        }
        Matrix {
            rows: nr,
            cols: nc,
            data,
        }
    }

    /// Copy of the sub-matrix of `selfᵀ` spanning `rows x cols` (indices into the transpose).
    pub fn sub_transposed(&self, rows: Range<usize>, cols: Range<usize>) -> Matrix {
        let start_r = rows.start;
        let start_c = cols.start;
        Matrix::from_fn(rows.len(), cols.len(), |r, c| {
            self[(start_c + c, start_r + r)]
        })
    }

    /// Block `(i, j)` of side `b` (ragged at the edges).
    pub fn block(&self, b: usize, i: usize, j: usize) -> Matrix {
        self.sub(block_span(self.rows, b, i), block_span(self.cols, b, j))
    }

    pub fn set_sub(&mut self, row0: usize, col0: usize, src: &Matrix) {
        assert!(row0 + src.rows <= self.rows && col0 + src.cols <= self.cols);
        for r in 0..src.rows {
            let dst = (row0 + r) * self.cols + col0;
            self.data[dst..dst + src.cols].copy_from_slice(src.row(r));
        }
    }

    /// Parses the whitespace-separated text format: a `rows cols` header followed by the
    /// entries in row-major order.
    pub fn parse_text(text: &str) -> Result<Matrix> {
        let mut tokens = text.split_whitespace();
        let mut dim = |what: &str| -> Result<usize> {
            tokens
                .next()
                .ok_or_else(|| Error::Parse(format!("missing {what} in header")))?
                .parse::<usize>()
                .map_err(|e| Error::Parse(format!("bad {what}: {e}")))
        };
        let rows = dim("row count")?;
        let cols = dim("column count")?;
        let data = tokens
            .map(|t| {
                t.parse::<f64>()
                    .map_err(|e| Error::Parse(format!("bad entry {t:?}: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Matrix::new(rows, cols, data).map_err(|_| {
            Error::Parse(format!("header says {rows}x{cols} but the body does not match"))
        })
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{} {}\n", self.rows, self.cols);
        for r in 0..self.rows {
            let line: Vec<String> = self.row(r).iter().map(|x| format!("{x:?}")).collect();
            out.push_str(&line.join(" "));
            out.push('\n');
        }
        out
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;

    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &self.data[r * self.cols + c]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &mut self.data[r * self.cols + c]
    }
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows {
            writeln!(f, "  {:?}", self.row(r))?;
        }
        write!(f, "]")
    }
}

/// Largest entrywise difference relative to `max(1, max|reference|)`.
pub fn max_rel_diff(value: &Matrix, reference: &Matrix) -> f64 {
    assert_eq!(value.shape(), reference.shape());
    let scale = reference.max_abs().max(1.0);
    value
        .as_slice()
        .iter()
        .zip(reference.as_slice())
        .fold(0.0, |m: f64, (a, b)| m.max((a - b).abs()))
        / scale
}
