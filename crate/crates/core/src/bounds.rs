//! Closed-form I/O bounds (constant factors taken as 1) and scaling fits.

use std::fmt;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::sparse::Csr;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Regime {
    SmallCache,
    Crossover,
    LargeCache,
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Regime::SmallCache => "SmallCache",
            Regime::Crossover => "Crossover",
            Regime::LargeCache => "LargeCache",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundReport {
    pub n: usize,
    pub d: usize,
    pub m: usize,
    /// `(n^2 d + n d^2) / sqrt(M)`
    pub small_branch: f64,
    /// `(n^2 d^2 + n d^3) / M`
    pub large_branch: f64,
    pub backward_bound: f64,
    pub forward_upper_small: f64,
    pub forward_upper_large: f64,
    pub flash_upper: f64,
    pub regime: Regime,
}

pub fn theoretical_bounds(n: usize, d: usize, m: usize) -> BoundReport {
    let (nf, df, mf) = (n as f64, d as f64, m as f64);
    let small_branch = (nf * nf * df + nf * df * df) / mf.sqrt();
    let large_branch = (nf * nf * df * df + nf * df * df * df) / mf;
    let regime = match m.cmp(&(d * d)) {
        std::cmp::Ordering::Less => Regime::SmallCache,
        std::cmp::Ordering::Equal => Regime::Crossover,
        std::cmp::Ordering::Greater => Regime::LargeCache,
    };
    BoundReport {
        n,
        d,
        m,
        small_branch,
        large_branch,
        backward_bound: small_branch.min(large_branch),
        forward_upper_small: nf * nf * df / mf.sqrt(),
        forward_upper_large: nf * nf * df * df / mf,
        flash_upper: large_branch,
        regime,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SparseStats {
    /// `min(nnz(A1), nnz(A2))`
    pub z_a: usize,
    /// `nnz(X)`
    pub z_x: usize,
    /// `min(nnz(A1 X), nnz(X A2^T))`
    pub z_ax: usize,
    /// `nnz(A1 X A2^T)`
    pub z_axa: usize,
}

impl SparseStats {
    /// Statistics of fully dense `n x d` operands.
    pub fn dense(n: usize, d: usize) -> Self {
        Self {
            z_a: n * d,
            z_x: d * d,
            z_ax: n * d,
            z_axa: n * n,
        }
    }
}

pub fn sparse_stats(a1: &Matrix, x: &Matrix, a2: &Matrix) -> Result<SparseStats> {
    let (n, d) = a1.shape();
    if x.shape() != (d, d) || a2.shape() != (n, d) {
        return Err(Error::DimensionMismatch(format!(
            "expected A1, A2: n x d and X: d x d, got A1 {}x{}, X {}x{}, A2 {}x{}",
            n,
            d,
            x.rows(),
            x.cols(),
            a2.rows(),
            a2.cols()
        )));
    }
    let (a1s, xs, a2t) = (Csr::from_dense(a1), Csr::from_dense(x), Csr::from_dense(a2).transpose());
    let a1x = a1s.matmul(&xs)?;
    let xa2t = xs.matmul(&a2t)?;
    let axa = a1x.matmul(&a2t)?;
    Ok(SparseStats {
        z_a: a1s.nnz().min(a2t.nnz()),
        z_x: xs.nnz(),
        z_ax: a1x.nnz().min(xa2t.nnz()),
        z_axa: axa.nnz(),
    })
}

/// `min((Z_A^2 + Z_A Z_X) / M, (Z_A sqrt(Z_AXA) + sqrt(Z_A Z_X Z_AX)) / sqrt(M))`
pub fn sparse_lower_bound(s: &SparseStats, m: usize) -> f64 {
    let (za, zx, zax, zaxa) = (s.z_a as f64, s.z_x as f64, s.z_ax as f64, s.z_axa as f64);
    let mf = m as f64;
    let large = (za * za + za * zx) / mf;
    let small = (za * zaxa.sqrt() + (za * zx * zax).sqrt()) / mf.sqrt();
    large.min(small)
}

/// Least-squares slope of `ln(io)` against `ln(M)`.
pub fn fit_exponent(points: &[(f64, f64)]) -> Result<f64> {
    if points.len() < 3 {
        return Err(Error::InsufficientData {
            needed: 3,
            got: points.len(),
        });
    }
    if let Some(&(m, io)) = points.iter().find(|&&(m, io)| !(m > 0.0 && io > 0.0)) {
        return Err(Error::InvalidArgument(format!("point ({m}, {io}) is not positive")));
    }
    let logs: Vec<(f64, f64)> = points.iter().map(|&(m, io)| (m.ln(), io.ln())).collect();
    let k = logs.len() as f64;
    let mx = logs.iter().map(|p| p.0).sum::<f64>() / k;
    let my = logs.iter().map(|p| p.1).sum::<f64>() / k;
    let sxx: f64 = logs.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    let sxy: f64 = logs.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    if sxx == 0.0 {
        return Err(Error::InvalidArgument("all cache sizes are equal".into()));
    }
    Ok(sxy / sxx)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn crossover_example() {
        let r = theoretical_bounds(4, 2, 4);
        assert_eq!((r.small_branch, r.large_branch, r.backward_bound), (24.0, 24.0, 24.0));
        assert_eq!(r.regime, Regime::Crossover);
    }

    #[test]
    fn large_and_small_regimes() {
        let r = theoretical_bounds(4, 2, 16);
        assert_eq!((r.large_branch, r.small_branch, r.backward_bound), (6.0, 12.0, 6.0));
        assert_eq!(r.regime, Regime::LargeCache);
        let r = theoretical_bounds(4, 2, 1);
        assert_eq!((r.small_branch, r.large_branch, r.backward_bound), (48.0, 96.0, 48.0));
        assert_eq!(r.regime, Regime::SmallCache);
        assert_eq!(r.forward_upper_small, 32.0);
        assert_eq!(r.forward_upper_large, 64.0);
        assert_eq!(r.flash_upper, 96.0);
    }

    #[test]
    fn crossover_identity_grid() {
        for n in 1..40 {
            for d in 1..12 {
                let r = theoretical_bounds(n, d, d * d);
                let expect = (n * n + n * d) as f64;
                assert_eq!((r.small_branch, r.large_branch), (expect, expect), "n={n} d={d}");
            }
        }
    }

    #[test]
    fn sparse_bound_examples() {
        let dense = SparseStats { z_a: 8, z_x: 4, z_ax: 8, z_axa: 16 };
        assert_eq!(sparse_lower_bound(&dense, 4), 24.0);
        assert_eq!(sparse_lower_bound(&SparseStats { z_a: 0, z_x: 4, z_ax: 0, z_axa: 0 }, 4), 0.0);
        let s = SparseStats { z_a: 100, z_x: 16, z_ax: 120, z_axa: 400 };
        let branch2 = (100.0 * 20.0 + 192000f64.sqrt()) / 8.0;
        assert!((branch2 - 304.78).abs() < 0.01);
        assert_eq!(sparse_lower_bound(&s, 64), 181.25);
    }

    #[test]
    fn stats_of_dense_and_zero_inputs() {
        let a1 = Matrix::from_fn(5, 3, |r, c| 1.0 + (r * 3 + c) as f64);
        let a2 = Matrix::from_fn(5, 3, |r, c| 2.0 + (r + c) as f64);
        let x = Matrix::from_fn(3, 3, |r, c| 1.0 + (r * c) as f64);
        assert_eq!(sparse_stats(&a1, &x, &a2).unwrap(), SparseStats::dense(5, 3));
        let zero = sparse_stats(&a1, &Matrix::zeros(3, 3), &a2).unwrap();
        assert_eq!((zero.z_x, zero.z_ax, zero.z_axa), (0, 0, 0));
        assert!(sparse_stats(&a1, &Matrix::zeros(2, 2), &a2).is_err());
    }

    #[test]
    fn single_row_operand() {
        let a1 = Matrix::from_fn(6, 3, |r, c| if r == 2 { 1.0 + c as f64 } else { 0.0 });
        let a2 = Matrix::from_fn(6, 3, |r, c| 1.0 + (r + 2 * c) as f64);
        let x = Matrix::from_fn(3, 3, |r, c| 1.0 + (r + c) as f64);
        let s = sparse_stats(&a1, &x, &a2).unwrap();
        assert_eq!(s.z_axa, 6);
        assert_eq!(s.z_a, 3);
        assert_eq!(s.z_ax, 3);
    }

    #[test]
    fn exponent_fits() {
        let on = |f: fn(f64) -> f64| -> Vec<(f64, f64)> { [4.0, 16.0, 64.0, 256.0].iter().map(|&m| (m, f(m))).collect() };
        assert!((fit_exponent(&on(|m| 1e6 / m)).unwrap() + 1.0).abs() < 1e-9);
        assert!((fit_exponent(&on(|m| 1e6 / m.sqrt())).unwrap() + 0.5).abs() < 1e-9);
        assert!(fit_exponent(&on(|_| 42.0)).unwrap().abs() < 1e-9);
        assert!(matches!(
            fit_exponent(&[(1.0, 1.0), (2.0, 2.0)]),
            Err(Error::InsufficientData { needed: 3, got: 2 })
        ));
        assert!(fit_exponent(&[(1.0, 1.0), (2.0, 0.0), (3.0, 1.0)]).is_err());
    }
}
