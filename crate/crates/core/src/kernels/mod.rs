//! Attention-backward kernels executed against a [`CacheSim`].
//!
//! Every kernel reads its inputs from ordinary matrices ("memory") and calls
//! the simulator for each block it moves, so the returned [`IoCounter`] is the
//! exact transfer count of the schedule. The cache capacity `M` is the
//! simulator's capacity.

mod large_cache;
mod no_cache;
mod small_cache;

use std::ops::Range;

pub use large_cache::{backward_large_cache, plan_large_cache, LargeCachePlan};
pub use no_cache::{backward_no_cache, no_cache_capacity};
pub use small_cache::{backward_small_cache, backward_small_cache_detailed, SmallCacheMemory, SmallCacheRun};

use crate::error::{Error, Result};
use crate::matrix::{block_spans, Matrix};
use crate::memsim::{CacheSim, IoCounter, Tag};

/// Block sizes derived from the cache size.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockParams {
    /// Square tiles of side `b`, `b = floor(sqrt(M/4))`.
    Small { b: usize },
    /// Row-block heights `br = min(ceil(M/4d), d)` and `bc = ceil(M/4d)`.
    Large { br: usize, bc: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct KernelResult {
    /// `dL/dX`, `d x d`.
    pub g: Matrix,
    pub io: IoCounter,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Kernel {
    NoCache,
    Small,
    Large,
}

impl Kernel {
    pub const ALL: [Kernel; 3] = [Kernel::NoCache, Kernel::Small, Kernel::Large];

    pub fn name(self) -> &'static str {
        match self {
            Kernel::NoCache => "no-cache",
            Kernel::Small => "small",
            Kernel::Large => "large",
        }
    }
}

impl std::str::FromStr for Kernel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "no-cache" => Ok(Kernel::NoCache),
            "small" => Ok(Kernel::Small),
            "large" => Ok(Kernel::Large),
            other => Err(Error::InvalidArgument(format!(
                "unknown kernel {other:?} (expected no-cache, small or large)"
            ))),
        }
    }
}

impl std::fmt::Display for Kernel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

pub fn block_params_small(m: usize) -> Result<BlockParams> {
    if m < 4 {
        return Err(Error::CacheTooSmall {
            capacity: m,
            reason: "the tiled kernel needs M >= 4".into(),
        });
    }
    // floor(sqrt(M/4)) == isqrt(floor(M/4))
    Ok(BlockParams::Small { b: (m / 4).isqrt() })
}

pub fn block_params_large(m: usize, d: usize) -> Result<BlockParams> {
    if d == 0 {
        return Err(Error::InvalidArgument("d must be positive".into()));
    }
    if m < d * d {
        return Err(Error::CacheTooSmall {
            capacity: m,
            reason: format!("the streaming kernel needs M >= d^2 = {}", d * d),
        });
    }
    let bc = m.div_ceil(4 * d);
    Ok(BlockParams::Large { br: bc.min(d), bc })
}

/// A matrix operand, possibly read through its transpose.
#[derive(Debug, Clone, Copy)]
pub enum View<'a> {
    Plain(&'a Matrix),
    Transposed(&'a Matrix),
}

impl View<'_> {
    pub fn rows(&self) -> usize {
        match self {
            View::Plain(m) => m.rows(),
            View::Transposed(m) => m.cols(),
        }
    }

    pub fn cols(&self) -> usize {
        match self {
            View::Plain(m) => m.cols(),
            View::Transposed(m) => m.rows(),
        }
    }

    fn sub(&self, rows: Range<usize>, cols: Range<usize>) -> Matrix {
        match self {
            View::Plain(m) => m.sub(rows, cols),
            View::Transposed(m) => m.sub_transposed(rows, cols),
        }
    }
}

/// Loads a block of `src` into cache under `tag` and returns its values.
pub(crate) fn read(
    sim: &mut CacheSim,
    tag: Tag,
    src: View<'_>,
    rows: Range<usize>,
    cols: Range<usize>,
) -> Result<Matrix> {
    let block = src.sub(rows, cols);
    sim.load(tag, block.len())?;
    Ok(block)
}

pub(crate) fn read_vec(sim: &mut CacheSim, tag: Tag, src: &[f64], span: Range<usize>) -> Result<Vec<f64>> {
    sim.load(tag, span.len())?;
    Ok(src[span].to_vec())
}

/// Writes a resident block to memory at `(row0, col0)` of `dst`.
pub(crate) fn write(
    sim: &mut CacheSim,
    tag: &Tag,
    dst: &mut Matrix,
    row0: usize,
    col0: usize,
    block: &Matrix,
) -> Result<()> {
    sim.store(tag, block.len())?;
    dst.set_sub(row0, col0, block);
    Ok(())
}

/// `acc += a * b`, each entry accumulated in increasing inner index.
pub(crate) fn mul_acc(acc: &mut Matrix, a: &Matrix, b: &Matrix) {
    debug_assert_eq!(a.cols(), b.rows());
    debug_assert_eq!(acc.shape(), (a.rows(), b.cols()));
    for r in 0..a.rows() {
        for c in 0..b.cols() {
            let mut s = acc[(r, c)];
            for k in 0..a.cols() {
                s += a[(r, k)] * b[(k, c)];
            }
            acc[(r, c)] = s;
        }
    }
}

/// Names of the three operands of a [`tiled_matmul`], used to tag cache regions.
#[derive(Debug, Clone, Copy)]
pub struct MatmulNames {
    pub lhs: &'static str,
    pub rhs: &'static str,
    pub out: &'static str,
}

/// Blocked `lhs * rhs` with square tiles of side `b`:
/// for every output tile, accumulate in cache over the inner tiles, then write it.
/// Working set is at most `3 b^2`.
pub fn tiled_matmul(sim: &mut CacheSim, lhs: View<'_>, rhs: View<'_>, b: usize, names: MatmulNames) -> Result<Matrix> {
    if lhs.cols() != rhs.rows() {
        return Err(Error::DimensionMismatch(format!(
            "cannot multiply {}x{} by {}x{}",
            lhs.rows(),
            lhs.cols(),
            rhs.rows(),
            rhs.cols()
        )));
    }
    let mut out = Matrix::zeros(lhs.rows(), rhs.cols());
    for (i, ri) in block_spans(lhs.rows(), b).enumerate() {
        for (j, cj) in block_spans(rhs.cols(), b).enumerate() {
            let out_tag = Tag::new(names.out, i, j);
            let mut acc = Matrix::zeros(ri.len(), cj.len());
            sim.alloc(out_tag.clone(), acc.len())?;
            for (k, rk) in block_spans(lhs.cols(), b).enumerate() {
                let a_tag = Tag::new(names.lhs, i, k);
                let b_tag = Tag::new(names.rhs, k, j);
                let a = read(sim, a_tag.clone(), lhs, ri.clone(), rk.clone())?;
                let bb = read(sim, b_tag.clone(), rhs, rk, cj.clone())?;
                mul_acc(&mut acc, &a, &bb);
                sim.evict(&a_tag)?;
                sim.evict(&b_tag)?;
            }
            write(sim, &out_tag, &mut out, ri.start, cj.start, &acc)?;
            sim.evict(&out_tag)?;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_block_sizes() {
        assert_eq!(block_params_small(100).unwrap(), BlockParams::Small { b: 5 });
        assert_eq!(block_params_small(4).unwrap(), BlockParams::Small { b: 1 });
        assert_eq!(block_params_small(17).unwrap(), BlockParams::Small { b: 2 });
        assert!(matches!(block_params_small(3), Err(Error::CacheTooSmall { .. })));
        for m in 4..2000 {
            let BlockParams::Small { b } = block_params_small(m).unwrap() else { unreachable!() };
            assert!(b >= 1 && 4 * b * b <= m && 4 * (b + 1) * (b + 1) > m, "M={m}");
        }
    }

    #[test]
    fn large_block_sizes() {
        assert_eq!(block_params_large(64, 4).unwrap(), BlockParams::Large { br: 4, bc: 4 });
        assert_eq!(block_params_large(16, 4).unwrap(), BlockParams::Large { br: 1, bc: 1 });
        assert_eq!(block_params_large(1024, 4).unwrap(), BlockParams::Large { br: 4, bc: 64 });
        assert!(matches!(block_params_large(15, 4), Err(Error::CacheTooSmall { .. })));
    }

    #[test]
    fn tiled_matmul_counts_phase_one_product() {
        // S = A1 X with n=4, d=2, M=16 (B=2): two tile iterations of 4+4 reads, two 4-element writes.
        let a1 = Matrix::from_fn(4, 2, |r, c| (r + 2 * c) as f64);
        let x = Matrix::from_fn(2, 2, |r, c| (r as f64) - (c as f64) * 0.5);
        let mut sim = CacheSim::new(16);
        let names = MatmulNames { lhs: "A1", rhs: "X", out: "S" };
        let s = tiled_matmul(&mut sim, View::Plain(&a1), View::Plain(&x), 2, names).unwrap();
        let io = sim.snapshot();
        assert_eq!((io.reads, io.writes), (16, 8));
        assert_eq!(io.peak_residency, 12);
        assert_eq!(s, a1.matmul(&x).unwrap());
        assert_eq!(sim.residency(), 0);
    }

    #[test]
    fn tiled_matmul_ragged_and_transposed() {
        let a = Matrix::from_fn(5, 3, |r, c| ((r * 3 + c) as f64).sin());
        let b = Matrix::from_fn(7, 3, |r, c| ((r + 5 * c) as f64).cos());
        let mut sim = CacheSim::new(12);
        let names = MatmulNames { lhs: "a", rhs: "bT", out: "c" };
        let c = tiled_matmul(&mut sim, View::Plain(&a), View::Transposed(&b), 2, names).unwrap();
        assert_eq!(c, a.matmul(&b.transpose()).unwrap());
        // row blocks 3, column blocks 4, inner blocks 2 -> every element of a read 4 times, of b 3 times
        let io = sim.snapshot();
        assert_eq!(io.reads, 4 * 15 + 3 * 21);
        assert_eq!(io.writes, 35);
    }

    #[test]
    fn kernel_names_round_trip() {
        for k in Kernel::ALL {
            assert_eq!(k.name().parse::<Kernel>().unwrap(), k);
        }
        assert!("medium".parse::<Kernel>().is_err());
    }
}
