use crate::attention::{check_score, AttentionProblem};
use crate::error::Result;
use crate::matrix::Matrix;
use crate::memsim::{CacheSim, Tag};

use super::KernelResult;

/// Exact peak residency of [`backward_no_cache`] for an `n x d` problem.
pub fn no_cache_capacity(n: usize, d: usize) -> usize {
    let (nn, nd, dd) = (n * n, n * d, d * d);
    [
        3 * nd + dd + nn,    // A1, A2, X, scores and the transient A1 X
        2 * nd + 2 * nn + n, // A1, A2, A, l, f
        4 * nd + nn + dd,    // A1, A2, f, A3, Y, h
        4 * nd + 2 * nn,     // A1, A2, f, h, dO, q
        2 * nd + 3 * nn + n, // A1, A2, f, q, p, row weights
        3 * nd + nn + dd,    // A1, A2, p, A1^T p, g
    ]
    .into_iter()
    .max()
    .unwrap()
}

/// Un-tiled baseline: every input and intermediate is held whole in cache, so
/// the simulator needs at least [`no_cache_capacity`] elements.
///
/// Uses the same products as [`crate::attention::backward_reference`], so `g`
/// agrees with it bit for bit.
pub fn backward_no_cache(prob: &AttentionProblem, sim: &mut CacheSim) -> Result<KernelResult> {
    let (n, d) = (prob.n, prob.d);
    let tag = |s: &'static str| -> Tag { s.into() };

    sim.load("A1", n * d)?;
    sim.load("A2", n * d)?;
    sim.load("X", d * d)?;
    sim.alloc("A", n * n)?;
    sim.alloc("A1X", n * d)?;
    let a1x = prob.a1.matmul(&prob.x)?;
    let s = a1x.matmul(&prob.a2.transpose())?;
    sim.evict(&tag("A1X"))?;
    sim.evict(&tag("X"))?;

    for r in 0..n {
        for c in 0..n {
            check_score(r, c, s[(r, c)])?;
        }
    }
    let a = s.map(f64::exp);
    sim.alloc("l", n)?;
    let l = a.row_sums();

    sim.alloc("f", n * n)?;
    let f = Matrix::from_fn(n, n, |r, c| a[(r, c)] / l[r]);
    sim.evict(&tag("A"))?;
    sim.evict(&tag("l"))?;

    sim.load("A3", n * d)?;
    sim.load("Y", d * d)?;
    sim.alloc("h", n * d)?;
    let h = prob.a3.matmul(&prob.y)?;
    sim.evict(&tag("A3"))?;
    sim.evict(&tag("Y"))?;

    sim.load("dO", n * d)?;
    sim.alloc("q", n * n)?;
    let q = prob.d_o.matmul(&h.transpose())?;
    sim.evict(&tag("dO"))?;
    sim.evict(&tag("h"))?;

    sim.alloc("p", n * n)?;
    sim.alloc("w", n)?;
    let fq = f.hadamard(&q)?;
    let w = fq.row_sums();
    let p = Matrix::from_fn(n, n, |r, c| fq[(r, c)] - w[r] * f[(r, c)]);
    sim.evict(&tag("w"))?;
    sim.evict(&tag("f"))?;
    sim.evict(&tag("q"))?;

    sim.alloc("g", d * d)?;
    sim.alloc("T", d * n)?;
    let g = prob.a1.transpose().matmul(&p)?.matmul(&prob.a2)?;
    for t in ["T", "p", "A1", "A2"] {
        sim.evict(&tag(t))?;
    }
    let g_tag = tag("g");
    sim.store(&g_tag, d * d)?;
    sim.evict(&g_tag)?;

    Ok(KernelResult { g, io: sim.snapshot() })
}
