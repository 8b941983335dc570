use crate::attention::{check_score, AttentionProblem};
use crate::error::Result;
use crate::matrix::{block_spans, Matrix};
use crate::memsim::{CacheSim, IoCounter, Tag};

use super::{block_params_small, read, tiled_matmul, write, BlockParams, KernelResult, MatmulNames, View};

/// Everything the tiled kernel writes to memory.
#[derive(Debug, Clone, PartialEq)]
pub struct SmallCacheMemory {
    /// `A1 X`, `n x d`.
    pub s: Matrix,
    /// Exponentiated scores, `n x n`.
    pub a: Matrix,
    pub f: Matrix,
    pub h: Matrix,
    pub q: Matrix,
    pub p: Matrix,
    /// `A1^T p`, `d x n`.
    pub t: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SmallCacheRun {
    pub result: KernelResult,
    pub memory: SmallCacheMemory,
    /// Cumulative counters at the end of each of the four phases.
    pub phase_io: [IoCounter; 4],
}

/// Tiled backward pass with square blocks of side `floor(sqrt(M/4))`.
pub fn backward_small_cache(prob: &AttentionProblem, sim: &mut CacheSim) -> Result<KernelResult> {
    backward_small_cache_detailed(prob, sim).map(|run| run.result)
}

pub fn backward_small_cache_detailed(prob: &AttentionProblem, sim: &mut CacheSim) -> Result<SmallCacheRun> {
    let BlockParams::Small { b } = block_params_small(sim.capacity())? else {
        unreachable!()
    };
    let (s, a, f) = phase_f(prob, sim, b)?;
    let io1 = sim.snapshot();
    let (h, q) = phase_q(prob, sim, b)?;
    let io2 = sim.snapshot();
    let p = phase_p(&f, &q, sim, b)?;
    let io3 = sim.snapshot();
    let (t, g) = phase_g(prob, &p, sim, b)?;
    let io4 = sim.snapshot();
    Ok(SmallCacheRun {
        result: KernelResult { g, io: io4 },
        memory: SmallCacheMemory { s, a, f, h, q, p, t },
        phase_io: [io1, io2, io3, io4],
    })
}

fn phase_f(prob: &AttentionProblem, sim: &mut CacheSim, b: usize) -> Result<(Matrix, Matrix, Matrix)> {
    let n = prob.n;
    let s = tiled_matmul(
        sim,
        View::Plain(&prob.a1),
        View::Plain(&prob.x),
        b,
        MatmulNames { lhs: "A1", rhs: "X", out: "S" },
    )?;
    let a2t = View::Transposed(&prob.a2);
    let mut a_mem = Matrix::zeros(n, n);
    let mut f_mem = Matrix::zeros(n, n);
    for (i, ri) in block_spans(n, b).enumerate() {
        let l_tag = Tag::new("l", i, 0);
        sim.alloc(l_tag.clone(), ri.len())?;
        let mut l = vec![0.0; ri.len()];
        for (j, cj) in block_spans(n, b).enumerate() {
            let a_tag = Tag::new("A", i, j);
            let mut acc = Matrix::zeros(ri.len(), cj.len());
            sim.alloc(a_tag.clone(), acc.len())?;
            for (k, rk) in block_spans(prob.d, b).enumerate() {
                let s_tag = Tag::new("S", i, k);
                let t_tag = Tag::new("A2T", k, j);
                let sb = read(sim, s_tag.clone(), View::Plain(&s), ri.clone(), rk.clone())?;
                let ab = read(sim, t_tag.clone(), a2t, rk, cj.clone())?;
                super::mul_acc(&mut acc, &sb, &ab);
                sim.evict(&s_tag)?;
                sim.evict(&t_tag)?;
            }
            for r in 0..acc.rows() {
                for c in 0..acc.cols() {
                    check_score(ri.start + r, cj.start + c, acc[(r, c)])?;
                }
            }
            let acc = acc.map(f64::exp);
            write(sim, &a_tag, &mut a_mem, ri.start, cj.start, &acc)?;
            for (r, lr) in l.iter_mut().enumerate() {
                for c in 0..acc.cols() {
                    *lr += acc[(r, c)];
                }
            }
            sim.evict(&a_tag)?;
        }
        for (j, cj) in block_spans(n, b).enumerate() {
            let f_tag = Tag::new("f", i, j);
            let a_tag = Tag::new("A", i, j);
            sim.alloc(f_tag.clone(), ri.len() * cj.len())?;
            let ab = read(sim, a_tag.clone(), View::Plain(&a_mem), ri.clone(), cj.clone())?;
            let fb = Matrix::from_fn(ab.rows(), ab.cols(), |r, c| ab[(r, c)] / l[r]);
            write(sim, &f_tag, &mut f_mem, ri.start, cj.start, &fb)?;
            sim.evict(&a_tag)?;
            sim.evict(&f_tag)?;
        }
        sim.evict(&l_tag)?;
    }
    Ok((s, a_mem, f_mem))
}

fn phase_q(prob: &AttentionProblem, sim: &mut CacheSim, b: usize) -> Result<(Matrix, Matrix)> {
    let h = tiled_matmul(
        sim,
        View::Plain(&prob.a3),
        View::Plain(&prob.y),
        b,
        MatmulNames { lhs: "A3", rhs: "Y", out: "h" },
    )?;
    let q = tiled_matmul(
        sim,
        View::Plain(&prob.d_o),
        View::Transposed(&h),
        b,
        MatmulNames { lhs: "dO", rhs: "hT", out: "q" },
    )?;
    Ok((h, q))
}

fn phase_p(f: &Matrix, q: &Matrix, sim: &mut CacheSim, b: usize) -> Result<Matrix> {
    let n = f.rows();
    let mut p_mem = Matrix::zeros(n, n);
    for (i, ri) in block_spans(n, b).enumerate() {
        let v_tag = Tag::new("v", i, 0);
        sim.alloc(v_tag.clone(), ri.len())?;
        let mut v = vec![0.0; ri.len()];
        for (j, cj) in block_spans(n, b).enumerate() {
            let (f_tag, q_tag) = (Tag::new("f", i, j), Tag::new("q", i, j));
            let fb = read(sim, f_tag.clone(), View::Plain(f), ri.clone(), cj.clone())?;
            let qb = read(sim, q_tag.clone(), View::Plain(q), ri.clone(), cj.clone())?;
            for (r, vr) in v.iter_mut().enumerate() {
                for c in 0..fb.cols() {
                    *vr += fb[(r, c)] * qb[(r, c)];
                }
            }
            sim.evict(&f_tag)?;
            sim.evict(&q_tag)?;
        }
        for (j, cj) in block_spans(n, b).enumerate() {
            let (f_tag, q_tag, p_tag) = (Tag::new("f", i, j), Tag::new("q", i, j), Tag::new("p", i, j));
            sim.alloc(p_tag.clone(), ri.len() * cj.len())?;
            let fb = read(sim, f_tag.clone(), View::Plain(f), ri.clone(), cj.clone())?;
            let qb = read(sim, q_tag.clone(), View::Plain(q), ri.clone(), cj.clone())?;
            let pb = Matrix::from_fn(fb.rows(), fb.cols(), |r, c| fb[(r, c)] * qb[(r, c)] - v[r] * fb[(r, c)]);
            sim.evict(&f_tag)?;
            sim.evict(&q_tag)?;
            write(sim, &p_tag, &mut p_mem, ri.start, cj.start, &pb)?;
            sim.evict(&p_tag)?;
        }
        sim.evict(&v_tag)?;
    }
    Ok(p_mem)
}

fn phase_g(prob: &AttentionProblem, p: &Matrix, sim: &mut CacheSim, b: usize) -> Result<(Matrix, Matrix)> {
    let t = tiled_matmul(
        sim,
        View::Transposed(&prob.a1),
        View::Plain(p),
        b,
        MatmulNames { lhs: "A1T", rhs: "p", out: "T" },
    )?;
    let g = tiled_matmul(
        sim,
        View::Plain(&t),
        View::Plain(&prob.a2),
        b,
        MatmulNames { lhs: "T", rhs: "A2", out: "g" },
    )?;
    Ok((t, g))
}
