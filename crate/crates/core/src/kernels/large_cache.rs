//! Streaming backward pass for caches of at least `d^2` elements.
//!
//! The outer loop holds a block of `bc` rows of `h` and `A2` in cache; the
//! inner loop streams `br`-row blocks of `S`, `dO`, `A1`, `l` and `v` through
//! it in column chunks of width `c`, so no `n x n` matrix is ever formed
//! outside a single `br x bc` tile. `T_{*,j} = A1^T p_{*,j}` is accumulated
//! over the inner loop and folded into `g += T_{*,j} A2_j` once per outer block.
//!
//! Block sizes are planned: among all shapes whose exact working set fits in
//! `M`, the one with the fewest transfers is used. The accumulators `g` and
//! `T_{*,j}` live in cache when affordable and are otherwise kept in memory
//! and updated chunk by chunk.

use std::cmp::Reverse;

use crate::attention::{check_score, AttentionProblem, ForwardArtifacts};
use crate::error::{Error, Result};
use crate::matrix::{block_spans, num_blocks, Matrix};
use crate::memsim::{CacheSim, Tag};

use super::{block_params_large, read, read_vec, write, BlockParams, KernelResult, View};

/// Block shapes for every stage of the streaming kernel, with the exact
/// transfer count and peak residency they produce.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LargeCachePlan {
    /// Rows of `A1`/`A3` per block when forming `S = A1 X` and `h = A3 Y`.
    pub s_rows: usize,
    /// Columns of `X`/`Y` per block in the same stage.
    pub s_cols: usize,
    /// Rows and column chunk of the `v = (dO o O) 1` pass.
    pub v_rows: usize,
    pub v_chunk: usize,
    /// Rows of `h`/`A2` held by the outer loop.
    pub bc: usize,
    /// Rows of `S`/`dO`/`A1` streamed by the inner loop.
    pub br: usize,
    /// Column chunk for streamed blocks.
    pub chunk: usize,
    pub t_resident: bool,
    pub g_resident: bool,
    /// Chunk shape for `g += T_{*,j} A2_j` when an accumulator is in memory.
    pub update_rows: usize,
    pub update_cols: usize,
    pub predicted_reads: u64,
    pub predicted_writes: u64,
    pub predicted_peak: usize,
}

impl LargeCachePlan {
    pub fn predicted_io(&self) -> u64 {
        self.predicted_reads + self.predicted_writes
    }
}

#[derive(Debug, Clone, Copy)]
struct Phase2 {
    bc: usize,
    br: usize,
    chunk: usize,
    t_res: bool,
    g_res: bool,
    ur: usize,
    uc: usize,
}

impl Phase2 {
    fn outer(&self, d: usize) -> usize {
        2 * self.bc * d + usize::from(self.t_res) * d * self.bc + usize::from(self.g_res) * d * d
    }

    fn inner(&self) -> usize {
        let (br, bc, c) = (self.br, self.bc, self.chunk);
        // q + score tile + one S chunk, then p + A1 chunk (+ T chunk)
        (2 * br * bc + br * c).max(br * bc + br * c + usize::from(!self.t_res) * c * bc)
    }

    fn update(&self) -> usize {
        usize::from(!self.t_res) * self.ur * self.bc + usize::from(!self.g_res) * self.ur * self.uc
    }

    fn peak(&self, d: usize) -> usize {
        self.outer(d) + self.inner().max(self.update())
    }

    fn cost(&self, n: usize, d: usize) -> (u64, u64) {
        let (n, d) = (n as u64, d as u64);
        let tc = num_blocks(n as usize, self.bc) as u64;
        let tr = num_blocks(n as usize, self.br) as u64;
        let mut reads = 2 * n * d + tc * n * (3 * d + 2);
        let mut writes = 0;
        if !self.t_res {
            reads += (tr - 1) * n * d + n * d;
            writes += tr * n * d;
        }
        if self.g_res {
            writes += d * d;
        } else {
            reads += (tc - 1) * d * d;
            writes += tc * d * d;
        }
        (reads, writes)
    }
}

fn fits(size: usize, m: usize) -> bool {
    size <= m
}

/// Largest `(rows, cols)` with `rows <= max_rows`, `cols <= max_cols` and `size(rows, cols) <= m`,
/// preferring rows.
fn largest(max_rows: usize, max_cols: usize, m: usize, size: impl Fn(usize, usize) -> usize) -> Option<(usize, usize)> {
    (1..=max_rows).rev().find_map(|r| (1..=max_cols).rev().find(|&c| fits(size(r, c), m)).map(|c| (r, c)))
}

/// Chooses block shapes for [`backward_large_cache`].
pub fn plan_large_cache(n: usize, d: usize, m: usize) -> Result<LargeCachePlan> {
    if n == 0 {
        return Err(Error::InvalidArgument("n must be positive".into()));
    }
    let BlockParams::Large { br: br_cap, bc: bc_cap } = block_params_large(m, d)? else {
        unreachable!()
    };
    let too_small = |stage: &str| Error::CacheTooSmall {
        capacity: m,
        reason: format!("no block shape for the {stage} fits (d = {d})"),
    };

    let (s_rows, s_cols) =
        largest(br_cap.min(n), bc_cap.min(d), m, |r, c| r * d + d * c + r * c).ok_or_else(|| too_small("S, h stage"))?;
    let (v_rows, v_chunk) = largest(n, d, m, |r, c| r + 2 * r * c).ok_or_else(|| too_small("row-weight pass"))?;

    let mut best: Option<(Phase2, (u64, u64))> = None;
    for bc in 1..=bc_cap.min(n) {
        for (t_res, g_res) in [(true, true), (true, false), (false, true), (false, false)] {
            let base = Phase2 { bc, br: 1, chunk: 1, t_res, g_res, ur: d, uc: d };
            let outer = base.outer(d);
            if outer >= m {
                continue;
            }
            let Some((br, chunk)) = largest(br_cap.min(n), d, m - outer, |br, chunk| {
                Phase2 { br, chunk, ..base }.inner()
            }) else {
                continue;
            };
            let mut cand = Phase2 { br, chunk, ..base };
            if !(t_res && g_res) {
                let Some((ur, uc)) = largest(d, if g_res { 1 } else { d }, m - outer, |ur, uc| {
                    Phase2 { ur, uc, ..cand }.update()
                }) else {
                    continue;
                };
                cand.ur = ur;
                cand.uc = if g_res { d } else { uc };
            }
            let cost = cand.cost(n, d);
            let key = |p: &Phase2, c: (u64, u64)| (c.0 + c.1, Reverse(p.bc), Reverse(p.t_res), Reverse(p.g_res), Reverse(p.br));
            if best.as_ref().is_none_or(|(b, bcost)| key(&cand, cost) < key(b, *bcost)) {
                best = Some((cand, cost));
            }
        }
    }
    let (p2, (r2, w2)) = best.ok_or_else(|| too_small("streaming stage"))?;

    let (nu, du) = (n as u64, d as u64);
    let s_blocks = num_blocks(n, s_rows) as u64;
    let reads = 2 * nu * du + s_blocks * 2 * du * du + 2 * nu * du + r2;
    let writes = 2 * nu * du + nu + w2;
    let peak = (s_rows * d + d * s_cols + s_rows * s_cols)
        .max(v_rows + 2 * v_rows * v_chunk)
        .max(p2.peak(d));
    Ok(LargeCachePlan {
        s_rows,
        s_cols,
        v_rows,
        v_chunk,
        bc: p2.bc,
        br: p2.br,
        chunk: p2.chunk,
        t_resident: p2.t_res,
        g_resident: p2.g_res,
        update_rows: p2.ur,
        update_cols: p2.uc,
        predicted_reads: reads,
        predicted_writes: writes,
        predicted_peak: peak,
    })
}

/// Streaming backward pass; `fwd` supplies `l` and `O`.
pub fn backward_large_cache(prob: &AttentionProblem, fwd: &ForwardArtifacts, sim: &mut CacheSim) -> Result<KernelResult> {
    let plan = plan_large_cache(prob.n, prob.d, sim.capacity())?;
    backward_large_cache_with_plan(prob, fwd, sim, &plan)
}

pub(crate) fn backward_large_cache_with_plan(
    prob: &AttentionProblem,
    fwd: &ForwardArtifacts,
    sim: &mut CacheSim,
    plan: &LargeCachePlan,
) -> Result<KernelResult> {
    let (s, h) = phase_s_h(prob, sim, plan)?;
    let v = row_weights(prob, fwd, sim, plan)?;
    let g = phase_g(prob, &s, &h, &fwd.l, &v, sim, plan)?;
    Ok(KernelResult { g, io: sim.snapshot() })
}

/// `S = A1 X` and `h = A3 Y`, one row block of the left operand at a time.
fn phase_s_h(prob: &AttentionProblem, sim: &mut CacheSim, plan: &LargeCachePlan) -> Result<(Matrix, Matrix)> {
    let (n, d) = (prob.n, prob.d);
    let mut s = Matrix::zeros(n, d);
    let mut h = Matrix::zeros(n, d);
    for (i, ri) in block_spans(n, plan.s_rows).enumerate() {
        for (lhs, rhs, out, names) in [
            (&prob.a1, &prob.x, &mut s, ("A1", "X", "S")),
            (&prob.a3, &prob.y, &mut h, ("A3", "Y", "h")),
        ] {
            let lhs_tag = Tag::new(names.0, i, 0);
            let lb = read(sim, lhs_tag.clone(), View::Plain(lhs), ri.clone(), 0..d)?;
            for (j, cj) in block_spans(d, plan.s_cols).enumerate() {
                let rhs_tag = Tag::new(names.1, 0, j);
                let out_tag = Tag::new(names.2, i, j);
                let rb = read(sim, rhs_tag.clone(), View::Plain(rhs), 0..d, cj.clone())?;
                sim.alloc(out_tag.clone(), ri.len() * cj.len())?;
                let ob = lb.matmul(&rb)?;
                write(sim, &out_tag, out, ri.start, cj.start, &ob)?;
                sim.evict(&out_tag)?;
                sim.evict(&rhs_tag)?;
            }
            sim.evict(&lhs_tag)?;
        }
    }
    Ok((s, h))
}

/// `v = (dO o O) 1`, written to memory.
fn row_weights(prob: &AttentionProblem, fwd: &ForwardArtifacts, sim: &mut CacheSim, plan: &LargeCachePlan) -> Result<Vec<f64>> {
    let (n, d) = (prob.n, prob.d);
    let mut v = vec![0.0; n];
    for (i, ri) in block_spans(n, plan.v_rows).enumerate() {
        let v_tag = Tag::new("v", i, 0);
        sim.alloc(v_tag.clone(), ri.len())?;
        for (k, ck) in block_spans(d, plan.v_chunk).enumerate() {
            let (do_tag, o_tag) = (Tag::new("dO", i, k), Tag::new("O", i, k));
            let db = read(sim, do_tag.clone(), View::Plain(&prob.d_o), ri.clone(), ck.clone())?;
            let ob = read(sim, o_tag.clone(), View::Plain(&fwd.o), ri.clone(), ck)?;
            for (r, vr) in v[ri.clone()].iter_mut().enumerate() {
                for c in 0..db.cols() {
                    *vr += db[(r, c)] * ob[(r, c)];
                }
            }
            sim.evict(&do_tag)?;
            sim.evict(&o_tag)?;
        }
        sim.store(&v_tag, ri.len())?;
        sim.evict(&v_tag)?;
    }
    Ok(v)
}

/// `acc[r, c] += sum_k a[r, k] b[c, k]` (right operand used transposed).
fn mul_acc_nt(acc: &mut Matrix, a: &Matrix, b: &Matrix, b_cols: std::ops::Range<usize>) {
    for r in 0..acc.rows() {
        for c in 0..acc.cols() {
            let mut sum = acc[(r, c)];
            for (k, bk) in b_cols.clone().enumerate() {
                sum += a[(r, k)] * b[(c, bk)];
            }
            acc[(r, c)] = sum;
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn phase_g(
    prob: &AttentionProblem,
    s: &Matrix,
    h: &Matrix,
    l: &[f64],
    v: &[f64],
    sim: &mut CacheSim,
    plan: &LargeCachePlan,
) -> Result<Matrix> {
    let (n, d) = (prob.n, prob.d);
    let mut g = Matrix::zeros(d, d);
    let g_tag = Tag::named("g");
    if plan.g_resident {
        sim.alloc(g_tag.clone(), d * d)?;
    }
    let mut t_mem = Matrix::zeros(d, n);

    for (j, cj) in block_spans(n, plan.bc).enumerate() {
        let (h_tag, a2_tag) = (Tag::new("h", j, 0), Tag::new("A2", j, 0));
        let hj = read(sim, h_tag.clone(), View::Plain(h), cj.clone(), 0..d)?;
        let a2j = read(sim, a2_tag.clone(), View::Plain(&prob.a2), cj.clone(), 0..d)?;
        let w = cj.len();
        let mut tj = Matrix::zeros(d, w);
        let tj_tag = Tag::new("T", 0, j);
        if plan.t_resident {
            sim.alloc(tj_tag.clone(), d * w)?;
        }

        for (i, ri) in block_spans(n, plan.br).enumerate() {
            let rows = ri.len();
            let q_tag = Tag::new("q", i, j);
            let p_tag = Tag::new("P", i, j);

            sim.alloc(q_tag.clone(), rows * w)?;
            let mut q = Matrix::zeros(rows, w);
            for (k, ck) in block_spans(d, plan.chunk).enumerate() {
                let tag = Tag::new("dO", i, k);
                let chunk = read(sim, tag.clone(), View::Plain(&prob.d_o), ri.clone(), ck.clone())?;
                mul_acc_nt(&mut q, &chunk, &hj, ck);
                sim.evict(&tag)?;
            }

            sim.alloc(p_tag.clone(), rows * w)?;
            let mut tile = Matrix::zeros(rows, w);
            for (k, ck) in block_spans(d, plan.chunk).enumerate() {
                let tag = Tag::new("S", i, k);
                let chunk = read(sim, tag.clone(), View::Plain(s), ri.clone(), ck.clone())?;
                mul_acc_nt(&mut tile, &chunk, &a2j, ck);
                sim.evict(&tag)?;
            }
            for r in 0..rows {
                for c in 0..w {
                    check_score(ri.start + r, cj.start + c, tile[(r, c)])?;
                }
            }

            let l_tag = Tag::new("l", i, 0);
            let li = read_vec(sim, l_tag.clone(), l, ri.clone())?;
            for r in 0..rows {
                for c in 0..w {
                    tile[(r, c)] = tile[(r, c)].exp() / li[r];
                }
            }
            sim.evict(&l_tag)?;

            let v_tag = Tag::new("v", i, 0);
            let vi = read_vec(sim, v_tag.clone(), v, ri.clone())?;
            for r in 0..rows {
                for c in 0..w {
                    let f = tile[(r, c)];
                    tile[(r, c)] = f * q[(r, c)] - vi[r] * f;
                }
            }
            sim.evict(&v_tag)?;
            sim.evict(&q_tag)?;

            for (k, ck) in block_spans(d, plan.chunk).enumerate() {
                let a1_tag = Tag::new("A1", i, k);
                let a1 = read(sim, a1_tag.clone(), View::Plain(&prob.a1), ri.clone(), ck.clone())?;
                let chunk_tag = Tag::new("Tc", k, j);
                if !plan.t_resident {
                    if i == 0 {
                        sim.alloc(chunk_tag.clone(), ck.len() * w)?;
                    } else {
                        sim.load(chunk_tag.clone(), ck.len() * w)?;
                    }
                }
                for (kk, t_row) in ck.clone().enumerate() {
                    for c in 0..w {
                        let mut sum = tj[(t_row, c)];
                        for r in 0..rows {
                            sum += a1[(r, kk)] * tile[(r, c)];
                        }
                        tj[(t_row, c)] = sum;
                    }
                }
                if !plan.t_resident {
                    let rows_k = tj.sub(ck.clone(), 0..w);
                    write(sim, &chunk_tag, &mut t_mem, ck.start, cj.start, &rows_k)?;
                    sim.evict(&chunk_tag)?;
                }
                sim.evict(&a1_tag)?;
            }
            sim.evict(&p_tag)?;
        }

        // g += T_{*,j} A2_j
        for (u, ru) in block_spans(d, plan.update_rows).enumerate() {
            let tu_tag = Tag::new("Tu", u, j);
            if !plan.t_resident {
                read(sim, tu_tag.clone(), View::Plain(&t_mem), ru.clone(), cj.clone())?;
            }
            for (uc, cu) in block_spans(d, plan.update_cols).enumerate() {
                let gc_tag = Tag::new("g", u, uc);
                if !plan.g_resident {
                    if j == 0 {
                        sim.alloc(gc_tag.clone(), ru.len() * cu.len())?;
                    } else {
                        sim.load(gc_tag.clone(), ru.len() * cu.len())?;
                    }
                }
                for r in ru.clone() {
                    for c in cu.clone() {
                        let mut sum = g[(r, c)];
                        for k in 0..w {
                            sum += tj[(r, k)] * a2j[(k, c)];
                        }
                        g[(r, c)] = sum;
                    }
                }
                if !plan.g_resident {
                    sim.store(&gc_tag, ru.len() * cu.len())?;
                    sim.evict(&gc_tag)?;
                }
            }
            if !plan.t_resident {
                sim.evict(&tu_tag)?;
            }
        }
        if plan.t_resident {
            sim.evict(&tj_tag)?;
        }
        sim.evict(&h_tag)?;
        sim.evict(&a2_tag)?;
    }

    if plan.g_resident {
        sim.store(&g_tag, d * d)?;
        sim.evict(&g_tag)?;
    }
    Ok(g)
}
