//! Acceptance criteria, one line per criterion. Exits non-zero if any fails.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use attnio::kernels::{backward_small_cache_detailed, no_cache_capacity};
use attnio::pebble::{lower_blocked_matmul_trace, simulate_blocked_matmul, validate_trace};
use attnio::{
    backward_large_cache, backward_no_cache, backward_reference, backward_small_cache, fit_exponent, forward,
    loss_and_fd_gradient, max_rel_diff, plan_large_cache, sparse_lower_bound, theoretical_bounds, AttentionProblem,
    CacheSim, Error, Kernel, SimError, SparseStats, UniformSource,
};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn min_large_m(n: usize, d: usize) -> usize {
    (d * d..).find(|&m| plan_large_cache(n, d, m).is_ok()).unwrap()
}

fn large(prob: &AttentionProblem, m: usize) -> attnio::Result<attnio::KernelResult> {
    let fwd = forward(prob)?;
    backward_large_cache(prob, &fwd, &mut CacheSim::new(m))
}

fn small(prob: &AttentionProblem, m: usize) -> attnio::Result<attnio::KernelResult> {
    backward_small_cache(prob, &mut CacheSim::new(m))
}

fn no_cache(prob: &AttentionProblem) -> attnio::Result<attnio::KernelResult> {
    backward_no_cache(prob, &mut CacheSim::new(no_cache_capacity(prob.n, prob.d)))
}

fn gradient_correctness() -> Outcome {
    let (ns, ds) = ([4, 8, 16, 32], [2, 4, 8]);
    let (mut kernel_err, mut fd_err) = (0.0f64, 0.0f64);
    for s in 0..50u64 {
        let n = ns[s as usize % 4];
        let d = ds[(s as usize / 4) % 3];
        let (prob, _) = AttentionProblem::random(n, d, 1000 + s);
        let m_small = [4, 9, 16, 36, 64][s as usize % 5];
        let m_large = (d * d * [1, 2, 4][s as usize % 3]).max(min_large_m(n, d));
        let gs = [
            no_cache(&prob).unwrap().g,
            small(&prob, m_small).unwrap().g,
            large(&prob, m_large).unwrap().g,
        ];
        let fd = loss_and_fd_gradient(&prob, 1e-4).unwrap();
        for i in 0..3 {
            for j in i + 1..3 {
                kernel_err = kernel_err.max(max_rel_diff(&gs[i], &gs[j]));
            }
            fd_err = fd_err.max(max_rel_diff(&gs[i], &fd));
        }
    }
    outcome(
        kernel_err <= 1e-8 && fd_err <= 1e-5,
        format!("50 problems: max pairwise {kernel_err:.2e} (<= 1e-8), max vs FD {fd_err:.2e} (<= 1e-5)"),
    )
}

fn worked_value() -> Outcome {
    let prob = AttentionProblem::worked_example();
    let target = 2.0 / 9.0;
    let gs = [
        no_cache(&prob).unwrap().g[(0, 0)],
        small(&prob, 4).unwrap().g[(0, 0)],
        large(&prob, min_large_m(2, 1)).unwrap().g[(0, 0)],
    ];
    let fd = loss_and_fd_gradient(&prob, 1e-4).unwrap()[(0, 0)];
    let err = gs.iter().map(|g| (g - target).abs()).fold(0.0, f64::max);
    outcome(
        err <= 1e-10 && (fd - target).abs() <= 1e-6,
        format!("g = {:?}, max |g - 2/9| = {err:.2e}, FD = {fd:.10}", gs),
    )
}

fn slope(kernel: Kernel, n: usize, d: usize, ms: &[usize]) -> (f64, Vec<u64>) {
    let (prob, _) = AttentionProblem::random(n, d, 7);
    let ios: Vec<u64> = ms
        .iter()
        .map(|&m| match kernel {
            Kernel::Small => small(&prob, m).unwrap().io.total(),
            Kernel::Large => large(&prob, m).unwrap().io.total(),
            Kernel::NoCache => unreachable!(),
        })
        .collect();
    let pts: Vec<(f64, f64)> = ms.iter().zip(&ios).map(|(&m, &io)| (m as f64, io as f64)).collect();
    (fit_exponent(&pts).unwrap(), ios)
}

fn small_cache_law() -> Outcome {
    let (s, ios) = slope(Kernel::Small, 64, 8, &[8, 16, 32]);
    outcome((-0.6..=-0.4).contains(&s), format!("n=64 d=8 M=8,16,32: I/O {ios:?}, slope {s:.4} (target -0.5 +- 0.1)"))
}

fn large_cache_law() -> Outcome {
    let (s, ios) = slope(Kernel::Large, 128, 4, &[16, 32, 64, 128, 256]);
    outcome(
        (-1.15..=-0.85).contains(&s),
        format!("n=128 d=4 M=16..256: I/O {ios:?}, slope {s:.4} (target -1.0 +- 0.15)"),
    )
}

fn crossover() -> Outcome {
    let mut pass = true;
    let mut detail = Vec::new();
    for (n, d) in [(32, 4), (64, 8)] {
        let m = d * d;
        let (prob, _) = AttentionProblem::random(n, d, 3);
        let a = small(&prob, m).unwrap().io.total() as f64;
        let b = large(&prob, m).unwrap().io.total() as f64;
        let ratio = a.max(b) / a.min(b);
        let r = theoretical_bounds(n, d, m);
        let exact = (n * n + n * d) as f64;
        pass &= ratio <= 4.0 && r.small_branch == exact && r.large_branch == exact;
        detail.push(format!("(n={n},d={d}) measured ratio {ratio:.3}, bounds {} = {}", r.small_branch, r.large_branch));
    }
    outcome(pass, detail.join("; "))
}

fn residency_fuzz() -> Outcome {
    let mut rng = UniformSource::new(2024);
    let mut overflows = 0;
    let mut over_m = 0;
    let mut other = Vec::new();
    for _ in 0..200 {
        let n = 1 + rng.below(40) as usize;
        let d = 1 + rng.below(8) as usize;
        let kernel = Kernel::ALL[rng.below(3) as usize];
        let (prob, _) = AttentionProblem::random(n, d, rng.below(1 << 32));
        let (m, res) = match kernel {
            Kernel::NoCache => {
                let m = no_cache_capacity(n, d) + rng.below(64) as usize;
                (m, backward_no_cache(&prob, &mut CacheSim::new(m)))
            }
            Kernel::Small => {
                let m = 4 + rng.below(4 * (d * d) as u64 + 64) as usize;
                (m, small(&prob, m))
            }
            Kernel::Large => {
                let lo = min_large_m(n, d);
                let m = lo + rng.below((n * d + 1) as u64) as usize;
                (m, large(&prob, m))
            }
        };
        match res {
            Ok(r) => over_m += usize::from(r.io.peak_residency > m),
            Err(Error::Sim(SimError::CacheOverflow { .. })) => overflows += 1,
            Err(e) => other.push(format!("{kernel} n={n} d={d} M={m}: {e}")),
        }
    }
    outcome(
        overflows == 0 && over_m == 0 && other.is_empty(),
        format!("200 runs: {overflows} overflows, {over_m} with peak > M, {} other errors {other:?}", other.len()),
    )
}

fn pebble_bridge() -> Outcome {
    let mut shapes: Vec<(usize, usize, usize)> = Vec::new();
    for n1 in 1..=8 {
        for d in 1..=8 {
            for n2 in 1..=8 {
                shapes.push((n1, d, n2));
            }
        }
    }
    // shapes at the node cap
    shapes.extend([(12, 12, 12), (16, 8, 16), (5, 30, 7), (1, 64, 31)]);
    let mut cases = 0;
    let mut failures = Vec::new();
    for (n1, d, n2) in shapes {
        if attnio::pebble::matmul_dag_size(n1, d, n2) > attnio::pebble::DAG_NODE_CAP {
            continue;
        }
        for b in 1..=4 {
            for m in [4 * b * b, 4 * b * b + 1, 4 * b * b + 5] {
                cases += 1;
                let trace = lower_blocked_matmul_trace(n1, d, n2, b, m).unwrap();
                let sim = simulate_blocked_matmul(n1, d, n2, b, m).unwrap().total();
                match validate_trace(&trace.dag.dag, &trace.moves, m) {
                    Ok(io) if io == sim => {}
                    Ok(io) => failures.push(format!("({n1},{d},{n2},{b},{m}): trace {io} != sim {sim}")),
                    Err(e) => failures.push(format!("({n1},{d},{n2},{b},{m}): {e}")),
                }
            }
        }
    }
    outcome(failures.is_empty(), format!("{cases} configurations, {} mismatches {failures:?}", failures.len()))
}

fn dense_reduction() -> Outcome {
    let mut cases = 0;
    let mut bad = Vec::new();
    for n in 2..=16 {
        for d in 1..=8 {
            for m in 1..=64 {
                cases += 1;
                let s = sparse_lower_bound(&SparseStats::dense(n, d), m);
                let b = theoretical_bounds(n, d, m).backward_bound;
                if s != b {
                    bad.push((n, d, m, s, b));
                }
            }
        }
    }
    outcome(bad.is_empty(), format!("{cases} grid points, {} unequal {bad:?}", bad.len()))
}

fn internal_identities() -> Outcome {
    let mut rng = UniformSource::new(99);
    let (mut stoch, mut zero, mut diag) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..200 {
        let n = 1 + rng.below(32) as usize;
        let d = 1 + rng.below(8) as usize;
        let (prob, _) = AttentionProblem::random(n, d, rng.below(1 << 32));
        let fwd = forward(&prob).unwrap();
        let bwd = backward_reference(&prob, &fwd).unwrap();
        let run = backward_small_cache_detailed(&prob, &mut CacheSim::new(4 + rng.below(60) as usize)).unwrap();
        for (f, p) in [(&fwd.f, &bwd.p), (&run.memory.f, &run.memory.p)] {
            stoch = f.row_sums().iter().fold(stoch, |m, s| m.max((s - 1.0).abs()));
            zero = p.row_sums().iter().fold(zero, |m, s| m.max(s.abs()));
        }
        let fq = fwd.f.hadamard(&bwd.q).unwrap().row_sums();
        let od = fwd.o.hadamard(&prob.d_o).unwrap().row_sums();
        diag = fq.iter().zip(&od).fold(diag, |m, (a, b)| m.max((a - b).abs()));
    }
    outcome(
        stoch <= 1e-12 && zero <= 1e-10 && diag <= 1e-10,
        format!("200 problems: |f1 - 1| {stoch:.2e}, |p1| {zero:.2e}, |(f o q)1 - (O o dO)1| {diag:.2e}"),
    )
}

/// Name, check and optional time budget.
type Criterion = (&'static str, fn() -> Outcome, Option<Duration>);

fn main() -> ExitCode {
    let criteria: [Criterion; 9] = [
        ("gradient correctness", gradient_correctness, Some(Duration::from_secs(30))),
        ("worked value", worked_value, None),
        ("small-cache sqrt(M) law", small_cache_law, Some(Duration::from_secs(60))),
        ("large-cache 1/M law", large_cache_law, Some(Duration::from_secs(60))),
        ("crossover at M = d^2", crossover, None),
        ("residency enforcement", residency_fuzz, None),
        ("pebble bridge", pebble_bridge, None),
        ("dense reduction of the sparse bound", dense_reduction, None),
        ("internal identities", internal_identities, None),
    ];
    let mut failed = 0;
    for (i, (name, check, limit)) in criteria.into_iter().enumerate() {
        let start = Instant::now();
        let mut out = check();
        let elapsed = start.elapsed();
        if let Some(limit) = limit {
            if elapsed > limit {
                out.pass = false;
                out.detail.push_str(&format!("; runtime {elapsed:?} over {limit:?}"));
            }
        }
        failed += usize::from(!out.pass);
        println!(
            "criterion {} {:<38} {} ({:.2?}) {}",
            i + 1,
            name,
            if out.pass { "PASS" } else { "FAIL" },
            elapsed,
            out.detail
        );
    }
    println!("acceptance: {} of 9 criteria passed", 9 - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
