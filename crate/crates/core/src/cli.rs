//! `attnio` command line.
//!
//! Exit status: 0 on success, 1 when a check fails, 2 on usage or
//! precondition errors.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use crate::attention::{backward_reference, forward, loss_and_fd_gradient, AttentionProblem};
use crate::bounds::{fit_exponent, sparse_lower_bound, sparse_stats, theoretical_bounds};
use crate::error::Error;
use crate::kernels::{no_cache_capacity, Kernel};
use crate::matrix::{max_rel_diff, Matrix};
use crate::pebble::{lower_blocked_matmul_trace, simulate_blocked_matmul, validate_trace, PebbleError};
use crate::run_kernel;

pub const CSV_HEADER: &str =
    "n,d,M,kernel,reads,writes,total_io,peak_residency,bound_small_branch,bound_large_branch,bound_min,ratio";

pub const KERNEL_TOLERANCE: f64 = 1e-8;
pub const FD_TOLERANCE: f64 = 1e-5;
pub const FD_STEP: f64 = 1e-4;

#[derive(Debug, Parser)]
#[command(name = "attnio", version, about = "I/O-instrumented attention backward kernels")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Compare every kernel's gradient with the reference and finite differences.
    GradCheck(GradCheckArgs),
    /// Measure I/O over a grid of shapes and cache sizes.
    Sweep(SweepArgs),
    /// Evaluate the closed-form bounds.
    Bounds(BoundsArgs),
    /// Nonzero statistics and the sparse lower bound for matrices read from files.
    Sparse(SparseArgs),
    /// Lower a blocked matmul to a pebble trace and check it against the simulator.
    PebbleVerify(PebbleArgs),
}

#[derive(Debug, Args)]
struct GradCheckArgs {
    #[arg(long)]
    n: usize,
    #[arg(long)]
    d: usize,
    #[arg(long = "M")]
    m: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[arg(long, value_delimiter = ',', required = true)]
    n: Vec<usize>,
    #[arg(long, value_delimiter = ',', required = true)]
    d: Vec<usize>,
    #[arg(long = "M", value_delimiter = ',', required = true)]
    m: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = Kernel::ALL)]
    kernels: Vec<Kernel>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write the CSV here instead of standard output.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct BoundsArgs {
    #[arg(long)]
    n: usize,
    #[arg(long)]
    d: usize,
    #[arg(long = "M")]
    m: usize,
}

#[derive(Debug, Args)]
struct SparseArgs {
    #[arg(long)]
    a1: PathBuf,
    #[arg(long)]
    x: PathBuf,
    #[arg(long)]
    a2: PathBuf,
    #[arg(long = "M")]
    m: usize,
}

#[derive(Debug, Args)]
struct PebbleArgs {
    #[arg(long)]
    n1: usize,
    #[arg(long)]
    d: usize,
    #[arg(long)]
    n2: usize,
    #[arg(long = "B")]
    b: usize,
    #[arg(long = "M")]
    m: usize,
}

/// Grid and options of a `sweep` run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SweepConfig {
    pub n_list: Vec<usize>,
    pub d_list: Vec<usize>,
    pub m_list: Vec<usize>,
    pub kernels: Vec<Kernel>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub n: usize,
    pub d: usize,
    pub m: usize,
    pub kernel: Kernel,
    pub reads: u64,
    pub writes: u64,
    pub peak_residency: usize,
}

impl SweepRow {
    pub fn total_io(&self) -> u64 {
        self.reads + self.writes
    }

    pub fn csv_line(&self) -> String {
        let b = theoretical_bounds(self.n, self.d, self.m);
        format!(
            "{},{},{},{},{},{},{},{},{:.16e},{:.16e},{:.16e},{:.16e}",
            self.n,
            self.d,
            self.m,
            self.kernel,
            self.reads,
            self.writes,
            self.total_io(),
            self.peak_residency,
            b.small_branch,
            b.large_branch,
            b.backward_bound,
            self.total_io() as f64 / b.backward_bound
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepOutcome {
    pub rows: Vec<SweepRow>,
    /// `(n, d, M, kernel, reason)` for each cell that could not run.
    pub skipped: Vec<(usize, usize, usize, Kernel, String)>,
}

impl SweepOutcome {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(CSV_HEADER);
        s.push('\n');
        for row in &self.rows {
            s.push_str(&row.csv_line());
            s.push('\n');
        }
        s
    }

    /// Fitted log-log slope of total I/O against `M` per `(n, d, kernel)` with at least three points.
    pub fn exponents(&self) -> Vec<((usize, usize, Kernel), usize, f64)> {
        let mut groups: BTreeMap<(usize, usize, Kernel), Vec<(f64, f64)>> = BTreeMap::new();
        for r in &self.rows {
            groups
                .entry((r.n, r.d, r.kernel))
                .or_default()
                .push((r.m as f64, r.total_io() as f64));
        }
        groups
            .into_iter()
            .filter_map(|(key, pts)| fit_exponent(&pts).ok().map(|slope| (key, pts.len(), slope)))
            .collect()
    }
}

/// Runs every cell of the grid; rows come back in grid order (n, d, M, kernel).
pub fn run_sweep(cfg: &SweepConfig) -> Result<SweepOutcome, Error> {
    let mut cells = Vec::new();
    for &n in &cfg.n_list {
        for &d in &cfg.d_list {
            for &m in &cfg.m_list {
                for &k in &cfg.kernels {
                    cells.push((n, d, m, k));
                }
            }
        }
    }
    let results: Vec<_> = cells
        .par_iter()
        .map(|&(n, d, m, kernel)| {
            let (prob, _) = AttentionProblem::random(n, d, cfg.seed);
            let fwd = forward(&prob)?;
            match run_kernel(kernel, &prob, &fwd, m) {
                Ok(res) => Ok(Ok(SweepRow {
                    n,
                    d,
                    m,
                    kernel,
                    reads: res.io.reads,
                    writes: res.io.writes,
                    peak_residency: res.io.peak_residency,
                })),
                Err(e @ Error::CacheTooSmall { .. }) => Ok(Err((n, d, m, kernel, e.to_string()))),
                Err(e) => Err(e),
            }
        })
        .collect();
    let mut out = SweepOutcome { rows: Vec::new(), skipped: Vec::new() };
    for r in results {
        match r? {
            Ok(row) => out.rows.push(row),
            Err(skip) => out.skipped.push(skip),
        }
    }
    Ok(out)
}

enum Failure {
    Usage(String),
    Check(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Pebble(PebbleError::IllegalMove { .. } | PebbleError::IncompleteGame { .. }) | Error::Sim(_) => {
                Failure::Check(e.to_string())
            }
            other => Failure::Usage(other.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Usage(e.to_string())
    }
}

type Outcome = Result<(), Failure>;

/// Parses `argv` (including the program name), runs the subcommand and returns the exit status.
pub fn dispatch<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let text = e.render().to_string();
            return if e.use_stderr() {
                let _ = write!(err, "{text}");
                2
            } else {
                let _ = write!(out, "{text}");
                0
            };
        }
    };
    let result = match cli.command {
        Command::GradCheck(a) => grad_check(&a, out, err),
        Command::Sweep(a) => sweep(a, out, err),
        Command::Bounds(a) => bounds(&a, out),
        Command::Sparse(a) => sparse(&a, out),
        Command::PebbleVerify(a) => pebble_verify(&a, out),
    };
    match result {
        Ok(()) => 0,
        Err(Failure::Check(msg)) => {
            let _ = writeln!(err, "check failed: {msg}");
            1
        }
        Err(Failure::Usage(msg)) => {
            let _ = writeln!(err, "error: {msg}");
            2
        }
    }
}

fn positive(name: &str, v: usize) -> Result<(), Failure> {
    if v == 0 {
        return Err(Failure::Usage(format!("{name} must be positive")));
    }
    Ok(())
}

fn grad_check(a: &GradCheckArgs, out: &mut dyn Write, err: &mut dyn Write) -> Outcome {
    positive("--n", a.n)?;
    positive("--d", a.d)?;
    let (prob, scale) = AttentionProblem::random(a.n, a.d, a.seed);
    writeln!(out, "problem n={} d={} seed={} X scale={:.16e}", a.n, a.d, a.seed, scale)?;
    let fwd = forward(&prob)?;
    let reference = backward_reference(&prob, &fwd)?;
    let fd = loss_and_fd_gradient(&prob, FD_STEP)?;

    let mut grads = Vec::new();
    for kernel in Kernel::ALL {
        // the un-tiled baseline always gets a cache that holds whole matrices
        let m = match kernel {
            Kernel::NoCache => a.m.max(no_cache_capacity(a.n, a.d)),
            _ => a.m,
        };
        match run_kernel(kernel, &prob, &fwd, m) {
            Ok(res) => {
                writeln!(
                    out,
                    "{kernel}: M={m} reads={} writes={} peak={}",
                    res.io.reads, res.io.writes, res.io.peak_residency
                )?;
                grads.push((kernel, res.g));
            }
            Err(e @ Error::CacheTooSmall { .. }) => writeln!(err, "{kernel}: skipped ({e})")?,
            Err(e) => return Err(e.into()),
        }
    }
    if grads.len() < 2 {
        return Err(Failure::Usage(format!("M={} is too small for both tiled kernels", a.m)));
    }

    let mut kernel_err: f64 = 0.0;
    for (i, (ki, gi)) in grads.iter().enumerate() {
        for (kj, gj) in &grads[i + 1..] {
            let e = max_rel_diff(gi, gj);
            writeln!(out, "max relative error {ki} vs {kj}: {e:.3e}")?;
            kernel_err = kernel_err.max(e);
        }
    }
    for (k, g) in &grads {
        let e = max_rel_diff(g, &reference.g);
        writeln!(out, "max relative error {k} vs reference: {e:.3e}")?;
        kernel_err = kernel_err.max(e);
    }
    let mut fd_err: f64 = 0.0;
    for (k, g) in &grads {
        let e = max_rel_diff(g, &fd);
        writeln!(out, "max relative error {k} vs finite differences: {e:.3e}")?;
        fd_err = fd_err.max(e);
    }
    writeln!(out, "kernels: {kernel_err:.3e} (tolerance {KERNEL_TOLERANCE:e})")?;
    writeln!(out, "finite differences: {fd_err:.3e} (tolerance {FD_TOLERANCE:e})")?;
    if kernel_err > KERNEL_TOLERANCE || fd_err > FD_TOLERANCE {
        return Err(Failure::Check("gradient mismatch".into()));
    }
    writeln!(out, "ok")?;
    Ok(())
}

fn sweep(a: SweepArgs, out: &mut dyn Write, err: &mut dyn Write) -> Outcome {
    for (name, list) in [("--n", &a.n), ("--d", &a.d), ("--M", &a.m)] {
        for &v in list {
            positive(name, v)?;
        }
    }
    if a.kernels.is_empty() {
        return Err(Failure::Usage("--kernels must name at least one kernel".into()));
    }
    let cfg = SweepConfig {
        n_list: a.n,
        d_list: a.d,
        m_list: a.m,
        kernels: a.kernels,
        seed: a.seed,
    };
    let outcome = run_sweep(&cfg)?;
    for (n, d, m, k, why) in &outcome.skipped {
        writeln!(err, "skipped n={n} d={d} M={m} kernel={k}: {why}")?;
    }
    let csv = outcome.to_csv();
    let mut report = String::new();
    for ((n, d, k), pts, slope) in outcome.exponents() {
        let _ = writeln!(report, "exponent n={n} d={d} kernel={k}: {slope:.4} over {pts} cache sizes");
    }
    match &a.csv {
        Some(path) => {
            write_file(path, &csv)?;
            writeln!(out, "wrote {} rows to {}", outcome.rows.len(), path.display())?;
            write!(out, "{report}")?;
        }
        None => {
            write!(out, "{csv}")?;
            write!(err, "{report}")?;
        }
    }
    Ok(())
}

fn write_file(path: &Path, text: &str) -> Result<(), Failure> {
    std::fs::write(path, text).map_err(|e| Failure::Usage(format!("cannot write {}: {e}", path.display())))
}

fn bounds(a: &BoundsArgs, out: &mut dyn Write) -> Outcome {
    positive("--n", a.n)?;
    positive("--d", a.d)?;
    positive("--M", a.m)?;
    let r = theoretical_bounds(a.n, a.d, a.m);
    writeln!(out, "n = {}, d = {}, M = {}", r.n, r.d, r.m)?;
    writeln!(out, "small_branch = {}", r.small_branch)?;
    writeln!(out, "large_branch = {}", r.large_branch)?;
    writeln!(out, "backward_bound = {}", r.backward_bound)?;
    writeln!(out, "forward_upper_small = {}", r.forward_upper_small)?;
    writeln!(out, "forward_upper_large = {}", r.forward_upper_large)?;
    writeln!(out, "flash_upper = {}", r.flash_upper)?;
    writeln!(out, "regime = {}", r.regime)?;
    Ok(())
}

fn read_matrix(path: &Path) -> Result<Matrix, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| Failure::Usage(format!("cannot read {}: {e}", path.display())))?;
    Matrix::parse_text(&text).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))
}

fn sparse(a: &SparseArgs, out: &mut dyn Write) -> Outcome {
    positive("--M", a.m)?;
    let (a1, x, a2) = (read_matrix(&a.a1)?, read_matrix(&a.x)?, read_matrix(&a.a2)?);
    let s = sparse_stats(&a1, &x, &a2)?;
    writeln!(out, "Z_A = {}", s.z_a)?;
    writeln!(out, "Z_X = {}", s.z_x)?;
    writeln!(out, "Z_AX = {}", s.z_ax)?;
    writeln!(out, "Z_AXA = {}", s.z_axa)?;
    writeln!(out, "sparse_lower_bound = {}", sparse_lower_bound(&s, a.m))?;
    let (n, d) = a1.shape();
    writeln!(out, "dense backward_bound = {}", theoretical_bounds(n, d, a.m).backward_bound)?;
    Ok(())
}

fn pebble_verify(a: &PebbleArgs, out: &mut dyn Write) -> Outcome {
    let trace = lower_blocked_matmul_trace(a.n1, a.d, a.n2, a.b, a.m).map_err(|e| Failure::Usage(e.to_string()))?;
    let trace_io = validate_trace(&trace.dag.dag, &trace.moves, a.m).map_err(|e| Failure::Check(e.to_string()))?;
    let sim = simulate_blocked_matmul(a.n1, a.d, a.n2, a.b, a.m)?;
    writeln!(out, "nodes = {}, moves = {}", trace.dag.dag.len(), trace.moves.len())?;
    writeln!(out, "trace I/O = {trace_io}")?;
    writeln!(out, "simulator I/O = {} (reads {}, writes {})", sim.total(), sim.reads, sim.writes)?;
    if trace_io != sim.total() {
        return Err(Failure::Check("trace and simulator I/O differ".into()));
    }
    writeln!(out, "ok")?;
    Ok(())
}
