//! I/O-instrumented attention backward kernels.
//!
//! The crate computes the gradient of softmax attention with respect to the
//! score weight matrix `X` in three ways (un-tiled, square-tiled for small
//! caches, streaming for caches of at least `d^2` elements), each executed
//! against a two-level memory simulator that counts element transfers.
//! Alongside sit a red-blue pebble game engine for matrix-multiplication DAGs,
//! closed-form I/O bounds and a sparse nonzero-count oracle.

pub mod attention;
pub mod bounds;
pub mod cli;
pub mod error;
pub mod kernels;
pub mod matrix;
pub mod memsim;
pub mod pebble;
pub mod sparse;

pub use attention::{
    backward_reference, forward, loss, loss_and_fd_gradient, AttentionProblem, BackwardArtifacts, ForwardArtifacts,
    UniformSource,
};
pub use bounds::{fit_exponent, sparse_lower_bound, sparse_stats, theoretical_bounds, BoundReport, Regime, SparseStats};
pub use error::{Error, Result};
pub use kernels::{
    backward_large_cache, backward_no_cache, backward_small_cache, block_params_large, block_params_small,
    no_cache_capacity, plan_large_cache, BlockParams, Kernel, KernelResult, LargeCachePlan,
};
pub use matrix::{max_rel_diff, Matrix};
pub use memsim::{CacheSim, IoCounter, SimError, Tag};
pub use pebble::{
    build_matmul_dag, lower_blocked_matmul_trace, validate_trace, Move, MoveKind, PebbleDag, PebbleError,
};

/// Runs `kernel` on `prob` with a cache of `m` elements.
///
/// The un-tiled kernel ignores `m` when it is too small to hold whole
/// matrices and reports [`Error::CacheTooSmall`] instead of overflowing.
pub fn run_kernel(kernel: Kernel, prob: &AttentionProblem, fwd: &ForwardArtifacts, m: usize) -> Result<KernelResult> {
    let mut sim = CacheSim::new(m);
    match kernel {
        Kernel::NoCache => {
            let need = no_cache_capacity(prob.n, prob.d);
            if m < need {
                return Err(Error::CacheTooSmall {
                    capacity: m,
                    reason: format!("the un-tiled kernel needs M >= {need}"),
                });
            }
            backward_no_cache(prob, &mut sim)
        }
        Kernel::Small => backward_small_cache(prob, &mut sim),
        Kernel::Large => backward_large_cache(prob, fwd, &mut sim),
    }
}
