//! Python module `attnio`: problems, reference gradients, the three
//! instrumented kernels, the cache simulator, bounds and the pebble bridge.
//!
//! Matrices cross the boundary as lists of row lists.

use attnio::kernels::{no_cache_capacity, Kernel};
use attnio::pebble::simulate_blocked_matmul;
use attnio::{Error, IoCounter, Matrix, SparseStats, Tag};
use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

create_exception!(attnio, AttnioError, PyException);

fn err(e: Error) -> PyErr {
    match e {
        Error::DimensionMismatch(_) | Error::InvalidArgument(_) | Error::Parse(_) => PyValueError::new_err(e.to_string()),
        _ => AttnioError::new_err(e.to_string()),
    }
}

fn to_matrix(rows: Vec<Vec<f64>>) -> PyResult<Matrix> {
    Matrix::from_rows(&rows).map_err(err)
}

fn counter_dict<'py>(py: Python<'py>, io: IoCounter) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("reads", io.reads)?;
    d.set_item("writes", io.writes)?;
    d.set_item("total_io", io.total())?;
    d.set_item("peak_residency", io.peak_residency)?;
    Ok(d)
}

#[pyclass(name = "Problem", frozen)]
struct PyProblem {
    inner: attnio::AttentionProblem,
    #[pyo3(get)]
    scale: f64,
}

#[pymethods]
impl PyProblem {
    #[new]
    fn new(
        a1: Vec<Vec<f64>>,
        a2: Vec<Vec<f64>>,
        a3: Vec<Vec<f64>>,
        x: Vec<Vec<f64>>,
        y: Vec<Vec<f64>>,
        d_o: Vec<Vec<f64>>,
    ) -> PyResult<Self> {
        let inner = attnio::AttentionProblem::new(
            to_matrix(a1)?,
            to_matrix(a2)?,
            to_matrix(a3)?,
            to_matrix(x)?,
            to_matrix(y)?,
            to_matrix(d_o)?,
        )
        .map_err(err)?;
        Ok(Self { inner, scale: 1.0 })
    }

    /// Seeded random instance; `scale` is the factor applied to `X`.
    #[staticmethod]
    fn random(n: usize, d: usize, seed: u64) -> PyResult<Self> {
        if n == 0 || d == 0 {
            return Err(PyValueError::new_err("n and d must be positive"));
        }
        let (inner, scale) = attnio::AttentionProblem::random(n, d, seed);
        Ok(Self { inner, scale })
    }

    #[staticmethod]
    fn worked_example() -> Self {
        Self { inner: attnio::AttentionProblem::worked_example(), scale: 1.0 }
    }

    #[getter]
    fn n(&self) -> usize {
        self.inner.n
    }

    #[getter]
    fn d(&self) -> usize {
        self.inner.d
    }

    #[getter]
    fn x(&self) -> Vec<Vec<f64>> {
        self.inner.x.to_rows()
    }

    #[getter]
    fn d_o(&self) -> Vec<Vec<f64>> {
        self.inner.d_o.to_rows()
    }

    fn loss(&self) -> PyResult<f64> {
        attnio::loss(&self.inner).map_err(err)
    }

    /// Central-difference gradient of the loss with respect to `X`.
    #[pyo3(signature = (step = 1e-4))]
    fn fd_gradient(&self, step: f64) -> PyResult<Vec<Vec<f64>>> {
        attnio::loss_and_fd_gradient(&self.inner, step).map(|g| g.to_rows()).map_err(err)
    }

    fn __repr__(&self) -> String {
        format!("Problem(n={}, d={})", self.inner.n, self.inner.d)
    }
}

/// Forward pass; returns a dict with `a`, `l`, `f`, `h`, `o`.
#[pyfunction]
fn forward<'py>(py: Python<'py>, problem: &PyProblem) -> PyResult<Bound<'py, PyDict>> {
    let fwd = attnio::forward(&problem.inner).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("a", fwd.a.to_rows())?;
    d.set_item("l", fwd.l)?;
    d.set_item("f", fwd.f.to_rows())?;
    d.set_item("h", fwd.h.to_rows())?;
    d.set_item("o", fwd.o.to_rows())?;
    Ok(d)
}

/// Reference backward pass; returns a dict with `q`, `p`, `g`.
#[pyfunction]
fn backward_reference<'py>(py: Python<'py>, problem: &PyProblem) -> PyResult<Bound<'py, PyDict>> {
    let fwd = attnio::forward(&problem.inner).map_err(err)?;
    let bwd = attnio::backward_reference(&problem.inner, &fwd).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("q", bwd.q.to_rows())?;
    d.set_item("p", bwd.p.to_rows())?;
    d.set_item("g", bwd.g.to_rows())?;
    Ok(d)
}

/// Runs one instrumented kernel (`"no-cache"`, `"small"` or `"large"`) with a
/// cache of `m` elements. Returns the gradient and the transfer counters.
#[pyfunction]
fn run_kernel<'py>(py: Python<'py>, kernel: &str, problem: &PyProblem, m: usize) -> PyResult<Bound<'py, PyDict>> {
    let kernel: Kernel = kernel.parse().map_err(err)?;
    let fwd = attnio::forward(&problem.inner).map_err(err)?;
    let res = attnio::run_kernel(kernel, &problem.inner, &fwd, m).map_err(err)?;
    let d = counter_dict(py, res.io)?;
    d.set_item("g", res.g.to_rows())?;
    Ok(d)
}

#[pyfunction(name = "no_cache_capacity")]
fn py_no_cache_capacity(n: usize, d: usize) -> usize {
    no_cache_capacity(n, d)
}

#[pyclass(name = "CacheSim")]
struct PyCacheSim {
    inner: attnio::CacheSim,
}

#[pymethods]
impl PyCacheSim {
    #[new]
    #[pyo3(signature = (capacity = None))]
    fn new(capacity: Option<usize>) -> Self {
        let inner = capacity.map_or_else(attnio::CacheSim::unbounded, attnio::CacheSim::new);
        Self { inner }
    }

    fn load(&mut self, tag: String, size: usize) -> PyResult<()> {
        self.inner.load(Tag::named(tag), size).map_err(|e| err(e.into()))
    }

    fn alloc(&mut self, tag: String, size: usize) -> PyResult<()> {
        self.inner.alloc(Tag::named(tag), size).map_err(|e| err(e.into()))
    }

    fn store(&mut self, tag: String, size: usize) -> PyResult<()> {
        self.inner.store(&Tag::named(tag), size).map_err(|e| err(e.into()))
    }

    fn evict(&mut self, tag: String) -> PyResult<()> {
        self.inner.evict(&Tag::named(tag)).map_err(|e| err(e.into()))
    }

    #[getter]
    fn capacity(&self) -> usize {
        self.inner.capacity()
    }

    #[getter]
    fn residency(&self) -> usize {
        self.inner.residency()
    }

    fn counters<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        counter_dict(py, self.inner.snapshot())
    }
}

#[pyfunction]
fn theoretical_bounds<'py>(py: Python<'py>, n: usize, d: usize, m: usize) -> PyResult<Bound<'py, PyDict>> {
    if n == 0 || d == 0 || m == 0 {
        return Err(PyValueError::new_err("n, d and M must be positive"));
    }
    let r = attnio::theoretical_bounds(n, d, m);
    let out = PyDict::new(py);
    out.set_item("small_branch", r.small_branch)?;
    out.set_item("large_branch", r.large_branch)?;
    out.set_item("backward_bound", r.backward_bound)?;
    out.set_item("forward_upper_small", r.forward_upper_small)?;
    out.set_item("forward_upper_large", r.forward_upper_large)?;
    out.set_item("flash_upper", r.flash_upper)?;
    out.set_item("regime", r.regime.to_string())?;
    Ok(out)
}

/// Nonzero counts `(z_a, z_x, z_ax, z_axa)` of the score products.
#[pyfunction]
fn sparse_stats(a1: Vec<Vec<f64>>, x: Vec<Vec<f64>>, a2: Vec<Vec<f64>>) -> PyResult<(usize, usize, usize, usize)> {
    let s = attnio::sparse_stats(&to_matrix(a1)?, &to_matrix(x)?, &to_matrix(a2)?).map_err(err)?;
    Ok((s.z_a, s.z_x, s.z_ax, s.z_axa))
}

#[pyfunction]
fn sparse_lower_bound(z_a: usize, z_x: usize, z_ax: usize, z_axa: usize, m: usize) -> PyResult<f64> {
    if m == 0 {
        return Err(PyValueError::new_err("M must be positive"));
    }
    Ok(attnio::sparse_lower_bound(&SparseStats { z_a, z_x, z_ax, z_axa }, m))
}

/// Least-squares slope of `log y` against `log x`.
#[pyfunction]
fn fit_exponent(points: Vec<(f64, f64)>) -> PyResult<f64> {
    attnio::fit_exponent(&points).map_err(err)
}

/// Validates the pebble lowering of the blocked matmul and returns
/// `(trace_io, simulator_io)`.
#[pyfunction]
fn pebble_verify(n1: usize, d: usize, n2: usize, b: usize, m: usize) -> PyResult<(u64, u64)> {
    let trace = attnio::lower_blocked_matmul_trace(n1, d, n2, b, m).map_err(|e| err(e.into()))?;
    let trace_io = attnio::validate_trace(&trace.dag.dag, &trace.moves, m).map_err(|e| err(e.into()))?;
    let sim = simulate_blocked_matmul(n1, d, n2, b, m).map_err(err)?;
    Ok((trace_io, sim.total()))
}

#[pymodule]
#[pyo3(name = "attnio")]
fn attnio_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("AttnioError", m.py().get_type::<AttnioError>())?;
    m.add_class::<PyProblem>()?;
    m.add_class::<PyCacheSim>()?;
    m.add_function(wrap_pyfunction!(forward, m)?)?;
    m.add_function(wrap_pyfunction!(backward_reference, m)?)?;
    m.add_function(wrap_pyfunction!(run_kernel, m)?)?;
    m.add_function(wrap_pyfunction!(py_no_cache_capacity, m)?)?;
    m.add_function(wrap_pyfunction!(theoretical_bounds, m)?)?;
    m.add_function(wrap_pyfunction!(sparse_stats, m)?)?;
    m.add_function(wrap_pyfunction!(sparse_lower_bound, m)?)?;
    m.add_function(wrap_pyfunction!(fit_exponent, m)?)?;
    m.add_function(wrap_pyfunction!(pebble_verify, m)?)?;
    Ok(())
}
