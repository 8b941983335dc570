//! Reference attention forward/backward and a finite-difference gradient oracle.
//!
//! The forward pass is `f = diag(l)⁻¹ exp(A1 X A2ᵀ)` with `l = exp(A1 X A2ᵀ) 1`,
//! `h = A3 Y` and `O = f h`. No max-subtraction is applied; callers keep scores
//! inside [`SCORE_GUARD`].

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Scores `A1 X A2ᵀ` must stay within `[-SCORE_GUARD, SCORE_GUARD]`.
pub const SCORE_GUARD: f64 = 50.0;

/// Random problems are rescaled so that `max |A1 X A2ᵀ|` is at most this value.
pub const GENERATED_SCORE_BOUND: f64 = 20.0;

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionProblem {
    pub n: usize,
    pub d: usize,
    pub a1: Matrix,
    pub a2: Matrix,
    pub a3: Matrix,
    pub x: Matrix,
    pub y: Matrix,
    /// Upstream gradient with respect to the attention output.
    pub d_o: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardArtifacts {
    /// Exponentiated scores `exp(A1 X A2ᵀ)`.
    pub a: Matrix,
    /// Softmax normaliser, row sums of `a`.
    pub l: Vec<f64>,
    pub f: Matrix,
    pub h: Matrix,
    pub o: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackwardArtifacts {
    pub q: Matrix,
    pub p: Matrix,
    /// `dL/dX`.
    pub g: Matrix,
}

impl AttentionProblem {
    pub fn new(a1: Matrix, a2: Matrix, a3: Matrix, x: Matrix, y: Matrix, d_o: Matrix) -> Result<Self> {
        let (n, d) = a1.shape();
        let expect = |name: &str, m: &Matrix, shape: (usize, usize)| -> Result<()> {
            if m.shape() != shape {
                return Err(Error::DimensionMismatch(format!(
                    "{name} is {}x{}, expected {}x{}",
                    m.rows(),
                    m.cols(),
                    shape.0,
                    shape.1
                )));
            }
            Ok(())
        };
        if n == 0 || d == 0 {
            return Err(Error::DimensionMismatch("n and d must be positive".into()));
        }
        expect("A2", &a2, (n, d))?;
        expect("A3", &a3, (n, d))?;
        expect("X", &x, (d, d))?;
        expect("Y", &y, (d, d))?;
        expect("dO", &d_o, (n, d))?;
        Ok(Self {
            n,
            d,
            a1,
            a2,
            a3,
            x,
            y,
            d_o,
        })
    }

    /// Seeded random problem: every entry uniform in `[-1, 1)`, then `X` scaled by the
    /// returned factor so that `max |A1 X A2ᵀ| <= GENERATED_SCORE_BOUND`.
    pub fn random(n: usize, d: usize, seed: u64) -> (Self, f64) {
        let mut rng = UniformSource::new(seed);
        let a1 = rng.matrix(n, d);
        let a2 = rng.matrix(n, d);
        let a3 = rng.matrix(n, d);
        let mut x = rng.matrix(d, d);
        let y = rng.matrix(d, d);
        let d_o = rng.matrix(n, d);
        let peak = scores(&a1, &x, &a2).max_abs();
        let scale = if peak > GENERATED_SCORE_BOUND {
            GENERATED_SCORE_BOUND / peak
        } else {
            1.0
        };
        if scale != 1.0 {
            x = x.map(|v| v * scale);
        }
        let problem = Self::new(a1, a2, a3, x, y, d_o).expect("generated shapes are consistent");
        (problem, scale)
    }

    /// Two-token, one-dimensional instance with `dL/dX = 2/9`.
    pub fn worked_example() -> Self {
        Self::new(
            Matrix::column(&[1.0, 2.0]),
            Matrix::column(&[1.0, 0.0]),
            Matrix::column(&[1.0, 0.0]),
            Matrix::column(&[2f64.ln()]),
            Matrix::column(&[1.0]),
            Matrix::column(&[1.0, 0.0]),
        )
        .expect("consistent shapes")
    }

    pub fn with_x(&self, x: Matrix) -> Self {
        Self { x, ..self.clone() }
    }

    pub fn with_upstream(&self, d_o: Matrix) -> Self {
        Self { d_o, ..self.clone() }
    }
}

/// ChaCha8 stream mapped to uniform reals in `[-1, 1)` using the top 53 bits of each word.
#[derive(Debug, Clone)]
pub struct UniformSource {
    rng: ChaCha8Rng,
}

impl UniformSource {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn unit(&mut self) -> f64 {
        (self.rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn symmetric(&mut self) -> f64 {
        2.0 * self.unit() - 1.0
    }

    pub fn below(&mut self, bound: u64) -> u64 {
        assert!(bound > 0);
        self.rng.next_u64() % bound
    }

    pub fn matrix(&mut self, rows: usize, cols: usize) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| self.symmetric())
    }
}

fn scores(a1: &Matrix, x: &Matrix, a2: &Matrix) -> Matrix {
    a1.matmul(x)
        .and_then(|s| s.matmul(&a2.transpose()))
        .expect("shapes checked by AttentionProblem")
}

pub(crate) fn check_score(row: usize, col: usize, value: f64) -> Result<()> {
    if !(-SCORE_GUARD..=SCORE_GUARD).contains(&value) {
        return Err(Error::NumericOverflow {
            row,
            col,
            value,
            guard: SCORE_GUARD,
        });
    }
    Ok(())
}

pub fn forward(prob: &AttentionProblem) -> Result<ForwardArtifacts> {
    let s = scores(&prob.a1, &prob.x, &prob.a2);
    for r in 0..s.rows() {
        for c in 0..s.cols() {
            check_score(r, c, s[(r, c)])?;
        }
    }
    let a = s.map(f64::exp);
    let l = a.row_sums();
    let f = Matrix::from_fn(prob.n, prob.n, |r, c| a[(r, c)] / l[r]);
    let h = prob.a3.matmul(&prob.y)?;
    let o = f.matmul(&h)?;
    Ok(ForwardArtifacts { a, l, f, h, o })
}

pub fn backward_reference(prob: &AttentionProblem, fwd: &ForwardArtifacts) -> Result<BackwardArtifacts> {
    let q = prob.d_o.matmul(&fwd.h.transpose())?;
    let fq = fwd.f.hadamard(&q)?;
    let weights = fq.row_sums();
    let p = Matrix::from_fn(prob.n, prob.n, |r, c| fq[(r, c)] - weights[r] * fwd.f[(r, c)]);
    let g = prob.a1.transpose().matmul(&p)?.matmul(&prob.a2)?;
    Ok(BackwardArtifacts { q, p, g })
}

/// `L(X) = <dO, O(X)>`, so that `dL/dO = dO`.
pub fn loss(prob: &AttentionProblem) -> Result<f64> {
    let fwd = forward(prob)?;
    Ok(fwd
        .o
        .as_slice()
        .iter()
        .zip(prob.d_o.as_slice())
        .fold(0.0, |acc, (o, g)| acc + o * g))
}

/// Central finite-difference estimate of `dL/dX` with the given step.
pub fn loss_and_fd_gradient(prob: &AttentionProblem, step: f64) -> Result<Matrix> {
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::InvalidArgument(format!("finite-difference step {step} must be positive")));
    }
    let d = prob.d;
    let mut grad = Matrix::zeros(d, d);
    for a in 0..d {
        for b in 0..d {
            let mut plus = prob.x.clone();
            plus[(a, b)] += step;
            let mut minus = prob.x.clone();
            minus[(a, b)] -= step;
            let lp = loss(&prob.with_x(plus))?;
            let lm = loss(&prob.with_x(minus))?;
            grad[(a, b)] = (lp - lm) / (2.0 * step);
        }
    }
    Ok(grad)
}
