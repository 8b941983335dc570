//! Red-blue pebble game on matrix-multiplication DAGs.
//!
//! Red pebbles mark values in cache, blue pebbles values in memory. Inputs
//! start blue. `Input` copies a blue value into cache, `Output` copies a red
//! value to memory, `Compute` places a red pebble on a node whose parents are
//! all red, and `Delete` removes a red pebble. The I/O of a play is its number
//! of `Input` and `Output` moves.

use std::fmt;

use thiserror::Error;

use crate::kernels::{tiled_matmul, MatmulNames, View};
use crate::matrix::{block_spans, Matrix};
use crate::memsim::{CacheSim, IoCounter};

/// Largest DAG [`build_matmul_dag`] will construct.
pub const DAG_NODE_CAP: usize = 4096;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PebbleError {
    #[error("move {index} ({mv}) is illegal: {reason}")]
    IllegalMove { index: usize, mv: Move, reason: String },
    #[error("game incomplete: {missing} output node(s) never received a blue pebble")]
    IncompleteGame { missing: usize },
    #[error("DAG would have {nodes} nodes, above the cap of {cap}")]
    SizeLimit { nodes: usize, cap: usize },
    #[error("invalid pebbling instance: {0}")]
    InvalidInstance(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PebbleDag {
    parents: Vec<Vec<usize>>,
    children: Vec<usize>,
    inputs: Vec<usize>,
    outputs: Vec<usize>,
}

impl PebbleDag {
    pub fn new() -> Self {
        Self {
            parents: Vec::new(),
            children: Vec::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn add_input(&mut self) -> usize {
        let id = self.parents.len();
        self.parents.push(Vec::new());
        self.children.push(0);
        self.inputs.push(id);
        id
    }

    /// Adds a computed node; parents must already exist, so the graph stays acyclic.
    pub fn add_node(&mut self, parents: &[usize]) -> usize {
        let id = self.parents.len();
        assert!(!parents.is_empty(), "computed nodes need parents");
        for &p in parents {
            assert!(p < id, "parent {p} does not exist yet");
            self.children[p] += 1;
        }
        self.parents.push(parents.to_vec());
        self.children.push(0);
        id
    }

    pub fn mark_output(&mut self, node: usize) {
        self.outputs.push(node);
    }

    pub fn len(&self) -> usize {
        self.parents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.parents.is_empty()
    }

    pub fn parents(&self, node: usize) -> &[usize] {
        &self.parents[node]
    }

    pub fn is_input(&self, node: usize) -> bool {
        self.parents[node].is_empty()
    }

    pub fn num_children(&self, node: usize) -> usize {
        self.children[node]
    }

    pub fn inputs(&self) -> &[usize] {
        &self.inputs
    }

    pub fn outputs(&self) -> &[usize] {
        &self.outputs
    }

    /// Length of the longest path from an input to `node`, counted in computed nodes.
    pub fn depth(&self, node: usize) -> usize {
        let mut depth = vec![0usize; node + 1];
        for v in 0..=node {
            if !self.is_input(v) {
                depth[v] = 1 + self.parents[v].iter().map(|&p| depth[p]).max().unwrap_or(0);
            }
        }
        depth[node]
    }
}

impl Default for PebbleDag {
    fn default() -> Self {
        Self::new()
    }
}

/// How the `d` products of one output entry are summed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SummationShape {
    /// Pairwise, level by level, left to right; an odd node at the end of a
    /// level is promoted unchanged.
    Balanced,
    /// Balanced within each run of `b` consecutive products, then the run
    /// totals are added one after another. `Blocked(b)` with `b >= d` is `Balanced`.
    Blocked(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Segment {
    root: usize,
    chain: usize,
}

/// DAG of `A B` for `A: n1 x d`, `B: d x n2`, with the node ids of every operand entry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatmulDag {
    pub dag: PebbleDag,
    pub n1: usize,
    pub d: usize,
    pub n2: usize,
    a: Vec<usize>,
    b: Vec<usize>,
    products: Vec<usize>,
    segments: Vec<Vec<Segment>>,
}

impl MatmulDag {
    pub fn a(&self, i: usize, k: usize) -> usize {
        self.a[i * self.d + k]
    }

    pub fn b(&self, k: usize, j: usize) -> usize {
        self.b[k * self.n2 + j]
    }

    pub fn product(&self, i: usize, j: usize, k: usize) -> usize {
        self.products[(i * self.n2 + j) * self.d + k]
    }

    pub fn output(&self, i: usize, j: usize) -> usize {
        self.dag.outputs()[i * self.n2 + j]
    }
}

pub fn matmul_dag_size(n1: usize, d: usize, n2: usize) -> usize {
    n1 * d + d * n2 + n1 * n2 * (2 * d - 1)
}

pub fn build_matmul_dag(n1: usize, d: usize, n2: usize) -> Result<MatmulDag, PebbleError> {
    build_matmul_dag_shaped(n1, d, n2, SummationShape::Balanced)
}

fn balanced(dag: &mut PebbleDag, leaves: &[usize]) -> usize {
    let mut level = leaves.to_vec();
    while level.len() > 1 {
        level = level
            .chunks(2)
            .map(|pair| match pair {
                [l, r] => dag.add_node(&[*l, *r]),
                [single] => *single,
                _ => unreachable!(),
            })
            .collect();
    }
    level[0]
}

pub fn build_matmul_dag_shaped(n1: usize, d: usize, n2: usize, shape: SummationShape) -> Result<MatmulDag, PebbleError> {
    if n1 == 0 || d == 0 || n2 == 0 {
        return Err(PebbleError::InvalidInstance(format!("dimensions must be positive, got ({n1}, {d}, {n2})")));
    }
    let run = match shape {
        SummationShape::Balanced => d,
        SummationShape::Blocked(0) => {
            return Err(PebbleError::InvalidInstance("summation block must be positive".into()));
        }
        SummationShape::Blocked(b) => b.min(d),
    };
    let nodes = matmul_dag_size(n1, d, n2);
    if nodes > DAG_NODE_CAP {
        return Err(PebbleError::SizeLimit { nodes, cap: DAG_NODE_CAP });
    }
    let mut dag = PebbleDag::new();
    let a: Vec<usize> = (0..n1 * d).map(|_| dag.add_input()).collect();
    let b: Vec<usize> = (0..d * n2).map(|_| dag.add_input()).collect();
    let mut products = Vec::with_capacity(n1 * n2 * d);
    let mut segments = Vec::with_capacity(n1 * n2);
    for i in 0..n1 {
        for j in 0..n2 {
            let prods: Vec<usize> = (0..d).map(|k| dag.add_node(&[a[i * d + k], b[k * n2 + j]])).collect();
            let mut segs: Vec<Segment> = Vec::new();
            for span in block_spans(d, run) {
                let root = balanced(&mut dag, &prods[span]);
                let chain = match segs.last() {
                    None => root,
                    Some(prev) => dag.add_node(&[prev.chain, root]),
                };
                segs.push(Segment { root, chain });
            }
            dag.mark_output(segs.last().unwrap().chain);
            products.extend(prods);
            segments.push(segs);
        }
    }
    debug_assert_eq!(dag.len(), nodes);
    Ok(MatmulDag { dag, n1, d, n2, a, b, products, segments })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MoveKind {
    Input,
    Output,
    Compute,
    Delete,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Move {
    pub kind: MoveKind,
    pub node: usize,
}

impl Move {
    pub fn input(node: usize) -> Self {
        Self { kind: MoveKind::Input, node }
    }

    pub fn output(node: usize) -> Self {
        Self { kind: MoveKind::Output, node }
    }

    pub fn compute(node: usize) -> Self {
        Self { kind: MoveKind::Compute, node }
    }

    pub fn delete(node: usize) -> Self {
        Self { kind: MoveKind::Delete, node }
    }
}

impl fmt::Display for Move {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?} {}", self.kind, self.node)
    }
}

/// Pebble placement during a play.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GameState {
    pub red: Vec<bool>,
    pub blue: Vec<bool>,
    pub red_count: usize,
    pub io_count: u64,
}

impl GameState {
    pub fn new(dag: &PebbleDag) -> Self {
        let mut blue = vec![false; dag.len()];
        for &v in dag.inputs() {
            blue[v] = true;
        }
        Self {
            red: vec![false; dag.len()],
            blue,
            red_count: 0,
            io_count: 0,
        }
    }

    /// Applies one move, or explains why it is illegal.
    pub fn apply(&mut self, dag: &PebbleDag, mv: Move, budget: usize) -> Result<(), String> {
        let v = mv.node;
        if v >= dag.len() {
            return Err(format!("node {v} does not exist"));
        }
        match mv.kind {
            MoveKind::Input => {
                if !self.blue[v] {
                    return Err("node has no blue pebble".into());
                }
                if self.red[v] {
                    return Err("node already has a red pebble".into());
                }
                self.red[v] = true;
                self.red_count += 1;
                self.io_count += 1;
            }
            MoveKind::Output => {
                if !self.red[v] {
                    return Err("node has no red pebble".into());
                }
                self.blue[v] = true;
                self.io_count += 1;
            }
            MoveKind::Compute => {
                if dag.is_input(v) {
                    return Err("input nodes cannot be computed".into());
                }
                if self.red[v] {
                    return Err("node already has a red pebble".into());
                }
                if let Some(p) = dag.parents(v).iter().find(|&&p| !self.red[p]) {
                    return Err(format!("parent {p} has no red pebble"));
                }
                self.red[v] = true;
                self.red_count += 1;
            }
            MoveKind::Delete => {
                if !self.red[v] {
                    return Err("node has no red pebble".into());
                }
                self.red[v] = false;
                self.red_count -= 1;
            }
        }
        if self.red_count > budget {
            return Err(format!("{} red pebbles exceed the budget of {budget}", self.red_count));
        }
        Ok(())
    }
}

/// Plays `moves` with at most `budget` red pebbles and returns the I/O of the play.
pub fn validate_trace(dag: &PebbleDag, moves: &[Move], budget: usize) -> Result<u64, PebbleError> {
    let mut state = GameState::new(dag);
    for (index, &mv) in moves.iter().enumerate() {
        state
            .apply(dag, mv, budget)
            .map_err(|reason| PebbleError::IllegalMove { index, mv, reason })?;
    }
    let missing = dag.outputs().iter().filter(|&&v| !state.blue[v]).count();
    if missing > 0 {
        return Err(PebbleError::IncompleteGame { missing });
    }
    Ok(state.io_count)
}

/// A scalar-level play of the blocked matmul loop, together with its DAG.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockedTrace {
    pub dag: MatmulDag,
    pub moves: Vec<Move>,
}

impl BlockedTrace {
    pub fn io(&self) -> u64 {
        self.moves
            .iter()
            .filter(|m| matches!(m.kind, MoveKind::Input | MoveKind::Output))
            .count() as u64
    }
}

struct Lowering<'a> {
    dag: &'a MatmulDag,
    moves: Vec<Move>,
    uses_left: Vec<usize>,
}

impl Lowering<'_> {
    /// Post-order evaluation of a segment tree, dropping children once summed
    /// and inputs after their last use.
    fn eval(&mut self, node: usize) {
        let parents = self.dag.dag.parents(node);
        if parents.iter().all(|&p| self.dag.dag.is_input(p)) {
            self.moves.push(Move::compute(node));
            for &p in parents {
                self.uses_left[p] -= 1;
                if self.uses_left[p] == 0 {
                    self.moves.push(Move::delete(p));
                }
            }
            return;
        }
        let (l, r) = (parents[0], parents[1]);
        self.eval(l);
        self.eval(r);
        self.moves.push(Move::compute(node));
        self.moves.push(Move::delete(l));
        self.moves.push(Move::delete(r));
    }
}

/// Renders the blocked loop (square tiles of side `b`, accumulate over inner
/// tiles, write the output tile) as pebble moves on a `Blocked(b)` DAG.
pub fn lower_blocked_matmul_trace(
    n1: usize,
    d: usize,
    n2: usize,
    b: usize,
    budget: usize,
) -> Result<BlockedTrace, PebbleError> {
    if b == 0 || 4 * b * b > budget {
        return Err(PebbleError::InvalidInstance(format!(
            "block side {b} needs 4*B^2 <= M, but M = {budget}"
        )));
    }
    let dag = build_matmul_dag_shaped(n1, d, n2, SummationShape::Blocked(b))?;
    let mut low = Lowering {
        dag: &dag,
        moves: Vec::new(),
        uses_left: vec![0; dag.dag.len()],
    };
    for ri in block_spans(n1, b) {
        for cj in block_spans(n2, b) {
            for (kb, rk) in block_spans(d, b).enumerate() {
                for r in ri.clone() {
                    for k in rk.clone() {
                        let v = dag.a(r, k);
                        low.uses_left[v] = cj.len();
                        low.moves.push(Move::input(v));
                    }
                }
                for k in rk.clone() {
                    for c in cj.clone() {
                        let v = dag.b(k, c);
                        low.uses_left[v] = ri.len();
                        low.moves.push(Move::input(v));
                    }
                }
                for r in ri.clone() {
                    for c in cj.clone() {
                        let seg = dag.segments[r * n2 + c][kb];
                        low.eval(seg.root);
                        if kb > 0 {
                            let prev = dag.segments[r * n2 + c][kb - 1].chain;
                            low.moves.push(Move::compute(seg.chain));
                            low.moves.push(Move::delete(prev));
                            low.moves.push(Move::delete(seg.root));
                        }
                    }
                }
            }
            for r in ri.clone() {
                for c in cj.clone() {
                    let out = dag.output(r, c);
                    low.moves.push(Move::output(out));
                    low.moves.push(Move::delete(out));
                }
            }
        }
    }
    let moves = low.moves;
    Ok(BlockedTrace { dag, moves })
}

/// Runs the same blocked matmul on the cache simulator.
pub fn simulate_blocked_matmul(n1: usize, d: usize, n2: usize, b: usize, budget: usize) -> crate::error::Result<IoCounter> {
    let lhs = Matrix::zeros(n1, d);
    let rhs = Matrix::zeros(d, n2);
    let mut sim = CacheSim::new(budget);
    let names = MatmulNames { lhs: "A", rhs: "B", out: "C" };
    tiled_matmul(&mut sim, View::Plain(&lhs), View::Plain(&rhs), b, names)?;
    Ok(sim.snapshot())
}
