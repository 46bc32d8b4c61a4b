//! Communication topologies and the doubly-stochastic mixing matrix.
//!
//! Nodes talk over a connected undirected graph. Each consensus step mixes the
//! received messages with the Laplacian rule
//!
//! ```text
//! W = I - 2 / (3 λ_max(L)) · L,     L = D - A
//! ```
//!
//! which is symmetric, doubly stochastic and entrywise nonnegative for every
//! connected graph (the diagonal satisfies `1 - 2 d_i / (3 λ_max) > 0` because
//! `λ_max ≥ d_max + 1`). Its spectrum lies in `[1/3, 1]`, so the mixing
//! parameter `β = max(|λ₂(W)|, |λ_N(W)|)` is always `1 - 2 λ₂(L) / (3 λ_max(L))`.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng;

/// Power iteration relative tolerance on successive eigenvalue estimates.
pub const POWER_ITERATION_TOL: f64 = 1e-10;
/// Power iteration cap.
pub const POWER_ITERATION_MAX_ITERS: usize = 10_000;
const POWER_ITERATION_SEED: u64 = 0x0070_6f77_6572;
/// Resampling cap for connected Erdős–Rényi draws.
pub const MAX_CONNECTIVITY_ATTEMPTS: u64 = 10_000;
/// Mixing matrices with `β` at or above `1 - MIXING_TOL` do not mix.
pub const MIXING_TOL: f64 = 1e-9;
/// Weight entries closer than this to zero are stored as exactly zero.
pub const ZERO_CLAMP: f64 = 1e-15;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("invalid graph parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },
    #[error("edge ({0}, {1}) is out of range or a self loop")]
    InvalidEdge(usize, usize),
    #[error("graph on {n} nodes is disconnected ({components} components)")]
    Disconnected { n: usize, components: usize },
    #[error(
        "no connected Erdős–Rényi sample after {attempts} attempts \
         (n = {n}, p_c = {p_c}); the edge probability is too small for this many nodes"
    )]
    ConnectivityExhausted { n: usize, p_c: f64, attempts: u64 },
    #[error("mixing matrix is disconnected or periodic: beta = {beta}")]
    NotMixing { beta: f64 },
    #[error("weight matrix is not square and symmetric")]
    NotSymmetric,
}

/// Symmetric adjacency relation with an empty diagonal.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Adjacency {
    n: usize,
    bits: Vec<bool>,
}

impl Adjacency {
    pub fn empty(n: usize) -> Self {
        Self {
            n,
            bits: vec![false; n * n],
        }
    }

    pub fn from_edges(n: usize, edges: &[(usize, usize)]) -> Result<Self, GraphError> {
        let mut adj = Self::empty(n);
        for &(i, j) in edges {
            adj.insert(i, j)?;
        }
        Ok(adj)
    }

    pub fn insert(&mut self, i: usize, j: usize) -> Result<(), GraphError> {
        if i >= self.n || j >= self.n || i == j {
            return Err(GraphError::InvalidEdge(i, j));
        }
        self.bits[i * self.n + j] = true;
        self.bits[j * self.n + i] = true;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    #[inline]
    pub fn contains(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.n + j]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.bits[i * self.n..(i + 1) * self.n]
            .iter()
            .filter(|&&b| b)
            .count()
    }

    pub fn neighbors(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.n).filter(move |&j| self.contains(i, j))
    }

    /// Unordered edges `(i, j)` with `i < j`, in row-major order.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        (0..self.n)
            .flat_map(|i| ((i + 1)..self.n).map(move |j| (i, j)))
            .filter(|&(i, j)| self.contains(i, j))
            .collect()
    }

    pub fn edge_count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count() / 2
    }

    /// Number of connected components (BFS).
    pub fn components(&self) -> usize {
        let mut seen = vec![false; self.n];
        let mut count = 0;
        let mut queue = VecDeque::new();
        for start in 0..self.n {
            if seen[start] {
                continue;
            }
            count += 1;
            seen[start] = true;
            queue.push_back(start);
            while let Some(u) = queue.pop_front() {
                for v in self.neighbors(u) {
                    if !seen[v] {
                        seen[v] = true;
                        queue.push_back(v);
                    }
                }
            }
        }
        count
    }

    pub fn is_connected(&self) -> bool {
        self.n > 0 && self.components() == 1
    }

    /// Combinatorial Laplacian `D - A`.
    pub fn laplacian(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.n, self.n, |i, j| {
            if i == j {
                self.degree(i) as f64
            } else if self.contains(i, j) {
                -1.0
            } else {
                0.0
            }
        })
    }
}

/// A connected communication graph together with its mixing matrix.
///
/// Serializes as `{n, edges, seed}`; the mixing matrix and `β` are recomputed
/// on load.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "GraphDoc", into = "GraphDoc")]
pub struct CommGraph {
    adjacency: Adjacency,
    weights: DMatrix<f64>,
    beta: f64,
    seed: u64,
}

impl CommGraph {
    /// Builds a graph from an explicit edge list. Fails when disconnected.
    pub fn from_edges(n: usize, edges: &[(usize, usize)], seed: u64) -> Result<Self, GraphError> {
        if n == 0 {
            return Err(GraphError::InvalidParameter {
                name: "n",
                reason: "must be at least 1".into(),
            });
        }
        Self::from_adjacency(Adjacency::from_edges(n, edges)?, seed)
    }

    pub fn from_adjacency(adjacency: Adjacency, seed: u64) -> Result<Self, GraphError> {
        let weights = mixing_matrix(&adjacency)?;
        let beta = spectral_gap(&weights)?;
        Ok(Self {
            adjacency,
            weights,
            beta,
            seed,
        })
    }

    /// The complete graph `K_n`.
    pub fn complete(n: usize) -> Result<Self, GraphError> {
        let edges: Vec<_> = (0..n)
            .flat_map(|i| ((i + 1)..n).map(move |j| (i, j)))
            .collect();
        Self::from_edges(n, &edges, 0)
    }

    /// The path `0 - 1 - ... - (n-1)`.
    pub fn path(n: usize) -> Result<Self, GraphError> {
        let edges: Vec<_> = (1..n).map(|i| (i - 1, i)).collect();
        Self::from_edges(n, &edges, 0)
    }

    pub fn n_nodes(&self) -> usize {
        self.adjacency.len()
    }

    pub fn adjacency(&self) -> &Adjacency {
        &self.adjacency
    }

    pub fn weights(&self) -> &DMatrix<f64> {
        &self.weights
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("graph documents always serialize")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}

/// Serialized form of a [`CommGraph`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphDoc {
    pub n: usize,
    pub edges: Vec<[usize; 2]>,
    pub seed: u64,
}

impl From<CommGraph> for GraphDoc {
    fn from(g: CommGraph) -> Self {
        GraphDoc {
            n: g.n_nodes(),
            edges: g
                .adjacency
                .edges()
                .into_iter()
                .map(|(i, j)| [i, j])
                .collect(),
            seed: g.seed,
        }
    }
}

impl TryFrom<GraphDoc> for CommGraph {
    type Error = GraphError;

    fn try_from(doc: GraphDoc) -> Result<Self, Self::Error> {
        let edges: Vec<_> = doc.edges.iter().map(|e| (e[0], e[1])).collect();
        CommGraph::from_edges(doc.n, &edges, doc.seed)
    }
}

/// Samples a connected `G(n, p_c)` graph.
///
/// Each unordered pair is included independently with probability `p_c`.
/// Disconnected samples are rejected; attempt `k` reads ChaCha stream `k` of
/// `seed`, so the result is a pure function of `(n, p_c, seed)` and follows
/// the Erdős–Rényi law conditioned on connectivity.
pub fn gen_erdos_renyi(n: usize, p_c: f64, seed: u64) -> Result<CommGraph, GraphError> {
    if n < 2 {
        return Err(GraphError::InvalidParameter {
            name: "n",
            reason: format!("need at least 2 nodes, got {n}"),
        });
    }
    if !(p_c > 0.0 && p_c <= 1.0) {
        return Err(GraphError::InvalidParameter {
            name: "p_c",
            reason: format!("edge probability must lie in (0, 1], got {p_c}"),
        });
    }
    for attempt in 0..MAX_CONNECTIVITY_ATTEMPTS {
        let mut rng = rng::substream(seed, attempt);
        let mut adj = Adjacency::empty(n);
        for i in 0..n {
            for j in (i + 1)..n {
                if rng.random::<f64>() < p_c {
                    adj.insert(i, j)?;
                }
            }
        }
        if adj.is_connected() {
            return CommGraph::from_adjacency(adj, seed);
        }
    }
    Err(GraphError::ConnectivityExhausted {
        n,
        p_c,
        attempts: MAX_CONNECTIVITY_ATTEMPTS,
    })
}

/// Largest eigenvalue of a symmetric positive semidefinite matrix by power
/// iteration.
///
/// The start vector is a Gaussian draw from a fixed stream rather than the
/// all-ones vector: `𝟙` spans the kernel of every Laplacian, so starting there
/// would return zero. Arithmetic sequences are no better, since graph
/// symmetries produce eigenvectors with `±1` patterns that such sequences
/// can be exactly orthogonal to.
pub fn largest_eigenvalue_psd(m: &DMatrix<f64>) -> f64 {
    let n = m.nrows();
    if n == 0 {
        return 0.0;
    }
    let mut start = rng::stream(POWER_ITERATION_SEED);
    let mut v = DVector::from_fn(n, |_, _| rng::standard_normal(&mut start));
    v.normalize_mut();
    let mut lambda = 0.0;
    for _ in 0..POWER_ITERATION_MAX_ITERS {
        let w = m * &v;
        let next = v.dot(&w);
        let norm = w.norm();
        if norm == 0.0 {
            return 0.0;
        }
        v = w / norm;
        if (next - lambda).abs() <= POWER_ITERATION_TOL * next.abs() {
            return next;
        }
        lambda = next;
    }
    lambda
}

/// The Laplacian mixing rule `W = I - 2 / (3 λ_max(L)) L`.
///
/// A single isolated node mixes with itself (`W = [1]`).
pub fn mixing_matrix(adjacency: &Adjacency) -> Result<DMatrix<f64>, GraphError> {
    let n = adjacency.len();
    if !adjacency.is_connected() {
        return Err(GraphError::Disconnected {
            n,
            components: adjacency.components(),
        });
    }
    if n == 1 {
        return Ok(DMatrix::identity(1, 1));
    }
    let lap = adjacency.laplacian();
    let lambda_max = largest_eigenvalue_psd(&lap);
    let scale = 2.0 / (3.0 * lambda_max);
    let mut w = DMatrix::identity(n, n) - lap * scale;
    w.iter_mut().for_each(|x| {
        if x.abs() < ZERO_CLAMP {
            *x = 0.0;
        }
    });
    Ok(w)
}

/// Eigenvalues of a symmetric matrix, sorted descending.
pub fn sorted_eigenvalues(weights: &DMatrix<f64>) -> Vec<f64> {
    let eig = SymmetricEigen::new(weights.clone());
    let mut vals: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    vals.sort_by(|a, b| b.total_cmp(a));
    vals
}

/// `β = max(|λ₂(W)|, |λ_N(W)|)` from a dense symmetric eigendecomposition.
///
/// Returns [`GraphError::NotMixing`] (carrying the computed value) when
/// `β ≥ 1 - 1e-9`, which happens exactly for disconnected or periodic `W`.
pub fn spectral_gap(weights: &DMatrix<f64>) -> Result<f64, GraphError> {
    let n = weights.nrows();
    if n != weights.ncols() || (weights - weights.transpose()).amax() > 1e-12 {
        return Err(GraphError::NotSymmetric);
    }
    if n == 1 {
        return Ok(0.0);
    }
    let vals = sorted_eigenvalues(weights);
    let beta = vals[1].abs().max(vals[n - 1].abs());
    if beta >= 1.0 - MIXING_TOL {
        return Err(GraphError::NotMixing { beta });
    }
    Ok(beta)
}
