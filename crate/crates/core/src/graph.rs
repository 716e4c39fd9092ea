//! Undirected communication graph between agents and the consensus weight
//! matrix used to mix neighbour estimates.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Row/column sum tolerance for double stochasticity.
pub const STOCHASTIC_TOL: f64 = 1e-12;
/// Tolerance on the smallest eigenvalue of `W`.
pub const PSD_TOL: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("invalid edge ({0}, {1}) for a graph with {2} agents")]
    InvalidEdge(usize, usize, usize),
    #[error("duplicate edge ({0}, {1})")]
    DuplicateEdge(usize, usize),
    #[error("communication graph is disconnected ({unreached} of {n} agents unreachable from agent 0)")]
    DisconnectedGraph { n: usize, unreached: usize },
    #[error("graph must have at least one agent")]
    Empty,
    #[error("dimension mismatch: expected {expected}x{expected}, got {rows}x{cols}")]
    DimensionMismatch {
        expected: usize,
        rows: usize,
        cols: usize,
    },
    #[error("weight matrix failed validation: {0}")]
    InvalidWeights(String),
}

/// Connected undirected graph on agents `0..n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GraphSpec", into = "GraphSpec")]
pub struct CommGraph {
    n: usize,
    edges: Vec<(usize, usize)>,
    neighbors: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct GraphSpec {
    n_agents: usize,
    edges: Vec<(usize, usize)>,
}

impl TryFrom<GraphSpec> for CommGraph {
    type Error = GraphError;
    fn try_from(spec: GraphSpec) -> Result<Self, Self::Error> {
        build_graph(spec.n_agents, &spec.edges)
    }
}

impl From<CommGraph> for GraphSpec {
    fn from(g: CommGraph) -> Self {
        GraphSpec {
            n_agents: g.n,
            edges: g.edges,
        }
    }
}

/// Builds and validates a communication graph. Edges are unordered; each
/// pair may appear only once.
pub fn build_graph(n_agents: usize, edges: &[(usize, usize)]) -> Result<CommGraph, GraphError> {
    if n_agents == 0 {
        return Err(GraphError::Empty);
    }
    let mut normalized = Vec::with_capacity(edges.len());
    for &(a, b) in edges {
        if a >= n_agents || b >= n_agents || a == b {
            return Err(GraphError::InvalidEdge(a, b, n_agents));
        }
        normalized.push((a.min(b), a.max(b)));
    }
    normalized.sort_unstable();
    for w in normalized.windows(2) {
        if w[0] == w[1] {
            return Err(GraphError::DuplicateEdge(w[0].0, w[0].1));
        }
    }
    let mut neighbors = vec![Vec::new(); n_agents];
    for &(a, b) in &normalized {
        neighbors[a].push(b);
        neighbors[b].push(a);
    }
    for nb in &mut neighbors {
        nb.sort_unstable();
    }
    let graph = CommGraph {
        n: n_agents,
        edges: normalized,
        neighbors,
    };
    let reached = graph.reachable_from(0);
    if reached < n_agents {
        return Err(GraphError::DisconnectedGraph {
            n: n_agents,
            unreached: n_agents - reached,
        });
    }
    Ok(graph)
}

impl CommGraph {
    pub fn n_agents(&self) -> usize {
        self.n
    }

    /// Edges as `(i, j)` with `i < j`, sorted.
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    /// Neighbours of `i` in ascending order (excluding `i`).
    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.neighbors[i].len()
    }

    pub fn degrees(&self) -> Vec<usize> {
        (0..self.n).map(|i| self.degree(i)).collect()
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.neighbors[i].binary_search(&j).is_ok()
    }

    fn reachable_from(&self, start: usize) -> usize {
        let mut seen = vec![false; self.n];
        let mut stack = vec![start];
        seen[start] = true;
        let mut count = 1;
        while let Some(u) = stack.pop() {
            for &v in &self.neighbors[u] {
                if !seen[v] {
                    seen[v] = true;
                    count += 1;
                    stack.push(v);
                }
            }
        }
        count
    }

    /// Complete graph `K_n`.
    pub fn complete(n: usize) -> Result<Self, GraphError> {
        let edges: Vec<_> = (0..n)
            .flat_map(|i| ((i + 1)..n).map(move |j| (i, j)))
            .collect();
        build_graph(n, &edges)
    }

    /// Path `0 - 1 - ... - (n-1)`.
    pub fn path(n: usize) -> Result<Self, GraphError> {
        let edges: Vec<_> = (1..n).map(|i| (i - 1, i)).collect();
        build_graph(n, &edges)
    }

    /// Cycle on `n >= 3` agents; falls back to a path for `n < 3`.
    pub fn ring(n: usize) -> Result<Self, GraphError> {
        if n < 3 {
            return Self::path(n);
        }
        let mut edges: Vec<_> = (1..n).map(|i| (i - 1, i)).collect();
        edges.push((0, n - 1));
        build_graph(n, &edges)
    }

    /// Erdős–Rényi draw with edge probability `p`, redrawn until connected.
    pub fn erdos_renyi<R: Rng>(n: usize, p: f64, rng: &mut R) -> Result<Self, GraphError> {
        if n == 1 {
            return build_graph(1, &[]);
        }
        let p = p.clamp(0.0, 1.0);
        for _ in 0..10_000 {
            let mut edges = Vec::new();
            for i in 0..n {
                for j in (i + 1)..n {
                    if rng.gen::<f64>() < p {
                        edges.push((i, j));
                    }
                }
            }
            match build_graph(n, &edges) {
                Ok(g) => return Ok(g),
                Err(GraphError::DisconnectedGraph { .. }) => continue,
                Err(e) => return Err(e),
            }
        }
        // p too small to ever connect; the complete graph is the limit.
        Self::complete(n)
    }

    /// Default edge probability `2 ln N / N` for generated instances.
    pub fn default_er_probability(n: usize) -> f64 {
        if n <= 2 {
            1.0
        } else {
            (2.0 * (n as f64).ln() / n as f64).min(1.0)
        }
    }

    /// Subgraph induced by removing agent `removed`, with agents relabelled
    /// to keep their relative order.
    pub fn without_agent(&self, removed: usize) -> Result<Self, GraphError> {
        let relabel = |a: usize| if a > removed { a - 1 } else { a };
        let edges: Vec<_> = self
            .edges
            .iter()
            .filter(|&&(a, b)| a != removed && b != removed)
            .map(|&(a, b)| (relabel(a), relabel(b)))
            .collect();
        build_graph(self.n - 1, &edges)
    }
}

/// Symmetric doubly stochastic PSD mixing matrix matched to a graph.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMatrix {
    w: DMatrix<f64>,
}

impl WeightMatrix {
    /// Accepts a custom matrix if it passes every check in [`validate_weights`].
    pub fn from_matrix(graph: &CommGraph, w: DMatrix<f64>) -> Result<Self, GraphError> {
        let report = validate_weights(graph, &w)?;
        if !report.all_passed() {
            return Err(GraphError::InvalidWeights(report.failures().join("; ")));
        }
        Ok(Self { w })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.w
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.w[(i, j)]
    }

    pub fn n(&self) -> usize {
        self.w.nrows()
    }

    /// Modulus of the second-largest eigenvalue; `< 1` on connected graphs.
    pub fn second_largest_modulus(&self) -> f64 {
        let eig = SymmetricEigen::new(self.w.clone());
        let mut mods: Vec<f64> = eig.eigenvalues.iter().map(|v| v.abs()).collect();
        mods.sort_by(|a, b| b.total_cmp(a));
        mods.get(1).copied().unwrap_or(0.0)
    }
}

/// Lazy Metropolis weights: `w_ij = 1 / (2 max(deg i, deg j))` on edges and
/// the diagonal takes the remaining row mass.
///
/// A variant with an extra `1/2` on every edge entry is not row
/// stochastic on any vertex of degree two or more, so the standard lazy rule
/// is used instead.
pub fn metropolis_weights(graph: &CommGraph) -> WeightMatrix {
    let n = graph.n_agents();
    let mut w = DMatrix::<f64>::zeros(n, n);
    for &(i, j) in graph.edges() {
        let wij = 1.0 / (2.0 * graph.degree(i).max(graph.degree(j)) as f64);
        w[(i, j)] = wij;
        w[(j, i)] = wij;
    }
    for i in 0..n {
        let off: f64 = graph.neighbors(i).iter().map(|&j| w[(i, j)]).sum();
        w[(i, i)] = 1.0 - off;
    }
    WeightMatrix { w }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightCheck {
    pub name: &'static str,
    pub passed: bool,
    /// Worst measured violation (0 when the check is exact).
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValidationReport {
    pub checks: Vec<WeightCheck>,
    pub min_eigenvalue: f64,
}

impl ValidationReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> Vec<String> {
        self.checks
            .iter()
            .filter(|c| !c.passed)
            .map(|c| format!("{} (residual {:.3e})", c.name, c.residual))
            .collect()
    }

    pub fn check(&self, name: &str) -> Option<&WeightCheck> {
        self.checks.iter().find(|c| c.name == name)
    }
}

pub const CHECK_SYMMETRIC: &str = "symmetric";
pub const CHECK_ROW_STOCHASTIC: &str = "row sums equal 1";
pub const CHECK_COL_STOCHASTIC: &str = "column sums equal 1";
pub const CHECK_NONNEGATIVE: &str = "nonnegative entries";
pub const CHECK_POSITIVE_DIAGONAL: &str = "positive diagonal";
pub const CHECK_SPARSITY: &str = "w_ij > 0 iff edge";
pub const CHECK_PSD: &str = "positive semidefinite";

/// Measures every consensus-weight condition against `graph`.
pub fn validate_weights(
    graph: &CommGraph,
    w: &DMatrix<f64>,
) -> Result<ValidationReport, GraphError> {
    let n = graph.n_agents();
    if w.nrows() != n || w.ncols() != n {
        return Err(GraphError::DimensionMismatch {
            expected: n,
            rows: w.nrows(),
            cols: w.ncols(),
        });
    }
    let mut checks = Vec::with_capacity(7);

    let sym = (w - w.transpose()).amax();
    checks.push(WeightCheck {
        name: CHECK_SYMMETRIC,
        passed: sym <= STOCHASTIC_TOL,
        residual: sym,
    });

    let row = (0..n)
        .map(|i| (w.row(i).sum() - 1.0).abs())
        .fold(0.0, f64::max);
    checks.push(WeightCheck {
        name: CHECK_ROW_STOCHASTIC,
        passed: row <= STOCHASTIC_TOL,
        residual: row,
    });
    let col = (0..n)
        .map(|j| (w.column(j).sum() - 1.0).abs())
        .fold(0.0, f64::max);
    checks.push(WeightCheck {
        name: CHECK_COL_STOCHASTIC,
        passed: col <= STOCHASTIC_TOL,
        residual: col,
    });

    let neg = w.iter().map(|&v| (-v).max(0.0)).fold(0.0, f64::max);
    checks.push(WeightCheck {
        name: CHECK_NONNEGATIVE,
        passed: neg == 0.0,
        residual: neg,
    });

    let diag = (0..n).map(|i| w[(i, i)]).fold(f64::INFINITY, f64::min);
    checks.push(WeightCheck {
        name: CHECK_POSITIVE_DIAGONAL,
        passed: diag > 0.0,
        residual: (-diag).max(0.0),
    });

    let mut pattern_residual = 0.0_f64;
    let mut pattern_ok = true;
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let edge = graph.has_edge(i, j);
            let v = w[(i, j)];
            if edge && v <= 0.0 {
                pattern_ok = false;
                pattern_residual = pattern_residual.max(1.0);
            } else if !edge && v != 0.0 {
                pattern_ok = false;
                pattern_residual = pattern_residual.max(v.abs());
            }
        }
    }
    checks.push(WeightCheck {
        name: CHECK_SPARSITY,
        passed: pattern_ok,
        residual: pattern_residual,
    });

    let sym_part = (w + w.transpose()) * 0.5;
    let min_eig = SymmetricEigen::new(sym_part)
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min);
    checks.push(WeightCheck {
        name: CHECK_PSD,
        passed: min_eig >= -PSD_TOL,
        residual: (-min_eig).max(0.0),
    });

    Ok(ValidationReport {
        checks,
        min_eigenvalue: min_eig,
    })
}
