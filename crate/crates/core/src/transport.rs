//! Commodity allocation over a directed transport network.
//!
//! Supplier `i` ships `x_ijkr`, the amount of commodity `k` sent to demander
//! `j` along its `r`-th path. Its local variables are ordered by `j`, then
//! `k`, then `r`. Every edge carries a congestion cost `c0 · q_e` per unit,
//! where `q_e` is the total flow on the edge, plus a private per-unit cost
//! `c_ie` for the supplier using it.

use std::collections::BTreeSet;
use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::problem::{AgentSpec, CoupledProblem, Polyhedron, ProblemError, Quadratic, assemble_problem};

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("invalid network: {0}")]
    InvalidNetwork(String),
    #[error("demander {demander} has positive demand but no supplier can reach it")]
    NoPathExists { demander: usize },
    #[error("supplier {0} has no path to any demander")]
    IsolatedSupplier(usize),
    #[error(transparent)]
    Problem(#[from] ProblemError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Supplier {
    pub node: usize,
    /// Private cost per unit of flow on each edge, indexed like `edges`.
    pub edge_costs: Vec<f64>,
    /// Stock per commodity. Defaults to the total demand of that commodity.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inventory: Option<Vec<f64>>,
    /// Shipping capacity towards each demander. Unlimited when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub capacity: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Demander {
    pub node: usize,
    /// Required amount per commodity.
    pub demand: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransportNetwork {
    pub n_nodes: usize,
    /// Directed edges `(from, to)`.
    pub edges: Vec<(usize, usize)>,
    pub n_commodities: usize,
    pub c0: f64,
    pub suppliers: Vec<Supplier>,
    pub demanders: Vec<Demander>,
}

impl TransportNetwork {
    pub fn validate(&self) -> Result<(), TransportError> {
        let bad = |msg: String| Err(TransportError::InvalidNetwork(msg));
        let k = self.n_commodities;
        if k == 0 {
            return bad("at least one commodity is required".into());
        }
        if !(self.c0.is_finite() && self.c0 >= 0.0) {
            return bad(format!("congestion coefficient {} must be nonnegative", self.c0));
        }
        if self.suppliers.is_empty() || self.demanders.is_empty() {
            return bad("need at least one supplier and one demander".into());
        }
        for (e, &(a, b)) in self.edges.iter().enumerate() {
            if a >= self.n_nodes || b >= self.n_nodes || a == b {
                return bad(format!("edge {e} ({a}, {b}) is not a valid arc"));
            }
        }
        let nonneg = |v: &[f64]| v.iter().all(|x| x.is_finite() && *x >= 0.0);
        for (i, s) in self.suppliers.iter().enumerate() {
            if s.node >= self.n_nodes {
                return bad(format!("supplier {i} sits on unknown node {}", s.node));
            }
            if s.edge_costs.len() != self.edges.len() || !nonneg(&s.edge_costs) {
                return bad(format!(
                    "supplier {i} needs {} nonnegative edge costs",
                    self.edges.len()
                ));
            }
            if let Some(inv) = &s.inventory {
                if inv.len() != k || !nonneg(inv) {
                    return bad(format!("supplier {i} needs {k} nonnegative inventories"));
                }
            }
            if let Some(cap) = &s.capacity {
                if cap.len() != self.demanders.len() || !nonneg(cap) {
                    return bad(format!(
                        "supplier {i} needs {} nonnegative capacities",
                        self.demanders.len()
                    ));
                }
            }
        }
        for (j, dm) in self.demanders.iter().enumerate() {
            if dm.node >= self.n_nodes {
                return bad(format!("demander {j} sits on unknown node {}", dm.node));
            }
            if dm.demand.len() != k || !nonneg(&dm.demand) {
                return bad(format!("demander {j} needs {k} nonnegative demands"));
            }
        }
        Ok(())
    }

    pub fn total_demand(&self, k: usize) -> f64 {
        self.demanders.iter().map(|d| d.demand[k]).sum()
    }

    fn inventory(&self, i: usize, k: usize) -> f64 {
        match &self.suppliers[i].inventory {
            Some(inv) => inv[k],
            None => self.total_demand(k),
        }
    }
}

/// Candidate paths per (supplier, demander) pair, as edge index sequences.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PathSet {
    /// `paths[i][j]` lists the paths from supplier `i` to demander `j`.
    pub paths: Vec<Vec<Vec<Vec<usize>>>>,
}

impl PathSet {
    pub fn n_paths(&self, i: usize, j: usize) -> usize {
        self.paths[i][j].len()
    }
}

/// The `r` shortest simple paths (by edge count, ties broken by comparing
/// the edge index sequences) of at most `max_len` edges for every pair.
pub fn enumerate_paths(
    net: &TransportNetwork,
    r: usize,
    max_len: usize,
) -> Result<PathSet, TransportError> {
    net.validate()?;
    if r == 0 {
        return Err(TransportError::InvalidNetwork("R must be at least 1".into()));
    }
    let mut out_edges = vec![Vec::new(); net.n_nodes];
    for (e, &(a, _)) in net.edges.iter().enumerate() {
        out_edges[a].push(e);
    }
    let paths: Vec<Vec<Vec<Vec<usize>>>> = net
        .suppliers
        .iter()
        .map(|s| {
            net.demanders
                .iter()
                .map(|dm| shortest_simple_paths(net, &out_edges, s.node, dm.node, r, max_len))
                .collect()
        })
        .collect();
    for (j, dm) in net.demanders.iter().enumerate() {
        let reachable = paths.iter().any(|per_i| !per_i[j].is_empty());
        if !reachable && dm.demand.iter().any(|&v| v > 0.0) {
            return Err(TransportError::NoPathExists { demander: j });
        }
    }
    Ok(PathSet { paths })
}

fn shortest_simple_paths(
    net: &TransportNetwork,
    out_edges: &[Vec<usize>],
    from: usize,
    to: usize,
    r: usize,
    max_len: usize,
) -> Vec<Vec<usize>> {
    let mut found = Vec::new();
    if from == to {
        return found;
    }
    // Iterative deepening: depth-first search visits edges in index order, so
    // paths of one length come out lexicographically sorted.
    for len in 1..=max_len.min(net.n_nodes.saturating_sub(1)) {
        let mut stack = Vec::with_capacity(len);
        let mut visited = vec![false; net.n_nodes];
        visited[from] = true;
        dfs_exact(net, out_edges, from, to, len, &mut stack, &mut visited, &mut found, r);
        if found.len() >= r {
            break;
        }
    }
    found.truncate(r);
    found
}

#[allow(clippy::too_many_arguments)]
fn dfs_exact(
    net: &TransportNetwork,
    out_edges: &[Vec<usize>],
    node: usize,
    to: usize,
    remaining: usize,
    stack: &mut Vec<usize>,
    visited: &mut [bool],
    found: &mut Vec<Vec<usize>>,
    r: usize,
) {
    if found.len() >= r {
        return;
    }
    for &e in &out_edges[node] {
        let next = net.edges[e].1;
        if visited[next] {
            continue;
        }
        if remaining == 1 {
            if next == to {
                stack.push(e);
                found.push(stack.clone());
                stack.pop();
                if found.len() >= r {
                    return;
                }
            }
            continue;
        }
        if next == to {
            continue;
        }
        visited[next] = true;
        stack.push(e);
        dfs_exact(net, out_edges, next, to, remaining - 1, stack, visited, found, r);
        stack.pop();
        visited[next] = false;
    }
}

/// Identifies one local variable `x_ijkr`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlowVar {
    pub demander: usize,
    pub commodity: usize,
    pub path: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IncidenceData {
    /// Original indices of the edges used by at least one path; rows of `q`.
    pub used_edges: Vec<usize>,
    /// `Q_i`: edge loads produced by supplier `i`'s local variables.
    pub q: Vec<DMatrix<f64>>,
    /// `κ_{i,e}` on the used edges.
    pub kappa: Vec<DVector<f64>>,
    /// Local variable layout per supplier.
    pub layout: Vec<Vec<FlowVar>>,
}

impl IncidenceData {
    /// `[Q_1 … Q_N]`.
    pub fn q_total(&self) -> DMatrix<f64> {
        let rows = self.used_edges.len();
        let cols: usize = self.q.iter().map(|q| q.ncols()).sum();
        let mut out = DMatrix::zeros(rows, cols);
        let mut c = 0;
        for q in &self.q {
            out.view_mut((0, c), (rows, q.ncols())).copy_from(q);
            c += q.ncols();
        }
        out
    }

    /// Private cost vector of supplier `i` restricted to the used edges.
    pub fn used_costs(&self, net: &TransportNetwork, i: usize) -> DVector<f64> {
        DVector::from_iterator(
            self.used_edges.len(),
            self.used_edges.iter().map(|&e| net.suppliers[i].edge_costs[e]),
        )
    }

    /// Writes `Q_i` nonzeros and `κ` as CSV rows `kind,supplier,edge,column,value`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), TransportError> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["kind", "supplier", "edge", "column", "value"])?;
        for (i, q) in self.q.iter().enumerate() {
            for (row, &e) in self.used_edges.iter().enumerate() {
                for col in 0..q.ncols() {
                    if q[(row, col)] != 0.0 {
                        wtr.write_record([
                            "q".to_string(),
                            i.to_string(),
                            e.to_string(),
                            col.to_string(),
                            q[(row, col)].to_string(),
                        ])?;
                    }
                }
                wtr.write_record([
                    "kappa".to_string(),
                    i.to_string(),
                    e.to_string(),
                    String::new(),
                    self.kappa[i][row].to_string(),
                ])?;
            }
        }
        wtr.flush()?;
        Ok(())
    }
}

pub fn build_incidence(net: &TransportNetwork, paths: &PathSet) -> IncidenceData {
    let n_sup = net.suppliers.len();
    let k = net.n_commodities;
    let used: BTreeSet<usize> = paths
        .paths
        .iter()
        .flatten()
        .flatten()
        .flatten()
        .copied()
        .collect();
    let used_edges: Vec<usize> = used.into_iter().collect();
    let row_of = |e: usize| used_edges.binary_search(&e).expect("edge is in use");

    let mut layout = Vec::with_capacity(n_sup);
    let mut q = Vec::with_capacity(n_sup);
    for i in 0..n_sup {
        let mut vars = Vec::new();
        for j in 0..net.demanders.len() {
            for commodity in 0..k {
                for path in 0..paths.n_paths(i, j) {
                    vars.push(FlowVar {
                        demander: j,
                        commodity,
                        path,
                    });
                }
            }
        }
        let mut qi = DMatrix::zeros(used_edges.len(), vars.len());
        for (col, v) in vars.iter().enumerate() {
            for &e in &paths.paths[i][v.demander][v.path] {
                qi[(row_of(e), col)] = 1.0;
            }
        }
        layout.push(vars);
        q.push(qi);
    }

    // Path counts through each edge; the commodity multiplicity is the same
    // for every supplier and cancels in the ratio.
    let counts: Vec<DVector<f64>> = (0..n_sup)
        .map(|i| {
            let mut c = DVector::zeros(used_edges.len());
            for per_j in &paths.paths[i] {
                for path in per_j {
                    for &e in path {
                        c[row_of(e)] += 1.0;
                    }
                }
            }
            c
        })
        .collect();
    let totals = counts
        .iter()
        .fold(DVector::zeros(used_edges.len()), |acc, c| acc + c);
    let kappa = counts
        .iter()
        .map(|c| c.component_div(&totals))
        .collect();
    IncidenceData {
        used_edges,
        q,
        kappa,
        layout,
    }
}

/// Builds the coupled problem: one equality row per (demander, commodity),
/// local sets from nonnegativity, inventories and pair capacities, the
/// κ-weighted convex objectives for the solver and the actual cost split
/// for the mechanisms.
pub fn to_coupled_problem(
    net: &TransportNetwork,
    paths: &PathSet,
    inc: &IncidenceData,
) -> Result<CoupledProblem, TransportError> {
    net.validate()?;
    let n_sup = net.suppliers.len();
    let n_dem = net.demanders.len();
    let k = net.n_commodities;
    let n0 = n_dem * k;
    for (i, vars) in inc.layout.iter().enumerate() {
        let expected: usize = (0..n_dem).map(|j| paths.n_paths(i, j) * k).sum();
        if vars.len() != expected {
            return Err(TransportError::InvalidNetwork(format!(
                "incidence of supplier {i} does not match its paths"
            )));
        }
        if vars.is_empty() {
            return Err(TransportError::IsolatedSupplier(i));
        }
    }
    let dims: Vec<usize> = inc.layout.iter().map(|v| v.len()).collect();
    let n: usize = dims.iter().sum();
    let mut offsets = Vec::with_capacity(n_sup);
    let mut acc = 0;
    for &di in &dims {
        offsets.push(acc);
        acc += di;
    }
    let q_tot = inc.q_total();
    let d = DVector::from_fn(n0, |row, _| net.demanders[row / k].demand[row % k]);

    let mut agents = Vec::with_capacity(n_sup);
    for i in 0..n_sup {
        let vars = &inc.layout[i];
        let di = dims[i];

        let mut a = DMatrix::zeros(n0, di);
        for (col, v) in vars.iter().enumerate() {
            a[(v.demander * k + v.commodity, col)] = 1.0;
        }

        let cap_rows = if net.suppliers[i].capacity.is_some() { n_dem } else { 0 };
        let rows = di + k + cap_rows;
        let mut b = DMatrix::zeros(rows, di);
        let mut m = DVector::zeros(rows);
        for col in 0..di {
            b[(col, col)] = -1.0;
        }
        for commodity in 0..k {
            m[di + commodity] = net.inventory(i, commodity);
        }
        for (col, v) in vars.iter().enumerate() {
            b[(di + v.commodity, col)] = 1.0;
            if cap_rows > 0 {
                b[(di + k + v.demander, col)] = 1.0;
            }
        }
        if let Some(cap) = &net.suppliers[i].capacity {
            for j in 0..n_dem {
                m[di + k + j] = cap[j];
            }
        }

        let mut linear = DVector::zeros(n);
        linear
            .rows_mut(offsets[i], di)
            .copy_from(&(inc.q[i].transpose() * inc.used_costs(net, i)));

        // ∑_e c0 κ_ie q_e² for the solver.
        let mut weighted = q_tot.clone();
        for (row, mut r) in weighted.row_iter_mut().enumerate() {
            r *= inc.kappa[i][row];
        }
        let alg_h = q_tot.tr_mul(&weighted) * (2.0 * net.c0);

        // ∑_e c0 q_e q_ie for the agent's own bill.
        let mut own = DMatrix::zeros(q_tot.nrows(), n);
        own.view_mut((0, offsets[i]), (q_tot.nrows(), di))
            .copy_from(&inc.q[i]);
        let cross = q_tot.tr_mul(&own);
        let act_h = (&cross + cross.transpose()) * net.c0;

        agents.push(AgentSpec {
            objective: Quadratic::new(alg_h, linear.clone()),
            actual: Some(Quadratic::new(act_h, linear)),
            coupling: a,
            local: Polyhedron::new(b, m),
        });
    }
    Ok(assemble_problem(agents, d)?)
}

/// Network, paths, incidence and assembled problem in one place.
#[derive(Debug, Clone)]
pub struct TransportInstance {
    pub network: TransportNetwork,
    pub paths: PathSet,
    pub incidence: IncidenceData,
    pub problem: CoupledProblem,
}

impl TransportInstance {
    pub fn build(network: TransportNetwork, r: usize, max_len: usize) -> Result<Self, TransportError> {
        let paths = enumerate_paths(&network, r, max_len)?;
        let incidence = build_incidence(&network, &paths);
        let problem = to_coupled_problem(&network, &paths, &incidence)?;
        Ok(Self {
            network,
            paths,
            incidence,
            problem,
        })
    }

    /// Edge-level cost sensitivity: a shift `δ` of supplier `i`'s private
    /// edge costs moves its linear term by `Q_iᵀ δ`.
    pub fn edge_cost_maps(&self) -> Vec<DMatrix<f64>> {
        self.incidence.q.iter().map(|q| q.transpose()).collect()
    }
}

/// Star network: supplier `i` owns spoke `e_i` into a hub, and one shared
/// edge leads from the hub to the single demander. Each supplier's full
/// path cost sits on its spoke.
pub fn star_network(path_costs: &[f64], c0: f64, d: f64) -> TransportNetwork {
    let n = path_costs.len();
    let edge_costs = |i: usize| {
        let mut c = vec![0.0; n + 1];
        c[i] = path_costs[i];
        c
    };
    star_with_edge_costs((0..n).map(edge_costs).collect(), c0, d)
}

/// Star network with explicit per-edge cost vectors (spokes first, then the
/// shared edge).
pub fn star_with_edge_costs(edge_costs: Vec<Vec<f64>>, c0: f64, d: f64) -> TransportNetwork {
    let n = edge_costs.len();
    let hub = n;
    let sink = n + 1;
    let mut edges: Vec<(usize, usize)> = (0..n).map(|i| (i, hub)).collect();
    edges.push((hub, sink));
    TransportNetwork {
        n_nodes: n + 2,
        edges,
        n_commodities: 1,
        c0,
        suppliers: edge_costs
            .into_iter()
            .enumerate()
            .map(|(i, c)| Supplier {
                node: i,
                edge_costs: c,
                inventory: None,
                capacity: None,
            })
            .collect(),
        demanders: vec![Demander {
            node: sink,
            demand: vec![d],
        }],
    }
}

/// The three-supplier star with edge costs (1,0,0,1), (0,2,0,1), (0,0,3,1),
/// `c0 = 1` and demand 5.
pub fn three_supplier_star() -> TransportNetwork {
    star_with_edge_costs(
        vec![
            vec![1.0, 0.0, 0.0, 1.0],
            vec![0.0, 2.0, 0.0, 1.0],
            vec![0.0, 0.0, 3.0, 1.0],
        ],
        1.0,
        5.0,
    )
}

/// Scale of a generated instance: suppliers, demanders, commodities, paths.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scale {
    pub n: usize,
    pub m: usize,
    pub k: usize,
    pub r: usize,
}

/// Seeded balanced instance. Suppliers connect to `r` hubs, every hub
/// connects to every demander, so each pair has exactly `r` two-edge paths
/// and no supplier enjoys a shorter route. Hub-to-demander edges are shared
/// by all suppliers.
pub fn generate_balanced(scale: Scale, seed: u64) -> Result<TransportNetwork, TransportError> {
    let Scale { n, m, k, r } = scale;
    if n == 0 || m == 0 || k == 0 || r == 0 {
        return Err(TransportError::InvalidNetwork(
            "scale entries must be positive".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let hub0 = n;
    let dem0 = n + r;
    let mut edges = Vec::with_capacity(n * r + r * m);
    for i in 0..n {
        for h in 0..r {
            edges.push((i, hub0 + h));
        }
    }
    for h in 0..r {
        for j in 0..m {
            edges.push((hub0 + h, dem0 + j));
        }
    }
    let demanders: Vec<Demander> = (0..m)
        .map(|j| Demander {
            node: dem0 + j,
            demand: (0..k).map(|_| round3(rng.gen_range(1.0..5.0))).collect(),
        })
        .collect();
    let share = (2.0 / n as f64).min(1.0);
    let total_k: Vec<f64> = (0..k)
        .map(|c| demanders.iter().map(|d| d.demand[c]).sum())
        .collect();
    let total_j: Vec<f64> = demanders.iter().map(|d| d.demand.iter().sum()).collect();
    let n_edges = edges.len();
    let suppliers = (0..n)
        .map(|i| Supplier {
            node: i,
            edge_costs: (0..n_edges).map(|_| round3(rng.gen_range(1.0..5.0))).collect(),
            inventory: Some(
                total_k
                    .iter()
                    .map(|t| round3(t * share * rng.gen_range(1.0..1.5)))
                    .collect(),
            ),
            capacity: Some(
                total_j
                    .iter()
                    .map(|t| round3(t * share * rng.gen_range(1.0..1.5)))
                    .collect(),
            ),
        })
        .collect();
    let net = TransportNetwork {
        n_nodes: n + r + m,
        edges,
        n_commodities: k,
        c0: 1.0,
        suppliers,
        demanders,
    };
    net.validate()?;
    Ok(net)
}

// Short decimals keep generated files readable and round-trip exactly.
fn round3(v: f64) -> f64 {
    (v * 1000.0).round() / 1000.0
}
