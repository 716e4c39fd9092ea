//! Constraint-coupled quadratic problems.
//!
//! Every agent `i` owns a block `x_i` of the stacked decision vector, a local
//! polyhedron `B_i x_i ≤ m_i` and a quadratic cost over the *full* vector.
//! Agents are linked by `Σ A_i x_i = d`.
//!
//! Two objective sets are kept. The *algorithmic* set is what the distributed
//! solver minimizes (each member must be convex on its own); the *actual* set
//! is what each agent really pays and is used by the incentive mechanisms.
//! Both must add up to the same total cost.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::qp::{QpError, QpSettings, QpSpec, solve_qp};

const PSD_TOL: f64 = 1e-10;
const SYMMETRY_TOL: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProblemError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("objective is not convex: {context} has min eigenvalue {min_eigenvalue:.3e}")]
    NonConvexObjective { context: String, min_eigenvalue: f64 },
    #[error("local set of agent {0} is empty")]
    EmptyLocalSet(usize),
    #[error("local set of agent {0} is unbounded")]
    UnboundedLocalSet(usize),
    #[error("unknown agent {agent} (problem has {n_agents})")]
    UnknownAgent { agent: usize, n_agents: usize },
    #[error("objective sets disagree: {0}")]
    ObjectiveMismatch(String),
    #[error("problem has inequality coupling; convert it first")]
    InequalityCoupling,
    #[error("QP failure while checking the problem: {0}")]
    Qp(#[from] QpError),
}

/// `½ xᵀ H x + gᵀ x` over the full decision vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Quadratic {
    pub hessian: DMatrix<f64>,
    pub linear: DVector<f64>,
}

impl Quadratic {
    pub fn new(hessian: DMatrix<f64>, linear: DVector<f64>) -> Self {
        Self { hessian, linear }
    }

    pub fn zeros(n: usize) -> Self {
        Self {
            hessian: DMatrix::zeros(n, n),
            linear: DVector::zeros(n),
        }
    }

    pub fn dim(&self) -> usize {
        self.linear.len()
    }

    pub fn eval(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.hessian * x)) + self.linear.dot(x)
    }

    pub fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.hessian * x + &self.linear
    }

    /// Keeps the listed coordinates, in order.
    pub fn restrict(&self, keep: &[usize]) -> Self {
        Self {
            hessian: self.hessian.select_rows(keep).select_columns(keep),
            linear: self.linear.select_rows(keep),
        }
    }
}

/// `{ z : B z ≤ m }`
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Polyhedron {
    pub b: DMatrix<f64>,
    pub m: DVector<f64>,
}

impl Polyhedron {
    pub fn new(b: DMatrix<f64>, m: DVector<f64>) -> Self {
        Self { b, m }
    }

    /// `lo ≤ z ≤ hi` elementwise.
    pub fn boxed(lo: &DVector<f64>, hi: &DVector<f64>) -> Self {
        let n = lo.len();
        let mut b = DMatrix::zeros(2 * n, n);
        let mut m = DVector::zeros(2 * n);
        for j in 0..n {
            b[(j, j)] = -1.0;
            m[j] = -lo[j];
            b[(n + j, j)] = 1.0;
            m[n + j] = hi[j];
        }
        Self { b, m }
    }

    pub fn dim(&self) -> usize {
        self.b.ncols()
    }

    pub fn n_rows(&self) -> usize {
        self.b.nrows()
    }

    /// Largest componentwise violation `max(0, B z − m)`.
    pub fn violation(&self, z: &DVector<f64>) -> f64 {
        if self.n_rows() == 0 {
            return 0.0;
        }
        (&self.b * z - &self.m).iter().fold(0.0, |a, &v| a.max(v))
    }

    pub fn contains(&self, z: &DVector<f64>, tol: f64) -> bool {
        self.violation(z) <= tol
    }

    /// The minimum-norm point, or `None` when the set is empty.
    pub fn min_norm_point(&self) -> Result<Option<DVector<f64>>, QpError> {
        let n = self.dim();
        let spec = QpSpec::new(DMatrix::identity(n, n), DVector::zeros(n))
            .with_ineq(self.b.clone(), self.m.clone());
        match solve_qp(&spec, &QpSettings::default()) {
            Ok(sol) => Ok(Some(sol.x)),
            Err(QpError::Infeasible) => Ok(None),
            Err(e) => Err(e),
        }
    }

    /// Bounded iff the recession cone `{z : B z ≤ 0}` is trivial, i.e. `B`
    /// has full column rank and some strictly positive `y` has `Bᵀ y = 0`.
    pub fn is_bounded(&self) -> Result<bool, QpError> {
        let n = self.dim();
        let rows = self.n_rows();
        if n == 0 {
            return Ok(true);
        }
        if rows < n + 1 {
            return Ok(false);
        }
        let svd = self.b.clone().svd(false, false);
        let smax = svd.singular_values.max();
        let rank = svd
            .singular_values
            .iter()
            .filter(|&&s| s > 1e-10 * smax.max(1.0))
            .count();
        if rank < n {
            return Ok(false);
        }
        let scale = self.b.amax().max(1.0);
        let p = &self.b * self.b.transpose() / (scale * scale);
        let spec = QpSpec::new(p, DVector::zeros(rows))
            .with_ineq(-DMatrix::identity(rows, rows), -DVector::from_element(rows, 1.0));
        let sol = solve_qp(&spec, &QpSettings::default())?;
        let residual = (self.b.transpose() * &sol.x).amax() / scale;
        Ok(residual <= 1e-7 * sol.x.amax().max(1.0))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    #[default]
    Algorithmic,
    Actual,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Coupling {
    #[default]
    Equality,
    Inequality,
}

/// Input for one agent when assembling a problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentSpec {
    /// Objective over the full vector used by the solver.
    pub objective: Quadratic,
    /// The agent's actual cost; defaults to `objective` when absent.
    pub actual: Option<Quadratic>,
    /// Coupling block `A_i`, `n_0 × n_i`.
    pub coupling: DMatrix<f64>,
    pub local: Polyhedron,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoupledProblem {
    dims: Vec<usize>,
    offsets: Vec<usize>,
    coupling: Vec<DMatrix<f64>>,
    d: DVector<f64>,
    local: Vec<Polyhedron>,
    algorithmic: Vec<Quadratic>,
    actual: Vec<Quadratic>,
    kind: Coupling,
    strictly_convex: bool,
}

/// Validates and assembles an equality-coupled problem.
pub fn assemble_problem(
    agents: Vec<AgentSpec>,
    d: DVector<f64>,
) -> Result<CoupledProblem, ProblemError> {
    assemble_with_coupling(agents, d, Coupling::Equality)
}

/// Assembles a problem whose coupling reads `Σ A_i x_i ≤ d`.
pub fn assemble_inequality_problem(
    agents: Vec<AgentSpec>,
    d: DVector<f64>,
) -> Result<CoupledProblem, ProblemError> {
    assemble_with_coupling(agents, d, Coupling::Inequality)
}

fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    SymmetricEigen::new(m.clone())
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

fn check_symmetric(h: &DMatrix<f64>, context: &str) -> Result<(), ProblemError> {
    let asym = if h.is_empty() {
        0.0
    } else {
        (h - h.transpose()).amax()
    };
    if asym > SYMMETRY_TOL * h.amax().max(1.0) {
        return Err(ProblemError::DimensionMismatch(format!(
            "{context} Hessian is not symmetric (asymmetry {asym:.3e})"
        )));
    }
    Ok(())
}

fn assemble_with_coupling(
    agents: Vec<AgentSpec>,
    d: DVector<f64>,
    kind: Coupling,
) -> Result<CoupledProblem, ProblemError> {
    if agents.is_empty() {
        return Err(ProblemError::DimensionMismatch("no agents".into()));
    }
    let n0 = d.len();
    let dims: Vec<usize> = agents.iter().map(|a| a.coupling.ncols()).collect();
    let mut offsets = Vec::with_capacity(dims.len());
    let mut n = 0;
    for &di in &dims {
        offsets.push(n);
        n += di;
    }
    let mut coupling = Vec::with_capacity(agents.len());
    let mut local = Vec::with_capacity(agents.len());
    let mut algorithmic = Vec::with_capacity(agents.len());
    let mut actual = Vec::with_capacity(agents.len());
    for (i, a) in agents.into_iter().enumerate() {
        if a.coupling.nrows() != n0 {
            return Err(ProblemError::DimensionMismatch(format!(
                "A_{i} has {} rows, d has {n0}",
                a.coupling.nrows()
            )));
        }
        if a.local.dim() != dims[i] || a.local.m.len() != a.local.n_rows() {
            return Err(ProblemError::DimensionMismatch(format!(
                "local set of agent {i} is {}x{} with {} bounds, expected {} columns",
                a.local.n_rows(),
                a.local.dim(),
                a.local.m.len(),
                dims[i]
            )));
        }
        let act = a.actual.unwrap_or_else(|| a.objective.clone());
        for (q, what) in [(&a.objective, "objective"), (&act, "actual cost")] {
            if q.hessian.nrows() != n || q.hessian.ncols() != n || q.linear.len() != n {
                return Err(ProblemError::DimensionMismatch(format!(
                    "{what} of agent {i} is not over the full {n}-vector"
                )));
            }
            check_symmetric(&q.hessian, &format!("{what} of agent {i}"))?;
        }
        let ev = min_eigenvalue(&a.objective.hessian);
        if ev < -PSD_TOL * a.objective.hessian.amax().max(1.0) {
            return Err(ProblemError::NonConvexObjective {
                context: format!("objective of agent {i}"),
                min_eigenvalue: ev,
            });
        }
        coupling.push(a.coupling);
        local.push(a.local);
        algorithmic.push(a.objective);
        actual.push(act);
    }

    let total_alg = sum_quadratics(&algorithmic, n);
    let total_act = sum_quadratics(&actual, n);
    let scale = total_alg.hessian.amax().max(total_alg.linear.amax()).max(1.0);
    let gap = (&total_alg.hessian - &total_act.hessian)
        .amax()
        .max((&total_alg.linear - &total_act.linear).amax());
    if gap > 1e-9 * scale {
        return Err(ProblemError::ObjectiveMismatch(format!(
            "algorithmic and actual totals differ by {gap:.3e}"
        )));
    }
    let ev_total = min_eigenvalue(&total_act.hessian);
    if ev_total < -PSD_TOL * scale {
        return Err(ProblemError::NonConvexObjective {
            context: "total cost".into(),
            min_eigenvalue: ev_total,
        });
    }
    let strictly_convex = ev_total > PSD_TOL * scale;

    for (i, poly) in local.iter().enumerate() {
        if poly.min_norm_point()?.is_none() {
            return Err(ProblemError::EmptyLocalSet(i));
        }
        if !poly.is_bounded()? {
            return Err(ProblemError::UnboundedLocalSet(i));
        }
    }

    Ok(CoupledProblem {
        dims,
        offsets,
        coupling,
        d,
        local,
        algorithmic,
        actual,
        kind,
        strictly_convex,
    })
}

fn sum_quadratics(qs: &[Quadratic], n: usize) -> Quadratic {
    qs.iter().fold(Quadratic::zeros(n), |mut acc, q| {
        acc.hessian += &q.hessian;
        acc.linear += &q.linear;
        acc
    })
}

/// Restricted view of one agent's data, as seen by the distributed solver.
#[derive(Debug, Clone)]
pub struct AgentView<'a> {
    pub index: usize,
    pub objective: &'a Quadratic,
    /// `Ã_i`: `A_i` placed in agent `i`'s columns of an `n_0 × n` matrix.
    pub a_tilde: DMatrix<f64>,
    /// `Ω̃_i`: the local polyhedron lifted to the full vector.
    pub local: Polyhedron,
    pub offset: usize,
    pub dim: usize,
}

/// Result of [`convert_inequality_coupling`].
#[derive(Debug, Clone, PartialEq)]
pub struct SlackConversion {
    pub problem: CoupledProblem,
    original_dims: Vec<usize>,
}

impl SlackConversion {
    /// Drops the slack coordinates from a solution of the converted problem.
    pub fn truncate(&self, z: &DVector<f64>) -> DVector<f64> {
        let keep: Vec<usize> = self
            .problem
            .offsets
            .iter()
            .zip(&self.original_dims)
            .flat_map(|(&o, &di)| o..o + di)
            .collect();
        z.select_rows(&keep)
    }
}

/// Rewrites `Σ A_i x_i ≤ d` as `Σ (A_i x_i + s_i) = d` with `s_i ≥ 0`
/// appended to each agent's block. Slack upper bounds keep every local set
/// bounded; they are derived from the smallest coupling load each agent can
/// produce, so they never cut off a feasible point.
pub fn convert_inequality_coupling(
    problem: &CoupledProblem,
) -> Result<SlackConversion, ProblemError> {
    let n0 = problem.n_coupled();
    let n_agents = problem.n_agents();

    // Row-wise minimum of A_i x_i over Ω_i, one LP per (agent, row).
    let mut min_load = DVector::<f64>::zeros(n0);
    for i in 0..n_agents {
        let poly = &problem.local[i];
        let ai = &problem.coupling[i];
        for r in 0..n0 {
            let c = ai.row(r).transpose();
            let spec = QpSpec::new(DMatrix::zeros(poly.dim(), poly.dim()), c)
                .with_ineq(poly.b.clone(), poly.m.clone());
            let sol = solve_qp(&spec, &QpSettings::default())?;
            min_load[r] += sol.objective;
        }
    }
    let slack_cap = DVector::from_fn(n0, |r, _| (problem.d[r] - min_load[r]).max(0.0));

    let new_dims: Vec<usize> = problem.dims.iter().map(|&di| di + n0).collect();
    let new_n: usize = new_dims.iter().sum();
    let mut keep = Vec::with_capacity(problem.n());
    let mut offset = 0;
    for &di in &problem.dims {
        keep.extend(offset..offset + di);
        offset += di + n0;
    }
    let lift = |q: &Quadratic| {
        let mut out = Quadratic::zeros(new_n);
        for (a, &ra) in keep.iter().enumerate() {
            out.linear[ra] = q.linear[a];
            for (b, &rb) in keep.iter().enumerate() {
                out.hessian[(ra, rb)] = q.hessian[(a, b)];
            }
        }
        out
    };

    let mut agents = Vec::with_capacity(n_agents);
    for i in 0..n_agents {
        let di = problem.dims[i];
        let mut a = DMatrix::zeros(n0, di + n0);
        a.view_mut((0, 0), (n0, di)).copy_from(&problem.coupling[i]);
        a.view_mut((0, di), (n0, n0)).fill_with_identity();

        let poly = &problem.local[i];
        let rows = poly.n_rows() + 2 * n0;
        let mut b = DMatrix::zeros(rows, di + n0);
        let mut m = DVector::zeros(rows);
        b.view_mut((0, 0), (poly.n_rows(), di)).copy_from(&poly.b);
        m.rows_mut(0, poly.n_rows()).copy_from(&poly.m);
        for r in 0..n0 {
            b[(poly.n_rows() + r, di + r)] = -1.0;
            b[(poly.n_rows() + n0 + r, di + r)] = 1.0;
            m[poly.n_rows() + n0 + r] = slack_cap[r];
        }
        agents.push(AgentSpec {
            objective: lift(&problem.algorithmic[i]),
            actual: Some(lift(&problem.actual[i])),
            coupling: a,
            local: Polyhedron::new(b, m),
        });
    }
    let converted = assemble_problem(agents, problem.d.clone())?;
    Ok(SlackConversion {
        problem: converted,
        original_dims: problem.dims.clone(),
    })
}

impl CoupledProblem {
    pub fn n_agents(&self) -> usize {
        self.dims.len()
    }

    /// Total decision dimension `Σ n_i`.
    pub fn n(&self) -> usize {
        self.dims.iter().sum()
    }

    /// Number of coupled rows `n_0`.
    pub fn n_coupled(&self) -> usize {
        self.d.len()
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn offset(&self, i: usize) -> usize {
        self.offsets[i]
    }

    pub fn coupling(&self, i: usize) -> &DMatrix<f64> {
        &self.coupling[i]
    }

    pub fn d(&self) -> &DVector<f64> {
        &self.d
    }

    pub fn local(&self, i: usize) -> &Polyhedron {
        &self.local[i]
    }

    pub fn kind(&self) -> Coupling {
        self.kind
    }

    pub fn is_strictly_convex(&self) -> bool {
        self.strictly_convex
    }

    pub fn objective(&self, i: usize, role: Role) -> &Quadratic {
        match role {
            Role::Algorithmic => &self.algorithmic[i],
            Role::Actual => &self.actual[i],
        }
    }

    pub fn objectives(&self, role: Role) -> &[Quadratic] {
        match role {
            Role::Algorithmic => &self.algorithmic,
            Role::Actual => &self.actual,
        }
    }

    /// Total cost `Σ f_i` (identical for both roles).
    pub fn total_objective(&self) -> Quadratic {
        sum_quadratics(&self.actual, self.n())
    }

    /// Stacked coupling matrix `[A_1 … A_N]`.
    pub fn coupling_matrix(&self) -> DMatrix<f64> {
        let mut a = DMatrix::zeros(self.n_coupled(), self.n());
        for i in 0..self.n_agents() {
            a.view_mut((0, self.offsets[i]), (self.n_coupled(), self.dims[i]))
                .copy_from(&self.coupling[i]);
        }
        a
    }

    /// Block-diagonal local constraints over the full vector.
    pub fn local_constraints(&self) -> Polyhedron {
        let rows: usize = self.local.iter().map(|p| p.n_rows()).sum();
        let mut b = DMatrix::zeros(rows, self.n());
        let mut m = DVector::zeros(rows);
        let mut r = 0;
        for i in 0..self.n_agents() {
            let p = &self.local[i];
            b.view_mut((r, self.offsets[i]), (p.n_rows(), self.dims[i]))
                .copy_from(&p.b);
            m.rows_mut(r, p.n_rows()).copy_from(&p.m);
            r += p.n_rows();
        }
        Polyhedron::new(b, m)
    }

    pub fn block<'a>(&self, x: &'a DVector<f64>, i: usize) -> nalgebra::DVectorView<'a, f64> {
        x.rows(self.offsets[i], self.dims[i])
    }

    pub fn agent_view(&self, i: usize) -> Result<AgentView<'_>, ProblemError> {
        self.check_agent(i)?;
        let n = self.n();
        let mut a_tilde = DMatrix::zeros(self.n_coupled(), n);
        a_tilde
            .view_mut((0, self.offsets[i]), (self.n_coupled(), self.dims[i]))
            .copy_from(&self.coupling[i]);
        let p = &self.local[i];
        let mut b = DMatrix::zeros(p.n_rows(), n);
        b.view_mut((0, self.offsets[i]), (p.n_rows(), self.dims[i]))
            .copy_from(&p.b);
        Ok(AgentView {
            index: i,
            objective: &self.algorithmic[i],
            a_tilde,
            local: Polyhedron::new(b, p.m.clone()),
            offset: self.offsets[i],
            dim: self.dims[i],
        })
    }

    fn check_agent(&self, i: usize) -> Result<(), ProblemError> {
        if i >= self.n_agents() {
            return Err(ProblemError::UnknownAgent {
                agent: i,
                n_agents: self.n_agents(),
            });
        }
        Ok(())
    }

    fn check_full(&self, x: &DVector<f64>) -> Result<(), ProblemError> {
        if x.len() != self.n() {
            return Err(ProblemError::DimensionMismatch(format!(
                "vector has length {}, expected {}",
                x.len(),
                self.n()
            )));
        }
        Ok(())
    }

    pub fn eval_cost(&self, i: usize, x: &DVector<f64>, role: Role) -> Result<f64, ProblemError> {
        self.check_agent(i)?;
        self.check_full(x)?;
        Ok(self.objective(i, role).eval(x))
    }

    pub fn total_cost(&self, x: &DVector<f64>) -> Result<f64, ProblemError> {
        self.check_full(x)?;
        Ok(self.actual.iter().map(|q| q.eval(x)).sum())
    }

    /// `Σ A_i x_i − d`.
    pub fn coupled_residual_vector(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut r = -self.d.clone();
        for i in 0..self.n_agents() {
            r += &self.coupling[i] * self.block(x, i);
        }
        r
    }

    pub fn residuals(&self, x: &DVector<f64>) -> Result<Residuals, ProblemError> {
        self.check_full(x)?;
        let r = self.coupled_residual_vector(x);
        let coupled = match self.kind {
            Coupling::Equality => r.norm(),
            Coupling::Inequality => r.map(|v| v.max(0.0)).norm(),
        };
        let local = (0..self.n_agents())
            .map(|i| self.local[i].violation(&self.block(x, i).into_owned()))
            .fold(0.0, f64::max);
        Ok(Residuals { coupled, local })
    }

    /// Same structure with other objectives; used to build reported problems.
    pub fn with_objectives(
        &self,
        algorithmic: Vec<Quadratic>,
        actual: Vec<Quadratic>,
    ) -> Result<CoupledProblem, ProblemError> {
        if algorithmic.len() != self.n_agents() || actual.len() != self.n_agents() {
            return Err(ProblemError::DimensionMismatch(
                "one objective per agent required".into(),
            ));
        }
        let agents = (0..self.n_agents())
            .map(|i| AgentSpec {
                objective: algorithmic[i].clone(),
                actual: Some(actual[i].clone()),
                coupling: self.coupling[i].clone(),
                local: self.local[i].clone(),
            })
            .collect();
        assemble_with_coupling(agents, self.d.clone(), self.kind)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Residuals {
    /// `‖Σ A_i x_i − d‖₂` (positive part only for inequality coupling).
    pub coupled: f64,
    /// Largest local constraint violation.
    pub local: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Report {
    #[default]
    True,
    Reported,
}

/// A problem together with the objectives the agents actually announced.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportedProblem {
    pub truth: CoupledProblem,
    pub reported: CoupledProblem,
}

impl ReportedProblem {
    pub fn new(truth: CoupledProblem, reported: CoupledProblem) -> Result<Self, ProblemError> {
        if truth.dims != reported.dims
            || truth.coupling != reported.coupling
            || truth.d != reported.d
            || truth.local != reported.local
            || truth.kind != reported.kind
        {
            return Err(ProblemError::ObjectiveMismatch(
                "reported problem must share the true problem's structure".into(),
            ));
        }
        Ok(Self { truth, reported })
    }

    pub fn truthful(truth: CoupledProblem) -> Self {
        Self {
            reported: truth.clone(),
            truth,
        }
    }

    pub fn problem(&self, which: Report) -> &CoupledProblem {
        match which {
            Report::True => &self.truth,
            Report::Reported => &self.reported,
        }
    }

    /// Actual cost of agent `i` under the selected objective set.
    pub fn eval_cost(&self, i: usize, x: &DVector<f64>, which: Report) -> Result<f64, ProblemError> {
        self.problem(which).eval_cost(i, x, Role::Actual)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_agent(h: DMatrix<f64>, g: DVector<f64>, lo: f64, hi: f64) -> AgentSpec {
        AgentSpec {
            objective: Quadratic::new(h, g),
            actual: None,
            coupling: DMatrix::from_element(1, 1, 1.0),
            local: Polyhedron::boxed(
                &DVector::from_element(1, lo),
                &DVector::from_element(1, hi),
            ),
        }
    }

    #[test]
    fn single_agent_problem() {
        let a = scalar_agent(DMatrix::from_element(1, 1, 2.0), DVector::zeros(1), 0.0, 2.0);
        let p = assemble_problem(vec![a], DVector::from_element(1, 1.0)).unwrap();
        assert_eq!(p.n_agents(), 1);
        assert!(p.is_strictly_convex());
        let r = p.residuals(&DVector::from_element(1, 1.0)).unwrap();
        assert_eq!((r.coupled, r.local), (0.0, 0.0));
    }

    #[test]
    fn negative_total_curvature_is_rejected() {
        let h = DMatrix::from_element(1, 1, -1.0);
        let a = AgentSpec {
            objective: Quadratic::zeros(1),
            actual: Some(Quadratic::new(h.clone(), DVector::zeros(1))),
            coupling: DMatrix::from_element(1, 1, 1.0),
            local: Polyhedron::boxed(&DVector::zeros(1), &DVector::from_element(1, 1.0)),
        };
        // Totals differ first.
        assert!(matches!(
            assemble_problem(vec![a], DVector::from_element(1, 1.0)),
            Err(ProblemError::ObjectiveMismatch(_))
        ));
        let b = scalar_agent(h, DVector::zeros(1), 0.0, 1.0);
        assert!(matches!(
            assemble_problem(vec![b], DVector::from_element(1, 1.0)),
            Err(ProblemError::NonConvexObjective { .. })
        ));
    }

    #[test]
    fn empty_and_unbounded_local_sets() {
        let empty = scalar_agent(DMatrix::identity(1, 1), DVector::zeros(1), 2.0, 1.0);
        assert_eq!(
            assemble_problem(vec![empty], DVector::from_element(1, 1.0)),
            Err(ProblemError::EmptyLocalSet(0))
        );
        let half_line = AgentSpec {
            objective: Quadratic::new(DMatrix::identity(1, 1), DVector::zeros(1)),
            actual: None,
            coupling: DMatrix::from_element(1, 1, 1.0),
            local: Polyhedron::new(DMatrix::from_element(1, 1, -1.0), DVector::zeros(1)),
        };
        assert_eq!(
            assemble_problem(vec![half_line], DVector::from_element(1, 1.0)),
            Err(ProblemError::UnboundedLocalSet(0))
        );
    }

    #[test]
    fn boundedness_of_simplex_like_sets() {
        // x ≥ 0, x1 + x2 ≤ 3
        let b = DMatrix::from_row_slice(3, 2, &[-1.0, 0.0, 0.0, -1.0, 1.0, 1.0]);
        let p = Polyhedron::new(b, DVector::from_column_slice(&[0.0, 0.0, 3.0]));
        assert!(p.is_bounded().unwrap());
        // x ≥ 0, x1 ≤ 3: unbounded in x2
        let b = DMatrix::from_row_slice(3, 2, &[-1.0, 0.0, 0.0, -1.0, 1.0, 0.0]);
        let p = Polyhedron::new(b, DVector::from_column_slice(&[0.0, 0.0, 3.0]));
        assert!(!p.is_bounded().unwrap());
    }

    #[test]
    fn residuals_report_violations() {
        let agents = (0..2)
            .map(|_| AgentSpec {
                objective: Quadratic::new(DMatrix::identity(2, 2), DVector::zeros(2)),
                actual: None,
                coupling: DMatrix::from_element(1, 1, 1.0),
                local: Polyhedron::boxed(&DVector::zeros(1), &DVector::from_element(1, 5.0)),
            })
            .collect();
        let p = assemble_problem(agents, DVector::from_element(1, 5.0)).unwrap();
        let r = p.residuals(&DVector::zeros(2)).unwrap();
        assert_eq!(r.coupled, 5.0);
        let r = p.residuals(&DVector::from_column_slice(&[-0.1, 5.1])).unwrap();
        assert!((r.local - 0.1).abs() < 1e-12);
        assert!(r.coupled.abs() < 1e-12);
    }

    #[test]
    fn slack_conversion_of_single_bound() {
        let a = scalar_agent(DMatrix::identity(1, 1), DVector::from_element(1, -3.0), 0.0, 4.0);
        let p = assemble_inequality_problem(vec![a], DVector::from_element(1, 1.0)).unwrap();
        let conv = convert_inequality_coupling(&p).unwrap();
        let q = &conv.problem;
        assert_eq!(q.kind(), Coupling::Equality);
        assert_eq!(q.dims(), &[2]);
        assert_eq!(q.coupling(0), &DMatrix::from_row_slice(1, 2, &[1.0, 1.0]));
        // slack ≥ 0 is part of the local set
        assert!(!q.local(0).contains(&DVector::from_column_slice(&[1.0, -0.5]), 1e-12));
        assert!(q.local(0).contains(&DVector::from_column_slice(&[0.5, 0.5]), 1e-12));
        assert_eq!(
            conv.truncate(&DVector::from_column_slice(&[0.25, 0.75])),
            DVector::from_element(1, 0.25)
        );
    }

    #[test]
    fn reported_problem_requires_same_structure() {
        let mk = |g: f64, hi: f64| {
            assemble_problem(
                vec![scalar_agent(DMatrix::identity(1, 1), DVector::from_element(1, g), 0.0, hi)],
                DVector::from_element(1, 1.0),
            )
            .unwrap()
        };
        assert!(ReportedProblem::new(mk(1.0, 2.0), mk(0.5, 2.0)).is_ok());
        assert!(ReportedProblem::new(mk(1.0, 2.0), mk(1.0, 3.0)).is_err());
    }
}
