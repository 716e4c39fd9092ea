//! Centralized reference solves of a coupled problem.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::problem::{
    AgentSpec, CoupledProblem, Coupling, ProblemError, Quadratic, Role, assemble_inequality_problem, assemble_problem,
};
use crate::qp::{QpError, QpSettings, QpSpec, solve_qp};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OracleError {
    #[error("problem is infeasible")]
    Infeasible,
    #[error("problem becomes infeasible without agent {0}")]
    InfeasibleWithoutAgent(usize),
    #[error(transparent)]
    Qp(QpError),
    #[error(transparent)]
    Problem(#[from] ProblemError),
}

impl From<QpError> for OracleError {
    fn from(e: QpError) -> Self {
        match e {
            QpError::Infeasible => OracleError::Infeasible,
            other => OracleError::Qp(other),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CentralizedSolution {
    pub x: DVector<f64>,
    /// Coupled-constraint multiplier with `∇f(x*) = Aᵀλ* − Jᵀα*`.
    pub lambda: DVector<f64>,
    /// Local-constraint multipliers, one vector per agent.
    pub alpha: Vec<DVector<f64>>,
    pub objective: f64,
}

/// Minimizes the total cost over the coupled and local constraints.
pub fn centralized_solve(problem: &CoupledProblem) -> Result<CentralizedSolution, OracleError> {
    centralized_solve_with(problem, &QpSettings::default())
}

pub fn centralized_solve_with(
    problem: &CoupledProblem,
    settings: &QpSettings,
) -> Result<CentralizedSolution, OracleError> {
    let total = problem.total_objective();
    let a = problem.coupling_matrix();
    let local = problem.local_constraints();
    let n0 = problem.n_coupled();
    let spec = match problem.kind() {
        Coupling::Equality => QpSpec::new(total.hessian, total.linear)
            .with_eq(a, problem.d().clone())
            .with_ineq(local.b, local.m),
        Coupling::Inequality => {
            let rows = n0 + local.b.nrows();
            let mut g = DMatrix::zeros(rows, problem.n());
            g.rows_mut(0, n0).copy_from(&a);
            g.rows_mut(n0, local.b.nrows()).copy_from(&local.b);
            let mut u = DVector::zeros(rows);
            u.rows_mut(0, n0).copy_from(problem.d());
            u.rows_mut(n0, local.m.len()).copy_from(&local.m);
            QpSpec::new(total.hessian, total.linear).with_ineq(g, u)
        }
    };
    let sol = solve_qp(&spec, settings)?;
    // The kernel reports P x + q + Eᵀλ + Gᵀα = 0; flip the coupled multiplier.
    let (lambda, local_duals) = match problem.kind() {
        Coupling::Equality => (-&sol.eq_duals, sol.ineq_duals.clone()),
        Coupling::Inequality => (
            -sol.ineq_duals.rows(0, n0).into_owned(),
            sol.ineq_duals.rows(n0, sol.ineq_duals.len() - n0).into_owned(),
        ),
    };
    let mut alpha = Vec::with_capacity(problem.n_agents());
    let mut r = 0;
    for i in 0..problem.n_agents() {
        let k = problem.local(i).n_rows();
        alpha.push(local_duals.rows(r, k).into_owned());
        r += k;
    }
    Ok(CentralizedSolution {
        objective: sol.objective,
        x: sol.x,
        lambda,
        alpha,
    })
}

/// The problem with agent `i` removed: its variables are fixed at zero and
/// dropped, and every remaining objective is restricted accordingly.
pub fn exclude_agent(problem: &CoupledProblem, i: usize) -> Result<CoupledProblem, OracleError> {
    solve_without_agent(problem, i).map(|(p, _)| p)
}

/// [`exclude_agent`] together with the optimum of the reduced problem.
pub fn solve_without_agent(
    problem: &CoupledProblem,
    i: usize,
) -> Result<(CoupledProblem, CentralizedSolution), OracleError> {
    let n_agents = problem.n_agents();
    if i >= n_agents {
        return Err(ProblemError::UnknownAgent { agent: i, n_agents }.into());
    }
    if n_agents == 1 {
        return Err(OracleError::InfeasibleWithoutAgent(i));
    }
    let keep: Vec<usize> = (0..n_agents)
        .filter(|&s| s != i)
        .flat_map(|s| {
            let o = problem.offset(s);
            o..o + problem.dims()[s]
        })
        .collect();
    // The others' actual costs define the reduced problem. Their algorithmic
    // terms miss whatever agent i's algorithmic term carried on the remaining
    // variables; that gap is shared equally so the totals still agree.
    let gap_h = problem.objective(i, Role::Algorithmic).restrict(&keep).hessian
        - problem.objective(i, Role::Actual).restrict(&keep).hessian;
    let gap_g = problem.objective(i, Role::Algorithmic).restrict(&keep).linear
        - problem.objective(i, Role::Actual).restrict(&keep).linear;
    let share = 1.0 / (n_agents - 1) as f64;
    let agents: Vec<AgentSpec> = (0..n_agents)
        .filter(|&s| s != i)
        .map(|s| {
            let alg = problem.objective(s, Role::Algorithmic).restrict(&keep);
            AgentSpec {
                objective: Quadratic::new(&alg.hessian + &gap_h * share, &alg.linear + &gap_g * share),
                actual: Some(problem.objective(s, Role::Actual).restrict(&keep)),
                coupling: problem.coupling(s).clone(),
                local: problem.local(s).clone(),
            }
        })
        .collect();
    let reduced = match problem.kind() {
        Coupling::Equality => assemble_problem(agents, problem.d().clone())?,
        Coupling::Inequality => assemble_inequality_problem(agents, problem.d().clone())?,
    };
    match centralized_solve(&reduced) {
        Ok(sol) => Ok((reduced, sol)),
        Err(OracleError::Infeasible) => Err(OracleError::InfeasibleWithoutAgent(i)),
        Err(e) => Err(e),
    }
}

/// Scatters a solution of the reduced problem back into the full vector with
/// zeros in agent `i`'s block.
pub fn embed_without_agent(problem: &CoupledProblem, i: usize, x_reduced: &DVector<f64>) -> DVector<f64> {
    let mut x = DVector::zeros(problem.n());
    let mut r = 0;
    for s in 0..problem.n_agents() {
        if s == i {
            continue;
        }
        let (o, k) = (problem.offset(s), problem.dims()[s]);
        x.rows_mut(o, k).copy_from(&x_reduced.rows(r, k));
        r += k;
    }
    x
}
