//! Distributed solution of constraint-coupled quadratic programs and the
//! payment rules built on top of them.
//!
//! A [`CoupledProblem`] couples `N` agents through `Σ A_i x_i = d` and lets
//! every objective depend on all decision blocks. [`ctadmm`] solves it over a
//! communication graph with consensus-tracking ADMM; [`oracle`] provides the
//! centralized reference solve. [`mechanism`] turns solutions into shadow
//! prices or VCG payments, and [`transport`] and [`star`] build the
//! multi-commodity transport instances used throughout.

pub mod ctadmm;
pub mod graph;
pub mod mechanism;
pub mod oracle;
pub mod problem;
pub mod qp;
pub mod star;
pub mod transport;

pub use ctadmm::{CtAdmm, CtadmmError, DistributedSolution, InitialPoint, IterTrace, Mode, SolverParams};
pub use graph::{CommGraph, GraphError, WeightMatrix, metropolis_weights, validate_weights};
pub use mechanism::{
    Backend, CostParameterization, Mechanism, MechanismError, MechanismOutcome, MisreportSpec, PortfolioSpec,
};
pub use oracle::{CentralizedSolution, OracleError, centralized_solve};
pub use problem::{AgentSpec, CoupledProblem, Polyhedron, ProblemError, Quadratic, Report, ReportedProblem, Role};
pub use qp::{QpError, QpSettings, QpSolution, QpSpec, solve_qp};
pub use star::{StarError, StarInstance};
pub use transport::{Scale, TransportError, TransportInstance, TransportNetwork};
