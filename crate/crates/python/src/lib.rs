//! Python bindings. Vectors cross the boundary as plain lists of floats.

use coupled_admm::ctadmm::{self, Mode, SolverParams};
use coupled_admm::graph::{build_graph, metropolis_weights, validate_weights};
use coupled_admm::mechanism::{self, CostParameterization, Mechanism, MisreportSpec};
use coupled_admm::oracle::centralized_solve;
use coupled_admm::problem::{Report, ReportedProblem};
use coupled_admm::star;
use coupled_admm::transport::{self, Scale};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn runtime_err(e: impl std::fmt::Display) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

fn parse_report(s: &str) -> PyResult<Report> {
    match s {
        "true" => Ok(Report::True),
        "reported" => Ok(Report::Reported),
        other => Err(value_err(format!("evaluation must be 'true' or 'reported', got '{other}'"))),
    }
}

#[pyclass(module = "coupled_admm", name = "CommGraph", frozen)]
struct PyCommGraph {
    inner: coupled_admm::CommGraph,
}

#[pymethods]
impl PyCommGraph {
    #[new]
    fn new(n_agents: usize, edges: Vec<(usize, usize)>) -> PyResult<Self> {
        build_graph(n_agents, &edges).map(|inner| Self { inner }).map_err(value_err)
    }

    #[staticmethod]
    fn complete(n: usize) -> PyResult<Self> {
        coupled_admm::CommGraph::complete(n).map(|inner| Self { inner }).map_err(value_err)
    }

    #[staticmethod]
    fn ring(n: usize) -> PyResult<Self> {
        coupled_admm::CommGraph::ring(n).map(|inner| Self { inner }).map_err(value_err)
    }

    #[staticmethod]
    fn path(n: usize) -> PyResult<Self> {
        coupled_admm::CommGraph::path(n).map(|inner| Self { inner }).map_err(value_err)
    }

    #[getter]
    fn n_agents(&self) -> usize {
        self.inner.n_agents()
    }

    #[getter]
    fn edges(&self) -> Vec<(usize, usize)> {
        self.inner.edges().to_vec()
    }

    /// Lazy Metropolis weights as a list of rows.
    fn metropolis_weights(&self) -> Vec<Vec<f64>> {
        let w = metropolis_weights(&self.inner);
        w.matrix().row_iter().map(|r| r.iter().copied().collect()).collect()
    }

    /// Names of the failed weight conditions; empty when the weights are valid.
    fn validate_weights(&self) -> PyResult<Vec<String>> {
        let w = metropolis_weights(&self.inner);
        let report = validate_weights(&self.inner, w.matrix()).map_err(value_err)?;
        Ok(report.failures())
    }

    fn __repr__(&self) -> String {
        format!("CommGraph(n_agents={}, edges={:?})", self.inner.n_agents(), self.inner.edges())
    }
}

#[pyclass(module = "coupled_admm", name = "Centralized", frozen, get_all)]
struct PyCentralized {
    x: Vec<f64>,
    #[pyo3(name = "lambda_")]
    lambda: Vec<f64>,
    objective: f64,
}

#[pyclass(module = "coupled_admm", name = "Solution", frozen, get_all)]
struct PySolution {
    x: Vec<f64>,
    converged: bool,
    iterations: usize,
    lambda_bar: Vec<f64>,
    rel_error: Vec<Option<f64>>,
    violation: Vec<f64>,
    eps1_norm: Vec<f64>,
    eps2_norm: Vec<f64>,
}

#[pyclass(module = "coupled_admm", name = "MechanismOutcome", frozen, get_all)]
struct PyOutcome {
    mechanism: String,
    x: Vec<f64>,
    payments: Vec<f64>,
    costs: Vec<f64>,
    net_costs: Vec<f64>,
    benefits: Vec<f64>,
    total_payout: f64,
}

impl From<mechanism::MechanismOutcome> for PyOutcome {
    fn from(o: mechanism::MechanismOutcome) -> Self {
        Self {
            mechanism: o.mechanism.to_string(),
            x: o.x.iter().copied().collect(),
            payments: o.agents.iter().map(|a| a.payment).collect(),
            costs: o.agents.iter().map(|a| a.cost).collect(),
            net_costs: o.net_costs(),
            benefits: o.benefits(),
            total_payout: o.total_payout(),
        }
    }
}

#[pymethods]
impl PyOutcome {
    fn __repr__(&self) -> String {
        format!("MechanismOutcome(mechanism='{}', benefits={:?})", self.mechanism, self.benefits)
    }
}

#[pyclass(module = "coupled_admm", name = "TransportInstance", frozen)]
struct PyTransportInstance {
    inner: transport::TransportInstance,
}

#[pymethods]
impl PyTransportInstance {
    /// Single-commodity star; one edge-cost vector per supplier, spokes
    /// first and the shared edge last.
    #[staticmethod]
    fn star(edge_costs: Vec<Vec<f64>>, c0: f64, demand: f64) -> PyResult<Self> {
        let n = edge_costs.len();
        if n == 0 || edge_costs.iter().any(|c| c.len() != n + 1) {
            return Err(value_err(format!("each supplier needs {} edge costs", n + 1)));
        }
        let net = transport::star_with_edge_costs(edge_costs, c0, demand);
        Self::build(net, 1, 2)
    }

    /// Seeded balanced network of scale `(n, m, k, r)`.
    #[staticmethod]
    #[pyo3(signature = (n, m, k, r, seed = 0))]
    fn balanced(n: usize, m: usize, k: usize, r: usize, seed: u64) -> PyResult<Self> {
        let net = transport::generate_balanced(Scale { n, m, k, r }, seed).map_err(value_err)?;
        Self::build(net, r, 4)
    }

    #[getter]
    fn n_agents(&self) -> usize {
        self.inner.problem.n_agents()
    }

    #[getter]
    fn n_vars(&self) -> usize {
        self.inner.problem.n()
    }

    #[getter]
    fn n_coupled(&self) -> usize {
        self.inner.problem.n_coupled()
    }

    #[getter]
    fn dims(&self) -> Vec<usize> {
        self.inner.problem.dims().to_vec()
    }

    fn centralized(&self) -> PyResult<PyCentralized> {
        let sol = centralized_solve(&self.inner.problem).map_err(runtime_err)?;
        Ok(PyCentralized {
            x: sol.x.iter().copied().collect(),
            lambda: sol.lambda.iter().copied().collect(),
            objective: sol.objective,
        })
    }

    /// Distributed solve; `tol` bounds both the step and the violation.
    #[pyo3(signature = (graph, sigma = 1.0, rho = 1.0, max_iter = 2000, tol = 1e-6, mode = "plain"))]
    fn solve(
        &self,
        py: Python<'_>,
        graph: &PyCommGraph,
        sigma: f64,
        rho: f64,
        max_iter: usize,
        tol: f64,
        mode: &str,
    ) -> PyResult<PySolution> {
        let params = SolverParams {
            sigma,
            rho,
            max_iter,
            rel_error_tol: tol,
            violation_tol: tol,
            mode: mode.parse::<Mode>().map_err(value_err)?,
            ..SolverParams::default()
        };
        let problem = &self.inner.problem;
        let g = &graph.inner;
        let sol = py
            .detach(|| {
                let f_star = centralized_solve(problem).ok().map(|c| c.objective);
                ctadmm::solve(problem, g, &params, f_star)
            })
            .map_err(runtime_err)?;
        let rows = &sol.trace.rows;
        Ok(PySolution {
            x: sol.x.iter().copied().collect(),
            converged: sol.converged,
            iterations: sol.iterations,
            lambda_bar: sol.lambda_bar().iter().copied().collect(),
            rel_error: rows.iter().map(|r| r.rel_error).collect(),
            violation: rows.iter().map(|r| r.violation).collect(),
            eps1_norm: rows.iter().map(|r| r.eps1_norm).collect(),
            eps2_norm: rows.iter().map(|r| r.eps2_norm).collect(),
        })
    }

    /// Runs `mechanism` (`"sp"` or `"vcg"`) on truthful reports, or with
    /// `agent` shifting all its reported cost parameters by `delta`.
    #[pyo3(signature = (mechanism, agent = None, delta = 0.0, evaluation = "true"))]
    fn mechanism(
        &self,
        py: Python<'_>,
        mechanism: &str,
        agent: Option<usize>,
        delta: f64,
        evaluation: &str,
    ) -> PyResult<PyOutcome> {
        let which: Mechanism = mechanism.parse().map_err(value_err)?;
        let eval = parse_report(evaluation)?;
        let truth = &self.inner.problem;
        let out = py.detach(|| {
            let reported = match agent {
                None => ReportedProblem::truthful(truth.clone()),
                Some(agent) => mechanism::apply_misreports(
                    truth,
                    &CostParameterization::identity(truth),
                    &[MisreportSpec {
                        agent,
                        delta,
                        indices: None,
                    }],
                )?,
            };
            mechanism::run_mechanism(&reported, which, eval)
        });
        out.map(PyOutcome::from).map_err(runtime_err)
    }

    /// Rows `(delta, agent, benefit)` as `agent` sweeps its misreport.
    #[pyo3(signature = (agent, grid, mechanism = "sp"))]
    fn misreport_sweep(
        &self,
        py: Python<'_>,
        agent: usize,
        grid: Vec<f64>,
        mechanism: &str,
    ) -> PyResult<Vec<(f64, usize, f64)>> {
        let which: Mechanism = mechanism.parse().map_err(value_err)?;
        let truth = &self.inner.problem;
        let table = py
            .detach(|| mechanism::misreport_sweep(truth, &CostParameterization::identity(truth), agent, &grid, which))
            .map_err(runtime_err)?;
        Ok(table.rows.iter().map(|r| (r.delta, r.agent, r.benefit)).collect())
    }

    fn __repr__(&self) -> String {
        let p = &self.inner.problem;
        format!(
            "TransportInstance(n_agents={}, n_vars={}, n_coupled={})",
            p.n_agents(),
            p.n(),
            p.n_coupled()
        )
    }
}

impl PyTransportInstance {
    fn build(net: transport::TransportNetwork, r: usize, max_len: usize) -> PyResult<Self> {
        transport::TransportInstance::build(net, r, max_len)
            .map(|inner| Self { inner })
            .map_err(value_err)
    }
}

/// Closed forms for the single-demander star with path costs `c`.
#[pyclass(module = "coupled_admm", name = "StarInstance", frozen)]
struct PyStarInstance {
    inner: star::StarInstance,
}

#[pymethods]
impl PyStarInstance {
    #[new]
    fn new(c: Vec<f64>, c0: f64, d: f64) -> PyResult<Self> {
        star::StarInstance::new(c, c0, d).map(|inner| Self { inner }).map_err(value_err)
    }

    fn optimum(&self) -> PyResult<Vec<f64>> {
        let opt = star::star_optimum(&self.inner).map_err(runtime_err)?;
        Ok(opt.x.iter().copied().collect())
    }

    /// `(prices, benefits)` under truthful shadow pricing.
    fn prices(&self) -> PyResult<(Vec<f64>, Vec<f64>)> {
        let p = star::star_prices_utilities(&self.inner).map_err(runtime_err)?;
        Ok((p.prices, p.benefits))
    }

    /// True-cost benefits when agent `i` alone shifts its cost by `delta`.
    fn misreport(&self, i: usize, delta: f64) -> PyResult<Vec<f64>> {
        Ok(star::star_misreport(&self.inner, i, delta).map_err(runtime_err)?.benefits)
    }

    /// `(deltas, benefits)` at the joint misreport equilibrium.
    fn equilibrium(&self) -> PyResult<(Vec<f64>, Vec<f64>)> {
        let eq = star::star_misreport_equilibrium(&self.inner).map_err(runtime_err)?;
        Ok((eq.deltas, eq.benefits))
    }

    fn to_transport(&self) -> PyResult<PyTransportInstance> {
        self.inner
            .to_transport()
            .map(|inner| PyTransportInstance { inner })
            .map_err(value_err)
    }
}

#[pymodule]
fn _coupled_admm(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyCommGraph>()?;
    m.add_class::<PyCentralized>()?;
    m.add_class::<PySolution>()?;
    m.add_class::<PyOutcome>()?;
    m.add_class::<PyTransportInstance>()?;
    m.add_class::<PyStarInstance>()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn example() -> PyTransportInstance {
        PyTransportInstance::star(
            vec![vec![1.0, 0.0, 0.0, 1.0], vec![0.0, 2.0, 0.0, 1.0], vec![0.0, 0.0, 3.0, 1.0]],
            1.0,
            5.0,
        )
        .unwrap()
    }

    #[test]
    fn distributed_solve_through_the_binding() {
        Python::attach(|py| {
            let g = PyCommGraph::complete(3).unwrap();
            let sol = example().solve(py, &g, 1.0, 1.0, 2000, 1e-8, "accelerated").unwrap();
            assert!(sol.converged);
            assert!((sol.x[0] - 13.0 / 6.0).abs() < 1e-6);
            assert_eq!(sol.violation.len(), sol.iterations);
        });
    }

    #[test]
    fn misreport_binding_matches_the_closed_form() {
        Python::attach(|py| {
            let out = example().mechanism(py, "sp", Some(0), -1.0, "true").unwrap();
            let closed = PyStarInstance::new(vec![2.0, 3.0, 4.0], 1.0, 5.0)
                .unwrap()
                .misreport(0, -1.0)
                .unwrap();
            for (a, b) in out.benefits.iter().zip(&closed) {
                assert!((a - b).abs() < 1e-9);
            }
        });
    }

    #[test]
    fn bad_arguments_raise() {
        Python::attach(|py| {
            let g = PyCommGraph::complete(3).unwrap();
            assert!(example().solve(py, &g, 1.0, 1.0, 10, 1e-6, "fast").is_err());
            assert!(example().mechanism(py, "auction", None, 0.0, "true").is_err());
            assert!(PyCommGraph::new(3, vec![(0, 1)]).is_err());
        });
    }
}
