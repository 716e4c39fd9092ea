//! Payment rules on top of a solved coupled problem.
//!
//! Shadow pricing pays agent `i` the unit price
//! `π_i = A_iᵀλ* − Σ_{s≠i} ∇_{x_i} f_s(x*)` per unit of `x_i`. VCG pays the
//! lump sum `Π_i = f_{−i}(x°_{−i}) − Σ_{s≠i} f_s(x*)`, the optimal cost of
//! the others without `i` minus their cost with `i`.
//!
//! Multipliers follow `∇f(x*) = Aᵀλ* − Jᵀα*`. Net costs `u_i = f_i(x) −
//! payment` are evaluated with true objectives unless a caller explicitly
//! asks for the reported ones; "benefit" is `−u_i`.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ctadmm::{self, CtadmmError, DistributedSolution, SolverParams};
use crate::graph::{CommGraph, GraphError};
use crate::oracle::{self, OracleError};
use crate::problem::{CoupledProblem, Polyhedron, ProblemError, Report, ReportedProblem, Role};
use crate::qp::{QpError, QpSettings, QpSpec, solve_qp};

/// Relative stationarity tolerance used to accept a multiplier.
pub const STATIONARITY_TOL: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MechanismError {
    #[error("multiplier does not satisfy stationarity in either sign (residual {residual:.3e})")]
    ConventionMismatch { residual: f64 },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("problem becomes infeasible without agent {0}")]
    InfeasibleWithoutAgent(usize),
    #[error("distributed solve did not converge ({0})")]
    NotConverged(String),
    #[error(transparent)]
    Oracle(OracleError),
    #[error(transparent)]
    Problem(#[from] ProblemError),
    #[error(transparent)]
    Qp(#[from] QpError),
    #[error(transparent)]
    Ctadmm(#[from] CtadmmError),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

impl From<OracleError> for MechanismError {
    fn from(e: OracleError) -> Self {
        match e {
            OracleError::InfeasibleWithoutAgent(i) => MechanismError::InfeasibleWithoutAgent(i),
            other => MechanismError::Oracle(other),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mechanism {
    ShadowPricing,
    Vcg,
}

impl fmt::Display for Mechanism {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mechanism::ShadowPricing => "shadow_pricing",
            Mechanism::Vcg => "vcg",
        })
    }
}

impl std::str::FromStr for Mechanism {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sp" | "shadow_pricing" => Ok(Mechanism::ShadowPricing),
            "vcg" => Ok(Mechanism::Vcg),
            other => Err(format!("unknown mechanism '{other}' (expected sp or vcg)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentOutcome {
    /// `π_iᵀx_i` or `Π_i`.
    pub payment: f64,
    /// Unit prices, shadow pricing only.
    pub prices: Option<DVector<f64>>,
    /// Actual cost under the evaluation objectives.
    pub cost: f64,
    pub net_cost: f64,
}

impl AgentOutcome {
    pub fn benefit(&self) -> f64 {
        -self.net_cost
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MechanismOutcome {
    pub mechanism: Mechanism,
    pub evaluation: Report,
    pub x: DVector<f64>,
    pub agents: Vec<AgentOutcome>,
}

impl MechanismOutcome {
    pub fn total_payout(&self) -> f64 {
        self.agents.iter().map(|a| a.payment).sum()
    }

    pub fn benefits(&self) -> Vec<f64> {
        self.agents.iter().map(AgentOutcome::benefit).collect()
    }

    pub fn net_costs(&self) -> Vec<f64> {
        self.agents.iter().map(|a| a.net_cost).collect()
    }

    /// Columns `agent, mechanism, payment, true_cost, net_cost, benefit`.
    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<(), csv::Error> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["agent", "mechanism", "payment", "true_cost", "net_cost", "benefit"])?;
        for (i, a) in self.agents.iter().enumerate() {
            wtr.write_record([
                i.to_string(),
                self.mechanism.to_string(),
                format!("{:e}", a.payment),
                format!("{:e}", a.cost),
                format!("{:e}", a.net_cost),
                format!("{:e}", a.benefit()),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// KKT residual of `min gᵀz` over a polyhedron at `z`: the smallest
/// `‖g + Bᵀα‖` over `α ≥ 0`, with complementarity `α ⊙ slack` and primal
/// violation folded in by taking the maximum.
fn local_kkt_residual(g: &DVector<f64>, poly: &Polyhedron, z: &DVector<f64>) -> Result<f64, QpError> {
    let rows = poly.n_rows();
    if rows == 0 {
        return Ok(g.amax());
    }
    let b = &poly.b;
    let slack = &poly.m - b * z;
    let violation = slack.iter().fold(0.0_f64, |acc, s| acc.max(-s));
    let mut p = b * b.transpose();
    for r in 0..rows {
        p[(r, r)] += slack[r].max(0.0).powi(2);
    }
    p *= 2.0;
    p = (&p + p.transpose()) * 0.5;
    let q = (b * g) * 2.0;
    let spec = QpSpec::new(p, q).with_ineq(-DMatrix::identity(rows, rows), DVector::zeros(rows));
    let settings = QpSettings {
        check_psd: false,
        ..QpSettings::default()
    };
    let alpha = solve_qp(&spec, &settings)?.x.map(|a| a.max(0.0));
    let stationarity = (g + b.transpose() * &alpha).amax();
    let complementarity = alpha
        .iter()
        .zip(slack.iter())
        .fold(0.0_f64, |acc, (a, s)| acc.max((a * s.max(0.0)).abs()));
    Ok(stationarity.max(complementarity).max(violation))
}

/// Stationarity residual of `(x, λ)` for the whole problem in the mechanism
/// convention, relative to the gradient scale.
pub fn stationarity_residual(problem: &CoupledProblem, x: &DVector<f64>, lambda: &DVector<f64>) -> Result<f64, MechanismError> {
    if x.len() != problem.n() || lambda.len() != problem.n_coupled() {
        return Err(MechanismError::DimensionMismatch(format!(
            "expected x of length {} and λ of length {}",
            problem.n(),
            problem.n_coupled()
        )));
    }
    let grad = problem.total_objective().gradient(x);
    let at_lambda = problem.coupling_matrix().tr_mul(lambda);
    let g = &grad - &at_lambda;
    let scale = grad.amax().max(at_lambda.amax()).max(1.0);
    Ok(local_kkt_residual(&g, &problem.local_constraints(), x)? / scale)
}

/// Picks the sign of `λ` that satisfies stationarity and returns it in the
/// mechanism convention. The distributed iteration converges to `−λ*`, so
/// that sign is tried first.
pub fn reconcile_dual_sign(
    problem: &CoupledProblem,
    x: &DVector<f64>,
    lambda: &DVector<f64>,
    tol: f64,
) -> Result<DVector<f64>, MechanismError> {
    let flipped = -lambda;
    let r_flipped = stationarity_residual(problem, x, &flipped)?;
    if r_flipped <= tol {
        return Ok(flipped);
    }
    let r_plain = stationarity_residual(problem, x, lambda)?;
    if r_plain <= tol {
        return Ok(lambda.clone());
    }
    Err(MechanismError::ConventionMismatch {
        residual: r_flipped.min(r_plain),
    })
}

/// Network-average dual and every agent's dual, sign-corrected.
pub fn reconciled_duals(
    problem: &CoupledProblem,
    sol: &DistributedSolution,
    tol: f64,
) -> Result<(DVector<f64>, Vec<DVector<f64>>), MechanismError> {
    let bar = sol.lambda_bar();
    let fixed = reconcile_dual_sign(problem, &sol.x, &bar, tol)?;
    let sign = if (&fixed - &bar).amax() == 0.0 { 1.0 } else { -1.0 };
    Ok((fixed, sol.states.iter().map(|s| &s.lambda * sign).collect()))
}

/// Unit prices `π_i = A_iᵀλ − Σ_{s≠i} ∇_{x_i} f_s(x)` from actual
/// objectives, after checking that `(x, λ)` is stationary.
pub fn shadow_prices(problem: &CoupledProblem, x: &DVector<f64>, lambda: &DVector<f64>) -> Result<Vec<DVector<f64>>, MechanismError> {
    let residual = stationarity_residual(problem, x, lambda)?;
    if residual > STATIONARITY_TOL {
        return Err(MechanismError::ConventionMismatch { residual });
    }
    Ok(shadow_prices_unchecked(problem, x, lambda))
}

/// [`shadow_prices`] without the stationarity check.
pub fn shadow_prices_unchecked(problem: &CoupledProblem, x: &DVector<f64>, lambda: &DVector<f64>) -> Vec<DVector<f64>> {
    let grads: Vec<DVector<f64>> = problem
        .objectives(Role::Actual)
        .iter()
        .map(|f| f.gradient(x))
        .collect();
    let mut total = DVector::zeros(problem.n());
    for g in &grads {
        total += g;
    }
    (0..problem.n_agents())
        .map(|i| {
            let (o, ni) = (problem.offset(i), problem.dims()[i]);
            let others = total.rows(o, ni) - grads[i].rows(o, ni);
            problem.coupling(i).tr_mul(lambda) - others
        })
        .collect()
}

/// Net costs `u_i = f_i(x) − π_iᵀx_i`, with `f_i` taken from `evaluation`.
pub fn sp_outcome(
    reported: &ReportedProblem,
    x: &DVector<f64>,
    prices: &[DVector<f64>],
    evaluation: Report,
) -> Result<MechanismOutcome, MechanismError> {
    let p = &reported.truth;
    if prices.len() != p.n_agents() || x.len() != p.n() {
        return Err(MechanismError::DimensionMismatch(
            "one price vector per agent and a full decision vector required".into(),
        ));
    }
    let agents = prices
        .iter()
        .enumerate()
        .map(|(i, pi)| {
            if pi.len() != p.dims()[i] {
                return Err(MechanismError::DimensionMismatch(format!(
                    "price vector of agent {i} has length {}, expected {}",
                    pi.len(),
                    p.dims()[i]
                )));
            }
            let payment = pi.dot(&p.block(x, i));
            let cost = reported.eval_cost(i, x, evaluation)?;
            Ok(AgentOutcome {
                payment,
                prices: Some(pi.clone()),
                cost,
                net_cost: cost - payment,
            })
        })
        .collect::<Result<_, MechanismError>>()?;
    Ok(MechanismOutcome {
        mechanism: Mechanism::ShadowPricing,
        evaluation,
        x: x.clone(),
        agents,
    })
}

/// Solves the reported problem centrally, prices it and evaluates.
pub fn shadow_pricing(reported: &ReportedProblem, evaluation: Report) -> Result<MechanismOutcome, MechanismError> {
    let sol = oracle::centralized_solve(&reported.reported)?;
    let prices = shadow_prices(&reported.reported, &sol.x, &sol.lambda)?;
    sp_outcome(reported, &sol.x, &prices, evaluation)
}

/// Best-response KKT residuals of the priced game at `x`.
#[derive(Debug, Clone, PartialEq)]
pub struct EquilibriumReport {
    pub residuals: Vec<f64>,
}

impl EquilibriumReport {
    pub fn max(&self) -> f64 {
        self.residuals.iter().copied().fold(0.0, f64::max)
    }
}

/// For each agent, the KKT residual at `x_i` of
/// `min f_i(x_i, x_{−i}) − π_iᵀx_i` over `Ω_i` with `x_{−i}` held fixed.
pub fn sp_equilibrium_check(
    problem: &CoupledProblem,
    x: &DVector<f64>,
    prices: &[DVector<f64>],
) -> Result<EquilibriumReport, MechanismError> {
    if prices.len() != problem.n_agents() {
        return Err(MechanismError::DimensionMismatch("one price vector per agent required".into()));
    }
    let residuals = (0..problem.n_agents())
        .map(|i| {
            let (o, ni) = (problem.offset(i), problem.dims()[i]);
            let grad = problem.objective(i, Role::Actual).gradient(x);
            let g = grad.rows(o, ni) - &prices[i];
            let xi = x.rows(o, ni).into_owned();
            let scale = grad.rows(o, ni).amax().max(prices[i].amax()).max(1.0);
            Ok(local_kkt_residual(&g, problem.local(i), &xi)? / scale)
        })
        .collect::<Result<_, MechanismError>>()?;
    Ok(EquilibriumReport { residuals })
}

/// How the `N + 1` VCG problems are solved.
#[derive(Debug, Clone, Default)]
pub enum Backend {
    #[default]
    Centralized,
    /// Each problem runs the distributed solver; agent `i`'s exclusion uses
    /// the graph with `i` removed, which must stay connected.
    Distributed { graph: CommGraph, params: SolverParams },
}

fn solve_for_vcg(problem: &CoupledProblem, backend: &Backend, graph: Option<&CommGraph>, label: &str) -> Result<(DVector<f64>, f64), MechanismError> {
    match backend {
        Backend::Centralized => {
            let sol = oracle::centralized_solve(problem)?;
            Ok((sol.x, sol.objective))
        }
        Backend::Distributed { params, .. } => {
            let graph = graph.expect("distributed backend always supplies a graph");
            let sol = ctadmm::solve(problem, graph, params, None)?;
            if !sol.converged {
                return Err(MechanismError::NotConverged(label.to_string()));
            }
            let value = problem.total_cost(&sol.x)?;
            Ok((sol.x, value))
        }
    }
}

/// VCG lump sums on the reported problem; net costs use true objectives.
pub fn vcg_payments(reported: &ReportedProblem, backend: &Backend) -> Result<MechanismOutcome, MechanismError> {
    vcg_payments_with(reported, backend, Report::True)
}

pub fn vcg_payments_with(
    reported: &ReportedProblem,
    backend: &Backend,
    evaluation: Report,
) -> Result<MechanismOutcome, MechanismError> {
    let p = &reported.reported;
    let n_agents = p.n_agents();
    let full_graph = match backend {
        Backend::Distributed { graph, .. } => Some(graph),
        Backend::Centralized => None,
    };
    let (x, _) = solve_for_vcg(p, backend, full_graph, "full problem")?;
    let others_opt: Vec<f64> = (0..n_agents)
        .into_par_iter()
        .map(|i| {
            let reduced = oracle::exclude_agent(p, i)?;
            let g = full_graph.map(|g| g.without_agent(i)).transpose()?;
            solve_for_vcg(&reduced, backend, g.as_ref(), &format!("without agent {i}")).map(|(_, v)| v)
        })
        .collect::<Result<_, MechanismError>>()?;
    let reported_costs: Vec<f64> = (0..n_agents)
        .map(|s| p.eval_cost(s, &x, Role::Actual))
        .collect::<Result<_, _>>()?;
    let total: f64 = reported_costs.iter().sum();
    let agents = (0..n_agents)
        .map(|i| {
            let payment = others_opt[i] - (total - reported_costs[i]);
            let cost = reported.eval_cost(i, &x, evaluation)?;
            Ok(AgentOutcome {
                payment,
                prices: None,
                cost,
                net_cost: cost - payment,
            })
        })
        .collect::<Result<_, MechanismError>>()?;
    Ok(MechanismOutcome {
        mechanism: Mechanism::Vcg,
        evaluation,
        x,
        agents,
    })
}

/// Solves the reported problem and applies `mechanism`.
pub fn run_mechanism(reported: &ReportedProblem, mechanism: Mechanism, evaluation: Report) -> Result<MechanismOutcome, MechanismError> {
    match mechanism {
        Mechanism::ShadowPricing => shadow_pricing(reported, evaluation),
        Mechanism::Vcg => vcg_payments_with(reported, &Backend::Centralized, evaluation),
    }
}

/// Maps each agent's private cost parameters `c_i` (length `p_i`) to its
/// linear objective block: the block equals `maps[i] · c_i` up to a constant
/// offset, so a parameter shift `δ` moves it by `maps[i] · δ`.
#[derive(Debug, Clone, PartialEq)]
pub struct CostParameterization {
    pub maps: Vec<DMatrix<f64>>,
}

impl CostParameterization {
    /// One parameter per decision variable.
    pub fn identity(problem: &CoupledProblem) -> Self {
        Self {
            maps: problem.dims().iter().map(|&n| DMatrix::identity(n, n)).collect(),
        }
    }

    pub fn n_params(&self, i: usize) -> usize {
        self.maps[i].ncols()
    }

    fn check(&self, problem: &CoupledProblem) -> Result<(), MechanismError> {
        if self.maps.len() != problem.n_agents()
            || self.maps.iter().zip(problem.dims()).any(|(m, &n)| m.nrows() != n)
        {
            return Err(MechanismError::DimensionMismatch(
                "cost map rows must match agent block sizes".into(),
            ));
        }
        Ok(())
    }
}

/// Agent `agent` adds `delta` to the selected cost parameters (all when
/// `indices` is `None`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MisreportSpec {
    pub agent: usize,
    pub delta: f64,
    pub indices: Option<Vec<usize>>,
}

/// Builds the reported problem from the truth and a set of misreports.
pub fn apply_misreports(
    truth: &CoupledProblem,
    params: &CostParameterization,
    specs: &[MisreportSpec],
) -> Result<ReportedProblem, MechanismError> {
    params.check(truth)?;
    let mut alg = truth.objectives(Role::Algorithmic).to_vec();
    let mut act = truth.objectives(Role::Actual).to_vec();
    for spec in specs {
        let i = spec.agent;
        if i >= truth.n_agents() {
            return Err(ProblemError::UnknownAgent {
                agent: i,
                n_agents: truth.n_agents(),
            }
            .into());
        }
        let p = params.n_params(i);
        let mut dc = DVector::zeros(p);
        match &spec.indices {
            None => dc.fill(spec.delta),
            Some(idx) => {
                for &k in idx {
                    if k >= p {
                        return Err(MechanismError::DimensionMismatch(format!(
                            "parameter index {k} out of range for agent {i} ({p} parameters)"
                        )));
                    }
                    dc[k] += spec.delta;
                }
            }
        }
        let shift = &params.maps[i] * dc;
        let o = truth.offset(i);
        let n = shift.len();
        alg[i].linear.rows_mut(o, n).add_assign(&shift);
        act[i].linear.rows_mut(o, n).add_assign(&shift);
    }
    let reported = truth.with_objectives(alg, act)?;
    Ok(ReportedProblem::new(truth.clone(), reported)?)
}

use std::ops::AddAssign;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub delta: f64,
    pub agent: usize,
    pub benefit: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    /// Benefits of every agent at grid point `delta`.
    pub fn at(&self, delta: f64) -> Vec<f64> {
        self.rows
            .iter()
            .filter(|r| r.delta == delta)
            .map(|r| r.benefit)
            .collect()
    }

    /// Columns `delta, agent, benefit`.
    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<(), csv::Error> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["delta", "agent", "benefit"])?;
        for r in &self.rows {
            wtr.write_record([format!("{}", r.delta), r.agent.to_string(), format!("{:e}", r.benefit)])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Agent `agent` shifts all its cost parameters by each `Δ` of the grid
/// while the others report truthfully; true-cost benefits of all agents.
pub fn misreport_sweep(
    truth: &CoupledProblem,
    params: &CostParameterization,
    agent: usize,
    grid: &[f64],
    mechanism: Mechanism,
) -> Result<SweepTable, MechanismError> {
    let per_delta: Vec<Vec<f64>> = grid
        .par_iter()
        .map(|&delta| {
            let reported = apply_misreports(
                truth,
                params,
                &[MisreportSpec {
                    agent,
                    delta,
                    indices: None,
                }],
            )?;
            Ok(run_mechanism(&reported, mechanism, Report::True)?.benefits())
        })
        .collect::<Result<_, MechanismError>>()?;
    let rows = grid
        .iter()
        .zip(per_delta)
        .flat_map(|(&delta, b)| {
            b.into_iter()
                .enumerate()
                .map(move |(agent, benefit)| SweepRow { delta, agent, benefit })
        })
        .collect();
    Ok(SweepTable { rows })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PortfolioSpec {
    pub n_cases: usize,
    pub seed: u64,
    /// Magnitudes are drawn from `U(−max_magnitude, max_magnitude)`.
    pub max_magnitude: f64,
    pub mechanism: Mechanism,
}

impl Default for PortfolioSpec {
    fn default() -> Self {
        Self {
            n_cases: 30,
            seed: 0,
            max_magnitude: 0.5,
            mechanism: Mechanism::ShadowPricing,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PortfolioCase {
    pub misreports: Vec<MisreportSpec>,
    pub benefits: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PortfolioTable {
    pub baseline: Vec<f64>,
    pub cases: Vec<PortfolioCase>,
}

impl PortfolioTable {
    /// Columns `case, agent, delta, n_perturbed, benefit`; the truthful
    /// baseline is labelled `baseline`.
    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<(), csv::Error> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["case", "agent", "delta", "n_perturbed", "benefit"])?;
        for (i, b) in self.baseline.iter().enumerate() {
            wtr.write_record(["baseline".into(), i.to_string(), "0".into(), "0".into(), format!("{b:e}")])?;
        }
        for (c, case) in self.cases.iter().enumerate() {
            for (spec, b) in case.misreports.iter().zip(&case.benefits) {
                let n = spec.indices.as_ref().map_or(0, Vec::len);
                wtr.write_record([
                    c.to_string(),
                    spec.agent.to_string(),
                    format!("{}", spec.delta),
                    n.to_string(),
                    format!("{b:e}"),
                ])?;
            }
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Draws one misreport per agent: a magnitude and a nonempty random subset
/// of its cost parameters.
pub fn sample_misreports<R: Rng>(params: &CostParameterization, max_magnitude: f64, rng: &mut R) -> Vec<MisreportSpec> {
    (0..params.maps.len())
        .map(|agent| {
            let p = params.n_params(agent);
            let delta = if max_magnitude > 0.0 {
                rng.gen_range(-max_magnitude..max_magnitude)
            } else {
                0.0
            };
            let mut indices: Vec<usize> = (0..p).filter(|_| rng.gen_bool(0.5)).collect();
            if indices.is_empty() && p > 0 {
                indices.push(rng.gen_range(0..p));
            }
            MisreportSpec {
                agent,
                delta,
                indices: Some(indices),
            }
        })
        .collect()
}

/// Every agent misreports a random subvector in each case.
pub fn misreport_portfolio(
    truth: &CoupledProblem,
    params: &CostParameterization,
    spec: &PortfolioSpec,
) -> Result<PortfolioTable, MechanismError> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let draws: Vec<Vec<MisreportSpec>> = (0..spec.n_cases)
        .map(|_| sample_misreports(params, spec.max_magnitude, &mut rng))
        .collect();
    let baseline = run_mechanism(&ReportedProblem::truthful(truth.clone()), spec.mechanism, Report::True)?.benefits();
    let cases = draws
        .into_par_iter()
        .map(|misreports| {
            let reported = apply_misreports(truth, params, &misreports)?;
            let benefits = run_mechanism(&reported, spec.mechanism, Report::True)?.benefits();
            Ok(PortfolioCase { misreports, benefits })
        })
        .collect::<Result<_, MechanismError>>()?;
    Ok(PortfolioTable { baseline, cases })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IcCase {
    pub agent: usize,
    pub fake: MisreportSpec,
    /// Co-reports of the other agents, shared by both evaluations.
    pub others: Vec<MisreportSpec>,
    pub net_cost_truthful: f64,
    pub net_cost_fake: f64,
}

impl IcCase {
    pub fn gain_from_lying(&self) -> f64 {
        self.net_cost_truthful - self.net_cost_fake
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IcReport {
    pub cases: Vec<IcCase>,
    pub tol: f64,
}

impl IcReport {
    pub fn violations(&self) -> Vec<&IcCase> {
        self.cases.iter().filter(|c| c.gain_from_lying() > self.tol).collect()
    }
}

/// Samples `n_cases` fakes (random agent, random co-reports) and compares
/// the liar's true net cost under VCG with and without its fake.
pub fn vcg_ic_check(
    truth: &CoupledProblem,
    params: &CostParameterization,
    n_cases: usize,
    max_magnitude: f64,
    seed: u64,
) -> Result<IcReport, MechanismError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_agents = truth.n_agents();
    let draws: Vec<(usize, Vec<MisreportSpec>)> = (0..n_cases)
        .map(|_| {
            let agent = rng.gen_range(0..n_agents);
            let mut specs = sample_misreports(params, max_magnitude, &mut rng);
            for (s, spec) in specs.iter_mut().enumerate() {
                if s != agent && rng.gen_bool(0.5) {
                    spec.delta = 0.0;
                }
            }
            (agent, specs)
        })
        .collect();
    let cases = draws
        .into_par_iter()
        .map(|(agent, specs)| {
            let others: Vec<MisreportSpec> = specs.iter().filter(|s| s.agent != agent).cloned().collect();
            let honest = apply_misreports(truth, params, &others)?;
            let lying = apply_misreports(truth, params, &specs)?;
            let u_true = vcg_payments(&honest, &Backend::Centralized)?.agents[agent].net_cost;
            let u_fake = vcg_payments(&lying, &Backend::Centralized)?.agents[agent].net_cost;
            Ok(IcCase {
                agent,
                fake: specs[agent].clone(),
                others,
                net_cost_truthful: u_true,
                net_cost_fake: u_fake,
            })
        })
        .collect::<Result<_, MechanismError>>()?;
    Ok(IcReport { cases, tol: 1e-8 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::{AgentSpec, Quadratic, assemble_problem};
    use crate::transport::{TransportInstance, three_supplier_star};

    fn example() -> CoupledProblem {
        TransportInstance::build(three_supplier_star(), 1, 4).unwrap().problem
    }

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    fn agent_one_fakes() -> ReportedProblem {
        let p = example();
        let params = CostParameterization::identity(&p);
        apply_misreports(
            &p,
            &params,
            &[MisreportSpec {
                agent: 0,
                delta: -1.0,
                indices: None,
            }],
        )
        .unwrap()
    }

    #[test]
    fn truthful_shadow_prices() {
        let p = example();
        let sol = oracle::centralized_solve(&p).unwrap();
        let pi = shadow_prices(&p, &sol.x, &sol.lambda).unwrap();
        let flat: Vec<f64> = pi.iter().map(|v| v[0]).collect();
        assert!(close(&flat, &[13.5, 13.0, 12.5], 1e-8));
        let out = sp_outcome(&ReportedProblem::truthful(p), &sol.x, &pi, Report::True).unwrap();
        assert!(close(&out.benefits(), &[169.0 / 18.0, 100.0 / 18.0, 49.0 / 18.0], 1e-8));
    }

    #[test]
    fn wrong_sign_is_rejected() {
        let p = example();
        let sol = oracle::centralized_solve(&p).unwrap();
        assert!(matches!(
            shadow_prices(&p, &sol.x, &-&sol.lambda),
            Err(MechanismError::ConventionMismatch { .. })
        ));
        let fixed = reconcile_dual_sign(&p, &sol.x, &-&sol.lambda, 1e-8).unwrap();
        assert!((fixed - &sol.lambda).amax() < 1e-12);
    }

    #[test]
    fn misreport_both_evaluations() {
        let rp = agent_one_fakes();
        let sol = oracle::centralized_solve(&rp.reported).unwrap();
        assert!(close(sol.x.as_slice(), &[2.5, 1.5, 1.0], 1e-8));
        assert!((sol.lambda[0] - 16.0).abs() < 1e-8);
        let pi = shadow_prices(&rp.reported, &sol.x, &sol.lambda).unwrap();
        let flat: Vec<f64> = pi.iter().map(|v| v[0]).collect();
        assert!(close(&flat, &[13.5, 12.5, 12.0], 1e-8));
        let truth = sp_outcome(&rp, &sol.x, &pi, Report::True).unwrap();
        assert!(close(&truth.benefits(), &[10.0, 4.5, 2.0], 1e-8));
        let rep = sp_outcome(&rp, &sol.x, &pi, Report::Reported).unwrap();
        assert!((rep.benefits()[0] - 12.5).abs() < 1e-8);
    }

    #[test]
    fn decoupled_prices_are_the_multiplier() {
        let agents = (0..2)
            .map(|i| {
                let mut h = DMatrix::zeros(2, 2);
                h[(i, i)] = 2.0;
                AgentSpec {
                    objective: Quadratic::new(h, DVector::zeros(2)),
                    actual: None,
                    coupling: DMatrix::from_element(1, 1, 1.0),
                    local: Polyhedron::boxed(&DVector::zeros(1), &DVector::from_element(1, 5.0)),
                }
            })
            .collect();
        let p = assemble_problem(agents, DVector::from_element(1, 2.0)).unwrap();
        let sol = oracle::centralized_solve(&p).unwrap();
        let pi = shadow_prices(&p, &sol.x, &sol.lambda).unwrap();
        assert!((pi[0][0] - sol.lambda[0]).abs() < 1e-12);
        assert!((pi[1][0] - sol.lambda[0]).abs() < 1e-12);
    }

    #[test]
    fn equilibrium_residuals() {
        let p = example();
        let sol = oracle::centralized_solve(&p).unwrap();
        let pi = shadow_prices(&p, &sol.x, &sol.lambda).unwrap();
        assert!(sp_equilibrium_check(&p, &sol.x, &pi).unwrap().max() < 1e-9);
        let mut moved = sol.x.clone();
        moved[0] += 0.5;
        moved[1] -= 0.5;
        assert!(sp_equilibrium_check(&p, &moved, &pi).unwrap().max() > 0.01);
    }

    #[test]
    fn vcg_example() {
        let out = vcg_payments(&ReportedProblem::truthful(example()), &Backend::Centralized).unwrap();
        let pay: Vec<f64> = out.agents.iter().map(|a| a.payment).collect();
        // 54.875 − (f(x*) − f_1), etc., with f(x*) = 287/6.
        let f = [715.0 / 36.0, 145.0 / 9.0, 0.0];
        let f3 = 287.0 / 6.0 - f[0] - f[1];
        let expect = [
            54.875 - (287.0 / 6.0 - f[0]),
            52.0 - (287.0 / 6.0 - f[1]),
            49.875 - (287.0 / 6.0 - f3),
        ];
        assert!(close(&pay, &expect, 1e-8), "{pay:?}");
        assert!(close(&pay, &[26.90, 20.28, 13.90], 1e-2));
        assert!(close(&out.benefits(), &[7.04, 4.17, 2.04], 1e-2));
    }

    #[test]
    fn vcg_ic_for_example_fake() {
        let p = example();
        let honest = vcg_payments(&ReportedProblem::truthful(p), &Backend::Centralized).unwrap();
        let lying = vcg_payments(&agent_one_fakes(), &Backend::Centralized).unwrap();
        assert!(honest.agents[0].net_cost <= lying.agents[0].net_cost + 1e-8);
    }

    #[test]
    fn zero_sweep_matches_truthful_outcome() {
        let p = example();
        let params = CostParameterization::identity(&p);
        let table = misreport_sweep(&p, &params, 0, &[-1.0, 0.0], Mechanism::ShadowPricing).unwrap();
        let truthful = shadow_pricing(&ReportedProblem::truthful(p), Report::True).unwrap();
        assert!(close(&table.at(0.0), &truthful.benefits(), 1e-10));
        assert!(table.at(-1.0)[0] > table.at(0.0)[0]);
    }

    #[test]
    fn portfolio_is_deterministic() {
        let p = example();
        let params = CostParameterization::identity(&p);
        let spec = PortfolioSpec {
            n_cases: 3,
            seed: 11,
            ..PortfolioSpec::default()
        };
        let a = misreport_portfolio(&p, &params, &spec).unwrap();
        let b = misreport_portfolio(&p, &params, &spec).unwrap();
        assert_eq!(a, b);
        let empty = misreport_portfolio(&p, &params, &PortfolioSpec { n_cases: 0, ..spec }).unwrap();
        assert!(empty.cases.is_empty());
        assert_eq!(empty.baseline.len(), 3);
    }

    #[test]
    fn payments_csv() {
        let out = shadow_pricing(&ReportedProblem::truthful(example()), Report::True).unwrap();
        let mut buf = Vec::new();
        out.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("agent,mechanism,payment,true_cost,net_cost,benefit\n0,shadow_pricing,"));
        assert_eq!(text.lines().count(), 4);
    }
}
