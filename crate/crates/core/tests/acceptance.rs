//! End-to-end acceptance checks. Prints one line per criterion and exits
//! non-zero if any fails.

mod common;

use std::process::ExitCode;
use std::time::{Duration, Instant};

use common::{random_quadratic_problem, random_star, rng};
use coupled_admm::ctadmm::{self, CtAdmm, DistributedSolution, IterRecord, Mode, SolverParams, INVARIANT_TOL};
use coupled_admm::graph::{CommGraph, build_graph, metropolis_weights, validate_weights};
use coupled_admm::mechanism::{
    self, Backend, CostParameterization, MisreportSpec, reconciled_duals, shadow_pricing, shadow_prices,
    shadow_prices_unchecked, sp_equilibrium_check, sp_outcome, vcg_ic_check, vcg_payments,
};
use coupled_admm::oracle::centralized_solve;
use coupled_admm::problem::{CoupledProblem, Report, ReportedProblem};
use coupled_admm::star::{StarInstance, star_misreport_equilibrium, star_optimum, star_prices_utilities};
use coupled_admm::transport::{Scale, TransportInstance, generate_balanced, three_supplier_star};
use nalgebra::DVector;
use rand::Rng;

struct Outcome {
    passed: bool,
    detail: String,
}

fn pass_if(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

/// Largest identity residuals seen across every distributed run of the suite.
#[derive(Default)]
struct InvariantLog {
    runs: usize,
    rows: usize,
    worst: f64,
}

impl InvariantLog {
    fn record(&mut self, problem: &CoupledProblem, rows: &[IterRecord]) {
        let scale = problem.d().amax().max(1.0);
        self.runs += 1;
        self.rows += rows.len();
        for r in rows {
            let lam = r.lambda_bar.iter().fold(1.0_f64, |a, v| a.max(v.abs()));
            self.worst = self
                .worst
                .max(r.tracking_residual / scale)
                .max(r.dual_recursion_residual / scale.max(lam));
        }
    }
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn three_supplier() -> CoupledProblem {
    TransportInstance::build(three_supplier_star(), 1, 4).unwrap().problem
}

fn agent_one_fakes(p: &CoupledProblem) -> ReportedProblem {
    mechanism::apply_misreports(
        p,
        &CostParameterization::identity(p),
        &[MisreportSpec {
            agent: 0,
            delta: -1.0,
            indices: None,
        }],
    )
    .unwrap()
}

fn distributed(p: &CoupledProblem, g: &CommGraph, params: &SolverParams, f_star: Option<f64>, log: &mut InvariantLog) -> DistributedSolution {
    let sol = ctadmm::solve(p, g, params, f_star).unwrap();
    log.record(p, &sol.trace.rows);
    sol
}

fn criterion_1(log: &mut InvariantLog) -> Outcome {
    let start = Instant::now();
    let p = three_supplier();
    let x_ref = [13.0 / 6.0, 5.0 / 3.0, 7.0 / 6.0];
    let u_ref = [9.38, 5.56, 2.72];
    let truthful = ReportedProblem::truthful(p.clone());

    let central = centralized_solve(&p).unwrap();
    let pi = shadow_prices(&p, &central.x, &central.lambda).unwrap();
    let u_c = sp_outcome(&truthful, &central.x, &pi, Report::True).unwrap().benefits();

    let g = CommGraph::complete(3).unwrap();
    let sol = distributed(&p, &g, &SolverParams::default(), Some(central.objective), log);
    let (lambda, _) = reconciled_duals(&p, &sol, 1e-4).unwrap();
    let pi_d = shadow_prices_unchecked(&p, &sol.x, &lambda);
    let u_d = sp_outcome(&truthful, &sol.x, &pi_d, Report::True).unwrap().benefits();

    let ex = max_diff(central.x.as_slice(), &x_ref).max(max_diff(sol.x.as_slice(), &x_ref));
    let eu = max_diff(&u_c, &u_ref).max(max_diff(&u_d, &u_ref));
    let elapsed = start.elapsed();
    pass_if(
        ex <= 1e-4 && eu <= 1e-2 && elapsed < Duration::from_secs(5),
        format!("x err {ex:.1e}, benefit err {eu:.1e} vs (9.38, 5.56, 2.72), {} iters, {elapsed:.2?}", sol.iterations),
    )
}

fn criterion_2() -> Outcome {
    let p = three_supplier();
    let rp = agent_one_fakes(&p);
    let sol = centralized_solve(&rp.reported).unwrap();
    let pi = shadow_prices(&rp.reported, &sol.x, &sol.lambda).unwrap();
    let truth = sp_outcome(&rp, &sol.x, &pi, Report::True).unwrap().benefits();
    let reported = sp_outcome(&rp, &sol.x, &pi, Report::Reported).unwrap().benefits();
    let ex = max_diff(sol.x.as_slice(), &[2.5, 1.5, 1.0]);
    let e_rep = (reported[0] - 12.5).abs();
    let e_true = max_diff(&truth, &[10.0, 4.5, 2.0]);
    pass_if(
        ex <= 1e-4 && e_rep <= 1e-2 && e_true <= 1e-2,
        format!(
            "x' err {ex:.1e}; agent 1 benefit {:.4} (reported costs), {:.4} (true costs); others ({:.4}, {:.4})",
            reported[0], truth[0], truth[1], truth[2]
        ),
    )
}

struct DeskRun {
    problem: CoupledProblem,
    solution: DistributedSolution,
    lambda_c: DVector<f64>,
    elapsed: Duration,
}

/// Seeded (4, 2, 3, 2) balanced instance on a 4-ring with σ = ρ = 1.
fn desk_run(log: &mut InvariantLog) -> DeskRun {
    let start = Instant::now();
    let net = generate_balanced(Scale { n: 4, m: 2, k: 3, r: 2 }, 42).unwrap();
    let problem = TransportInstance::build(net, 2, 4).unwrap().problem;
    let central = centralized_solve(&problem).unwrap();
    let g = CommGraph::ring(4).unwrap();
    let params = SolverParams {
        max_iter: 2000,
        violation_tol: 1e-8,
        rel_error_tol: 1e-9,
        ..SolverParams::default()
    };
    let solution = distributed(&problem, &g, &params, Some(central.objective), log);
    DeskRun {
        problem,
        solution,
        lambda_c: central.lambda,
        elapsed: start.elapsed(),
    }
}

fn criterion_3(run: &DeskRun) -> Outcome {
    let rows = &run.solution.trace.rows;
    let finite = rows.iter().all(|r| {
        r.violation.is_finite()
            && r.rel_error.is_some_and(f64::is_finite)
            && r.eps1_norm.is_finite()
            && r.eps2_norm.is_finite()
            && r.lambda_bar.iter().all(|v| v.is_finite())
    });
    let first_hit = rows
        .iter()
        .find(|r| r.violation <= 1e-4 && r.rel_error.unwrap_or(f64::INFINITY) <= 1e-4)
        .map(|r| r.iter);
    // Trend: each tenth of the run ends below where the previous tenth ended.
    let chunk = (rows.len() / 10).max(1);
    let marks: Vec<f64> = rows.chunks(chunk).map(|c| c.last().unwrap().violation).collect();
    let trending = marks.windows(2).all(|w| w[1] <= w[0]);
    let last = rows.last().unwrap();
    pass_if(
        finite && first_hit.is_some() && trending && run.elapsed < Duration::from_secs(60),
        format!(
            "rel err and violation ≤ 1e-4 at iter {}, stopped at {} (viol {:.1e}, rel {:.1e}), {:.2?}",
            first_hit.map_or("never".into(), |k| k.to_string()),
            run.solution.iterations,
            last.violation,
            last.rel_error.unwrap_or(f64::NAN),
            run.elapsed
        ),
    )
}

fn criterion_4(log: &InvariantLog) -> Outcome {
    pass_if(
        log.runs > 0 && log.worst <= INVARIANT_TOL,
        format!("worst scaled residual {:.1e} over {} runs, {} iterations", log.worst, log.runs, log.rows),
    )
}

fn criterion_5(run: &DeskRun) -> Outcome {
    let (_, lambdas) = reconciled_duals(&run.problem, &run.solution, 1e-4).unwrap();
    let dual_err = lambdas
        .iter()
        .map(|l| (l - &run.lambda_c).norm())
        .fold(0.0, f64::max);
    let last = run.solution.trace.last().unwrap();
    pass_if(
        run.solution.converged && dual_err <= 1e-4 && last.eps1_norm <= 1e-6 && last.eps2_norm <= 1e-6,
        format!(
            "max_i ‖λ_i − λ*‖ {dual_err:.1e}, ‖ε₁‖ {:.1e}, ‖ε₂‖ {:.1e}",
            last.eps1_norm, last.eps2_norm
        ),
    )
}

fn criterion_6(log: &mut InvariantLog) -> Outcome {
    let mut worst = 0.0_f64;
    let mut iters = 0;
    for seed in 0..10u64 {
        let n_agents = 3 + (seed as usize % 3);
        let p = random_quadratic_problem(500 + seed, n_agents, 2 + (seed as usize % 2), 2);
        let g = CommGraph::ring(n_agents).unwrap();
        let mk = |mode| {
            CtAdmm::new(
                &p,
                &g,
                SolverParams {
                    mode,
                    ..SolverParams::default()
                },
            )
            .unwrap()
        };
        let (mut a, mut b) = (mk(Mode::Plain), mk(Mode::Accelerated));
        let mut rows = Vec::new();
        for _ in 0..150 {
            rows.push(a.step().unwrap());
            b.step().unwrap();
            iters += 1;
            for (sa, sb) in a.states().iter().zip(b.states()) {
                worst = worst.max((&sa.y - &sb.y).amax()).max((&sa.lambda - &sb.lambda).amax());
            }
        }
        log.record(&p, &rows);
    }
    pass_if(worst <= 1e-8, format!("max iterate gap {worst:.1e} over {iters} paired iterations"))
}

fn criterion_7() -> Outcome {
    let start = Instant::now();
    let mut worst = 0.0_f64;
    for seed in 0..100u64 {
        let inst = random_star(&mut rng(7000 + seed));
        let p = inst.to_problem().unwrap();
        let opt = star_optimum(&inst).unwrap();
        let closed = star_prices_utilities(&inst).unwrap();
        let central = centralized_solve(&p).unwrap();
        let sp = shadow_pricing(&ReportedProblem::truthful(p), Report::True).unwrap();
        let prices: Vec<f64> = sp.agents.iter().map(|a| a.prices.as_ref().unwrap()[0]).collect();
        worst = worst
            .max((&opt.x - &central.x).amax())
            .max((opt.lambda.abs() - central.lambda[0].abs()).abs())
            .max(max_diff(&prices, &closed.prices))
            .max(max_diff(&sp.benefits(), &closed.benefits));
    }
    let elapsed = start.elapsed();
    pass_if(
        worst <= 1e-7 && elapsed < Duration::from_secs(30),
        format!("max gap {worst:.1e} on 100 stars, {elapsed:.2?}"),
    )
}

/// Stars and small balanced transports used by the mechanism criteria.
fn mechanism_instances() -> Vec<CoupledProblem> {
    let mut out = Vec::new();
    for seed in 0..25u64 {
        out.push(random_star(&mut rng(8000 + seed)).to_problem().unwrap());
    }
    for seed in 0..25u64 {
        let mut r = rng(9000 + seed);
        let scale = Scale {
            n: r.gen_range(2..=4),
            m: r.gen_range(1..=2),
            k: r.gen_range(1..=2),
            r: r.gen_range(1..=2),
        };
        let net = generate_balanced(scale, seed).unwrap();
        out.push(TransportInstance::build(net, scale.r, 4).unwrap().problem);
    }
    out
}

/// Minimizes a convex function on `[lo, hi]` by ternary search.
fn ternary(lo: f64, hi: f64, f: impl Fn(f64) -> f64) -> f64 {
    let (mut a, mut b) = (lo, hi);
    for _ in 0..200 {
        let m1 = a + (b - a) / 3.0;
        let m2 = b - (b - a) / 3.0;
        if f(m1) <= f(m2) {
            b = m2;
        } else {
            a = m1;
        }
    }
    0.5 * (a + b)
}

/// Three-supplier VCG payments by direct search on the simplex, using only the
/// star cost formula.
fn brute_force_example_vcg() -> Vec<f64> {
    let inst = StarInstance::new(vec![2.0, 3.0, 4.0], 1.0, 5.0).unwrap();
    let d = inst.d;
    let total = |x: &DVector<f64>| (0..3).map(|i| inst.cost(i, x)).sum::<f64>();
    let pair_opt = |gone: usize| {
        let [a, b] = match gone {
            0 => [1, 2],
            1 => [0, 2],
            _ => [0, 1],
        };
        let at = |t: f64| {
            let mut x = DVector::zeros(3);
            x[a] = t;
            x[b] = d - t;
            x
        };
        total(&at(ternary(0.0, d, |t| total(&at(t)))))
    };
    let inner = |x1: f64| {
        let at = |t: f64| DVector::from_column_slice(&[x1, t, d - x1 - t]);
        total(&at(ternary(0.0, d - x1, |t| total(&at(t)))))
    };
    let x1 = ternary(0.0, d, inner);
    let x2 = ternary(0.0, d - x1, |t| total(&DVector::from_column_slice(&[x1, t, d - x1 - t])));
    let x = DVector::from_column_slice(&[x1, x2, d - x1 - x2]);
    (0..3).map(|i| pair_opt(i) - (total(&x) - inst.cost(i, &x))).collect()
}

fn criterion_8(instances: &[CoupledProblem]) -> Outcome {
    let mut worst_u = f64::NEG_INFINITY;
    let mut ic_cases = 0;
    let mut ic_violations = 0;
    for (k, p) in instances.iter().enumerate() {
        let out = vcg_payments(&ReportedProblem::truthful(p.clone()), &Backend::Centralized).unwrap();
        worst_u = out.net_costs().into_iter().fold(worst_u, f64::max);
        let report = vcg_ic_check(p, &CostParameterization::identity(p), 5, 1.0, 100 + k as u64).unwrap();
        ic_cases += report.cases.len();
        ic_violations += report.violations().len();
    }
    let pay: Vec<f64> = vcg_payments(&ReportedProblem::truthful(three_supplier()), &Backend::Centralized)
        .unwrap()
        .agents
        .iter()
        .map(|a| a.payment)
        .collect();
    let brute = brute_force_example_vcg();
    let e_brute = max_diff(&pay, &brute);
    let e_ref = max_diff(&pay, &[26.90, 20.28, 13.90]);
    pass_if(
        worst_u <= 1e-8 && ic_violations == 0 && e_brute <= 1e-6 && e_ref <= 1e-2,
        format!(
            "max truthful u {worst_u:.1e}; {ic_violations}/{ic_cases} IC violations; three-supplier Π ({:.3}, {:.3}, {:.3}), brute-force gap {e_brute:.1e}",
            pay[0], pay[1], pay[2]
        ),
    )
}

fn criterion_9(instances: &[CoupledProblem]) -> Outcome {
    let mut worst_u = f64::NEG_INFINITY;
    let mut worst_kkt = 0.0_f64;
    for p in instances {
        let central = centralized_solve(p).unwrap();
        let pi = shadow_prices(p, &central.x, &central.lambda).unwrap();
        let out = sp_outcome(&ReportedProblem::truthful(p.clone()), &central.x, &pi, Report::True).unwrap();
        worst_u = out.net_costs().into_iter().fold(worst_u, f64::max);
        worst_kkt = worst_kkt.max(sp_equilibrium_check(p, &central.x, &pi).unwrap().max());
    }
    pass_if(
        worst_u <= 1e-8 && worst_kkt <= 1e-6,
        format!("max truthful u {worst_u:.1e}, max best-response KKT residual {worst_kkt:.1e}"),
    )
}

/// True-cost benefit of `agent` when every supplier reports `c + deltas`,
/// through the full solve-and-price pipeline.
fn pipeline_benefit(p: &CoupledProblem, deltas: &[f64], agent: usize) -> f64 {
    let specs: Vec<MisreportSpec> = deltas
        .iter()
        .enumerate()
        .map(|(i, &delta)| MisreportSpec {
            agent: i,
            delta,
            indices: None,
        })
        .collect();
    let rp = mechanism::apply_misreports(p, &CostParameterization::identity(p), &specs).unwrap();
    shadow_pricing(&rp, Report::True).unwrap().agents[agent].benefit()
}

fn criterion_10() -> Outcome {
    let mut r = rng(10_000);
    let mut worst_fd = 0.0_f64;
    let mut worst_sum = 0.0_f64;
    let mut used = 0;
    let mut tried = 0;
    let h = 1e-5;
    while used < 20 {
        tried += 1;
        let inst = random_star(&mut r);
        let opt = star_optimum(&inst).unwrap();
        let t = opt.active.len();
        if t <= 2 {
            continue;
        }
        let eq = star_misreport_equilibrium(&inst).unwrap();
        // The closed forms assume the lies leave the active set unchanged.
        let lied = StarInstance::new(
            inst.c_norms.iter().zip(&eq.deltas).map(|(c, d)| c + d).collect(),
            inst.c0,
            inst.d,
        )
        .unwrap();
        let mut a = star_optimum(&lied).unwrap().active;
        let mut b = opt.active.clone();
        a.sort_unstable();
        b.sort_unstable();
        if a != b || opt.x.iter().zip(0..).any(|(x, i)| opt.active.contains(&i) && *x < 1e-3) {
            continue;
        }
        let tf = t as f64;
        let expected = -(tf - 2.0) / (tf - 1.0) * 2.0 * inst.c0 * inst.d;
        worst_sum = worst_sum.max((eq.deltas.iter().sum::<f64>() - expected).abs());
        let p = inst.to_problem().unwrap();
        for &i in &opt.active {
            let mut up = eq.deltas.clone();
            let mut down = eq.deltas.clone();
            up[i] += h;
            down[i] -= h;
            let fd = (pipeline_benefit(&p, &up, i) - pipeline_benefit(&p, &down, i)) / (2.0 * h);
            worst_fd = worst_fd.max(fd.abs());
        }
        used += 1;
    }
    pass_if(
        worst_fd <= 1e-4 && worst_sum <= 1e-8,
        format!("max |∂u_i/∂Δ_i| {worst_fd:.1e}, Σ Δ gap {worst_sum:.1e} ({used} of {tried} sampled stars)"),
    )
}

fn criterion_11() -> Outcome {
    let mut r = rng(11_000);
    let mut failures = 0;
    for _ in 0..200 {
        let n = r.gen_range(1..=20);
        let mut edges = Vec::new();
        for k in 1..n {
            edges.push((r.gen_range(0..k), k));
        }
        let p = r.gen_range(0.0..0.5);
        for i in 0..n {
            for j in i + 1..n {
                if !edges.contains(&(i, j)) && r.gen_bool(p) {
                    edges.push((i, j));
                }
            }
        }
        let g = build_graph(n, &edges).unwrap();
        let w = metropolis_weights(&g);
        if !validate_weights(&g, w.matrix()).unwrap().all_passed() {
            failures += 1;
        }
    }
    pass_if(failures == 0, format!("{failures} of 200 random connected graphs failed validation"))
}

fn main() -> ExitCode {
    let mut log = InvariantLog::default();
    let c1 = criterion_1(&mut log);
    let c2 = criterion_2();
    let desk = desk_run(&mut log);
    let c3 = criterion_3(&desk);
    let c5 = criterion_5(&desk);
    let c6 = criterion_6(&mut log);
    let c4 = criterion_4(&log);
    let c7 = criterion_7();
    let instances = mechanism_instances();
    let c8 = criterion_8(&instances);
    let c9 = criterion_9(&instances);
    let c10 = criterion_10();
    let c11 = criterion_11();

    let results = [
        ("three-supplier truthful shadow pricing", c1),
        ("three-supplier misreport", c2),
        ("desk-scale convergence", c3),
        ("per-iteration invariants", c4),
        ("dual consensus", c5),
        ("plain/accelerated equivalence", c6),
        ("star closed forms vs pipeline", c7),
        ("VCG IR, IC and three-supplier payments", c8),
        ("shadow-pricing IR and equilibrium", c9),
        ("misreport equilibrium", c10),
        ("weight-matrix suite", c11),
    ];
    let mut failed = 0;
    for (k, (name, o)) in results.iter().enumerate() {
        let tag = if o.passed { "PASS" } else { "FAIL" };
        println!("criterion {:>2} {tag}  {name}: {}", k + 1, o.detail);
        if !o.passed {
            failed += 1;
        }
    }
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed == 0 { ExitCode::SUCCESS } else { ExitCode::FAILURE }
}
