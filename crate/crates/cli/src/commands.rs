use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use coupled_admm::ctadmm;
use coupled_admm::graph::{metropolis_weights, validate_weights};
use coupled_admm::mechanism::{
    self, Backend, Mechanism, MechanismOutcome, PortfolioSpec, reconciled_duals,
    shadow_prices_unchecked, sp_outcome,
};
use coupled_admm::oracle::centralized_solve;
use coupled_admm::MechanismError;
use coupled_admm::problem::ReportedProblem;

use crate::config::{self, BackendChoice, ExperimentConfig, GenerateSpec, MisreportConfig};
use crate::{CliError, Status};

/// A loaded config with overrides applied.
pub struct Run {
    pub config: ExperimentConfig,
    pub out: PathBuf,
}

impl Run {
    fn create(&self, name: &str) -> Result<BufWriter<File>, CliError> {
        std::fs::create_dir_all(&self.out).map_err(|e| CliError::io(&self.out, e))?;
        let path = self.out.join(name);
        File::create(&path).map(BufWriter::new).map_err(|e| CliError::io(&path, e))
    }

    fn misreport(&self) -> MisreportConfig {
        self.config.misreport.clone().unwrap_or_default()
    }
}

pub fn gen(config: Option<&Path>, scale: Option<&[usize]>, seed: Option<u64>, out: &Path) -> Result<Status, CliError> {
    let mut cfg = match (config, scale) {
        (Some(path), _) => ExperimentConfig::load(path)?,
        (None, Some(s)) => {
            if s.len() != 4 || s.contains(&0) {
                return Err(CliError::Config("--scale takes four positive integers N,M,K,R".into()));
            }
            let mut cfg = ExperimentConfig::new();
            cfg.generate = Some(GenerateSpec::Balanced {
                scale: [s[0], s[1], s[2], s[3]],
                seed: None,
            });
            cfg
        }
        (None, None) => return Err(CliError::Config("gen needs --scale or --config".into())),
    };
    if let Some(seed) = seed {
        cfg.seed = seed;
        if let Some(GenerateSpec::Balanced { seed: own, .. }) = cfg.generate.as_mut() {
            *own = Some(seed);
        }
    }
    let res = cfg.resolve()?;
    let written = ExperimentConfig {
        instance: None,
        generate: None,
        paths_per_pair: res.paths_per_pair,
        max_path_len: res.max_path_len,
        graph: Some(config::explicit(&res.graph)),
        network: Some(res.network.clone()),
        ..cfg
    };
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    std::fs::write(out, written.to_toml()?).map_err(|e| CliError::io(out, e))?;
    let net = &res.network;
    println!(
        "wrote {}: {} suppliers, {} demanders, {} commodities, {} edges",
        out.display(),
        net.suppliers.len(),
        net.demanders.len(),
        net.n_commodities,
        net.edges.len()
    );
    Ok(Status::Ok)
}

pub fn solve(run: &Run) -> Result<Status, CliError> {
    let exp = run.config.build()?;
    let problem = &exp.instance.problem;
    let params = run.config.solver_params();
    let central = centralized_solve(problem)?;
    let sol = ctadmm::solve(problem, &exp.graph, &params, Some(central.objective))?;
    sol.trace.write_csv(run.create("trace.csv")?)?;

    let mut wtr = csv::Writer::from_writer(run.create("solution.csv")?);
    wtr.write_record(["agent", "index", "x", "x_centralized"])?;
    for i in 0..problem.n_agents() {
        let o = problem.offset(i);
        for k in 0..problem.dims()[i] {
            wtr.write_record([
                i.to_string(),
                k.to_string(),
                format!("{:e}", sol.x[o + k]),
                format!("{:e}", central.x[o + k]),
            ])?;
        }
    }
    wtr.flush().map_err(|e| CliError::io(&run.out, e))?;

    let last = sol.trace.last();
    println!(
        "{} after {} iterations: rel_error {:.3e}, violation {:.3e}",
        if sol.converged { "converged" } else { "not converged" },
        sol.iterations,
        last.and_then(|r| r.rel_error).unwrap_or(f64::NAN),
        last.map_or(f64::NAN, |r| r.violation),
    );
    Ok(if sol.converged { Status::Ok } else { Status::NotConverged })
}

fn outcome(run: &Run, exp: &config::Experiment, which: Mechanism) -> Result<MechanismOutcome, CliError> {
    let mc = run.config.mechanism.clone().unwrap_or_default();
    let reported = ReportedProblem::truthful(exp.instance.problem.clone());
    let params = run.config.solver_params();
    let out = match (which, mc.backend) {
        (Mechanism::ShadowPricing, BackendChoice::Centralized) => mechanism::shadow_pricing(&reported, mc.evaluation)?,
        (Mechanism::ShadowPricing, BackendChoice::Distributed) => {
            let p = &reported.reported;
            let sol = ctadmm::solve(p, &exp.graph, &params, None)?;
            if !sol.converged {
                return Err(MechanismError::NotConverged("shadow-pricing solve".into()).into());
            }
            let (lambda, _) = reconciled_duals(p, &sol, 1e-4)?;
            let prices = shadow_prices_unchecked(p, &sol.x, &lambda);
            sp_outcome(&reported, &sol.x, &prices, mc.evaluation)?
        }
        (Mechanism::Vcg, backend) => {
            let backend = match backend {
                BackendChoice::Centralized => Backend::Centralized,
                BackendChoice::Distributed => Backend::Distributed {
                    graph: exp.graph.clone(),
                    params,
                },
            };
            mechanism::vcg_payments_with(&reported, &backend, mc.evaluation)?
        }
    };
    Ok(out)
}

pub fn mechanism(run: &Run) -> Result<Status, CliError> {
    let exp = run.config.build()?;
    let mut kinds = run.config.mechanism.clone().unwrap_or_default().mechanisms;
    kinds.dedup();
    if kinds.is_empty() {
        return Err(CliError::Config("mechanism.mechanisms is empty".into()));
    }
    let outcomes = kinds
        .iter()
        .map(|&k| outcome(run, &exp, k))
        .collect::<Result<Vec<_>, _>>()?;

    let mut wtr = csv::Writer::from_writer(run.create("payments.csv")?);
    wtr.write_record(["agent", "mechanism", "payment", "true_cost", "net_cost", "benefit"])?;
    let row = |agent: String, name: String, v: [f64; 4]| {
        let mut r = vec![agent, name];
        r.extend(v.iter().map(|x| format!("{x:e}")));
        r
    };
    let sums = |o: &MechanismOutcome| {
        o.agents.iter().fold([0.0; 4], |s, a| {
            [s[0] + a.payment, s[1] + a.cost, s[2] + a.net_cost, s[3] + a.benefit()]
        })
    };
    for o in &outcomes {
        for (i, a) in o.agents.iter().enumerate() {
            wtr.write_record(row(i.to_string(), o.mechanism.to_string(), [a.payment, a.cost, a.net_cost, a.benefit()]))?;
        }
        wtr.write_record(row("total".into(), o.mechanism.to_string(), sums(o)))?;
    }
    let sp = outcomes.iter().find(|o| o.mechanism == Mechanism::ShadowPricing);
    let vcg = outcomes.iter().find(|o| o.mechanism == Mechanism::Vcg);
    if let (Some(sp), Some(vcg)) = (sp, vcg) {
        let name = "sp_minus_vcg".to_string();
        for (i, (a, b)) in sp.agents.iter().zip(&vcg.agents).enumerate() {
            wtr.write_record(row(
                i.to_string(),
                name.clone(),
                [a.payment - b.payment, a.cost - b.cost, a.net_cost - b.net_cost, a.benefit() - b.benefit()],
            ))?;
        }
        let (s, v) = (sums(sp), sums(vcg));
        wtr.write_record(row("total".into(), name, [s[0] - v[0], s[1] - v[1], s[2] - v[2], s[3] - v[3]]))?;
    }
    wtr.flush().map_err(|e| CliError::io(&run.out, e))?;

    for o in &outcomes {
        let b: Vec<String> = o.benefits().iter().map(|v| format!("{v:.4}")).collect();
        println!("{}: total payout {:.4}, benefits [{}]", o.mechanism, o.total_payout(), b.join(", "));
    }
    Ok(Status::Ok)
}

pub fn misreport_sweep(run: &Run) -> Result<Status, CliError> {
    let exp = run.config.build()?;
    let mc = run.misreport();
    let params = exp.cost_parameterization(mc.level);
    // The truthful baseline always leads the table.
    let mut grid = vec![0.0];
    grid.extend(mc.sweep.grid.iter().copied().filter(|&d| d != 0.0));
    let table = mechanism::misreport_sweep(&exp.instance.problem, &params, mc.sweep.agent, &grid, mc.sweep.mechanism)?;
    table.write_csv(run.create("sweep.csv")?)?;
    println!("{} sweep rows for agent {}", table.rows.len(), mc.sweep.agent);
    Ok(Status::Ok)
}

pub fn misreport_portfolio(run: &Run) -> Result<Status, CliError> {
    let exp = run.config.build()?;
    let mc = run.misreport();
    let params = exp.cost_parameterization(mc.level);
    let spec = mc.portfolio.unwrap_or(PortfolioSpec {
        seed: run.config.seed,
        ..PortfolioSpec::default()
    });
    let table = mechanism::misreport_portfolio(&exp.instance.problem, &params, &spec)?;
    table.write_csv(run.create("portfolio.csv")?)?;
    println!("{} portfolio cases (seed {})", table.cases.len(), spec.seed);
    Ok(Status::Ok)
}

pub fn validate(run: &Run) -> Result<Status, CliError> {
    let exp = run.config.build()?;
    let p = &exp.instance.problem;
    println!(
        "instance: {} suppliers, {} variables, {} coupled rows, strictly convex: {}",
        p.n_agents(),
        p.n(),
        p.n_coupled(),
        p.is_strictly_convex()
    );
    println!("graph: {} agents, {} edges", exp.graph.n_agents(), exp.graph.edges().len());
    let w = metropolis_weights(&exp.graph);
    let report = validate_weights(&exp.graph, w.matrix())?;
    for c in &report.checks {
        println!(
            "  {:<24} {} (residual {:.1e})",
            c.name,
            if c.passed { "ok" } else { "FAILED" },
            c.residual
        );
    }
    if let Err(e) = centralized_solve(p) {
        println!("centralized solve failed: {e}");
        return Err(e.into());
    }
    if report.all_passed() {
        Ok(Status::Ok)
    } else {
        Err(CliError::Config(format!("weight matrix failed: {}", report.failures().join(", "))))
    }
}
