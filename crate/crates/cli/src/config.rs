//! Experiment configuration files.
//!
//! One TOML format serves both as an experiment description and as an
//! instance file: `gen` writes a config carrying an explicit network and
//! communication graph, and any config may point at another one through
//! `instance` to reuse its network.

use std::path::{Path, PathBuf};

use coupled_admm::ctadmm::SolverParams;
use coupled_admm::mechanism::{CostParameterization, Mechanism, PortfolioSpec};
use coupled_admm::problem::Report;
use coupled_admm::transport::{Scale, TransportInstance, TransportNetwork, generate_balanced, star_with_edge_costs};
use coupled_admm::CommGraph;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    /// Seed for everything random that has no seed of its own.
    #[serde(default)]
    pub seed: u64,
    /// Another config file whose network and graph are reused.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub instance: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generate: Option<GenerateSpec>,
    #[serde(default = "default_paths", skip_serializing_if = "is_default_paths")]
    pub paths_per_pair: usize,
    #[serde(default = "default_max_len", skip_serializing_if = "is_default_max_len")]
    pub max_path_len: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub solver: Option<SolverParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mechanism: Option<MechanismConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub misreport: Option<MisreportConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub graph: Option<GraphChoice>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub network: Option<TransportNetwork>,
}

fn default_paths() -> usize {
    1
}

fn is_default_paths(r: &usize) -> bool {
    *r == default_paths()
}

fn default_max_len() -> usize {
    4
}

fn is_default_max_len(l: &usize) -> bool {
    *l == default_max_len()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "template", rename_all = "snake_case", deny_unknown_fields)]
pub enum GenerateSpec {
    /// Seeded balanced hub network of scale `(N, M, K, R)`.
    Balanced {
        scale: [usize; 4],
        #[serde(default)]
        seed: Option<u64>,
    },
    /// Single-commodity star; one edge-cost vector per supplier, spokes first
    /// and the shared edge last.
    Star { edge_costs: Vec<Vec<f64>>, c0: f64, demand: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum GraphChoice {
    Explicit {
        n_agents: usize,
        edges: Vec<(usize, usize)>,
    },
    Complete,
    Ring,
    Path,
    /// Connected Erdős–Rényi draw; `p` defaults to `2 ln N / N`.
    ErdosRenyi {
        #[serde(default)]
        p: Option<f64>,
        #[serde(default)]
        seed: Option<u64>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BackendChoice {
    #[default]
    Centralized,
    Distributed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MechanismConfig {
    pub mechanisms: Vec<Mechanism>,
    pub evaluation: Report,
    pub backend: BackendChoice,
}

impl Default for MechanismConfig {
    fn default() -> Self {
        Self {
            mechanisms: vec![Mechanism::ShadowPricing, Mechanism::Vcg],
            evaluation: Report::True,
            backend: BackendChoice::Centralized,
        }
    }
}

/// Which cost parameters a misreport shifts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MisreportLevel {
    /// One parameter per path variable.
    #[default]
    Path,
    /// The supplier's private per-edge costs.
    Edge,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub agent: usize,
    pub grid: Vec<f64>,
    pub mechanism: Mechanism,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            agent: 0,
            grid: Vec::new(),
            mechanism: Mechanism::ShadowPricing,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct MisreportConfig {
    pub level: MisreportLevel,
    pub sweep: SweepConfig,
    /// Falls back to the top-level seed when the portfolio seed is absent.
    pub portfolio: Option<PortfolioSpec>,
}

impl ExperimentConfig {
    pub fn new() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            seed: 0,
            instance: None,
            generate: None,
            paths_per_pair: default_paths(),
            max_path_len: default_max_len(),
            output_dir: None,
            solver: None,
            mechanism: None,
            misreport: None,
            graph: None,
            network: None,
        }
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: Self = toml::from_str(text)?;
        if cfg.schema_version != SCHEMA_VERSION {
            return Err(CliError::Config(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                cfg.schema_version
            )));
        }
        if cfg.paths_per_pair == 0 || cfg.max_path_len == 0 {
            return Err(CliError::Config("paths_per_pair and max_path_len must be positive".into()));
        }
        Ok(cfg)
    }

    /// Reads a config; a relative `instance` path is resolved against the
    /// directory of the file that names it.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let mut cfg = Self::parse(&text)?;
        if let Some(inst) = &cfg.instance {
            if inst.is_relative() {
                let base = path.parent().unwrap_or(Path::new("."));
                cfg.instance = Some(base.join(inst));
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String, CliError> {
        toml::to_string(self).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn solver_params(&self) -> SolverParams {
        self.solver.clone().unwrap_or_default()
    }

    /// The network this config describes: inline, referenced, or generated.
    pub fn resolve_network(&self) -> Result<(TransportNetwork, usize, usize, Option<GraphChoice>), CliError> {
        let sources = [self.network.is_some(), self.instance.is_some(), self.generate.is_some()];
        match sources.iter().filter(|&&s| s).count() {
            0 => return Err(CliError::Config("config needs one of network, instance or generate".into())),
            1 => {}
            _ => return Err(CliError::Config("network, instance and generate are mutually exclusive".into())),
        }
        if let Some(net) = &self.network {
            return Ok((net.clone(), self.paths_per_pair, self.max_path_len, self.graph.clone()));
        }
        if let Some(path) = &self.instance {
            let inner = Self::load(path)?;
            if inner.instance.is_some() {
                return Err(CliError::Config(format!(
                    "{} refers to another instance; only one level is followed",
                    path.display()
                )));
            }
            let (net, r, l, g) = inner.resolve_network()?;
            return Ok((net, r, l, self.graph.clone().or(g)));
        }
        let generated = self.generate.as_ref().expect("checked above");
        let (net, r) = generate(generated, self.seed)?;
        Ok((net, r, self.max_path_len, self.graph.clone()))
    }

    /// Network and communication graph without assembling the problem,
    /// which for large instances dominates time and memory.
    pub fn resolve(&self) -> Result<Resolved, CliError> {
        let (network, paths_per_pair, max_path_len, graph) = self.resolve_network()?;
        network.validate()?;
        let graph = build_comm_graph(graph.as_ref(), network.suppliers.len(), self.seed)?;
        Ok(Resolved {
            network,
            graph,
            paths_per_pair,
            max_path_len,
        })
    }

    pub fn build(&self) -> Result<Experiment, CliError> {
        let r = self.resolve()?;
        let instance = TransportInstance::build(r.network, r.paths_per_pair, r.max_path_len)?;
        Ok(Experiment {
            instance,
            graph: r.graph,
        })
    }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::new()
    }
}

pub fn generate(spec: &GenerateSpec, seed: u64) -> Result<(TransportNetwork, usize), CliError> {
    match spec {
        GenerateSpec::Balanced { scale, seed: own } => {
            let [n, m, k, r] = *scale;
            let net = generate_balanced(Scale { n, m, k, r }, own.unwrap_or(seed))?;
            Ok((net, r))
        }
        GenerateSpec::Star {
            edge_costs,
            c0,
            demand,
        } => {
            let n = edge_costs.len();
            if n == 0 || edge_costs.iter().any(|c| c.len() != n + 1) {
                return Err(CliError::Config(format!(
                    "a star with {n} suppliers needs {} edge costs per supplier",
                    n + 1
                )));
            }
            Ok((star_with_edge_costs(edge_costs.clone(), *c0, *demand), 1))
        }
    }
}

pub fn build_comm_graph(choice: Option<&GraphChoice>, n: usize, seed: u64) -> Result<CommGraph, CliError> {
    let default = GraphChoice::ErdosRenyi { p: None, seed: None };
    let g = match choice.unwrap_or(&default) {
        GraphChoice::Explicit { n_agents, edges } => {
            if *n_agents != n {
                return Err(CliError::Config(format!(
                    "graph has {n_agents} agents but the instance has {n} suppliers"
                )));
            }
            coupled_admm::graph::build_graph(n, edges)?
        }
        GraphChoice::Complete => CommGraph::complete(n)?,
        GraphChoice::Ring if n < 3 => CommGraph::path(n)?,
        GraphChoice::Ring => CommGraph::ring(n)?,
        GraphChoice::Path => CommGraph::path(n)?,
        GraphChoice::ErdosRenyi { p, seed: own } => {
            let mut rng = ChaCha8Rng::seed_from_u64(own.unwrap_or(seed));
            CommGraph::erdos_renyi(n, p.unwrap_or_else(|| CommGraph::default_er_probability(n)), &mut rng)?
        }
    };
    Ok(g)
}

pub fn explicit(graph: &CommGraph) -> GraphChoice {
    GraphChoice::Explicit {
        n_agents: graph.n_agents(),
        edges: graph.edges().to_vec(),
    }
}

#[derive(Debug, Clone)]
pub struct Resolved {
    pub network: TransportNetwork,
    pub graph: CommGraph,
    pub paths_per_pair: usize,
    pub max_path_len: usize,
}

/// A fully built experiment: transport instance plus communication graph.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub instance: TransportInstance,
    pub graph: CommGraph,
}

impl Experiment {
    pub fn cost_parameterization(&self, level: MisreportLevel) -> CostParameterization {
        match level {
            MisreportLevel::Path => CostParameterization::identity(&self.instance.problem),
            MisreportLevel::Edge => CostParameterization {
                maps: self.instance.edge_cost_maps(),
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_generated_config_parses() {
        let cfg = ExperimentConfig::parse(
            r#"
            schema_version = 1
            [generate]
            template = "balanced"
            scale = [4, 2, 3, 2]
            "#,
        )
        .unwrap();
        let exp = cfg.build().unwrap();
        assert_eq!(exp.instance.problem.n_agents(), 4);
        assert_eq!(exp.graph.n_agents(), 4);
    }

    #[test]
    fn wrong_schema_version_is_rejected() {
        let err = ExperimentConfig::parse("schema_version = 7").unwrap_err();
        assert!(err.to_string().contains("schema_version"));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(ExperimentConfig::parse("schema_version = 1\nsigma = 2.0").is_err());
    }

    #[test]
    fn written_instances_round_trip() {
        let mut cfg = ExperimentConfig::new();
        cfg.generate = Some(GenerateSpec::Balanced {
            scale: [3, 1, 2, 2],
            seed: Some(5),
        });
        let exp = cfg.build().unwrap();
        let mut out = ExperimentConfig::new();
        out.paths_per_pair = 2;
        out.network = Some(exp.instance.network.clone());
        out.graph = Some(explicit(&exp.graph));
        let back = ExperimentConfig::parse(&out.to_toml().unwrap()).unwrap();
        assert_eq!(back, out);
    }

    #[test]
    fn star_template_checks_cost_lengths() {
        let spec = GenerateSpec::Star {
            edge_costs: vec![vec![1.0, 0.0, 1.0]],
            c0: 1.0,
            demand: 1.0,
        };
        assert!(generate(&spec, 0).is_err());
    }
}
