//! Closed forms for star networks: `N` suppliers, one demander, one
//! commodity, each supplier on its own spoke into a shared last edge.
//!
//! Supplier `i` ships `x_i ≥ 0` with path cost `c_i` per unit; congestion is
//! `c0` times the squared load on every edge, so its actual cost is
//! `c0·x_i·d + c0·x_i² + c_i·x_i`. Only the active set `T` ships.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::problem::CoupledProblem;
use crate::transport::{TransportError, TransportInstance, star_network};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StarError {
    #[error("star instance needs c0 > 0, d > 0 and at least one supplier")]
    Degenerate,
    #[error("misreport changes the active set")]
    ActiveSetChanged,
    #[error("equilibrium needs at least two active suppliers, found {0}")]
    DegenerateT(usize),
    #[error("unknown supplier {0}")]
    UnknownAgent(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StarInstance {
    pub c_norms: Vec<f64>,
    pub c0: f64,
    pub d: f64,
}

impl StarInstance {
    pub fn new(c_norms: Vec<f64>, c0: f64, d: f64) -> Result<Self, StarError> {
        let inst = Self { c_norms, c0, d };
        inst.check()?;
        Ok(inst)
    }

    fn check(&self) -> Result<(), StarError> {
        if self.c_norms.is_empty() || !(self.c0 > 0.0) || !(self.d > 0.0) {
            return Err(StarError::Degenerate);
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.c_norms.len()
    }

    /// The same instance as a transport problem.
    pub fn to_transport(&self) -> Result<TransportInstance, TransportError> {
        TransportInstance::build(star_network(&self.c_norms, self.c0, self.d), 1, 2)
    }

    pub fn to_problem(&self) -> Result<CoupledProblem, TransportError> {
        self.to_transport().map(|t| t.problem)
    }

    /// True actual cost of supplier `i` at `x`.
    pub fn cost(&self, i: usize, x: &DVector<f64>) -> f64 {
        let xi = x[i];
        self.c0 * xi * x.sum() + self.c0 * xi * xi + self.c_norms[i] * xi
    }

    fn with_costs(&self, c_norms: Vec<f64>) -> Self {
        Self { c_norms, ..*self }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StarOptimum {
    pub x: DVector<f64>,
    /// Multiplier of `Σx = d` in the `∇f = λ − Jᵀα` convention.
    pub lambda: f64,
    /// Multiplier of `x_i ≥ 0`; zero on the active set.
    pub alpha: Vec<f64>,
    /// Active suppliers in ascending cost order.
    pub active: Vec<usize>,
}

impl StarOptimum {
    pub fn is_active(&self, i: usize) -> bool {
        self.active.contains(&i)
    }
}

/// Grows `T` in ascending cost order (ties by index) while the next cost
/// is below `(2c0·d + Σ_T c)/|T|`.
pub fn active_set(inst: &StarInstance) -> Vec<usize> {
    let mut order: Vec<usize> = (0..inst.n()).collect();
    order.sort_by(|&a, &b| inst.c_norms[a].total_cmp(&inst.c_norms[b]).then(a.cmp(&b)));
    let mut active = vec![order[0]];
    let mut sum = inst.c_norms[order[0]];
    for &k in &order[1..] {
        if inst.c_norms[k] < (2.0 * inst.c0 * inst.d + sum) / active.len() as f64 {
            active.push(k);
            sum += inst.c_norms[k];
        } else {
            break;
        }
    }
    active
}

pub fn star_optimum(inst: &StarInstance) -> Result<StarOptimum, StarError> {
    inst.check()?;
    let active = active_set(inst);
    let t = active.len() as f64;
    let (c0, d) = (inst.c0, inst.d);
    let sum: f64 = active.iter().map(|&i| inst.c_norms[i]).sum();
    let lambda = 2.0 * (t + 1.0) / t * c0 * d + sum / t;
    let mut x = DVector::zeros(inst.n());
    let mut alpha = vec![0.0; inst.n()];
    for i in 0..inst.n() {
        if active.contains(&i) {
            x[i] = d / t + (sum / t - inst.c_norms[i]) / (2.0 * c0);
        } else {
            alpha[i] = inst.c_norms[i] - (2.0 * c0 * d + sum) / t;
        }
    }
    Ok(StarOptimum {
        x,
        lambda,
        alpha,
        active,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct StarPrices {
    pub prices: Vec<f64>,
    /// `−u_i` under truthful reports.
    pub benefits: Vec<f64>,
}

pub fn star_prices_utilities(inst: &StarInstance) -> Result<StarPrices, StarError> {
    let opt = star_optimum(inst)?;
    let t = opt.active.len() as f64;
    let (c0, d) = (inst.c0, inst.d);
    let sum: f64 = opt.active.iter().map(|&i| inst.c_norms[i]).sum();
    let k = |i: usize| 2.0 * c0 * d + sum - t * inst.c_norms[i];
    let prices = (0..inst.n())
        .map(|i| {
            if opt.is_active(i) {
                (t + 3.0) / t * c0 * d + 1.5 / t * sum - 0.5 * inst.c_norms[i]
            } else {
                (t + 2.0) / t * c0 * d + sum / t
            }
        })
        .collect();
    let benefits = (0..inst.n())
        .map(|i| {
            if opt.is_active(i) {
                k(i).powi(2) / (2.0 * c0 * t * t)
            } else {
                0.0
            }
        })
        .collect();
    Ok(StarPrices { prices, benefits })
}

/// Allocation and prices for reported costs `c + deltas`, with true-cost
/// benefits. The active set follows the reported costs.
pub fn star_true_benefits(inst: &StarInstance, deltas: &[f64]) -> Result<(StarOptimum, Vec<f64>, Vec<f64>), StarError> {
    if deltas.len() != inst.n() {
        return Err(StarError::UnknownAgent(deltas.len()));
    }
    let reported = inst.with_costs(inst.c_norms.iter().zip(deltas).map(|(c, dl)| c + dl).collect());
    let opt = star_optimum(&reported)?;
    let prices = star_prices_utilities(&reported)?.prices;
    let benefits = (0..inst.n())
        .map(|i| prices[i] * opt.x[i] - inst.cost(i, &opt.x))
        .collect();
    Ok((opt, prices, benefits))
}

#[derive(Debug, Clone, PartialEq)]
pub struct StarMisreport {
    pub x: DVector<f64>,
    pub prices: Vec<f64>,
    /// True-cost benefits of all suppliers.
    pub benefits: Vec<f64>,
}

/// Supplier `i` reports `c_i + Δ`; everyone else is truthful.
pub fn star_misreport(inst: &StarInstance, i: usize, delta: f64) -> Result<StarMisreport, StarError> {
    if i >= inst.n() {
        return Err(StarError::UnknownAgent(i));
    }
    let truthful = star_optimum(inst)?;
    let mut deltas = vec![0.0; inst.n()];
    deltas[i] = delta;
    let reported = inst.with_costs(inst.c_norms.iter().zip(&deltas).map(|(c, dl)| c + dl).collect());
    let opt = star_optimum(&reported)?;
    let mut a = opt.active.clone();
    let mut b = truthful.active.clone();
    a.sort_unstable();
    b.sort_unstable();
    if a != b {
        return Err(StarError::ActiveSetChanged);
    }
    let prices = star_prices_utilities(&reported)?.prices;
    let base = star_prices_utilities(inst)?.benefits;
    let t = truthful.active.len() as f64;
    let c0 = inst.c0;
    let sum: f64 = truthful.active.iter().map(|&s| inst.c_norms[s]).sum();
    let benefits = (0..inst.n())
        .map(|s| {
            if !truthful.is_active(s) {
                return 0.0;
            }
            let k = 2.0 * c0 * inst.d + sum - t * inst.c_norms[s];
            if s == i {
                base[s] - (t - 2.0) / (2.0 * c0 * t * t) * delta * k - (t - 1.0) / (2.0 * c0 * t * t) * delta * delta
            } else {
                base[s] + delta * k / (c0 * t * t) + delta * delta / (2.0 * c0 * t * t)
            }
        })
        .collect();
    Ok(StarMisreport {
        x: opt.x,
        prices,
        benefits,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct StarEquilibrium {
    /// Misreport of every supplier; zero outside `T`.
    pub deltas: Vec<f64>,
    /// True-cost benefits when everyone in `T` misreports by `deltas`.
    pub benefits: Vec<f64>,
}

/// Mutual best responses when every active supplier shifts its reported
/// cost and inactive ones stay truthful.
pub fn star_misreport_equilibrium(inst: &StarInstance) -> Result<StarEquilibrium, StarError> {
    let opt = star_optimum(inst)?;
    let t_count = opt.active.len();
    if t_count < 2 {
        return Err(StarError::DegenerateT(t_count));
    }
    let t = t_count as f64;
    let (c0, d) = (inst.c0, inst.d);
    let sum: f64 = opt.active.iter().map(|&i| inst.c_norms[i]).sum();
    let base = star_prices_utilities(inst)?.benefits;
    let mut deltas = vec![0.0; inst.n()];
    let mut benefits = vec![0.0; inst.n()];
    for &i in &opt.active {
        let spread = sum - t * inst.c_norms[i];
        deltas[i] = -(t - 2.0) / (t * (t - 1.0)) * (2.0 * c0 * d + (t - 1.0) * spread);
        benefits[i] = base[i]
            - (t - 2.0) / (2.0 * c0 * t * t * (t - 1.0)) * (4.0 * c0 * c0 * d * d - (t - 1.0) * spread * spread);
    }
    Ok(StarEquilibrium { deltas, benefits })
}
