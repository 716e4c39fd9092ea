#![allow(dead_code)]

use coupled_admm::problem::{AgentSpec, CoupledProblem, Polyhedron, Quadratic, assemble_problem};
use coupled_admm::star::StarInstance;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random PSD matrix `LLᵀ + shift·I` of size `n` with rank-`r` factor.
pub fn random_psd(rng: &mut ChaCha8Rng, n: usize, r: usize, shift: f64) -> DMatrix<f64> {
    let l = DMatrix::from_fn(n, r, |_, _| rng.gen_range(-1.0..1.0));
    &l * l.transpose() + DMatrix::identity(n, n) * shift
}

/// Agents with full-vector PSD objectives, random coupling rows and boxes
/// `[0, 3]`; `d` is the coupled image of an interior point.
pub fn random_quadratic_problem(seed: u64, n_agents: usize, dim: usize, n_coupled: usize) -> CoupledProblem {
    let (agents, d) = random_agents(seed, n_agents, dim, n_coupled);
    assemble_problem(agents, d).unwrap()
}

pub fn random_agents(seed: u64, n_agents: usize, dim: usize, n_coupled: usize) -> (Vec<AgentSpec>, DVector<f64>) {
    let mut rng = rng(seed);
    let n = n_agents * dim;
    let interior: Vec<DVector<f64>> = (0..n_agents)
        .map(|_| DVector::from_fn(dim, |_, _| rng.gen_range(0.5..2.5)))
        .collect();
    let mut d = DVector::zeros(n_coupled);
    let agents: Vec<AgentSpec> = (0..n_agents)
        .map(|i| {
            let a = DMatrix::from_fn(n_coupled, dim, |_, _| rng.gen_range(0.2..1.5));
            d += &a * &interior[i];
            AgentSpec {
                objective: Quadratic::new(
                    random_psd(&mut rng, n, 2, 0.0) + embed_identity(n, i * dim, dim, 0.5),
                    DVector::from_fn(n, |_, _| rng.gen_range(-2.0..2.0)),
                ),
                actual: None,
                coupling: a,
                local: Polyhedron::boxed(&DVector::zeros(dim), &DVector::from_element(dim, 3.0)),
            }
        })
        .collect();
    (agents, d)
}

fn embed_identity(n: usize, offset: usize, dim: usize, scale: f64) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(n, n);
    for k in offset..offset + dim {
        m[(k, k)] = scale;
    }
    m
}

/// Star with `N ∈ [2, 7]` suppliers, costs `U(0.5, 6)`, `c0 ∈ [0.5, 2]`
/// and `d ∈ [1, 10]`.
pub fn random_star(rng: &mut ChaCha8Rng) -> StarInstance {
    let n = rng.gen_range(2..=7);
    let c = (0..n).map(|_| rng.gen_range(0.5..6.0)).collect();
    StarInstance::new(c, rng.gen_range(0.5..2.0), rng.gen_range(1.0..10.0)).unwrap()
}
