//! Dense convex QP kernel.
//!
//! Solves
//!
//! ```text
//! minimize    ½ xᵀ P x + qᵀ x
//! subject to  E x = h
//!             G x ≤ u
//! ```
//!
//! with an operator-splitting (ADMM) iteration on the stacked constraint
//! matrix, followed by an active-set polish that solves the reduced KKT
//! system exactly. Returned multipliers follow the stationarity convention
//! `P x + q + Eᵀλ + Gᵀα = 0`, `α ≥ 0`.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen, LU};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QpError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("Hessian is not symmetric (max asymmetry {0:.3e})")]
    AsymmetricHessian(f64),
    #[error("Hessian is not positive semidefinite (min eigenvalue {min_eigenvalue:.3e})")]
    NonPsdHessian { min_eigenvalue: f64 },
    #[error("problem is primal infeasible")]
    Infeasible,
    #[error("iteration limit {iterations} reached (primal residual {primal_residual:.3e}, dual residual {dual_residual:.3e})")]
    MaxIter {
        iterations: usize,
        primal_residual: f64,
        dual_residual: f64,
    },
    #[error("non-finite value encountered in the iteration")]
    NonFinite,
}

/// Problem data for [`solve_qp`].
#[derive(Debug, Clone, PartialEq)]
pub struct QpSpec {
    pub p: DMatrix<f64>,
    pub q: DVector<f64>,
    pub eq_matrix: DMatrix<f64>,
    pub eq_rhs: DVector<f64>,
    pub ineq_matrix: DMatrix<f64>,
    pub ineq_rhs: DVector<f64>,
}

impl QpSpec {
    /// Unconstrained problem; add rows with [`QpSpec::with_eq`] / [`QpSpec::with_ineq`].
    pub fn new(p: DMatrix<f64>, q: DVector<f64>) -> Self {
        let n = q.len();
        Self {
            p,
            q,
            eq_matrix: DMatrix::zeros(0, n),
            eq_rhs: DVector::zeros(0),
            ineq_matrix: DMatrix::zeros(0, n),
            ineq_rhs: DVector::zeros(0),
        }
    }

    pub fn with_eq(mut self, e: DMatrix<f64>, h: DVector<f64>) -> Self {
        self.eq_matrix = e;
        self.eq_rhs = h;
        self
    }

    pub fn with_ineq(mut self, g: DMatrix<f64>, u: DVector<f64>) -> Self {
        self.ineq_matrix = g;
        self.ineq_rhs = u;
        self
    }

    pub fn n(&self) -> usize {
        self.q.len()
    }

    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.p * x)) + self.q.dot(x)
    }

    pub fn kkt_residuals(&self, sol: &QpSolution) -> KktResiduals {
        kkt_residuals(
            &self.p,
            &self.q,
            &self.eq_matrix,
            &self.eq_rhs,
            &self.ineq_matrix,
            &self.ineq_rhs,
            &sol.x,
            &sol.eq_duals,
            &sol.ineq_duals,
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSettings {
    /// Absolute KKT tolerance, scaled by the data magnitude when it exceeds one.
    pub tol: f64,
    pub max_iter: usize,
    pub rho: f64,
    pub sigma: f64,
    pub alpha: f64,
    pub check_every: usize,
    pub check_psd: bool,
}

impl Default for QpSettings {
    fn default() -> Self {
        Self {
            tol: 1e-9,
            max_iter: 200_000,
            rho: 0.1,
            sigma: 1e-6,
            alpha: 1.6,
            check_every: 10,
            check_psd: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub x: DVector<f64>,
    /// `λ`, one per equality row.
    pub eq_duals: DVector<f64>,
    /// `α ≥ 0`, one per inequality row.
    pub ineq_duals: DVector<f64>,
    pub objective: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct KktResiduals {
    pub stationarity: f64,
    pub eq_feasibility: f64,
    pub ineq_feasibility: f64,
    pub dual_feasibility: f64,
    pub complementarity: f64,
}

impl KktResiduals {
    pub fn max(&self) -> f64 {
        self.stationarity
            .max(self.eq_feasibility)
            .max(self.ineq_feasibility)
            .max(self.dual_feasibility)
            .max(self.complementarity)
    }
}

#[allow(clippy::too_many_arguments)]
pub fn kkt_residuals(
    p: &DMatrix<f64>,
    q: &DVector<f64>,
    e: &DMatrix<f64>,
    h: &DVector<f64>,
    g: &DMatrix<f64>,
    u: &DVector<f64>,
    x: &DVector<f64>,
    lambda: &DVector<f64>,
    alpha: &DVector<f64>,
) -> KktResiduals {
    let grad = p * x + q + e.tr_mul(lambda) + g.tr_mul(alpha);
    let eq = if e.nrows() > 0 {
        (e * x - h).amax()
    } else {
        0.0
    };
    let (ineq, comp) = if g.nrows() > 0 {
        let slack = g * x - u;
        let ineq = slack.iter().map(|v| v.max(0.0)).fold(0.0, f64::max);
        let comp = slack
            .iter()
            .zip(alpha.iter())
            .map(|(s, a)| (s * a).abs())
            .fold(0.0, f64::max);
        (ineq, comp)
    } else {
        (0.0, 0.0)
    };
    let dual = alpha.iter().map(|a| (-a).max(0.0)).fold(0.0, f64::max);
    KktResiduals {
        stationarity: if grad.is_empty() { 0.0 } else { grad.amax() },
        eq_feasibility: eq,
        ineq_feasibility: ineq,
        dual_feasibility: dual,
        complementarity: comp,
    }
}

/// One-shot solve.
pub fn solve_qp(spec: &QpSpec, settings: &QpSettings) -> Result<QpSolution, QpError> {
    let mut solver = QpSolver::new(
        spec.p.clone(),
        spec.eq_matrix.clone(),
        spec.eq_rhs.clone(),
        spec.ineq_matrix.clone(),
        spec.ineq_rhs.clone(),
        settings.clone(),
    )?;
    solver.solve(&spec.q, None)
}

/// Reusable solver for a fixed Hessian and constraint set; only the linear
/// term changes between solves. The ADMM factorization is cached.
#[derive(Debug, Clone)]
pub struct QpSolver {
    p: DMatrix<f64>,
    e: DMatrix<f64>,
    h: DVector<f64>,
    g: DMatrix<f64>,
    u: DVector<f64>,
    /// `[E; G]`
    c: DMatrix<f64>,
    settings: QpSettings,
    rho: f64,
    factor: Option<Cholesky<f64, Dyn>>,
    constraint_scale: f64,
}

const EQ_RHO_SCALE: f64 = 1e3;
const RHO_MIN: f64 = 1e-6;
const RHO_MAX: f64 = 1e6;

impl QpSolver {
    pub fn new(
        p: DMatrix<f64>,
        e: DMatrix<f64>,
        h: DVector<f64>,
        g: DMatrix<f64>,
        u: DVector<f64>,
        settings: QpSettings,
    ) -> Result<Self, QpError> {
        let n = p.nrows();
        if p.ncols() != n {
            return Err(QpError::DimensionMismatch(format!(
                "P is {}x{}",
                p.nrows(),
                p.ncols()
            )));
        }
        if e.ncols() != n || e.nrows() != h.len() {
            return Err(QpError::DimensionMismatch(format!(
                "E is {}x{} with {} right-hand sides, expected {} columns",
                e.nrows(),
                e.ncols(),
                h.len(),
                n
            )));
        }
        if g.ncols() != n || g.nrows() != u.len() {
            return Err(QpError::DimensionMismatch(format!(
                "G is {}x{} with {} right-hand sides, expected {} columns",
                g.nrows(),
                g.ncols(),
                u.len(),
                n
            )));
        }
        if n > 0 {
            let asym = (&p - p.transpose()).amax();
            if asym > 1e-9 * p.amax().max(1.0) {
                return Err(QpError::AsymmetricHessian(asym));
            }
            if settings.check_psd {
                let min_eig = SymmetricEigen::new(p.clone())
                    .eigenvalues
                    .iter()
                    .copied()
                    .fold(f64::INFINITY, f64::min);
                if min_eig < -1e-10 * p.amax().max(1.0) {
                    return Err(QpError::NonPsdHessian {
                        min_eigenvalue: min_eig,
                    });
                }
            }
        }
        let mut c = DMatrix::zeros(e.nrows() + g.nrows(), n);
        c.rows_mut(0, e.nrows()).copy_from(&e);
        c.rows_mut(e.nrows(), g.nrows()).copy_from(&g);
        let constraint_scale = h
            .iter()
            .chain(u.iter())
            .filter(|v| v.is_finite())
            .fold(0.0_f64, |a, v| a.max(v.abs()));
        let rho = settings.rho;
        Ok(Self {
            p,
            e,
            h,
            g,
            u,
            c,
            settings,
            rho,
            factor: None,
            constraint_scale,
        })
    }

    pub fn n(&self) -> usize {
        self.p.nrows()
    }

    pub fn settings(&self) -> &QpSettings {
        &self.settings
    }

    fn me(&self) -> usize {
        self.e.nrows()
    }

    fn mi(&self) -> usize {
        self.g.nrows()
    }

    fn rho_vec(&self) -> DVector<f64> {
        let me = self.me();
        DVector::from_fn(me + self.mi(), |r, _| {
            if r < me {
                self.rho * EQ_RHO_SCALE
            } else {
                self.rho
            }
        })
    }

    fn refactor(&mut self) -> Result<(), QpError> {
        let n = self.n();
        let rho = self.rho_vec();
        let mut k = self.p.clone();
        for i in 0..n {
            k[(i, i)] += self.settings.sigma;
        }
        if self.c.nrows() > 0 {
            let mut rc = self.c.clone();
            for (r, mut row) in rc.row_iter_mut().enumerate() {
                row *= rho[r];
            }
            k += self.c.tr_mul(&rc);
        }
        self.factor = Some(Cholesky::new(k).ok_or(QpError::NonPsdHessian {
            min_eigenvalue: f64::NAN,
        })?);
        Ok(())
    }

    fn tolerance(&self, q: &DVector<f64>) -> f64 {
        let scale = q
            .amax()
            .max(self.constraint_scale)
            .max(if self.p.is_empty() { 0.0 } else { self.p.amax() });
        self.settings.tol * scale.max(1.0)
    }

    /// Solves with linear term `q`, optionally warm-started from a previous
    /// solution (same dimensions).
    pub fn solve(
        &mut self,
        q: &DVector<f64>,
        warm: Option<&QpSolution>,
    ) -> Result<QpSolution, QpError> {
        let n = self.n();
        let me = self.me();
        let mi = self.mi();
        let m = me + mi;
        if q.len() != n {
            return Err(QpError::DimensionMismatch(format!(
                "q has length {}, expected {}",
                q.len(),
                n
            )));
        }
        let tol = self.tolerance(q);

        let (mut x, mut y) = match warm {
            Some(w) if w.x.len() == n && w.eq_duals.len() == me && w.ineq_duals.len() == mi => {
                let mut y = DVector::zeros(m);
                y.rows_mut(0, me).copy_from(&w.eq_duals);
                y.rows_mut(me, mi).copy_from(&w.ineq_duals);
                (w.x.clone(), y)
            }
            _ => (DVector::zeros(n), DVector::zeros(m)),
        };
        let mut z = self.project(&(&self.c * &x));

        if let Some(sol) = self.polish(q, &x, &z, &y, tol, 0) {
            return Ok(sol);
        }

        if self.factor.is_none() {
            self.refactor()?;
        }
        let alpha = self.settings.alpha;
        let sigma = self.settings.sigma;
        let check_every = self.settings.check_every.max(1);
        let mut polish_threshold = 1e-3 * (1.0 + tol / self.settings.tol);
        let mut last_polish = 0usize;
        let mut prim_res = f64::INFINITY;
        let mut dual_res = f64::INFINITY;

        for iter in 1..=self.settings.max_iter {
            let rho = self.rho_vec();
            let y_prev = y.clone();
            let mut rhs = &x * sigma - q;
            if m > 0 {
                let w = z.component_mul(&rho) - &y;
                rhs += self.c.tr_mul(&w);
            }
            let x_tilde = self
                .factor
                .as_ref()
                .expect("factorized above")
                .solve(&rhs);
            let z_tilde = &self.c * &x_tilde;
            x = &x_tilde * alpha + &x * (1.0 - alpha);
            let z_hat = &z_tilde * alpha + &z * (1.0 - alpha);
            let z_new = self.project(&(&z_hat + y.component_div(&rho)));
            y += (&z_hat - &z_new).component_mul(&rho);
            z = z_new;

            if iter % check_every != 0 && iter != self.settings.max_iter {
                continue;
            }
            if !x.iter().all(|v| v.is_finite()) || !y.iter().all(|v| v.is_finite()) {
                return Err(QpError::NonFinite);
            }
            prim_res = if m > 0 {
                (&self.c * &x - &z).amax()
            } else {
                0.0
            };
            let px = &self.p * &x;
            let cty = self.c.tr_mul(&y);
            dual_res = if n > 0 { (&px + q + &cty).amax() } else { 0.0 };

            if m > 0 && self.certifies_infeasibility(&(&y - &y_prev)) {
                return Err(QpError::Infeasible);
            }

            let due = iter - last_polish >= 50 * check_every;
            if (prim_res <= polish_threshold && dual_res <= polish_threshold) || due {
                last_polish = iter;
                if let Some(sol) = self.polish(q, &x, &z, &y, tol, iter) {
                    return Ok(sol);
                }
                let (lam, alp) = self.split_duals(&y);
                let res = kkt_residuals(
                    &self.p, q, &self.e, &self.h, &self.g, &self.u, &x, &lam, &alp,
                );
                if res.max() <= tol {
                    return Ok(self.finish(q, x, lam, alp, iter));
                }
                polish_threshold = (polish_threshold * 0.1).max(tol * 1e-3);
            }

            if iter % (5 * check_every) == 0 && m > 0 {
                let prim_norm = (&self.c * &x).amax().max(z.amax()).max(1e-12);
                let dual_norm = px.amax().max(cty.amax()).max(q.amax()).max(1e-12);
                let ratio = ((prim_res / prim_norm) / (dual_res / dual_norm).max(1e-300)).sqrt();
                if ratio.is_finite() && ratio > 0.0 {
                    let new_rho = (self.rho * ratio).clamp(RHO_MIN, RHO_MAX);
                    if new_rho > 5.0 * self.rho || new_rho < 0.2 * self.rho {
                        self.rho = new_rho;
                        self.refactor()?;
                    }
                }
            }
        }
        Err(QpError::MaxIter {
            iterations: self.settings.max_iter,
            primal_residual: prim_res,
            dual_residual: dual_res,
        })
    }

    fn project(&self, v: &DVector<f64>) -> DVector<f64> {
        let me = self.me();
        DVector::from_fn(v.len(), |r, _| {
            if r < me {
                self.h[r]
            } else {
                v[r].min(self.u[r - me])
            }
        })
    }

    fn split_duals(&self, y: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let me = self.me();
        (
            y.rows(0, me).into_owned(),
            y.rows(me, self.mi()).into_owned(),
        )
    }

    fn certifies_infeasibility(&self, dy: &DVector<f64>) -> bool {
        let me = self.me();
        let norm = dy.amax();
        if norm < 1e-10 {
            return false;
        }
        let eps = 1e-7 * norm;
        if self.c.tr_mul(dy).amax() > eps {
            return false;
        }
        let mut support = 0.0;
        for (r, &d) in dy.iter().enumerate() {
            if r < me {
                support += self.h[r] * d;
            } else {
                // Lower bound is -inf: a negative component has unbounded support.
                if d < -eps {
                    return false;
                }
                support += self.u[r - me] * d.max(0.0);
            }
        }
        support < -eps
    }

    fn finish(
        &self,
        q: &DVector<f64>,
        x: DVector<f64>,
        eq_duals: DVector<f64>,
        ineq_duals: DVector<f64>,
        iterations: usize,
    ) -> QpSolution {
        let objective = 0.5 * x.dot(&(&self.p * &x)) + q.dot(&x);
        QpSolution {
            x,
            eq_duals,
            ineq_duals,
            objective,
            iterations,
        }
    }

    /// Guesses the active inequality set from an iterate, solves the reduced
    /// KKT system and accepts the result only if every KKT condition holds.
    fn polish(
        &self,
        q: &DVector<f64>,
        x: &DVector<f64>,
        z: &DVector<f64>,
        y: &DVector<f64>,
        tol: f64,
        iterations: usize,
    ) -> Option<QpSolution> {
        let me = self.me();
        let mi = self.mi();
        let mut active: Vec<usize> = (0..mi)
            .filter(|&j| self.u[j] - z[me + j] < y[me + j])
            .collect();
        let mut tried: Vec<Vec<usize>> = Vec::new();
        for _ in 0..8 {
            if tried.contains(&active) {
                return None;
            }
            tried.push(active.clone());
            let (xs, lam, alpha_active) = self.solve_reduced_kkt(q, x, y, &active)?;
            let slack = &self.g * &xs - &self.u;
            let mut next: Vec<usize> = Vec::with_capacity(active.len());
            let mut changed = false;
            for (k, &j) in active.iter().enumerate() {
                if alpha_active[k] < -tol {
                    changed = true;
                } else {
                    next.push(j);
                }
            }
            for j in 0..mi {
                if slack[j] > tol && !active.contains(&j) {
                    next.push(j);
                    changed = true;
                }
            }
            if !changed {
                let mut alpha = DVector::zeros(mi);
                for (k, &j) in active.iter().enumerate() {
                    alpha[j] = alpha_active[k].max(0.0);
                }
                let res = kkt_residuals(
                    &self.p, q, &self.e, &self.h, &self.g, &self.u, &xs, &lam, &alpha,
                );
                if res.max() <= tol {
                    return Some(self.finish(q, xs, lam, alpha, iterations));
                }
                return None;
            }
            next.sort_unstable();
            active = next;
        }
        None
    }

    /// Solves `[P Eᵀ G_Aᵀ; E 0 0; G_A 0 0] (x, λ, α_A) = (-q, h, u_A)` with a
    /// small regularization removed by iterative refinement, starting from
    /// the current iterate so null-space components stay put.
    fn solve_reduced_kkt(
        &self,
        q: &DVector<f64>,
        x0: &DVector<f64>,
        y0: &DVector<f64>,
        active: &[usize],
    ) -> Option<(DVector<f64>, DVector<f64>, DVector<f64>)> {
        let n = self.n();
        let me = self.me();
        let na = active.len();
        let dim = n + me + na;
        let mut k0 = DMatrix::<f64>::zeros(dim, dim);
        k0.view_mut((0, 0), (n, n)).copy_from(&self.p);
        for r in 0..me {
            for c in 0..n {
                let v = self.e[(r, c)];
                k0[(n + r, c)] = v;
                k0[(c, n + r)] = v;
            }
        }
        for (k, &j) in active.iter().enumerate() {
            for c in 0..n {
                let v = self.g[(j, c)];
                k0[(n + me + k, c)] = v;
                k0[(c, n + me + k)] = v;
            }
        }
        let mut b = DVector::<f64>::zeros(dim);
        b.rows_mut(0, n).copy_from(&(-q));
        b.rows_mut(n, me).copy_from(&self.h);
        for (k, &j) in active.iter().enumerate() {
            b[n + me + k] = self.u[j];
        }

        let scale = k0.amax().max(1.0);
        let delta = 1e-10 * scale;
        let mut kreg = k0.clone();
        for i in 0..dim {
            kreg[(i, i)] += if i < n { delta } else { -delta };
        }
        let lu = LU::new(kreg);

        let mut t = DVector::<f64>::zeros(dim);
        t.rows_mut(0, n).copy_from(x0);
        t.rows_mut(n, me).copy_from(&y0.rows(0, me));
        for (k, &j) in active.iter().enumerate() {
            t[n + me + k] = y0[me + j];
        }
        let b_scale = b.amax().max(1.0);
        for _ in 0..30 {
            let r = &b - &k0 * &t;
            if r.amax() <= 1e-15 * scale * b_scale.max(t.amax()) {
                break;
            }
            let step = lu.solve(&r)?;
            if !step.iter().all(|v| v.is_finite()) {
                return None;
            }
            t += step;
        }
        let x = t.rows(0, n).into_owned();
        let lam = t.rows(n, me).into_owned();
        let alpha = t.rows(n + me, na).into_owned();
        Some((x, lam, alpha))
    }
}
