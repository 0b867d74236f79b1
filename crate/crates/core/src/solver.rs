//! Box-constrained Levenberg–Marquardt with an augmented-Lagrangian outer
//! loop for inequality constraints.

use std::fmt;

use thiserror::Error;

use crate::linalg::{all_finite, Matrix, Vector};

/// Least-squares problem `min ‖r(z)‖²` over a box, subject to `g(z) ≤ 0`.
pub trait ResidualProblem {
    fn dim(&self) -> usize;

    /// Residuals `r(z)` and inequality constraints `g(z)`; problems without
    /// constraints return an empty `g`.
    fn evaluate(&self, z: &Vector) -> (Vector, Vector);

    /// Analytic Jacobians of `r` and `g`; `None` selects forward differences.
    fn jacobians(&self, _z: &Vector) -> Option<(Matrix, Matrix)> {
        None
    }

    fn lower(&self) -> &[f64];

    fn upper(&self) -> &[f64];
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig {
    pub max_iterations: usize,
    pub gradient_tol: f64,
    pub step_tol: f64,
    pub initial_damping: f64,
    pub damping_increase: f64,
    pub damping_decrease: f64,
    pub max_damping: f64,
    pub fd_step: f64,
    pub penalty_start: f64,
    pub penalty_growth: f64,
    pub penalty_max: f64,
    pub feasibility_tol: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            max_iterations: 200,
            gradient_tol: 1e-8,
            step_tol: 1e-10,
            initial_damping: 1e-3,
            damping_increase: 10.0,
            damping_decrease: 10.0,
            max_damping: 1e12,
            fd_step: 1e-6,
            penalty_start: 1.0,
            penalty_growth: 10.0,
            penalty_max: 1e8,
            feasibility_tol: 1e-6,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<(), SolverError> {
        let positive = [
            ("gradient_tol", self.gradient_tol),
            ("step_tol", self.step_tol),
            ("initial_damping", self.initial_damping),
            ("max_damping", self.max_damping),
            ("fd_step", self.fd_step),
            ("penalty_start", self.penalty_start),
            ("penalty_max", self.penalty_max),
            ("feasibility_tol", self.feasibility_tol),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(SolverError::Config(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [
            ("damping_increase", self.damping_increase),
            ("damping_decrease", self.damping_decrease),
            ("penalty_growth", self.penalty_growth),
        ] {
            if !(v > 1.0 && v.is_finite()) {
                return Err(SolverError::Config(format!("{name} must exceed 1, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    Converged,
    MaxIterations,
    Stalled,
    InfeasiblePenalty,
}

impl Termination {
    pub fn as_str(self) -> &'static str {
        match self {
            Termination::Converged => "converged",
            Termination::MaxIterations => "max_iter",
            Termination::Stalled => "stalled",
            Termination::InfeasiblePenalty => "infeasible_penalty",
        }
    }
}

impl fmt::Display for Termination {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverReport {
    pub iterations: usize,
    pub gradient_norm: f64,
    pub termination: Termination,
    pub penalty_rounds: usize,
    pub constraint_slack: f64,
    pub initial_objective: f64,
    pub final_objective: f64,
}

impl SolverReport {
    /// `Stalled` counts as success when the projected gradient is already tiny
    /// relative to the objective: the damping blew up because no representable
    /// step could decrease `‖r‖²` any further.
    pub fn converged(&self) -> bool {
        match self.termination {
            Termination::Converged => true,
            Termination::Stalled => self.gradient_norm <= 1e-6 * self.final_objective.max(1.0),
            _ => false,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolverError {
    #[error("non-finite residual at iterate {iterate:?}")]
    NonFinite { iterate: Vec<f64> },
    #[error("start point has {got} entries, problem dimension is {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("invalid solver configuration: {0}")]
    Config(String),
}

pub fn project(z: &mut Vector, lower: &[f64], upper: &[f64]) {
    for ((x, l), u) in z.iter_mut().zip(lower).zip(upper) {
        *x = x.clamp(*l, *u);
    }
}

/// Forward-difference Jacobians of `(r, g)` with step `fd_step · max(|z_i|, 1)`,
/// stepping backwards where the upper bound would be crossed.
pub fn jacobian_fd<P: ResidualProblem + ?Sized>(problem: &P, z: &Vector, fd_step: f64) -> (Matrix, Matrix) {
    let (r0, g0) = problem.evaluate(z);
    let upper = problem.upper();
    let mut jr = Matrix::zeros(r0.len(), z.len());
    let mut jg = Matrix::zeros(g0.len(), z.len());
    let mut zp = z.clone();
    for i in 0..z.len() {
        let mut h = fd_step * z[i].abs().max(1.0);
        if z[i] + h > upper[i] {
            h = -h;
        }
        zp[i] = z[i] + h;
        let (rp, gp) = problem.evaluate(&zp);
        zp[i] = z[i];
        jr.set_column(i, &((rp - &r0) / h));
        jg.set_column(i, &((gp - &g0) / h));
    }
    (jr, jg)
}

/// `‖r‖² + Σ ρ·max(0, g_i + λ_i/ρ)²` written as a plain residual stack.
struct Augmented<'a, P: ?Sized> {
    problem: &'a P,
    rho: f64,
    lambda: Vector,
    fd_step: f64,
}

impl<P: ResidualProblem + ?Sized> Augmented<'_, P> {
    fn shifted(&self, g: &Vector) -> Vector {
        g.zip_map(&self.lambda, |gi, li| (gi + li / self.rho).max(0.0))
    }

    fn residuals(&self, z: &Vector) -> Vector {
        let (r, g) = self.problem.evaluate(z);
        let s = self.shifted(&g) * self.rho.sqrt();
        let mut out = Vector::zeros(r.len() + s.len());
        out.rows_mut(0, r.len()).copy_from(&r);
        out.rows_mut(r.len(), s.len()).copy_from(&s);
        out
    }

    fn jacobian(&self, z: &Vector) -> Matrix {
        let (jr, jg) = self
            .problem
            .jacobians(z)
            .unwrap_or_else(|| jacobian_fd(self.problem, z, self.fd_step));
        let (_, g) = self.problem.evaluate(z);
        let s = self.shifted(&g);
        let mut out = Matrix::zeros(jr.nrows() + jg.nrows(), z.len());
        out.view_mut((0, 0), jr.shape()).copy_from(&jr);
        let sp = self.rho.sqrt();
        for i in 0..jg.nrows() {
            if s[i] > 0.0 {
                out.set_row(jr.nrows() + i, &(jg.row(i) * sp));
            }
        }
        out
    }
}

fn projected_gradient_norm(z: &Vector, g: &Vector, lower: &[f64], upper: &[f64]) -> f64 {
    let mut norm = 0.0f64;
    for i in 0..z.len() {
        let gi = g[i];
        let blocked = (z[i] <= lower[i] && gi > 0.0) || (z[i] >= upper[i] && gi < 0.0);
        if !blocked {
            norm = norm.max(gi.abs());
        }
    }
    norm
}

struct Inner {
    z: Vector,
    iterations: usize,
    gradient_norm: f64,
    termination: Termination,
}

fn levenberg_marquardt<P: ResidualProblem + ?Sized>(
    problem: &Augmented<'_, P>,
    z0: Vector,
    cfg: &SolverConfig,
    budget: usize,
) -> Result<Inner, SolverError> {
    let (lower, upper) = (problem.problem.lower(), problem.problem.upper());
    let mut z = z0;
    let mut r = problem.residuals(&z);
    if !all_finite(&r) {
        return Err(SolverError::NonFinite { iterate: z.iter().copied().collect() });
    }
    let mut objective = r.norm_squared();
    let mut lambda = cfg.initial_damping;
    let n = z.len();
    let mut gradient_norm = f64::INFINITY;

    for iter in 0..budget {
        let jac = problem.jacobian(&z);
        // Objective gradient is 2 Jᵀr; the factor is irrelevant for the tests below.
        let g = jac.tr_mul(&r);
        gradient_norm = 2.0 * projected_gradient_norm(&z, &g, lower, upper);
        if gradient_norm <= cfg.gradient_tol {
            return Ok(Inner { z, iterations: iter, gradient_norm, termination: Termination::Converged });
        }

        // Variables pinned at a bound with the gradient pushing outward stay fixed.
        let free: Vec<usize> = (0..n)
            .filter(|&i| !((z[i] <= lower[i] && g[i] > 0.0) || (z[i] >= upper[i] && g[i] < 0.0)))
            .collect();
        let jtj_full = jac.tr_mul(&jac);
        let k = free.len();
        let jtj = Matrix::from_fn(k, k, |a, b| jtj_full[(free[a], free[b])]);
        let gf = Vector::from_fn(k, |a, _| g[free[a]]);
        let diag_floor = 1e-12 * (0..k).map(|a| jtj[(a, a)]).fold(0.0, f64::max).max(1e-300);

        loop {
            let mut a = jtj.clone();
            for d in 0..k {
                a[(d, d)] += lambda * jtj[(d, d)].max(diag_floor);
            }
            let step = a.cholesky().map(|c| -c.solve(&gf));
            if let Some(step) = step.filter(all_finite) {
                let mut trial = z.clone();
                for (a, &i) in free.iter().enumerate() {
                    trial[i] += step[a];
                }
                project(&mut trial, lower, upper);
                let r_trial = problem.residuals(&trial);
                let f_trial = r_trial.norm_squared();
                if f_trial.is_finite() && f_trial < objective {
                    let dz = (&trial - &z).norm();
                    let small = dz <= cfg.step_tol * (z.norm() + cfg.step_tol);
                    z = trial;
                    r = r_trial;
                    objective = f_trial;
                    lambda = (lambda / cfg.damping_decrease).max(1e-20);
                    if small {
                        return Ok(Inner {
                            z,
                            iterations: iter + 1,
                            gradient_norm,
                            termination: Termination::Converged,
                        });
                    }
                    break;
                }
            }
            lambda *= cfg.damping_increase;
            if lambda > cfg.max_damping {
                return Ok(Inner { z, iterations: iter + 1, gradient_norm, termination: Termination::Stalled });
            }
        }
    }
    Ok(Inner { z, iterations: budget, gradient_norm, termination: Termination::MaxIterations })
}

/// Upper bound on multiplier updates, independent of the iteration budget.
const MAX_ROUNDS: usize = 60;

/// Minimizes `‖r(z)‖²` over the box subject to `g(z) ≤ 0`.
///
/// Each outer round runs LM on the augmented objective, then applies the
/// multiplier update `λ ← max(0, λ + ρg)`; `ρ` grows while the violation does
/// not shrink by a factor four. Stops once `max_i |max(g_i, -λ_i/ρ)|` (joint
/// feasibility and complementarity) is within `feasibility_tol`.
pub fn minimize<P: ResidualProblem + ?Sized>(
    problem: &P,
    z0: &Vector,
    cfg: &SolverConfig,
) -> Result<(Vector, SolverReport), SolverError> {
    cfg.validate()?;
    if z0.len() != problem.dim() {
        return Err(SolverError::Dimension { expected: problem.dim(), got: z0.len() });
    }
    let mut z = z0.clone();
    project(&mut z, problem.lower(), problem.upper());
    let (r0, g0) = problem.evaluate(&z);
    if !all_finite(&r0) || g0.iter().any(|v| v.is_nan()) {
        return Err(SolverError::NonFinite { iterate: z.iter().copied().collect() });
    }
    let initial_objective = r0.norm_squared();
    let mut aug = Augmented { problem, rho: cfg.penalty_start, lambda: Vector::zeros(g0.len()), fd_step: cfg.fd_step };
    let mut prev_excess = f64::INFINITY;
    let mut iterations = 0;
    let mut rounds = 0;
    loop {
        rounds += 1;
        let budget = cfg.max_iterations.saturating_sub(iterations).max(1);
        let inner = levenberg_marquardt(&aug, z, cfg, budget)?;
        iterations += inner.iterations;
        z = inner.z;
        let (r, g) = problem.evaluate(&z);
        let excess = g.iter().fold(0.0f64, |a, &v| a.max(v));
        let kkt = g.iter().zip(&aug.lambda).fold(0.0f64, |a, (&gi, &li)| a.max(gi.max(-li / aug.rho).abs()));
        let stuck = iterations >= cfg.max_iterations || rounds >= MAX_ROUNDS;
        let termination = if kkt <= cfg.feasibility_tol {
            Some(inner.termination)
        } else if excess > cfg.feasibility_tol && ((aug.rho >= cfg.penalty_max && excess > 0.25 * prev_excess) || stuck) {
            Some(Termination::InfeasiblePenalty)
        } else if stuck {
            Some(Termination::MaxIterations)
        } else {
            None
        };
        if let Some(termination) = termination {
            let report = SolverReport {
                iterations,
                gradient_norm: inner.gradient_norm,
                termination,
                penalty_rounds: rounds,
                constraint_slack: excess,
                initial_objective,
                final_objective: r.norm_squared(),
            };
            return Ok((z, report));
        }
        aug.lambda = g.zip_map(&aug.lambda, |gi, li| (li + aug.rho * gi).max(0.0));
        if excess > 0.25 * prev_excess {
            aug.rho = (aug.rho * cfg.penalty_growth).min(cfg.penalty_max);
        }
        prev_excess = excess;
    }
}
