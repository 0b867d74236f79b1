//! Detectability/cost parameters, minimum horizons and the theoretical
//! estimation-error bound.

use std::fmt;

use nalgebra::Cholesky;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::linalg::{is_symmetric, sym_eigenvalues, weighted_sq, Matrix, Vector};
use crate::model::SystemModel;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LyapunovError {
    #[error("matrix {0} is not symmetric")]
    NotSymmetric(&'static str),
    #[error("matrix {name} must be {expected}x{expected}, got {rows}x{cols}")]
    Shape {
        name: &'static str,
        expected: usize,
        rows: usize,
        cols: usize,
    },
    #[error("matrix {0} is singular or not positive definite")]
    NotPositiveDefinite(&'static str),
    #[error("horizon {m} too short: {c}·λmax·η^M = {value} is not below 1")]
    HorizonTooShort { m: usize, c: f64, value: f64 },
    #[error("no horizon satisfies the condition (η = {eta})")]
    NoHorizon { eta: f64 },
}

/// Horizon scheme: fixed `M_t = min{t, M + δ_t}` or the bounded varying rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Scheme {
    Fixed,
    Varying,
}

impl Scheme {
    /// Factor in front of `λmax(P2, P1) η^M` in the horizon condition.
    pub fn horizon_factor(self) -> f64 {
        match self {
            Scheme::Fixed => 24.0,
            Scheme::Varying => 8.0,
        }
    }

    /// Weight on the stage costs: `max{1, α}` (fixed) or `α + 1` (varying).
    pub fn kappa(self, alpha: f64) -> f64 {
        match self {
            Scheme::Fixed => alpha.max(1.0),
            Scheme::Varying => alpha + 1.0,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Scheme::Fixed => "fixed",
            Scheme::Varying => "varying",
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Scheme {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "fixed" => Ok(Scheme::Fixed),
            "varying" => Ok(Scheme::Varying),
            other => Err(format!("unknown scheme `{other}` (expected fixed|varying)")),
        }
    }
}

/// `(P1, P2, Q, R, η, α, M)`.
///
/// `P1`/`P2` sandwich the incremental Lyapunov function, `Q`/`R` weight
/// disturbance and output increments and double as cost weights, `η` is the
/// decay/discount rate, `α` the trigger sensitivity and `M` the base horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct IossParams {
    pub p1: Matrix,
    pub p2: Matrix,
    pub q: Matrix,
    pub r: Matrix,
    pub eta: f64,
    pub alpha: f64,
    pub horizon: usize,
}

const REACTOR_P: [f64; 4] = [4.539, 4.171, 4.171, 3.834];

impl IossParams {
    pub fn batch_reactor() -> Self {
        let p = Matrix::from_row_slice(2, 2, &REACTOR_P);
        Self {
            p1: p.clone(),
            p2: p,
            q: Matrix::from_diagonal(&Vector::from_vec(vec![1e3, 1e4, 1e3])),
            r: Matrix::from_element(1, 1, 1e3),
            eta: 0.91,
            alpha: 5.0,
            horizon: 34,
        }
    }

    /// Hand-tuned weights for the two-link arm.
    ///
    /// Not derived from a certified procedure: `P = [[1e4 I, -80 I], [-80 I, I]]`
    /// passes the sampled decrease check for joint angles in `[-π, π]` and
    /// joint rates up to 3 rad/s only.
    pub fn robot_arm() -> Self {
        let mut p = Matrix::zeros(4, 4);
        for i in 0..2 {
            p[(i, i)] = 1e4;
            p[(i + 2, i + 2)] = 1.0;
            p[(i, i + 2)] = -80.0;
            p[(i + 2, i)] = -80.0;
        }
        Self {
            p1: p.clone(),
            p2: p,
            q: Matrix::from_diagonal(&Vector::from_vec(vec![1e5, 1e5, 1e5, 1e5, 2e4, 2e4])),
            r: Matrix::from_diagonal(&Vector::from_vec(vec![1e4, 1e4])),
            eta: 0.85,
            alpha: 20.0,
            horizon: 20,
        }
    }

    pub fn for_model(name: &str) -> Option<Self> {
        match name {
            "batch_reactor" => Some(Self::batch_reactor()),
            "robot_arm" => Some(Self::robot_arm()),
            _ => None,
        }
    }

    pub fn with_alpha(mut self, alpha: f64) -> Self {
        self.alpha = alpha;
        self
    }

    pub fn with_horizon(mut self, m: usize) -> Self {
        self.horizon = m;
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
    /// Smallest eigenvalue (definiteness checks) or offending scalar.
    pub offending: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ValidationReport {
    pub checks: Vec<Check>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.passed)
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            let status = if c.passed { "ok" } else { "FAIL" };
            write!(f, "{status:>4}  {}: {}", c.name, c.detail)?;
            if let (false, Some(v)) = (c.passed, c.offending) {
                write!(f, " (offending value {v:e})")?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

fn check_shape(name: &'static str, m: &Matrix, n: usize) -> Result<(), LyapunovError> {
    if m.nrows() != n || m.ncols() != n {
        return Err(LyapunovError::Shape {
            name,
            expected: n,
            rows: m.nrows(),
            cols: m.ncols(),
        });
    }
    Ok(())
}

fn definiteness(name: &'static str, m: &Matrix, strict: bool) -> Check {
    let ev = sym_eigenvalues(m);
    let min = ev.first().copied().unwrap_or(0.0);
    let trace: f64 = m.trace().abs();
    let tol = 1e-12 * trace.max(f64::MIN_POSITIVE);
    let (passed, kind) = if strict {
        (min > tol, "positive definite")
    } else {
        (min >= -tol, "positive semidefinite")
    };
    Check {
        name: name.to_string(),
        passed,
        detail: format!("{kind}, λmin = {min:e}"),
        offending: Some(min),
    }
}

/// Checks the invariants on `params`; dimensions are checked against `model`
/// when given. Non-symmetric or mis-shaped matrices are argument errors.
pub fn validate(params: &IossParams, model: Option<&SystemModel>) -> Result<ValidationReport, LyapunovError> {
    for (name, m) in [("P1", &params.p1), ("P2", &params.p2), ("Q", &params.q), ("R", &params.r)] {
        if m.nrows() != m.ncols() {
            return Err(LyapunovError::Shape {
                name,
                expected: m.nrows(),
                rows: m.nrows(),
                cols: m.ncols(),
            });
        }
        if !is_symmetric(m, 1e-12) {
            return Err(LyapunovError::NotSymmetric(name));
        }
    }
    let n_x = params.p1.nrows();
    check_shape("P2", &params.p2, n_x)?;
    if let Some(model) = model {
        check_shape("P1", &params.p1, model.n_x())?;
        check_shape("Q", &params.q, model.n_w())?;
        check_shape("R", &params.r, model.n_y())?;
    }

    let mut report = ValidationReport::default();
    report.checks.push(definiteness("P1", &params.p1, true));
    report.checks.push(definiteness("P2", &params.p2, true));
    report.checks.push(definiteness("Q", &params.q, false));
    report.checks.push(definiteness("R", &params.r, false));
    let eta_ok = (0.0..1.0).contains(&params.eta);
    report.checks.push(Check {
        name: "eta".into(),
        passed: eta_ok,
        detail: format!("0 <= η < 1, η = {}", params.eta),
        offending: (!eta_ok).then_some(params.eta),
    });
    let alpha_ok = params.alpha >= 0.0 && params.alpha.is_finite();
    report.checks.push(Check {
        name: "alpha".into(),
        passed: alpha_ok,
        detail: format!("α >= 0, α = {}", params.alpha),
        offending: (!alpha_ok).then_some(params.alpha),
    });
    report.checks.push(Check {
        name: "M".into(),
        passed: params.horizon >= 1,
        detail: format!("M >= 1, M = {}", params.horizon),
        offending: (params.horizon == 0).then_some(0.0),
    });
    Ok(report)
}

/// Largest generalized eigenvalue `λmax(A, B)`, i.e. of `B⁻¹A`.
pub fn gen_eig_max(a: &Matrix, b: &Matrix) -> Result<f64, LyapunovError> {
    check_shape("B", b, a.nrows())?;
    let chol = Cholesky::new(b.clone()).ok_or(LyapunovError::NotPositiveDefinite("B"))?;
    let l = chol.l();
    // C = L⁻¹ A L⁻ᵀ, via two triangular solves.
    let y = l
        .solve_lower_triangular(a)
        .ok_or(LyapunovError::NotPositiveDefinite("B"))?;
    let c = l
        .solve_lower_triangular(&y.transpose())
        .ok_or(LyapunovError::NotPositiveDefinite("B"))?;
    let c = (&c + c.transpose()) * 0.5;
    Ok(*sym_eigenvalues(&c).last().expect("non-empty matrix"))
}

/// Smallest admissible horizon and the contraction rate it implies.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HorizonChoice {
    pub horizon: usize,
    pub rho: f64,
}

/// Smallest `M >= 1` with `c λmax(P2, P1) η^M < 1` (`c` = 24 fixed, 8 varying).
pub fn min_horizon(params: &IossParams, scheme: Scheme) -> Result<HorizonChoice, LyapunovError> {
    let lambda = gen_eig_max(&params.p2, &params.p1)?;
    min_horizon_for(lambda, params.eta, scheme)
}

/// [`min_horizon`] with a precomputed `λmax(P2, P1)`.
pub fn min_horizon_for(lambda: f64, eta: f64, scheme: Scheme) -> Result<HorizonChoice, LyapunovError> {
    let c = scheme.horizon_factor();
    if eta == 0.0 {
        return Ok(HorizonChoice { horizon: 1, rho: 0.0 });
    }
    if !(0.0..1.0).contains(&eta) {
        return Err(LyapunovError::NoHorizon { eta });
    }
    let mut value = c * lambda * eta;
    let mut m = 1usize;
    while value >= 1.0 {
        m += 1;
        value *= eta;
        if m > 1_000_000 {
            return Err(LyapunovError::NoHorizon { eta });
        }
    }
    Ok(HorizonChoice {
        horizon: m,
        rho: value.powf(1.0 / m as f64),
    })
}

/// Gains of `‖ê_t‖ <= c_init √ρ^t ‖ê_0‖ + c_dist Σ_j √ρ^{t-j-1} ‖w_j‖`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundConstants {
    pub rho: f64,
    pub c_init: f64,
    pub c_dist: f64,
    pub scheme: Scheme,
}

impl BoundConstants {
    /// Constants for base horizon `params.horizon`; fails if the horizon is
    /// below the scheme's minimum.
    pub fn new(params: &IossParams, scheme: Scheme) -> Result<Self, LyapunovError> {
        let lambda = gen_eig_max(&params.p2, &params.p1)?;
        let m = params.horizon;
        let c = scheme.horizon_factor();
        let value = c * lambda * params.eta.powi(m as i32);
        if !(value < 1.0) {
            return Err(LyapunovError::HorizonTooShort { m, c, value });
        }
        let p1_min = sym_eigenvalues(&params.p1)[0];
        if !(p1_min > 0.0) {
            return Err(LyapunovError::NotPositiveDefinite("P1"));
        }
        let p2_max = *sym_eigenvalues(&params.p2).last().expect("non-empty");
        let q_max = sym_eigenvalues(&params.q).last().copied().unwrap_or(0.0).max(0.0);
        let alpha = params.alpha;
        let (c_init, c_dist) = match scheme {
            Scheme::Fixed => (
                (24.0 * p2_max / p1_min).sqrt(),
                (3.0 * (10.0 * alpha + 2.0).max(12.0) * q_max / p1_min).sqrt(),
            ),
            Scheme::Varying => (
                (8.0 * p2_max / p1_min).sqrt(),
                ((10.0 * alpha + 12.0) * q_max / p1_min).sqrt(),
            ),
        };
        Ok(Self {
            rho: value.powf(1.0 / m as f64),
            c_init,
            c_dist,
            scheme,
        })
    }
}

/// Evaluates the error bound at step `t` (uses `w_norms[0..t]`).
pub fn rges_bound(k: &BoundConstants, e0_norm: f64, w_norms: &[f64], t: usize) -> f64 {
    assert!(w_norms.len() >= t, "need {t} disturbance norms, got {}", w_norms.len());
    let s = k.rho.sqrt();
    let mut acc = 0.0;
    // Horner form of Σ_j s^{t-j-1} w_j.
    for w in &w_norms[..t] {
        acc = acc * s + w;
    }
    k.c_init * s.powi(t as i32) * e0_norm + k.c_dist * acc
}

/// One pair of trajectories for the sampled decrease check.
#[derive(Debug, Clone, PartialEq)]
pub struct LyapunovSample {
    pub x: Vector,
    pub x_tilde: Vector,
    pub u: Vector,
    pub w: Vector,
    pub w_tilde: Vector,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecreaseReport {
    pub samples: usize,
    pub violations: usize,
    /// `min(rhs - lhs)` over the samples (negative means violated).
    pub worst_margin: f64,
    pub worst_index: Option<usize>,
    /// `false` when `P1 == P2` and the quadratic function itself was checked;
    /// otherwise only the necessary sandwich consequence
    /// `‖Δx⁺‖²_P1 <= η‖Δx‖²_P2 + ‖Δw‖²_Q + ‖Δy‖²_R` is checked.
    pub sandwich_only: bool,
}

/// `n` pairs with states uniform in `[lower, upper]`, disturbances uniform in
/// `±noise` (drawn independently for both trajectories) and input `u`.
pub fn sample_pairs(lower: &[f64], upper: &[f64], noise: &[f64], u: &Vector, n: usize, seed: u64) -> Vec<LyapunovSample> {
    assert_eq!(lower.len(), upper.len(), "box bounds differ in length");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut uniform = |lo: f64, hi: f64| if lo < hi { rng.random_range(lo..=hi) } else { lo };
    (0..n)
        .map(|_| {
            let mut state = || Vector::from_iterator(lower.len(), lower.iter().zip(upper).map(|(l, h)| uniform(*l, *h)));
            let (x, x_tilde) = (state(), state());
            let mut dist = || Vector::from_iterator(noise.len(), noise.iter().map(|a| uniform(-a, *a)));
            let (w, w_tilde) = (dist(), dist());
            LyapunovSample { x, x_tilde, u: u.clone(), w, w_tilde }
        })
        .collect()
}

/// Sampled check of the one-step decrease
/// `W(x⁺, x̃⁺) <= η W(x, x̃) + ‖w - w̃‖²_Q + ‖y - ỹ‖²_R`.
pub fn check_lyapunov_decrease(model: &SystemModel, params: &IossParams, samples: &[LyapunovSample]) -> DecreaseReport {
    let sandwich_only = params.p1 != params.p2;
    let mut report = DecreaseReport {
        samples: samples.len(),
        violations: 0,
        worst_margin: f64::INFINITY,
        worst_index: None,
        sandwich_only,
    };
    for (i, s) in samples.iter().enumerate() {
        let xn = model.f(&s.x, &s.u, &s.w);
        let xtn = model.f(&s.x_tilde, &s.u, &s.w_tilde);
        let y = model.h(&s.x, &s.u, &s.w);
        let yt = model.h(&s.x_tilde, &s.u, &s.w_tilde);
        let lhs = weighted_sq(&(xn - xtn), &params.p1);
        let rhs = params.eta * weighted_sq(&(&s.x - &s.x_tilde), &params.p2)
            + weighted_sq(&(&s.w - &s.w_tilde), &params.q)
            + weighted_sq(&(y - yt), &params.r);
        let margin = rhs - lhs;
        // Relative slack for round-off when both sides are large.
        if margin < -1e-12 * rhs.abs().max(lhs.abs()) {
            report.violations += 1;
        }
        if margin < report.worst_margin {
            report.worst_margin = margin;
            report.worst_index = Some(i);
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::batch_reactor;
    use approx::assert_relative_eq;

    #[test]
    fn reactor_params_are_valid() {
        let r = validate(&IossParams::batch_reactor(), Some(&batch_reactor())).unwrap();
        assert!(r.is_valid(), "{r}");
    }

    #[test]
    fn zero_p1_and_unit_eta_are_invalid() {
        let mut p = IossParams::batch_reactor();
        p.p1 = Matrix::zeros(2, 2);
        let r = validate(&p, None).unwrap();
        assert!(!r.is_valid());
        assert_eq!(r.failures().next().unwrap().name, "P1");

        let mut p = IossParams::batch_reactor();
        p.eta = 1.0;
        let r = validate(&p, None).unwrap();
        assert_eq!(r.failures().map(|c| c.name.as_str()).collect::<Vec<_>>(), ["eta"]);
    }

    #[test]
    fn non_symmetric_is_argument_error() {
        let mut p = IossParams::batch_reactor();
        p.q[(0, 1)] = 1.0;
        assert_eq!(validate(&p, None), Err(LyapunovError::NotSymmetric("Q")));
    }

    #[test]
    fn generalized_eigenvalue_basics() {
        let i = Matrix::identity(3, 3);
        assert_relative_eq!(gen_eig_max(&i, &i).unwrap(), 1.0, max_relative = 1e-12);
        assert_relative_eq!(gen_eig_max(&(&i * 2.0), &i).unwrap(), 2.0, max_relative = 1e-12);
        let p = Matrix::from_row_slice(2, 2, &REACTOR_P);
        assert_relative_eq!(gen_eig_max(&p, &p).unwrap(), 1.0, max_relative = 1e-8);
        assert!(gen_eig_max(&i, &Matrix::zeros(3, 3)).is_err());
    }

    #[test]
    fn horizons_for_reactor() {
        let p = IossParams::batch_reactor();
        assert_eq!(min_horizon(&p, Scheme::Fixed).unwrap().horizon, 34);
        assert_eq!(min_horizon(&p, Scheme::Varying).unwrap().horizon, 23);
        let mut half = p.clone();
        half.eta = 0.5;
        assert_eq!(min_horizon(&half, Scheme::Fixed).unwrap().horizon, 5);
        half.eta = 0.0;
        assert_eq!(min_horizon(&half, Scheme::Fixed).unwrap().horizon, 1);
    }

    #[test]
    fn bound_constants_for_reactor() {
        let p = IossParams::batch_reactor();
        let k = BoundConstants::new(&p, Scheme::Fixed).unwrap();
        let ev = sym_eigenvalues(&p.p1);
        assert_relative_eq!(k.c_init, (24.0 * ev[1] / ev[0]).sqrt(), max_relative = 1e-12);
        assert_relative_eq!(k.c_dist, (3.0 * 52.0 * 1e4 / ev[0]).sqrt(), max_relative = 1e-12);
        assert!(k.rho < 1.0 && k.rho >= p.eta);
        assert!(matches!(
            BoundConstants::new(&p.clone().with_horizon(20), Scheme::Fixed),
            Err(LyapunovError::HorizonTooShort { .. })
        ));
    }

    #[test]
    fn bound_hand_values() {
        let k = BoundConstants { rho: 0.25, c_init: 2.0, c_dist: 1.0, scheme: Scheme::Fixed };
        assert_eq!(rges_bound(&k, 0.0, &[0.0; 4], 4), 0.0);
        assert_eq!(rges_bound(&k, 1.5, &[], 0), 3.0);
        assert_relative_eq!(rges_bound(&k, 1.0, &[1.0], 1), 2.0, epsilon = 1e-15);
    }

    #[test]
    fn decrease_check_identical_pair_has_zero_margin() {
        let m = batch_reactor();
        let x = Vector::from_vec(vec![1.0, 2.0]);
        let w = Vector::zeros(3);
        let s = LyapunovSample { x: x.clone(), x_tilde: x, u: Vector::zeros(0), w: w.clone(), w_tilde: w };
        let r = check_lyapunov_decrease(&m, &IossParams::batch_reactor(), &[s]);
        assert_eq!((r.violations, r.worst_margin), (0, 0.0));
    }
}
