//! The moving-horizon NLP: single shooting over `(x̂_{t-M_t}, ŵ_{t-M_t..t-1})`,
//! discounted cost, and the output-tracking constraint that keeps event-time
//! solutions consistent with what the trigger assumed.

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use crate::linalg::{psd_sqrt, weighted_sq, Matrix, Vector};
use crate::lyapunov::{IossParams, Scheme};
use crate::model::{check_dim, BoxSet, ModelError, SystemModel};
use crate::solver::{minimize, ResidualProblem, SolverConfig, SolverError, SolverReport, Termination};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MheError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("window horizon must be at least 1 (t = {t})")]
    EmptyWindow { t: usize },
    #[error("horizon {horizon} exceeds current time {t}")]
    HorizonBeyondStart { t: usize, horizon: usize },
    #[error("window expects {expected} inputs, got {got}")]
    InputCount { expected: usize, got: usize },
    #[error("no measurement stored for transmitted index {0}")]
    MissingMeasurement(usize),
    #[error("measurement index {index} outside window [{start}, {end})")]
    MeasurementOutsideWindow { index: usize, start: usize, end: usize },
    #[error("inconsistent constraint context: {0}")]
    Context(String),
    #[error("decision has {got} disturbances, window length is {expected}")]
    DecisionLength { expected: usize, got: usize },
    #[error(transparent)]
    Solver(#[from] SolverError),
}

/// Stage-cost weight selector: `max{1, α}` or `α + 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CostVariant {
    Fixed,
    Varying,
}

impl CostVariant {
    pub fn kappa(self, alpha: f64) -> f64 {
        match self {
            CostVariant::Fixed => Scheme::Fixed.kappa(alpha),
            CostVariant::Varying => Scheme::Varying.kappa(alpha),
        }
    }
}

impl From<Scheme> for CostVariant {
    fn from(s: Scheme) -> Self {
        match s {
            Scheme::Fixed => CostVariant::Fixed,
            Scheme::Varying => CostVariant::Varying,
        }
    }
}

/// Data for the tracking constraint at time `t`.
///
/// `μ` is the last no-event time, `ε_μ` the event that produced the solution
/// in force at `μ`. The reference outputs `ỹ` cover `[t - M_t, μ - 1] \ K_s`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintContext {
    pub mu: usize,
    pub eps_mu: usize,
    /// `ε_μ - M_{ε_μ}`.
    pub window_start: usize,
    /// `ŵ*_{j|ε_μ}` for `j ∈ [window_start, ε_μ)`.
    pub w_star_eps: Vec<Vector>,
    /// `ŷ*_{j|ε_μ}` for `j ∈ [window_start, ε_μ)`.
    pub y_star_eps: Vec<Vector>,
    pub meas_eps: BTreeMap<usize, Vector>,
    pub tilde_y: BTreeMap<usize, Vector>,
}

impl ConstraintContext {
    /// Right-hand side `α η^{μ-ε_μ} d_{ε_μ}`; independent of the decision.
    pub fn rhs(&self, params: &IossParams) -> Result<f64, MheError> {
        let len = self.eps_mu.checked_sub(self.window_start).ok_or_else(|| {
            MheError::Context(format!("window start {} after ε_μ {}", self.window_start, self.eps_mu))
        })?;
        if self.w_star_eps.len() != len || self.y_star_eps.len() != len {
            return Err(MheError::Context(format!(
                "expected {len} optimal disturbances/outputs, got {}/{}",
                self.w_star_eps.len(),
                self.y_star_eps.len()
            )));
        }
        if self.mu < self.eps_mu {
            return Err(MheError::Context(format!("μ {} precedes ε_μ {}", self.mu, self.eps_mu)));
        }
        let mut acc = 0.0;
        for (k, j) in (self.window_start..self.eps_mu).enumerate() {
            let disc = params.eta.powi((self.mu - j - 1) as i32);
            let mut term = 2.0 * weighted_sq(&self.w_star_eps[k], &params.q);
            if let Some(y) = self.meas_eps.get(&j) {
                term += weighted_sq(&(&self.y_star_eps[k] - y), &params.r);
            }
            acc += disc * term;
        }
        Ok(params.alpha * acc)
    }
}

/// Everything the NLP at time `t` sees.
#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    pub t: usize,
    pub horizon: usize,
    /// `x̂_{t-M_t}` from the estimate history.
    pub prior: Vector,
    /// `u_j` for `j ∈ [t - M_t, t)`.
    pub inputs: Vec<Vector>,
    /// `K_s ∩ [t - M_t, t)`.
    pub ks: BTreeSet<usize>,
    pub meas: BTreeMap<usize, Vector>,
    pub constraint: Option<ConstraintContext>,
    pub variant: CostVariant,
}

impl Window {
    /// Window whose transmitted set is exactly the keys of `meas`.
    pub fn new(t: usize, horizon: usize, prior: Vector, inputs: Vec<Vector>, meas: BTreeMap<usize, Vector>, variant: CostVariant) -> Self {
        Self {
            t,
            horizon,
            prior,
            inputs,
            ks: meas.keys().copied().collect(),
            meas,
            constraint: None,
            variant,
        }
    }

    pub fn with_constraint(mut self, ctx: ConstraintContext) -> Self {
        self.constraint = Some(ctx);
        self
    }

    pub fn start(&self) -> usize {
        self.t - self.horizon
    }

    pub fn validate(&self, model: &SystemModel) -> Result<(), MheError> {
        if self.horizon == 0 {
            return Err(MheError::EmptyWindow { t: self.t });
        }
        if self.horizon > self.t {
            return Err(MheError::HorizonBeyondStart { t: self.t, horizon: self.horizon });
        }
        if self.inputs.len() != self.horizon {
            return Err(MheError::InputCount { expected: self.horizon, got: self.inputs.len() });
        }
        check_dim("prior", model.n_x(), self.prior.len())?;
        for u in &self.inputs {
            check_dim("input", model.n_u(), u.len())?;
        }
        let (start, end) = (self.start(), self.t);
        for (&j, y) in &self.meas {
            if !(start..end).contains(&j) {
                return Err(MheError::MeasurementOutsideWindow { index: j, start, end });
            }
            check_dim("measurement", model.n_y(), y.len())?;
        }
        for &j in &self.ks {
            if !self.meas.contains_key(&j) {
                return Err(MheError::MissingMeasurement(j));
            }
        }
        if let Some(ctx) = &self.constraint {
            if ctx.mu > self.t {
                return Err(MheError::Context(format!("μ {} after t {}", ctx.mu, self.t)));
            }
            for &j in ctx.tilde_y.keys() {
                if j < start || j >= ctx.mu {
                    return Err(MheError::Context(format!(
                        "reference output index {j} outside [{start}, {})",
                        ctx.mu
                    )));
                }
                if self.ks.contains(&j) {
                    return Err(MheError::Context(format!("reference output index {j} is a transmitted index")));
                }
            }
            for &j in ctx.meas_eps.keys() {
                if j < ctx.window_start || j >= ctx.eps_mu {
                    return Err(MheError::Context(format!("event measurement index {j} outside its window")));
                }
            }
        }
        Ok(())
    }
}

/// Candidate `(x̂_{t-M_t|t}, ŵ_{·|t})`.
#[derive(Debug, Clone, PartialEq)]
pub struct Decision {
    pub x0: Vector,
    pub w_seq: Vec<Vector>,
}

impl Decision {
    /// `(prior, 0)`.
    pub fn cold(window: &Window, n_w: usize) -> Self {
        Self {
            x0: window.prior.clone(),
            w_seq: vec![Vector::zeros(n_w); window.horizon],
        }
    }

    pub fn pack(&self) -> Vector {
        let n_x = self.x0.len();
        let n_w = self.w_seq.first().map_or(0, Vector::len);
        let mut z = Vector::zeros(n_x + n_w * self.w_seq.len());
        z.rows_mut(0, n_x).copy_from(&self.x0);
        for (k, w) in self.w_seq.iter().enumerate() {
            z.rows_mut(n_x + k * n_w, n_w).copy_from(w);
        }
        z
    }

    pub fn unpack(z: &Vector, n_x: usize, n_w: usize, horizon: usize) -> Self {
        Self {
            x0: z.rows(0, n_x).into_owned(),
            w_seq: (0..horizon).map(|k| z.rows(n_x + k * n_w, n_w).into_owned()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimateResult {
    pub t: usize,
    /// `t - M_t`.
    pub start: usize,
    /// `x̂*_{j|t}`, `j ∈ [start, t]`.
    pub x_seq: Vec<Vector>,
    pub w_seq: Vec<Vector>,
    /// `ŷ*_{j|t}`, `j ∈ [start, t)`.
    pub y_seq: Vec<Vector>,
    pub cost: f64,
    pub report: SolverReport,
    /// `max{0, lhs - rhs}` of the tracking constraint (0 without one).
    pub constraint_slack: f64,
    /// `rhs - lhs` of the tracking constraint; near zero when it is active.
    pub constraint_margin: Option<f64>,
    /// The warm-start candidate beat the solver's iterate and was kept.
    pub kept_start: bool,
}

impl EstimateResult {
    /// The tracking constraint holds with equality up to `tol`.
    pub fn constraint_active(&self, tol: f64) -> bool {
        self.constraint_margin.is_some_and(|m| m <= tol)
    }

    pub fn horizon(&self) -> usize {
        self.t - self.start
    }

    /// `x̂_t = x̂*_{t|t}`.
    pub fn estimate(&self) -> &Vector {
        self.x_seq.last().expect("non-empty state sequence")
    }

    pub fn first_state(&self) -> &Vector {
        &self.x_seq[0]
    }

    pub fn decision(&self) -> Decision {
        Decision { x0: self.x_seq[0].clone(), w_seq: self.w_seq.clone() }
    }
}

/// States `x̂_{j|t}` for `j ∈ [t-M_t, t]` and outputs for `j ∈ [t-M_t, t)`.
pub fn rollout(model: &SystemModel, window: &Window, d: &Decision) -> (Vec<Vector>, Vec<Vector>) {
    rollout_raw(model, &window.inputs, &d.x0, &d.w_seq)
}

fn rollout_raw(model: &SystemModel, inputs: &[Vector], x0: &Vector, w_seq: &[Vector]) -> (Vec<Vector>, Vec<Vector>) {
    let mut xs = Vec::with_capacity(w_seq.len() + 1);
    let mut ys = Vec::with_capacity(w_seq.len());
    let mut x = x0.clone();
    for (u, w) in inputs.iter().zip(w_seq) {
        ys.push(model.h(&x, u, w));
        let next = model.f(&x, u, w);
        xs.push(std::mem::replace(&mut x, next));
    }
    xs.push(x);
    (xs, ys)
}

/// Discounted cost of `d` given its rolled-out outputs.
pub fn cost(window: &Window, d: &Decision, params: &IossParams, outputs: &[Vector]) -> Result<f64, MheError> {
    let m = window.horizon;
    if d.w_seq.len() != m || outputs.len() != m {
        return Err(MheError::DecisionLength { expected: m, got: d.w_seq.len().min(outputs.len()) });
    }
    let eta = params.eta;
    let kappa = window.variant.kappa(params.alpha);
    let start = window.start();
    let prior = 2.0 * eta.powi(m as i32) * weighted_sq(&(&d.x0 - &window.prior), &params.p2);
    let mut stage = 0.0;
    for (k, w) in d.w_seq.iter().enumerate() {
        stage += eta.powi((m - k - 1) as i32) * 2.0 * weighted_sq(w, &params.q);
    }
    for &j in &window.ks {
        let y = window.meas.get(&j).ok_or(MheError::MissingMeasurement(j))?;
        if j < start || j >= window.t {
            return Err(MheError::MeasurementOutsideWindow { index: j, start, end: window.t });
        }
        let k = j - start;
        stage += eta.powi((m - k - 1) as i32) * weighted_sq(&(&outputs[k] - y), &params.r);
    }
    Ok(prior + kappa * stage)
}

/// `(lhs, rhs)` of the tracking constraint; feasible iff `lhs <= rhs`.
pub fn extra_constraint_eval(window: &Window, outputs: &[Vector], params: &IossParams) -> Result<(f64, f64), MheError> {
    let ctx = window
        .constraint
        .as_ref()
        .ok_or_else(|| MheError::Context("window has no constraint context".into()))?;
    let start = window.start();
    let mut lhs = 0.0;
    for (&j, y_ref) in &ctx.tilde_y {
        if j < start || j >= ctx.mu || j >= window.t {
            return Err(MheError::Context(format!("reference output index {j} outside [{start}, {})", ctx.mu)));
        }
        lhs += params.eta.powi((ctx.mu - j - 1) as i32) * weighted_sq(&(&outputs[j - start] - y_ref), &params.r);
    }
    Ok((lhs, ctx.rhs(params)?))
}

struct MeasBlock {
    k: usize,
    y: Vector,
    scale: Matrix,
}

struct TrackBlock {
    k: usize,
    y_ref: Vector,
    /// Square root of the discounted weight.
    scale: Matrix,
}

/// Least-squares form of the windowed problem.
struct MheProblem<'a> {
    model: &'a SystemModel,
    window: &'a Window,
    n_x: usize,
    n_w: usize,
    prior_scale: Matrix,
    w_scales: Vec<Matrix>,
    meas: Vec<MeasBlock>,
    track: Vec<TrackBlock>,
    rhs: Option<f64>,
    /// Multiplier of the tracking constraint; when positive its terms enter
    /// as residual rows, otherwise the constraint is ignored by the solver.
    track_mu: f64,
    /// Coordinates of `x`/`y` with at least one finite bound.
    x_rows: Vec<usize>,
    y_rows: Vec<usize>,
    lower: Vec<f64>,
    upper: Vec<f64>,
    n_res: usize,
    n_con: usize,
}

impl<'a> MheProblem<'a> {
    fn new(model: &'a SystemModel, window: &'a Window, params: &IossParams) -> Result<Self, MheError> {
        let (n_x, n_w, n_y) = (model.n_x(), model.n_w(), model.n_y());
        let m = window.horizon;
        let eta = params.eta;
        let kappa = window.variant.kappa(params.alpha);
        let s_p2 = psd_sqrt(&params.p2);
        let s_q = psd_sqrt(&params.q);
        let s_r = psd_sqrt(&params.r);
        let prior_scale = &s_p2 * (2.0 * eta.powi(m as i32)).sqrt();
        let w_scales = (0..m)
            .map(|k| &s_q * (2.0 * kappa * eta.powi((m - k - 1) as i32)).sqrt())
            .collect();
        let start = window.start();
        let meas = window
            .ks
            .iter()
            .map(|&j| {
                let y = window.meas.get(&j).ok_or(MheError::MissingMeasurement(j))?.clone();
                let k = j - start;
                Ok(MeasBlock { k, y, scale: &s_r * (kappa * eta.powi((m - k - 1) as i32)).sqrt() })
            })
            .collect::<Result<Vec<_>, MheError>>()?;
        let (track, rhs) = match &window.constraint {
            Some(ctx) => {
                let track = ctx
                    .tilde_y
                    .iter()
                    .map(|(&j, y)| TrackBlock {
                        k: j - start,
                        y_ref: y.clone(),
                        scale: &s_r * eta.powi((ctx.mu - j - 1) as i32).sqrt(),
                    })
                    .collect();
                (track, Some(ctx.rhs(params)?))
            }
            None => (Vec::new(), None),
        };
        let finite = |b: &BoxSet| -> Vec<usize> {
            (0..b.dim()).filter(|&i| b.lower()[i].is_finite() || b.upper()[i].is_finite()).collect()
        };
        let x_rows = finite(&model.x_box);
        let y_rows = finite(&model.y_box);
        let mut lower = model.x_box.lower().to_vec();
        let mut upper = model.x_box.upper().to_vec();
        for _ in 0..m {
            lower.extend_from_slice(model.w_box.lower());
            upper.extend_from_slice(model.w_box.upper());
        }
        let n_res = n_x + m * n_w + meas.len() * n_y;
        let n_con = m * (x_rows.len() + y_rows.len());
        Ok(Self { model, window, n_x, n_w, prior_scale, w_scales, meas, track, rhs, track_mu: 0.0, x_rows, y_rows, lower, upper, n_res, n_con })
    }

    fn residual_len(&self) -> usize {
        self.n_res + if self.track_mu > 0.0 { self.track.len() * self.model.n_y() } else { 0 }
    }

    fn unpack(&self, z: &Vector) -> Decision {
        Decision::unpack(z, self.n_x, self.n_w, self.window.horizon)
    }

    fn roll(&self, z: &Vector) -> (Decision, Vec<Vector>, Vec<Vector>) {
        let d = self.unpack(z);
        let (xs, ys) = rollout(self.model, self.window, &d);
        (d, xs, ys)
    }

    fn track_lhs(&self, ys: &[Vector]) -> f64 {
        self.track
            .iter()
            .map(|b| (&b.scale * (&ys[b.k] - &b.y_ref)).norm_squared())
            .sum()
    }

    fn excess_of(&self, xs: &[Vector], ys: &[Vector]) -> f64 {
        let mut excess = match self.rhs {
            Some(rhs) => (self.track_lhs(ys) - rhs).max(0.0),
            None => 0.0,
        };
        for x in &xs[1..] {
            excess = excess.max(self.model.x_box.excess(x).amax());
        }
        for y in ys {
            excess = excess.max(self.model.y_box.excess(y).amax());
        }
        excess
    }
}

struct Sensitivities {
    xs: Vec<Vector>,
    ys: Vec<Vector>,
    /// `∂x̂_{k+1}/∂z`, only when the state box is active.
    dxs: Vec<Matrix>,
    /// `∂ŷ_k/∂z`.
    dys: Vec<Matrix>,
}

impl MheProblem<'_> {
    /// Forward propagation of `∂x̂_k/∂z` and `∂ŷ_k/∂z`; columns beyond the
    /// current stage are still zero and are skipped.
    fn sensitivities(&self, z: &Vector) -> Sensitivities {
        let (d, xs, ys) = self.roll(z);
        let (n_x, n_w, n_y) = (self.n_x, self.n_w, self.model.n_y());
        let m = self.window.horizon;
        let n_z = self.dim();
        let mut sx = Matrix::zeros(n_x, n_z);
        sx.view_mut((0, 0), (n_x, n_x)).fill_with_identity();
        let mut dys: Vec<Matrix> = Vec::with_capacity(m);
        let mut dxs: Vec<Matrix> = Vec::with_capacity(if self.x_rows.is_empty() { 0 } else { m });
        for k in 0..m {
            let u = &self.window.inputs[k];
            let w = &d.w_seq[k];
            let col = n_x + k * n_w;
            let (c, dw) = self.model.output_jacobians(&xs[k], u, w);
            let mut dy = Matrix::zeros(n_y, n_z);
            dy.view_mut((0, 0), (n_y, col)).copy_from(&(&c * sx.view((0, 0), (n_x, col))));
            dy.view_mut((0, col), (n_y, n_w)).copy_from(&dw);
            dys.push(dy);
            let (a, b) = self.model.dynamics_jacobians(&xs[k], u, w);
            let mut next = Matrix::zeros(n_x, n_z);
            next.view_mut((0, 0), (n_x, col)).copy_from(&(&a * sx.view((0, 0), (n_x, col))));
            next.view_mut((0, col), (n_x, n_w)).copy_from(&b);
            sx = next;
            if !self.x_rows.is_empty() {
                dxs.push(sx.clone());
            }
        }
        Sensitivities { xs, ys, dxs, dys }
    }
}

/// Signed distance outside `[l, u]` for coordinate `i`, with the sign of its
/// derivative; only called for coordinates with a finite side.
fn box_value(b: &BoxSet, v: &Vector, i: usize) -> (f64, f64) {
    let (l, u) = (b.lower()[i], b.upper()[i]);
    let above = v[i] - u;
    let below = l - v[i];
    if above >= below {
        (above, 1.0)
    } else {
        (below, -1.0)
    }
}

impl ResidualProblem for MheProblem<'_> {
    fn dim(&self) -> usize {
        self.n_x + self.window.horizon * self.n_w
    }

    fn evaluate(&self, z: &Vector) -> (Vector, Vector) {
        let (d, xs, ys) = self.roll(z);
        let n_y = self.model.n_y();
        let mut r = Vector::zeros(self.residual_len());
        let mut row = 0;
        r.rows_mut(row, self.n_x).copy_from(&(&self.prior_scale * (&d.x0 - &self.window.prior)));
        row += self.n_x;
        for (s, w) in self.w_scales.iter().zip(&d.w_seq) {
            r.rows_mut(row, self.n_w).copy_from(&(s * w));
            row += self.n_w;
        }
        for b in &self.meas {
            r.rows_mut(row, n_y).copy_from(&(&b.scale * (&ys[b.k] - &b.y)));
            row += n_y;
        }
        if self.track_mu > 0.0 {
            let sm = self.track_mu.sqrt();
            for b in &self.track {
                r.rows_mut(row, n_y).copy_from(&(&b.scale * (&ys[b.k] - &b.y_ref) * sm));
                row += n_y;
            }
        }
        debug_assert_eq!(row, r.len());

        let mut g = Vec::with_capacity(self.n_con);
        for x in &xs[1..] {
            g.extend(self.x_rows.iter().map(|&i| box_value(&self.model.x_box, x, i).0));
        }
        for y in &ys {
            g.extend(self.y_rows.iter().map(|&i| box_value(&self.model.y_box, y, i).0));
        }
        debug_assert_eq!(g.len(), self.n_con);
        (r, Vector::from_vec(g))
    }

    fn jacobians(&self, z: &Vector) -> Option<(Matrix, Matrix)> {
        let Sensitivities { xs, ys, dxs, dys } = self.sensitivities(z);
        let (n_x, n_w, n_y) = (self.n_x, self.n_w, self.model.n_y());
        let n_z = self.dim();
        let mut jr = Matrix::zeros(self.residual_len(), n_z);
        let mut row = 0;
        jr.view_mut((0, 0), (n_x, n_x)).copy_from(&self.prior_scale);
        row += n_x;
        for (k, s) in self.w_scales.iter().enumerate() {
            jr.view_mut((row, n_x + k * n_w), (n_w, n_w)).copy_from(s);
            row += n_w;
        }
        for b in &self.meas {
            jr.view_mut((row, 0), (n_y, n_z)).copy_from(&(&b.scale * &dys[b.k]));
            row += n_y;
        }
        if self.track_mu > 0.0 {
            let sm = self.track_mu.sqrt();
            for b in &self.track {
                jr.view_mut((row, 0), (n_y, n_z)).copy_from(&(&b.scale * &dys[b.k] * sm));
                row += n_y;
            }
        }

        let mut jg = Matrix::zeros(self.n_con, n_z);
        let mut row = 0;
        for (k, x) in xs[1..].iter().enumerate() {
            for &i in &self.x_rows {
                let sign = box_value(&self.model.x_box, x, i).1;
                jg.set_row(row, &(dxs[k].row(i) * sign));
                row += 1;
            }
        }
        for (k, y) in ys.iter().enumerate() {
            for &i in &self.y_rows {
                let sign = box_value(&self.model.y_box, y, i).1;
                jg.set_row(row, &(dys[k].row(i) * sign));
                row += 1;
            }
        }
        Some((jr, jg))
    }

    fn lower(&self) -> &[f64] {
        &self.lower
    }

    fn upper(&self) -> &[f64] {
        &self.upper
    }
}

/// Cap on multiplier trials for the tracking constraint.
const MAX_MULTIPLIER_TRIALS: usize = 60;

struct Trial {
    mu: f64,
    gap: f64,
    z: Vector,
    report: SolverReport,
}

fn solve_at(problem: &mut MheProblem<'_>, mu: f64, from: &Vector, rhs: f64, cfg: &SolverConfig) -> Result<Trial, SolverError> {
    problem.track_mu = mu;
    let (z, report) = minimize(&*problem, from, cfg)?;
    let gap = problem.track_lhs(&problem.roll(&z).2) - rhs;
    Ok(Trial { mu, gap, z, report })
}

/// Minimizes the window cost subject to the tracking constraint.
///
/// The constraint is a weighted sum of squares, so the Lagrangian
/// `f + μ·(lhs − rhs)` is again a least-squares problem, which Gauss–Newton
/// handles far better than a single penalty row on a thin curved set. The
/// multiplier solves `lhs(z(μ)) = rhs`, whose left side is nonincreasing in
/// `μ`; it is bracketed geometrically and refined by Illinois false position
/// in `ln μ`, always keeping a feasible endpoint. Box constraints stay with
/// the inner augmented Lagrangian.
fn minimize_tracked(problem: &mut MheProblem<'_>, z0: &Vector, cfg: &SolverConfig) -> Result<(Vector, SolverReport), SolverError> {
    problem.track_mu = 0.0;
    let (z, report) = minimize(&*problem, z0, cfg)?;
    let Some(rhs) = problem.rhs else {
        return Ok((z, report));
    };
    let gap = problem.track_lhs(&problem.roll(&z).2) - rhs;
    if gap <= 0.0 {
        return Ok((z, report));
    }
    let initial_objective = report.initial_objective;
    let mut iterations = report.iterations;
    let mut trials = 1;
    let finish = |problem: &mut MheProblem<'_>, t: Trial, iterations: usize, trials: usize, termination| {
        problem.track_mu = 0.0;
        let final_objective = problem.evaluate(&t.z).0.norm_squared();
        let report = SolverReport {
            iterations,
            termination,
            penalty_rounds: trials,
            initial_objective,
            final_objective,
            ..t.report
        };
        (t.z, report)
    };

    // Bracket: `lo` violates the constraint, `hi` satisfies it.
    let mut lo = Trial { mu: 0.0, gap, z, report };
    let mut mu = cfg.penalty_start;
    let mut hi = loop {
        let t = solve_at(problem, mu, &lo.z, rhs, cfg)?;
        iterations += t.report.iterations;
        trials += 1;
        if t.gap <= 0.0 {
            break t;
        }
        lo = t;
        if mu >= cfg.penalty_max || trials >= MAX_MULTIPLIER_TRIALS {
            return Ok(finish(problem, lo, iterations, trials, Termination::InfeasiblePenalty));
        }
        mu = (mu * cfg.penalty_growth).min(cfg.penalty_max);
    };
    if lo.mu == 0.0 {
        // The first multiplier was already large enough; look below it.
        let floor = cfg.penalty_start * 1e-12;
        loop {
            let mu = hi.mu / cfg.penalty_growth;
            if mu < floor || trials >= MAX_MULTIPLIER_TRIALS {
                let termination = hi.report.termination;
                return Ok(finish(problem, hi, iterations, trials, termination));
            }
            let t = solve_at(problem, mu, &hi.z, rhs, cfg)?;
            iterations += t.report.iterations;
            trials += 1;
            if t.gap > 0.0 {
                lo = t;
                break;
            }
            hi = t;
        }
    }

    let tol = cfg.feasibility_tol * rhs.max(1.0);
    let (mut lo_gap, mut hi_gap) = (lo.gap, hi.gap);
    let mut last_side = 0i8;
    while hi.gap < -tol && (hi.mu / lo.mu).ln() > 1e-9 && trials < MAX_MULTIPLIER_TRIALS {
        let (a, b) = (lo.mu.ln(), hi.mu.ln());
        let s = b - hi_gap * (b - a) / (hi_gap - lo_gap);
        let s = s.clamp(a + 0.01 * (b - a), b - 0.01 * (b - a));
        let t = solve_at(problem, s.exp(), &hi.z, rhs, cfg)?;
        iterations += t.report.iterations;
        trials += 1;
        if t.gap <= 0.0 {
            hi_gap = t.gap;
            hi = t;
            if last_side == 1 {
                lo_gap *= 0.5;
            }
            last_side = 1;
        } else {
            lo_gap = t.gap;
            lo = t;
            if last_side == -1 {
                hi_gap *= 0.5;
            }
            last_side = -1;
        }
    }
    let termination = hi.report.termination;
    Ok(finish(problem, hi, iterations, trials, termination))
}

/// Builds a result for `d` without optimizing; used when a solve fails.
pub fn evaluate_decision(model: &SystemModel, window: &Window, params: &IossParams, d: &Decision) -> Result<EstimateResult, MheError> {
    window.validate(model)?;
    let (xs, ys) = rollout(model, window, d);
    let j = cost(window, d, params, &ys)?;
    let margin = match &window.constraint {
        Some(_) => {
            let (lhs, rhs) = extra_constraint_eval(window, &ys, params)?;
            Some(rhs - lhs)
        }
        None => None,
    };
    let slack = margin.map_or(0.0, |m| (-m).max(0.0));
    Ok(EstimateResult {
        t: window.t,
        start: window.start(),
        x_seq: xs,
        w_seq: d.w_seq.clone(),
        y_seq: ys,
        cost: j,
        report: SolverReport {
            iterations: 0,
            gradient_norm: f64::NAN,
            termination: Termination::Stalled,
            penalty_rounds: 0,
            constraint_slack: slack,
            initial_objective: j,
            final_objective: j,
        },
        constraint_slack: slack,
        constraint_margin: margin,
        kept_start: true,
    })
}

/// Solves the windowed NLP from `(prior, 0)`.
pub fn solve(model: &SystemModel, window: &Window, params: &IossParams, cfg: &SolverConfig) -> Result<EstimateResult, MheError> {
    solve_from(model, window, params, cfg, &Decision::cold(window, model.n_w()))
}

/// Solves the windowed NLP from a warm start. The returned cost never
/// exceeds that of the (projected) start when the start is feasible.
pub fn solve_from(
    model: &SystemModel,
    window: &Window,
    params: &IossParams,
    cfg: &SolverConfig,
    start: &Decision,
) -> Result<EstimateResult, MheError> {
    window.validate(model)?;
    if start.w_seq.len() != window.horizon {
        return Err(MheError::DecisionLength { expected: window.horizon, got: start.w_seq.len() });
    }
    check_dim("warm-start state", model.n_x(), start.x0.len())?;
    let mut problem = MheProblem::new(model, window, params)?;
    let mut z0 = start.pack();
    crate::solver::project(&mut z0, problem.lower(), problem.upper());
    let (z, report) = minimize_tracked(&mut problem, &z0, cfg)?;

    let finish = |z: &Vector| -> Result<(Decision, Vec<Vector>, Vec<Vector>, f64, f64), MheError> {
        let (d, xs, ys) = problem.roll(z);
        let j = cost(window, &d, params, &ys)?;
        let excess = problem.excess_of(&xs, &ys);
        Ok((d, xs, ys, j, excess))
    };
    let solved = finish(&z)?;
    let warm = finish(&z0)?;
    let tol = cfg.feasibility_tol;
    let keep_start = warm.4 <= tol && (solved.4 > tol || warm.3 < solved.3);
    let (d, xs, ys, j, excess) = if keep_start { warm } else { solved };
    let margin = match &window.constraint {
        Some(_) => {
            let (lhs, rhs) = extra_constraint_eval(window, &ys, params)?;
            Some(rhs - lhs)
        }
        None => None,
    };
    let slack = margin.map_or(0.0, |m| (-m).max(0.0));
    let mut report = report;
    report.constraint_slack = excess;
    if keep_start && report.termination == Termination::InfeasiblePenalty {
        report.termination = Termination::Stalled;
    }
    Ok(EstimateResult {
        t: window.t,
        start: window.start(),
        x_seq: xs,
        w_seq: d.w_seq,
        y_seq: ys,
        cost: j,
        report,
        constraint_slack: slack,
        constraint_margin: margin,
        kept_start: keep_start,
    })
}

/// Solves from each start and keeps the best result: feasible before
/// infeasible, then lowest cost. Fails only if every start fails.
pub fn solve_multistart(
    model: &SystemModel,
    window: &Window,
    params: &IossParams,
    cfg: &SolverConfig,
    starts: &[Decision],
) -> Result<EstimateResult, MheError> {
    let tol = cfg.feasibility_tol;
    let mut best: Option<EstimateResult> = None;
    let mut first_err = None;
    for s in starts {
        match solve_from(model, window, params, cfg, s) {
            Ok(r) => {
                let better = best.as_ref().is_none_or(|b| {
                    let (rf, bf) = (r.report.constraint_slack <= tol, b.report.constraint_slack <= tol);
                    (rf && !bf) || (rf == bf && r.cost < b.cost)
                });
                if better {
                    best = Some(r);
                }
            }
            Err(e) => {
                first_err.get_or_insert(e);
            }
        }
    }
    match (best, first_err) {
        (Some(r), _) => Ok(r),
        (None, Some(e)) => Err(e),
        (None, None) => Err(MheError::Context("no start points".into())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{batch_reactor, Dims, MapFn};
    use crate::solver::jacobian_fd;
    use approx::assert_relative_eq;
    use std::sync::Arc;

    fn v(x: &[f64]) -> Vector {
        Vector::from_row_slice(x)
    }

    fn reactor_window(t: usize, m: usize, meas: &[(usize, f64)]) -> Window {
        Window::new(
            t,
            m,
            v(&[3.0, 1.0]),
            vec![v(&[]); m],
            meas.iter().map(|&(j, y)| (j, v(&[y]))).collect(),
            CostVariant::Fixed,
        )
    }

    #[test]
    fn rollout_single_step() {
        let m = batch_reactor();
        let w = reactor_window(1, 1, &[]);
        let (xs, ys) = rollout(&m, &w, &Decision::cold(&w, 3));
        assert_eq!(xs.len(), 2);
        assert_relative_eq!(xs[1], v(&[2.71328, 1.14336]), epsilon = 1e-12);
        assert_eq!(ys, vec![v(&[4.0])]);
    }

    // Scalar identity model so every weighted norm is explicit.
    fn scalar_model() -> SystemModel {
        let f: MapFn = Arc::new(|x, _u, w| v(&[x[0] + w[0]]));
        let h: MapFn = Arc::new(|x, _u, w| v(&[x[0] + w[1]]));
        SystemModel::new("scalar", Dims { n_x: 1, n_u: 0, n_w: 2, n_y: 1 }, f, h)
    }

    fn unit_params(alpha: f64, eta: f64) -> IossParams {
        IossParams {
            p1: Matrix::identity(1, 1),
            p2: Matrix::identity(1, 1),
            q: Matrix::identity(2, 2),
            r: Matrix::identity(1, 1),
            eta,
            alpha,
            horizon: 1,
        }
    }

    #[test]
    fn cost_hand_values() {
        let model = scalar_model();
        let params = unit_params(5.0, 0.91);
        // prior offset 1 → ‖·‖²=1, residual √2 → 2
        let mut w = Window::new(1, 1, v(&[0.0]), vec![v(&[])], [(0, v(&[1.0 - 2f64.sqrt()]))].into(), CostVariant::Fixed);
        let d = Decision { x0: v(&[1.0]), w_seq: vec![v(&[0.0, 0.0])] };
        let (_, ys) = rollout(&model, &w, &d);
        assert_relative_eq!(cost(&w, &d, &params, &ys).unwrap(), 11.82, epsilon = 1e-12);
        w.variant = CostVariant::Varying;
        assert_relative_eq!(cost(&w, &d, &params, &ys).unwrap(), 13.82, epsilon = 1e-12);
    }

    #[test]
    fn cost_zero_at_prior_without_measurements() {
        let w = reactor_window(4, 4, &[]);
        let d = Decision::cold(&w, 3);
        let (_, ys) = rollout(&batch_reactor(), &w, &d);
        assert_eq!(cost(&w, &d, &IossParams::batch_reactor(), &ys).unwrap(), 0.0);
    }

    #[test]
    fn missing_measurement_is_an_error() {
        let mut w = reactor_window(4, 4, &[]);
        w.ks.insert(2);
        let d = Decision::cold(&w, 3);
        let (_, ys) = rollout(&batch_reactor(), &w, &d);
        assert_eq!(cost(&w, &d, &IossParams::batch_reactor(), &ys), Err(MheError::MissingMeasurement(2)));
    }

    #[test]
    fn constraint_hand_instance() {
        // Scalar outputs; residuals 1 at lag 1 and 2 (squared 4) at lag 0.
        let params = unit_params(2.0, 0.5);
        // Discounted ŵ* terms: η^{μ-0-1}·2‖ŵ*‖² = 0.5·2·3 = 3, so rhs = α·3 = 6.
        let ctx = ConstraintContext {
            mu: 2,
            eps_mu: 1,
            window_start: 0,
            w_star_eps: vec![v(&[3f64.sqrt(), 0.0])],
            y_star_eps: vec![v(&[0.0])],
            meas_eps: BTreeMap::new(),
            tilde_y: [(0, v(&[0.0])), (1, v(&[0.0]))].into(),
        };
        let w = Window::new(2, 2, v(&[0.0]), vec![v(&[]), v(&[])], BTreeMap::new(), CostVariant::Fixed).with_constraint(ctx);
        let (lhs, rhs) = extra_constraint_eval(&w, &[v(&[1.0]), v(&[2.0])], &params).unwrap();
        assert_relative_eq!(lhs, 4.5, epsilon = 1e-12);
        assert_relative_eq!(rhs, 6.0, epsilon = 1e-12);
    }

    #[test]
    fn structured_jacobian_matches_differences() {
        let model = batch_reactor();
        let params = IossParams::batch_reactor();
        let w = reactor_window(6, 6, &[(0, 4.1), (2, 3.6), (5, 3.1)]);
        let problem = MheProblem::new(&model, &w, &params).unwrap();
        let z = Decision {
            x0: v(&[2.5, 1.4]),
            w_seq: (0..6).map(|k| v(&[1e-4 * k as f64, -2e-4, 0.01 * k as f64])).collect(),
        }
        .pack();
        let (jr, jg) = problem.jacobians(&z).unwrap();
        let (fr, fg) = jacobian_fd(&problem, &z, 1e-7);
        for (analytic, fd) in [(jr, fr), (jg, fg)] {
            let scale = analytic.amax();
            assert!((&analytic - &fd).amax() <= 1e-4 * scale, "{}", (&analytic - &fd).amax() / scale);
        }
    }

    #[test]
    fn tracking_rows_carry_the_multiplier() {
        let model = scalar_model();
        let params = unit_params(2.0, 0.5);
        let ctx = ConstraintContext {
            mu: 2,
            eps_mu: 1,
            window_start: 0,
            w_star_eps: vec![v(&[0.3, 0.0])],
            y_star_eps: vec![v(&[0.0])],
            meas_eps: BTreeMap::new(),
            tilde_y: [(0, v(&[0.4])), (1, v(&[-0.2]))].into(),
        };
        let w = Window::new(2, 2, v(&[0.0]), vec![v(&[]), v(&[])], BTreeMap::new(), CostVariant::Fixed).with_constraint(ctx);
        let mut problem = MheProblem::new(&model, &w, &params).unwrap();
        let d = Decision { x0: v(&[0.7]), w_seq: vec![v(&[0.1, -0.3]), v(&[0.2, 0.5])] };
        let z = d.pack();
        let base = problem.evaluate(&z).0.norm_squared();
        problem.track_mu = 1.5;
        let (_, ys) = rollout(&model, &w, &d);
        let (lhs, _) = extra_constraint_eval(&w, &ys, &params).unwrap();
        assert_relative_eq!(problem.evaluate(&z).0.norm_squared(), base + 1.5 * lhs, max_relative = 1e-12);
        let (jr, _) = problem.jacobians(&z).unwrap();
        let (fr, _) = jacobian_fd(&problem, &z, 1e-7);
        assert!((&jr - &fr).amax() <= 1e-5 * jr.amax());
    }

    #[test]
    fn active_tracking_constraint_is_optimal_on_convex_instance() {
        use rand::{Rng, SeedableRng};
        // Linear model: convex cost and constraint, so no feasible point near
        // the solution may do better.
        let model = scalar_model();
        let params = unit_params(2.0, 0.5);
        let ctx = ConstraintContext {
            mu: 2,
            eps_mu: 1,
            window_start: 0,
            w_star_eps: vec![v(&[0.3, 0.0])],
            y_star_eps: vec![v(&[0.0])],
            meas_eps: BTreeMap::new(),
            tilde_y: [(0, v(&[0.0]))].into(),
        };
        let w = Window::new(2, 2, v(&[0.0]), vec![v(&[]), v(&[])], [(1, v(&[3.0]))].into(), CostVariant::Fixed)
            .with_constraint(ctx);
        let cfg = SolverConfig::default();
        let free = solve(&model, &Window { constraint: None, ..w.clone() }, &params, &cfg).unwrap();
        let res = solve(&model, &w, &params, &cfg).unwrap();
        assert!(res.report.converged(), "{:?}", res.report);
        let margin = res.constraint_margin.unwrap();
        assert!((-1e-6..=1e-5).contains(&margin), "margin {margin}");
        assert!(res.cost > free.cost);

        let z_star = res.decision().pack();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut checked = 0;
        for _ in 0..4000 {
            let z = z_star.map(|x| x + rng.random_range(-0.3..0.3));
            let d = Decision::unpack(&z, 1, 2, 2);
            let (_, ys) = rollout(&model, &w, &d);
            let (lhs, rhs) = extra_constraint_eval(&w, &ys, &params).unwrap();
            if lhs <= rhs {
                checked += 1;
                assert!(cost(&w, &d, &params, &ys).unwrap() >= res.cost - 1e-6);
            }
        }
        assert!(checked > 100, "{checked}");
    }

    #[test]
    fn objective_equals_cost_when_feasible() {
        let model = batch_reactor();
        let params = IossParams::batch_reactor();
        let w = reactor_window(5, 5, &[(1, 3.9), (4, 3.0)]);
        let problem = MheProblem::new(&model, &w, &params).unwrap();
        let d = Decision { x0: v(&[2.9, 1.2]), w_seq: vec![v(&[1e-4, 2e-4, 0.02]); 5] };
        let (_, ys) = rollout(&model, &w, &d);
        let j = cost(&w, &d, &params, &ys).unwrap();
        assert_relative_eq!(problem.evaluate(&d.pack()).0.norm_squared(), j, max_relative = 1e-12);
    }

    #[test]
    fn exact_data_recovers_truth() {
        let model = batch_reactor();
        let params = IossParams::batch_reactor();
        let mut x = v(&[3.0, 1.0]);
        let mut meas = BTreeMap::new();
        for j in 0..10 {
            meas.insert(j, model.output(&x, &v(&[]), &model.zero_noise()).unwrap());
            x = model.step(&x, &v(&[]), &model.zero_noise()).unwrap();
        }
        let w = Window::new(10, 10, v(&[3.0, 1.0]), vec![v(&[]); 10], meas, CostVariant::Fixed);
        let res = solve(&model, &w, &params, &SolverConfig::default()).unwrap();
        assert!((res.estimate() - &x).norm() <= 1e-6);
        assert!(res.cost <= 1e-12);
    }
}
