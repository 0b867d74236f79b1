//! Plant/remote protocol: scheduling bookkeeping, horizon rules, message
//! schemas, the remote estimator and the lock-step orchestrator.
//!
//! The plant side owns the trigger and decides `γ_t`; on an event it sends
//! `y_{t-1}` and the remote side solves the NLP and answers with
//! `(d̃_{t+1}, x̂*_{t-M_t|t}, x̂_t)`. Without an event both sides advance the
//! estimate open loop. Inputs are known on both sides.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

use thiserror::Error;

use crate::linalg::Vector;
use crate::lyapunov::{IossParams, Scheme};
use crate::mhe::{self, ConstraintContext, CostVariant, Decision, EstimateResult, MheError, Window};
use crate::model::SystemModel;
use crate::solver::SolverConfig;
use crate::trigger::{self, EtmState};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProtocolError {
    #[error("step {got} out of order (expected {expected})")]
    OutOfOrder { expected: usize, got: usize },
    #[error("no archived solution for event time {0}")]
    MissingArchive(usize),
    #[error("plant and remote disagree: {0}")]
    Desync(String),
    #[error("time {0} is not a no-event time")]
    NotNoEvent(usize),
    #[error(transparent)]
    Mhe(#[from] MheError),
}

// ---------------------------------------------------------------------------
// Messages

/// Self-describing log record: named scalar arrays.
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub kind: &'static str,
    pub fields: Vec<(&'static str, Vec<f64>)>,
}

impl fmt::Display for Record {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.kind)?;
        for (name, vals) in &self.fields {
            write!(f, " {name}=[")?;
            for (i, v) in vals.iter().enumerate() {
                if i > 0 {
                    f.write_str(",")?;
                }
                write!(f, "{v}")?;
            }
            f.write_str("]")?;
        }
        Ok(())
    }
}

/// Plant → remote: `y_{t-1}`, sent iff `γ_t = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementMsg {
    pub t: usize,
    pub y_prev: Vector,
}

impl MeasurementMsg {
    pub fn payload(&self) -> usize {
        self.y_prev.len() + 1
    }

    pub fn to_record(&self) -> Record {
        Record {
            kind: "measurement",
            fields: vec![("t", vec![self.t as f64]), ("y_prev", self.y_prev.iter().copied().collect())],
        }
    }
}

/// Remote → plant after an event-time solve.
#[derive(Debug, Clone, PartialEq)]
pub struct FeedbackMsg {
    pub t: usize,
    pub d_tilde_next: f64,
    pub x_first: Vector,
    pub x_now: Vector,
}

impl FeedbackMsg {
    pub fn payload(&self) -> usize {
        self.x_first.len() + self.x_now.len() + 2
    }

    pub fn to_record(&self) -> Record {
        Record {
            kind: "feedback",
            fields: vec![
                ("t", vec![self.t as f64]),
                ("d_tilde_next", vec![self.d_tilde_next]),
                ("x_first", self.x_first.iter().copied().collect()),
                ("x_now", self.x_now.iter().copied().collect()),
            ],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ChannelStats {
    pub events_total: usize,
    pub measurement_msgs: usize,
    pub feedback_msgs: usize,
    pub payload_scalars: usize,
}

/// In-order, exactly-once, same-step delivery with accounting.
#[derive(Debug, Default)]
pub struct Channel {
    up: VecDeque<MeasurementMsg>,
    down: VecDeque<FeedbackMsg>,
    pub stats: ChannelStats,
    log: Option<Vec<Record>>,
}

impl Channel {
    pub fn with_log() -> Self {
        Self { log: Some(Vec::new()), ..Self::default() }
    }

    pub fn send_measurement(&mut self, msg: MeasurementMsg) {
        self.stats.events_total += 1;
        self.stats.measurement_msgs += 1;
        self.stats.payload_scalars += msg.payload();
        if let Some(log) = &mut self.log {
            log.push(msg.to_record());
        }
        self.up.push_back(msg);
    }

    pub fn send_feedback(&mut self, msg: FeedbackMsg) {
        self.stats.feedback_msgs += 1;
        self.stats.payload_scalars += msg.payload();
        if let Some(log) = &mut self.log {
            log.push(msg.to_record());
        }
        self.down.push_back(msg);
    }

    pub fn recv_measurement(&mut self) -> Option<MeasurementMsg> {
        self.up.pop_front()
    }

    pub fn recv_feedback(&mut self) -> Option<FeedbackMsg> {
        self.down.pop_front()
    }

    pub fn log(&self) -> &[Record] {
        self.log.as_deref().unwrap_or(&[])
    }
}

// ---------------------------------------------------------------------------
// Scheduling bookkeeping

/// `M_t = min{t, M + δ_t}`.
pub fn horizon_fixed(t: usize, delta: usize, m: usize) -> usize {
    t.min(m + delta)
}

/// History of `γ` with the derived times `ε_t`, `δ_t`, `μ_t`, `σ_t` and the
/// horizon in force at each step. `γ_0 = 1` by convention.
#[derive(Debug, Clone, PartialEq)]
pub struct SchedulerState {
    base: usize,
    scheme: Scheme,
    gamma: Vec<bool>,
    eps: Vec<usize>,
    mu: Vec<Option<usize>>,
    sigma: Vec<usize>,
    run: Vec<usize>,
    horizons: Vec<usize>,
    tau_tilde: Option<usize>,
    identity_violations: Vec<usize>,
}

impl SchedulerState {
    pub fn new(base: usize, scheme: Scheme) -> Self {
        Self {
            base,
            scheme,
            gamma: vec![true],
            eps: vec![0],
            mu: vec![None],
            sigma: vec![0],
            run: vec![1],
            horizons: vec![0],
            tau_tilde: None,
            identity_violations: Vec::new(),
        }
    }

    pub fn base_horizon(&self) -> usize {
        self.base
    }

    pub fn scheme(&self) -> Scheme {
        self.scheme
    }

    /// Last recorded time.
    pub fn now(&self) -> usize {
        self.gamma.len() - 1
    }

    /// Records `γ_t` and fixes `M_t`.
    pub fn record(&mut self, t: usize, gamma: bool) -> Result<usize, ProtocolError> {
        if t != self.gamma.len() {
            return Err(ProtocolError::OutOfOrder { expected: self.gamma.len(), got: t });
        }
        let eps = if self.gamma[t - 1] { t - 1 } else { self.eps[t - 1] };
        self.gamma.push(gamma);
        self.eps.push(eps);
        self.mu.push(if gamma { self.mu[t - 1] } else { Some(t) });
        if !gamma && self.tau_tilde.is_none() {
            self.tau_tilde = Some(t);
        }
        let run = if gamma { self.run[t - 1] + 1 } else { 0 };
        self.run.push(run);
        let needed = t.min(2 * self.base - 1) + 1;
        self.sigma.push(if run >= needed { t } else { self.sigma[t - 1] });
        let m_t = match self.scheme {
            Scheme::Fixed => horizon_fixed(t, self.delta(t), self.base),
            Scheme::Varying => horizon_varying(t, self, self.base),
        };
        self.horizons.push(m_t);
        if !gamma {
            // μ_t = t here; the windows at μ and at ε_μ must start together.
            if t - m_t != eps - self.horizons[eps] {
                self.identity_violations.push(t);
            }
        }
        Ok(m_t)
    }

    pub fn gamma(&self, t: usize) -> bool {
        self.gamma[t]
    }

    pub fn gammas(&self) -> &[bool] {
        &self.gamma
    }

    /// `j ∈ K_s` ⟺ `γ_{j+1} = 1`.
    pub fn in_ks(&self, j: usize) -> bool {
        self.gamma.get(j + 1).copied().unwrap_or(false)
    }

    /// `ε_t`: last event strictly before `t`.
    pub fn eps(&self, t: usize) -> usize {
        self.eps[t]
    }

    /// `δ_t`.
    pub fn delta(&self, t: usize) -> usize {
        if self.gamma[t] {
            0
        } else {
            t - self.eps[t]
        }
    }

    /// `μ_t`: last no-event time `<= t`.
    pub fn mu(&self, t: usize) -> Option<usize> {
        self.mu[t]
    }

    /// `σ_t`: last time closing a run of `min{τ, 2M-1}+1` consecutive events.
    pub fn sigma(&self, t: usize) -> usize {
        self.sigma[t]
    }

    /// `τ̃`: first no-event time.
    pub fn tau_tilde(&self) -> Option<usize> {
        self.tau_tilde
    }

    pub fn horizon(&self, t: usize) -> usize {
        self.horizons[t]
    }

    pub fn horizons(&self) -> &[usize] {
        &self.horizons
    }

    /// No-event times where `μ - M_μ ≠ ε_μ - M_{ε_μ}`; empty on consistent runs.
    pub fn identity_violations(&self) -> &[usize] {
        &self.identity_violations
    }
}

/// `M_t = min{t, t - μ_{t-δ_t-M}, t - σ_t + M}`, the `μ` term dropped while
/// `t - δ_t - M` precedes the first no-event time. Needs `γ_t` recorded.
pub fn horizon_varying(t: usize, sched: &SchedulerState, m: usize) -> usize {
    let delta = sched.delta(t);
    let mut m_t = t.min(t - sched.sigma(t) + m);
    if let Some(s) = t.checked_sub(delta + m) {
        if sched.tau_tilde.is_some_and(|tt| s >= tt) {
            let mu = sched.mu(s).expect("μ defined after τ̃");
            m_t = m_t.min(t - mu);
        }
    }
    m_t
}

// ---------------------------------------------------------------------------
// Remote side

#[derive(Debug, Clone, PartialEq)]
pub struct ProtocolConfig {
    pub scheme: Scheme,
    pub extra_constraint: bool,
    pub solver: SolverConfig,
}

/// What the remote side did at one step.
#[derive(Debug, Clone, PartialEq)]
pub struct EventOutcome {
    pub result: EstimateResult,
    pub d: f64,
    pub p: f64,
    pub d_tilde_next: f64,
    /// Solver did not converge or the constraint stayed violated.
    pub flagged: bool,
    /// The solve failed outright and the warm start was used instead.
    pub degraded: bool,
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct RemoteEstimator {
    model: SystemModel,
    params: IossParams,
    cfg: ProtocolConfig,
    scheduler: SchedulerState,
    received: BTreeMap<usize, Vector>,
    inputs: Vec<Vector>,
    estimates: Vec<Vector>,
    archive: BTreeMap<usize, EstimateResult>,
    last_event: Option<usize>,
    /// Every index whose measurement was read by a cost or constraint.
    accessed: BTreeSet<usize>,
}

impl RemoteEstimator {
    pub fn new(model: SystemModel, params: IossParams, cfg: ProtocolConfig, x_hat0: Vector) -> Self {
        let scheduler = SchedulerState::new(params.horizon, cfg.scheme);
        Self {
            model,
            params,
            cfg,
            scheduler,
            received: BTreeMap::new(),
            inputs: Vec::new(),
            estimates: vec![x_hat0],
            archive: BTreeMap::new(),
            last_event: None,
            accessed: BTreeSet::new(),
        }
    }

    pub fn scheduler(&self) -> &SchedulerState {
        &self.scheduler
    }

    pub fn estimates(&self) -> &[Vector] {
        &self.estimates
    }

    pub fn estimate(&self) -> &Vector {
        self.estimates.last().expect("initial estimate")
    }

    pub fn received(&self) -> &BTreeMap<usize, Vector> {
        &self.received
    }

    pub fn accessed_measurements(&self) -> &BTreeSet<usize> {
        &self.accessed
    }

    pub fn archive_times(&self) -> impl Iterator<Item = usize> + '_ {
        self.archive.keys().copied()
    }

    pub fn config(&self) -> &ProtocolConfig {
        &self.cfg
    }

    pub fn last_result(&self) -> Option<&EstimateResult> {
        self.last_event.and_then(|e| self.archive.get(&e))
    }

    fn window_meas(&mut self, start: usize, end: usize) -> BTreeMap<usize, Vector> {
        let meas: BTreeMap<usize, Vector> = self.received.range(start..end).map(|(&j, y)| (j, y.clone())).collect();
        self.accessed.extend(meas.keys());
        meas
    }

    fn constraint_context(&mut self, t: usize, start: usize) -> Result<Option<ConstraintContext>, ProtocolError> {
        if !self.cfg.extra_constraint {
            return Ok(None);
        }
        let Some(mu) = self.scheduler.mu(t) else {
            return Ok(None);
        };
        let eps_mu = self.scheduler.eps(mu);
        let ev = self.archive.get(&eps_mu).ok_or(ProtocolError::MissingArchive(eps_mu))?.clone();
        let meas_eps = self.window_meas(ev.start, eps_mu);
        let zero = self.model.zero_noise();
        let mut tilde_y = BTreeMap::new();
        for j in start..mu {
            if self.received.contains_key(&j) {
                continue;
            }
            let y = if j < eps_mu {
                let k = j.checked_sub(ev.start).ok_or_else(|| {
                    MheError::Context(format!("reference index {j} precedes the event window at {}", ev.start))
                })?;
                ev.y_seq[k].clone()
            } else {
                self.model.h(&self.estimates[j], &self.inputs[j], &zero)
            };
            tilde_y.insert(j, y);
        }
        Ok(Some(ConstraintContext {
            mu,
            eps_mu,
            window_start: ev.start,
            w_star_eps: ev.w_seq,
            y_star_eps: ev.y_seq,
            meas_eps,
            tilde_y,
        }))
    }

    fn build_window(&mut self, t: usize) -> Result<Window, ProtocolError> {
        let m_t = self.scheduler.horizon(t);
        let start = t - m_t;
        let meas = self.window_meas(start, t);
        let mut w = Window::new(
            t,
            m_t,
            self.estimates[start].clone(),
            self.inputs[start..t].to_vec(),
            meas,
            CostVariant::from(self.cfg.scheme),
        );
        w.constraint = self.constraint_context(t, start)?;
        Ok(w)
    }

    /// Shift of the last event solution onto the new window, zero-padded.
    fn warm_start(&self, window: &Window) -> Decision {
        let n_w = self.model.n_w();
        let start = window.start();
        match self.last_result() {
            Some(ev) if start >= ev.start => {
                let x0 = if start <= ev.t { ev.x_seq[start - ev.start].clone() } else { self.estimates[start].clone() };
                let w_seq = (start..window.t)
                    .map(|j| if j < ev.t { ev.w_seq[j - ev.start].clone() } else { Vector::zeros(n_w) })
                    .collect();
                Decision { x0, w_seq }
            }
            _ => Decision::cold(window, n_w),
        }
    }

    fn prune(&mut self) {
        let t = self.scheduler.now();
        let keep_from = match self.scheduler.mu(t) {
            Some(mu) => self.scheduler.eps(mu),
            None => self.last_event.unwrap_or(0),
        };
        self.archive = self.archive.split_off(&keep_from);
    }

    /// Handles time `t` given the (possibly absent) measurement message.
    pub fn step(&mut self, t: usize, msg: Option<MeasurementMsg>, u_prev: &Vector) -> Result<Option<(FeedbackMsg, EventOutcome)>, ProtocolError> {
        if self.inputs.len() + 1 != t {
            return Err(ProtocolError::OutOfOrder { expected: self.inputs.len() + 1, got: t });
        }
        self.inputs.push(u_prev.clone());
        let Some(msg) = msg else {
            self.scheduler.record(t, false)?;
            let x = self.model.f(self.estimate(), u_prev, &self.model.zero_noise());
            self.estimates.push(x);
            self.prune();
            return Ok(None);
        };
        if msg.t != t {
            return Err(ProtocolError::Desync(format!("measurement for {} arrived at {t}", msg.t)));
        }
        self.scheduler.record(t, true)?;
        self.received.insert(t - 1, msg.y_prev);

        let window = self.build_window(t)?;
        // The problem is nonconvex; the cold start guards against the shifted
        // solution dragging the estimate into a poor local minimum.
        let start_guess = self.warm_start(&window);
        let cold = Decision::cold(&window, self.model.n_w());
        let starts = if start_guess == cold { vec![cold] } else { vec![start_guess.clone(), cold] };
        let (result, degraded, error) = match mhe::solve_multistart(&self.model, &window, &self.params, &self.cfg.solver, &starts) {
            Ok(r) => (r, false, None),
            Err(e) => (mhe::evaluate_decision(&self.model, &window, &self.params, &start_guess)?, true, Some(e.to_string())),
        };
        let flagged = degraded || !result.report.converged() || result.report.constraint_slack > self.cfg.solver.feasibility_tol;
        let d = trigger::compute_d(&result, &self.params, &window.meas);
        let p = trigger::compute_p(&result, &self.params, &self.model, &window.inputs, &window.ks);
        let d_tilde_next = trigger::update_dtilde(d, p, self.params.alpha);
        let fb = FeedbackMsg {
            t,
            d_tilde_next,
            x_first: result.first_state().clone(),
            x_now: result.estimate().clone(),
        };
        self.estimates.push(result.estimate().clone());
        self.archive.insert(t, result.clone());
        self.last_event = Some(t);
        self.prune();
        Ok(Some((fb, EventOutcome { result, d, p, d_tilde_next, flagged, degraded, error })))
    }

    /// Shortcut solution at the current no-event time.
    pub fn prop1_estimates(&self, t: usize) -> Result<EstimateResult, ProtocolError> {
        if t != self.scheduler.now() {
            return Err(ProtocolError::NotNoEvent(t));
        }
        let last = self.last_result().ok_or(ProtocolError::NotNoEvent(t))?;
        prop1_extend(&self.model, &self.params, &self.scheduler, last, &self.inputs, t)
    }

    /// Full NLP solve at a no-event time, for auditing the shortcut. Does not
    /// change any state.
    ///
    /// The problem is nonconvex, so two starts are used and the lowest
    /// feasible cost wins: `(prior, 0)` and `(x̂*_{ε-M_ε|ε}, 0)`. Neither is
    /// the shortcut itself unless the event solution had no disturbances.
    pub fn explicit_solve(&self, t: usize) -> Result<EstimateResult, ProtocolError> {
        if t != self.scheduler.now() || self.scheduler.gamma(t) {
            return Err(ProtocolError::NotNoEvent(t));
        }
        let mut scratch = self.clone();
        let window = scratch.build_window(t)?;
        let mut starts = vec![Decision::cold(&window, self.model.n_w())];
        if let Some(ev) = self.last_result().filter(|ev| ev.start == window.start()) {
            starts.push(Decision { x0: ev.first_state().clone(), w_seq: vec![self.model.zero_noise(); window.horizon] });
        }
        Ok(mhe::solve_multistart(&self.model, &window, &self.params, &self.cfg.solver, &starts)?)
    }
}

/// The no-solve solution at no-event time `t`: carry over the event solution
/// and extend it with zero disturbances; cost scales with `η^δ`.
pub fn prop1_extend(
    model: &SystemModel,
    params: &IossParams,
    sched: &SchedulerState,
    last: &EstimateResult,
    inputs: &[Vector],
    t: usize,
) -> Result<EstimateResult, ProtocolError> {
    if t < last.t || (sched.gamma(t) && t != last.t) {
        return Err(ProtocolError::NotNoEvent(t));
    }
    let delta = t - last.t;
    if t - sched.horizon(t) != last.start {
        return Err(ProtocolError::Desync(format!(
            "window at {t} starts at {}, event window at {}",
            t - sched.horizon(t),
            last.start
        )));
    }
    let zero = model.zero_noise();
    let mut out = last.clone();
    out.t = t;
    for j in last.t..t {
        let x = out.x_seq.last().expect("non-empty").clone();
        out.y_seq.push(model.h(&x, &inputs[j], &zero));
        out.x_seq.push(model.f(&x, &inputs[j], &zero));
        out.w_seq.push(zero.clone());
    }
    out.cost = last.cost * params.eta.powi(delta as i32);
    Ok(out)
}

// ---------------------------------------------------------------------------
// Plant side

#[derive(Debug, Clone)]
pub struct PlantSide {
    model: SystemModel,
    params: IossParams,
    etm: EtmState,
    scheduler: SchedulerState,
    ys: Vec<Vector>,
    us: Vec<Vector>,
}

impl PlantSide {
    pub fn new(model: SystemModel, params: IossParams, scheme: Scheme, x_hat0: Vector) -> Self {
        let scheduler = SchedulerState::new(params.horizon, scheme);
        Self { model, params, etm: EtmState::new(x_hat0), scheduler, ys: Vec::new(), us: Vec::new() }
    }

    pub fn etm(&self) -> &EtmState {
        &self.etm
    }

    pub fn scheduler(&self) -> &SchedulerState {
        &self.scheduler
    }

    pub fn outputs(&self) -> &[Vector] {
        &self.ys
    }

    pub fn inputs(&self) -> &[Vector] {
        &self.us
    }

    /// Observes `y_{t-1}` and decides `γ_t`.
    pub fn decide(&mut self, t: usize, y_prev: &Vector, u_prev: &Vector) -> Result<Option<MeasurementMsg>, ProtocolError> {
        self.ys.push(y_prev.clone());
        self.us.push(u_prev.clone());
        let gamma = trigger::evaluate(&mut self.etm, &self.model, &self.params, t, y_prev, u_prev);
        self.scheduler.record(t, gamma)?;
        #[cfg(debug_assertions)]
        if (t - self.etm.eps) % 50 == 0 {
            let (ybar, innov) = trigger::recompute_sums(&self.etm, &self.model, &self.params, &self.ys, &self.us);
            debug_assert!((ybar - self.etm.ybar_residual_sum).abs() <= 1e-9 * ybar.abs().max(1.0));
            debug_assert!((innov - self.etm.innov_sum).abs() <= 1e-9 * innov.abs().max(1.0));
        }
        Ok(gamma.then(|| MeasurementMsg { t, y_prev: y_prev.clone() }))
    }

    /// Applies feedback, or predicts open loop when none arrived.
    pub fn finish(&mut self, t: usize, fb: Option<FeedbackMsg>, u_prev: &Vector) -> Result<(), ProtocolError> {
        match fb {
            Some(fb) => {
                if fb.t != t || !self.scheduler.gamma(t) {
                    return Err(ProtocolError::Desync(format!("feedback for {} at {t}", fb.t)));
                }
                let start = t - self.scheduler.horizon(t);
                let flags = (start..t).map(|j| self.scheduler.in_ks(j)).collect();
                trigger::on_event(
                    &mut self.etm,
                    &self.model,
                    &self.params,
                    t,
                    start,
                    fb.d_tilde_next,
                    &fb.x_first,
                    &fb.x_now,
                    flags,
                    &self.ys,
                    &self.us,
                );
            }
            None => {
                if self.scheduler.gamma(t) {
                    return Err(ProtocolError::Desync(format!("event at {t} without feedback")));
                }
                trigger::open_loop_predict(&mut self.etm, &self.model, u_prev);
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Orchestrator

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub t: usize,
    pub gamma: bool,
    pub horizon: usize,
    pub x_hat: Vector,
    /// Trigger condition sides at `t` (`γ_t = 0` iff `lhs < rhs`).
    pub etm_lhs: f64,
    pub etm_rhs: f64,
    /// `d̃` in force after this step.
    pub d_tilde: f64,
    pub event: Option<EventOutcome>,
}

impl StepRecord {
    pub fn flagged(&self) -> bool {
        self.event.as_ref().is_some_and(|e| e.flagged)
    }
}

/// Plant side, remote side and channel, stepped in lock step.
#[derive(Debug)]
pub struct EtMhe {
    pub plant: PlantSide,
    pub remote: RemoteEstimator,
    pub channel: Channel,
}

impl EtMhe {
    pub fn new(model: SystemModel, params: IossParams, cfg: ProtocolConfig, x_hat0: Vector) -> Self {
        let plant = PlantSide::new(model.clone(), params.clone(), cfg.scheme, x_hat0.clone());
        let remote = RemoteEstimator::new(model, params, cfg, x_hat0);
        Self { plant, remote, channel: Channel::default() }
    }

    pub fn with_message_log(mut self) -> Self {
        self.channel = Channel::with_log();
        self
    }

    /// One period: trigger, optional solve and feedback, estimate update.
    pub fn step(&mut self, t: usize, y_prev: &Vector, u_prev: &Vector) -> Result<StepRecord, ProtocolError> {
        if let Some(msg) = self.plant.decide(t, y_prev, u_prev)? {
            self.channel.send_measurement(msg);
        }
        let (etm_lhs, etm_rhs) = (self.plant.etm.condition_lhs(), self.plant.etm.condition_rhs(t, self.plant.params.eta));
        let gamma = self.plant.scheduler.gamma(t);

        let msg = self.channel.recv_measurement();
        let event = match self.remote.step(t, msg, u_prev)? {
            Some((fb, outcome)) => {
                self.channel.send_feedback(fb);
                Some(outcome)
            }
            None => None,
        };

        let fb = self.channel.recv_feedback();
        self.plant.finish(t, fb, u_prev)?;
        if self.plant.etm.x_hat != *self.remote.estimate() {
            return Err(ProtocolError::Desync(format!("estimate copies differ at {t}")));
        }
        let horizon = self.remote.scheduler.horizon(t);
        if horizon != self.plant.scheduler.horizon(t) {
            return Err(ProtocolError::Desync(format!("horizons differ at {t}")));
        }
        Ok(StepRecord {
            t,
            gamma,
            horizon,
            x_hat: self.remote.estimate().clone(),
            etm_lhs,
            etm_rhs,
            d_tilde: self.plant.etm.d_tilde,
            event,
        })
    }
}
