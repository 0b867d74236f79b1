//! Closed-loop experiments: single runs, α sweeps, bound checks and paired
//! comparisons.

use rayon::prelude::*;
use thiserror::Error;

use crate::linalg::Vector;
use crate::lyapunov::{self, BoundConstants, IossParams, LyapunovError, Scheme, ValidationReport};
use crate::mhe::EstimateResult;
use crate::model::{self, ModelError, ModelRegistry, NoiseSpec, SystemModel, Trajectory};
use crate::protocol::{ChannelStats, EtMhe, ProtocolConfig, ProtocolError, StepRecord};
use crate::solver::SolverConfig;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("unknown model `{0}`")]
    UnknownModel(String),
    #[error("no default parameters for model `{0}`")]
    NoDefaults(String),
    #[error("invalid parameters:\n{0}")]
    InvalidParams(ValidationReport),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Lyapunov(#[from] LyapunovError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("at t = {t}: {source}")]
    Protocol { t: usize, source: ProtocolError },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub model: String,
    pub steps: usize,
    pub seed: u64,
    pub alpha: f64,
    pub scheme: Scheme,
    /// Base horizon; `None` selects the scheme's minimum.
    pub horizon: Option<usize>,
    /// `P1`, `P2`, `Q`, `R`, `η` (α and `M` come from the fields above).
    pub params: IossParams,
    pub noise: Vec<f64>,
    pub x0: Vector,
    pub x_hat0: Vector,
    pub extra_constraint: bool,
    /// Audit every k-th no-event step against a full solve (0 = off).
    pub audit_prop1: usize,
    /// Disturbances vanish from this step on.
    pub noise_off_after: Option<usize>,
    /// Constant input applied at every step.
    pub input: Vec<f64>,
    /// Leading steps excluded from the RMSE.
    pub rmse_skip: usize,
    pub solver: SolverConfig,
    /// Keep full event-time solutions in the result.
    pub keep_results: bool,
}

impl SimConfig {
    /// Benchmark defaults for a built-in model.
    pub fn for_model(name: &str) -> Result<Self, SimError> {
        let registry = ModelRegistry::with_builtins();
        let m = registry.get(name).ok_or_else(|| SimError::UnknownModel(name.into()))?;
        let params = IossParams::for_model(name).ok_or_else(|| SimError::NoDefaults(name.into()))?;
        let (x0, x_hat0) = model::default_initial_conditions(name).ok_or_else(|| SimError::NoDefaults(name.into()))?;
        let steps = if name == "robot_arm" { 1000 } else { 60 };
        Ok(Self {
            model: name.into(),
            steps,
            seed: 0,
            alpha: params.alpha,
            scheme: Scheme::Fixed,
            horizon: None,
            noise: m.default_noise().to_vec(),
            x0,
            x_hat0,
            extra_constraint: true,
            audit_prop1: 0,
            noise_off_after: None,
            input: vec![0.0; m.n_u()],
            rmse_skip: 0,
            solver: SolverConfig::default(),
            keep_results: true,
            params,
        })
    }

    pub fn batch_reactor() -> Self {
        Self::for_model("batch_reactor").expect("built-in model")
    }

    pub fn robot_arm() -> Self {
        Self::for_model("robot_arm").expect("built-in model")
    }
}

/// One no-event step checked against an explicit solve.
#[derive(Debug, Clone, PartialEq)]
pub struct Prop1Audit {
    pub t: usize,
    pub shortcut: Vector,
    pub explicit: Vector,
    pub difference: f64,
    pub shortcut_cost: f64,
    pub explicit_cost: f64,
    pub converged: bool,
    /// The tracking constraint was active in the event solve the shortcut
    /// extends. The next no-event problem references that solve instead, so
    /// its feasible set is larger and the shortcut need not be optimal.
    pub event_constraint_active: bool,
}

impl Prop1Audit {
    pub fn matches(&self, tol: f64) -> bool {
        self.difference <= tol
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundCheck {
    pub constants: BoundConstants,
    /// Bound at `t = 0..=T`.
    pub bound: Vec<f64>,
    pub violations: Vec<usize>,
    /// Violations where the estimate in force came from a flagged solve.
    pub explained: Vec<usize>,
    /// `max_t ‖ê_t‖ / bound_t`.
    pub max_ratio: f64,
}

impl BoundCheck {
    pub fn unexplained(&self) -> impl Iterator<Item = usize> + '_ {
        self.violations.iter().copied().filter(|t| !self.explained.contains(t))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimResult {
    pub config: SimConfig,
    /// Base horizon actually used.
    pub horizon: usize,
    pub truth: Trajectory,
    /// `x̂_0..x̂_T`.
    pub estimates: Vec<Vector>,
    /// `γ_0..γ_T` (`γ_0 = 1`).
    pub gammas: Vec<bool>,
    pub horizons: Vec<usize>,
    pub error_norms: Vec<f64>,
    /// `Σ_{t=1}^{T} γ_t`.
    pub events: usize,
    pub channel: ChannelStats,
    pub steps: Vec<StepRecord>,
    pub audits: Vec<Prop1Audit>,
    pub flagged_steps: Vec<usize>,
    pub identity_violations: Vec<usize>,
    pub warnings: Vec<String>,
}

impl SimResult {
    /// `sqrt(mean_t ‖ê_t‖²)` over `t = rmse_skip..=T`.
    pub fn rmse(&self) -> f64 {
        let tail = &self.error_norms[self.config.rmse_skip.min(self.error_norms.len() - 1)..];
        (tail.iter().map(|e| e * e).sum::<f64>() / tail.len() as f64).sqrt()
    }

    pub fn event_results(&self) -> impl Iterator<Item = &EstimateResult> {
        self.steps.iter().filter_map(|s| s.event.as_ref().map(|e| &e.result))
    }

    pub fn effective_params(&self) -> IossParams {
        self.config.params.clone().with_alpha(self.config.alpha).with_horizon(self.horizon)
    }
}

fn resolve(model: &SystemModel, cfg: &SimConfig) -> Result<(IossParams, Vec<String>), SimError> {
    if cfg.steps == 0 {
        return Err(SimError::Config("T must be at least 1".into()));
    }
    let mut warnings = Vec::new();
    let mut params = cfg.params.clone().with_alpha(cfg.alpha);
    params.horizon = cfg.horizon.unwrap_or(1);
    let report = lyapunov::validate(&params, Some(model))?;
    if !report.is_valid() {
        return Err(SimError::InvalidParams(report));
    }
    let min = lyapunov::min_horizon(&params, cfg.scheme)?.horizon;
    params.horizon = match cfg.horizon {
        Some(m) => {
            if m < min {
                warnings.push(format!(
                    "horizon {m} is below the minimum {min} for the {} scheme; the stability guarantee does not apply",
                    cfg.scheme
                ));
            }
            m
        }
        None => min,
    };
    for (what, expected, got) in [
        ("x0", model.n_x(), cfg.x0.len()),
        ("x_hat0", model.n_x(), cfg.x_hat0.len()),
        ("input", model.n_u(), cfg.input.len()),
        ("noise", model.n_w(), cfg.noise.len()),
    ] {
        if expected != got {
            return Err(SimError::Config(format!("{what} has {got} entries, model expects {expected}")));
        }
    }
    Ok((params, warnings))
}

/// Runs a built-in model by name.
pub fn run(cfg: &SimConfig) -> Result<SimResult, SimError> {
    let registry = ModelRegistry::with_builtins();
    let model = registry.get(&cfg.model).ok_or_else(|| SimError::UnknownModel(cfg.model.clone()))?;
    run_with(model, cfg)
}

/// Closed-loop run of the event-triggered estimator against a simulated plant.
pub fn run_with(model: &SystemModel, cfg: &SimConfig) -> Result<SimResult, SimError> {
    let (params, warnings) = resolve(model, cfg)?;
    let u = Vector::from_row_slice(&cfg.input);
    let inputs = model::constant_inputs(&u, cfg.steps);
    let mut noise = NoiseSpec::uniform(cfg.noise.clone(), cfg.seed);
    if let Some(t) = cfg.noise_off_after {
        noise = noise.with_cutoff(t);
    }
    let truth = model::simulate(model, &cfg.x0, &inputs, &noise, cfg.steps)?;

    let protocol = ProtocolConfig {
        scheme: cfg.scheme,
        extra_constraint: cfg.extra_constraint,
        solver: cfg.solver.clone(),
    };
    let mut est = EtMhe::new(model.clone(), params.clone(), protocol, cfg.x_hat0.clone());
    let mut steps = Vec::with_capacity(cfg.steps);
    let mut audits = Vec::new();
    let mut flagged = Vec::new();
    let mut no_events = 0usize;
    for t in 1..=cfg.steps {
        let mut rec = est
            .step(t, &truth.outputs[t - 1], &inputs[t - 1])
            .map_err(|source| SimError::Protocol { t, source })?;
        if rec.flagged() {
            flagged.push(t);
        }
        if !rec.gamma {
            if cfg.audit_prop1 > 0 && no_events % cfg.audit_prop1 == 0 {
                audits.push(audit(&est, t).map_err(|source| SimError::Protocol { t, source })?);
            }
            no_events += 1;
        }
        if !cfg.keep_results {
            if let Some(e) = rec.event.as_mut() {
                e.result.x_seq.clear();
                e.result.w_seq.clear();
                e.result.y_seq.clear();
            }
        }
        steps.push(rec);
    }

    let estimates = est.remote.estimates().to_vec();
    let error_norms = truth.states.iter().zip(&estimates).map(|(x, xh)| (x - xh).norm()).collect();
    let sched = est.remote.scheduler();
    let gammas = sched.gammas().to_vec();
    let events = gammas[1..].iter().filter(|g| **g).count();
    Ok(SimResult {
        config: cfg.clone(),
        horizon: params.horizon,
        horizons: sched.horizons().to_vec(),
        identity_violations: sched.identity_violations().to_vec(),
        truth,
        estimates,
        gammas,
        error_norms,
        events,
        channel: est.channel.stats,
        steps,
        audits,
        flagged_steps: flagged,
        warnings,
    })
}

fn audit(est: &EtMhe, t: usize) -> Result<Prop1Audit, ProtocolError> {
    let shortcut = est.remote.prop1_estimates(t)?;
    let explicit = est.remote.explicit_solve(t)?;
    Ok(Prop1Audit {
        t,
        difference: (shortcut.estimate() - explicit.estimate()).norm(),
        shortcut: shortcut.estimate().clone(),
        explicit: explicit.estimate().clone(),
        shortcut_cost: shortcut.cost,
        explicit_cost: explicit.cost,
        converged: explicit.report.converged(),
        event_constraint_active: est
            .remote
            .last_result()
            .is_some_and(|r| r.constraint_active(10.0 * est.remote.config().solver.feasibility_tol)),
    })
}

/// Compares `‖ê_t‖` with the theoretical bound for the run's parameters.
pub fn check_rges_bound(result: &SimResult, params: &IossParams, scheme: Scheme) -> Result<BoundCheck, SimError> {
    let constants = BoundConstants::new(params, scheme)?;
    let w_norms: Vec<f64> = result.truth.noises.iter().map(|w| w.norm()).collect();
    let e0 = result.error_norms[0];
    let mut bound = Vec::with_capacity(result.error_norms.len());
    let mut violations = Vec::new();
    let mut explained = Vec::new();
    let mut max_ratio = 0.0f64;
    let mut last_event_flagged = false;
    for (t, e) in result.error_norms.iter().enumerate() {
        if t > 0 {
            let step = &result.steps[t - 1];
            if step.gamma {
                last_event_flagged = step.flagged();
            }
        }
        let b = lyapunov::rges_bound(&constants, e0, &w_norms, t);
        if b > 0.0 {
            max_ratio = max_ratio.max(e / b);
        } else if *e > 0.0 {
            max_ratio = f64::INFINITY;
        }
        if *e > b {
            violations.push(t);
            if last_event_flagged {
                explained.push(t);
            }
        }
        bound.push(b);
    }
    Ok(BoundCheck { constants, bound, violations, explained, max_ratio })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub alpha: f64,
    pub seed: u64,
    pub events: usize,
    pub rmse: f64,
    pub flagged: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub alpha: f64,
    pub mean_events: f64,
    /// Sample standard deviation (0 for a single seed).
    pub std_events: f64,
    pub mean_rmse: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
    pub runs: Vec<RunSummary>,
}

fn seeds(base: u64, n: usize) -> impl Iterator<Item = u64> + Clone {
    (0..n as u64).map(move |k| base.wrapping_add(k))
}

/// Runs every `(α, seed)` pair; seeds are `base.seed .. base.seed + n_seeds`.
pub fn alpha_sweep(base: &SimConfig, alphas: &[f64], n_seeds: usize) -> Result<SweepTable, SimError> {
    if n_seeds == 0 {
        return Err(SimError::Config("at least one seed is required".into()));
    }
    let jobs: Vec<(f64, u64)> = alphas.iter().flat_map(|&a| seeds(base.seed, n_seeds).map(move |s| (a, s))).collect();
    let runs = jobs
        .par_iter()
        .map(|&(alpha, seed)| {
            let cfg = SimConfig { alpha, seed, keep_results: false, audit_prop1: 0, ..base.clone() };
            run(&cfg).map(|r| RunSummary { alpha, seed, events: r.events, rmse: r.rmse(), flagged: r.flagged_steps.len() })
        })
        .collect::<Result<Vec<_>, _>>()?;
    let rows = alphas
        .iter()
        .enumerate()
        .map(|(i, &alpha)| {
            let chunk = &runs[i * n_seeds..(i + 1) * n_seeds];
            let n = chunk.len() as f64;
            let mean_events = chunk.iter().map(|r| r.events as f64).sum::<f64>() / n;
            let var = if chunk.len() > 1 {
                chunk.iter().map(|r| (r.events as f64 - mean_events).powi(2)).sum::<f64>() / (n - 1.0)
            } else {
                0.0
            };
            SweepRow {
                alpha,
                mean_events,
                std_events: var.sqrt(),
                mean_rmse: chunk.iter().map(|r| r.rmse).sum::<f64>() / n,
            }
        })
        .collect();
    Ok(SweepTable { rows, runs })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairedRun {
    pub seed: u64,
    pub rmse_fixed: f64,
    pub rmse_varying: f64,
    pub events_fixed: usize,
    pub events_varying: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub base_horizon: usize,
    pub runs: Vec<PairedRun>,
}

impl Comparison {
    /// Fraction of seeds where the varying scheme is at least as accurate.
    pub fn win_fraction(&self) -> f64 {
        self.runs.iter().filter(|r| r.rmse_varying <= r.rmse_fixed).count() as f64 / self.runs.len() as f64
    }

    /// Mean of `(fixed - varying) / fixed`.
    pub fn mean_improvement(&self) -> f64 {
        self.runs.iter().map(|r| (r.rmse_fixed - r.rmse_varying) / r.rmse_fixed).sum::<f64>() / self.runs.len() as f64
    }
}

/// Same seeds, same base horizon (the config's, or the fixed-scheme minimum),
/// fixed versus varying horizon rule.
pub fn compare_fixed_vs_varying(cfg: &SimConfig, n_seeds: usize) -> Result<Comparison, SimError> {
    let base_horizon = match cfg.horizon {
        Some(m) => m,
        None => lyapunov::min_horizon(&cfg.params, Scheme::Fixed)?.horizon,
    };
    let runs = seeds(cfg.seed, n_seeds)
        .collect::<Vec<_>>()
        .par_iter()
        .map(|&seed| {
            let base = SimConfig { seed, horizon: Some(base_horizon), keep_results: false, audit_prop1: 0, ..cfg.clone() };
            let fixed = run(&SimConfig { scheme: Scheme::Fixed, ..base.clone() })?;
            let varying = run(&SimConfig { scheme: Scheme::Varying, ..base })?;
            Ok(PairedRun {
                seed,
                rmse_fixed: fixed.rmse(),
                rmse_varying: varying.rmse(),
                events_fixed: fixed.events,
                events_varying: varying.events,
            })
        })
        .collect::<Result<Vec<_>, SimError>>()?;
    Ok(Comparison { base_horizon, runs })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRun {
    pub seed: u64,
    pub rmse_on: f64,
    pub rmse_off: f64,
    /// `max_t ‖x̂_t^on - x̂_t^off‖`.
    pub max_difference: f64,
    pub max_slack_on: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ablation {
    pub runs: Vec<AblationRun>,
}

impl Ablation {
    /// Fraction of runs whose trajectory moves by more than `1e-9`.
    pub fn fraction_changed(&self) -> f64 {
        self.runs.iter().filter(|r| r.max_difference > 1e-9).count() as f64 / self.runs.len() as f64
    }

    pub fn mean_rmse_on(&self) -> f64 {
        self.runs.iter().map(|r| r.rmse_on).sum::<f64>() / self.runs.len() as f64
    }

    pub fn mean_rmse_off(&self) -> f64 {
        self.runs.iter().map(|r| r.rmse_off).sum::<f64>() / self.runs.len() as f64
    }

    /// `mean(rmse_on) / mean(rmse_off) - 1`.
    pub fn relative_rmse_change(&self) -> f64 {
        self.mean_rmse_on() / self.mean_rmse_off() - 1.0
    }
}

/// Runs each seed with and without the tracking constraint.
pub fn constraint_ablation(cfg: &SimConfig, n_seeds: usize) -> Result<Ablation, SimError> {
    let runs = seeds(cfg.seed, n_seeds)
        .collect::<Vec<_>>()
        .par_iter()
        .map(|&seed| {
            let base = SimConfig { seed, keep_results: false, audit_prop1: 0, ..cfg.clone() };
            let on = run(&SimConfig { extra_constraint: true, ..base.clone() })?;
            let off = run(&SimConfig { extra_constraint: false, ..base })?;
            let max_difference = on.estimates.iter().zip(&off.estimates).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
            let max_slack_on = on
                .steps
                .iter()
                .filter_map(|s| s.event.as_ref().map(|e| e.result.constraint_slack))
                .fold(0.0, f64::max);
            Ok(AblationRun { seed, rmse_on: on.rmse(), rmse_off: off.rmse(), max_difference, max_slack_on })
        })
        .collect::<Result<Vec<_>, SimError>>()?;
    Ok(Ablation { runs })
}
