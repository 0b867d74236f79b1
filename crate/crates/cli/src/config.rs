//! Experiment configuration files.
//!
//! A config is a flat list of `key = value` lines (TOML syntax) with
//! matrices written as nested arrays, plus optional `[solver]`, `[sweep]`,
//! `[compare]` and `[check]` tables. Unknown keys are rejected. Only `model`
//! is required; every other field defaults to the model's benchmark setup.

use std::fmt;
use std::path::{Path, PathBuf};

use etmhe_core::lyapunov::{self, LyapunovError};
use etmhe_core::model::ModelRegistry;
use etmhe_core::solver::SolverConfig;
use etmhe_core::{Matrix, Scheme, SimConfig, Vector};
use serde::Deserialize;
use thiserror::Error;

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    model: Option<String>,
    steps: Option<usize>,
    seed: Option<u64>,
    alpha: Option<f64>,
    scheme: Option<String>,
    horizon: Option<usize>,
    eta: Option<f64>,
    p1: Option<Vec<Vec<f64>>>,
    p2: Option<Vec<Vec<f64>>>,
    q: Option<Vec<Vec<f64>>>,
    r: Option<Vec<Vec<f64>>>,
    noise: Option<Vec<f64>>,
    x0: Option<Vec<f64>>,
    x_hat0: Option<Vec<f64>>,
    input: Option<Vec<f64>>,
    extra_constraint: Option<bool>,
    audit_prop1: Option<usize>,
    noise_off_after: Option<usize>,
    rmse_skip: Option<usize>,
    out: Option<String>,
    svg: Option<bool>,
    solver: Option<SolverSection>,
    sweep: Option<SweepSection>,
    compare: Option<CompareSection>,
    check: Option<CheckSection>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct SolverSection {
    max_iterations: Option<usize>,
    gradient_tol: Option<f64>,
    step_tol: Option<f64>,
    initial_damping: Option<f64>,
    damping_increase: Option<f64>,
    damping_decrease: Option<f64>,
    max_damping: Option<f64>,
    fd_step: Option<f64>,
    penalty_start: Option<f64>,
    penalty_growth: Option<f64>,
    penalty_max: Option<f64>,
    feasibility_tol: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct SweepSection {
    alphas: Option<Vec<f64>>,
    seeds: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct CompareSection {
    seeds: Option<usize>,
    ablation: Option<bool>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckSection {
    samples: Option<usize>,
    sample_seed: Option<u64>,
    lower: Option<Vec<f64>>,
    upper: Option<Vec<f64>>,
}

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("cannot read {path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("{}", located(path, *line, *column, message))]
    Syntax {
        path: PathBuf,
        line: Option<usize>,
        column: Option<usize>,
        message: String,
    },
    #[error("{}", located(path, *line, None, &format!("field `{field}`: {message}")))]
    Field {
        path: PathBuf,
        field: String,
        line: Option<usize>,
        message: String,
    },
}

fn located(path: &Path, line: Option<usize>, column: Option<usize>, message: &str) -> String {
    match (line, column) {
        (Some(l), Some(c)) => format!("{}:{l}:{c}: {message}", path.display()),
        (Some(l), None) => format!("{}:{l}: {message}", path.display()),
        _ => format!("{}: {message}", path.display()),
    }
}

/// Sampling setup for the Lyapunov decrease check.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleBox {
    pub samples: usize,
    pub seed: u64,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

/// A parsed config with overrides applied.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSpec {
    pub sim: SimConfig,
    pub out: PathBuf,
    pub svg: bool,
    pub sweep_alphas: Vec<f64>,
    pub sweep_seeds: usize,
    pub compare_seeds: usize,
    pub ablation: bool,
    pub check: SampleBox,
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub alpha: Option<f64>,
    pub seed: Option<u64>,
    pub scheme: Option<Scheme>,
    pub out: Option<PathBuf>,
    pub svg: bool,
    pub audit_prop1: Option<usize>,
    pub alphas: Option<Vec<f64>>,
    pub seeds: Option<usize>,
}

struct Ctx<'a> {
    path: &'a Path,
    source: &'a str,
}

impl Ctx<'_> {
    /// First line assigning `key` (`key = ...`), 1-based.
    fn line_of(&self, key: &str) -> Option<usize> {
        self.source.lines().position(|l| {
            let l = l.trim_start();
            l.strip_prefix(key).is_some_and(|rest| rest.trim_start().starts_with('='))
        })
        .map(|i| i + 1)
    }

    fn field(&self, field: &str, message: impl Into<String>) -> ConfigError {
        ConfigError::Field {
            path: self.path.to_path_buf(),
            field: field.to_string(),
            line: self.line_of(field.rsplit('.').next().unwrap_or(field)),
            message: message.into(),
        }
    }

    fn matrix(&self, field: &str, rows: &[Vec<f64>], n: usize) -> Result<Matrix, ConfigError> {
        if rows.len() != n || rows.iter().any(|r| r.len() != n) {
            let shape = rows.iter().map(|r| r.len().to_string()).collect::<Vec<_>>().join(",");
            return Err(self.field(field, format!("expected a {n}x{n} matrix, got rows of length [{shape}]")));
        }
        Ok(Matrix::from_fn(n, n, |i, j| rows[i][j]))
    }

    fn vector(&self, field: &str, v: &[f64], n: usize) -> Result<Vector, ConfigError> {
        if v.len() != n {
            return Err(self.field(field, format!("expected {n} entries, got {}", v.len())));
        }
        Ok(Vector::from_row_slice(v))
    }
}

fn field_name(check: &str) -> &'static str {
    match check {
        "P1" => "p1",
        "P2" => "p2",
        "Q" => "q",
        "R" => "r",
        "eta" => "eta",
        "alpha" => "alpha",
        _ => "horizon",
    }
}

/// Reads and resolves a config file.
pub fn load(path: &Path, overrides: &Overrides) -> Result<RunSpec, ConfigError> {
    let source = std::fs::read_to_string(path).map_err(|e| ConfigError::Io { path: path.to_path_buf(), message: e.to_string() })?;
    parse(path, &source, overrides)
}

/// Resolves config text; `path` is used in diagnostics only.
pub fn parse(path: &Path, source: &str, overrides: &Overrides) -> Result<RunSpec, ConfigError> {
    let ctx = Ctx { path, source };
    let file: FileConfig = toml::from_str(source).map_err(|e| {
        let (line, column) = match e.span() {
            Some(span) => {
                let before = &source[..span.start.min(source.len())];
                let line = before.matches('\n').count() + 1;
                let column = before.len() - before.rfind('\n').map_or(0, |i| i + 1) + 1;
                (Some(line), Some(column))
            }
            None => (None, None),
        };
        ConfigError::Syntax { path: path.to_path_buf(), line, column, message: e.message().trim().to_string() }
    })?;

    let name = file.model.as_deref().ok_or_else(|| ctx.field("model", "missing; expected one of batch_reactor, robot_arm"))?;
    let registry = ModelRegistry::with_builtins();
    let model = registry.get(name).ok_or_else(|| {
        let known = registry.names().collect::<Vec<_>>().join(", ");
        ctx.field("model", format!("unknown model `{name}` (known: {known})"))
    })?;
    let mut sim = SimConfig::for_model(name).map_err(|e| ctx.field("model", e.to_string()))?;
    let (n_x, n_w, n_y, n_u) = (model.n_x(), model.n_w(), model.n_y(), model.n_u());

    if let Some(v) = file.steps {
        if v == 0 {
            return Err(ctx.field("steps", "must be at least 1"));
        }
        sim.steps = v;
    }
    sim.seed = overrides.seed.or(file.seed).unwrap_or(sim.seed);
    sim.alpha = overrides.alpha.or(file.alpha).unwrap_or(sim.alpha);
    if let Some(s) = &file.scheme {
        sim.scheme = s.parse().map_err(|e: String| ctx.field("scheme", e))?;
    }
    if let Some(s) = overrides.scheme {
        sim.scheme = s;
    }
    if let Some(m) = file.horizon {
        if m == 0 {
            return Err(ctx.field("horizon", "must be at least 1"));
        }
        sim.horizon = Some(m);
    }
    if let Some(eta) = file.eta {
        sim.params.eta = eta;
    }
    if let Some(m) = &file.p1 {
        sim.params.p1 = ctx.matrix("p1", m, n_x)?;
    }
    if let Some(m) = &file.p2 {
        sim.params.p2 = ctx.matrix("p2", m, n_x)?;
    }
    if let Some(m) = &file.q {
        sim.params.q = ctx.matrix("q", m, n_w)?;
    }
    if let Some(m) = &file.r {
        sim.params.r = ctx.matrix("r", m, n_y)?;
    }
    if let Some(v) = &file.noise {
        if v.iter().any(|a| !(*a >= 0.0 && a.is_finite())) {
            return Err(ctx.field("noise", "amplitudes must be finite and nonnegative"));
        }
        sim.noise = ctx.vector("noise", v, n_w)?.as_slice().to_vec();
    }
    if let Some(v) = &file.x0 {
        sim.x0 = ctx.vector("x0", v, n_x)?;
    }
    if let Some(v) = &file.x_hat0 {
        sim.x_hat0 = ctx.vector("x_hat0", v, n_x)?;
    }
    if let Some(v) = &file.input {
        sim.input = ctx.vector("input", v, n_u)?.as_slice().to_vec();
    }
    sim.extra_constraint = file.extra_constraint.unwrap_or(sim.extra_constraint);
    sim.audit_prop1 = overrides.audit_prop1.or(file.audit_prop1).unwrap_or(sim.audit_prop1);
    sim.noise_off_after = file.noise_off_after.or(sim.noise_off_after);
    sim.rmse_skip = file.rmse_skip.unwrap_or(sim.rmse_skip);
    if sim.rmse_skip > sim.steps {
        return Err(ctx.field("rmse_skip", format!("exceeds steps ({})", sim.steps)));
    }
    sim.keep_results = false;
    sim.solver = solver_config(&ctx, file.solver.unwrap_or_default())?;

    // Parameter invariants, reported against the offending key.
    let mut params = sim.params.clone().with_alpha(sim.alpha);
    params.horizon = sim.horizon.unwrap_or(1);
    let report = lyapunov::validate(&params, Some(model)).map_err(|e| match e {
        LyapunovError::NotSymmetric(name) | LyapunovError::Shape { name, .. } | LyapunovError::NotPositiveDefinite(name) => {
            ctx.field(field_name(name), e.to_string())
        }
        other => ctx.field("eta", other.to_string()),
    })?;
    if let Some(c) = report.failures().next() {
        let key = if c.name == "alpha" && overrides.alpha.is_some() { "--alpha" } else { field_name(&c.name) };
        return Err(ctx.field(key, c.detail.clone()));
    }

    let sweep = file.sweep.unwrap_or_default();
    let sweep_alphas = overrides.alphas.clone().or(sweep.alphas).unwrap_or_else(|| vec![1.0, 2.0, 4.0, 8.0, 14.0]);
    if sweep_alphas.is_empty() || sweep_alphas.iter().any(|a| !(*a >= 0.0 && a.is_finite())) {
        return Err(ctx.field("sweep.alphas", "need at least one finite, nonnegative alpha"));
    }
    let sweep_seeds = overrides.seeds.or(sweep.seeds).unwrap_or(10);
    let compare = file.compare.unwrap_or_default();
    let compare_seeds = overrides.seeds.or(compare.seeds).unwrap_or(10);
    for (key, n) in [("sweep.seeds", sweep_seeds), ("compare.seeds", compare_seeds)] {
        if n == 0 {
            return Err(ctx.field(key, "must be at least 1"));
        }
    }

    let check = file.check.unwrap_or_default();
    let (default_lo, default_hi) = default_box(name, n_x);
    let lower = check.lower.unwrap_or(default_lo);
    let upper = check.upper.unwrap_or(default_hi);
    ctx.vector("check.lower", &lower, n_x)?;
    ctx.vector("check.upper", &upper, n_x)?;
    if lower.iter().zip(&upper).any(|(l, h)| !(l <= h)) {
        return Err(ctx.field("check.lower", "every lower bound must not exceed the upper bound"));
    }

    Ok(RunSpec {
        sim,
        out: overrides.out.clone().or(file.out.map(PathBuf::from)).unwrap_or_else(|| PathBuf::from("out")),
        svg: overrides.svg || file.svg.unwrap_or(false),
        sweep_alphas,
        sweep_seeds,
        compare_seeds,
        ablation: compare.ablation.unwrap_or(false),
        check: SampleBox { samples: check.samples.unwrap_or(10_000), seed: check.sample_seed.unwrap_or(0), lower, upper },
    })
}

/// State box for the decrease check: the reactor's `[0, 5]²`, joint angles
/// in `[-π, π]` and rates in `[-3, 3]` for the arm, `[-1, 1]` otherwise.
fn default_box(model: &str, n_x: usize) -> (Vec<f64>, Vec<f64>) {
    match model {
        "batch_reactor" => (vec![0.0; 2], vec![5.0; 2]),
        "robot_arm" => {
            let pi = std::f64::consts::PI;
            (vec![-pi, -pi, -3.0, -3.0], vec![pi, pi, 3.0, 3.0])
        }
        _ => (vec![-1.0; n_x], vec![1.0; n_x]),
    }
}

fn solver_config(ctx: &Ctx<'_>, s: SolverSection) -> Result<SolverConfig, ConfigError> {
    let d = SolverConfig::default();
    let cfg = SolverConfig {
        max_iterations: s.max_iterations.unwrap_or(d.max_iterations),
        gradient_tol: s.gradient_tol.unwrap_or(d.gradient_tol),
        step_tol: s.step_tol.unwrap_or(d.step_tol),
        initial_damping: s.initial_damping.unwrap_or(d.initial_damping),
        damping_increase: s.damping_increase.unwrap_or(d.damping_increase),
        damping_decrease: s.damping_decrease.unwrap_or(d.damping_decrease),
        max_damping: s.max_damping.unwrap_or(d.max_damping),
        fd_step: s.fd_step.unwrap_or(d.fd_step),
        penalty_start: s.penalty_start.unwrap_or(d.penalty_start),
        penalty_growth: s.penalty_growth.unwrap_or(d.penalty_growth),
        penalty_max: s.penalty_max.unwrap_or(d.penalty_max),
        feasibility_tol: s.feasibility_tol.unwrap_or(d.feasibility_tol),
    };
    cfg.validate().map_err(|e| ctx.field("solver", e.to_string()))?;
    Ok(cfg)
}

struct Mat<'a>(&'a Matrix);

impl fmt::Display for Mat<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("[")?;
        for i in 0..self.0.nrows() {
            if i > 0 {
                f.write_str(", ")?;
            }
            f.write_str("[")?;
            for j in 0..self.0.ncols() {
                if j > 0 {
                    f.write_str(", ")?;
                }
                write!(f, "{}", self.0[(i, j)])?;
            }
            f.write_str("]")?;
        }
        f.write_str("]")
    }
}

fn list(v: &[f64]) -> String {
    let items: Vec<String> = v.iter().map(|x| x.to_string()).collect();
    format!("[{}]", items.join(", "))
}

/// The fully resolved configuration as `key=value` pairs, in a fixed order.
pub fn provenance(spec: &RunSpec, command: &str) -> Vec<(String, String)> {
    let s = &spec.sim;
    let p = &s.params;
    let horizon = match s.horizon {
        Some(m) => m.to_string(),
        None => lyapunov::min_horizon(p, s.scheme).map_or_else(|_| "auto".into(), |h| h.horizon.to_string()),
    };
    let c = &s.solver;
    let mut out: Vec<(&str, String)> = vec![
        ("command", command.to_string()),
        ("model", s.model.clone()),
        ("steps", s.steps.to_string()),
        ("seed", s.seed.to_string()),
        ("alpha", s.alpha.to_string()),
        ("scheme", s.scheme.to_string()),
        ("horizon", horizon),
        ("eta", p.eta.to_string()),
        ("p1", Mat(&p.p1).to_string()),
        ("p2", Mat(&p.p2).to_string()),
        ("q", Mat(&p.q).to_string()),
        ("r", Mat(&p.r).to_string()),
        ("noise", list(&s.noise)),
        ("x0", list(s.x0.as_slice())),
        ("x_hat0", list(s.x_hat0.as_slice())),
        ("input", list(&s.input)),
        ("extra_constraint", s.extra_constraint.to_string()),
        ("audit_prop1", s.audit_prop1.to_string()),
        ("noise_off_after", s.noise_off_after.map_or_else(|| "none".into(), |t| t.to_string())),
        ("rmse_skip", s.rmse_skip.to_string()),
        ("solver.max_iterations", c.max_iterations.to_string()),
        ("solver.gradient_tol", c.gradient_tol.to_string()),
        ("solver.step_tol", c.step_tol.to_string()),
        ("solver.initial_damping", c.initial_damping.to_string()),
        ("solver.damping_increase", c.damping_increase.to_string()),
        ("solver.damping_decrease", c.damping_decrease.to_string()),
        ("solver.max_damping", c.max_damping.to_string()),
        ("solver.fd_step", c.fd_step.to_string()),
        ("solver.penalty_start", c.penalty_start.to_string()),
        ("solver.penalty_growth", c.penalty_growth.to_string()),
        ("solver.penalty_max", c.penalty_max.to_string()),
        ("solver.feasibility_tol", c.feasibility_tol.to_string()),
    ];
    match command {
        "sweep" => {
            out.push(("sweep.alphas", list(&spec.sweep_alphas)));
            out.push(("sweep.seeds", spec.sweep_seeds.to_string()));
        }
        "compare" => {
            out.push(("compare.seeds", spec.compare_seeds.to_string()));
            out.push(("compare.ablation", spec.ablation.to_string()));
        }
        _ => {}
    }
    out.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}
