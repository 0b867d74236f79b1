//! The four subcommands. Each writes its artifacts under the run's output
//! directory and returns a short human-readable summary.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use etmhe_core::lyapunov::{self, check_lyapunov_decrease, sample_pairs};
use etmhe_core::model::ModelRegistry;
use etmhe_core::sim::{self, SimError};
use etmhe_core::{report, Scheme, Vector};
use thiserror::Error;

use crate::config::{provenance, ConfigError, RunSpec};

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Usage(String),
    #[error("cannot write {path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("simulation failed: {0}")]
    Sim(#[from] SimError),
    #[error("{0}")]
    CheckFailed(String),
}

impl CliError {
    /// 2 for anything wrong with the input, 1 for failures while running.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Usage(_) => 2,
            CliError::Sim(SimError::Config(_) | SimError::InvalidParams(_) | SimError::UnknownModel(_)) => 2,
            CliError::Io { .. } | CliError::Sim(_) | CliError::CheckFailed(_) => 1,
        }
    }
}

fn write(dir: &Path, name: &str, contents: &str) -> Result<PathBuf, CliError> {
    let io = |path: &Path, e: std::io::Error| CliError::Io { path: path.to_path_buf(), message: e.to_string() };
    std::fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
    let path = dir.join(name);
    std::fs::write(&path, contents).map_err(|e| io(&path, e))?;
    Ok(path)
}

fn echo(out: &mut String, prov: &[(String, String)]) {
    for (k, v) in prov {
        let _ = writeln!(out, "{k}={v}");
    }
}

/// One closed-loop run: `run.csv`, `gamma.csv` and optionally two SVGs.
pub fn simulate(spec: &RunSpec) -> Result<String, CliError> {
    let prov = provenance(spec, "simulate");
    let mut out = String::new();
    echo(&mut out, &prov);
    let result = sim::run(&spec.sim)?;
    for w in &result.warnings {
        let _ = writeln!(out, "warning: {w}");
    }
    let bound = match sim::check_rges_bound(&result, &result.effective_params(), spec.sim.scheme) {
        Ok(b) => Some(b),
        Err(e) => {
            let _ = writeln!(out, "warning: no error bound ({e})");
            None
        }
    };
    let mut written = vec![
        write(&spec.out, "run.csv", &report::run_csv(&result, bound.as_ref(), &prov))?,
        write(&spec.out, "gamma.csv", &report::gamma_csv(&result, &prov))?,
    ];
    if spec.svg {
        written.push(write(&spec.out, "states.svg", &report::states_svg(&result))?);
        written.push(write(&spec.out, "gamma.svg", &report::gamma_svg(&result))?);
    }
    let _ = writeln!(out, "events: {} of {} steps", result.events, spec.sim.steps);
    let _ = writeln!(out, "rmse: {}", result.rmse());
    let _ = writeln!(out, "flagged solves: {}", result.flagged_steps.len());
    if let Some(b) = &bound {
        let _ = writeln!(
            out,
            "bound violations: {} ({} at flagged solves)",
            b.violations.len(),
            b.explained.len()
        );
    }
    if spec.sim.audit_prop1 > 0 {
        let mismatched = result.audits.iter().filter(|a| !a.matches(1e-6)).count();
        let _ = writeln!(out, "shortcut audits: {} checked, {} mismatched", result.audits.len(), mismatched);
    }
    for p in written {
        let _ = writeln!(out, "wrote {}", p.display());
    }
    Ok(out)
}

/// α sweep over seeds: `sweep_summary.csv` and `sweep_runs.csv`.
pub fn sweep(spec: &RunSpec) -> Result<String, CliError> {
    let prov = provenance(spec, "sweep");
    let mut out = String::new();
    echo(&mut out, &prov);
    let table = sim::alpha_sweep(&spec.sim, &spec.sweep_alphas, spec.sweep_seeds)?;
    let _ = writeln!(out, "{:>8} {:>12} {:>10} {:>12}", "alpha", "mean_events", "std_events", "mean_rmse");
    for r in &table.rows {
        let _ = writeln!(out, "{:>8} {:>12.3} {:>10.3} {:>12.5}", r.alpha, r.mean_events, r.std_events, r.mean_rmse);
    }
    let a = write(&spec.out, "sweep_summary.csv", &report::sweep_summary_csv(&table, &prov))?;
    let b = write(&spec.out, "sweep_runs.csv", &report::sweep_runs_csv(&table, &prov))?;
    let _ = writeln!(out, "wrote {}\nwrote {}", a.display(), b.display());
    Ok(out)
}

/// Parameter validation, minimum horizon, sampled decrease and a bound check
/// on one run. Fails if any sampled pair or unflagged step violates its
/// inequality.
pub fn check(spec: &RunSpec) -> Result<String, CliError> {
    let prov = provenance(spec, "check");
    let mut out = String::new();
    echo(&mut out, &prov);
    let s = &spec.sim;
    let registry = ModelRegistry::with_builtins();
    let model = registry.get(&s.model).ok_or_else(|| SimError::UnknownModel(s.model.clone()))?;
    let params = s.params.clone().with_alpha(s.alpha);
    let lambda = lyapunov::gen_eig_max(&params.p2, &params.p1).map_err(|e| CliError::Usage(e.to_string()))?;
    let choice = lyapunov::min_horizon_for(lambda, params.eta, s.scheme).map_err(|e| CliError::Usage(e.to_string()))?;
    let report = lyapunov::validate(&params.clone().with_horizon(s.horizon.unwrap_or(choice.horizon)), Some(model))
        .map_err(|e| CliError::Usage(e.to_string()))?;
    out.push_str(&report.to_string());
    let _ = writeln!(out, "lambda_max(P2, P1)={lambda}");
    let _ = writeln!(out, "M_min={}", choice.horizon);
    let other = match s.scheme {
        Scheme::Fixed => Scheme::Varying,
        Scheme::Varying => Scheme::Fixed,
    };
    if let Ok(h) = lyapunov::min_horizon_for(lambda, params.eta, other) {
        let _ = writeln!(out, "M_min({other})={}", h.horizon);
    }
    let _ = writeln!(out, "rho={}", choice.rho);

    let b = &spec.check;
    let u = Vector::from_row_slice(&s.input);
    let pairs = sample_pairs(&b.lower, &b.upper, &s.noise, &u, b.samples, b.seed);
    let dec = check_lyapunov_decrease(model, &params, &pairs);
    let _ = writeln!(
        out,
        "decrease check: {} samples, {} violations, worst margin {}{}",
        dec.samples,
        dec.violations,
        dec.worst_margin,
        if dec.sandwich_only { " (sandwich bound only)" } else { "" }
    );

    let result = sim::run(&s.clone())?;
    let mut failures = Vec::new();
    if dec.violations > 0 {
        failures.push(format!("{} sampled pairs violate the decrease inequality", dec.violations));
    }
    match sim::check_rges_bound(&result, &result.effective_params(), s.scheme) {
        Ok(bc) => {
            let unexplained = bc.unexplained().count();
            let _ = writeln!(
                out,
                "bound check: {} violations ({} at flagged solves), max ratio {}",
                bc.violations.len(),
                bc.explained.len(),
                bc.max_ratio
            );
            if unexplained > 0 {
                failures.push(format!("{unexplained} bound violations at converged solves"));
            }
        }
        Err(e) => {
            let _ = writeln!(out, "bound check: skipped ({e})");
        }
    }
    if failures.is_empty() {
        Ok(out)
    } else {
        print!("{out}");
        Err(CliError::CheckFailed(failures.join("; ")))
    }
}

/// Fixed versus varying horizon on paired seeds (`comparison.csv`), and the
/// tracking-constraint ablation (`ablation.csv`) when enabled.
pub fn compare(spec: &RunSpec) -> Result<String, CliError> {
    let prov = provenance(spec, "compare");
    let mut out = String::new();
    echo(&mut out, &prov);
    let cmp = sim::compare_fixed_vs_varying(&spec.sim, spec.compare_seeds)?;
    let _ = writeln!(out, "base horizon: {}", cmp.base_horizon);
    let _ = writeln!(out, "varying at least as accurate: {:.1}% of seeds", 100.0 * cmp.win_fraction());
    let _ = writeln!(out, "mean relative improvement: {:.2}%", 100.0 * cmp.mean_improvement());
    let mut written = vec![write(&spec.out, "comparison.csv", &report::comparison_csv(&cmp, &prov))?];
    if spec.ablation {
        let ab = sim::constraint_ablation(&spec.sim, spec.compare_seeds)?;
        let _ = writeln!(out, "constraint changed the trajectory in {:.1}% of runs", 100.0 * ab.fraction_changed());
        let _ = writeln!(out, "relative RMSE change with constraint: {:+.3}%", 100.0 * ab.relative_rmse_change());
        written.push(write(&spec.out, "ablation.csv", &report::ablation_csv(&ab, &prov))?);
    }
    for p in written {
        let _ = writeln!(out, "wrote {}", p.display());
    }
    Ok(out)
}
