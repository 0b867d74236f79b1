//! Deterministic CSV and minimal SVG rendering of simulation results.
//!
//! Floats use Rust's shortest round-trip formatting, so identical results
//! always produce identical bytes.

use std::fmt::Write as _;

use crate::sim::{Ablation, BoundCheck, Comparison, SimResult, SweepTable};

fn header(out: &mut String, provenance: &[(String, String)]) {
    for (k, v) in provenance {
        let _ = writeln!(out, "# {k}={v}");
    }
}

/// One row per step: `t, x_i.., xhat_i.., gamma, err_norm, bound`.
pub fn run_csv(result: &SimResult, bound: Option<&BoundCheck>, provenance: &[(String, String)]) -> String {
    let mut out = String::new();
    header(&mut out, provenance);
    let n = result.truth.states[0].len();
    out.push('t');
    for i in 1..=n {
        let _ = write!(out, ",x{i}");
    }
    for i in 1..=n {
        let _ = write!(out, ",xhat{i}");
    }
    out.push_str(",gamma,err_norm,bound\n");
    for (t, (x, xh)) in result.truth.states.iter().zip(&result.estimates).enumerate() {
        let _ = write!(out, "{t}");
        for v in x.iter().chain(xh.iter()) {
            let _ = write!(out, ",{v}");
        }
        let _ = write!(out, ",{},{}", u8::from(result.gammas[t]), result.error_norms[t]);
        match bound {
            Some(b) => {
                let _ = writeln!(out, ",{}", b.bound[t]);
            }
            None => out.push_str(",\n"),
        }
    }
    out
}

/// `t, gamma, horizon, etm_lhs, etm_rhs, d_tilde` per step.
pub fn gamma_csv(result: &SimResult, provenance: &[(String, String)]) -> String {
    let mut out = String::new();
    header(&mut out, provenance);
    out.push_str("t,gamma,horizon,etm_lhs,etm_rhs,d_tilde,flagged\n");
    let _ = writeln!(out, "0,1,0,,,,0");
    for s in &result.steps {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            s.t,
            u8::from(s.gamma),
            s.horizon,
            s.etm_lhs,
            s.etm_rhs,
            s.d_tilde,
            u8::from(s.flagged())
        );
    }
    out
}

pub fn sweep_summary_csv(table: &SweepTable, provenance: &[(String, String)]) -> String {
    let mut out = String::new();
    header(&mut out, provenance);
    out.push_str("alpha,mean_events,std_events,mean_rmse\n");
    for r in &table.rows {
        let _ = writeln!(out, "{},{},{},{}", r.alpha, r.mean_events, r.std_events, r.mean_rmse);
    }
    out
}

pub fn sweep_runs_csv(table: &SweepTable, provenance: &[(String, String)]) -> String {
    let mut out = String::new();
    header(&mut out, provenance);
    out.push_str("alpha,seed,events,rmse,flagged\n");
    for r in &table.runs {
        let _ = writeln!(out, "{},{},{},{},{}", r.alpha, r.seed, r.events, r.rmse, r.flagged);
    }
    out
}

pub fn comparison_csv(cmp: &Comparison, provenance: &[(String, String)]) -> String {
    let mut out = String::new();
    header(&mut out, provenance);
    out.push_str("seed,rmse_fixed,rmse_varying,events_fixed,events_varying\n");
    for r in &cmp.runs {
        let _ = writeln!(out, "{},{},{},{},{}", r.seed, r.rmse_fixed, r.rmse_varying, r.events_fixed, r.events_varying);
    }
    out
}

pub fn ablation_csv(ab: &Ablation, provenance: &[(String, String)]) -> String {
    let mut out = String::new();
    header(&mut out, provenance);
    out.push_str("seed,rmse_on,rmse_off,max_difference,max_slack_on\n");
    for r in &ab.runs {
        let _ = writeln!(out, "{},{},{},{},{}", r.seed, r.rmse_on, r.rmse_off, r.max_difference, r.max_slack_on);
    }
    out
}

const W: f64 = 640.0;
const H: f64 = 360.0;
const PAD: f64 = 40.0;
const COLORS: [&str; 6] = ["#d62728", "#1f77b4", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

fn polyline(out: &mut String, xs: &[f64], ys: &[f64], (x0, x1, y0, y1): (f64, f64, f64, f64), color: &str, dashed: bool) {
    let sx = |x: f64| PAD + (x - x0) / (x1 - x0).max(f64::MIN_POSITIVE) * (W - 2.0 * PAD);
    let sy = |y: f64| H - PAD - (y - y0) / (y1 - y0).max(f64::MIN_POSITIVE) * (H - 2.0 * PAD);
    let _ = write!(out, r#"<polyline fill="none" stroke="{color}" stroke-width="1.5""#);
    if dashed {
        out.push_str(r#" stroke-dasharray="5,3""#);
    }
    out.push_str(r#" points=""#);
    for (x, y) in xs.iter().zip(ys) {
        let _ = write!(out, "{:.2},{:.2} ", sx(*x), sy(*y));
    }
    out.push_str("\"/>\n");
}

fn frame(out: &mut String, title: &str, (x0, x1, y0, y1): (f64, f64, f64, f64)) {
    let _ = writeln!(out, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="11">"#);
    let _ = writeln!(out, r#"<rect x="{PAD}" y="{PAD}" width="{}" height="{}" fill="none" stroke="black"/>"#, W - 2.0 * PAD, H - 2.0 * PAD);
    let _ = writeln!(out, r#"<text x="{}" y="20" text-anchor="middle">{title}</text>"#, W / 2.0);
    let _ = writeln!(out, r#"<text x="{PAD}" y="{}">{x0}</text><text x="{}" y="{}" text-anchor="end">{x1}</text>"#, H - PAD + 14.0, W - PAD, H - PAD + 14.0);
    let _ = writeln!(out, r#"<text x="{}" y="{}" text-anchor="end">{y0:.3}</text><text x="{}" y="{}" text-anchor="end">{y1:.3}</text>"#, PAD - 4.0, H - PAD, PAD - 4.0, PAD + 4.0);
}

/// True states (solid) against estimates (dashed).
pub fn states_svg(result: &SimResult) -> String {
    let ts: Vec<f64> = (0..result.truth.states.len()).map(|t| t as f64).collect();
    let n = result.truth.states[0].len();
    let all = result.truth.states.iter().chain(&result.estimates).flat_map(|v| v.iter().copied());
    let (lo, hi) = all.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    let bounds = (0.0, *ts.last().unwrap_or(&1.0), lo, if hi > lo { hi } else { lo + 1.0 });
    let mut out = String::new();
    frame(&mut out, "states (solid) and estimates (dashed)", bounds);
    for i in 0..n {
        let color = COLORS[i % COLORS.len()];
        let x: Vec<f64> = result.truth.states.iter().map(|v| v[i]).collect();
        let xh: Vec<f64> = result.estimates.iter().map(|v| v[i]).collect();
        polyline(&mut out, &ts, &x, bounds, color, false);
        polyline(&mut out, &ts, &xh, bounds, color, true);
    }
    out.push_str("</svg>\n");
    out
}

/// Raster of the scheduling variable.
pub fn gamma_svg(result: &SimResult) -> String {
    let t_max = (result.gammas.len() - 1).max(1) as f64;
    let mut out = String::new();
    frame(&mut out, "events", (0.0, t_max, 0.0, 1.0));
    let width = (W - 2.0 * PAD) / (t_max + 1.0);
    for (t, g) in result.gammas.iter().enumerate() {
        if *g {
            let x = PAD + t as f64 / t_max * (W - 2.0 * PAD - width);
            let _ = writeln!(out, r#"<rect x="{x:.2}" y="{}" width="{:.2}" height="{}" fill="black"/>"#, PAD + 10.0, width.max(0.5), H - 2.0 * PAD - 20.0);
        }
    }
    out.push_str("</svg>\n");
    out
}
