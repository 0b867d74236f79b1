//! Plant-side event trigger.
//!
//! Between events the trigger compares discounted output residuals against
//! the threshold `η^{t-ε} d̃` derived from the last event-time solution:
//!
//! ```text
//! γ_t = 0  ⟺  2 Σ_{j∈[ε-M_ε, ε)\K_s} η^{t-j-1} ‖y_j - ȳ_j‖²_R
//!              + Σ_{j∈[ε, t)} η^{t-j-1} ‖y_j - h(x̂_j, u_j, 0)‖²_R  <  η^{t-ε} d̃
//! ```

use std::collections::{BTreeMap, BTreeSet};

use crate::linalg::{weighted_sq, Vector};
use crate::lyapunov::IossParams;
use crate::mhe::EstimateResult;
use crate::model::SystemModel;

#[derive(Debug, Clone, PartialEq)]
pub struct EtmState {
    /// Last event time ε.
    pub eps: usize,
    /// Steps since the last event (0 at event times).
    pub delta: usize,
    /// Threshold `α d - 2 p` from the last event.
    pub d_tilde: f64,
    /// Local copy of the remote estimate `x̂_t`.
    pub x_hat: Vector,
    /// `x̂_ε` as received; start of the open-loop innovation reference.
    pub x_event: Vector,
    /// `x̂*_{ε-M_ε|ε}`.
    pub x_anchor: Vector,
    /// `ε - M_ε`.
    pub anchor_start: usize,
    /// Zero-noise outputs from `x_anchor`, indices `[anchor_start, ε)`.
    pub ybar: Vec<Vector>,
    /// `K_s` membership over `[anchor_start, ε)`.
    pub ks_window_flags: Vec<bool>,
    /// `Σ η^{t-j-1} ‖y_j - ȳ_j‖²_R` over untransmitted window indices
    /// (the factor 2 is applied when the condition is evaluated).
    pub ybar_residual_sum: f64,
    /// `Σ_{j∈[ε,t)} η^{t-j-1} ‖y_j - h(x̂_j, u_j, 0)‖²_R`.
    pub innov_sum: f64,
    /// Time the running sums are discounted to.
    pub synced_to: usize,
}

impl EtmState {
    /// State before the first step: `d̃_1 = 0` forces `γ_1 = 1`.
    pub fn new(x_hat0: Vector) -> Self {
        Self {
            eps: 0,
            delta: 0,
            d_tilde: 0.0,
            x_event: x_hat0.clone(),
            x_anchor: x_hat0.clone(),
            x_hat: x_hat0,
            anchor_start: 0,
            ybar: Vec::new(),
            ks_window_flags: Vec::new(),
            ybar_residual_sum: 0.0,
            innov_sum: 0.0,
            synced_to: 0,
        }
    }

    pub fn condition_lhs(&self) -> f64 {
        2.0 * self.ybar_residual_sum + self.innov_sum
    }

    pub fn condition_rhs(&self, t: usize, eta: f64) -> f64 {
        eta.powi((t - self.eps) as i32) * self.d_tilde
    }
}

/// `γ = 1` unless `lhs < rhs` (strict).
pub fn triggers(lhs: f64, rhs: f64) -> bool {
    !(lhs < rhs)
}

/// Advances the running sums with `y_{t-1}` and decides `γ_t`.
pub fn evaluate(state: &mut EtmState, model: &SystemModel, params: &IossParams, t: usize, y_prev: &Vector, u_prev: &Vector) -> bool {
    debug_assert_eq!(state.synced_to + 1, t, "trigger evaluated out of order");
    let eta = params.eta;
    let y_pred = model.h(&state.x_hat, u_prev, &model.zero_noise());
    state.ybar_residual_sum *= eta;
    state.innov_sum = eta * state.innov_sum + weighted_sq(&(y_prev - y_pred), &params.r);
    state.synced_to = t;
    triggers(state.condition_lhs(), state.condition_rhs(t, eta))
}

/// `x̂_t = f(x̂_{t-1}, u_{t-1}, 0)`; advances the local copy.
pub fn open_loop_predict(state: &mut EtmState, model: &SystemModel, u_prev: &Vector) -> Vector {
    state.x_hat = model.f(&state.x_hat, u_prev, &model.zero_noise());
    state.delta += 1;
    state.x_hat.clone()
}

/// Event-time bookkeeping after feedback `(d̃_{t+1}, x̂*_{t-M_t|t}, x̂_t)`.
///
/// `ys[j]`/`us[j]` hold the plant's output/input history; `ks_flags` marks
/// transmitted indices over `[anchor_start, t)`.
#[allow(clippy::too_many_arguments)]
pub fn on_event(
    state: &mut EtmState,
    model: &SystemModel,
    params: &IossParams,
    t: usize,
    anchor_start: usize,
    d_tilde_next: f64,
    x_first: &Vector,
    x_now: &Vector,
    ks_flags: Vec<bool>,
    ys: &[Vector],
    us: &[Vector],
) {
    debug_assert_eq!(ks_flags.len(), t - anchor_start);
    let ybar = zero_noise_outputs(model, x_first, &us[anchor_start..t]);
    let mut sum = 0.0;
    for (k, j) in (anchor_start..t).enumerate() {
        if !ks_flags[k] {
            sum += params.eta.powi((t - j - 1) as i32) * weighted_sq(&(&ys[j] - &ybar[k]), &params.r);
        }
    }
    *state = EtmState {
        eps: t,
        delta: 0,
        d_tilde: d_tilde_next,
        x_hat: x_now.clone(),
        x_event: x_now.clone(),
        x_anchor: x_first.clone(),
        anchor_start,
        ybar,
        ks_window_flags: ks_flags,
        ybar_residual_sum: sum,
        innov_sum: 0.0,
        synced_to: t,
    };
}

/// Recomputes both running sums at time `state.synced_to` from histories.
pub fn recompute_sums(state: &EtmState, model: &SystemModel, params: &IossParams, ys: &[Vector], us: &[Vector]) -> (f64, f64) {
    let t = state.synced_to;
    let eta = params.eta;
    let mut ybar_sum = 0.0;
    for (k, j) in (state.anchor_start..state.eps).enumerate() {
        if !state.ks_window_flags[k] {
            ybar_sum += eta.powi((t - j - 1) as i32) * weighted_sq(&(&ys[j] - &state.ybar[k]), &params.r);
        }
    }
    let mut innov = 0.0;
    let mut x = state.x_event.clone();
    let zero = model.zero_noise();
    for j in state.eps..t {
        let y = model.h(&x, &us[j], &zero);
        innov += eta.powi((t - j - 1) as i32) * weighted_sq(&(&ys[j] - y), &params.r);
        x = model.f(&x, &us[j], &zero);
    }
    (ybar_sum, innov)
}

/// Discounted optimal residual sum of an event-time solution:
/// `d = Σ_j η^{ε-1-j} (2‖ŵ*_j‖²_Q + [j∈K_s] ‖y_j - ŷ*_j‖²_R)`.
pub fn compute_d(result: &EstimateResult, params: &IossParams, meas: &BTreeMap<usize, Vector>) -> f64 {
    let eps = result.t;
    let mut d = 0.0;
    for (k, j) in (result.start..eps).enumerate() {
        let mut term = 2.0 * weighted_sq(&result.w_seq[k], &params.q);
        if let Some(y) = meas.get(&j) {
            term += weighted_sq(&(y - &result.y_seq[k]), &params.r);
        }
        d += params.eta.powi((eps - 1 - j) as i32) * term;
    }
    d
}

/// Gap between the zero-noise and the optimal outputs on untransmitted
/// indices: `p = Σ_{j∉K_s} η^{ε-j-1} ‖ȳ_j - ŷ*_j‖²_R`.
pub fn compute_p(result: &EstimateResult, params: &IossParams, model: &SystemModel, inputs: &[Vector], ks: &BTreeSet<usize>) -> f64 {
    let eps = result.t;
    debug_assert_eq!(inputs.len(), eps - result.start);
    let ybar = zero_noise_outputs(model, result.first_state(), inputs);
    let mut p = 0.0;
    for (k, j) in (result.start..eps).enumerate() {
        if !ks.contains(&j) {
            p += params.eta.powi((eps - j - 1) as i32) * weighted_sq(&(&ybar[k] - &result.y_seq[k]), &params.r);
        }
    }
    p
}

/// `d̃ = α d - 2 p` (negative values force an event at every step).
pub fn update_dtilde(d: f64, p: f64, alpha: f64) -> f64 {
    alpha * d - 2.0 * p
}

/// `h(x_j, u_j, 0)` along the zero-noise rollout from `x0`.
pub fn zero_noise_outputs(model: &SystemModel, x0: &Vector, inputs: &[Vector]) -> Vec<Vector> {
    let zero = model.zero_noise();
    let mut x = x0.clone();
    inputs
        .iter()
        .map(|u| {
            let y = model.h(&x, u, &zero);
            x = model.f(&x, u, &zero);
            y
        })
        .collect()
}
