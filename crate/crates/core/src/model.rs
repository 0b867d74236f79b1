//! Discrete-time nonlinear systems `x⁺ = f(x, u, w)`, `y = h(x, u, w)`,
//! seeded bounded-noise simulation, and the two benchmark plants.

use std::collections::BTreeMap;
use std::f64::consts::FRAC_PI_4;
use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::linalg::{Matrix, Vector};

/// Map `(x, u, w) -> value` used for both dynamics and output.
pub type MapFn = Arc<dyn Fn(&Vector, &Vector, &Vector) -> Vector + Send + Sync>;

/// Jacobian map `(x, u, w) -> (∂/∂x, ∂/∂w)`.
pub type JacobianFn = Arc<dyn Fn(&Vector, &Vector, &Vector) -> (Matrix, Matrix) + Send + Sync>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("invalid box for {what}: {reason}")]
    InvalidBox { what: &'static str, reason: String },
    #[error("invalid noise specification: {0}")]
    Noise(String),
    #[error("simulation horizon must be at least 1")]
    EmptyHorizon,
    #[error("input sequence has {got} entries, expected {expected}")]
    InputLength { expected: usize, got: usize },
}

pub(crate) fn check_dim(what: &'static str, expected: usize, got: usize) -> Result<(), ModelError> {
    if expected == got {
        Ok(())
    } else {
        Err(ModelError::Dimension { what, expected, got })
    }
}

/// Per-coordinate interval set; infinite bounds are allowed.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxSet {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl BoxSet {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self, ModelError> {
        if lower.len() != upper.len() {
            return Err(ModelError::InvalidBox {
                what: "bounds",
                reason: format!("{} lower vs {} upper bounds", lower.len(), upper.len()),
            });
        }
        for (i, (l, u)) in lower.iter().zip(&upper).enumerate() {
            if l.is_nan() || u.is_nan() || l > u {
                return Err(ModelError::InvalidBox {
                    what: "bounds",
                    reason: format!("coordinate {i}: [{l}, {u}]"),
                });
            }
        }
        Ok(Self { lower, upper })
    }

    pub fn unbounded(n: usize) -> Self {
        Self {
            lower: vec![f64::NEG_INFINITY; n],
            upper: vec![f64::INFINITY; n],
        }
    }

    /// `[-a_i, a_i]` per coordinate.
    pub fn symmetric(amplitudes: &[f64]) -> Result<Self, ModelError> {
        Self::new(amplitudes.iter().map(|a| -a).collect(), amplitudes.to_vec())
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn contains(&self, v: &Vector) -> bool {
        v.len() == self.dim()
            && v
                .iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(x, (l, u))| *l <= *x && *x <= *u)
    }

    /// `true` when any coordinate has a finite bound.
    pub fn is_bounded(&self) -> bool {
        self.lower.iter().chain(&self.upper).any(|b| b.is_finite())
    }

    /// Amount by which `v` sits outside the box, per coordinate (0 inside).
    pub fn excess(&self, v: &Vector) -> Vector {
        Vector::from_iterator(
            v.len(),
            v.iter()
                .zip(self.lower.iter().zip(&self.upper))
                .map(|(x, (l, u))| (l - x).max(0.0) + (x - u).max(0.0)),
        )
    }

    pub fn project(&self, v: &mut Vector) {
        for (x, (l, u)) in v.iter_mut().zip(self.lower.iter().zip(&self.upper)) {
            *x = x.clamp(*l, *u);
        }
    }
}

/// Dimensions `(n_x, n_u, n_w, n_y)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    pub n_x: usize,
    pub n_u: usize,
    pub n_w: usize,
    pub n_y: usize,
}

#[derive(Clone)]
pub struct SystemModel {
    name: String,
    dims: Dims,
    f: MapFn,
    h: MapFn,
    f_jac: Option<JacobianFn>,
    h_jac: Option<JacobianFn>,
    pub x_box: BoxSet,
    pub u_box: BoxSet,
    pub w_box: BoxSet,
    pub y_box: BoxSet,
    default_noise: Vec<f64>,
}

impl fmt::Debug for SystemModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SystemModel")
            .field("name", &self.name)
            .field("dims", &self.dims)
            .field("x_box", &self.x_box)
            .field("w_box", &self.w_box)
            .field("y_box", &self.y_box)
            .finish_non_exhaustive()
    }
}

impl SystemModel {
    /// Builds a model with unbounded sets and zero default noise.
    pub fn new(name: impl Into<String>, dims: Dims, f: MapFn, h: MapFn) -> Self {
        Self {
            name: name.into(),
            dims,
            f,
            h,
            f_jac: None,
            h_jac: None,
            x_box: BoxSet::unbounded(dims.n_x),
            u_box: BoxSet::unbounded(dims.n_u),
            w_box: BoxSet::unbounded(dims.n_w),
            y_box: BoxSet::unbounded(dims.n_y),
            default_noise: vec![0.0; dims.n_w],
        }
    }

    /// Replaces the admissible sets. `0 ∈ W` is required so that the
    /// zero-disturbance prediction stays admissible.
    pub fn with_boxes(
        mut self,
        x_box: BoxSet,
        u_box: BoxSet,
        w_box: BoxSet,
        y_box: BoxSet,
    ) -> Result<Self, ModelError> {
        check_dim("x_box", self.dims.n_x, x_box.dim())?;
        check_dim("u_box", self.dims.n_u, u_box.dim())?;
        check_dim("w_box", self.dims.n_w, w_box.dim())?;
        check_dim("y_box", self.dims.n_y, y_box.dim())?;
        if !w_box.contains(&Vector::zeros(self.dims.n_w)) {
            return Err(ModelError::InvalidBox {
                what: "w_box",
                reason: "zero disturbance must be admissible".into(),
            });
        }
        self.x_box = x_box;
        self.u_box = u_box;
        self.w_box = w_box;
        self.y_box = y_box;
        Ok(self)
    }

    pub fn with_jacobians(mut self, f_jac: JacobianFn, h_jac: JacobianFn) -> Self {
        self.f_jac = Some(f_jac);
        self.h_jac = Some(h_jac);
        self
    }

    /// Noise amplitudes used when a run does not specify its own.
    pub fn with_default_noise(mut self, amplitudes: Vec<f64>) -> Result<Self, ModelError> {
        check_dim("default noise", self.dims.n_w, amplitudes.len())?;
        self.default_noise = amplitudes;
        Ok(self)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn n_x(&self) -> usize {
        self.dims.n_x
    }

    pub fn n_u(&self) -> usize {
        self.dims.n_u
    }

    pub fn n_w(&self) -> usize {
        self.dims.n_w
    }

    pub fn n_y(&self) -> usize {
        self.dims.n_y
    }

    pub fn default_noise(&self) -> &[f64] {
        &self.default_noise
    }

    fn check_args(&self, x: &Vector, u: &Vector, w: &Vector) -> Result<(), ModelError> {
        check_dim("state", self.dims.n_x, x.len())?;
        check_dim("input", self.dims.n_u, u.len())?;
        check_dim("disturbance", self.dims.n_w, w.len())
    }

    pub fn step(&self, x: &Vector, u: &Vector, w: &Vector) -> Result<Vector, ModelError> {
        self.check_args(x, u, w)?;
        Ok((self.f)(x, u, w))
    }

    pub fn output(&self, x: &Vector, u: &Vector, w: &Vector) -> Result<Vector, ModelError> {
        self.check_args(x, u, w)?;
        Ok((self.h)(x, u, w))
    }

    // Unchecked variants for inner loops whose dimensions were validated upstream.
    #[inline]
    pub(crate) fn f(&self, x: &Vector, u: &Vector, w: &Vector) -> Vector {
        (self.f)(x, u, w)
    }

    #[inline]
    pub(crate) fn h(&self, x: &Vector, u: &Vector, w: &Vector) -> Vector {
        (self.h)(x, u, w)
    }

    pub fn zero_noise(&self) -> Vector {
        Vector::zeros(self.dims.n_w)
    }

    /// `(∂f/∂x, ∂f/∂w)`, analytic when supplied, central differences otherwise.
    pub fn dynamics_jacobians(&self, x: &Vector, u: &Vector, w: &Vector) -> (Matrix, Matrix) {
        match &self.f_jac {
            Some(j) => j(x, u, w),
            None => central_jacobians(&*self.f, x, u, w, self.dims.n_x),
        }
    }

    /// `(∂h/∂x, ∂h/∂w)`, analytic when supplied, central differences otherwise.
    pub fn output_jacobians(&self, x: &Vector, u: &Vector, w: &Vector) -> (Matrix, Matrix) {
        match &self.h_jac {
            Some(j) => j(x, u, w),
            None => central_jacobians(&*self.h, x, u, w, self.dims.n_y),
        }
    }
}

fn central_jacobians(
    g: &(dyn Fn(&Vector, &Vector, &Vector) -> Vector + Send + Sync),
    x: &Vector,
    u: &Vector,
    w: &Vector,
    n_out: usize,
) -> (Matrix, Matrix) {
    // cbrt(machine eps): balances truncation and rounding error.
    const REL: f64 = 6.055454452393343e-6;
    let mut jx = Matrix::zeros(n_out, x.len());
    let mut xp = x.clone();
    for i in 0..x.len() {
        let h = REL * x[i].abs().max(1.0);
        let xi = x[i];
        xp[i] = xi + h;
        let gp = g(&xp, u, w);
        xp[i] = xi - h;
        let gm = g(&xp, u, w);
        xp[i] = xi;
        jx.set_column(i, &((gp - gm) / (2.0 * h)));
    }
    let mut jw = Matrix::zeros(n_out, w.len());
    let mut wp = w.clone();
    for i in 0..w.len() {
        let h = REL * w[i].abs().max(1.0);
        let wi = w[i];
        wp[i] = wi + h;
        let gp = g(x, u, &wp);
        wp[i] = wi - h;
        let gm = g(x, u, &wp);
        wp[i] = wi;
        jw.set_column(i, &((gp - gm) / (2.0 * h)));
    }
    (jx, jw)
}

/// I.i.d. uniform noise on `[-a_i, a_i]`.
///
/// Each `(seed, t, coordinate)` triple maps to its own position in a ChaCha
/// stream, so draws do not depend on evaluation order or on how many steps
/// were simulated before.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSpec {
    pub amplitudes: Vec<f64>,
    pub seed: u64,
    /// From this step on the disturbance vanishes.
    pub cutoff: Option<usize>,
}

impl NoiseSpec {
    pub fn uniform(amplitudes: Vec<f64>, seed: u64) -> Self {
        Self {
            amplitudes,
            seed,
            cutoff: None,
        }
    }

    pub fn zero(n_w: usize) -> Self {
        Self::uniform(vec![0.0; n_w], 0)
    }

    pub fn with_cutoff(mut self, t: usize) -> Self {
        self.cutoff = Some(t);
        self
    }

    pub fn validate(&self, model: &SystemModel) -> Result<(), ModelError> {
        check_dim("noise amplitudes", model.n_w(), self.amplitudes.len())?;
        for (i, a) in self.amplitudes.iter().enumerate() {
            if !(a.is_finite() && *a >= 0.0) {
                return Err(ModelError::Noise(format!("amplitude {i} is {a}")));
            }
            if -a < model.w_box.lower()[i] || *a > model.w_box.upper()[i] {
                return Err(ModelError::Noise(format!(
                    "amplitude {i} ({a}) exceeds the disturbance box"
                )));
            }
        }
        Ok(())
    }

    pub fn sample(&self, t: usize) -> Vector {
        let n = self.amplitudes.len();
        if self.cutoff.is_some_and(|c| t >= c) {
            return Vector::zeros(n);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(t as u64);
        Vector::from_iterator(
            n,
            self.amplitudes.iter().enumerate().map(|(i, &a)| {
                if a == 0.0 {
                    return 0.0;
                }
                // One 64-bit word per coordinate.
                rng.set_word_pos(2 * i as u128);
                rng.random_range(-a..=a)
            }),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BoxViolation {
    pub t: usize,
    pub set: BoxKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoxKind {
    State,
    Output,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Vec<Vector>,
    pub outputs: Vec<Vector>,
    pub noises: Vec<Vector>,
    pub inputs: Vec<Vector>,
    pub box_violations: Vec<BoxViolation>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.outputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.outputs.is_empty()
    }
}

/// Repeats a constant input `T` times.
pub fn constant_inputs(u: &Vector, steps: usize) -> Vec<Vector> {
    vec![u.clone(); steps]
}

pub fn simulate(
    model: &SystemModel,
    x0: &Vector,
    inputs: &[Vector],
    noise: &NoiseSpec,
    steps: usize,
) -> Result<Trajectory, ModelError> {
    if steps == 0 {
        return Err(ModelError::EmptyHorizon);
    }
    if inputs.len() != steps {
        return Err(ModelError::InputLength {
            expected: steps,
            got: inputs.len(),
        });
    }
    check_dim("initial state", model.n_x(), x0.len())?;
    noise.validate(model)?;
    for u in inputs {
        check_dim("input", model.n_u(), u.len())?;
    }

    let mut traj = Trajectory {
        states: Vec::with_capacity(steps + 1),
        outputs: Vec::with_capacity(steps),
        noises: Vec::with_capacity(steps),
        inputs: inputs.to_vec(),
        box_violations: Vec::new(),
    };
    let mut x = x0.clone();
    if !model.x_box.contains(&x) {
        traj.box_violations.push(BoxViolation { t: 0, set: BoxKind::State });
    }
    for (t, u) in inputs.iter().enumerate() {
        let w = noise.sample(t);
        let y = model.h(&x, u, &w);
        if !model.y_box.contains(&y) {
            traj.box_violations.push(BoxViolation { t, set: BoxKind::Output });
        }
        let next = model.f(&x, u, &w);
        if !model.x_box.contains(&next) {
            traj.box_violations.push(BoxViolation {
                t: t + 1,
                set: BoxKind::State,
            });
        }
        traj.states.push(std::mem::replace(&mut x, next));
        traj.outputs.push(y);
        traj.noises.push(w);
    }
    traj.states.push(x);
    Ok(traj)
}

// ---------------------------------------------------------------------------
// Batch reactor: 2A -> B, Euler discretized.

pub const REACTOR_TAU: f64 = 0.1;
pub const REACTOR_K1: f64 = 0.16;
pub const REACTOR_K2: f64 = 0.0064;

pub fn batch_reactor() -> SystemModel {
    let (tau, k1, k2) = (REACTOR_TAU, REACTOR_K1, REACTOR_K2);
    let f: MapFn = Arc::new(move |x, _u, w| {
        let r = k1 * x[0] * x[0] - k2 * x[1];
        Vector::from_vec(vec![x[0] - 2.0 * tau * r + w[0], x[1] + tau * r + w[1]])
    });
    let h: MapFn = Arc::new(|x, _u, w| Vector::from_element(1, x[0] + x[1] + w[2]));
    let f_jac: JacobianFn = Arc::new(move |x, _u, _w| {
        let a = Matrix::from_row_slice(
            2,
            2,
            &[
                1.0 - 4.0 * tau * k1 * x[0],
                2.0 * tau * k2,
                2.0 * tau * k1 * x[0],
                1.0 - tau * k2,
            ],
        );
        let b = Matrix::from_row_slice(2, 3, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        (a, b)
    });
    let h_jac: JacobianFn = Arc::new(|_x, _u, _w| {
        (
            Matrix::from_row_slice(1, 2, &[1.0, 1.0]),
            Matrix::from_row_slice(1, 3, &[0.0, 0.0, 1.0]),
        )
    });
    let noise = vec![1e-3, 1e-3, 0.1];
    let dims = Dims { n_x: 2, n_u: 0, n_w: 3, n_y: 1 };
    SystemModel::new("batch_reactor", dims, f, h)
        .with_jacobians(f_jac, h_jac)
        .with_boxes(
            // Concentrations are nonnegative; this also removes the mirrored
            // x1 < 0 branch on which the reaction rate k1·x1² is identical.
            BoxSet::new(vec![0.0; 2], vec![f64::INFINITY; 2]).expect("static bounds"),
            BoxSet::unbounded(0),
            BoxSet::symmetric(&noise).expect("static bounds"),
            BoxSet::unbounded(1),
        )
        .and_then(|m| m.with_default_noise(noise))
        .expect("static model definition")
}

// ---------------------------------------------------------------------------
// Two-link planar arm, point masses at the link ends.

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RobotArmParams {
    pub m1: f64,
    pub m2: f64,
    pub a1: f64,
    pub a2: f64,
    pub gravity: f64,
    pub dt: f64,
}

impl Default for RobotArmParams {
    fn default() -> Self {
        Self {
            m1: 1.0,
            m2: 1.0,
            a1: 1.0,
            a2: 1.0,
            gravity: 9.81,
            dt: 0.005,
        }
    }
}

impl RobotArmParams {
    /// Continuous-time vector field `ẋ` for state `[q1, q2, q̇1, q̇2]` and joint torques `u`.
    pub fn vector_field(&self, x: &[f64], u: &[f64]) -> [f64; 4] {
        let Self { m1, m2, a1, a2, gravity: g, .. } = *self;
        let (q1, q2, dq1, dq2) = (x[0], x[1], x[2], x[3]);
        let (s2, c2) = q2.sin_cos();
        let m11 = (m1 + m2) * a1 * a1 + m2 * a2 * a2 + 2.0 * m2 * a1 * a2 * c2;
        let m12 = m2 * a2 * a2 + m2 * a1 * a2 * c2;
        let m22 = m2 * a2 * a2;
        let v1 = -m2 * a1 * a2 * (2.0 * dq1 * dq2 + dq2 * dq2) * s2;
        let v2 = m2 * a1 * a2 * dq1 * dq1 * s2;
        let g1 = (m1 + m2) * g * a1 * q1.cos() + m2 * g * a2 * (q1 + q2).cos();
        let g2 = m2 * g * a2 * (q1 + q2).cos();
        let (tau1, tau2) = (u.first().copied().unwrap_or(0.0), u.get(1).copied().unwrap_or(0.0));
        let r1 = tau1 - v1 - g1;
        let r2 = tau2 - v2 - g2;
        let det = m11 * m22 - m12 * m12;
        [dq1, dq2, (m22 * r1 - m12 * r2) / det, (m11 * r2 - m12 * r1) / det]
    }

    /// Kinetic plus potential energy (heights measured along the gravity axis).
    pub fn energy(&self, x: &[f64]) -> f64 {
        let Self { m1, m2, a1, a2, gravity: g, .. } = *self;
        let (q1, q2, dq1, dq2) = (x[0], x[1], x[2], x[3]);
        let c2 = q2.cos();
        let m11 = (m1 + m2) * a1 * a1 + m2 * a2 * a2 + 2.0 * m2 * a1 * a2 * c2;
        let m12 = m2 * a2 * a2 + m2 * a1 * a2 * c2;
        let m22 = m2 * a2 * a2;
        let kinetic = 0.5 * (m11 * dq1 * dq1 + 2.0 * m12 * dq1 * dq2 + m22 * dq2 * dq2);
        let potential = m1 * g * a1 * q1.sin() + m2 * g * (a1 * q1.sin() + a2 * (q1 + q2).sin());
        kinetic + potential
    }
}

pub fn robot_arm() -> SystemModel {
    robot_arm_with(RobotArmParams::default())
}

pub fn robot_arm_with(p: RobotArmParams) -> SystemModel {
    let f: MapFn = Arc::new(move |x, u, w| {
        let dx = p.vector_field(x.as_slice(), u.as_slice());
        Vector::from_iterator(4, (0..4).map(|i| x[i] + p.dt * dx[i] + w[i]))
    });
    let h: MapFn = Arc::new(|x, _u, w| Vector::from_vec(vec![x[0] + w[4], x[1] + w[5]]));
    let h_jac: JacobianFn = Arc::new(|_x, _u, _w| {
        let mut c = Matrix::zeros(2, 4);
        c[(0, 0)] = 1.0;
        c[(1, 1)] = 1.0;
        let mut d = Matrix::zeros(2, 6);
        d[(0, 4)] = 1.0;
        d[(1, 5)] = 1.0;
        (c, d)
    });
    // ∂f/∂x by central differences of the vector field; ∂f/∂w is [I 0].
    let f_jac: JacobianFn = Arc::new(move |x, u, _w| {
        const REL: f64 = 6.055454452393343e-6;
        let mut a = Matrix::identity(4, 4);
        let mut xp: Vec<f64> = x.iter().copied().collect();
        for i in 0..4 {
            let h = REL * x[i].abs().max(1.0);
            xp[i] = x[i] + h;
            let fp = p.vector_field(&xp, u.as_slice());
            xp[i] = x[i] - h;
            let fm = p.vector_field(&xp, u.as_slice());
            xp[i] = x[i];
            for r in 0..4 {
                a[(r, i)] += p.dt * (fp[r] - fm[r]) / (2.0 * h);
            }
        }
        let mut b = Matrix::zeros(4, 6);
        for i in 0..4 {
            b[(i, i)] = 1.0;
        }
        (a, b)
    });
    let noise = vec![0.01, 0.01, 0.01, 0.01, 0.05, 0.05];
    let dims = Dims { n_x: 4, n_u: 2, n_w: 6, n_y: 2 };
    SystemModel::new("robot_arm", dims, f, h)
        .with_jacobians(f_jac, h_jac)
        .with_default_noise(noise)
        .expect("static model definition")
}

/// Initial truth and prior used by the benchmark runs.
pub fn default_initial_conditions(name: &str) -> Option<(Vector, Vector)> {
    match name {
        "batch_reactor" => Some((Vector::from_vec(vec![3.0, 1.0]), Vector::from_vec(vec![0.1, 4.5]))),
        "robot_arm" => Some((
            Vector::from_vec(vec![FRAC_PI_4, FRAC_PI_4, 0.0, 0.0]),
            Vector::zeros(4),
        )),
        _ => None,
    }
}

/// Name-indexed model lookup; the benchmark plants are pre-registered.
#[derive(Clone, Debug)]
pub struct ModelRegistry {
    models: BTreeMap<String, SystemModel>,
}

impl Default for ModelRegistry {
    fn default() -> Self {
        Self::with_builtins()
    }
}

impl ModelRegistry {
    pub fn empty() -> Self {
        Self { models: BTreeMap::new() }
    }

    pub fn with_builtins() -> Self {
        let mut r = Self::empty();
        r.register(batch_reactor());
        r.register(robot_arm());
        r
    }

    pub fn register(&mut self, model: SystemModel) {
        self.models.insert(model.name().to_string(), model);
    }

    pub fn get(&self, name: &str) -> Option<&SystemModel> {
        self.models.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.models.keys().map(String::as_str)
    }
}
