//! Event-triggered moving horizon estimation.
//!
//! A plant-side trigger decides at every step whether the newest output is
//! sent to a remote estimator. On an event the remote side solves a
//! discounted moving-horizon least-squares problem and returns a threshold
//! for the trigger; between events both sides predict open loop, which is
//! exactly what the optimizer would return without new information.
//!
//! Modules, bottom up:
//! - [`model`]: systems, noise and simulation, the benchmark plants
//! - [`lyapunov`]: parameter validation, minimum horizons, error bounds
//! - [`solver`]: projected Levenberg–Marquardt with an augmented-Lagrangian loop
//! - [`mhe`]: the windowed NLP
//! - [`trigger`]: the plant-side trigger
//! - [`protocol`]: scheduling, messages, remote estimator, orchestration
//! - [`sim`]: closed-loop experiments
//! - [`report`]: CSV/SVG output

pub mod linalg;
pub mod lyapunov;
pub mod mhe;
pub mod model;
pub mod protocol;
pub mod report;
pub mod sim;
pub mod solver;
pub mod trigger;

pub use linalg::{Matrix, Vector};
pub use lyapunov::{IossParams, Scheme};
pub use model::SystemModel;
pub use sim::{SimConfig, SimResult};
