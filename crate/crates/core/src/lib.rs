//! Homotopy continuation for discrete-time optimal control problems with
//! nonconvex constraints.
//!
//! The constraints carry a parameter `λ ∈ [0, 1]`; at `λ = 0` the problem is
//! easy (a feasible point is known) and at `λ = 1` it is the problem of
//! interest. The KKT system is embedded in a homotopy whose zero curve starts
//! at a known point for `λ = 0` and is followed numerically to a KKT point at
//! `λ = 1`.
//!
//! - [`problem`]: problem definition, rollout, sensitivities, cost gradient.
//! - [`transcription`]: stacked constraints `G(λ, u)`, Jacobians, KKT residual.
//! - [`homotopy`]: the homotopy map, its Jacobian, initial multipliers.
//! - [`tracker`]: predictor-corrector curve tracking and endpoint refinement.
//! - [`diagnostics`]: assumption and optimality checks.
//! - [`pathplan`]: the two-obstacle planar path-planning family.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod diagnostics;
pub mod error;
pub mod homotopy;
pub mod pathplan;
pub mod problem;
pub mod tracker;
pub mod transcription;

pub use error::{Error, Result};
pub use homotopy::{CurvePoint, HessianMode, HomotopyParams, OcpHomotopy};
pub use pathplan::{build_problem, find_initial_guess, GuessStrategy, PathPlanConfig};
pub use problem::{OcpProblem, StackedControl};
pub use tracker::{solve, SolveResult, SolveStatus, TrackerConfig};
pub use transcription::NlpView;
