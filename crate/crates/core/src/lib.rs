//! Stochastic model predictive control for linear time-invariant systems
//! with unbounded additive noise: chance-constraint tightening through
//! probabilistic reachable sets, a condensed-QP MPC with terminal
//! ingredients, a zero-input back-up policy, and certification plus Monte
//! Carlo verification of input-to-state stability in probability.

pub mod issp;
pub mod linalg;
pub mod model;
pub mod mpc;
pub mod oracles;
pub mod policy;
pub mod qp;
pub mod sim;
pub mod tightening;

pub use issp::{BetaParams, IsspCertificate, RecurrenceStats};
pub use linalg::{Matrix, SymmetricMatrix};
pub use model::{CovarianceSequence, LtiSystem, NoiseMode, NoiseModel, Polytope};
pub use mpc::{CostSpec, MpcProblemData, MpcSolution, MpcStatus, MpcValue};
pub use policy::{Branch, PolicyDecision};
pub use qp::{Feasibility, QpProblem, QpSettings, QpSolution, QpStatus};
pub use sim::{InitialStates, SimConfig, SimMode, TrajectoryRecord};
pub use tightening::{TerminalIngredients, TightenedSequence};
