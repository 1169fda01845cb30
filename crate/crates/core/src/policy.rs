//! The combined control strategy: receding-horizon input on the feasible
//! set, zero input (the back-up law for open-loop-stable plants)
//! everywhere else. Also hosts feasible-set membership, the boundary
//! scaling along rays, and the extended Lyapunov candidate that continues
//! the nominal optimal value beyond the feasible set.

use thiserror::Error;

use crate::linalg::dot;
use crate::mpc::{
    solve_mpc, solve_mpc_with_start, MpcProblemData, MpcSolution, MpcStatus, MpcWarmStart,
};
use crate::qp::Feasibility;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("state is inside the feasible set; boundary scaling needs an exterior point")]
    NotOutside,
    #[error("origin is not feasible; the assembled design is unusable")]
    OriginInfeasible,
    #[error("could not evaluate the value function near the boundary (verdict stayed {0:?})")]
    BoundaryEvaluation(Feasibility),
}

/// Which branch of the combined law produced the input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    Mpc,
    Backup,
    /// The solver could not certify feasibility either way; the zero
    /// input is applied conservatively.
    IndeterminateBackup,
}

impl Branch {
    pub fn as_str(&self) -> &'static str {
        match self {
            Branch::Mpc => "mpc",
            Branch::Backup => "backup",
            Branch::IndeterminateBackup => "indeterminate_backup",
        }
    }
}

/// Outcome of one combined-policy evaluation.
#[derive(Debug, Clone)]
pub struct PolicyDecision {
    pub input: Vec<f64>,
    pub branch: Branch,
    /// Nominal optimal value when the MPC branch is active.
    pub value_nominal: Option<f64>,
    pub feasible: bool,
}

/// Membership verdict for the feasible set: solves the receding-horizon
/// problem at `x` and maps its status. (The strictly convex MPC QP and
/// the zero-objective feasibility QP share the same constraint set, so
/// the verdicts coincide; the strictly convex form is the one with a
/// cached template.)
pub fn in_feasible_set(data: &MpcProblemData, x: &[f64]) -> Feasibility {
    match solve_mpc(data, x).status {
        MpcStatus::Optimal => Feasibility::Feasible,
        MpcStatus::Infeasible => Feasibility::Infeasible,
        MpcStatus::Indeterminate => Feasibility::Indeterminate,
    }
}

/// The combined law: receding-horizon input when `x` is feasible, the
/// zero back-up input otherwise (also on indeterminate verdicts).
pub fn combined_policy(data: &MpcProblemData, x: &[f64]) -> PolicyDecision {
    combined_policy_with_start(data, x, None).0
}

/// Same as [`combined_policy`] but exposes the underlying solution for
/// warm-start chaining in closed-loop simulation.
pub fn combined_policy_with_start(
    data: &MpcProblemData,
    x: &[f64],
    warm: Option<&MpcWarmStart>,
) -> (PolicyDecision, Option<MpcSolution>) {
    let sol = solve_mpc_with_start(data, x, warm);
    let n_u = data.n_inputs();
    match sol.status {
        MpcStatus::Optimal => {
            let decision = PolicyDecision {
                input: sol.u_seq[0].clone(),
                branch: Branch::Mpc,
                value_nominal: Some(sol.nominal_value),
                feasible: true,
            };
            (decision, Some(sol))
        }
        MpcStatus::Infeasible => (
            PolicyDecision {
                input: vec![0.0; n_u],
                branch: Branch::Backup,
                value_nominal: None,
                feasible: false,
            },
            None,
        ),
        MpcStatus::Indeterminate => (
            PolicyDecision {
                input: vec![0.0; n_u],
                branch: Branch::IndeterminateBackup,
                value_nominal: None,
                feasible: false,
            },
            None,
        ),
    }
}

/// Shifted warm start for the next closed-loop step: drop the first
/// input, append the terminal controller acting on the final nominal
/// state, and carry the previous duals as the active-set seed.
pub fn shifted_warm_start(data: &MpcProblemData, sol: &MpcSolution) -> MpcWarmStart {
    let m = data.n_inputs();
    let mut flat = Vec::with_capacity(data.horizon() * m);
    for u in sol.u_seq.iter().skip(1) {
        flat.extend_from_slice(u);
    }
    let z_n = sol.z_seq.last().expect("optimal solution has a rollout");
    let tail = data.terminal().kf.matvec(z_n);
    flat.extend(tail.iter().map(|v| -v));
    MpcWarmStart {
        u_flat: flat,
        duals: sol.qp_duals.clone(),
    }
}

const DEFAULT_BOUNDARY_TOL: f64 = 1e-8;

/// Largest scale `a* in [0, 1]` with `a* x` feasible, by bisection.
/// The feasible set is convex and contains the origin, so the feasible
/// scales form an interval `[0, a*]`; indeterminate verdicts shrink
/// toward the feasible side, making the returned scale conservative.
pub fn boundary_scaling(
    data: &MpcProblemData,
    x: &[f64],
    tol: f64,
) -> Result<f64, PolicyError> {
    assert!(tol > 0.0, "boundary_scaling: tolerance must be positive");
    if in_feasible_set(data, x) == Feasibility::Feasible {
        return Err(PolicyError::NotOutside);
    }
    let origin = vec![0.0; x.len()];
    if in_feasible_set(data, &origin) != Feasibility::Feasible {
        return Err(PolicyError::OriginInfeasible);
    }
    let mut lo = 0.0f64;
    let mut hi = 1.0f64;
    while hi - lo > tol {
        let mid = 0.5 * (lo + hi);
        let probe: Vec<f64> = x.iter().map(|v| v * mid).collect();
        match in_feasible_set(data, &probe) {
            Feasibility::Feasible => lo = mid,
            Feasibility::Infeasible | Feasibility::Indeterminate => hi = mid,
        }
    }
    Ok(lo)
}

/// The extended Lyapunov candidate: the nominal optimal value on the
/// feasible set, and its value at the ray-boundary point `a* x` outside
/// it. Attainment of the ray maximum at `a*` follows from convexity of
/// the nominal value with its minimum 0 at the origin (property-tested).
pub fn lyapunov_candidate(data: &MpcProblemData, x: &[f64]) -> Result<f64, PolicyError> {
    let sol = solve_mpc(data, x);
    if sol.status == MpcStatus::Optimal {
        return Ok(sol.nominal_value);
    }
    if dot(x, x) == 0.0 {
        return Err(PolicyError::OriginInfeasible);
    }
    let a_star = boundary_scaling(data, x, DEFAULT_BOUNDARY_TOL)?;
    // the bisection certified feasibility at a*; retreat slightly if a
    // re-solve lands on the wrong side of the numeric boundary
    let mut scale = a_star;
    for _ in 0..8 {
        let probe: Vec<f64> = x.iter().map(|v| v * scale).collect();
        let sol = solve_mpc(data, &probe);
        if sol.status == MpcStatus::Optimal {
            return Ok(sol.nominal_value);
        }
        scale *= 1.0 - 16.0 * DEFAULT_BOUNDARY_TOL;
    }
    Err(PolicyError::BoundaryEvaluation(in_feasible_set(data, x)))
}
