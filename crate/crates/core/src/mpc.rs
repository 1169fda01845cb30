//! Assembly and solution of the tractable stochastic MPC: condensed QP
//! over the input sequence, receding-horizon law, and the optimal value
//! function with its nominal/uncertainty decomposition.
//!
//! All offline quantities are precomputed once at assembly: prediction
//! matrices, tightened constraint sets, terminal ingredients with a
//! polytopic inner approximation of the terminal ellipsoid, the QP
//! template, and the uncertainty cost constant
//! `c = sum_i Tr(Q Sigma_i) + Tr(Qf Sigma_N)`.

use thiserror::Error;

use crate::linalg::{
    cholesky, chol_solve, dot, LinalgError, LuFactors, Matrix, SymmetricMatrix,
    solve_dare,
};
use crate::model::{
    propagate_covariance, CovarianceSequence, LtiSystem, ModelError, NoiseModel, Polytope,
};
use crate::qp::{QpError, QpSettings, QpStatus, QpTemplate, WarmStart};
use crate::tightening::{
    build_tightened_sequence, terminal_level, tighten, TerminalIngredients, TightenedSequence,
    TighteningError,
};

#[derive(Debug, Error)]
pub enum MpcError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("stage cost weights must be positive definite")]
    CostNotPositiveDefinite,
    #[error("terminal polytope construction failed: {0}")]
    TerminalApproximation(String),
    #[error("MPC infeasible at the queried state")]
    Infeasible,
    #[error("solver verdict indeterminate at the queried state")]
    Indeterminate,
    #[error(transparent)]
    Tightening(#[from] TighteningError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Qp(#[from] QpError),
}

/// Quadratic stage and terminal cost weights, all positive definite.
#[derive(Debug, Clone)]
pub struct CostSpec {
    pub q: SymmetricMatrix,
    pub r: SymmetricMatrix,
    pub qf: SymmetricMatrix,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MpcStatus {
    Optimal,
    Infeasible,
    Indeterminate,
}

/// Solution of one receding-horizon problem: the optimal input sequence,
/// the nominal state rollout, and the nominal part of the optimal value.
#[derive(Debug, Clone)]
pub struct MpcSolution {
    pub u_seq: Vec<Vec<f64>>,
    pub z_seq: Vec<Vec<f64>>,
    pub nominal_value: f64,
    pub status: MpcStatus,
    pub qp_duals: Vec<f64>,
}

/// Value of the optimal value function at a state: finite on the feasible
/// set, infinite outside it, with an explicit marker when the solver
/// could not certify either way.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MpcValue {
    Finite(f64),
    Infeasible,
    Indeterminate,
}

impl MpcValue {
    /// Collapses to `f64`, mapping `Infeasible` to `+inf`. Panics on
    /// `Indeterminate`; callers that can see indeterminate verdicts must
    /// match on the enum.
    pub fn as_f64(&self) -> f64 {
        match self {
            MpcValue::Finite(v) => *v,
            MpcValue::Infeasible => f64::INFINITY,
            MpcValue::Indeterminate => panic!("indeterminate MPC value"),
        }
    }
}

/// Everything precomputed for a fixed MPC design.
pub struct MpcProblemData {
    sys: LtiSystem,
    cost: CostSpec,
    horizon: usize,
    tightened: TightenedSequence,
    terminal: TerminalIngredients,
    terminal_poly: Polytope,
    input_set: Polytope,
    covariances: CovarianceSequence,
    uncertainty_cost: f64,
    // condensed quantities: z = G x + S U over the stacked horizon
    state_map: Matrix,
    input_map: Matrix,
    qp_lin_map: Matrix,
    const_quad: SymmetricMatrix,
    rows: Matrix,
    rhs_const: Vec<f64>,
    rhs_map: Matrix,
    template: QpTemplate,
    settings: QpSettings,
}

impl MpcProblemData {
    pub fn sys(&self) -> &LtiSystem {
        &self.sys
    }

    pub fn cost(&self) -> &CostSpec {
        &self.cost
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn tightened(&self) -> &TightenedSequence {
        &self.tightened
    }

    pub fn terminal(&self) -> &TerminalIngredients {
        &self.terminal
    }

    pub fn terminal_polytope(&self) -> &Polytope {
        &self.terminal_poly
    }

    pub fn input_set(&self) -> &Polytope {
        &self.input_set
    }

    pub fn covariances(&self) -> &CovarianceSequence {
        &self.covariances
    }

    /// The uncertainty-related cost constant `c`.
    pub fn uncertainty_cost(&self) -> f64 {
        self.uncertainty_cost
    }

    pub fn state_set(&self) -> &Polytope {
        self.tightened.get(0)
    }

    pub fn n_states(&self) -> usize {
        self.sys.n_states()
    }

    pub fn n_inputs(&self) -> usize {
        self.sys.n_inputs()
    }

    /// Constraint rows of the condensed QP (fixed across states).
    pub fn qp_rows(&self) -> &Matrix {
        &self.rows
    }

    /// Right-hand side of the condensed QP at state `x`.
    pub fn qp_rhs(&self, x: &[f64]) -> Vec<f64> {
        let shift = self.rhs_map.matvec(x);
        self.rhs_const
            .iter()
            .zip(&shift)
            .map(|(c, s)| c + s)
            .collect()
    }

    /// Nominal rollout `z = G x + S U`, chunked per stage.
    pub fn rollout(&self, x: &[f64], u_flat: &[f64]) -> Vec<Vec<f64>> {
        let n = self.n_states();
        let gx = self.state_map.matvec(x);
        let su = self.input_map.matvec(u_flat);
        gx.iter()
            .zip(&su)
            .map(|(a, b)| a + b)
            .collect::<Vec<f64>>()
            .chunks(n)
            .map(<[f64]>::to_vec)
            .collect()
    }
}

/// Inner polytopic approximation of `{z | z'Q z <= level}` with `facets`
/// half-spaces: tangent directions are taken in whitened coordinates and
/// the offsets are shrunk until every vertex of the polytope lies inside
/// the ellipsoid, so the approximation is conservative.
fn inscribed_polytope(
    q: &SymmetricMatrix,
    level: f64,
    facets: usize,
) -> Result<Polytope, MpcError> {
    let n = q.dim();
    let min_facets = (2 * n).max(n + 1);
    let facets = facets.max(min_facets);
    if level <= 0.0 {
        return Err(MpcError::TerminalApproximation(
            "nonpositive ellipsoid level".to_string(),
        ));
    }
    let chol = cholesky(q).map_err(|_| {
        MpcError::TerminalApproximation("terminal weight must be positive definite".to_string())
    })?;
    // whitened facet normals (unit circle directions in 2-D, axes plus a
    // deterministic spread otherwise)
    let dirs: Vec<Vec<f64>> = if n == 1 {
        vec![vec![1.0], vec![-1.0]]
    } else if n == 2 {
        (0..facets)
            .map(|k| {
                let t = 2.0 * std::f64::consts::PI * (k as f64 + 0.5) / facets as f64;
                vec![t.cos(), t.sin()]
            })
            .collect()
    } else {
        let mut d: Vec<Vec<f64>> = Vec::with_capacity(facets);
        for i in 0..n {
            let mut e = vec![0.0; n];
            e[i] = 1.0;
            d.push(e.clone());
            e[i] = -1.0;
            d.push(e);
        }
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(0x7465726d);
        while d.len() < facets {
            let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0f64)).collect();
            let nrm = dot(&v, &v).sqrt();
            if nrm > 1e-3 {
                d.push(v.iter().map(|x| x / nrm).collect());
            }
        }
        d
    };

    // circumscribed tangent polytope {w'y <= 1}; find its vertices and
    // shrink so the scaled polytope fits in the unit ball
    let mut vertices: Vec<Vec<f64>> = Vec::new();
    let m = dirs.len();
    let mut combo: Vec<usize> = (0..n).collect();
    loop {
        let mut sys_mat = Matrix::zeros(n, n);
        for (r, &idx) in combo.iter().enumerate() {
            for c in 0..n {
                sys_mat.set(r, c, dirs[idx][c]);
            }
        }
        if let Ok(lu) = LuFactors::new(sys_mat) {
            let v = lu.solve(&vec![1.0; n]);
            if v.iter().all(|x| x.is_finite())
                && dirs.iter().all(|w| dot(w, &v) <= 1.0 + 1e-9)
            {
                vertices.push(v);
            }
        }
        // next n-combination of m facet indices
        let mut i = n;
        let mut advanced = false;
        while i > 0 {
            i -= 1;
            if combo[i] != i + m - n {
                combo[i] += 1;
                for j in (i + 1)..n {
                    combo[j] = combo[j - 1] + 1;
                }
                advanced = true;
                break;
            }
        }
        if !advanced {
            break;
        }
    }
    if vertices.is_empty() {
        return Err(MpcError::TerminalApproximation(
            "tangent polytope has no bounded vertices".to_string(),
        ));
    }
    let r_max = vertices
        .iter()
        .map(|v| dot(v, v).sqrt())
        .fold(0.0f64, f64::max);
    if !(r_max.is_finite() && r_max > 0.0) {
        return Err(MpcError::TerminalApproximation(
            "degenerate vertex radius".to_string(),
        ));
    }
    let shrink = 1.0 / r_max;

    // map back: y = L'z / sqrt(level), row w'y <= shrink becomes
    // (L w)'z / sqrt(level) <= shrink
    let scale = level.sqrt();
    let mut h = Matrix::zeros(dirs.len(), n);
    let offsets = vec![shrink; dirs.len()];
    for (r, w) in dirs.iter().enumerate() {
        let lw = chol.matvec(w);
        for c in 0..n {
            h.set(r, c, lw[c] / scale);
        }
    }
    Polytope::new(h, offsets).map_err(|e| MpcError::TerminalApproximation(e.to_string()))
}

fn require_positive_definite(s: &SymmetricMatrix) -> Result<(), MpcError> {
    match s.min_eigenvalue() {
        Ok(v) if v > 0.0 => Ok(()),
        _ => Err(MpcError::CostNotPositiveDefinite),
    }
}

/// Builds all offline quantities of the tractable MPC for one design:
/// DARE terminal ingredients, tightened constraint sequence, terminal
/// polytope, condensed prediction matrices, QP template, and the
/// uncertainty cost constant.
#[allow(clippy::too_many_arguments)]
pub fn assemble(
    sys: &LtiSystem,
    q: &SymmetricMatrix,
    r: &SymmetricMatrix,
    state_set: &Polytope,
    input_set: &Polytope,
    noise: &NoiseModel,
    horizon: usize,
    delta: f64,
    terminal_facets: usize,
) -> Result<MpcProblemData, MpcError> {
    let n = sys.n_states();
    let m = sys.n_inputs();
    assert!(horizon >= 1, "assemble: horizon must be >= 1");
    if q.dim() != n || r.dim() != m || state_set.dim() != n || input_set.dim() != m {
        return Err(MpcError::DimensionMismatch(
            "weights and constraint sets must match the system dimensions".to_string(),
        ));
    }
    if !state_set.origin_interior() || !input_set.origin_interior() {
        return Err(MpcError::DimensionMismatch(
            "state and input sets must contain the origin in their interior".to_string(),
        ));
    }
    require_positive_definite(q)?;
    require_positive_definite(r)?;

    let (qf, kf) = solve_dare(sys.a(), sys.b(), q, r)?;
    let covariances = propagate_covariance(sys, noise, horizon)?;
    let tightened = build_tightened_sequence(state_set, &covariances, delta, noise.mode())?;

    // terminal box: the state set tightened with the horizon-end covariance
    let terminal_box = tighten(state_set, covariances.last(), tightened.psi())?;
    if terminal_box.origin_excluded {
        return Err(MpcError::Tightening(TighteningError::OriginExcluded {
            index: horizon,
        }));
    }
    let alpha = terminal_level(&qf, &kf, &terminal_box.set, input_set)?;
    let terminal = TerminalIngredients { qf: qf.clone(), kf, alpha };
    let terminal_poly = inscribed_polytope(&qf, alpha, terminal_facets)?;

    // uncertainty cost constant
    let mut uncertainty_cost = 0.0;
    for i in 0..horizon {
        uncertainty_cost += q.trace_product(covariances.get(i));
    }
    uncertainty_cost += qf.trace_product(covariances.get(horizon));

    // condensed prediction matrices: G stacks A^i, S is the block
    // lower-triangular input map
    let mut a_powers: Vec<Matrix> = Vec::with_capacity(horizon + 1);
    a_powers.push(Matrix::identity(n));
    for i in 0..horizon {
        a_powers.push(sys.a().matmul(&a_powers[i]));
    }
    let mut state_map = Matrix::zeros((horizon + 1) * n, n);
    for (i, ap) in a_powers.iter().enumerate() {
        for rr in 0..n {
            for cc in 0..n {
                state_map.set(i * n + rr, cc, ap.get(rr, cc));
            }
        }
    }
    let mut input_map = Matrix::zeros((horizon + 1) * n, horizon * m);
    for i in 1..=horizon {
        for j in 0..i {
            let block = a_powers[i - 1 - j].matmul(sys.b());
            for rr in 0..n {
                for cc in 0..m {
                    input_map.set(i * n + rr, j * m + cc, block.get(rr, cc));
                }
            }
        }
    }

    // Q-bar = blockdiag(Q x N, Qf); P~ = 2 (S'QS + R-bar), F = 2 S'QG
    let big = (horizon + 1) * n;
    let mut q_bar = Matrix::zeros(big, big);
    for i in 0..horizon {
        for rr in 0..n {
            for cc in 0..n {
                q_bar.set(i * n + rr, i * n + cc, q.get(rr, cc));
            }
        }
    }
    for rr in 0..n {
        for cc in 0..n {
            q_bar.set(horizon * n + rr, horizon * n + cc, qf.get(rr, cc));
        }
    }
    let sq = input_map.transpose().matmul(&q_bar);
    let mut quad = sq.matmul(&input_map).scale(2.0);
    for i in 0..horizon {
        for rr in 0..m {
            for cc in 0..m {
                let v = quad.get(i * m + rr, i * m + cc) + 2.0 * r.get(rr, cc);
                quad.set(i * m + rr, i * m + cc, v);
            }
        }
    }
    let qp_quad = SymmetricMatrix::symmetrized(quad)?;
    let qp_lin_map = sq.matmul(&state_map).scale(2.0);
    let const_quad =
        SymmetricMatrix::symmetrized(state_map.transpose().matmul(&q_bar).matmul(&state_map))?;

    // constraint rows: inputs for every stage, tightened state sets for
    // stages 1..N-1 (stage 0 is checked directly on x), terminal polytope
    // on z_N
    let ncu = input_set.n_rows();
    let ncx = state_set.n_rows();
    let nct = terminal_poly.n_rows();
    let total_rows = horizon * ncu + horizon.saturating_sub(1) * ncx + nct;
    let mut rows = Matrix::zeros(total_rows, horizon * m);
    let mut rhs_const = Vec::with_capacity(total_rows);
    let mut rhs_map = Matrix::zeros(total_rows, n);
    let mut row_cursor = 0usize;
    for i in 0..horizon {
        for j in 0..ncu {
            for cc in 0..m {
                rows.set(row_cursor, i * m + cc, input_set.h().get(j, cc));
            }
            rhs_const.push(input_set.offsets()[j]);
            row_cursor += 1;
        }
    }
    for i in 1..horizon {
        let s_block_row = i * n;
        let z_set = tightened.get(i);
        for j in 0..ncx {
            for cc in 0..horizon * m {
                let mut acc = 0.0;
                for rr in 0..n {
                    acc += z_set.h().get(j, rr) * input_map.get(s_block_row + rr, cc);
                }
                rows.set(row_cursor, cc, acc);
            }
            rhs_const.push(z_set.offsets()[j]);
            // -H A^i
            let ha = z_set
                .h()
                .row(j)
                .iter()
                .enumerate()
                .fold(vec![0.0; n], |mut acc, (rr, &h)| {
                    for cc in 0..n {
                        acc[cc] += h * a_powers[i].get(rr, cc);
                    }
                    acc
                });
            for cc in 0..n {
                rhs_map.set(row_cursor, cc, -ha[cc]);
            }
            row_cursor += 1;
        }
    }
    {
        let s_block_row = horizon * n;
        for j in 0..nct {
            for cc in 0..horizon * m {
                let mut acc = 0.0;
                for rr in 0..n {
                    acc += terminal_poly.h().get(j, rr) * input_map.get(s_block_row + rr, cc);
                }
                rows.set(row_cursor, cc, acc);
            }
            rhs_const.push(terminal_poly.offsets()[j]);
            let ha = terminal_poly
                .h()
                .row(j)
                .iter()
                .enumerate()
                .fold(vec![0.0; n], |mut acc, (rr, &h)| {
                    for cc in 0..n {
                        acc[cc] += h * a_powers[horizon].get(rr, cc);
                    }
                    acc
                });
            for cc in 0..n {
                rhs_map.set(row_cursor, cc, -ha[cc]);
            }
            row_cursor += 1;
        }
    }
    debug_assert_eq!(row_cursor, total_rows);

    let template = QpTemplate::new(qp_quad, rows.clone())?;

    Ok(MpcProblemData {
        sys: sys.clone(),
        cost: CostSpec { q: q.clone(), r: r.clone(), qf },
        horizon,
        tightened,
        terminal,
        terminal_poly,
        input_set: input_set.clone(),
        covariances,
        uncertainty_cost,
        state_map,
        input_map,
        qp_lin_map,
        const_quad,
        rows,
        rhs_const,
        rhs_map,
        template,
        settings: QpSettings::default(),
    })
}

/// Warm-start data carried between consecutive receding-horizon solves:
/// a flattened input-sequence guess and the constraint duals of the
/// previous solution (which seed the active set).
#[derive(Debug, Clone, Default)]
pub struct MpcWarmStart {
    pub u_flat: Vec<f64>,
    pub duals: Vec<f64>,
}

/// Solves the receding-horizon problem at `x`, optionally warm-started
/// from a previous solution.
pub fn solve_mpc_with_start(
    data: &MpcProblemData,
    x: &[f64],
    warm: Option<&MpcWarmStart>,
) -> MpcSolution {
    let n = data.n_states();
    let m = data.n_inputs();
    assert_eq!(x.len(), n, "solve_mpc: state dimension mismatch");
    let horizon = data.horizon;

    // stage-0 constraint: x itself must lie in Z_0
    if !data.tightened.get(0).contains(x, 1e-9) {
        return MpcSolution {
            u_seq: Vec::new(),
            z_seq: Vec::new(),
            nominal_value: f64::INFINITY,
            status: MpcStatus::Infeasible,
            qp_duals: Vec::new(),
        };
    }

    let q_lin = data.qp_lin_map.matvec(x);
    let rhs = data.qp_rhs(x);
    let warm_start = warm
        .filter(|w| w.u_flat.len() == horizon * m)
        .map(|w| WarmStart {
            x: w.u_flat.clone(),
            y: if w.duals.len() == data.rows.rows() {
                w.duals.clone()
            } else {
                vec![0.0; data.rows.rows()]
            },
        });
    let sol = data
        .template
        .solve(&q_lin, &rhs, &data.settings, warm_start.as_ref());

    match sol.status {
        QpStatus::Optimal => {
            let u_seq: Vec<Vec<f64>> = sol.x.chunks(m).map(<[f64]>::to_vec).collect();
            let z_seq = data.rollout(x, &sol.x);
            let nominal_value = sol.objective + data.const_quad.quad_form(x);
            MpcSolution {
                u_seq,
                z_seq,
                nominal_value,
                status: MpcStatus::Optimal,
                qp_duals: sol.duals,
            }
        }
        QpStatus::PrimalInfeasible => MpcSolution {
            u_seq: Vec::new(),
            z_seq: Vec::new(),
            nominal_value: f64::INFINITY,
            status: MpcStatus::Infeasible,
            qp_duals: sol.duals,
        },
        QpStatus::MaxIterations => MpcSolution {
            u_seq: Vec::new(),
            z_seq: Vec::new(),
            nominal_value: f64::NAN,
            status: MpcStatus::Indeterminate,
            qp_duals: sol.duals,
        },
    }
}

pub fn solve_mpc(data: &MpcProblemData, x: &[f64]) -> MpcSolution {
    solve_mpc_with_start(data, x, None)
}

/// The receding-horizon control law: first element of the optimal input
/// sequence. Errors when `x` is outside the feasible set; callers needing
/// the guarded combined law should use the policy layer instead.
pub fn mpc_policy(data: &MpcProblemData, x: &[f64]) -> Result<Vec<f64>, MpcError> {
    let sol = solve_mpc(data, x);
    match sol.status {
        MpcStatus::Optimal => Ok(sol.u_seq[0].clone()),
        MpcStatus::Infeasible => Err(MpcError::Infeasible),
        MpcStatus::Indeterminate => Err(MpcError::Indeterminate),
    }
}

/// The optimal value function: nominal optimum plus the uncertainty
/// constant on the feasible set, infinite outside it.
pub fn value_function(data: &MpcProblemData, x: &[f64]) -> MpcValue {
    let sol = solve_mpc(data, x);
    match sol.status {
        MpcStatus::Optimal => MpcValue::Finite(sol.nominal_value + data.uncertainty_cost),
        MpcStatus::Infeasible => MpcValue::Infeasible,
        MpcStatus::Indeterminate => MpcValue::Indeterminate,
    }
}

/// First-step feedback gain of the unconstrained finite-horizon problem,
/// straight from the condensed quadratic: `u* = -P~^-1 F x`, first block.
/// Used as a cross-check against the Riccati recursion.
pub fn unconstrained_first_gain(data: &MpcProblemData) -> Result<Matrix, MpcError> {
    let n = data.n_states();
    let m = data.n_inputs();
    let chol = cholesky(data.template_quad())?;
    let mut gain = Matrix::zeros(m, n);
    for col in 0..n {
        let f_col: Vec<f64> = (0..data.qp_lin_map.rows())
            .map(|i| data.qp_lin_map.get(i, col))
            .collect();
        let sol = chol_solve(&chol, &f_col);
        for i in 0..m {
            gain.set(i, col, sol[i]);
        }
    }
    Ok(gain)
}

impl MpcProblemData {
    fn template_quad(&self) -> &SymmetricMatrix {
        self.template.p()
    }
}
