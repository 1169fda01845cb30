//! Convex QP solver with trustworthy optimality and primal-infeasibility
//! verdicts, for problems of the form
//!
//! ```text
//!     minimize    1/2 x' P x + q' x
//!     subject to  A x <= b
//! ```
//!
//! Architecture: an active-set polishing loop (incremental Schur
//! complements against a cached factor of `P`) handles warm-started and
//! interior solves in a handful of small dense solves; a strictly convex
//! phase-1 problem resolves feasibility questions and extracts Farkas
//! certificates; ADMM operator splitting with over-relaxation and an
//! adaptive penalty is the convergent fallback whenever the direct paths
//! stall. Every optimal verdict is checked against the unregularized KKT
//! conditions, and every infeasibility verdict carries a certificate that
//! is re-verified before it is reported.

use thiserror::Error;

use crate::linalg::{
    chol_solve, cholesky, dot, max_abs, sym_eig, Matrix, SymmetricMatrix,
};

#[derive(Debug, Error)]
pub enum QpError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("non-finite problem data")]
    NonFinite,
    #[error("cost matrix is not PSD (eigenvalue {value:e})")]
    NotPsd { value: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpStatus {
    Optimal,
    PrimalInfeasible,
    MaxIterations,
}

/// Three-valued feasibility verdict. `Indeterminate` is reported when the
/// solver exhausts its iteration budget without either a solution or a
/// certificate; callers must not coerce it to "infeasible".
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Feasibility {
    Feasible,
    Infeasible,
    Indeterminate,
}

#[derive(Debug, Clone)]
pub struct QpSettings {
    pub abs_tol: f64,
    pub rel_tol: f64,
    pub max_iter: usize,
}

impl Default for QpSettings {
    fn default() -> Self {
        QpSettings {
            abs_tol: 1e-8,
            rel_tol: 1e-9,
            max_iter: 200_000,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct WarmStart {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub status: QpStatus,
    pub x: Vec<f64>,
    pub objective: f64,
    pub duals: Vec<f64>,
    pub primal_residual: f64,
    pub dual_residual: f64,
    /// Verified Farkas certificate when `status == PrimalInfeasible`:
    /// `y >= 0`, `||A' y||_inf <= eps_c`, `b' y < -eps_c`.
    pub certificate: Option<Vec<f64>>,
    pub iterations: usize,
}

#[derive(Debug, Clone)]
pub struct QpProblem {
    p: SymmetricMatrix,
    q: Vec<f64>,
    a_in: Matrix,
    b_in: Vec<f64>,
}

impl QpProblem {
    pub fn new(
        p: SymmetricMatrix,
        q: Vec<f64>,
        a_in: Matrix,
        b_in: Vec<f64>,
    ) -> Result<Self, QpError> {
        let n = p.dim();
        if q.len() != n || a_in.cols() != n || a_in.rows() != b_in.len() {
            return Err(QpError::DimensionMismatch(format!(
                "P {n}x{n}, q {}, A {}x{}, b {}",
                q.len(),
                a_in.rows(),
                a_in.cols(),
                b_in.len()
            )));
        }
        if q.iter().chain(b_in.iter()).any(|v| !v.is_finite()) {
            return Err(QpError::NonFinite);
        }
        Ok(QpProblem { p, q, a_in, b_in })
    }

    pub fn p(&self) -> &SymmetricMatrix {
        &self.p
    }

    pub fn q(&self) -> &[f64] {
        &self.q
    }

    pub fn a_in(&self) -> &Matrix {
        &self.a_in
    }

    pub fn b_in(&self) -> &[f64] {
        &self.b_in
    }

    pub fn solve(&self, settings: &QpSettings) -> Result<QpSolution, QpError> {
        self.solve_with_start(settings, None)
    }

    pub fn solve_with_start(
        &self,
        settings: &QpSettings,
        warm: Option<&WarmStart>,
    ) -> Result<QpSolution, QpError> {
        let template = QpTemplate::new(self.p.clone(), self.a_in.clone())?;
        Ok(template.solve(&self.q, &self.b_in, settings, warm))
    }
}

/// Checks whether `{x | A x <= b}` is nonempty by solving the
/// zero-objective QP over those constraints.
pub fn check_feasible(a_in: &Matrix, b_in: &[f64]) -> Result<Feasibility, QpError> {
    let template = QpTemplate::new(SymmetricMatrix::zeros(a_in.cols()), a_in.clone())?;
    Ok(template.feasibility(b_in, &QpSettings::default()))
}

/// Verifies a Farkas certificate for `A x <= b`: `y >= 0`,
/// `||A' y||_inf <= eps_c` and `b' y < -eps_c` with `eps_c` scaled by the
/// largest constraint row norm.
pub fn verify_certificate(a_in: &Matrix, b_in: &[f64], y: &[f64]) -> bool {
    if y.len() != a_in.rows() || y.iter().any(|&v| v < 0.0 || !v.is_finite()) {
        return false;
    }
    let ymax = max_abs(y);
    if ymax <= 0.0 {
        return false;
    }
    let scaled: Vec<f64> = y.iter().map(|v| v / ymax).collect();
    let a_scale = (0..a_in.rows())
        .map(|i| max_abs(a_in.row(i)))
        .fold(1.0f64, f64::max);
    let b_scale = max_abs(b_in).max(1.0);
    let aty = a_in.matvec_t(&scaled);
    max_abs(&aty) <= CERT_TOL * a_scale && dot(b_in, &scaled) < -CERT_TOL * b_scale
}

const SIGMA: f64 = 1e-6;
const RHO_INIT: f64 = 0.1;
const RHO_MIN: f64 = 1e-6;
const RHO_MAX: f64 = 1e6;
const OVER_RELAX: f64 = 1.6;
const CHECK_INTERVAL: usize = 25;
const CERT_TOL: f64 = 1e-7;
const KKT_REG: f64 = 1e-9;
const MAX_REPAIR_STEPS: usize = 500;

/// Reusable solver state for a fixed `(P, A)` pair; only `q` and `b`
/// change between solves. Receding-horizon controllers keep one template
/// per problem structure.
pub struct QpTemplate {
    p: SymmetricMatrix,
    a: Matrix,
    n: usize,
    m: usize,
    ata: Matrix,
    /// Cholesky of `P + reg I`; backs the Schur-complement active-set
    /// solves and the unconstrained fast path.
    chol_p_reg: Matrix,
    /// Cached `(P + reg I)^-1 a_i` for every constraint row.
    minv_rows: Vec<Vec<f64>>,
    p_is_zero: bool,
    /// Cholesky of `P` itself succeeded: the problem is strictly convex
    /// and the direct active-set path applies.
    p_definite: bool,
}

enum RepairOutcome {
    Solved(QpSolution),
    Stalled,
}

enum Phase1Outcome {
    Feasible { active: Vec<usize> },
    Infeasible { certificate: Vec<f64> },
    Unresolved,
}

impl QpTemplate {
    pub fn new(p: SymmetricMatrix, a: Matrix) -> Result<Self, QpError> {
        let n = p.dim();
        if a.cols() != n {
            return Err(QpError::DimensionMismatch(format!(
                "A has {} columns but P is {n}x{n}",
                a.cols()
            )));
        }
        let scale = p.max_abs().max(1.0);
        let min_eig = sym_eig(&p)
            .map_err(|_| QpError::NonFinite)?
            .0
            .first()
            .copied()
            .unwrap_or(0.0);
        if min_eig < -1e-10 * scale {
            return Err(QpError::NotPsd { value: min_eig });
        }
        let p_definite = cholesky(&p).is_ok();
        let p_reg = KKT_REG * scale;
        let mut p_shift = p.as_matrix().clone();
        for i in 0..n {
            p_shift.set(i, i, p_shift.get(i, i) + p_reg);
        }
        let chol_p_reg = cholesky(&SymmetricMatrix::symmetrized(p_shift).expect("square"))
            .map_err(|_| QpError::NotPsd { value: min_eig })?;
        let ata = a.transpose().matmul(&a);
        let p_is_zero = p.max_abs() == 0.0;
        let minv_rows: Vec<Vec<f64>> = (0..a.rows())
            .map(|i| chol_solve(&chol_p_reg, a.row(i)))
            .collect();
        Ok(QpTemplate {
            m: a.rows(),
            p,
            a,
            n,
            ata,
            chol_p_reg,
            minv_rows,
            p_is_zero,
            p_definite,
        })
    }

    pub fn n_vars(&self) -> usize {
        self.n
    }

    pub fn n_rows(&self) -> usize {
        self.m
    }

    pub fn p(&self) -> &SymmetricMatrix {
        &self.p
    }

    pub fn feasibility(&self, b: &[f64], settings: &QpSettings) -> Feasibility {
        let q = vec![0.0; self.n];
        let sol = self.solve(&q, b, settings, None);
        match sol.status {
            QpStatus::Optimal => Feasibility::Feasible,
            QpStatus::PrimalInfeasible => Feasibility::Infeasible,
            QpStatus::MaxIterations => Feasibility::Indeterminate,
        }
    }

    pub fn solve(
        &self,
        q: &[f64],
        b: &[f64],
        settings: &QpSettings,
        warm: Option<&WarmStart>,
    ) -> QpSolution {
        assert_eq!(q.len(), self.n, "qp solve: q length mismatch");
        assert_eq!(b.len(), self.m, "qp solve: b length mismatch");

        // rows with a zero coefficient vector and negative offset are
        // unsatisfiable; certify directly
        for i in 0..self.m {
            if b[i] < 0.0 && max_abs(self.a.row(i)) == 0.0 {
                let mut cert = vec![0.0; self.m];
                cert[i] = 1.0;
                return QpSolution {
                    status: QpStatus::PrimalInfeasible,
                    x: vec![0.0; self.n],
                    objective: f64::INFINITY,
                    duals: cert.clone(),
                    primal_residual: -b[i],
                    dual_residual: 0.0,
                    certificate: Some(cert),
                    iterations: 0,
                };
            }
        }

        let warm_set: Vec<usize> = warm
            .map(|w| {
                w.y.iter()
                    .enumerate()
                    .filter(|(_, &v)| v > 1e-12)
                    .map(|(i, _)| i)
                    .collect()
            })
            .unwrap_or_default();

        // pure feasibility problem: phase-1 decides directly
        if self.p_is_zero && q.iter().all(|&v| v == 0.0) {
            match self.phase1(b, &warm_set) {
                Phase1Outcome::Feasible { active } => {
                    if let Some(x) = self.feasible_point(b, &active) {
                        let viol =
                            (0..self.m).fold(0.0f64, |acc, i| {
                                acc.max(dot(self.a.row(i), &x) - b[i])
                            });
                        if viol <= settings.abs_tol.max(1e-9) {
                            return QpSolution {
                                status: QpStatus::Optimal,
                                x,
                                objective: 0.0,
                                duals: vec![0.0; self.m],
                                primal_residual: viol.max(0.0),
                                dual_residual: 0.0,
                                certificate: None,
                                iterations: 0,
                            };
                        }
                    }
                }
                Phase1Outcome::Infeasible { certificate } => {
                    return self.infeasible_solution(b, certificate, 0);
                }
                Phase1Outcome::Unresolved => {}
            }
            return self.admm(q, b, settings, warm);
        }

        if self.p_definite {
            // warm-started resolves usually need only a few active-set
            // repairs; bail out early if the set churns (likely
            // infeasible) and let phase-1 decide
            if !warm_set.is_empty() {
                match self.primary_repair(q, b, warm_set.clone(), settings, 32) {
                    RepairOutcome::Solved(sol) => return sol,
                    RepairOutcome::Stalled => {}
                }
            }
            match self.phase1(b, &warm_set) {
                Phase1Outcome::Infeasible { certificate } => {
                    return self.infeasible_solution(b, certificate, 0);
                }
                Phase1Outcome::Feasible { active } => {
                    if let RepairOutcome::Solved(sol) =
                        self.primary_repair(q, b, active, settings, self.n + 8)
                    {
                        return sol;
                    }
                }
                Phase1Outcome::Unresolved => {
                    if warm_set.is_empty() {
                        if let RepairOutcome::Solved(sol) =
                            self.primary_repair(q, b, Vec::new(), settings, self.n + 8)
                        {
                            return sol;
                        }
                    }
                }
            }
        }

        self.admm(q, b, settings, warm)
    }

    fn infeasible_solution(
        &self,
        b: &[f64],
        certificate: Vec<f64>,
        iterations: usize,
    ) -> QpSolution {
        debug_assert!(verify_certificate(&self.a, b, &certificate));
        QpSolution {
            status: QpStatus::PrimalInfeasible,
            x: vec![0.0; self.n],
            objective: f64::INFINITY,
            duals: certificate.clone(),
            primal_residual: f64::INFINITY,
            dual_residual: 0.0,
            certificate: Some(certificate),
            iterations,
        }
    }

    // -----------------------------------------------------------------
    // Active-set repair on the strictly convex problem
    // -----------------------------------------------------------------

    /// Active-set iteration with incremental Schur complements against
    /// the cached factor of `P`: drop the most negative multiplier, add
    /// the most violated row, and accept only once the unregularized KKT
    /// conditions verify. Returns `Stalled` when the set cycles or
    /// exceeds its size bound; the caller falls back to phase-1/ADMM.
    fn primary_repair(
        &self,
        q: &[f64],
        b: &[f64],
        initial: Vec<usize>,
        settings: &QpSettings,
        max_adds: usize,
    ) -> RepairOutcome {
        let mut active = initial;
        active.sort_unstable();
        active.dedup();
        active.retain(|&i| i < self.m);
        if active.len() > self.n {
            active.truncate(self.n);
        }
        let neg_q: Vec<f64> = q.iter().map(|v| -v).collect();
        let t = chol_solve(&self.chol_p_reg, &neg_q);
        let mut minv: Vec<Vec<f64>> = active.iter().map(|&i| self.minv_rows[i].clone()).collect();
        let build_s = |rows: &[usize], cols: &[Vec<f64>]| -> Matrix {
            let w = rows.len();
            let mut s_mat = Matrix::zeros(w, w);
            for i in 0..w {
                let row_i = self.a.row(rows[i]);
                for j in i..w {
                    let v = dot(row_i, &cols[j]);
                    s_mat.set(i, j, v);
                    s_mat.set(j, i, v);
                }
            }
            s_mat
        };
        let mut s_mat = build_s(&active, &minv);

        let feas_tol = settings.abs_tol.max(1e-9 * max_abs(b).max(1.0));
        let mut adds = 0usize;
        for _ in 0..MAX_REPAIR_STEPS {
            let w = active.len();
            let chol_s = if w == 0 {
                None
            } else {
                match self.ridge_cholesky(s_mat.clone()) {
                    Some(l) => Some(l),
                    None => return RepairOutcome::Stalled,
                }
            };
            let (x, nu) = match self.schur_solve(&active, &minv, &t, b, chol_s.as_ref()) {
                Some(sol) => sol,
                None => return RepairOutcome::Stalled,
            };
            // drop rule
            let nu_scale = max_abs(&nu).max(1.0);
            if let Some((worst, _)) = nu
                .iter()
                .enumerate()
                .filter(|(_, &v)| v < -1e-11 * nu_scale)
                .min_by(|a, b| a.1.partial_cmp(b.1).expect("finite duals"))
            {
                active.remove(worst);
                minv.remove(worst);
                s_mat = build_s(&active, &minv);
                continue;
            }
            // add rule
            let ax = self.a.matvec(&x);
            let mut worst_row = usize::MAX;
            let mut worst_viol = feas_tol;
            for i in 0..self.m {
                let v = ax[i] - b[i];
                if v > worst_viol {
                    worst_viol = v;
                    worst_row = i;
                }
            }
            if worst_row == usize::MAX {
                return match self.accept_candidate(
                    q,
                    b,
                    x,
                    &active,
                    &nu,
                    &minv,
                    chol_s.as_ref(),
                    settings,
                ) {
                    Some(sol) => RepairOutcome::Solved(sol),
                    None => RepairOutcome::Stalled,
                };
            }
            adds += 1;
            if w >= self.n || adds > max_adds || active.contains(&worst_row) {
                return RepairOutcome::Stalled;
            }
            let new_col = self.minv_rows[worst_row].clone();
            let mut grown = Matrix::zeros(w + 1, w + 1);
            for r in 0..w {
                for c in 0..w {
                    grown.set(r, c, s_mat.get(r, c));
                }
            }
            for (r, &row) in active.iter().enumerate() {
                let v = dot(self.a.row(row), &new_col);
                grown.set(r, w, v);
                grown.set(w, r, v);
            }
            grown.set(w, w, dot(self.a.row(worst_row), &new_col));
            s_mat = grown;
            active.push(worst_row);
            minv.push(new_col);
            // keep sorted order for stable warm seeds
            let mut order: Vec<usize> = (0..active.len()).collect();
            order.sort_by_key(|&i| active[i]);
            if order.windows(2).any(|p| p[0] > p[1]) {
                let active2: Vec<usize> = order.iter().map(|&i| active[i]).collect();
                let minv2: Vec<Vec<f64>> = order.iter().map(|&i| minv[i].clone()).collect();
                active = active2;
                minv = minv2;
                s_mat = build_s(&active, &minv);
            }
        }
        RepairOutcome::Stalled
    }

    /// Solves the regularized KKT system restricted to the active rows
    /// via the Schur complement `S = A_W P^-1 A_W'`.
    fn schur_solve(
        &self,
        active: &[usize],
        minv: &[Vec<f64>],
        t: &[f64],
        b: &[f64],
        chol_s: Option<&Matrix>,
    ) -> Option<(Vec<f64>, Vec<f64>)> {
        let w = active.len();
        if w == 0 {
            return Some((t.to_vec(), Vec::new()));
        }
        let chol_s = chol_s?;
        let rhs: Vec<f64> = active
            .iter()
            .map(|&row| dot(self.a.row(row), t) - b[row])
            .collect();
        let nu = chol_solve(chol_s, &rhs);
        let mut x = t.to_vec();
        for (col, &nu_j) in minv.iter().zip(&nu) {
            if nu_j != 0.0 {
                for (xi, ci) in x.iter_mut().zip(col) {
                    *xi -= nu_j * ci;
                }
            }
        }
        if x.iter().chain(nu.iter()).any(|v| !v.is_finite()) {
            return None;
        }
        Some((x, nu))
    }

    /// Refines an accepted active-set candidate against the true KKT
    /// system and verifies it at the settings tolerance.
    #[allow(clippy::too_many_arguments)]
    fn accept_candidate(
        &self,
        q: &[f64],
        b: &[f64],
        mut x: Vec<f64>,
        active: &[usize],
        nu: &[f64],
        minv: &[Vec<f64>],
        chol_s: Option<&Matrix>,
        settings: &QpSettings,
    ) -> Option<QpSolution> {
        let mut nu = nu.to_vec();
        for _ in 0..2 {
            // residuals of the unregularized KKT system
            let px = self.p.as_matrix().matvec(&x);
            let mut r1: Vec<f64> = (0..self.n).map(|i| -q[i] - px[i]).collect();
            for (idx, &row) in active.iter().enumerate() {
                let a_row = self.a.row(row);
                for (r, &ar) in r1.iter_mut().zip(a_row) {
                    *r -= ar * nu[idx];
                }
            }
            let r2: Vec<f64> = active
                .iter()
                .map(|&row| b[row] - dot(self.a.row(row), &x))
                .collect();
            let pinv_r1 = chol_solve(&self.chol_p_reg, &r1);
            let dnu = match chol_s {
                Some(l) => {
                    let rhs: Vec<f64> = active
                        .iter()
                        .enumerate()
                        .map(|(i, &row)| dot(self.a.row(row), &pinv_r1) - r2[i])
                        .collect();
                    chol_solve(l, &rhs)
                }
                None => Vec::new(),
            };
            let mut dx = pinv_r1;
            for (col, &d) in minv.iter().zip(&dnu) {
                if d != 0.0 {
                    for (xi, ci) in dx.iter_mut().zip(col) {
                        *xi -= d * ci;
                    }
                }
            }
            for i in 0..self.n {
                x[i] += dx[i];
            }
            for i in 0..nu.len() {
                nu[i] += dnu[i];
            }
        }

        let mut duals = vec![0.0; self.m];
        for (idx, &row) in active.iter().enumerate() {
            if nu[idx] < -1e-9 {
                return None;
            }
            duals[row] = nu[idx].max(0.0);
        }
        let ax = self.a.matvec(&x);
        let primal = (0..self.m)
            .fold(0.0f64, |acc, i| acc.max(ax[i] - b[i]))
            .max(0.0);
        let px = self.p.as_matrix().matvec(&x);
        let aty = self.a.matvec_t(&duals);
        let dual = (0..self.n).fold(0.0f64, |acc, i| acc.max((px[i] + q[i] + aty[i]).abs()));
        if primal > settings.abs_tol || dual > settings.abs_tol {
            return None;
        }
        let objective = 0.5 * dot(&px, &x) + dot(q, &x);
        Some(QpSolution {
            status: QpStatus::Optimal,
            x,
            objective,
            duals,
            primal_residual: primal,
            dual_residual: dual,
            certificate: None,
            iterations: 0,
        })
    }

    // -----------------------------------------------------------------
    // Phase-1 feasibility problem
    // -----------------------------------------------------------------

    /// Strictly convex phase-1 on row-normalized constraints:
    /// `min mu/2 ||u||^2 + 1/2 s^2` subject to `a_i'u - c s <= b_i`,
    /// with the slack column scaled so the Schur complement stays
    /// well-conditioned. A positive optimal slack flags infeasibility;
    /// the active support then seeds an exact Farkas-ray extraction. All
    /// conclusions are re-verified by the caller, so phase-1 only has to
    /// be right often enough to keep work off the ADMM fallback.
    fn phase1(&self, b: &[f64], seed: &[usize]) -> Phase1Outcome {
        const MU: f64 = 1e-8;
        let slack_col = 1.0 / MU.sqrt();

        // normalized rows: unit infinity norm. Structurally zero rows are
        // excluded (factor 0): the caller's precheck already certified
        // them satisfiable, and they carry no information about u.
        let factors: Vec<f64> = (0..self.m)
            .map(|i| {
                let norm = max_abs(self.a.row(i));
                if norm == 0.0 {
                    0.0
                } else {
                    1.0 / norm
                }
            })
            .collect();
        let b_hat: Vec<f64> = (0..self.m).map(|i| b[i] * factors[i]).collect();
        let feas_eps = 1e-9 * max_abs(&b_hat).max(1.0);

        let mut active: Vec<usize> = seed.to_vec();
        active.sort_unstable();
        active.dedup();
        active.retain(|&i| i < self.m && factors[i] > 0.0);
        if active.len() > self.n + 1 {
            active.truncate(self.n + 1);
        }

        for _ in 0..MAX_REPAIR_STEPS {
            let w = active.len();
            // S nu = -b_hat_W with
            // S_ij = f_i f_j a_i'a_j / mu + slack_col^2
            let (u, s_var, nu) = if w == 0 {
                (vec![0.0; self.n], 0.0, Vec::new())
            } else {
                let mut s_mat = Matrix::zeros(w, w);
                for i in 0..w {
                    let fi = factors[active[i]];
                    let row_i = self.a.row(active[i]);
                    for j in i..w {
                        let fj = factors[active[j]];
                        let v = fi * fj * dot(row_i, self.a.row(active[j])) / MU
                            + slack_col * slack_col;
                        s_mat.set(i, j, v);
                        s_mat.set(j, i, v);
                    }
                }
                let chol = match self.ridge_cholesky(s_mat) {
                    Some(l) => l,
                    None => return Phase1Outcome::Unresolved,
                };
                let rhs: Vec<f64> = active.iter().map(|&row| -b_hat[row]).collect();
                let nu = chol_solve(&chol, &rhs);
                // u = -(1/mu) sum nu_j f_j a_j ; sigma = slack_col * sum nu_j
                let mut u = vec![0.0; self.n];
                let mut sigma = 0.0;
                for (idx, &row) in active.iter().enumerate() {
                    let coef = nu[idx] * factors[row] / MU;
                    if coef != 0.0 {
                        for (ui, &ai) in u.iter_mut().zip(self.a.row(row)) {
                            *ui -= coef * ai;
                        }
                    }
                    sigma += nu[idx];
                }
                (u, slack_col * sigma, nu)
            };
            // the constraint slack term, in normalized row units
            let s_norm = slack_col * s_var;
            if u.iter().any(|v| !v.is_finite()) || !s_norm.is_finite() {
                return Phase1Outcome::Unresolved;
            }

            let nu_scale = max_abs(&nu).max(1e-300);
            if let Some((worst, _)) = nu
                .iter()
                .enumerate()
                .filter(|(_, &v)| v < -1e-12 * nu_scale)
                .min_by(|a, b| a.1.partial_cmp(b.1).expect("finite duals"))
            {
                active.remove(worst);
                continue;
            }

            let au = self.a.matvec(&u);
            let mut worst_row = usize::MAX;
            let mut worst_viol = feas_eps;
            for i in 0..self.m {
                if factors[i] == 0.0 {
                    continue;
                }
                let v = factors[i] * au[i] - s_norm - b_hat[i];
                if v > worst_viol {
                    worst_viol = v;
                    worst_row = i;
                }
            }
            if worst_row == usize::MAX {
                // optimum reached; s_norm is the max normalized violation
                if s_norm <= feas_eps.max(1e-7) {
                    return Phase1Outcome::Feasible { active };
                }
                return match self.certificate_nnls(b, &factors) {
                    Some(certificate) => Phase1Outcome::Infeasible { certificate },
                    None => Phase1Outcome::Unresolved,
                };
            }
            if active.len() > self.n || active.contains(&worst_row) {
                return Phase1Outcome::Unresolved;
            }
            let pos = active.partition_point(|&i| i < worst_row);
            active.insert(pos, worst_row);
        }
        Phase1Outcome::Unresolved
    }

    fn ridge_cholesky(&self, s_mat: Matrix) -> Option<Matrix> {
        let w = s_mat.rows();
        let diag_scale = (0..w)
            .fold(0.0f64, |acc, i| acc.max(s_mat.get(i, i)))
            .max(1e-300);
        let mut ridge = 0.0f64;
        for _ in 0..6 {
            let mut shifted = s_mat.clone();
            for i in 0..w {
                shifted.set(i, i, shifted.get(i, i) + ridge);
            }
            if let Ok(l) = cholesky(&SymmetricMatrix::symmetrized(shifted).expect("square")) {
                return Some(l);
            }
            ridge = if ridge == 0.0 { 1e-12 * diag_scale } else { ridge * 100.0 };
        }
        None
    }

    /// Recovers a feasible point from a phase-1 active set: least-norm
    /// point on the face, verified by the caller.
    fn feasible_point(&self, b: &[f64], active: &[usize]) -> Option<Vec<f64>> {
        let t = vec![0.0; self.n];
        let minv: Vec<Vec<f64>> = active.iter().map(|&i| self.minv_rows[i].clone()).collect();
        // solve with the regularized P (P may be zero here): the
        // regularized objective picks the least-norm point on the face
        let w = active.len();
        let chol_s = if w == 0 {
            None
        } else {
            let mut s_mat = Matrix::zeros(w, w);
            for i in 0..w {
                let row_i = self.a.row(active[i]);
                for j in i..w {
                    let v = dot(row_i, &minv[j]);
                    s_mat.set(i, j, v);
                    s_mat.set(j, i, v);
                }
            }
            Some(self.ridge_cholesky(s_mat)?)
        };
        let (x, _nu) = self.schur_solve(active, &minv, &t, b, chol_s.as_ref())?;
        Some(x)
    }

    /// Farkas-ray extraction by nonnegative least squares over all rows:
    /// minimize `||A'y||^2 + kappa^2 (b'y + 1)^2` over `y >= 0` (in
    /// row-normalized units) with a Lawson-Hanson active-set loop driven
    /// by incremental Gram solves, followed by a QR polish of the final
    /// support. For an infeasible system the minimum is zero at a scaled
    /// certificate; the result is mapped back to the original row scaling
    /// and verified before use.
    fn certificate_nnls(&self, b: &[f64], factors: &[f64]) -> Option<Vec<f64>> {
        let b_hat: Vec<f64> = (0..self.m).map(|i| b[i] * factors[i]).collect();
        let kappa = 1.0 / max_abs(&b_hat).max(1.0);

        // column i of the design operator: [f_i a_i ; kappa b_hat_i],
        // target t = [0 ; -1]
        let col_dot = |i: usize, j: usize| -> f64 {
            factors[i] * factors[j] * dot(self.a.row(i), self.a.row(j))
                + kappa * kappa * b_hat[i] * b_hat[j]
        };
        let rhs = |i: usize| -> f64 { -kappa * kappa * b_hat[i] };

        let mut passive: Vec<usize> = Vec::new();
        let mut y_p: Vec<f64> = Vec::new();
        let mut gram = Matrix::zeros(0, 0);
        let rebuild_gram = |rows: &[usize]| -> Matrix {
            let pw = rows.len();
            let mut g = Matrix::zeros(pw, pw);
            for r in 0..pw {
                for c in r..pw {
                    let v = col_dot(rows[r], rows[c]);
                    g.set(r, c, v);
                    g.set(c, r, v);
                }
            }
            g
        };

        for _outer in 0..(self.n + 24) {
            // gradient over the full row set at the current iterate
            let mut head = vec![0.0; self.n];
            let mut tail = 0.0;
            for (idx, &j) in passive.iter().enumerate() {
                let coef = y_p[idx] * factors[j];
                if coef != 0.0 {
                    for (h, &aj) in head.iter_mut().zip(self.a.row(j)) {
                        *h += coef * aj;
                    }
                }
                tail += kappa * b_hat[j] * y_p[idx];
            }
            let a_head = self.a.matvec(&head);
            let mut best = usize::MAX;
            let mut best_grad = 1e-12;
            for i in 0..self.m {
                if factors[i] == 0.0 || passive.contains(&i) {
                    continue;
                }
                let grad = rhs(i) - factors[i] * a_head[i] - kappa * b_hat[i] * tail;
                if grad > best_grad {
                    best_grad = grad;
                    best = i;
                }
            }
            if best == usize::MAX {
                break;
            }
            // grow the Gram by one row/column
            let pw = passive.len();
            let mut grown = Matrix::zeros(pw + 1, pw + 1);
            for r in 0..pw {
                for c in 0..pw {
                    grown.set(r, c, gram.get(r, c));
                }
            }
            for (r, &row) in passive.iter().enumerate() {
                let v = col_dot(row, best);
                grown.set(r, pw, v);
                grown.set(pw, r, v);
            }
            grown.set(pw, pw, col_dot(best, best));
            gram = grown;
            passive.push(best);
            y_p.push(0.0);

            // inner: unconstrained solve on the passive set with step-back
            for _inner in 0..80 {
                let chol = self.ridge_cholesky(gram.clone())?;
                let target: Vec<f64> = passive.iter().map(|&i| rhs(i)).collect();
                let z = chol_solve(&chol, &target);
                if z.iter().all(|&v| v > 0.0) {
                    y_p = z;
                    break;
                }
                let mut alpha = 1.0f64;
                for (r, &zr) in z.iter().enumerate() {
                    if zr <= 0.0 {
                        let denom = y_p[r] - zr;
                        if denom > 0.0 {
                            alpha = alpha.min(y_p[r] / denom);
                        }
                    }
                }
                for (r, &zr) in z.iter().enumerate() {
                    y_p[r] += alpha * (zr - y_p[r]);
                }
                let mut kept_rows = Vec::with_capacity(passive.len());
                let mut kept_vals = Vec::with_capacity(passive.len());
                for (r, &row) in passive.iter().enumerate() {
                    if y_p[r] > 1e-14 {
                        kept_rows.push(row);
                        kept_vals.push(y_p[r]);
                    }
                }
                if kept_rows.len() == passive.len() {
                    break;
                }
                passive = kept_rows;
                y_p = kept_vals;
                gram = rebuild_gram(&passive);
                if passive.is_empty() {
                    break;
                }
            }
        }
        if passive.is_empty() {
            return None;
        }

        // QR polish: the Gram iteration identifies the support but loses
        // half the digits; re-solve the support least-squares directly
        let pw = passive.len();
        let mut design = Matrix::zeros(self.n + 1, pw);
        for (c, &row) in passive.iter().enumerate() {
            for (r, &ar) in self.a.row(row).iter().enumerate() {
                design.set(r, c, factors[row] * ar);
            }
            design.set(self.n, c, kappa * b_hat[row]);
        }
        let mut target = vec![0.0; self.n + 1];
        target[self.n] = -1.0;
        if let Some(z) = crate::linalg::qr_least_squares(&design, &target) {
            if z.iter().all(|&v| v >= -1e-9) {
                y_p = z;
            }
        }

        let mut full = vec![0.0; self.m];
        for (idx, &row) in passive.iter().enumerate() {
            full[row] = (y_p[idx] * factors[row]).max(0.0);
        }
        let ymax = max_abs(&full);
        if ymax <= 0.0 {
            return None;
        }
        for v in &mut full {
            *v /= ymax;
        }
        if verify_certificate(&self.a, b, &full) {
            Some(full)
        } else {
            None
        }
    }

    // -----------------------------------------------------------------
    // ADMM fallback
    // -----------------------------------------------------------------

    fn admm(
        &self,
        q: &[f64],
        b: &[f64],
        settings: &QpSettings,
        warm: Option<&WarmStart>,
    ) -> QpSolution {
        let n = self.n;
        let m = self.m;
        let mut rho = RHO_INIT;
        let mut factor = self.admm_factor(rho);

        let mut x = warm.map_or_else(|| vec![0.0; n], |w| w.x.clone());
        if x.len() != n {
            x = vec![0.0; n];
        }
        let mut z: Vec<f64> = {
            let ax = self.a.matvec(&x);
            ax.iter().zip(b).map(|(&v, &ub)| v.min(ub)).collect()
        };
        let mut y = warm
            .map(|w| w.y.clone())
            .filter(|y| y.len() == m && y.iter().all(|&v| v >= 0.0))
            .unwrap_or_else(|| vec![0.0; m]);

        let mut y_at_last_check = y.clone();

        let mut iter = 0usize;
        while iter < settings.max_iter {
            iter += 1;

            // x-update: (P + sigma I + rho A'A) xt = sigma x - q + A'(rho z - y)
            let mut rhs: Vec<f64> = (0..m).map(|i| rho * z[i] - y[i]).collect();
            rhs = self.a.matvec_t(&rhs);
            for i in 0..n {
                rhs[i] += SIGMA * x[i] - q[i];
            }
            let xt = chol_solve(&factor, &rhs);
            let zt = self.a.matvec(&xt);

            for i in 0..n {
                x[i] = OVER_RELAX * xt[i] + (1.0 - OVER_RELAX) * x[i];
            }
            for i in 0..m {
                let z_pre = OVER_RELAX * zt[i] + (1.0 - OVER_RELAX) * z[i] + y[i] / rho;
                let z_new = z_pre.min(b[i]);
                y[i] = rho * (z_pre - z_new);
                z[i] = z_new;
            }

            if iter % CHECK_INTERVAL != 0 {
                continue;
            }

            let ax = self.a.matvec(&x);
            let r_prim: f64 = (0..m).fold(0.0, |acc, i| acc.max((ax[i] - z[i]).abs()));
            let px = self.p.as_matrix().matvec(&x);
            let aty = self.a.matvec_t(&y);
            let r_dual: f64 = (0..n).fold(0.0, |acc, i| acc.max((px[i] + q[i] + aty[i]).abs()));

            let eps_prim = settings.abs_tol + settings.rel_tol * max_abs(&ax).max(max_abs(&z));
            let eps_dual = settings.abs_tol
                + settings.rel_tol * max_abs(&px).max(max_abs(q)).max(max_abs(&aty));

            // primal infeasibility: accumulated dual direction as a
            // Farkas candidate
            let mut dy: Vec<f64> = (0..m)
                .map(|i| (y[i] - y_at_last_check[i]).max(0.0))
                .collect();
            let dy_max = max_abs(&dy);
            if dy_max > 1e-12 {
                for v in &mut dy {
                    *v /= dy_max;
                }
                if verify_certificate(&self.a, b, &dy) {
                    return QpSolution {
                        status: QpStatus::PrimalInfeasible,
                        x,
                        objective: f64::INFINITY,
                        duals: y,
                        primal_residual: r_prim,
                        dual_residual: r_dual,
                        certificate: Some(dy),
                        iterations: iter,
                    };
                }
            }
            y_at_last_check.copy_from_slice(&y);

            // polish from the current dual estimate once residuals are
            // roughly converged
            let coarse = (settings.abs_tol * 1e4).max(1e-5);
            if self.p_definite && r_prim <= coarse && r_dual <= coarse {
                let guess: Vec<usize> = (0..m)
                    .filter(|&i| y[i] > 1e-10 * max_abs(&y).max(1.0))
                    .collect();
                if let RepairOutcome::Solved(sol) =
                    self.primary_repair(q, b, guess, settings, self.n + 8)
                {
                    return QpSolution { iterations: iter, ..sol };
                }
            }

            if r_prim <= eps_prim && r_dual <= eps_dual {
                let objective = 0.5 * dot(&px, &x) + dot(q, &x);
                return QpSolution {
                    status: QpStatus::Optimal,
                    x,
                    objective,
                    duals: y,
                    primal_residual: r_prim,
                    dual_residual: r_dual,
                    certificate: None,
                    iterations: iter,
                };
            }

            // adaptive penalty (OSQP-style): rebalance primal and dual
            // residuals, refactor only on large changes
            let scaled_prim = r_prim / max_abs(&ax).max(max_abs(&z)).max(1.0);
            let scaled_dual = r_dual / max_abs(&px).max(max_abs(q)).max(max_abs(&aty)).max(1.0);
            if scaled_dual > 0.0 && scaled_prim > 0.0 {
                let ratio = (scaled_prim / scaled_dual).sqrt();
                if !(0.2..=5.0).contains(&ratio) {
                    rho = (rho * ratio).clamp(RHO_MIN, RHO_MAX);
                    factor = self.admm_factor(rho);
                }
            }
        }

        let ax = self.a.matvec(&x);
        let r_prim: f64 = (0..m).fold(0.0, |acc, i| acc.max((ax[i] - z[i]).abs()));
        let px = self.p.as_matrix().matvec(&x);
        let aty = self.a.matvec_t(&y);
        let r_dual: f64 = (0..n).fold(0.0, |acc, i| acc.max((px[i] + q[i] + aty[i]).abs()));
        let objective = 0.5 * dot(&px, &x) + dot(q, &x);
        QpSolution {
            status: QpStatus::MaxIterations,
            x,
            objective,
            duals: y,
            primal_residual: r_prim,
            dual_residual: r_dual,
            certificate: None,
            iterations: settings.max_iter,
        }
    }

    fn admm_factor(&self, rho: f64) -> Matrix {
        let n = self.n;
        let mut mat = self.ata.scale(rho).add(self.p.as_matrix());
        for i in 0..n {
            mat.set(i, i, mat.get(i, i) + SIGMA);
        }
        cholesky(&SymmetricMatrix::symmetrized(mat).expect("square"))
            .expect("P + sigma I + rho A'A is positive definite")
    }
}
