//! Chance-constraint tightening via probabilistic reachable sets, and
//! terminal-ingredient synthesis and validation.
//!
//! Half-space offsets are shrunk row-wise by `psi * sqrt(H_j Sigma_i H_j')`
//! where `psi` depends on what is known about the disturbance: the exact
//! Gaussian quantile `Phi^-1(1 - delta/n_c)`, or the distributionally
//! robust factor `sqrt((n_c - delta)/delta)` when only the first two
//! moments are known.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use thiserror::Error;

use crate::linalg::{
    dot, solve_spd, sym_eig, LinalgError, Matrix, SymmetricMatrix,
};
use crate::model::{
    error_step, propagate_covariance, CovarianceSequence, LtiSystem, ModelError, NoiseMode,
    NoiseModel, Polytope,
};
use crate::sim::GaussianSampler;

#[derive(Debug, Error)]
pub enum TighteningError {
    #[error("delta = {delta} out of range for {n_c} rows")]
    DeltaOutOfRange { delta: f64, n_c: usize },
    #[error("probability {0} outside (0, 1)")]
    ProbabilityOutOfRange(f64),
    #[error("origin excluded from tightened set {index}")]
    OriginExcluded { index: usize },
    #[error("terminal set empty (row {row} has nonpositive offset)")]
    TerminalSetEmpty { row: usize },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

// ---------------------------------------------------------------------
// Normal distribution machinery
// ---------------------------------------------------------------------

// Rational Chebyshev approximation of erf/erfc (W. J. Cody, SPECFUN
// CALERF); relative error below 1e-16 in double precision.
const ERF_A: [f64; 5] = [
    3.16112374387056560e0,
    1.13864154151050156e2,
    3.77485237685302021e2,
    3.20937758913846947e3,
    1.85777706184603153e-1,
];
const ERF_B: [f64; 4] = [
    2.36012909523441209e1,
    2.44024637934444173e2,
    1.28261652607737228e3,
    2.84423683343917062e3,
];
const ERF_C: [f64; 9] = [
    5.64188496988670089e-1,
    8.88314979438837594e0,
    6.61191906371416295e1,
    2.98635138197400131e2,
    8.81952221241769090e2,
    1.71204761263407058e3,
    2.05107837782607147e3,
    1.23033935479799725e3,
    2.15311535474403846e-8,
];
const ERF_D: [f64; 8] = [
    1.57449261107098347e1,
    1.17693950891312499e2,
    5.37181101862009858e2,
    1.62138957456669019e3,
    3.29079923573345963e3,
    4.36261909014324716e3,
    3.43936767414372164e3,
    1.23033935480374942e3,
];
const ERF_P: [f64; 6] = [
    3.05326634961232344e-1,
    3.60344899949804439e-1,
    1.25781726111229246e-1,
    1.60837851487422766e-2,
    6.58749161529837803e-4,
    1.63153871373020978e-2,
];
const ERF_Q: [f64; 5] = [
    2.56852019228982242e0,
    1.87295284992346047e0,
    5.27905102951428412e-1,
    6.05183413124413191e-2,
    2.33520497626869185e-3,
];
const INV_SQRT_PI: f64 = 5.6418958354775628695e-1;

/// Complementary error function.
pub fn erfc(x: f64) -> f64 {
    let y = x.abs();
    let result = if y <= 0.46875 {
        return 1.0 - erf(x);
    } else if y <= 4.0 {
        let mut num = ERF_C[8] * y;
        let mut den = y;
        for i in 0..7 {
            num = (num + ERF_C[i]) * y;
            den = (den + ERF_D[i]) * y;
        }
        let ratio = (num + ERF_C[7]) / (den + ERF_D[7]);
        scaled_exp(y) * ratio
    } else {
        let ysq = 1.0 / (y * y);
        let mut num = ERF_P[5] * ysq;
        let mut den = ysq;
        for i in 0..4 {
            num = (num + ERF_P[i]) * ysq;
            den = (den + ERF_Q[i]) * ysq;
        }
        let mut r = ysq * (num + ERF_P[4]) / (den + ERF_Q[4]);
        r = (INV_SQRT_PI - r) / y;
        scaled_exp(y) * r
    };
    if x < 0.0 {
        2.0 - result
    } else {
        result
    }
}

// exp(-y^2) split to avoid cancellation, as in CALERF
fn scaled_exp(y: f64) -> f64 {
    let ysq = (y * 16.0).trunc() / 16.0;
    let del = (y - ysq) * (y + ysq);
    (-ysq * ysq).exp() * (-del).exp()
}

/// Error function.
pub fn erf(x: f64) -> f64 {
    let y = x.abs();
    if y <= 0.46875 {
        let ysq = if y > 1.11e-16 { y * y } else { 0.0 };
        let mut num = ERF_A[4] * ysq;
        let mut den = ysq;
        for i in 0..3 {
            num = (num + ERF_A[i]) * ysq;
            den = (den + ERF_B[i]) * ysq;
        }
        x * (num + ERF_A[3]) / (den + ERF_B[3])
    } else if x < 0.0 {
        erfc(x) - 1.0
    } else {
        1.0 - erfc(x)
    }
}

/// Standard normal CDF via the complementary error function.
pub fn normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

// Acklam's rational approximation for the initial quantile guess.
const ACK_A: [f64; 6] = [
    -39.6968302866538,
    220.946098424521,
    -275.928510446969,
    138.357751867269,
    -30.6647980661472,
    2.50662827745924,
];
const ACK_B: [f64; 5] = [
    -54.4760987982241,
    161.585836858041,
    -155.698979859887,
    66.8013118877197,
    -13.2806815528857,
];
const ACK_C: [f64; 6] = [
    -7.78489400243029e-3,
    -0.322396458041136,
    -2.40075827716184,
    -2.54973253934373,
    4.37466414146497,
    2.93816398269878,
];
const ACK_D: [f64; 4] = [
    7.78469570904146e-3,
    0.32246712907004,
    2.445134137143,
    3.75440866190742,
];

fn quantile_initial(p: f64) -> f64 {
    const P_LOW: f64 = 0.02425;
    if p < P_LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((ACK_C[0] * q + ACK_C[1]) * q + ACK_C[2]) * q + ACK_C[3]) * q + ACK_C[4]) * q
            + ACK_C[5])
            / ((((ACK_D[0] * q + ACK_D[1]) * q + ACK_D[2]) * q + ACK_D[3]) * q + 1.0)
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((ACK_A[0] * r + ACK_A[1]) * r + ACK_A[2]) * r + ACK_A[3]) * r + ACK_A[4]) * r
            + ACK_A[5])
            * q
            / (((((ACK_B[0] * r + ACK_B[1]) * r + ACK_B[2]) * r + ACK_B[3]) * r + ACK_B[4]) * r
                + 1.0)
    } else {
        let q = (-2.0 * (1.0 - p).ln()).sqrt();
        -(((((ACK_C[0] * q + ACK_C[1]) * q + ACK_C[2]) * q + ACK_C[3]) * q + ACK_C[4]) * q
            + ACK_C[5])
            / ((((ACK_D[0] * q + ACK_D[1]) * q + ACK_D[2]) * q + ACK_D[3]) * q + 1.0)
    }
}

/// Standard normal quantile `Phi^-1(p)`: rational initial approximation
/// refined by Halley steps against the erfc-based CDF, giving
/// `|Phi(z) - p| <= 1e-10` over the open unit interval.
pub fn inverse_normal_cdf(p: f64) -> Result<f64, TighteningError> {
    if !(p > 0.0 && p < 1.0) {
        return Err(TighteningError::ProbabilityOutOfRange(p));
    }
    let mut z = quantile_initial(p);
    for _ in 0..3 {
        // Halley refinement; skip in the far tails where exp overflows
        if z * z / 2.0 > 700.0 {
            break;
        }
        let e = normal_cdf(z) - p;
        let u = e * (2.0 * std::f64::consts::PI).sqrt() * (z * z / 2.0).exp();
        z -= u / (1.0 + z * u / 2.0);
    }
    Ok(z)
}

// ---------------------------------------------------------------------
// Tightening factors and tightened sets
// ---------------------------------------------------------------------

/// Row-wise tightening factor for `n_c` half-space constraints at
/// violation probability `delta`.
pub fn tightening_factor(
    mode: NoiseMode,
    delta: f64,
    n_c: usize,
) -> Result<f64, TighteningError> {
    if !(delta > 0.0 && delta < 1.0) || n_c == 0 {
        return Err(TighteningError::DeltaOutOfRange { delta, n_c });
    }
    match mode {
        NoiseMode::ExactGaussian => {
            let p = 1.0 - delta / n_c as f64;
            if p < 0.5 {
                return Err(TighteningError::DeltaOutOfRange { delta, n_c });
            }
            inverse_normal_cdf(p)
        }
        NoiseMode::MomentAmbiguity => Ok(((n_c as f64 - delta) / delta).sqrt()),
    }
}

/// A tightened polytope, with a flag marking loss of the origin-interior
/// property (some offset fell to zero or below).
#[derive(Debug, Clone)]
pub struct TightenedPolytope {
    pub set: Polytope,
    pub origin_excluded: bool,
}

/// Shrinks each offset by `psi * sqrt(H_j Sigma H_j')`.
pub fn tighten(
    state_set: &Polytope,
    sigma: &SymmetricMatrix,
    psi: f64,
) -> Result<TightenedPolytope, TighteningError> {
    if sigma.dim() != state_set.dim() {
        return Err(TighteningError::DimensionMismatch(format!(
            "covariance is {}x{} but the polytope lives in dimension {}",
            sigma.dim(),
            sigma.dim(),
            state_set.dim()
        )));
    }
    let mut offsets = Vec::with_capacity(state_set.n_rows());
    for j in 0..state_set.n_rows() {
        let row = state_set.h().row(j);
        let spread = sigma.quad_form(row).max(0.0).sqrt();
        offsets.push(state_set.offsets()[j] - psi * spread);
    }
    let origin_excluded = offsets.iter().any(|&h| h <= 0.0);
    let set = Polytope::new(state_set.h().clone(), offsets)?;
    Ok(TightenedPolytope { set, origin_excluded })
}

/// The tightened constraint sets `Z_0 .. Z_{N-1}` for one horizon, with
/// the factor and probability level they were built from.
#[derive(Debug, Clone)]
pub struct TightenedSequence {
    sets: Vec<Polytope>,
    psi: f64,
    delta: f64,
}

impl TightenedSequence {
    pub fn sets(&self) -> &[Polytope] {
        &self.sets
    }

    pub fn get(&self, i: usize) -> &Polytope {
        &self.sets[i]
    }

    pub fn len(&self) -> usize {
        self.sets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sets.is_empty()
    }

    pub fn psi(&self) -> f64 {
        self.psi
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }
}

/// Builds `Z_i = tighten(X, Sigma_i, psi)` for `i = 0 .. N-1` from a
/// covariance sequence of length `N+1`. Fails loudly if any tightened set
/// loses the origin: downstream feasibility arguments require
/// `0 in int(Z_i)` for every stage.
pub fn build_tightened_sequence(
    state_set: &Polytope,
    covariances: &CovarianceSequence,
    delta: f64,
    mode: NoiseMode,
) -> Result<TightenedSequence, TighteningError> {
    assert!(covariances.len() >= 2, "covariance sequence too short");
    let psi = tightening_factor(mode, delta, state_set.n_rows())?;
    let mut sets = Vec::with_capacity(covariances.len() - 1);
    for i in 0..covariances.len() - 1 {
        let t = tighten(state_set, covariances.get(i), psi)?;
        if t.origin_excluded {
            return Err(TighteningError::OriginExcluded { index: i });
        }
        sets.push(t.set);
    }
    Ok(TightenedSequence { sets, psi, delta })
}

// ---------------------------------------------------------------------
// Terminal ingredients
// ---------------------------------------------------------------------

/// Terminal cost weight, terminal controller gain, and the level `alpha`
/// of the terminal sublevel-set `{z | z' Qf z <= alpha}`.
#[derive(Debug, Clone)]
pub struct TerminalIngredients {
    pub qf: SymmetricMatrix,
    pub kf: Matrix,
    pub alpha: f64,
}

/// Largest `alpha` such that the ellipsoid `{z | z'Qf z <= alpha}` lies
/// inside the tightened terminal box and keeps `u = -Kf z` inside the
/// input set: `alpha = min_rows c^2 / (g' Qf^-1 g)` over all half-spaces
/// `g'z <= c` (state rows directly, input rows mapped through the
/// terminal controller).
pub fn terminal_level(
    qf: &SymmetricMatrix,
    kf: &Matrix,
    terminal_box: &Polytope,
    input_set: &Polytope,
) -> Result<f64, TighteningError> {
    let n = qf.dim();
    if terminal_box.dim() != n || kf.cols() != n || kf.rows() != input_set.dim() {
        return Err(TighteningError::DimensionMismatch(
            "terminal_level: inconsistent dimensions".to_string(),
        ));
    }
    let mut rows: Vec<(Vec<f64>, f64)> = Vec::new();
    for j in 0..terminal_box.n_rows() {
        rows.push((terminal_box.h().row(j).to_vec(), terminal_box.offsets()[j]));
    }
    for j in 0..input_set.n_rows() {
        // H^u u <= h^u with u = -Kf z  =>  (-H^u_j Kf) z <= h^u_j
        let hu = input_set.h().row(j);
        let mut g = vec![0.0; n];
        for col in 0..n {
            let mut acc = 0.0;
            for (i, &hui) in hu.iter().enumerate() {
                acc += hui * kf.get(i, col);
            }
            g[col] = -acc;
        }
        rows.push((g, input_set.offsets()[j]));
    }

    let mut alpha = f64::INFINITY;
    for (row_idx, (g, c)) in rows.iter().enumerate() {
        let norm_sq = {
            let y = solve_spd(qf, g)?;
            dot(g, &y)
        };
        if norm_sq <= 1e-14 {
            // zero row after mapping (e.g. zero gain); constrains nothing
            // as long as the offset is positive
            if *c <= 0.0 {
                return Err(TighteningError::TerminalSetEmpty { row: row_idx });
            }
            continue;
        }
        if *c <= 0.0 {
            return Err(TighteningError::TerminalSetEmpty { row: row_idx });
        }
        alpha = alpha.min(c * c / norm_sq);
    }
    if !alpha.is_finite() || alpha <= 0.0 {
        return Err(TighteningError::TerminalSetEmpty { row: 0 });
    }
    Ok(alpha)
}

/// Validation report for the terminal ingredients: input admissibility of
/// the terminal controller on the terminal set, forward invariance, and
/// the local Lyapunov decrease of the terminal cost.
#[derive(Debug, Clone)]
pub struct TerminalReport {
    pub input_admissible: bool,
    pub invariant: bool,
    pub cost_decrease: bool,
    /// `lambda_max((A-BKf)'Qf(A-BKf) - Qf + Q + Kf'RKf)`; at most ~0 when
    /// the decrease condition holds, exactly 0 for the LQR fixed point.
    pub decrease_eigenvalue: f64,
}

impl TerminalReport {
    pub fn all_hold(&self) -> bool {
        self.input_admissible && self.invariant && self.cost_decrease
    }
}

/// Deterministic points on the boundary of `{z | z'Q z = level}`:
/// angle-uniform in whitened coordinates for 2-D, a fixed-seed direction
/// set otherwise.
pub fn ellipsoid_boundary_points(
    q: &SymmetricMatrix,
    level: f64,
    count: usize,
) -> Result<Vec<Vec<f64>>, TighteningError> {
    let n = q.dim();
    let (vals, vecs) = sym_eig(q)?;
    if vals[0] <= 0.0 {
        return Err(TighteningError::DimensionMismatch(
            "ellipsoid matrix must be positive definite".to_string(),
        ));
    }
    let dirs = unit_directions(n, count);
    let scale = level.max(0.0).sqrt();
    let mut points = Vec::with_capacity(dirs.len());
    for u in dirs {
        // z = sqrt(level) * Q^{-1/2} u
        let mut z = vec![0.0; n];
        for i in 0..n {
            let mut acc = 0.0;
            for k in 0..n {
                // Q^{-1/2} = V diag(1/sqrt(l)) V'
                let mut vu = 0.0;
                for j in 0..n {
                    vu += vecs.get(j, k) * u[j];
                }
                acc += vecs.get(i, k) / vals[k].sqrt() * vu;
            }
            z[i] = scale * acc;
        }
        points.push(z);
    }
    Ok(points)
}

fn unit_directions(n: usize, count: usize) -> Vec<Vec<f64>> {
    if n == 1 {
        return vec![vec![1.0], vec![-1.0]];
    }
    if n == 2 {
        return (0..count)
            .map(|k| {
                let t = 2.0 * std::f64::consts::PI * k as f64 / count as f64;
                vec![t.cos(), t.sin()]
            })
            .collect();
    }
    // fixed-seed directions for higher dimensions
    let mut rng = ChaCha12Rng::seed_from_u64(0x5350_4843);
    let mut dirs = Vec::with_capacity(count);
    use rand::Rng;
    while dirs.len() < count {
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0f64)).collect();
        let nrm = dot(&v, &v).sqrt();
        if nrm > 1e-3 {
            dirs.push(v.iter().map(|x| x / nrm).collect());
        }
    }
    dirs
}

/// Checks Assumption-style terminal conditions: (i) `-Kf z` stays in the
/// input set on the terminal ellipsoid (exact support-function test plus
/// boundary samples), (ii) the ellipsoid is forward invariant under
/// `A - B Kf` (implied by (iii) for sublevel sets; verified on samples),
/// and (iii) the terminal cost decreases by at least the stage cost.
pub fn validate_terminal(
    ingredients: &TerminalIngredients,
    sys: &LtiSystem,
    q: &SymmetricMatrix,
    r: &SymmetricMatrix,
    input_set: &Polytope,
) -> Result<TerminalReport, TighteningError> {
    let qf = &ingredients.qf;
    let kf = &ingredients.kf;
    let alpha = ingredients.alpha;
    let n = qf.dim();

    // (iii) matrix decrease condition
    let closed = sys.a().sub(&sys.b().matmul(kf));
    let resid = SymmetricMatrix::symmetrized(
        closed
            .transpose()
            .matmul(qf.as_matrix())
            .matmul(&closed)
            .sub(qf.as_matrix())
            .add(q.as_matrix())
            .add(&kf.transpose().matmul(r.as_matrix()).matmul(kf)),
    )?;
    let decrease_eigenvalue = resid.max_eigenvalue()?;
    let cost_decrease = decrease_eigenvalue <= 1e-8;

    // (i) exact support-function test on mapped input rows
    let mut input_admissible = true;
    for j in 0..input_set.n_rows() {
        let hu = input_set.h().row(j);
        let mut g = vec![0.0; n];
        for col in 0..n {
            let mut acc = 0.0;
            for (i, &hui) in hu.iter().enumerate() {
                acc += hui * kf.get(i, col);
            }
            g[col] = -acc;
        }
        let norm_sq = dot(&g, &solve_spd(qf, &g)?);
        if (alpha * norm_sq).sqrt() > input_set.offsets()[j] + 1e-9 {
            input_admissible = false;
        }
    }

    // boundary samples back the exact tests
    let mut invariant = true;
    for z in ellipsoid_boundary_points(qf, alpha, 360)? {
        let u: Vec<f64> = kf.matvec(&z).iter().map(|v| -v).collect();
        if !input_set.contains(&u, 1e-9) {
            input_admissible = false;
        }
        let next = closed.matvec(&z);
        if qf.quad_form(&next) > alpha * (1.0 + 1e-9) {
            invariant = false;
        }
    }

    Ok(TerminalReport {
        input_admissible,
        invariant,
        cost_decrease,
        decrease_eigenvalue,
    })
}

// ---------------------------------------------------------------------
// Empirical probabilistic reachable set check
// ---------------------------------------------------------------------

/// Monte Carlo estimate of `P[e_i in R_i]`: the fraction of simulated
/// error trajectories (`e_0 = 0`) whose step-`i` error satisfies every
/// tightening offset `H_j e_i <= psi * sqrt(H_j Sigma_i H_j')`.
pub fn empirical_prs_check(
    noise: &NoiseModel,
    sys: &LtiSystem,
    step_index: usize,
    psi: f64,
    state_set: &Polytope,
    trials: usize,
    seed: u64,
) -> Result<f64, TighteningError> {
    assert!(trials >= 10_000, "empirical_prs_check needs at least 1e4 trials");
    let horizon = step_index.max(1);
    let covs = propagate_covariance(sys, noise, horizon)?;
    let sigma_i = covs.get(step_index);
    let thresholds: Vec<f64> = (0..state_set.n_rows())
        .map(|j| psi * sigma_i.quad_form(state_set.h().row(j)).max(0.0).sqrt())
        .collect();

    let sampler = GaussianSampler::new(noise)
        .map_err(|e| TighteningError::DimensionMismatch(e.to_string()))?;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let n = sys.n_states();
    let mut hits = 0usize;
    for _ in 0..trials {
        let mut e = vec![0.0; n];
        for _ in 0..step_index {
            let w = sampler.sample(&mut rng);
            e = error_step(sys, &e, &w)?;
        }
        let inside = (0..state_set.n_rows())
            .all(|j| dot(state_set.h().row(j), &e) <= thresholds[j]);
        if inside {
            hits += 1;
        }
    }
    Ok(hits as f64 / trials as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::solve_dare;
    use crate::oracles::normal_cdf_quadrature;

    fn paper_system() -> LtiSystem {
        LtiSystem::new(
            Matrix::from_rows(&[vec![0.924, -0.100], vec![0.050, 1.000]]).unwrap(),
            Matrix::from_rows(&[vec![0.025], vec![0.000]]).unwrap(),
            0.05,
        )
        .unwrap()
    }

    fn paper_noise() -> NoiseModel {
        NoiseModel::new(
            SymmetricMatrix::from_diag(&[0.005, 0.0075]).unwrap(),
            NoiseMode::ExactGaussian,
        )
        .unwrap()
    }

    fn state_box() -> Polytope {
        Polytope::from_box(&[-1.0, -2.0], &[12.0, 4.0]).unwrap()
    }

    #[test]
    fn quantile_median_is_zero() {
        assert_eq!(inverse_normal_cdf(0.5).unwrap(), 0.0);
    }

    #[test]
    fn quantile_high_precision_values() {
        // frozen references accurate to ~1e-16
        let z = inverse_normal_cdf(0.975).unwrap();
        assert!((z - 1.9599639845400542).abs() < 1e-12, "{z}");
        let z = inverse_normal_cdf(0.9625).unwrap();
        assert!((z - 1.7804643416920255).abs() < 1e-12, "{z}");
    }

    #[test]
    fn quantile_round_trips_through_quadrature_cdf() {
        for &p in &[1e-6, 0.001, 0.02425, 0.3, 0.5, 0.7, 0.9625, 0.999, 1.0 - 1e-6] {
            let z = inverse_normal_cdf(p).unwrap();
            let back = normal_cdf_quadrature(z);
            assert!((back - p).abs() <= 1e-10, "p={p}: Phi(z)={back}");
        }
    }

    #[test]
    fn quantile_symmetry_on_grid() {
        for k in 1..100 {
            let p = k as f64 / 100.0;
            let a = inverse_normal_cdf(p).unwrap();
            let b = inverse_normal_cdf(1.0 - p).unwrap();
            assert!((a + b).abs() <= 1e-10, "p={p}: {a} vs {b}");
        }
    }

    #[test]
    fn quantile_rejects_bad_probability() {
        assert!(inverse_normal_cdf(0.0).is_err());
        assert!(inverse_normal_cdf(1.0).is_err());
        assert!(inverse_normal_cdf(-0.2).is_err());
    }

    #[test]
    fn erfc_matches_quadrature_cdf() {
        for &z in &[-8.0, -5.0, -2.0, -0.3, 0.0, 0.2, 1.0, 1.7804643416920255, 3.0, 6.0] {
            assert!((normal_cdf(z) - normal_cdf_quadrature(z)).abs() < 1e-12, "z={z}");
        }
    }

    #[test]
    fn tightening_factor_reference_values() {
        let g = tightening_factor(NoiseMode::ExactGaussian, 0.15, 4).unwrap();
        assert!((g - 1.7804643416920255).abs() < 1e-10, "{g}");
        let dr = tightening_factor(NoiseMode::MomentAmbiguity, 0.15, 4).unwrap();
        assert!((dr - 5.066228051190221).abs() < 1e-10, "{dr}");
        // median case: psi = 0
        let z = tightening_factor(NoiseMode::ExactGaussian, 0.5, 1).unwrap();
        assert_eq!(z, 0.0);
    }

    #[test]
    fn tightening_factor_rejects_out_of_range() {
        assert!(tightening_factor(NoiseMode::ExactGaussian, 0.0, 4).is_err());
        assert!(tightening_factor(NoiseMode::ExactGaussian, 1.0, 4).is_err());
        // delta/n_c > 1/2 would need a negative factor
        assert!(tightening_factor(NoiseMode::ExactGaussian, 0.9, 1).is_err());
        assert!(tightening_factor(NoiseMode::MomentAmbiguity, 0.15, 0).is_err());
    }

    #[test]
    fn ambiguity_factor_dominates_gaussian_on_grid() {
        for n_c in [1usize, 2, 4, 8, 16] {
            for k in 1..10 {
                let delta = k as f64 * 0.05; // up to 0.45
                let g = tightening_factor(NoiseMode::ExactGaussian, delta, n_c).unwrap();
                let dr = tightening_factor(NoiseMode::MomentAmbiguity, delta, n_c).unwrap();
                assert!(dr > g, "delta={delta}, n_c={n_c}: {dr} <= {g}");
            }
        }
    }

    #[test]
    fn tighten_zero_covariance_is_identity() {
        let x = state_box();
        let t = tighten(&x, &SymmetricMatrix::zeros(2), 1.7805).unwrap();
        assert_eq!(t.set.offsets(), x.offsets());
        assert!(!t.origin_excluded);
        let t0 = tighten(&x, paper_noise().sigma_w(), 0.0).unwrap();
        assert_eq!(t0.set.offsets(), x.offsets());
    }

    #[test]
    fn tighten_reference_arithmetic() {
        // row (x1 <= 12) with Sigma = Sigma_w and psi = Phi^-1(0.9625)
        let x = state_box();
        let psi = 1.7804643416920255;
        let t = tighten(&x, paper_noise().sigma_w(), psi).unwrap();
        let expect = 12.0 - psi * 0.005f64.sqrt();
        assert!((t.set.offsets()[0] - expect).abs() < 1e-12);
        assert!((expect - 11.8741).abs() < 1e-4);
    }

    #[test]
    fn tighten_monotone_in_loewner_order() {
        let x = state_box();
        let small = SymmetricMatrix::from_diag(&[0.004, 0.006]).unwrap();
        let large = SymmetricMatrix::from_diag(&[0.006, 0.009]).unwrap();
        let psi = 1.7805;
        let ts = tighten(&x, &small, psi).unwrap();
        let tl = tighten(&x, &large, psi).unwrap();
        for j in 0..x.n_rows() {
            assert!(ts.set.offsets()[j] >= tl.set.offsets()[j]);
        }
    }

    #[test]
    fn tighten_flags_origin_loss() {
        let x = Polytope::from_box(&[-0.01, -0.01], &[0.01, 0.01]).unwrap();
        let t = tighten(&x, paper_noise().sigma_w(), 1.7805).unwrap();
        assert!(t.origin_excluded);
    }

    #[test]
    fn sequence_single_step_is_original_set() {
        let sys = paper_system();
        let noise = paper_noise();
        let covs = propagate_covariance(&sys, &noise, 1).unwrap();
        let seq =
            build_tightened_sequence(&state_box(), &covs, 0.15, NoiseMode::ExactGaussian).unwrap();
        assert_eq!(seq.len(), 1);
        assert_eq!(seq.get(0).offsets(), state_box().offsets());
    }

    #[test]
    fn sequence_offsets_nonincreasing_and_origin_kept() {
        let sys = paper_system();
        let noise = paper_noise();
        let covs = propagate_covariance(&sys, &noise, 10).unwrap();
        let seq =
            build_tightened_sequence(&state_box(), &covs, 0.15, NoiseMode::ExactGaussian).unwrap();
        assert_eq!(seq.len(), 10);
        for i in 0..seq.len() - 1 {
            for j in 0..4 {
                assert!(seq.get(i).offsets()[j] >= seq.get(i + 1).offsets()[j] - 1e-15);
            }
        }
        for i in 0..seq.len() {
            assert!(seq.get(i).origin_interior(), "set {i} lost the origin");
        }
    }

    #[test]
    fn sequence_fails_loudly_when_origin_lost() {
        let sys = paper_system();
        let noise = paper_noise();
        let covs = propagate_covariance(&sys, &noise, 5).unwrap();
        let tiny = Polytope::from_box(&[-0.05, -0.05], &[0.05, 0.05]).unwrap();
        assert!(matches!(
            build_tightened_sequence(&tiny, &covs, 0.15, NoiseMode::ExactGaussian),
            Err(TighteningError::OriginExcluded { .. })
        ));
    }

    #[test]
    fn terminal_level_unit_cases() {
        // Qf = I, single constraint z1 <= 1, no input rows
        let qf = SymmetricMatrix::identity(2);
        let kf = Matrix::zeros(1, 2);
        let tb = Polytope::new(
            Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap(),
            vec![1.0],
        )
        .unwrap();
        let u = Polytope::from_box(&[-10.0], &[10.0]).unwrap();
        let alpha = terminal_level(&qf, &kf, &tb, &u).unwrap();
        assert!((alpha - 1.0).abs() < 1e-12);

        // Qf = diag(4, 1), z1 <= 1: support-function formula gives 4
        let qf = SymmetricMatrix::from_diag(&[4.0, 1.0]).unwrap();
        let alpha = terminal_level(&qf, &kf, &tb, &u).unwrap();
        assert!((alpha - 4.0).abs() < 1e-12);
    }

    #[test]
    fn terminal_level_rejects_empty_box() {
        let qf = SymmetricMatrix::identity(1);
        let kf = Matrix::zeros(1, 1);
        let tb = Polytope::new(Matrix::from_rows(&[vec![1.0]]).unwrap(), vec![-0.5]).unwrap();
        let u = Polytope::from_box(&[-1.0], &[1.0]).unwrap();
        assert!(matches!(
            terminal_level(&qf, &kf, &tb, &u),
            Err(TighteningError::TerminalSetEmpty { .. })
        ));
    }

    #[test]
    fn terminal_level_scales_with_qf() {
        let sys = paper_system();
        let noise = paper_noise();
        let q = SymmetricMatrix::from_diag(&[2.0, 0.1]).unwrap();
        let r = SymmetricMatrix::from_diag(&[1.0]).unwrap();
        let (qf, kf) = solve_dare(sys.a(), sys.b(), &q, &r).unwrap();
        let covs = propagate_covariance(&sys, &noise, 10).unwrap();
        let psi = tightening_factor(NoiseMode::ExactGaussian, 0.15, 4).unwrap();
        let tb = tighten(&state_box(), covs.last(), psi).unwrap().set;
        let u = Polytope::from_box(&[-37.0], &[37.0]).unwrap();
        let alpha = terminal_level(&qf, &kf, &tb, &u).unwrap();
        assert!(alpha > 0.0);
        let qf_scaled = SymmetricMatrix::symmetrized(qf.as_matrix().scale(3.0)).unwrap();
        let alpha_scaled = terminal_level(&qf_scaled, &kf, &tb, &u).unwrap();
        assert!((alpha_scaled / alpha - 3.0).abs() < 1e-9);
    }

    #[test]
    fn terminal_ellipsoid_inside_box_by_sampling() {
        let sys = paper_system();
        let noise = paper_noise();
        let q = SymmetricMatrix::from_diag(&[2.0, 0.1]).unwrap();
        let r = SymmetricMatrix::from_diag(&[1.0]).unwrap();
        let (qf, kf) = solve_dare(sys.a(), sys.b(), &q, &r).unwrap();
        let covs = propagate_covariance(&sys, &noise, 10).unwrap();
        let psi = tightening_factor(NoiseMode::ExactGaussian, 0.15, 4).unwrap();
        let tb = tighten(&state_box(), covs.last(), psi).unwrap().set;
        let u = Polytope::from_box(&[-37.0], &[37.0]).unwrap();
        let alpha = terminal_level(&qf, &kf, &tb, &u).unwrap();
        for z in ellipsoid_boundary_points(&qf, alpha, 360).unwrap() {
            assert!(tb.contains(&z, 1e-9), "boundary point {z:?} escapes the box");
        }
    }

    #[test]
    fn validate_terminal_on_lqr_synthesis() {
        let sys = paper_system();
        let noise = paper_noise();
        let q = SymmetricMatrix::from_diag(&[2.0, 0.1]).unwrap();
        let r = SymmetricMatrix::from_diag(&[1.0]).unwrap();
        let (qf, kf) = solve_dare(sys.a(), sys.b(), &q, &r).unwrap();
        let covs = propagate_covariance(&sys, &noise, 10).unwrap();
        let psi = tightening_factor(NoiseMode::ExactGaussian, 0.15, 4).unwrap();
        let tb = tighten(&state_box(), covs.last(), psi).unwrap().set;
        let u = Polytope::from_box(&[-37.0], &[37.0]).unwrap();
        let alpha = terminal_level(&qf, &kf, &tb, &u).unwrap();
        let ing = TerminalIngredients { qf, kf, alpha };
        let report = validate_terminal(&ing, &sys, &q, &r, &u).unwrap();
        assert!(report.all_hold(), "{report:?}");
        assert!(report.decrease_eigenvalue.abs() <= 1e-8);

        // sublevel sets nest: half the level still passes everything
        let smaller = TerminalIngredients { alpha: ing.alpha * 0.5, ..ing };
        assert!(validate_terminal(&smaller, &sys, &q, &r, &u).unwrap().all_hold());
    }

    #[test]
    fn validate_terminal_lyapunov_controller_variant() {
        // Kf = 0 with Qf solving A'QfA - Qf = -Q: decrease holds with the
        // R-term vanishing
        let sys = paper_system();
        let q = SymmetricMatrix::from_diag(&[2.0, 0.1]).unwrap();
        let r = SymmetricMatrix::from_diag(&[1.0]).unwrap();
        let qf = crate::linalg::solve_dlyap(sys.a(), &q).unwrap();
        let kf = Matrix::zeros(1, 2);
        let u = Polytope::from_box(&[-37.0], &[37.0]).unwrap();
        let ing = TerminalIngredients { qf, kf, alpha: 1.0 };
        let report = validate_terminal(&ing, &sys, &q, &r, &u).unwrap();
        assert!(report.cost_decrease, "{report:?}");
        assert!(report.input_admissible);
    }

    #[test]
    fn prs_check_huge_psi_covers_everything() {
        let frac = empirical_prs_check(
            &paper_noise(),
            &paper_system(),
            3,
            10.0,
            &state_box(),
            10_000,
            42,
        )
        .unwrap();
        assert!(frac > 0.999, "{frac}");
    }

    #[test]
    fn prs_check_gaussian_coverage_is_conservative() {
        let noise = paper_noise();
        let sys = paper_system();
        let psi = tightening_factor(NoiseMode::ExactGaussian, 0.15, 4).unwrap();
        let trials = 100_000;
        for i in [1usize, 3, 10] {
            let frac = empirical_prs_check(&noise, &sys, i, psi, &state_box(), trials, 7).unwrap();
            let se = (0.15f64 * 0.85 / trials as f64).sqrt();
            assert!(
                frac >= 0.85 - 3.0 * se,
                "step {i}: coverage {frac} below 1 - delta"
            );
        }
    }

    #[test]
    fn prs_check_ambiguity_dominates_gaussian() {
        let noise = paper_noise();
        let sys = paper_system();
        let pg = tightening_factor(NoiseMode::ExactGaussian, 0.15, 4).unwrap();
        let pa = tightening_factor(NoiseMode::MomentAmbiguity, 0.15, 4).unwrap();
        let fg = empirical_prs_check(&noise, &sys, 5, pg, &state_box(), 20_000, 99).unwrap();
        let fa = empirical_prs_check(&noise, &sys, 5, pa, &state_box(), 20_000, 99).unwrap();
        assert!(fa >= fg, "ambiguity coverage {fa} below gaussian {fg}");
    }
}
