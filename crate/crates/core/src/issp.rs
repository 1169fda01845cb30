//! Certification of input-to-state stability in probability: closed-form
//! decrease coefficients for the quadratic Lyapunov function of the
//! autonomous dynamics, the sublevel-set inclusion check against the
//! MPC's feasible set, the horizon noise offset of the controlled
//! decrease bound, recurrence statistics, and the empirical finite-horizon
//! bound check with its calibration split.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::linalg::{
    norm2, solve_dlyap, spectral_radius, sym_eig, LinalgError, Matrix, SymmetricMatrix,
};
use crate::mpc::MpcProblemData;
use crate::policy::in_feasible_set;
use crate::qp::Feasibility;
use crate::sim::TrajectoryRecord;
use crate::tightening::{ellipsoid_boundary_points, TighteningError};

#[derive(Debug, Error)]
pub enum IsspError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("P is not positive definite")]
    NotPositiveDefinite,
    #[error("A'PA - P is not negative definite (max eigenvalue {value:e})")]
    NoDecrease { value: f64 },
    #[error("trajectory records carry no feasibility flags")]
    MissingFeasibilityFlags,
    #[error("empty ensemble")]
    EmptyEnsemble,
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Tightening(#[from] TighteningError),
}

/// Quadratic Lyapunov weight for the autonomous nominal dynamics:
/// `P = solve_dlyap(A, Q_lyap)`, verified to satisfy `A'PA - P < 0`.
pub fn autonomous_lyapunov(
    a: &Matrix,
    q_lyap: &SymmetricMatrix,
) -> Result<SymmetricMatrix, IsspError> {
    let p = solve_dlyap(a, q_lyap)?;
    let decrease = SymmetricMatrix::symmetrized(
        a.transpose().matmul(p.as_matrix()).matmul(a).sub(p.as_matrix()),
    )?;
    let max = decrease.max_eigenvalue()?;
    if max >= 0.0 {
        return Err(IsspError::NoDecrease { value: max });
    }
    Ok(p)
}

/// Linear decrease coefficient of the expected Lyapunov drop:
/// `lambda_min(P - A'PA) / lambda_max(P)`. Both matrices are symmetric
/// PSD, so the squared extreme singular values in the bound reduce to
/// these eigenvalues.
pub fn kappa_coefficient(p: &SymmetricMatrix, a: &Matrix) -> Result<f64, IsspError> {
    if a.rows() != p.dim() || !a.is_square() {
        return Err(IsspError::DimensionMismatch(
            "kappa_coefficient: A and P must share dimensions".to_string(),
        ));
    }
    let (p_vals, _) = sym_eig(p)?;
    if p_vals[0] <= 0.0 {
        return Err(IsspError::NotPositiveDefinite);
    }
    let m = SymmetricMatrix::symmetrized(
        p.as_matrix().sub(&a.transpose().matmul(p.as_matrix()).matmul(a)),
    )?;
    let (m_vals, _) = sym_eig(&m)?;
    if m_vals[0] <= 0.0 {
        return Err(IsspError::NoDecrease { value: -m_vals[0] });
    }
    Ok(m_vals[0] / p_vals[p_vals.len() - 1])
}

/// Constant noise offset of the expected decrease: `Tr(P Sigma_w)`.
pub fn rho_offset(p: &SymmetricMatrix, sigma_w: &SymmetricMatrix) -> f64 {
    p.trace_product(sigma_w)
}

/// Exact conditional expectation of the one-step Lyapunov change of the
/// autonomous disturbed dynamics:
/// `E[V(x+) - V(x) | x] = x'(A'PA - P)x + Tr(P Sigma_w)`.
pub fn expected_decrease_autonomous(
    p: &SymmetricMatrix,
    a: &Matrix,
    sigma_w: &SymmetricMatrix,
    x: &[f64],
) -> f64 {
    let ax = a.matvec(x);
    p.quad_form(&ax) - p.quad_form(x) + rho_offset(p, sigma_w)
}

/// Smallest admissible sublevel parameter:
/// `gamma_min = Tr(P Sigma_w) / kappa`, below which the expected decrease
/// cannot be certified.
pub fn gamma_threshold(
    p: &SymmetricMatrix,
    a: &Matrix,
    sigma_w: &SymmetricMatrix,
) -> Result<f64, IsspError> {
    Ok(rho_offset(p, sigma_w) / kappa_coefficient(p, a)?)
}

/// Result of the sublevel-set inclusion check. A `false` comes with an
/// exact witness; a `true` is exact only up to the sampling density of
/// the ellipsoid boundary.
#[derive(Debug, Clone)]
pub struct SublevelCheck {
    pub holds: bool,
    pub witness: Option<(Vec<f64>, Feasibility)>,
}

/// Samples the boundary of `{x | x'Px = gamma}` (angle-uniform in
/// whitened coordinates) and verifies every sample lies in the MPC's
/// feasible set. Convexity of both sets makes boundary sampling
/// sufficient up to density.
pub fn check_sublevel_in_x0(
    data: &MpcProblemData,
    p: &SymmetricMatrix,
    gamma: f64,
    n_samples: usize,
    _seed: u64,
) -> Result<SublevelCheck, IsspError> {
    assert!(gamma > 0.0, "check_sublevel_in_x0: gamma must be positive");
    for x in ellipsoid_boundary_points(p, gamma, n_samples)? {
        let verdict = in_feasible_set(data, &x);
        if verdict != Feasibility::Feasible {
            return Ok(SublevelCheck {
                holds: false,
                witness: Some((x, verdict)),
            });
        }
    }
    Ok(SublevelCheck { holds: true, witness: None })
}

/// Noise offset of the controlled decrease bound over one horizon:
/// `sum_{i=0}^{N-1} Tr(A^i' Q A^i Sigma_w)`.
pub fn mpc_noise_offset(
    q: &SymmetricMatrix,
    a: &Matrix,
    sigma_w: &SymmetricMatrix,
    horizon: usize,
) -> f64 {
    assert!(horizon >= 1, "mpc_noise_offset: horizon must be >= 1");
    let mut power = Matrix::identity(a.rows());
    let mut acc = 0.0;
    for _ in 0..horizon {
        let term = SymmetricMatrix::symmetrized(
            power.transpose().matmul(q.as_matrix()).matmul(&power),
        )
        .expect("A^i' Q A^i is symmetric");
        acc += term.trace_product(sigma_w);
        power = a.matmul(&power);
    }
    acc
}

/// The certificate bundle assembled by the certification driver.
#[derive(Debug, Clone)]
pub struct IsspCertificate {
    pub p: SymmetricMatrix,
    pub kappa_coeff: f64,
    pub rho: f64,
    pub gamma_min: f64,
    pub gamma: f64,
    pub sublevel_in_x0: bool,
    pub sublevel_witness: Option<Vec<f64>>,
    /// Computable noise-offset part of the controlled decrease bound.
    pub mpc_offset: f64,
}

impl IsspCertificate {
    pub fn certified(&self) -> bool {
        self.sublevel_in_x0 && self.gamma > self.gamma_min && self.kappa_coeff > 0.0
    }
}

/// Runs the full certification chain for an assembled MPC design:
/// Lyapunov weight from `Q_lyap`, decrease coefficients, the sublevel
/// inclusion at `gamma = gamma_factor * gamma_min`, and the horizon noise
/// offset diagnostic.
pub fn build_certificate(
    data: &MpcProblemData,
    q_lyap: &SymmetricMatrix,
    sigma_w: &SymmetricMatrix,
    gamma_factor: f64,
    n_samples: usize,
    seed: u64,
) -> Result<IsspCertificate, IsspError> {
    assert!(gamma_factor > 1.0, "gamma must exceed gamma_min strictly");
    let a = data.sys().a();
    let p = autonomous_lyapunov(a, q_lyap)?;
    let kappa = kappa_coefficient(&p, a)?;
    let rho = rho_offset(&p, sigma_w);
    let gamma_min = rho / kappa;
    let gamma = gamma_factor * gamma_min;
    let sublevel = check_sublevel_in_x0(data, &p, gamma, n_samples, seed)?;
    let mpc_offset = mpc_noise_offset(&data.cost().q, a, sigma_w, data.horizon());
    Ok(IsspCertificate {
        p,
        kappa_coeff: kappa,
        rho,
        gamma_min,
        gamma,
        sublevel_in_x0: sublevel.holds,
        sublevel_witness: sublevel.witness.map(|(x, _)| x),
        mpc_offset,
    })
}

// ---------------------------------------------------------------------
// Recurrence statistics
// ---------------------------------------------------------------------

/// Excursion statistics over an ensemble: each maximal out-of-feasible-set
/// run is one excursion whose hitting time is the number of consecutive
/// steps spent outside. Excursions still outside at the end of a
/// trajectory count as unreturned. Indeterminate verdicts are treated as
/// outside, matching the policy's conservative branch choice.
#[derive(Debug, Clone, Default)]
pub struct RecurrenceStats {
    pub excursions: usize,
    pub hitting_times: BTreeMap<usize, usize>,
    pub max_hitting_time: usize,
    pub unreturned: usize,
}

pub fn recurrence_stats(records: &[TrajectoryRecord]) -> Result<RecurrenceStats, IsspError> {
    if records.is_empty() {
        return Err(IsspError::EmptyEnsemble);
    }
    let mut stats = RecurrenceStats::default();
    for rec in records {
        let flags = rec.feasible.as_ref().ok_or(IsspError::MissingFeasibilityFlags)?;
        let mut out_len = 0usize;
        for &flag in flags {
            if flag == Feasibility::Feasible {
                if out_len > 0 {
                    stats.excursions += 1;
                    *stats.hitting_times.entry(out_len).or_insert(0) += 1;
                    stats.max_hitting_time = stats.max_hitting_time.max(out_len);
                    out_len = 0;
                }
            } else {
                out_len += 1;
            }
        }
        if out_len > 0 {
            stats.excursions += 1;
            *stats.hitting_times.entry(out_len).or_insert(0) += 1;
            stats.max_hitting_time = stats.max_hitting_time.max(out_len);
            stats.unreturned += 1;
        }
    }
    Ok(stats)
}

// ---------------------------------------------------------------------
// Empirical finite-horizon bound (Definition-style check)
// ---------------------------------------------------------------------

/// Exponential envelope `beta(s, i) = scale * s * decay^i`.
#[derive(Debug, Clone, Copy)]
pub struct BetaParams {
    pub scale: f64,
    pub decay: f64,
}

#[derive(Debug, Clone)]
pub struct EmpiricalIssp {
    pub pass: bool,
    pub fraction: f64,
}

/// Fraction of runs satisfying
/// `||x_i|| <= beta(||x_0||, i) + rho_term` for all `i <= m_steps`;
/// passes when the fraction reaches `1 - eps`.
pub fn issp_empirical_check(
    records: &[TrajectoryRecord],
    eps: f64,
    m_steps: usize,
    beta: &BetaParams,
    rho_term: f64,
) -> EmpiricalIssp {
    assert!(beta.scale >= 1.0, "beta scale must be >= 1");
    assert!(beta.decay > 0.0 && beta.decay < 1.0, "beta decay must be in (0, 1)");
    assert!(rho_term >= 0.0, "rho term must be nonnegative");
    assert!((0.0..1.0).contains(&eps), "eps must be in [0, 1)");
    assert!(!records.is_empty(), "empty ensemble");
    let mut ok = 0usize;
    for rec in records {
        let s0 = norm2(&rec.states[0]);
        let last = m_steps.min(rec.states.len() - 1);
        let mut bound_holds = true;
        let mut envelope = beta.scale * s0;
        for state in rec.states.iter().take(last + 1) {
            if norm2(state) > envelope + rho_term + 1e-12 {
                bound_holds = false;
                break;
            }
            envelope *= beta.decay;
        }
        if bound_holds {
            ok += 1;
        }
    }
    let fraction = ok as f64 / records.len() as f64;
    EmpiricalIssp {
        pass: fraction >= 1.0 - eps - 1e-12,
        fraction,
    }
}

/// Calibrates the exponential envelope on an independent ensemble:
/// `decay` is the open-loop spectral radius, `scale` covers the
/// deterministic transient `||A^i|| / decay^i`, and the additive term is
/// the `(1 - eps/2)` quantile of the per-run worst excess, padded by 5%.
pub fn calibrate_issp_bound(
    records: &[TrajectoryRecord],
    a: &Matrix,
    m_steps: usize,
    eps: f64,
) -> Result<(BetaParams, f64), IsspError> {
    if records.is_empty() {
        return Err(IsspError::EmptyEnsemble);
    }
    assert!((0.0..1.0).contains(&eps), "eps must be in [0, 1)");
    let decay = spectral_radius(a)?;
    if decay >= 1.0 {
        return Err(IsspError::Linalg(LinalgError::UnstableA { rho: decay }));
    }
    // deterministic transient envelope: scale >= ||A^i|| / decay^i
    let mut scale = 1.0f64;
    let mut power = Matrix::identity(a.rows());
    let mut decay_pow = 1.0f64;
    for _ in 0..=m_steps {
        let gram = SymmetricMatrix::symmetrized(power.transpose().matmul(&power))
            .expect("Gram matrix is symmetric");
        let op_norm = gram.max_eigenvalue()?.max(0.0).sqrt();
        scale = scale.max(op_norm / decay_pow);
        power = a.matmul(&power);
        decay_pow *= decay;
    }
    let beta = BetaParams { scale, decay };

    let mut excesses: Vec<f64> = records
        .iter()
        .map(|rec| {
            let s0 = norm2(&rec.states[0]);
            let last = m_steps.min(rec.states.len() - 1);
            let mut worst = 0.0f64;
            let mut envelope = beta.scale * s0;
            for state in rec.states.iter().take(last + 1) {
                worst = worst.max(norm2(state) - envelope);
                envelope *= beta.decay;
            }
            worst
        })
        .collect();
    excesses.sort_by(|x, y| x.partial_cmp(y).expect("finite excesses"));
    let q_level = 1.0 - eps / 2.0;
    let idx = ((q_level * excesses.len() as f64).ceil() as usize)
        .clamp(1, excesses.len())
        - 1;
    let rho_term = (excesses[idx] * 1.05).max(0.0);
    Ok((beta, rho_term))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{LtiSystem, NoiseMode, NoiseModel, Polytope};
    use crate::mpc::assemble;
    use crate::sim::{
        monte_carlo, run_rng, Controller, GaussianSampler, InitialStates, RecordOptions,
        SimConfig, SimMode,
    };

    fn paper_a() -> Matrix {
        Matrix::from_rows(&[vec![0.924, -0.100], vec![0.050, 1.000]]).unwrap()
    }

    fn paper_p() -> SymmetricMatrix {
        SymmetricMatrix::from_rows(&[vec![1.093, 0.554], vec![0.554, 2.915]]).unwrap()
    }

    fn paper_sigma_w() -> SymmetricMatrix {
        SymmetricMatrix::from_diag(&[0.005, 0.0075]).unwrap()
    }

    fn eig2(s: &SymmetricMatrix) -> (f64, f64) {
        let tr = s.get(0, 0) + s.get(1, 1);
        let det = s.get(0, 0) * s.get(1, 1) - s.get(0, 1) * s.get(1, 0);
        let disc = (tr * tr - 4.0 * det).max(0.0).sqrt();
        ((tr - disc) / 2.0, (tr + disc) / 2.0)
    }

    #[test]
    fn reference_p_satisfies_the_decrease_assumption() {
        let a = paper_a();
        let p = paper_p();
        let m = SymmetricMatrix::symmetrized(
            a.transpose().matmul(p.as_matrix()).matmul(&a).sub(p.as_matrix()),
        )
        .unwrap();
        assert!(m.max_eigenvalue().unwrap() < 0.0);
    }

    #[test]
    fn lyapunov_round_trip_recovers_reference_p() {
        // Q_lyap reconstructed as P - A'PA; solve_dlyap must return P
        let a = paper_a();
        let p = paper_p();
        let q_lyap = SymmetricMatrix::symmetrized(
            p.as_matrix().sub(&a.transpose().matmul(p.as_matrix()).matmul(&a)),
        )
        .unwrap();
        let back = autonomous_lyapunov(&a, &q_lyap).unwrap();
        assert!(back.as_matrix().sub(p.as_matrix()).max_abs() < 5e-3);
        assert!(back.as_matrix().sub(p.as_matrix()).max_abs() < 1e-9);
    }

    #[test]
    fn lyapunov_zero_dynamics_returns_q() {
        let q = SymmetricMatrix::from_diag(&[1.0, 2.0]).unwrap();
        let p = autonomous_lyapunov(&Matrix::zeros(2, 2), &q).unwrap();
        assert!(p.as_matrix().sub(q.as_matrix()).max_abs() < 1e-14);
    }

    #[test]
    fn kappa_trivial_reductions() {
        // A = 0: kappa = lambda_min(P) / lambda_max(P)
        let p = SymmetricMatrix::from_diag(&[1.0, 4.0]).unwrap();
        let k = kappa_coefficient(&p, &Matrix::zeros(2, 2)).unwrap();
        assert!((k - 0.25).abs() < 1e-12);
        // scalar: (p - a^2 p)/p = 1 - a^2
        let p1 = SymmetricMatrix::from_diag(&[3.0]).unwrap();
        let a1 = Matrix::from_rows(&[vec![0.5]]).unwrap();
        assert!((kappa_coefficient(&p1, &a1).unwrap() - 0.75).abs() < 1e-12);
    }

    #[test]
    fn kappa_on_reference_data_matches_2x2_oracle() {
        let a = paper_a();
        let p = paper_p();
        let k = kappa_coefficient(&p, &a).unwrap();
        assert!(k > 0.0 && k < 1.0);
        let m = SymmetricMatrix::symmetrized(
            p.as_matrix().sub(&a.transpose().matmul(p.as_matrix()).matmul(&a)),
        )
        .unwrap();
        let (m_lo, _) = eig2(&m);
        let (_, p_hi) = eig2(&p);
        assert!((k - m_lo / p_hi).abs() < 1e-10);
    }

    #[test]
    fn rho_offset_reference_arithmetic() {
        assert_eq!(rho_offset(&paper_p(), &SymmetricMatrix::zeros(2)), 0.0);
        let rho = rho_offset(&paper_p(), &paper_sigma_w());
        assert!((rho - 0.0273275).abs() < 1e-12, "{rho}");
        let id = rho_offset(&SymmetricMatrix::identity(2), &paper_sigma_w());
        assert!((id - 0.0125).abs() < 1e-15);
    }

    #[test]
    fn expected_decrease_exact_values() {
        let a = paper_a();
        let p = paper_p();
        let sw = paper_sigma_w();
        // at the origin: exactly the noise offset
        assert!((expected_decrease_autonomous(&p, &a, &sw, &[0.0, 0.0]) - 0.0273275).abs() < 1e-12);
        // at [10, 0]: 100 * (A'PA - P)[0][0] + offset
        let m = a.transpose().matmul(p.as_matrix()).matmul(&a).sub(p.as_matrix());
        let expect = 100.0 * m.get(0, 0) + 0.0273275;
        let got = expected_decrease_autonomous(&p, &a, &sw, &[10.0, 0.0]);
        assert!((got - expect).abs() < 1e-9, "{got} vs {expect}");
    }

    #[test]
    fn expected_decrease_matches_monte_carlo() {
        let a = paper_a();
        let p = paper_p();
        let sw = paper_sigma_w();
        let sys = LtiSystem::new(a.clone(), Matrix::zeros(2, 1), 1.0).unwrap();
        let noise = NoiseModel::new(sw.clone(), NoiseMode::ExactGaussian).unwrap();
        let sampler = GaussianSampler::new(&noise).unwrap();
        let mut rng = run_rng(2025, 0);
        let x = [10.0, 0.0];
        let vx = p.quad_form(&x);
        let n = 100_000usize;
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for _ in 0..n {
            let w = sampler.sample(&mut rng);
            let next = crate::model::step(&sys, &x, &[0.0], &w).unwrap();
            let dv = p.quad_form(&next) - vx;
            sum += dv;
            sumsq += dv * dv;
        }
        let mean = sum / n as f64;
        let var = (sumsq / n as f64 - mean * mean).max(0.0);
        let se = (var / n as f64).sqrt();
        let exact = expected_decrease_autonomous(&p, &a, &sw, &x);
        assert!(
            (mean - exact).abs() <= 3.0 * se,
            "MC mean {mean} vs exact {exact} (3 SE = {})",
            3.0 * se
        );
    }

    #[test]
    fn gamma_threshold_identities() {
        let a = paper_a();
        let p = paper_p();
        let sw = paper_sigma_w();
        assert_eq!(gamma_threshold(&p, &a, &SymmetricMatrix::zeros(2)).unwrap(), 0.0);
        let g = gamma_threshold(&p, &a, &sw).unwrap();
        assert!(g > 0.0 && g.is_finite());
        // algebraic identity gamma * kappa = rho
        let k = kappa_coefficient(&p, &a).unwrap();
        assert!((g * k - rho_offset(&p, &sw)).abs() < 1e-12);
        // scalar case: a=0.5, p=1, sigma=1 -> 1/(1-0.25)
        let g1 = gamma_threshold(
            &SymmetricMatrix::from_diag(&[1.0]).unwrap(),
            &Matrix::from_rows(&[vec![0.5]]).unwrap(),
            &SymmetricMatrix::from_diag(&[1.0]).unwrap(),
        )
        .unwrap();
        assert!((g1 - 4.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn decrease_sign_straddles_the_threshold_boundary() {
        // exact decrease is negative iff x'(P - A'PA)x > Tr(P Sigma_w)
        let a = paper_a();
        let p = paper_p();
        let sw = paper_sigma_w();
        let m = SymmetricMatrix::symmetrized(
            p.as_matrix().sub(&a.transpose().matmul(p.as_matrix()).matmul(&a)),
        )
        .unwrap();
        let rho = rho_offset(&p, &sw);
        for angle in 0..12 {
            let t = angle as f64 * std::f64::consts::PI / 6.0;
            let dir = [t.cos(), t.sin()];
            let quad = m.quad_form(&dir);
            let boundary = (rho / quad).sqrt();
            for (factor, negative) in [(1.05, true), (0.95, false)] {
                let x = [dir[0] * boundary * factor, dir[1] * boundary * factor];
                let dv = expected_decrease_autonomous(&p, &a, &sw, &x);
                assert_eq!(dv < 0.0, negative, "factor {factor} at angle {angle}: dv = {dv}");
            }
        }
    }

    #[test]
    fn mpc_noise_offset_reductions_and_accumulation() {
        let q = SymmetricMatrix::from_diag(&[2.0, 0.1]).unwrap();
        let sw = paper_sigma_w();
        // N = 1: Tr(Q Sigma_w)
        let one = mpc_noise_offset(&q, &paper_a(), &sw, 1);
        assert!((one - q.trace_product(&sw)).abs() < 1e-15);
        // A = 0: higher terms vanish
        let zero_a = mpc_noise_offset(&q, &Matrix::zeros(2, 2), &sw, 7);
        assert!((zero_a - q.trace_product(&sw)).abs() < 1e-15);
        // term-by-term accumulation oracle
        let a = paper_a();
        let mut acc = 0.0;
        let mut power = Matrix::identity(2);
        for _ in 0..10 {
            let term = power.transpose().matmul(q.as_matrix()).matmul(&power);
            for i in 0..2 {
                for j in 0..2 {
                    acc += term.get(i, j) * sw.get(j, i);
                }
            }
            power = a.matmul(&power);
        }
        let got = mpc_noise_offset(&q, &a, &sw, 10);
        assert!((got - acc).abs() < 1e-12);
    }

    fn synthetic_record(flags: Vec<Feasibility>) -> TrajectoryRecord {
        let n = flags.len();
        TrajectoryRecord {
            states: vec![vec![0.0, 0.0]; n],
            inputs: vec![vec![0.0]; n.saturating_sub(1)],
            branches: vec![crate::policy::Branch::Backup; n.saturating_sub(1)],
            lyapunov: None,
            candidate: None,
            feasible: Some(flags),
            violations: vec![false; n],
        }
    }

    #[test]
    fn recurrence_counting_conventions() {
        use Feasibility::{Feasible as In, Infeasible as Out};
        // never leaving: zero excursions
        let stats = recurrence_stats(&[synthetic_record(vec![In, In, In])]).unwrap();
        assert_eq!(stats.excursions, 0);
        assert_eq!(stats.unreturned, 0);

        // inside, out, out, inside: one excursion of hitting time 2
        let stats = recurrence_stats(&[synthetic_record(vec![In, Out, Out, In])]).unwrap();
        assert_eq!(stats.excursions, 1);
        assert_eq!(stats.hitting_times.get(&2), Some(&1));
        assert_eq!(stats.max_hitting_time, 2);
        assert_eq!(stats.unreturned, 0);

        // still outside at the end: unreturned
        let stats = recurrence_stats(&[synthetic_record(vec![In, Out, Out])]).unwrap();
        assert_eq!(stats.excursions, 1);
        assert_eq!(stats.unreturned, 1);

        // bookkeeping identity: inside steps + excursion lengths = total
        let flags = vec![In, Out, In, Out, Out, Out, In, In];
        let stats = recurrence_stats(&[synthetic_record(flags.clone())]).unwrap();
        let inside = flags.iter().filter(|&&f| f == In).count();
        let total_out: usize = stats
            .hitting_times
            .iter()
            .map(|(len, count)| len * count)
            .sum();
        assert_eq!(inside + total_out, flags.len());
    }

    #[test]
    fn recurrence_requires_flags() {
        let mut rec = synthetic_record(vec![Feasibility::Feasible]);
        rec.feasible = None;
        assert!(matches!(
            recurrence_stats(&[rec]),
            Err(IsspError::MissingFeasibilityFlags)
        ));
    }

    #[test]
    fn empirical_check_noise_free_contraction_passes_exactly() {
        let a = paper_a();
        let sys = LtiSystem::new(a.clone(), Matrix::zeros(2, 1), 1.0).unwrap();
        let quiet =
            NoiseModel::new(SymmetricMatrix::zeros(2), NoiseMode::ExactGaussian).unwrap();
        let cfg = SimConfig {
            mode: SimMode::Autonomous,
            n_runs: 20,
            steps: 120,
            master_seed: 9,
            initial_states: InitialStates::Single(vec![10.0, 0.0]),
        };
        let state_set = Polytope::from_box(&[-1e6, -1e6], &[1e6, 1e6]).unwrap();
        let recs = monte_carlo(
            &cfg,
            &sys,
            &quiet,
            Controller::Zero,
            &state_set,
            RecordOptions::default(),
        )
        .unwrap();
        let (beta, _) = calibrate_issp_bound(&recs, &a, 120, 0.1).unwrap();
        let out = issp_empirical_check(&recs, 0.1, 120, &beta, 0.0);
        assert!(out.pass);
        assert_eq!(out.fraction, 1.0);
    }

    #[test]
    fn empirical_check_zero_eps_fails_on_noisy_runs() {
        let a = paper_a();
        let sys = LtiSystem::new(a.clone(), Matrix::zeros(2, 1), 1.0).unwrap();
        let noise = NoiseModel::new(paper_sigma_w(), NoiseMode::ExactGaussian).unwrap();
        let cfg = SimConfig {
            mode: SimMode::Autonomous,
            n_runs: 50,
            steps: 150,
            master_seed: 10,
            initial_states: InitialStates::Single(vec![10.0, 0.0]),
        };
        let state_set = Polytope::from_box(&[-1e6, -1e6], &[1e6, 1e6]).unwrap();
        let recs = monte_carlo(
            &cfg,
            &sys,
            &noise,
            Controller::Zero,
            &state_set,
            RecordOptions::default(),
        )
        .unwrap();
        let beta = BetaParams { scale: 1.0, decay: spectral_radius(&a).unwrap() };
        let out = issp_empirical_check(&recs, 0.0, 150, &beta, 0.0);
        assert!(!out.pass, "strict bound with no additive term should fail");
    }

    #[test]
    fn empirical_check_calibration_split_generalizes() {
        let a = paper_a();
        let sys = LtiSystem::new(a.clone(), Matrix::zeros(2, 1), 1.0).unwrap();
        let noise = NoiseModel::new(paper_sigma_w(), NoiseMode::ExactGaussian).unwrap();
        let state_set = Polytope::from_box(&[-1e6, -1e6], &[1e6, 1e6]).unwrap();
        let calib_cfg = SimConfig {
            mode: SimMode::Autonomous,
            n_runs: 100,
            steps: 200,
            master_seed: 1000,
            initial_states: InitialStates::Single(vec![10.0, 0.0]),
        };
        let eval_cfg = SimConfig {
            master_seed: 2000,
            n_runs: 300,
            ..calib_cfg.clone()
        };
        let calib = monte_carlo(
            &calib_cfg,
            &sys,
            &noise,
            Controller::Zero,
            &state_set,
            RecordOptions::default(),
        )
        .unwrap();
        let eval = monte_carlo(
            &eval_cfg,
            &sys,
            &noise,
            Controller::Zero,
            &state_set,
            RecordOptions::default(),
        )
        .unwrap();
        let (beta, rho_term) = calibrate_issp_bound(&calib, &a, 200, 0.1).unwrap();
        let out = issp_empirical_check(&eval, 0.1, 200, &beta, rho_term);
        assert!(
            out.pass,
            "calibrated bound failed on the evaluation split: fraction {}",
            out.fraction
        );
    }

    #[test]
    fn sublevel_check_small_gamma_holds_large_gamma_fails() {
        let sys = LtiSystem::new(
            paper_a(),
            Matrix::from_rows(&[vec![0.025], vec![0.000]]).unwrap(),
            0.05,
        )
        .unwrap();
        let noise = NoiseModel::new(paper_sigma_w(), NoiseMode::ExactGaussian).unwrap();
        let data = assemble(
            &sys,
            &SymmetricMatrix::from_diag(&[2.0, 0.1]).unwrap(),
            &SymmetricMatrix::from_diag(&[1.0]).unwrap(),
            &Polytope::from_box(&[-1.0, -2.0], &[12.0, 4.0]).unwrap(),
            &Polytope::from_box(&[-37.0], &[37.0]).unwrap(),
            &noise,
            10,
            0.15,
            16,
        )
        .unwrap();
        let p = paper_p();
        let tiny = check_sublevel_in_x0(&data, &p, 1e-4, 72, 0).unwrap();
        assert!(tiny.holds);
        // a level far beyond the state box must produce a witness
        let huge = check_sublevel_in_x0(&data, &p, 1e4, 72, 0).unwrap();
        assert!(!huge.holds);
        let (witness, verdict) = huge.witness.unwrap();
        assert_ne!(verdict, Feasibility::Feasible);
        assert!(!data.state_set().contains(&witness, 0.0));
    }
}
