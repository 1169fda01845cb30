//! Independent reference implementations used by the test and acceptance
//! suites as oracles. Nothing here shares code with the production solvers:
//! the QP oracle enumerates active sets by brute force, the normal CDF is
//! evaluated by quadrature of the density, and the finite-horizon regulator
//! comes from the raw backward recursion.
//!
//! Not part of the public API surface; exported so integration and
//! acceptance tests of downstream crates can reuse the same oracles.
#![doc(hidden)]

use crate::linalg::{dot, LuFactors, Matrix, SymmetricMatrix};

/// Brute-force QP oracle: solves the KKT system for every active subset of
/// at most `n` constraints and keeps the feasible candidate with
/// nonnegative multipliers and minimal objective. Returns `None` when no
/// candidate exists (primal infeasible for strictly convex problems).
pub fn brute_force_qp(
    p: &SymmetricMatrix,
    q: &[f64],
    a: &Matrix,
    b: &[f64],
) -> Option<(Vec<f64>, f64)> {
    let n = p.dim();
    let m = a.rows();
    let mut best: Option<(Vec<f64>, f64)> = None;

    let mut subsets: Vec<Vec<usize>> = vec![Vec::new()];
    for size in 1..=n.min(m) {
        let mut combo: Vec<usize> = (0..size).collect();
        loop {
            subsets.push(combo.clone());
            // next combination
            let mut i = size;
            loop {
                if i == 0 {
                    break;
                }
                i -= 1;
                if combo[i] != i + m - size {
                    combo[i] += 1;
                    for j in (i + 1)..size {
                        combo[j] = combo[j - 1] + 1;
                    }
                    break;
                }
                if i == 0 {
                    combo.clear();
                    break;
                }
            }
            if combo.is_empty() {
                break;
            }
        }
    }

    for subset in &subsets {
        let w = subset.len();
        let dim = n + w;
        let mut kkt = Matrix::zeros(dim, dim);
        for i in 0..n {
            for j in 0..n {
                kkt.set(i, j, p.get(i, j));
            }
        }
        for (r, &row) in subset.iter().enumerate() {
            for j in 0..n {
                kkt.set(n + r, j, a.get(row, j));
                kkt.set(j, n + r, a.get(row, j));
            }
        }
        let Ok(lu) = LuFactors::new(kkt) else { continue };
        let mut rhs = vec![0.0; dim];
        for i in 0..n {
            rhs[i] = -q[i];
        }
        for (r, &row) in subset.iter().enumerate() {
            rhs[n + r] = b[row];
        }
        let sol = lu.solve(&rhs);
        if sol.iter().any(|v| !v.is_finite()) {
            continue;
        }
        let x = &sol[..n];
        let nu = &sol[n..];
        if nu.iter().any(|&v| v < -1e-9) {
            continue;
        }
        let feasible = (0..m).all(|i| dot(a.row(i), x) <= b[i] + 1e-9 * (1.0 + b[i].abs()));
        if !feasible {
            continue;
        }
        let obj = 0.5 * p.quad_form(x) + dot(q, x);
        if best.as_ref().is_none_or(|(_, cur)| obj < *cur) {
            best = Some((x.to_vec(), obj));
        }
    }
    best
}

/// Standard normal CDF by composite Simpson quadrature of the density,
/// independent of any erf-based evaluation. Absolute error well below
/// 1e-12 for |z| <= 9.
pub fn normal_cdf_quadrature(z: f64) -> f64 {
    if z < -9.0 {
        return 0.0;
    }
    if z > 9.0 {
        return 1.0;
    }
    let density = |t: f64| (-0.5 * t * t).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let steps = 20_000usize;
    let (lo, hi) = if z >= 0.0 { (0.0, z) } else { (z, 0.0) };
    let h = (hi - lo) / steps as f64;
    let mut acc = density(lo) + density(hi);
    for k in 1..steps {
        let t = lo + h * k as f64;
        acc += density(t) * if k % 2 == 1 { 4.0 } else { 2.0 };
    }
    let integral = acc * h / 3.0;
    if z >= 0.0 {
        0.5 + integral
    } else {
        0.5 - integral
    }
}

/// First-step feedback gain of the finite-horizon LQR by the backward
/// Riccati recursion: `u_0 = -K_0 x` is optimal for the unconstrained
/// horizon-`n` problem with stage costs `(Q, R)` and terminal cost `Qf`.
pub fn finite_horizon_lqr_gain(
    a: &Matrix,
    b: &Matrix,
    q: &SymmetricMatrix,
    r: &SymmetricMatrix,
    qf: &SymmetricMatrix,
    horizon: usize,
) -> Matrix {
    assert!(horizon >= 1);
    let nu = b.cols();
    let nx = a.rows();
    let at = a.transpose();
    let bt = b.transpose();
    let mut p = qf.as_matrix().clone();
    let mut gain = Matrix::zeros(nu, nx);
    for _ in 0..horizon {
        let s = r.as_matrix().add(&bt.matmul(&p).matmul(b));
        let s_lu = LuFactors::new(s).expect("R + B'PB is invertible");
        let bpa = bt.matmul(&p).matmul(a);
        for j in 0..nx {
            let col: Vec<f64> = (0..nu).map(|i| bpa.get(i, j)).collect();
            let sol = s_lu.solve(&col);
            for i in 0..nu {
                gain.set(i, j, sol[i]);
            }
        }
        p = at
            .matmul(&p)
            .matmul(a)
            .sub(&at.matmul(&p).matmul(b).matmul(&gain))
            .add(q.as_matrix());
    }
    gain
}
