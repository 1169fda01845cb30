//! System, noise, and constraint definitions: exact dynamics stepping and
//! covariance propagation for `x+ = Ax + Bu + w` with zero-mean noise.

use thiserror::Error;

use crate::linalg::{dot, LinalgError, Matrix, SymmetricMatrix};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("noise covariance is not PSD (eigenvalue {value:e})")]
    CovarianceNotPsd { value: f64 },
    #[error("polytope row {row} is all-zero")]
    ZeroRow { row: usize },
    #[error("box bound {index} has lower >= upper")]
    EmptyBox { index: usize },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// Discrete-time LTI plant `x+ = Ax + Bu + w`. The sampling period is
/// metadata for reporting; all dynamics are in discrete time.
#[derive(Debug, Clone)]
pub struct LtiSystem {
    a: Matrix,
    b: Matrix,
    ts: f64,
}

impl LtiSystem {
    pub fn new(a: Matrix, b: Matrix, ts: f64) -> Result<Self, ModelError> {
        if !a.is_square() {
            return Err(ModelError::DimensionMismatch(format!(
                "A must be square, got {}x{}",
                a.rows(),
                a.cols()
            )));
        }
        if b.rows() != a.rows() {
            return Err(ModelError::DimensionMismatch(format!(
                "B has {} rows but A is {}x{}",
                b.rows(),
                a.rows(),
                a.cols()
            )));
        }
        if !ts.is_finite() {
            return Err(ModelError::DimensionMismatch("Ts must be finite".to_string()));
        }
        Ok(LtiSystem { a, b, ts })
    }

    pub fn a(&self) -> &Matrix {
        &self.a
    }

    pub fn b(&self) -> &Matrix {
        &self.b
    }

    pub fn ts(&self) -> f64 {
        self.ts
    }

    pub fn n_states(&self) -> usize {
        self.a.rows()
    }

    pub fn n_inputs(&self) -> usize {
        self.b.cols()
    }
}

/// How much is known about the noise distribution: the exact Gaussian law,
/// or only its first two moments (an ambiguity set). The mode selects the
/// tightening factor; the mean is zero in both cases.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseMode {
    ExactGaussian,
    MomentAmbiguity,
}

#[derive(Debug, Clone)]
pub struct NoiseModel {
    sigma_w: SymmetricMatrix,
    mode: NoiseMode,
}

impl NoiseModel {
    pub fn new(sigma_w: SymmetricMatrix, mode: NoiseMode) -> Result<Self, ModelError> {
        let min = sigma_w.min_eigenvalue()?;
        if min < -1e-10 * sigma_w.max_abs().max(1.0) {
            return Err(ModelError::CovarianceNotPsd { value: min });
        }
        Ok(NoiseModel { sigma_w, mode })
    }

    pub fn sigma_w(&self) -> &SymmetricMatrix {
        &self.sigma_w
    }

    pub fn mode(&self) -> NoiseMode {
        self.mode
    }

    pub fn dim(&self) -> usize {
        self.sigma_w.dim()
    }
}

/// `||w||_L2 = sqrt(Tr(Sigma_w))`.
pub fn l2_noise_norm(noise: &NoiseModel) -> f64 {
    noise.sigma_w.trace().sqrt()
}

/// Half-space polytope `{x | Hx <= h}`.
#[derive(Debug, Clone)]
pub struct Polytope {
    h_mat: Matrix,
    offsets: Vec<f64>,
}

impl Polytope {
    pub fn new(h_mat: Matrix, offsets: Vec<f64>) -> Result<Self, ModelError> {
        if h_mat.rows() != offsets.len() {
            return Err(ModelError::DimensionMismatch(format!(
                "H has {} rows but h has {} entries",
                h_mat.rows(),
                offsets.len()
            )));
        }
        if offsets.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::DimensionMismatch(
                "polytope offsets must be finite".to_string(),
            ));
        }
        for i in 0..h_mat.rows() {
            if h_mat.row(i).iter().all(|&v| v == 0.0) {
                return Err(ModelError::ZeroRow { row: i });
            }
        }
        Ok(Polytope { h_mat, offsets })
    }

    /// Axis-aligned box `lower <= x <= upper` as 2n half-spaces, ordered
    /// `(x_j <= u_j, -x_j <= -l_j)` per coordinate.
    pub fn from_box(lower: &[f64], upper: &[f64]) -> Result<Self, ModelError> {
        if lower.len() != upper.len() {
            return Err(ModelError::DimensionMismatch(
                "box bounds length mismatch".to_string(),
            ));
        }
        let n = lower.len();
        let mut h = Matrix::zeros(2 * n, n);
        let mut offsets = Vec::with_capacity(2 * n);
        for j in 0..n {
            if lower[j] >= upper[j] {
                return Err(ModelError::EmptyBox { index: j });
            }
            h.set(2 * j, j, 1.0);
            offsets.push(upper[j]);
            h.set(2 * j + 1, j, -1.0);
            offsets.push(-lower[j]);
        }
        Polytope::new(h, offsets)
    }

    pub fn h(&self) -> &Matrix {
        &self.h_mat
    }

    pub fn offsets(&self) -> &[f64] {
        &self.offsets
    }

    pub fn n_rows(&self) -> usize {
        self.offsets.len()
    }

    pub fn dim(&self) -> usize {
        self.h_mat.cols()
    }

    /// Largest constraint violation `max_j (H_j x - h_j)`; nonpositive
    /// inside the set.
    pub fn violation(&self, x: &[f64]) -> f64 {
        assert_eq!(x.len(), self.dim(), "polytope violation: dimension mismatch");
        (0..self.n_rows())
            .map(|i| dot(self.h_mat.row(i), x) - self.offsets[i])
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn contains(&self, x: &[f64], tol: f64) -> bool {
        self.violation(x) <= tol
    }

    /// Strict `H 0 < h`, i.e. all offsets positive.
    pub fn origin_interior(&self) -> bool {
        self.offsets.iter().all(|&v| v > 0.0)
    }
}

/// Predicted state covariances `Sigma_0 .. Sigma_N` under the recursion
/// `Sigma_{i+1} = A Sigma_i A' + Sigma_w`, `Sigma_0 = 0`.
#[derive(Debug, Clone)]
pub struct CovarianceSequence {
    sigmas: Vec<SymmetricMatrix>,
}

impl CovarianceSequence {
    pub fn len(&self) -> usize {
        self.sigmas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sigmas.is_empty()
    }

    pub fn get(&self, i: usize) -> &SymmetricMatrix {
        &self.sigmas[i]
    }

    pub fn last(&self) -> &SymmetricMatrix {
        self.sigmas.last().expect("covariance sequence is nonempty")
    }

    pub fn iter(&self) -> impl Iterator<Item = &SymmetricMatrix> {
        self.sigmas.iter()
    }
}

fn check_state_dim(sys: &LtiSystem, v: &[f64], name: &str) -> Result<(), ModelError> {
    if v.len() != sys.n_states() {
        return Err(ModelError::DimensionMismatch(format!(
            "{name} has length {} but the system has {} states",
            v.len(),
            sys.n_states()
        )));
    }
    Ok(())
}

/// One step of the disturbed dynamics: `Ax + Bu + w`.
pub fn step(sys: &LtiSystem, x: &[f64], u: &[f64], w: &[f64]) -> Result<Vec<f64>, ModelError> {
    check_state_dim(sys, x, "x")?;
    check_state_dim(sys, w, "w")?;
    if u.len() != sys.n_inputs() {
        return Err(ModelError::DimensionMismatch(format!(
            "u has length {} but the system has {} inputs",
            u.len(),
            sys.n_inputs()
        )));
    }
    let mut out = sys.a.matvec(x);
    let bu = sys.b.matvec(u);
    for i in 0..out.len() {
        out[i] += bu[i] + w[i];
    }
    Ok(out)
}

/// Nominal (mean) dynamics: `Az + Bu`.
pub fn nominal_step(sys: &LtiSystem, z: &[f64], u: &[f64]) -> Result<Vec<f64>, ModelError> {
    check_state_dim(sys, z, "z")?;
    if u.len() != sys.n_inputs() {
        return Err(ModelError::DimensionMismatch(format!(
            "u has length {} but the system has {} inputs",
            u.len(),
            sys.n_inputs()
        )));
    }
    let mut out = sys.a.matvec(z);
    let bu = sys.b.matvec(u);
    for i in 0..out.len() {
        out[i] += bu[i];
    }
    Ok(out)
}

/// Error dynamics: `Ae + w`, with `e_0 = 0`.
pub fn error_step(sys: &LtiSystem, e: &[f64], w: &[f64]) -> Result<Vec<f64>, ModelError> {
    check_state_dim(sys, e, "e")?;
    check_state_dim(sys, w, "w")?;
    let mut out = sys.a.matvec(e);
    for i in 0..out.len() {
        out[i] += w[i];
    }
    Ok(out)
}

/// Covariance recursion over a horizon: returns `Sigma_0 .. Sigma_N`.
pub fn propagate_covariance(
    sys: &LtiSystem,
    noise: &NoiseModel,
    horizon: usize,
) -> Result<CovarianceSequence, ModelError> {
    assert!(horizon >= 1, "propagate_covariance: horizon must be >= 1");
    if noise.dim() != sys.n_states() {
        return Err(ModelError::DimensionMismatch(format!(
            "noise dimension {} differs from state dimension {}",
            noise.dim(),
            sys.n_states()
        )));
    }
    let n = sys.n_states();
    let mut sigmas = Vec::with_capacity(horizon + 1);
    sigmas.push(SymmetricMatrix::zeros(n));
    let mut current = Matrix::zeros(n, n);
    for _ in 0..horizon {
        current = sys
            .a
            .matmul(&current)
            .matmul(&sys.a.transpose())
            .add(noise.sigma_w.as_matrix());
        let sym = SymmetricMatrix::symmetrized(current.clone())?;
        current = sym.as_matrix().clone();
        sigmas.push(sym);
    }
    Ok(CovarianceSequence { sigmas })
}
