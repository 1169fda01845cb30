//! Dense symmetric matrix computations used by synthesis and certification:
//! factorizations, eigendecompositions, Riccati and Lyapunov solvers.
//!
//! Everything here targets the small dimensions of constrained control
//! problems (states, inputs, condensed input sequences), so the solvers
//! favor robustness over asymptotic speed: a cyclic Jacobi eigensolver,
//! fixed-point Riccati/Lyapunov iterations, and plain partial-pivot LU.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum LinalgError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("non-finite entry at ({row}, {col})")]
    NonFinite { row: usize, col: usize },
    #[error("not symmetric at ({row}, {col})")]
    NotSymmetric { row: usize, col: usize },
    #[error("not positive definite (pivot {pivot})")]
    NotPositiveDefinite { pivot: usize },
    #[error("not PSD (eigenvalue {value:e})")]
    NotPsd { value: f64 },
    #[error("unstable A (spectral radius {rho})")]
    UnstableA { rho: f64 },
    #[error("DARE divergence after {iterations} iterations")]
    DareDivergence { iterations: usize },
    #[error("eigensolver failed to converge")]
    EigDivergence,
    #[error("singular linear system")]
    Singular,
}

/// Dense row-major matrix of `f64` entries.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, LinalgError> {
        if data.len() != rows * cols {
            return Err(LinalgError::DimensionMismatch(format!(
                "{rows}x{cols} matrix needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        for (k, v) in data.iter().enumerate() {
            if !v.is_finite() {
                return Err(LinalgError::NonFinite {
                    row: k / cols.max(1),
                    col: k % cols.max(1),
                });
            }
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, LinalgError> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(LinalgError::DimensionMismatch(
                "ragged row lengths".to_string(),
            ));
        }
        Matrix::new(r, c, rows.concat())
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        t
    }

    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(
            self.cols, other.rows,
            "matmul: {}x{} by {}x{}",
            self.rows, self.cols, other.rows, other.cols
        );
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let src = &other.data[k * other.cols..(k + 1) * other.cols];
                let dst = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += a * s;
                }
            }
        }
        out
    }

    pub fn matvec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(self.cols, v.len(), "matvec: {}x{} by {}", self.rows, self.cols, v.len());
        self.data
            .chunks(self.cols.max(1))
            .take(self.rows)
            .map(|row| dot(row, v))
            .collect()
    }

    /// `self^T v` without forming the transpose.
    pub fn matvec_t(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(self.rows, v.len(), "matvec_t: {}x{} by {}", self.rows, self.cols, v.len());
        let mut out = vec![0.0; self.cols];
        for (row, &vi) in self.data.chunks(self.cols.max(1)).zip(v) {
            if vi == 0.0 {
                continue;
            }
            for (o, r) in out.iter_mut().zip(row) {
                *o += vi * r;
            }
        }
        out
    }

    pub fn add(&self, other: &Matrix) -> Matrix {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols), "add: shape mismatch");
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Matrix { rows: self.rows, cols: self.cols, data }
    }

    pub fn sub(&self, other: &Matrix) -> Matrix {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols), "sub: shape mismatch");
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Matrix { rows: self.rows, cols: self.cols, data }
    }

    pub fn scale(&self, s: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn frob_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

pub fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Square symmetric matrix. Symmetry is validated on construction to
/// `|S[i][j] - S[j][i]| <= 1e-12 * (1 + |S[i][j]|)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SymmetricMatrix {
    mat: Matrix,
}

impl SymmetricMatrix {
    pub fn new(mat: Matrix) -> Result<Self, LinalgError> {
        if !mat.is_square() {
            return Err(LinalgError::DimensionMismatch(format!(
                "symmetric matrix must be square, got {}x{}",
                mat.rows, mat.cols
            )));
        }
        for i in 0..mat.rows {
            for j in (i + 1)..mat.cols {
                let a = mat.get(i, j);
                let b = mat.get(j, i);
                if (a - b).abs() > 1e-12 * (1.0 + a.abs()) {
                    return Err(LinalgError::NotSymmetric { row: i, col: j });
                }
            }
        }
        Ok(SymmetricMatrix { mat })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, LinalgError> {
        SymmetricMatrix::new(Matrix::from_rows(rows)?)
    }

    /// Builds from a nearly-symmetric product by averaging `(M + M^T) / 2`.
    /// Intended for internally computed quantities where floating-point
    /// drift would trip the strict symmetry check.
    pub fn symmetrized(mat: Matrix) -> Result<Self, LinalgError> {
        if !mat.is_square() {
            return Err(LinalgError::DimensionMismatch(
                "symmetrized: matrix must be square".to_string(),
            ));
        }
        let n = mat.rows;
        let mut out = mat.clone();
        for i in 0..n {
            for j in 0..n {
                out.set(i, j, 0.5 * (mat.get(i, j) + mat.get(j, i)));
            }
        }
        Ok(SymmetricMatrix { mat: out })
    }

    pub fn from_diag(diag: &[f64]) -> Result<Self, LinalgError> {
        let n = diag.len();
        let mut m = Matrix::zeros(n, n);
        for (i, &d) in diag.iter().enumerate() {
            if !d.is_finite() {
                return Err(LinalgError::NonFinite { row: i, col: i });
            }
            m.set(i, i, d);
        }
        Ok(SymmetricMatrix { mat: m })
    }

    pub fn identity(n: usize) -> Self {
        SymmetricMatrix { mat: Matrix::identity(n) }
    }

    pub fn zeros(n: usize) -> Self {
        SymmetricMatrix { mat: Matrix::zeros(n, n) }
    }

    pub fn dim(&self) -> usize {
        self.mat.rows
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.mat.get(i, j)
    }

    pub fn as_matrix(&self) -> &Matrix {
        &self.mat
    }

    pub fn trace(&self) -> f64 {
        (0..self.dim()).map(|i| self.get(i, i)).sum()
    }

    /// `x^T S x`.
    pub fn quad_form(&self, x: &[f64]) -> f64 {
        assert_eq!(x.len(), self.dim(), "quad_form: dimension mismatch");
        let mut acc = 0.0;
        for i in 0..self.dim() {
            acc += x[i] * dot(self.mat.row(i), x);
        }
        acc
    }

    /// `Tr(S T)` for symmetric `S`, `T`.
    pub fn trace_product(&self, other: &SymmetricMatrix) -> f64 {
        assert_eq!(self.dim(), other.dim(), "trace_product: dimension mismatch");
        self.mat
            .data
            .iter()
            .zip(&other.mat.data)
            .map(|(a, b)| a * b)
            .sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.mat.max_abs()
    }

    pub fn min_eigenvalue(&self) -> Result<f64, LinalgError> {
        Ok(sym_eig(self)?.0[0])
    }

    pub fn max_eigenvalue(&self) -> Result<f64, LinalgError> {
        let (vals, _) = sym_eig(self)?;
        Ok(*vals.last().expect("nonempty eigenvalues"))
    }
}

/// Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
///
/// Returns eigenvalues in ascending order and the matching orthonormal
/// eigenvector columns: `S V = V diag(lambda)`.
pub fn sym_eig(s: &SymmetricMatrix) -> Result<(Vec<f64>, Matrix), LinalgError> {
    let n = s.dim();
    if n == 0 {
        return Ok((Vec::new(), Matrix::zeros(0, 0)));
    }
    let mut a = s.as_matrix().clone();
    let mut v = Matrix::identity(n);
    let scale = a.max_abs().max(1.0);

    let mut converged = false;
    for _sweep in 0..100 {
        let mut off = 0.0f64;
        for i in 0..n {
            for j in (i + 1)..n {
                off = off.max(a.get(i, j).abs());
            }
        }
        if off <= 1e-15 * scale {
            converged = true;
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a.get(p, q);
                if apq.abs() <= 1e-300 {
                    continue;
                }
                let theta = (a.get(q, q) - a.get(p, p)) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let sn = t * c;
                for k in 0..n {
                    let akp = a.get(k, p);
                    let akq = a.get(k, q);
                    a.set(k, p, c * akp - sn * akq);
                    a.set(k, q, sn * akp + c * akq);
                }
                for k in 0..n {
                    let apk = a.get(p, k);
                    let aqk = a.get(q, k);
                    a.set(p, k, c * apk - sn * aqk);
                    a.set(q, k, sn * apk + c * aqk);
                }
                for k in 0..n {
                    let vkp = v.get(k, p);
                    let vkq = v.get(k, q);
                    v.set(k, p, c * vkp - sn * vkq);
                    v.set(k, q, sn * vkp + c * vkq);
                }
            }
        }
    }
    if !converged {
        return Err(LinalgError::EigDivergence);
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a.get(i, i).partial_cmp(&a.get(j, j)).expect("finite eigenvalues"));
    let values: Vec<f64> = order.iter().map(|&i| a.get(i, i)).collect();
    let mut vectors = Matrix::zeros(n, n);
    for (new_col, &old_col) in order.iter().enumerate() {
        for k in 0..n {
            vectors.set(k, new_col, v.get(k, old_col));
        }
    }
    Ok((values, vectors))
}

/// Lower-triangular Cholesky factor `L` with `L L^T = S`.
pub fn cholesky(s: &SymmetricMatrix) -> Result<Matrix, LinalgError> {
    let n = s.dim();
    let mut l = Matrix::zeros(n, n);
    let scale = (0..n).fold(0.0f64, |m, i| m.max(s.get(i, i).abs())).max(1.0);
    for j in 0..n {
        let row_j: Vec<f64> = l.row(j)[..j].to_vec();
        let d = s.get(j, j) - dot(&row_j, &row_j);
        if d <= 1e-14 * scale {
            return Err(LinalgError::NotPositiveDefinite { pivot: j });
        }
        let dj = d.sqrt();
        l.set(j, j, dj);
        for i in (j + 1)..n {
            let v = s.get(i, j) - dot(&l.row(i)[..j], &row_j);
            l.set(i, j, v / dj);
        }
    }
    Ok(l)
}

/// Solves `S x = b` for symmetric positive definite `S` via Cholesky.
pub fn solve_spd(s: &SymmetricMatrix, b: &[f64]) -> Result<Vec<f64>, LinalgError> {
    let l = cholesky(s)?;
    Ok(chol_solve(&l, b))
}

/// Forward/back substitution with a precomputed Cholesky factor.
pub fn chol_solve(l: &Matrix, b: &[f64]) -> Vec<f64> {
    let n = l.rows();
    assert_eq!(b.len(), n, "chol_solve: dimension mismatch");
    let mut y = b.to_vec();
    for i in 0..n {
        let row = l.row(i);
        y[i] = (y[i] - dot(&row[..i], &y[..i])) / row[i];
    }
    // back substitution on L^T via row-contiguous updates
    for k in (0..n).rev() {
        let row = l.row(k);
        y[k] /= row[k];
        let yk = y[k];
        if yk != 0.0 {
            for (yj, lj) in y[..k].iter_mut().zip(&row[..k]) {
                *yj -= yk * lj;
            }
        }
    }
    y
}

/// Symmetric PSD square root: `R R = S` with `R` symmetric PSD.
///
/// Eigenvalues in `[-1e-10, 0)` are clamped to zero; anything more
/// negative is rejected.
pub fn sqrt_psd(s: &SymmetricMatrix) -> Result<SymmetricMatrix, LinalgError> {
    let (values, vectors) = sym_eig(s)?;
    let n = s.dim();
    let scale = s.max_abs().max(1.0);
    let mut roots = Vec::with_capacity(n);
    for &v in &values {
        if v < -1e-10 * scale {
            return Err(LinalgError::NotPsd { value: v });
        }
        roots.push(v.max(0.0).sqrt());
    }
    let mut out = Matrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let mut acc = 0.0;
            for k in 0..n {
                acc += vectors.get(i, k) * roots[k] * vectors.get(j, k);
            }
            out.set(i, j, acc);
            out.set(j, i, acc);
        }
    }
    Ok(SymmetricMatrix { mat: out })
}

const FIXED_POINT_TOL: f64 = 1e-12;
const FIXED_POINT_CAP: usize = 100_000;

/// Stabilizing solution of the discrete algebraic Riccati equation and the
/// associated LQR gain, by fixed-point iteration of the Riccati recursion:
///
/// `P <- A'PA - A'PB (R + B'PB)^-1 B'PA + Q`
///
/// starting from `Q`, with relative-change stopping at 1e-12 and a 1e5
/// iteration cap. Returns `(P_f, K_f)` with `K_f = (R + B'P_fB)^-1 B'P_fA`.
pub fn solve_dare(
    a: &Matrix,
    b: &Matrix,
    q: &SymmetricMatrix,
    r: &SymmetricMatrix,
) -> Result<(SymmetricMatrix, Matrix), LinalgError> {
    let n = q.dim();
    if !a.is_square() || a.rows() != n || b.rows() != n || r.dim() != b.cols() {
        return Err(LinalgError::DimensionMismatch(
            "solve_dare: inconsistent A, B, Q, R shapes".to_string(),
        ));
    }
    let at = a.transpose();
    let bt = b.transpose();
    let mut p = q.as_matrix().clone();
    let mut iterations = 0;
    loop {
        iterations += 1;
        if iterations > FIXED_POINT_CAP {
            return Err(LinalgError::DareDivergence { iterations: FIXED_POINT_CAP });
        }
        // S = R + B'PB, G = S^-1 B'PA
        let pb = p.matmul(b);
        let s_mat = SymmetricMatrix::symmetrized(r.as_matrix().add(&bt.matmul(&pb)))?;
        let bpa = bt.matmul(&p).matmul(a);
        let l = cholesky(&s_mat)?;
        let mut gain = Matrix::zeros(b.cols(), n);
        for j in 0..n {
            let col: Vec<f64> = (0..b.cols()).map(|i| bpa.get(i, j)).collect();
            let sol = chol_solve(&l, &col);
            for i in 0..b.cols() {
                gain.set(i, j, sol[i]);
            }
        }
        let next = at
            .matmul(&p)
            .matmul(a)
            .sub(&at.matmul(&pb).matmul(&gain))
            .add(q.as_matrix());
        let diff = next.sub(&p).max_abs();
        if !diff.is_finite() {
            return Err(LinalgError::DareDivergence { iterations });
        }
        let done = diff <= FIXED_POINT_TOL * (1.0 + next.max_abs());
        p = next;
        if done {
            break;
        }
    }
    let p_f = SymmetricMatrix::symmetrized(p)?;
    // K_f from the converged P
    let s_mat = SymmetricMatrix::symmetrized(r.as_matrix().add(&bt.matmul(&p_f.as_matrix().matmul(b))))?;
    let bpa = bt.matmul(p_f.as_matrix()).matmul(a);
    let l = cholesky(&s_mat)?;
    let mut k_f = Matrix::zeros(b.cols(), n);
    for j in 0..n {
        let col: Vec<f64> = (0..b.cols()).map(|i| bpa.get(i, j)).collect();
        let sol = chol_solve(&l, &col);
        for i in 0..b.cols() {
            k_f.set(i, j, sol[i]);
        }
    }
    let closed = a.sub(&b.matmul(&k_f));
    let rho = spectral_radius(&closed)?;
    if rho >= 1.0 {
        return Err(LinalgError::UnstableA { rho });
    }
    Ok((p_f, k_f))
}

/// Solves the discrete Lyapunov equation `A'PA - P = -Q` by fixed-point
/// iteration `P <- A'PA + Q` (relative-change stop at 1e-12, 1e5 cap).
pub fn solve_dlyap(a: &Matrix, q: &SymmetricMatrix) -> Result<SymmetricMatrix, LinalgError> {
    let n = q.dim();
    if !a.is_square() || a.rows() != n {
        return Err(LinalgError::DimensionMismatch(
            "solve_dlyap: A and Q dimensions differ".to_string(),
        ));
    }
    let rho = spectral_radius(a)?;
    if rho >= 1.0 {
        return Err(LinalgError::UnstableA { rho });
    }
    let at = a.transpose();
    let mut p = q.as_matrix().clone();
    for _ in 0..FIXED_POINT_CAP {
        let next = at.matmul(&p).matmul(a).add(q.as_matrix());
        let diff = next.sub(&p).max_abs();
        p = next;
        if diff <= FIXED_POINT_TOL * (1.0 + p.max_abs()) {
            return SymmetricMatrix::symmetrized(p);
        }
    }
    Err(LinalgError::DareDivergence { iterations: FIXED_POINT_CAP })
}

/// Spectral radius of a square matrix, via norm estimates of repeatedly
/// squared and renormalized powers (`||A^k||^(1/k)` with `k = 2^64`).
/// Needs no complex arithmetic and handles defective matrices.
pub fn spectral_radius(a: &Matrix) -> Result<f64, LinalgError> {
    if !a.is_square() {
        return Err(LinalgError::DimensionMismatch(format!(
            "spectral_radius: matrix must be square, got {}x{}",
            a.rows(),
            a.cols()
        )));
    }
    if a.rows() == 0 {
        return Ok(0.0);
    }
    let norm = a.frob_norm();
    if norm == 0.0 {
        return Ok(0.0);
    }
    let mut log_norm = norm.ln();
    let mut k = 1.0f64;
    let mut d = a.scale(1.0 / norm);
    for _ in 0..64 {
        let d2 = d.matmul(&d);
        let n2 = d2.frob_norm();
        if n2 == 0.0 {
            return Ok(0.0);
        }
        log_norm = 2.0 * log_norm + n2.ln();
        k *= 2.0;
        d = d2.scale(1.0 / n2);
    }
    Ok((log_norm / k).exp())
}

/// Least-squares solution of an overdetermined system `M z = t`
/// (`rows >= cols`) by Householder QR. Returns `None` when a diagonal of
/// `R` collapses to zero.
pub fn qr_least_squares(m: &Matrix, t: &[f64]) -> Option<Vec<f64>> {
    let rows = m.rows();
    let cols = m.cols();
    assert!(rows >= cols, "qr_least_squares: system must be tall");
    assert_eq!(t.len(), rows, "qr_least_squares: rhs length mismatch");
    let mut a = m.clone();
    let mut rhs = t.to_vec();
    for k in 0..cols {
        // Householder reflector for column k
        let mut norm = 0.0f64;
        for i in k..rows {
            norm += a.get(i, k) * a.get(i, k);
        }
        norm = norm.sqrt();
        if norm <= 1e-300 {
            return None;
        }
        let alpha = if a.get(k, k) >= 0.0 { -norm } else { norm };
        let mut v = vec![0.0; rows - k];
        v[0] = a.get(k, k) - alpha;
        for i in (k + 1)..rows {
            v[i - k] = a.get(i, k);
        }
        let vtv = dot(&v, &v);
        if vtv <= 1e-300 {
            continue;
        }
        // apply reflector to remaining columns and the rhs
        for j in k..cols {
            let mut acc = 0.0;
            for i in k..rows {
                acc += v[i - k] * a.get(i, j);
            }
            let s = 2.0 * acc / vtv;
            for i in k..rows {
                let val = a.get(i, j) - s * v[i - k];
                a.set(i, j, val);
            }
        }
        let mut acc = 0.0;
        for i in k..rows {
            acc += v[i - k] * rhs[i];
        }
        let s = 2.0 * acc / vtv;
        for i in k..rows {
            rhs[i] -= s * v[i - k];
        }
        a.set(k, k, alpha);
    }
    // back substitution on R z = (Q't)[..cols]
    let mut z = vec![0.0; cols];
    for i in (0..cols).rev() {
        let mut acc = rhs[i];
        for j in (i + 1)..cols {
            acc -= a.get(i, j) * z[j];
        }
        let d = a.get(i, i);
        if d.abs() <= 1e-300 {
            return None;
        }
        z[i] = acc / d;
    }
    Some(z)
}

/// LU factorization with partial pivoting, for the saddle-point systems in
/// QP polishing. Not meant for large or sparse problems.
pub struct LuFactors {
    lu: Matrix,
    perm: Vec<usize>,
}

impl LuFactors {
    pub fn new(a: Matrix) -> Result<Self, LinalgError> {
        assert!(a.is_square(), "LU requires a square matrix");
        let n = a.rows();
        let mut lu = a;
        let mut perm: Vec<usize> = (0..n).collect();
        for col in 0..n {
            let mut pivot = col;
            let mut best = lu.get(col, col).abs();
            for r in (col + 1)..n {
                let v = lu.get(r, col).abs();
                if v > best {
                    best = v;
                    pivot = r;
                }
            }
            if best <= 1e-300 {
                return Err(LinalgError::Singular);
            }
            if pivot != col {
                perm.swap(pivot, col);
                for j in 0..n {
                    let tmp = lu.get(col, j);
                    lu.set(col, j, lu.get(pivot, j));
                    lu.set(pivot, j, tmp);
                }
            }
            let d = lu.get(col, col);
            for r in (col + 1)..n {
                let f = lu.get(r, col) / d;
                lu.set(r, col, f);
                if f == 0.0 {
                    continue;
                }
                for j in (col + 1)..n {
                    let v = lu.get(r, j) - f * lu.get(col, j);
                    lu.set(r, j, v);
                }
            }
        }
        Ok(LuFactors { lu, perm })
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.lu.rows();
        assert_eq!(b.len(), n, "LU solve: dimension mismatch");
        let mut y: Vec<f64> = self.perm.iter().map(|&i| b[i]).collect();
        for i in 0..n {
            for k in 0..i {
                y[i] -= self.lu.get(i, k) * y[k];
            }
        }
        for i in (0..n).rev() {
            for k in (i + 1)..n {
                y[i] -= self.lu.get(i, k) * y[k];
            }
            y[i] /= self.lu.get(i, i);
        }
        y
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn paper_a() -> Matrix {
        Matrix::from_rows(&[vec![0.924, -0.100], vec![0.050, 1.000]]).unwrap()
    }

    fn paper_p() -> SymmetricMatrix {
        SymmetricMatrix::from_rows(&[vec![1.093, 0.554], vec![0.554, 2.915]]).unwrap()
    }

    /// Closed-form eigenvalues of a symmetric 2x2 via the characteristic
    /// polynomial; independent of the Jacobi path.
    fn eig2_oracle(s: &SymmetricMatrix) -> (f64, f64) {
        let tr = s.get(0, 0) + s.get(1, 1);
        let det = s.get(0, 0) * s.get(1, 1) - s.get(0, 1) * s.get(1, 0);
        let disc = (tr * tr - 4.0 * det).max(0.0).sqrt();
        ((tr - disc) / 2.0, (tr + disc) / 2.0)
    }

    #[test]
    fn matrix_new_rejects_non_finite() {
        assert!(matches!(
            Matrix::new(1, 2, vec![1.0, f64::NAN]),
            Err(LinalgError::NonFinite { .. })
        ));
        assert!(Matrix::new(2, 2, vec![0.0; 3]).is_err());
    }

    #[test]
    fn symmetric_rejects_asymmetry() {
        let m = Matrix::from_rows(&[vec![1.0, 2.0], vec![2.1, 1.0]]).unwrap();
        assert!(matches!(
            SymmetricMatrix::new(m),
            Err(LinalgError::NotSymmetric { .. })
        ));
    }

    #[test]
    fn sym_eig_identity_and_diagonal() {
        let (vals, _) = sym_eig(&SymmetricMatrix::identity(2)).unwrap();
        assert_eq!(vals, vec![1.0, 1.0]);
        let (vals, _) = sym_eig(&SymmetricMatrix::from_diag(&[2.0, 0.1]).unwrap()).unwrap();
        assert!((vals[0] - 0.1).abs() < 1e-14 && (vals[1] - 2.0).abs() < 1e-14);
    }

    #[test]
    fn sym_eig_matches_quadratic_formula_on_reference_p() {
        let p = paper_p();
        let (vals, vecs) = sym_eig(&p).unwrap();
        let (lo, hi) = eig2_oracle(&p);
        assert!((vals[0] - lo).abs() < 1e-10, "{} vs {lo}", vals[0]);
        assert!((vals[1] - hi).abs() < 1e-10, "{} vs {hi}", vals[1]);
        // orthonormal columns
        for i in 0..2 {
            for j in 0..2 {
                let d = dot(
                    &[vecs.get(0, i), vecs.get(1, i)],
                    &[vecs.get(0, j), vecs.get(1, j)],
                );
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((d - expect).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn sym_eig_reconstructs_random_matrices() {
        let mut state = 0x9e3779b97f4a7c15u64;
        let mut next = move || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        };
        for n in 1..=10usize {
            let mut m = Matrix::zeros(n, n);
            for i in 0..n {
                for j in i..n {
                    let v = next();
                    m.set(i, j, v);
                    m.set(j, i, v);
                }
            }
            let s = SymmetricMatrix::new(m).unwrap();
            let (vals, vecs) = sym_eig(&s).unwrap();
            // V diag(l) V' == S
            let mut err = 0.0f64;
            for i in 0..n {
                for j in 0..n {
                    let mut acc = 0.0;
                    for k in 0..n {
                        acc += vecs.get(i, k) * vals[k] * vecs.get(j, k);
                    }
                    err = err.max((acc - s.get(i, j)).abs());
                }
            }
            assert!(err < 1e-9, "reconstruction error {err} at n={n}");
        }
    }

    #[test]
    fn cholesky_identity_and_diagonal() {
        let l = cholesky(&SymmetricMatrix::identity(3)).unwrap();
        assert_eq!(l, Matrix::identity(3));
        let l = cholesky(&SymmetricMatrix::from_diag(&[0.005, 0.0075]).unwrap()).unwrap();
        assert!((l.get(0, 0) - 0.005f64.sqrt()).abs() < 1e-15);
        assert!((l.get(1, 1) - 0.0075f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn cholesky_rejects_singular() {
        // rank-1 matrix has a zero eigenvalue
        let s = SymmetricMatrix::from_rows(&[vec![1.0, 1.0], vec![1.0, 1.0]]).unwrap();
        assert!(matches!(
            cholesky(&s),
            Err(LinalgError::NotPositiveDefinite { pivot: 1 })
        ));
    }

    #[test]
    fn cholesky_residual_small() {
        let s = paper_p();
        let l = cholesky(&s).unwrap();
        let r = l.matmul(&l.transpose()).sub(s.as_matrix()).max_abs();
        assert!(r <= 1e-10);
    }

    #[test]
    fn sqrt_psd_diagonal_and_multiply_back() {
        let r = sqrt_psd(&SymmetricMatrix::from_diag(&[4.0, 9.0]).unwrap()).unwrap();
        assert!((r.get(0, 0) - 2.0).abs() < 1e-12 && (r.get(1, 1) - 3.0).abs() < 1e-12);

        // (P - A'PA) from the reference system: square of the root reproduces it
        let a = paper_a();
        let p = paper_p();
        let m = SymmetricMatrix::symmetrized(
            p.as_matrix().sub(&a.transpose().matmul(p.as_matrix()).matmul(&a)),
        )
        .unwrap();
        let root = sqrt_psd(&m).unwrap();
        let back = root.as_matrix().matmul(root.as_matrix());
        assert!(back.sub(m.as_matrix()).max_abs() < 1e-9);
    }

    #[test]
    fn sqrt_psd_rejects_indefinite() {
        let s = SymmetricMatrix::from_diag(&[1.0, -0.5]).unwrap();
        assert!(matches!(sqrt_psd(&s), Err(LinalgError::NotPsd { .. })));
    }

    #[test]
    fn dare_scalar_matches_quadratic_root() {
        // a=0.5, b=1, q=1, r=1: fixed point solves p^2 - 0.25 p - 1 = 0
        let a = Matrix::from_rows(&[vec![0.5]]).unwrap();
        let b = Matrix::from_rows(&[vec![1.0]]).unwrap();
        let q = SymmetricMatrix::from_diag(&[1.0]).unwrap();
        let r = SymmetricMatrix::from_diag(&[1.0]).unwrap();
        let (p, _k) = solve_dare(&a, &b, &q, &r).unwrap();
        let root = (0.25 + (0.0625f64 + 4.0).sqrt()) / 2.0;
        assert!((p.get(0, 0) - root).abs() < 1e-10, "{} vs {root}", p.get(0, 0));
    }

    #[test]
    fn dare_with_zero_b_reduces_to_lyapunov() {
        let a = paper_a();
        let b = Matrix::zeros(2, 1);
        let q = SymmetricMatrix::from_diag(&[2.0, 0.1]).unwrap();
        let r = SymmetricMatrix::from_diag(&[1.0]).unwrap();
        let (p, k) = solve_dare(&a, &b, &q, &r).unwrap();
        assert_eq!(k.max_abs(), 0.0);
        let lyap = solve_dlyap(&a, &q).unwrap();
        assert!(p.as_matrix().sub(lyap.as_matrix()).max_abs() < 1e-8);
    }

    #[test]
    fn dare_reference_system() {
        let a = paper_a();
        let b = Matrix::from_rows(&[vec![0.025], vec![0.000]]).unwrap();
        let q = SymmetricMatrix::from_diag(&[2.0, 0.1]).unwrap();
        let r = SymmetricMatrix::from_diag(&[1.0]).unwrap();
        let (p, k) = solve_dare(&a, &b, &q, &r).unwrap();
        // frozen from two independent solvers agreeing to 1e-10
        assert!((p.get(0, 0) - 14.1880980884).abs() < 1e-6);
        assert!((p.get(0, 1) - 1.2092688998).abs() < 1e-6);
        assert!((p.get(1, 1) - 28.1444277259).abs() < 1e-6);

        // exact LQR identity (A-BK)'P(A-BK) - P + Q + K'RK = 0
        let closed = a.sub(&b.matmul(&k));
        let resid = closed
            .transpose()
            .matmul(p.as_matrix())
            .matmul(&closed)
            .sub(p.as_matrix())
            .add(q.as_matrix())
            .add(&k.transpose().matmul(r.as_matrix()).matmul(&k));
        assert!(resid.max_abs() < 1e-8, "LQR identity residual {}", resid.max_abs());

        // Riccati identity residual
        let bt = b.transpose();
        let s = 1.0 + bt.matmul(p.as_matrix()).matmul(&b).get(0, 0);
        let bpa = bt.matmul(p.as_matrix()).matmul(&a);
        let riccati = a
            .transpose()
            .matmul(p.as_matrix())
            .matmul(&a)
            .sub(&bpa.transpose().matmul(&bpa).scale(1.0 / s))
            .add(q.as_matrix())
            .sub(p.as_matrix());
        assert!(riccati.max_abs() < 1e-9);
        assert!(spectral_radius(&a.sub(&b.matmul(&k))).unwrap() < 1.0);
    }

    #[test]
    fn dlyap_trivial_cases() {
        let q = SymmetricMatrix::from_diag(&[1.0, 2.0]).unwrap();
        let p = solve_dlyap(&Matrix::zeros(2, 2), &q).unwrap();
        assert!(p.as_matrix().sub(q.as_matrix()).max_abs() < 1e-14);

        let a = Matrix::from_rows(&[vec![0.5]]).unwrap();
        let q1 = SymmetricMatrix::from_diag(&[1.0]).unwrap();
        let p1 = solve_dlyap(&a, &q1).unwrap();
        assert!((p1.get(0, 0) - 4.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn dlyap_rejects_unstable() {
        let a = Matrix::from_rows(&[vec![1.01]]).unwrap();
        let q = SymmetricMatrix::from_diag(&[1.0]).unwrap();
        assert!(matches!(solve_dlyap(&a, &q), Err(LinalgError::UnstableA { .. })));
    }

    #[test]
    fn dlyap_agrees_with_direct_summation() {
        let a = Matrix::from_rows(&[vec![0.4, 0.2, 0.0], vec![-0.1, 0.3, 0.1], vec![0.0, 0.2, -0.5]])
            .unwrap();
        let q = SymmetricMatrix::from_diag(&[1.0, 0.5, 2.0]).unwrap();
        let p = solve_dlyap(&a, &q).unwrap();
        // sum_{i>=0} (A')^i Q A^i truncated once terms are negligible
        let mut acc = q.as_matrix().clone();
        let mut term = q.as_matrix().clone();
        let at = a.transpose();
        for _ in 0..200 {
            term = at.matmul(&term).matmul(&a);
            acc = acc.add(&term);
            if term.max_abs() < 1e-17 {
                break;
            }
        }
        assert!(p.as_matrix().sub(&acc).max_abs() < 1e-8);
    }

    #[test]
    fn dlyap_stationary_covariance_matches_long_iteration() {
        // transposed form: stationary covariance of x+ = Ax + w
        let a = paper_a();
        let sw = SymmetricMatrix::from_diag(&[0.005, 0.0075]).unwrap();
        let sigma = solve_dlyap(&a.transpose(), &sw).unwrap();
        // fixed-point residual
        let resid = a
            .matmul(sigma.as_matrix())
            .matmul(&a.transpose())
            .add(sw.as_matrix())
            .sub(sigma.as_matrix());
        assert!(resid.max_abs() <= 1e-10, "residual {}", resid.max_abs());
        // 1e4-step propagation oracle
        let mut s = Matrix::zeros(2, 2);
        for _ in 0..10_000 {
            s = a.matmul(&s).matmul(&a.transpose()).add(sw.as_matrix());
        }
        assert!(s.sub(sigma.as_matrix()).max_abs() < 1e-8);
    }

    #[test]
    fn spectral_radius_cases() {
        assert_eq!(spectral_radius(&Matrix::identity(3)).unwrap(), 1.0);
        let d = Matrix::from_rows(&[vec![0.2, 0.0], vec![0.0, -0.9]]).unwrap();
        assert!((spectral_radius(&d).unwrap() - 0.9).abs() < 1e-12);
        // complex pair: modulus is sqrt(det) by the 2x2 trace/determinant oracle
        let a = paper_a();
        let det = a.get(0, 0) * a.get(1, 1) - a.get(0, 1) * a.get(1, 0);
        let tr = a.get(0, 0) + a.get(1, 1);
        assert!(tr * tr - 4.0 * det < 0.0, "reference A should be a complex pair");
        assert!((spectral_radius(&a).unwrap() - det.sqrt()).abs() < 1e-8);
        // nilpotent
        let nil = Matrix::from_rows(&[vec![0.0, 1.0], vec![0.0, 0.0]]).unwrap();
        assert_eq!(spectral_radius(&nil).unwrap(), 0.0);
        // non-square rejected
        assert!(spectral_radius(&Matrix::zeros(2, 3)).is_err());
    }

    #[test]
    fn lu_solves_and_detects_singularity() {
        let a = Matrix::from_rows(&[vec![2.0, 1.0, 0.0], vec![1.0, 3.0, 1.0], vec![0.0, 1.0, 4.0]])
            .unwrap();
        let lu = LuFactors::new(a.clone()).unwrap();
        let x = lu.solve(&[1.0, 2.0, 3.0]);
        let back = a.matvec(&x);
        assert!(max_abs(&[back[0] - 1.0, back[1] - 2.0, back[2] - 3.0]) < 1e-12);

        let sing = Matrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 4.0]]).unwrap();
        assert!(LuFactors::new(sing).is_err());
    }
}
