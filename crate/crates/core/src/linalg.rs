//! Small dense helpers on top of nalgebra for the p×p matrices used
//! throughout the pipeline (p ≤ 50).

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Result, ScedError};

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    let eig = SymmetricEigen::new(symmetrize(m));
    eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min)
}

pub fn is_spd(m: &DMatrix<f64>) -> bool {
    m.is_square() && m.iter().all(|v| v.is_finite()) && min_eigenvalue(m) > 0.0
}

/// Symmetric matrix power `m^alpha` through the eigendecomposition.
/// Requires strictly positive eigenvalues when `alpha < 0`.
pub fn sym_power(m: &DMatrix<f64>, alpha: f64) -> Result<DMatrix<f64>> {
    let eig = SymmetricEigen::new(symmetrize(m));
    if eig.eigenvalues.iter().any(|&v| v <= 0.0 || !v.is_finite()) {
        return Err(ScedError::NotSpd);
    }
    let d = DVector::from_iterator(
        eig.eigenvalues.len(),
        eig.eigenvalues.iter().map(|v| v.powf(alpha)),
    );
    let q = &eig.eigenvectors;
    Ok(symmetrize(&(q * DMatrix::from_diagonal(&d) * q.transpose())))
}

pub fn sym_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    sym_power(m, 0.5)
}

pub fn spd_inverse(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let chol = m.clone().cholesky().ok_or(ScedError::NotSpd)?;
    Ok(symmetrize(&chol.inverse()))
}

/// `out += scale * a aᵀ`.
pub fn add_outer(out: &mut DMatrix<f64>, a: &[f64], scale: f64) {
    let p = a.len();
    for r in 0..p {
        let ar = a[r] * scale;
        for c in 0..p {
            out[(r, c)] += ar * a[c];
        }
    }
}

/// `m · v` for a dense matrix and a slice.
pub fn mat_vec(m: &DMatrix<f64>, v: &[f64], out: &mut [f64]) {
    let (rows, cols) = m.shape();
    debug_assert_eq!(cols, v.len());
    for (r, o) in out.iter_mut().enumerate().take(rows) {
        let mut s = 0.0;
        for (c, vc) in v.iter().enumerate() {
            s += m[(r, c)] * vc;
        }
        *o = s;
    }
}

/// Lower Cholesky factor of an SPD matrix kept in row-major form for fast
/// quadratic forms `dᵀ Σ⁻¹ d = ‖L⁻¹ d‖²`.
#[derive(Debug, Clone)]
pub struct CholeskyMetric {
    p: usize,
    lower: Vec<f64>,
    log_det: f64,
}

impl CholeskyMetric {
    pub fn new(sigma: &DMatrix<f64>) -> Result<Self> {
        let chol = sigma.clone().cholesky().ok_or(ScedError::NotSpd)?;
        Ok(Self::from_lower(&chol.l()))
    }

    pub fn from_lower(l: &DMatrix<f64>) -> Self {
        let p = l.nrows();
        let mut lower = vec![0.0; p * p];
        let mut log_det = 0.0;
        for r in 0..p {
            for c in 0..=r {
                lower[r * p + c] = l[(r, c)];
            }
            log_det += 2.0 * l[(r, r)].ln();
        }
        CholeskyMetric { p, lower, log_det }
    }

    pub fn dim(&self) -> usize {
        self.p
    }

    /// `ln det Σ`.
    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    /// Squared Mahalanobis length of `diff`; `work` must hold `p` values.
    pub fn quad(&self, diff: &[f64], work: &mut [f64]) -> f64 {
        let p = self.p;
        let mut q = 0.0;
        for r in 0..p {
            let row = &self.lower[r * p..r * p + r];
            let mut s = diff[r];
            for (c, l) in row.iter().enumerate() {
                s -= l * work[c];
            }
            let z = s / self.lower[r * p + r];
            work[r] = z;
            q += z * z;
        }
        q
    }

    /// Squared Mahalanobis distance between two points.
    pub fn distance_sq(&self, x: &[f64], mu: &[f64], work: &mut [f64]) -> f64 {
        let p = self.p;
        let mut q = 0.0;
        for r in 0..p {
            let row = &self.lower[r * p..r * p + r];
            let mut s = x[r] - mu[r];
            for (c, l) in row.iter().enumerate() {
                s -= l * work[c];
            }
            let z = s / self.lower[r * p + r];
            work[r] = z;
            q += z * z;
        }
        q
    }
}
