//! Small dense linear-algebra helpers shared by the emission model and the
//! M-step.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

pub(crate) const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Cholesky factor of a covariance together with `log det`.
#[derive(Debug, Clone)]
pub(crate) struct GaussianFactor {
    chol: Cholesky<f64, Dyn>,
    log_det: f64,
    dim: usize,
}

impl GaussianFactor {
    pub(crate) fn new(cov: &DMatrix<f64>) -> Option<Self> {
        let chol = Cholesky::new(cov.clone())?;
        let l = chol.l_dirty();
        let mut log_det = 0.0;
        for i in 0..cov.nrows() {
            let d = l[(i, i)];
            if !(d > 0.0) || !d.is_finite() {
                return None;
            }
            log_det += 2.0 * d.ln();
        }
        Some(Self {
            chol,
            log_det,
            dim: cov.nrows(),
        })
    }

    /// `log N(e | 0, Σ)`.
    pub(crate) fn log_density(&self, e: &DVector<f64>) -> f64 {
        let mut z = e.clone();
        // forward substitution with L gives L⁻¹ e, whose squared norm is the Mahalanobis term
        let l = self.chol.l_dirty();
        for i in 0..self.dim {
            let mut s = z[i];
            for k in 0..i {
                s -= l[(i, k)] * z[k];
            }
            z[i] = s / l[(i, i)];
        }
        -0.5 * (self.dim as f64 * LN_2PI + self.log_det + z.norm_squared())
    }

    pub(crate) fn l(&self) -> DMatrix<f64> {
        self.chol.l()
    }
}

/// Symmetrizes `m` and raises every eigenvalue to at least `floor`.
/// Returns the repaired matrix and whether the floor was active.
pub(crate) fn symmetrize_and_floor(m: &DMatrix<f64>, floor: f64) -> (DMatrix<f64>, bool) {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym.clone());
    if eig.eigenvalues.iter().all(|&v| v >= floor) {
        return (sym, false);
    }
    let clamped = eig.eigenvalues.map(|v| v.max(floor));
    let v = &eig.eigenvectors;
    let out = v * DMatrix::from_diagonal(&clamped) * v.transpose();
    ((&out + out.transpose()) * 0.5, true)
}

pub(crate) fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(m.clone())
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
}

/// Solves `X · S = rhs` for `X`, with `S` symmetric positive semidefinite.
///
/// The system is Jacobi-scaled to unit diagonal first. When the scaled matrix
/// is numerically singular (reciprocal condition below `rcond`), a ridge of
/// `ridge · trace/n` is added and the second return value is `true`.
pub(crate) fn solve_normal_right(rhs: &DMatrix<f64>, s: &DMatrix<f64>, ridge: f64, rcond: f64) -> (DMatrix<f64>, bool) {
    let n = s.nrows();
    let scale = DVector::from_iterator(
        n,
        (0..n).map(|i| {
            let d = s[(i, i)];
            if d > 0.0 {
                1.0 / d.sqrt()
            } else {
                1.0
            }
        }),
    );
    let mut m = DMatrix::from_fn(n, n, |i, j| s[(i, j)] * scale[i] * scale[j]);
    m = (&m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(m.clone());
    let max = eig.eigenvalues.iter().cloned().fold(0.0_f64, f64::max);
    let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    let singular = !(max > 0.0) || min <= rcond * max;
    let lambda = if singular { ridge * m.trace() / n as f64 } else { 0.0 };
    let mut lambda = lambda.max(if singular { f64::MIN_POSITIVE } else { 0.0 });
    let inv_eigs = loop {
        let vals: Vec<f64> = eig.eigenvalues.iter().map(|&v| v + lambda).collect();
        if vals.iter().all(|&v| v > 0.0) {
            break vals;
        }
        lambda = lambda.max(1e-12) * 10.0;
    };
    let v = &eig.eigenvectors;
    let inv = v * DMatrix::from_diagonal(&DVector::from_iterator(n, inv_eigs.iter().map(|&v| 1.0 / v))) * v.transpose();
    // X = rhs · D · M⁻¹ · D
    let dm = DMatrix::from_diagonal(&scale);
    (rhs * &dm * inv * &dm, singular)
}
