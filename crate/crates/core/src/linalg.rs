//! Small dense linear-algebra helpers shared by the estimators.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Cached factorization of a covariance matrix for repeated Gaussian
/// log-density evaluation.
#[derive(Debug, Clone)]
pub struct GaussianLogDensity {
    chol: Cholesky<f64, Dyn>,
    log_det: f64,
    dim: usize,
}

impl GaussianLogDensity {
    pub fn new(cov: &DMatrix<f64>) -> Result<Self> {
        let dim = cov.nrows();
        if cov.ncols() != dim {
            return Err(Error::Parameter("covariance is not square".into()));
        }
        let chol = cov
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Parameter("covariance is not positive definite".into()))?;
        let log_det = 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        if !log_det.is_finite() {
            return Err(Error::Parameter("covariance has non-finite determinant".into()));
        }
        Ok(Self { chol, log_det, dim })
    }

    /// Log density of `diff = x - mean`.
    pub fn eval(&self, diff: &DVector<f64>) -> f64 {
        let l = self.chol.l_dirty();
        // forward substitution on the lower factor
        let mut y = diff.clone_owned();
        for i in 0..self.dim {
            let mut s = y[i];
            for j in 0..i {
                s -= l[(i, j)] * y[j];
            }
            y[i] = s / l[(i, i)];
        }
        -0.5 * (y.norm_squared() + self.log_det + self.dim as f64 * LN_2PI)
    }

    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    /// Lower Cholesky factor, for sampling.
    pub fn factor(&self) -> DMatrix<f64> {
        self.chol.l()
    }
}

/// Solves `a x = b` for symmetric positive definite `a`, retrying once with a
/// diagonal jitter before giving up.
pub fn spd_solve(a: &DMatrix<f64>, b: &DMatrix<f64>, jitter: f64) -> Result<DMatrix<f64>> {
    if let Some(ch) = a.clone().cholesky() {
        return Ok(ch.solve(b));
    }
    if jitter > 0.0 {
        let n = a.nrows();
        let bumped = a + DMatrix::identity(n, n) * jitter;
        if let Some(ch) = bumped.cholesky() {
            log::debug!("normal matrix needed a {jitter:e} diagonal jitter");
            return Ok(ch.solve(b));
        }
    }
    Err(Error::Singular(format!("{}x{} system", a.nrows(), a.ncols())))
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Raises every eigenvalue of the symmetric matrix `m` below `floor` up to
/// `floor`. This is the constrained maximum-likelihood covariance under a
/// minimum-eigenvalue bound.
pub fn eigen_floor(m: &DMatrix<f64>, floor: f64) -> DMatrix<f64> {
    let sym = symmetrize(m);
    let eig = sym.clone().symmetric_eigen();
    if eig.eigenvalues.iter().all(|&l| l >= floor) {
        return sym;
    }
    let clipped = eig.eigenvalues.map(|l| l.max(floor));
    let v = &eig.eigenvectors;
    symmetrize(&(v * DMatrix::from_diagonal(&clipped) * v.transpose()))
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    symmetrize(m)
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
}

pub fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| m.row(i).iter().cloned().collect())
        .collect()
}

pub fn from_rows(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::Parameter("ragged matrix rows".into()));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

pub fn mean_vector(vs: &[DVector<f64>]) -> Option<DVector<f64>> {
    let first = vs.first()?;
    let mut acc = DVector::zeros(first.len());
    for v in vs {
        acc += v;
    }
    Some(acc / vs.len() as f64)
}

/// Population covariance of `vs` around `mean`.
pub fn covariance(vs: &[DVector<f64>], mean: &DVector<f64>) -> DMatrix<f64> {
    let d = mean.len();
    let mut acc = DMatrix::zeros(d, d);
    for v in vs {
        let c = v - mean;
        acc += &c * c.transpose();
    }
    acc / vs.len().max(1) as f64
}

/// A D x k matrix with orthonormal columns drawn from the Haar measure.
pub fn random_orthonormal<R: Rng + ?Sized>(d: usize, k: usize, rng: &mut R) -> DMatrix<f64> {
    let g = DMatrix::from_fn(d, k, |_, _| rng.sample::<f64, _>(StandardNormal));
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    // fix the QR sign ambiguity so the draw is uniform
    for j in 0..k {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q.columns(0, k).into_owned()
}

pub fn standard_normal_vector<R: Rng + ?Sized>(n: usize, rng: &mut R) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn gaussian_log_density_matches_closed_form() {
        let cov = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let g = GaussianLogDensity::new(&cov).unwrap();
        let diff = DVector::from_vec(vec![0.3, -0.7]);
        let inv = cov.clone().try_inverse().unwrap();
        let quad = (diff.transpose() * inv * &diff)[(0, 0)];
        let expected = -0.5 * (quad + cov.determinant().ln() + 2.0 * LN_2PI);
        assert!((g.eval(&diff) - expected).abs() < 1e-12);
    }

    #[test]
    fn eigen_floor_clips_only_small_eigenvalues() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1e-9]);
        let f = eigen_floor(&m, 1e-6);
        assert!((f[(0, 0)] - 1.0).abs() < 1e-12);
        assert!((f[(1, 1)] - 1e-6).abs() < 1e-15);
        let untouched = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
        assert_eq!(eigen_floor(&untouched, 1e-6), untouched);
    }

    #[test]
    fn random_orthonormal_columns() {
        let mut rng = seeded(3);
        let q = random_orthonormal(7, 3, &mut rng);
        let gram = q.transpose() * &q;
        assert!((gram - DMatrix::identity(3, 3)).amax() < 1e-12);
    }

    #[test]
    fn spd_solve_reports_singular() {
        let a = DMatrix::zeros(2, 2);
        let b = DMatrix::from_element(2, 1, 1.0);
        assert!(matches!(spd_solve(&a, &b, 0.0), Err(Error::Singular(_))));
    }
}
