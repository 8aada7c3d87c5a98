//! Rank-k drift manifold by truncated PCA, plus variance and leakage
//! diagnostics.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::linalg::{from_rows, to_rows};
use crate::linear_baseline::GlobalLinearModel;
use crate::trajectories::TrajectorySet;

pub const DEFAULT_RANK: usize = 40;

/// Which vectors the principal subspace is fitted to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PcaTarget {
    #[default]
    Increments,
    States,
}

/// Orthonormal `D x k` basis of the drift manifold.
///
/// `center` is the mean hidden state; [`ProjectionBasis::project`] maps
/// `h` to `V_kᵀ(h - center)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionBasis {
    basis: DMatrix<f64>,
    singular_values: Vec<f64>,
    center: DVector<f64>,
}

impl ProjectionBasis {
    /// Builds a basis from explicit parts, checking orthonormality.
    pub fn from_parts(
        basis: DMatrix<f64>,
        singular_values: Vec<f64>,
        center: DVector<f64>,
    ) -> Result<Self> {
        let (d, k) = basis.shape();
        if k == 0 || k > d {
            return Err(Error::Rank {
                requested: k,
                available: d,
            });
        }
        check_dim(d, center.len())?;
        let gram = basis.transpose() * &basis;
        if (gram - DMatrix::identity(k, k)).amax() >= 1e-10 {
            return Err(Error::Parameter("basis columns are not orthonormal".into()));
        }
        if singular_values.windows(2).any(|w| w[1] > w[0]) || singular_values.iter().any(|&s| s < 0.0)
        {
            return Err(Error::Parameter(
                "singular values must be non-negative and non-increasing".into(),
            ));
        }
        Ok(Self {
            basis,
            singular_values,
            center,
        })
    }

    pub fn basis(&self) -> &DMatrix<f64> {
        &self.basis
    }

    pub fn singular_values(&self) -> &[f64] {
        &self.singular_values
    }

    pub fn center(&self) -> &DVector<f64> {
        &self.center
    }

    pub fn rank(&self) -> usize {
        self.basis.ncols()
    }

    pub fn dim(&self) -> usize {
        self.basis.nrows()
    }

    pub fn project(&self, h: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim(self.dim(), h.len())?;
        Ok(self.basis.tr_mul(&(h - &self.center)))
    }

    /// `V_k x`: maps manifold coordinates of a displacement back to `R^D`.
    pub fn lift(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.basis * x
    }

    pub fn reconstruct(&self, h: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(&self.center + self.lift(&self.project(h)?))
    }

    /// Same basis truncated to its leading `k` columns.
    pub fn truncate(&self, k: usize) -> Result<Self> {
        if k == 0 || k > self.rank() {
            return Err(Error::Rank {
                requested: k,
                available: self.rank(),
            });
        }
        Ok(Self {
            basis: self.basis.columns(0, k).into_owned(),
            singular_values: self.singular_values.clone(),
            center: self.center.clone(),
        })
    }

    /// Number of singular values above `rel_tol` times the largest one.
    pub fn numerical_rank(&self, rel_tol: f64) -> usize {
        let top = self.singular_values.first().copied().unwrap_or(0.0);
        self.singular_values
            .iter()
            .filter(|&&s| s > rel_tol * top)
            .count()
    }

    pub fn to_json(&self) -> BasisJson {
        BasisJson {
            center: self.center.iter().cloned().collect(),
            singular_values: self.singular_values.clone(),
            basis: to_rows(&self.basis),
            rank: self.rank(),
        }
    }

    pub fn from_json(json: &BasisJson) -> Result<Self> {
        let basis = from_rows(&json.basis)?;
        if basis.ncols() != json.rank {
            return Err(Error::Parameter(format!(
                "basis has {} columns but rank {}",
                basis.ncols(),
                json.rank
            )));
        }
        Self::from_parts(
            basis,
            json.singular_values.clone(),
            DVector::from_vec(json.center.clone()),
        )
    }
}

/// Serialized form of a [`ProjectionBasis`]; `basis` is row-major `D x k`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BasisJson {
    pub center: Vec<f64>,
    pub singular_values: Vec<f64>,
    pub basis: Vec<Vec<f64>>,
    pub rank: usize,
}

/// Truncated PCA of the centered target matrix via SVD.
///
/// Each column's sign is fixed so that its largest-magnitude entry is
/// positive.
pub fn fit_projection(set: &TrajectorySet, rank: usize, target: PcaTarget) -> Result<ProjectionBasis> {
    let d = set.dim();
    let rows: Vec<DVector<f64>> = match target {
        PcaTarget::Increments => set.all_increments().collect(),
        PcaTarget::States => set.all_states().cloned().collect(),
    };
    let n = rows.len();
    if rank == 0 || rank > d.min(n) {
        return Err(Error::Rank {
            requested: rank,
            available: d.min(n),
        });
    }
    let n_states = set.n_states() as f64;
    let center = set.all_states().fold(DVector::zeros(d), |acc, h| acc + h) / n_states;
    let target_mean = rows.iter().fold(DVector::zeros(d), |acc, r| acc + r) / n as f64;

    let data = DMatrix::from_fn(n, d, |i, j| rows[i][j] - target_mean[j]);
    let svd = data.svd(false, true);
    let v_t = svd.v_t.expect("right singular vectors requested");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));

    let singular_values: Vec<f64> = order.iter().map(|&i| svd.singular_values[i].max(0.0)).collect();
    let mut basis = DMatrix::zeros(d, rank);
    for (col, &i) in order.iter().take(rank).enumerate() {
        let mut v: DVector<f64> = v_t.row(i).transpose();
        let pivot = v.iter().cloned().fold(0.0f64, |best, x| {
            if x.abs() > best.abs() {
                x
            } else {
                best
            }
        });
        if pivot < 0.0 {
            v.neg_mut();
        }
        basis.set_column(col, &v);
    }
    Ok(ProjectionBasis {
        basis,
        singular_values,
        center,
    })
}

/// Cumulative variance ratios `r_j = Σ_{i≤j} σ_i² / Σ_i σ_i²` for
/// `j = 1..rank`.
pub fn variance_explained_curve(basis: &ProjectionBasis) -> Result<Vec<f64>> {
    curve_from_spectrum(&basis.singular_values, basis.rank())
}

pub fn curve_from_spectrum(singular_values: &[f64], rank: usize) -> Result<Vec<f64>> {
    let total: f64 = singular_values.iter().map(|s| s * s).sum();
    if singular_values.is_empty() || total <= 0.0 {
        return Err(Error::Undefined("variance ratio of an all-zero spectrum".into()));
    }
    let mut acc = 0.0;
    Ok(singular_values
        .iter()
        .take(rank)
        .map(|s| {
            acc += s * s;
            (acc / total).min(1.0)
        })
        .collect())
}

/// Relative Frobenius residual `ρ_k = sqrt(Σ_{i>k} σ_i² / Σ_i σ_i²)`.
pub fn residual_ratio(basis: &ProjectionBasis) -> Result<f64> {
    let curve = variance_explained_curve(basis)?;
    let captured = *curve.last().expect("rank >= 1");
    Ok((1.0 - captured).max(0.0).sqrt())
}

/// Bound on projection leakage: `ρ_k + L_μ ε / μ_min`.
pub fn leakage_upper_bound(rho_k: f64, lipschitz_mu: f64, eps: f64, mu_min: f64) -> Result<f64> {
    if !(mu_min > 0.0) {
        return Err(Error::Domain(format!(
            "drift magnitude floor must be positive, got {mu_min}"
        )));
    }
    if rho_k < 0.0 || lipschitz_mu < 0.0 || eps < 0.0 {
        return Err(Error::Domain("bound inputs must be non-negative".into()));
    }
    Ok(rho_k + lipschitz_mu * eps / mu_min)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResidualRatio {
    pub value: f64,
    /// States whose fitted drift norm fell below `1e-8`.
    pub skipped: usize,
}

/// Worst observed relative off-manifold drift
/// `max_h ‖(I - V_kV_kᵀ) μ̂(h)‖ / ‖μ̂(h)‖` with `μ̂(h) = (A - I)h + c`.
pub fn empirical_residual_ratio(
    set: &TrajectorySet,
    basis: &ProjectionBasis,
    drift: &GlobalLinearModel,
) -> Result<ResidualRatio> {
    check_dim(basis.dim(), set.dim())?;
    check_dim(drift.dim(), set.dim())?;
    let v = basis.basis();
    let mut best = f64::NEG_INFINITY;
    let mut skipped = 0;
    for h in set.all_states() {
        let mu = drift.drift(h);
        let norm = mu.norm();
        if norm < 1e-8 {
            skipped += 1;
            continue;
        }
        let off = &mu - v * v.tr_mul(&mu);
        best = best.max(off.norm() / norm);
    }
    if best == f64::NEG_INFINITY {
        return Err(Error::Undefined(
            "drift vanishes at every observed state".into(),
        ));
    }
    Ok(ResidualRatio {
        value: best,
        skipped,
    })
}
