use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::linalg::{from_rows, min_eigenvalue, to_rows, GaussianLogDensity};
use crate::projection::ProjectionBasis;

pub const SIGMA_MIN_EIGENVALUE: f64 = 1e-8;
const SIMPLEX_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[default]
    Full,
    NoRegime,
    NoProjection,
    NoStateDrift,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoRegime => "no_regime",
            Variant::NoProjection => "no_projection",
            Variant::NoStateDrift => "no_state_drift",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Variant::Full),
            "no_regime" => Ok(Variant::NoRegime),
            "no_projection" => Ok(Variant::NoProjection),
            "no_state_drift" => Ok(Variant::NoStateDrift),
            other => Err(Error::Config(format!("unknown variant `{other}`"))),
        }
    }
}

/// Coordinates the dynamics live in: a fitted basis, or the full space
/// around a center for the no-projection ablation.
#[derive(Debug, Clone, PartialEq)]
pub enum Manifold {
    Projected(ProjectionBasis),
    Identity { center: DVector<f64> },
}

impl Manifold {
    pub fn dim(&self) -> usize {
        match self {
            Manifold::Projected(b) => b.dim(),
            Manifold::Identity { center } => center.len(),
        }
    }

    pub fn rank(&self) -> usize {
        match self {
            Manifold::Projected(b) => b.rank(),
            Manifold::Identity { center } => center.len(),
        }
    }

    pub fn center(&self) -> &DVector<f64> {
        match self {
            Manifold::Projected(b) => b.center(),
            Manifold::Identity { center } => center,
        }
    }

    pub fn project(&self, h: &DVector<f64>) -> Result<DVector<f64>> {
        match self {
            Manifold::Projected(b) => b.project(h),
            Manifold::Identity { center } => {
                check_dim(center.len(), h.len())?;
                Ok(h - center)
            }
        }
    }

    /// Manifold coordinates of a displacement (no centering).
    pub fn project_increment(&self, dh: &DVector<f64>) -> DVector<f64> {
        match self {
            Manifold::Projected(b) => b.basis().tr_mul(dh),
            Manifold::Identity { .. } => dh.clone(),
        }
    }

    /// Lifts a manifold displacement back to `R^D`.
    pub fn lift(&self, dx: &DVector<f64>) -> DVector<f64> {
        match self {
            Manifold::Projected(b) => b.lift(dx),
            Manifold::Identity { .. } => dx.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegimeDynamics {
    pub m: DMatrix<f64>,
    pub b: DVector<f64>,
    pub sigma: DMatrix<f64>,
}

impl RegimeDynamics {
    pub fn drift(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.m * x + &self.b
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SldsParams {
    pi: DVector<f64>,
    trans: DMatrix<f64>,
    dynamics: Vec<RegimeDynamics>,
    manifold: Manifold,
    variant: Variant,
}

fn check_simplex(v: &[f64], what: &str) -> Result<()> {
    if v.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
        return Err(Error::Parameter(format!("{what} has negative or non-finite entries")));
    }
    let s: f64 = v.iter().sum();
    if (s - 1.0).abs() > SIMPLEX_TOL {
        return Err(Error::Parameter(format!("{what} sums to {s}")));
    }
    Ok(())
}

impl SldsParams {
    pub fn new(
        pi: DVector<f64>,
        trans: DMatrix<f64>,
        dynamics: Vec<RegimeDynamics>,
        manifold: Manifold,
        variant: Variant,
    ) -> Result<Self> {
        let k_regimes = dynamics.len();
        if k_regimes == 0 {
            return Err(Error::Parameter("at least one regime required".into()));
        }
        check_dim(k_regimes, pi.len())?;
        if trans.shape() != (k_regimes, k_regimes) {
            return Err(Error::Parameter(format!(
                "transition matrix is {:?}, expected {k_regimes}x{k_regimes}",
                trans.shape()
            )));
        }
        check_simplex(pi.as_slice(), "initial distribution")?;
        for i in 0..k_regimes {
            let row: Vec<f64> = trans.row(i).iter().cloned().collect();
            check_simplex(&row, &format!("transition row {i}"))?;
        }
        let k = manifold.rank();
        for (j, d) in dynamics.iter().enumerate() {
            if d.m.shape() != (k, k) || d.b.len() != k || d.sigma.shape() != (k, k) {
                return Err(Error::Parameter(format!("regime {j} has wrong shapes for rank {k}")));
            }
            if (&d.sigma - d.sigma.transpose()).amax() > 1e-10 * d.sigma.amax().max(1.0) {
                return Err(Error::Parameter(format!("Sigma of regime {j} is not symmetric")));
            }
            if min_eigenvalue(&d.sigma) < SIGMA_MIN_EIGENVALUE * (1.0 - 1e-6) {
                return Err(Error::Parameter(format!("Sigma of regime {j} is not positive definite")));
            }
            if variant == Variant::NoStateDrift && d.m.amax() != 0.0 {
                return Err(Error::Parameter("no_state_drift requires M = 0".into()));
            }
        }
        match (variant, &manifold) {
            (Variant::NoRegime, _) if k_regimes != 1 => {
                return Err(Error::Parameter("no_regime requires K = 1".into()))
            }
            (Variant::NoProjection, Manifold::Projected(_)) => {
                return Err(Error::Parameter("no_projection requires the identity manifold".into()))
            }
            _ => {}
        }
        Ok(Self {
            pi,
            trans,
            dynamics,
            manifold,
            variant,
        })
    }

    pub fn n_regimes(&self) -> usize {
        self.dynamics.len()
    }

    pub fn pi(&self) -> &DVector<f64> {
        &self.pi
    }

    pub fn trans(&self) -> &DMatrix<f64> {
        &self.trans
    }

    pub fn dynamics(&self) -> &[RegimeDynamics] {
        &self.dynamics
    }

    pub fn manifold(&self) -> &Manifold {
        &self.manifold
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn rank(&self) -> usize {
        self.manifold.rank()
    }

    pub fn dim(&self) -> usize {
        self.manifold.dim()
    }

    /// Relabels regimes so that new regime `j` is old regime `perm[j]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Self> {
        let k = self.n_regimes();
        let mut seen = vec![false; k];
        if perm.len() != k || perm.iter().any(|&p| p >= k || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::Parameter("not a permutation".into()));
        }
        Ok(Self {
            pi: DVector::from_fn(k, |j, _| self.pi[perm[j]]),
            trans: DMatrix::from_fn(k, k, |i, j| self.trans[(perm[i], perm[j])]),
            dynamics: perm.iter().map(|&p| self.dynamics[p].clone()).collect(),
            manifold: self.manifold.clone(),
            variant: self.variant,
        })
    }

    /// Replaces the transition matrix, e.g. for poisoned steps.
    pub fn with_trans(&self, trans: DMatrix<f64>) -> Result<Self> {
        Self::new(
            self.pi.clone(),
            trans,
            self.dynamics.clone(),
            self.manifold.clone(),
            self.variant,
        )
    }

    pub(crate) fn emission_models(&self) -> Result<Vec<GaussianLogDensity>> {
        self.dynamics
            .iter()
            .map(|d| GaussianLogDensity::new(&d.sigma))
            .collect()
    }

    /// Stationary distribution of `T` (left eigenvector for eigenvalue 1),
    /// by power iteration on the lazy chain.
    pub fn stationary_distribution(&self) -> DVector<f64> {
        let k = self.n_regimes();
        let lazy = (&self.trans + DMatrix::identity(k, k)) * 0.5;
        let mut p = DVector::from_element(k, 1.0 / k as f64);
        for _ in 0..100_000 {
            let next = lazy.tr_mul(&p);
            let done = (&next - &p).amax() < 1e-15;
            p = next;
            if done {
                break;
            }
        }
        p
    }

    pub fn to_json(&self, basis_ref: &str) -> SldsJson {
        SldsJson {
            variant: self.variant,
            pi: self.pi.iter().cloned().collect(),
            trans: to_rows(&self.trans),
            dynamics: self
                .dynamics
                .iter()
                .map(|d| DynamicsJson {
                    m: to_rows(&d.m),
                    b: d.b.iter().cloned().collect(),
                    sigma: to_rows(&d.sigma),
                })
                .collect(),
            basis_ref: basis_ref.to_string(),
            center: match &self.manifold {
                Manifold::Identity { center } => Some(center.iter().cloned().collect()),
                Manifold::Projected(_) => None,
            },
        }
    }

    /// Rebuilds parameters; `basis` resolves `basis_ref` for projected models.
    pub fn from_json(json: &SldsJson, basis: Option<ProjectionBasis>) -> Result<Self> {
        let manifold = match (&json.center, basis) {
            (Some(c), _) => Manifold::Identity {
                center: DVector::from_vec(c.clone()),
            },
            (None, Some(b)) => Manifold::Projected(b),
            (None, None) => {
                return Err(Error::Parameter(format!(
                    "basis `{}` was not supplied",
                    json.basis_ref
                )))
            }
        };
        let dynamics = json
            .dynamics
            .iter()
            .map(|d| {
                Ok(RegimeDynamics {
                    m: from_rows(&d.m)?,
                    b: DVector::from_vec(d.b.clone()),
                    sigma: from_rows(&d.sigma)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(
            DVector::from_vec(json.pi.clone()),
            from_rows(&json.trans)?,
            dynamics,
            manifold,
            json.variant,
        )
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DynamicsJson {
    #[serde(rename = "M")]
    pub m: Vec<Vec<f64>>,
    pub b: Vec<f64>,
    #[serde(rename = "Sigma")]
    pub sigma: Vec<Vec<f64>>,
}

/// Serialized model. `basis_ref` names the basis file; identity-manifold
/// models carry their `center` inline instead.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SldsJson {
    pub variant: Variant,
    pub pi: Vec<f64>,
    pub trans: Vec<Vec<f64>>,
    pub dynamics: Vec<DynamicsJson>,
    pub basis_ref: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub center: Option<Vec<f64>>,
}
