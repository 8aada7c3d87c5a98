//! Single-regime global drift `h_{t+1} ≈ A h_t + c` fitted by ridge
//! regression on increments.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::linalg::{from_rows, spd_solve, to_rows};
use crate::trajectories::TrajectorySet;

pub const DEFAULT_LAMBDA: f64 = 1.0;

/// Where the ridge penalty pulls `A`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RidgePenalty {
    /// `λ‖A - I‖_F²`: shrink toward identity dynamics (zero drift).
    #[default]
    TowardIdentity,
    /// `λ‖A‖_F²`.
    TowardZero,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlobalLinearModel {
    a: DMatrix<f64>,
    c: DVector<f64>,
    lambda: f64,
    fit_r2: Option<f64>,
}

impl GlobalLinearModel {
    pub fn from_parts(a: DMatrix<f64>, c: DVector<f64>, lambda: f64) -> Self {
        Self {
            a,
            c,
            lambda,
            fit_r2: None,
        }
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn c(&self) -> &DVector<f64> {
        &self.c
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    /// Pooled training R², absent when the training increments had no
    /// variance.
    pub fn fit_r2(&self) -> Option<f64> {
        self.fit_r2
    }

    pub fn dim(&self) -> usize {
        self.c.len()
    }

    /// Fitted drift `μ̂(h) = (A - I)h + c`.
    pub fn drift(&self, h: &DVector<f64>) -> DVector<f64> {
        &self.a * h - h + &self.c
    }

    pub fn predict_next(&self, h: &DVector<f64>) -> DVector<f64> {
        &self.a * h + &self.c
    }

    /// Ridge objective with the given penalty placement.
    pub fn objective(&self, set: &TrajectorySet, penalty: RidgePenalty) -> f64 {
        let sse: f64 = residuals(self, set).iter().map(|r| r.xi.norm_squared()).sum();
        let d = self.dim();
        let shrink = match penalty {
            RidgePenalty::TowardIdentity => &self.a - DMatrix::identity(d, d),
            RidgePenalty::TowardZero => self.a.clone(),
        };
        sse + self.lambda * shrink.norm_squared()
    }

    pub fn to_json(&self) -> RidgeJson {
        RidgeJson {
            a: to_rows(&self.a),
            c: self.c.iter().cloned().collect(),
            lambda: self.lambda,
            fit_r2: self.fit_r2,
        }
    }

    pub fn from_json(json: &RidgeJson) -> Result<Self> {
        let a = from_rows(&json.a)?;
        check_dim(a.nrows(), json.c.len())?;
        check_dim(a.ncols(), json.c.len())?;
        Ok(Self {
            a,
            c: DVector::from_vec(json.c.clone()),
            lambda: json.lambda,
            fit_r2: json.fit_r2,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RidgeJson {
    #[serde(rename = "A")]
    pub a: Vec<Vec<f64>>,
    pub c: Vec<f64>,
    pub lambda: f64,
    pub fit_r2: Option<f64>,
}

pub fn fit_ridge(set: &TrajectorySet, lambda: f64) -> Result<GlobalLinearModel> {
    fit_ridge_with(set, lambda, RidgePenalty::default())
}

/// Minimizes `Σ_t ‖Δh_t - (A - I)h_t - c‖² + λ‖A - S‖_F²` with `S = I` or
/// `S = 0`; the intercept is never penalized.
///
/// With `B = A - I` and regressor `z = [h; 1]`, the normal equations are
/// `(Σ z zᵀ + λ P) [Bᵀ; cᵀ] = Σ z Δhᵀ - λ [(I - S)ᵀ; 0]` where `P` is the
/// identity on the state block and zero on the intercept.
pub fn fit_ridge_with(
    set: &TrajectorySet,
    lambda: f64,
    penalty: RidgePenalty,
) -> Result<GlobalLinearModel> {
    if !(lambda >= 0.0) {
        return Err(Error::Domain(format!("lambda must be >= 0, got {lambda}")));
    }
    if set.n_transitions() == 0 {
        return Err(Error::Empty("ridge fit needs at least one transition".into()));
    }
    let d = set.dim();
    let p = d + 1;
    let mut gram = DMatrix::zeros(p, p);
    let mut cross = DMatrix::zeros(p, d);
    for t in set.trajectories() {
        for w in t.states().windows(2) {
            let z = w[0].clone().insert_row(d, 1.0);
            let dh = &w[1] - &w[0];
            gram.ger(1.0, &z, &z, 1.0);
            cross.ger(1.0, &z, &dh, 1.0);
        }
    }
    for i in 0..d {
        gram[(i, i)] += lambda;
    }
    if penalty == RidgePenalty::TowardZero {
        for i in 0..d {
            cross[(i, i)] -= lambda;
        }
    }
    let coef = spd_solve(&gram, &cross, 0.0)
        .map_err(|_| Error::Singular(format!("ridge normal matrix at lambda={lambda}")))?;
    let b = coef.rows(0, d).transpose();
    let c = coef.row(d).transpose();
    let mut model = GlobalLinearModel {
        a: b + DMatrix::identity(d, d),
        c,
        lambda,
        fit_r2: None,
    };
    model.fit_r2 = match r_squared(&model, set) {
        Ok(r2) => Some(r2),
        Err(_) => None,
    };
    Ok(model)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Residual {
    pub traj_id: String,
    /// Index of the source state `h_t`.
    pub step: usize,
    pub xi: DVector<f64>,
}

/// `ξ_t = Δh_t - [(A - I)h_t + c]` for every transition, in traversal order.
pub fn residuals(model: &GlobalLinearModel, set: &TrajectorySet) -> Vec<Residual> {
    let mut out = Vec::with_capacity(set.n_transitions());
    for t in set.trajectories() {
        for (step, w) in t.states().windows(2).enumerate() {
            out.push(Residual {
                traj_id: t.id.clone(),
                step,
                xi: &w[1] - &w[0] - model.drift(&w[0]),
            });
        }
    }
    out
}

/// Pooled `1 - Σ‖ξ_t‖² / Σ‖Δh_t - mean(Δh)‖²`.
pub fn r_squared(model: &GlobalLinearModel, set: &TrajectorySet) -> Result<f64> {
    check_dim(model.dim(), set.dim())?;
    let n = set.n_transitions();
    if n < 2 {
        return Err(Error::Undefined(format!("R² needs 2 transitions, found {n}")));
    }
    let mean = set.all_increments().fold(DVector::zeros(set.dim()), |acc, d| acc + d) / n as f64;
    let sst: f64 = set.all_increments().map(|d| (d - &mean).norm_squared()).sum();
    if sst <= 0.0 {
        return Err(Error::Undefined("increments have zero variance".into()));
    }
    let sse: f64 = residuals(model, set).iter().map(|r| r.xi.norm_squared()).sum();
    Ok(1.0 - sse / sst)
}
