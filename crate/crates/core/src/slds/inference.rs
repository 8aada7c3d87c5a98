use nalgebra::{DMatrix, DVector};

use crate::error::{check_dim, Error, Result};
use crate::linalg::GaussianLogDensity;
use crate::slds::params::{Manifold, SldsParams};
use crate::trajectories::Trajectory;

/// Per-transition regressors: `x[n]` is the projected source state and
/// `dx[n]` the projected increment.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionFeatures {
    pub x: Vec<DVector<f64>>,
    pub dx: Vec<DVector<f64>>,
}

impl TransitionFeatures {
    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }
}

pub fn transition_features(traj: &Trajectory, manifold: &Manifold) -> Result<TransitionFeatures> {
    check_dim(manifold.dim(), traj.dim())?;
    let states = traj.states();
    if states.len() < 2 {
        return Err(Error::InvalidTrajectory {
            id: traj.id.clone(),
            message: "needs at least 2 states".into(),
        });
    }
    let mut x = Vec::with_capacity(states.len() - 1);
    let mut dx = Vec::with_capacity(states.len() - 1);
    for w in states.windows(2) {
        x.push(manifold.project(&w[0])?);
        dx.push(manifold.project_increment(&(&w[1] - &w[0])));
    }
    Ok(TransitionFeatures { x, dx })
}

pub fn emission_logdensity(params: &SldsParams, regime: usize, x: &DVector<f64>, dx: &DVector<f64>) -> Result<f64> {
    let d = params
        .dynamics()
        .get(regime)
        .ok_or_else(|| Error::Parameter(format!("no regime {regime}")))?;
    check_dim(params.rank(), x.len())?;
    check_dim(params.rank(), dx.len())?;
    let g = GaussianLogDensity::new(&d.sigma)?;
    Ok(g.eval(&(dx - d.drift(x))))
}

/// `N x K` matrix of emission log-densities.
pub(crate) fn emission_matrix(
    params: &SldsParams,
    models: &[GaussianLogDensity],
    feats: &TransitionFeatures,
) -> DMatrix<f64> {
    let k = params.n_regimes();
    let mut out = DMatrix::zeros(feats.len(), k);
    for n in 0..feats.len() {
        for (j, (d, g)) in params.dynamics().iter().zip(models).enumerate() {
            out[(n, j)] = g.eval(&(&feats.dx[n] - d.drift(&feats.x[n])));
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegimePosterior {
    /// `N x K` smoothed marginals.
    pub gamma: DMatrix<f64>,
    /// `N - 1` pairwise posteriors over `(z_n, z_{n+1})`.
    pub xi: Vec<DMatrix<f64>>,
    /// `N x K` filtered marginals `P(z_n | dx_1..dx_n)`.
    pub filtered: DMatrix<f64>,
    pub log_likelihood: f64,
}

pub fn forward_backward(params: &SldsParams, feats: &TransitionFeatures) -> Result<RegimePosterior> {
    if feats.is_empty() {
        return Err(Error::Empty("no transitions".into()));
    }
    let models = params.emission_models()?;
    let log_e = emission_matrix(params, &models, feats);
    forward_backward_logs(params.pi(), params.trans(), &log_e)
}

fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY || m.is_nan() {
        return m;
    }
    m + xs.map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Scaled recursions on precomputed emission log-densities. Normalizers are
/// taken in log space so emissions far below `f64` range do not underflow.
pub(crate) fn forward_backward_logs(
    pi: &DVector<f64>,
    trans: &DMatrix<f64>,
    log_e: &DMatrix<f64>,
) -> Result<RegimePosterior> {
    let (n_steps, k) = log_e.shape();
    let mut alpha = DMatrix::zeros(n_steps, k);
    let mut ll = 0.0;
    let mut pred = pi.clone();
    let mut a = vec![0.0; k];
    for n in 0..n_steps {
        if n > 0 {
            pred = trans.tr_mul(&alpha.row(n - 1).transpose());
        }
        for j in 0..k {
            a[j] = pred[j].ln() + log_e[(n, j)];
        }
        let lc = log_sum_exp(a.iter().cloned());
        if !lc.is_finite() {
            return Err(Error::Underflow { step: n });
        }
        ll += lc;
        for j in 0..k {
            alpha[(n, j)] = (a[j] - lc).exp();
        }
    }

    // beta is renormalized every step; gamma and xi are normalized anyway
    let mut beta = DMatrix::from_element(n_steps, k, 1.0 / k as f64);
    let mut xi = Vec::with_capacity(n_steps.saturating_sub(1));
    let mut w = DVector::zeros(k);
    for n in (0..n_steps.saturating_sub(1)).rev() {
        let m = log_e.row(n + 1).max();
        for j in 0..k {
            w[j] = (log_e[(n + 1, j)] - m).exp() * beta[(n + 1, j)];
        }
        let b = trans * &w;
        let s = b.sum();
        if !(s > 0.0) || !s.is_finite() {
            return Err(Error::Underflow { step: n });
        }
        beta.set_row(n, &(b / s).transpose());

        let mut x = DMatrix::from_fn(k, k, |i, j| alpha[(n, i)] * trans[(i, j)] * w[j]);
        let total = x.sum();
        if !(total > 0.0) {
            return Err(Error::Underflow { step: n });
        }
        x /= total;
        xi.push(x);
    }
    xi.reverse();

    let mut gamma = alpha.component_mul(&beta);
    for n in 0..n_steps {
        let s = gamma.row(n).sum();
        if !(s > 0.0) {
            return Err(Error::Underflow { step: n });
        }
        gamma.row_mut(n).unscale_mut(s);
    }
    Ok(RegimePosterior {
        gamma,
        xi,
        filtered: alpha,
        log_likelihood: ll,
    })
}
