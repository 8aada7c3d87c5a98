//! Switching linear dynamical system on the drift manifold.
//!
//! Transition `n` (from `h_{n-1}` to `h_n`) is governed by regime `z_n`,
//! with `z_1 ~ π` and `z_{n+1} ~ T[z_n, ·]`. In manifold coordinates
//! `dx_n = M_{z_n} x_{n-1} + b_{z_n} + η_n`, `η_n ~ N(0, Σ_{z_n})`.

mod em;
mod inference;
mod params;
mod predict;

use std::path::Path;

pub use em::{em_fit, em_fit_from_labels, EmConfig, EmFit, DEFAULT_MAX_ITERS, DEFAULT_REGIMES, DEFAULT_TOL, SIGMA_FLOOR};
pub use inference::{emission_logdensity, forward_backward, transition_features, RegimePosterior, TransitionFeatures};
pub use params::{DynamicsJson, Manifold, RegimeDynamics, SldsJson, SldsParams, Variant, SIGMA_MIN_EIGENVALUE};
pub use predict::{filter_predict, predict_one_step, predictive_weights, score_nll, simulate, smoothed_predict};

pub(crate) use predict::simulate_with;

use crate::error::Result;
use crate::trajectories::TrajectorySet;

/// CSV `traj_id,step,gamma_1..gamma_K` of smoothed posteriors.
pub fn write_posteriors(path: &Path, params: &SldsParams, set: &TrajectorySet) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let k = params.n_regimes();
    let mut header = vec!["traj_id".to_string(), "step".into()];
    header.extend((1..=k).map(|j| format!("gamma_{j}")));
    w.write_record(&header)?;
    for t in set.trajectories() {
        let post = forward_backward(params, &transition_features(t, params.manifold())?)?;
        for n in 0..post.gamma.nrows() {
            let mut row = vec![t.id.clone(), n.to_string()];
            row.extend(post.gamma.row(n).iter().map(|g| g.to_string()));
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}
