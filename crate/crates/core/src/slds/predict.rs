use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;

use crate::error::{check_dim, Error, Result};
use crate::linalg::standard_normal_vector;
use crate::rng::seeded;
use crate::slds::inference::{forward_backward, transition_features};
use crate::slds::params::SldsParams;
use crate::trajectories::{Trajectory, TrajectorySet};

/// `h + V Σ_j γ_j (M_j V^T(h - center) + b_j)`.
pub fn predict_one_step(params: &SldsParams, gamma: &DVector<f64>, h: &DVector<f64>) -> Result<DVector<f64>> {
    check_dim(params.n_regimes(), gamma.len())?;
    let x = params.manifold().project(h)?;
    let mut drift = DVector::zeros(params.rank());
    for (g, d) in gamma.iter().zip(params.dynamics()) {
        if *g != 0.0 {
            drift.axpy(*g, &d.drift(&x), 1.0);
        }
    }
    Ok(h + params.manifold().lift(&drift))
}

/// Causal regime weights for each transition: `π` for the first, then the
/// one-step-ahead prediction `α̂_{n-1}ᵀT` from the states seen so far.
pub fn predictive_weights(params: &SldsParams, traj: &Trajectory) -> Result<DMatrix<f64>> {
    let feats = transition_features(traj, params.manifold())?;
    let post = forward_backward(params, &feats)?;
    let n = feats.len();
    let mut out = DMatrix::zeros(n, params.n_regimes());
    out.set_row(0, &params.pi().transpose());
    for t in 1..n {
        let pred = params.trans().tr_mul(&post.filtered.row(t - 1).transpose());
        out.set_row(t, &pred.transpose());
    }
    Ok(out)
}

fn predict_with(params: &SldsParams, traj: &Trajectory, weights: &DMatrix<f64>) -> Result<Vec<DVector<f64>>> {
    traj.states()[..traj.len() - 1]
        .iter()
        .enumerate()
        .map(|(n, h)| predict_one_step(params, &weights.row(n).transpose(), h))
        .collect()
}

/// Predicted `ĥ_{n+1}` for every transition using only states up to `h_n`.
pub fn filter_predict(params: &SldsParams, traj: &Trajectory) -> Result<Vec<DVector<f64>>> {
    let w = predictive_weights(params, traj)?;
    predict_with(params, traj, &w)
}

/// Same, with smoothed posteriors (these condition on the target increment).
pub fn smoothed_predict(params: &SldsParams, traj: &Trajectory) -> Result<Vec<DVector<f64>>> {
    let feats = transition_features(traj, params.manifold())?;
    let post = forward_backward(params, &feats)?;
    predict_with(params, traj, &post.gamma)
}

pub(crate) fn sample_categorical<R: Rng + ?Sized>(probs: impl Iterator<Item = f64>, rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, p) in probs.enumerate() {
        if p > 0.0 {
            last = i;
        }
        acc += p;
        if u < acc {
            return i;
        }
    }
    last
}

/// Samples `steps` transitions from `h0`. Returns the trajectory and the
/// zero-based regime of each transition.
pub fn simulate(params: &SldsParams, h0: &DVector<f64>, steps: usize, seed: u64) -> Result<(Trajectory, Vec<usize>)> {
    simulate_with(params, h0, steps, seed, |_, _| None)
}

/// Simulation with per-step overrides: `hook(n, z)` may return a
/// transition matrix to use for drawing regime `n` and an extra manifold
/// displacement added at that step.
pub(crate) fn simulate_with<F>(
    params: &SldsParams,
    h0: &DVector<f64>,
    steps: usize,
    seed: u64,
    mut hook: F,
) -> Result<(Trajectory, Vec<usize>)>
where
    F: FnMut(usize, usize) -> Option<(Option<DMatrix<f64>>, Option<DVector<f64>>)>,
{
    if steps == 0 {
        return Err(Error::Config("simulation needs at least one step".into()));
    }
    check_dim(params.dim(), h0.len())?;
    let mut rng = seeded(seed);
    let factors: Vec<DMatrix<f64>> = params
        .emission_models()?
        .iter()
        .map(|g| g.factor())
        .collect();
    let mut states = Vec::with_capacity(steps + 1);
    let mut path = Vec::with_capacity(steps);
    states.push(h0.clone());
    let mut z = sample_categorical(params.pi().iter().cloned(), &mut rng);
    for n in 0..steps {
        let mut displacement = None;
        if n > 0 {
            let overrides = hook(n, z);
            let trans = overrides
                .as_ref()
                .and_then(|o| o.0.as_ref())
                .unwrap_or(params.trans());
            z = sample_categorical(trans.row(z).iter().cloned(), &mut rng);
            displacement = overrides.and_then(|o| o.1);
        }
        let h = &states[n];
        let d = &params.dynamics()[z];
        let x = params.manifold().project(h)?;
        let mut step = d.drift(&x) + &factors[z] * standard_normal_vector(params.rank(), &mut rng);
        if let Some(extra) = displacement {
            step += extra;
        }
        let next = h + params.manifold().lift(&step);
        states.push(next);
        path.push(z);
    }
    let traj = Trajectory::new(format!("sim-{seed}"), "slds", "simulated", states)?;
    Ok((traj, path))
}

/// Returns `(total, per_transition)` negative log-likelihood.
pub fn score_nll(params: &SldsParams, set: &TrajectorySet) -> Result<(f64, f64)> {
    let n = set.n_transitions();
    if n == 0 {
        return Err(Error::Empty("no transitions to score".into()));
    }
    let lls: Vec<f64> = set
        .trajectories()
        .par_iter()
        .map(|t| {
            let feats = transition_features(t, params.manifold())?;
            Ok(forward_backward(params, &feats)?.log_likelihood)
        })
        .collect::<Result<_>>()?;
    let total = -lls.iter().sum::<f64>();
    Ok((total, total / n as f64))
}
