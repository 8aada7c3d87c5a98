use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::kmeans::{kmeans, LLOYD_ITERATIONS};
use crate::linalg::{eigen_floor, spd_solve, symmetrize};
use crate::slds::inference::{emission_matrix, forward_backward_logs, transition_features, TransitionFeatures};
use crate::slds::params::{Manifold, RegimeDynamics, SldsParams, Variant};
use crate::trajectories::TrajectorySet;

pub const DEFAULT_REGIMES: usize = 4;
pub const DEFAULT_MAX_ITERS: usize = 200;
pub const DEFAULT_TOL: f64 = 1e-6;
pub const SIGMA_FLOOR: f64 = 1e-6;
const GRAM_JITTER: f64 = 1e-8;
const STARVATION_MASS: f64 = 1e-6;
const MAX_RESEEDS: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct EmConfig {
    pub n_regimes: usize,
    pub variant: Variant,
    pub max_iters: usize,
    pub tol: f64,
    pub seed: u64,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            n_regimes: DEFAULT_REGIMES,
            variant: Variant::Full,
            max_iters: DEFAULT_MAX_ITERS,
            tol: DEFAULT_TOL,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EmFit {
    pub params: SldsParams,
    /// Log-likelihood of each successive parameter set, starting with the
    /// initialization. Restarts after a starvation re-seed.
    pub trace: Vec<f64>,
    pub reseeds: usize,
}

/// Fits from K-means labels on standardized `(x, dx)` pairs.
pub fn em_fit(set: &TrajectorySet, manifold: Manifold, config: &EmConfig) -> Result<EmFit> {
    let feats = features(set, &manifold)?;
    check_config(&feats, &manifold, config)?;
    let labels = kmeans_labels(&feats, config.n_regimes, config.seed)?;
    run(feats, manifold, config, labels)
}

/// Fits from given zero-based hard labels, one per transition.
pub fn em_fit_from_labels(
    set: &TrajectorySet,
    manifold: Manifold,
    config: &EmConfig,
    labels: &[Vec<usize>],
) -> Result<EmFit> {
    let feats = features(set, &manifold)?;
    check_config(&feats, &manifold, config)?;
    if labels.len() != feats.len()
        || labels.iter().zip(&feats).any(|(l, f)| l.len() != f.len())
        || labels.iter().flatten().any(|&l| l >= config.n_regimes)
    {
        return Err(Error::Config("initial labels do not match the transitions".into()));
    }
    run(feats, manifold, config, labels.to_vec())
}

fn features(set: &TrajectorySet, manifold: &Manifold) -> Result<Vec<TransitionFeatures>> {
    set.trajectories()
        .iter()
        .map(|t| transition_features(t, manifold))
        .collect()
}

fn check_config(feats: &[TransitionFeatures], manifold: &Manifold, config: &EmConfig) -> Result<()> {
    let k_regimes = config.n_regimes;
    if k_regimes == 0 {
        return Err(Error::Config("need at least one regime".into()));
    }
    if config.variant == Variant::NoRegime && k_regimes != 1 {
        return Err(Error::Config("no_regime variant requires K = 1".into()));
    }
    if matches!((config.variant, manifold), (Variant::NoProjection, Manifold::Projected(_))) {
        return Err(Error::Config("no_projection variant requires the identity manifold".into()));
    }
    let n: usize = feats.iter().map(|f| f.len()).sum();
    let needed = k_regimes * (manifold.rank() + 1);
    if n < needed {
        return Err(Error::Config(format!(
            "{n} transitions cannot support {k_regimes} regimes of rank {} (need {needed})",
            manifold.rank()
        )));
    }
    Ok(())
}

fn kmeans_labels(feats: &[TransitionFeatures], k_regimes: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    let points: Vec<DVector<f64>> = feats
        .iter()
        .flat_map(|f| f.x.iter().zip(&f.dx))
        .map(|(x, dx)| DVector::from_iterator(x.len() + dx.len(), x.iter().chain(dx.iter()).cloned()))
        .collect();
    let dim = points[0].len();
    let n = points.len() as f64;
    let mean = points.iter().fold(DVector::zeros(dim), |acc, p| acc + p) / n;
    let mut scale = points
        .iter()
        .fold(DVector::zeros(dim), |acc: DVector<f64>, p| acc + (p - &mean).map(|v| v * v))
        / n;
    scale.apply(|v| *v = if *v > 0.0 { v.sqrt() } else { 1.0 });
    let standardized: Vec<DVector<f64>> = points
        .iter()
        .map(|p| (p - &mean).component_div(&scale))
        .collect();
    let flat = kmeans(&standardized, k_regimes, seed, LLOYD_ITERATIONS)?.labels;
    let mut out = Vec::with_capacity(feats.len());
    let mut at = 0;
    for f in feats {
        out.push(flat[at..at + f.len()].to_vec());
        at += f.len();
    }
    Ok(out)
}

/// Posterior statistics of one trajectory.
struct Stats {
    gamma: DMatrix<f64>,
    xi_sum: DMatrix<f64>,
    ll: f64,
}

fn regressor(x: &DVector<f64>, variant: Variant) -> DVector<f64> {
    if variant == Variant::NoStateDrift {
        return DVector::from_element(1, 1.0);
    }
    let mut z = DVector::zeros(x.len() + 1);
    z.rows_mut(0, x.len()).copy_from(x);
    z[x.len()] = 1.0;
    z
}

fn run(
    feats: Vec<TransitionFeatures>,
    manifold: Manifold,
    config: &EmConfig,
    labels: Vec<Vec<usize>>,
) -> Result<EmFit> {
    let k_regimes = config.n_regimes;
    let variant = config.variant;
    let init: Vec<Stats> = labels
        .iter()
        .map(|l| {
            let n = l.len();
            let gamma = DMatrix::from_fn(n, k_regimes, |i, j| if l[i] == j { 1.0 } else { 0.0 });
            let mut xi_sum = DMatrix::zeros(k_regimes, k_regimes);
            for w in l.windows(2) {
                xi_sum[(w[0], w[1])] += 1.0;
            }
            Stats { gamma, xi_sum, ll: 0.0 }
        })
        .collect();
    let mut reseeds = 0;
    let mut params = m_step(&feats, &manifold, variant, &init, None, 1.0, &mut reseeds)?;
    let mut trace: Vec<f64> = Vec::new();
    loop {
        let stats = e_step(&params, &feats)?;
        let ll: f64 = stats.iter().map(|s| s.ll).sum();
        let converged = trace
            .last()
            .is_some_and(|&prev| ll - prev < config.tol * ll.abs());
        trace.push(ll);
        if converged || trace.len() > config.max_iters {
            break;
        }
        let before = reseeds;
        let next = m_step(&feats, &manifold, variant, &stats, Some(&params), 0.0, &mut reseeds)?;
        if reseeds != before {
            trace.clear();
        }
        params = next;
    }
    Ok(EmFit {
        params,
        trace,
        reseeds,
    })
}

fn e_step(params: &SldsParams, feats: &[TransitionFeatures]) -> Result<Vec<Stats>> {
    let models = params.emission_models()?;
    feats
        .par_iter()
        .map(|f| {
            let log_e = emission_matrix(params, &models, f);
            let post = forward_backward_logs(params.pi(), params.trans(), &log_e)?;
            let k = params.n_regimes();
            let xi_sum = post.xi.iter().fold(DMatrix::zeros(k, k), |acc, x| acc + x);
            Ok(Stats {
                gamma: post.gamma,
                xi_sum,
                ll: post.log_likelihood,
            })
        })
        .collect()
}

/// Weighted maximum-likelihood update. `pseudo` is added to the counts
/// behind `π` and `T` (used only for the hard-label initialization).
fn m_step(
    feats: &[TransitionFeatures],
    manifold: &Manifold,
    variant: Variant,
    stats: &[Stats],
    prev: Option<&SldsParams>,
    pseudo: f64,
    reseeds: &mut usize,
) -> Result<SldsParams> {
    let k_regimes = stats[0].gamma.ncols();
    let rank = manifold.rank();

    let mut pi = DVector::from_element(k_regimes, pseudo);
    let mut counts = DMatrix::from_element(k_regimes, k_regimes, pseudo);
    for s in stats {
        pi += s.gamma.row(0).transpose();
        counts += &s.xi_sum;
    }
    pi /= pi.sum();
    let mut trans = DMatrix::zeros(k_regimes, k_regimes);
    for i in 0..k_regimes {
        let row_sum = counts.row(i).sum();
        if row_sum > 0.0 {
            trans.set_row(i, &(counts.row(i) / row_sum));
        } else if let Some(p) = prev {
            trans.set_row(i, &p.trans().row(i));
        } else {
            trans.row_mut(i).fill(1.0 / k_regimes as f64);
        }
    }

    let mut dynamics = Vec::with_capacity(k_regimes);
    for j in 0..k_regimes {
        let mass: f64 = stats.iter().map(|s| s.gamma.column(j).sum()).sum();
        if mass < STARVATION_MASS {
            if *reseeds == MAX_RESEEDS {
                return Err(Error::Starvation {
                    regime: j,
                    reseeds: *reseeds,
                });
            }
            *reseeds += 1;
            log::warn!("regime {j} starved (mass {mass:e}); re-seeding");
            dynamics.push(reseed(feats, variant, rank, prev, k_regimes)?);
            continue;
        }
        dynamics.push(regress(feats, variant, rank, |t, n| stats[t].gamma[(n, j)], mass)?);
    }
    SldsParams::new(pi, trans, dynamics, manifold.clone(), variant)
}

/// Weighted least squares of `dx` on `[x; 1]` (offset only without state
/// drift) and the weighted residual covariance.
fn regress(
    feats: &[TransitionFeatures],
    variant: Variant,
    rank: usize,
    weight: impl Fn(usize, usize) -> f64,
    mass: f64,
) -> Result<RegimeDynamics> {
    let p = if variant == Variant::NoStateDrift { 1 } else { rank + 1 };
    let mut gram = DMatrix::zeros(p, p);
    let mut cross = DMatrix::zeros(p, rank);
    for (t, f) in feats.iter().enumerate() {
        for n in 0..f.len() {
            let w = weight(t, n);
            if w == 0.0 {
                continue;
            }
            let z = regressor(&f.x[n], variant);
            gram.ger(w, &z, &z, 1.0);
            cross.ger(w, &z, &f.dx[n], 1.0);
        }
    }
    let coef = spd_solve(&gram, &cross, GRAM_JITTER)?;
    let (m, b) = if variant == Variant::NoStateDrift {
        (DMatrix::zeros(rank, rank), coef.row(0).transpose())
    } else {
        (
            coef.rows(0, rank).transpose(),
            coef.row(rank).transpose(),
        )
    };
    let mut sigma = DMatrix::zeros(rank, rank);
    for (t, f) in feats.iter().enumerate() {
        for n in 0..f.len() {
            let w = weight(t, n);
            if w == 0.0 {
                continue;
            }
            let r = &f.dx[n] - &m * &f.x[n] - &b;
            sigma.ger(w, &r, &r, 1.0);
        }
    }
    sigma /= mass;
    Ok(RegimeDynamics {
        m,
        b,
        sigma: eigen_floor(&symmetrize(&sigma), SIGMA_FLOOR),
    })
}

/// Re-fits a starved regime on the transitions the current model explains
/// worst.
fn reseed(
    feats: &[TransitionFeatures],
    variant: Variant,
    rank: usize,
    prev: Option<&SldsParams>,
    k_regimes: usize,
) -> Result<RegimeDynamics> {
    let mut scored: Vec<(f64, usize, usize)> = Vec::new();
    let models = prev.map(|p| p.emission_models()).transpose()?;
    for (t, f) in feats.iter().enumerate() {
        for n in 0..f.len() {
            let score = match (prev, &models) {
                (Some(p), Some(ms)) => p
                    .dynamics()
                    .iter()
                    .zip(ms)
                    .map(|(d, g)| g.eval(&(&f.dx[n] - d.drift(&f.x[n]))))
                    .fold(f64::NEG_INFINITY, f64::max),
                _ => -f.dx[n].norm_squared(),
            };
            scored.push((score, t, n));
        }
    }
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then((a.1, a.2).cmp(&(b.1, b.2))));
    let take = (scored.len() / (2 * k_regimes)).max(2 * (rank + 1)).min(scored.len());
    let mut chosen: Vec<Vec<bool>> = feats.iter().map(|f| vec![false; f.len()]).collect();
    for &(_, t, n) in &scored[..take] {
        chosen[t][n] = true;
    }
    regress(
        feats,
        variant,
        rank,
        |t, n| if chosen[t][n] { 1.0 } else { 0.0 },
        take as f64,
    )
}
