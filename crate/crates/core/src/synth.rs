//! Random well-conditioned ground-truth SLDS generators for the oracles.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{random_orthonormal, standard_normal_vector};
use crate::projection::ProjectionBasis;
use crate::rng::{derive_seed, stream};
use crate::slds::{simulate, Manifold, RegimeDynamics, SldsParams, Variant};
use crate::trajectories::{Trajectory, TrajectorySet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_regimes: usize,
    pub rank: usize,
    pub dim: usize,
    pub n_traj: usize,
    /// Transitions per trajectory.
    pub steps: usize,
    /// Per-coordinate standard deviation of the manifold noise.
    pub noise: f64,
    /// Norm of each regime offset `b_j`.
    pub offset_scale: f64,
    /// Diagonal of `T`; the rest of each row is spread uniformly.
    pub persistence: f64,
    /// Range of the per-regime contraction rate `α_j` in `M_j ≈ -α_j I`.
    pub contraction: (f64, f64),
    /// When false every `M_j` is zero.
    pub state_drift: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_regimes: 2,
            rank: 4,
            dim: 16,
            n_traj: 200,
            steps: 100,
            noise: 0.1,
            offset_scale: 1.0,
            persistence: 0.9,
            contraction: (0.2, 0.4),
            state_drift: true,
        }
    }
}

const MIN_SEPARATION: f64 = 5.0;
const SKEW: f64 = 0.05;

#[derive(Debug, Clone)]
pub struct Synthetic {
    pub set: TrajectorySet,
    pub truth: SldsParams,
    /// Zero-based regime of every transition.
    pub paths: Vec<Vec<usize>>,
}

fn validate(c: &SynthConfig) -> Result<()> {
    let bad = |m: &str| Err(Error::Config(m.to_string()));
    if c.n_regimes == 0 || c.rank == 0 || c.rank > c.dim || c.n_traj == 0 || c.steps == 0 {
        return bad("synth sizes must be positive with rank <= dim");
    }
    if !(c.noise > 0.0) || !(c.offset_scale > 0.0) {
        return bad("noise and offset_scale must be positive");
    }
    if !(0.0..=1.0).contains(&c.persistence) {
        return bad("persistence must lie in [0, 1]");
    }
    let (lo, hi) = c.contraction;
    if !(0.0 < lo && lo <= hi && hi < 1.0) {
        return bad("contraction range must satisfy 0 < lo <= hi < 1");
    }
    if c.n_regimes > 1 && c.offset_scale * 2.0 < MIN_SEPARATION * c.noise {
        return bad("offset_scale too small to separate regimes by 5x the noise");
    }
    Ok(())
}

/// Draws ground-truth parameters on a random `rank`-dimensional affine
/// subspace of `R^dim`, shifted off the origin orthogonally to the plane.
pub fn random_params(config: &SynthConfig, seed: u64) -> Result<SldsParams> {
    validate(config)?;
    let (k_regimes, k) = (config.n_regimes, config.rank);
    let mut rng = stream(seed, 1);
    let basis = random_orthonormal(config.dim, k, &mut rng);

    let mut offsets: Vec<DVector<f64>> = Vec::with_capacity(k_regimes);
    let mut attempts = 0;
    while offsets.len() < k_regimes {
        attempts += 1;
        if attempts > 10_000 {
            return Err(Error::Config("could not place separated regime offsets".into()));
        }
        let dir = standard_normal_vector(k, &mut rng);
        let b = dir.normalize() * config.offset_scale;
        if offsets
            .iter()
            .all(|o| (o - &b).norm() >= MIN_SEPARATION * config.noise)
        {
            offsets.push(b);
        }
    }
    let dynamics = offsets
        .into_iter()
        .map(|b| {
            let m = if config.state_drift {
                let alpha = rng.random_range(config.contraction.0..=config.contraction.1);
                let g = DMatrix::from_fn(k, k, |_, _| rng.random::<f64>() - 0.5);
                DMatrix::identity(k, k) * -alpha + (&g - g.transpose()) * SKEW
            } else {
                DMatrix::zeros(k, k)
            };
            RegimeDynamics {
                m,
                b,
                sigma: DMatrix::identity(k, k) * config.noise.powi(2),
            }
        })
        .collect();
    let trans = if k_regimes == 1 {
        DMatrix::identity(1, 1)
    } else {
        let off = (1.0 - config.persistence) / (k_regimes - 1) as f64;
        DMatrix::from_fn(k_regimes, k_regimes, |i, j| if i == j { config.persistence } else { off })
    };
    let g = standard_normal_vector(config.dim, &mut rng);
    let center = (&g - &basis * basis.tr_mul(&g)) * 3.0;
    let basis = ProjectionBasis::from_parts(basis, vec![1.0; k], center)?;
    SldsParams::new(
        DVector::from_element(k_regimes, 1.0 / k_regimes as f64),
        trans,
        dynamics,
        Manifold::Projected(basis),
        Variant::Full,
    )
}

/// Rest point `-M⁻¹b` of a regime (or `b` itself when `M` is singular).
fn attractor(d: &RegimeDynamics) -> DVector<f64> {
    d.m.clone()
        .lu()
        .solve(&(-&d.b))
        .unwrap_or_else(|| d.b.clone())
}

/// Samples a trajectory set from freshly drawn ground truth.
pub fn generate(config: &SynthConfig, seed: u64) -> Result<Synthetic> {
    let truth = random_params(config, seed)?;
    sample(&truth, config, seed)
}

/// Samples `n_traj` trajectories from given parameters. Start states sit
/// near a random regime's rest point.
pub fn sample(truth: &SldsParams, config: &SynthConfig, seed: u64) -> Result<Synthetic> {
    let mut rng = stream(seed, 2);
    let lift = |x: &DVector<f64>| truth.manifold().lift(x);
    let rests: Vec<DVector<f64>> = truth.dynamics().iter().map(attractor).collect();

    let mut trajs = Vec::with_capacity(config.n_traj);
    let mut paths = Vec::with_capacity(config.n_traj);
    for i in 0..config.n_traj {
        let r = rng.random_range(0..rests.len());
        let x0 = &rests[r] + standard_normal_vector(truth.rank(), &mut rng) * 0.5;
        let h0 = truth.manifold().center() + lift(&x0);
        let (t, path) = simulate(truth, &h0, config.steps, derive_seed(seed, 1000 + i as u64))?;
        trajs.push(Trajectory::new(format!("traj-{i:04}"), "synth", "generator", t.states().to_vec())?);
        paths.push(path);
    }
    Ok(Synthetic {
        set: TrajectorySet::new(trajs)?,
        truth: truth.clone(),
        paths,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn offsets_are_separated() {
        let cfg = SynthConfig {
            n_regimes: 4,
            ..SynthConfig::default()
        };
        let p = random_params(&cfg, 5).unwrap();
        for i in 0..4 {
            for j in 0..i {
                let sep = (&p.dynamics()[i].b - &p.dynamics()[j].b).norm();
                assert!(sep >= 5.0 * cfg.noise);
            }
        }
    }

    #[test]
    fn counts_match_config() {
        let cfg = SynthConfig {
            n_traj: 7,
            steps: 12,
            ..SynthConfig::default()
        };
        let s = generate(&cfg, 3).unwrap();
        assert_eq!(s.set.len(), 7);
        assert_eq!(s.set.n_transitions(), 7 * 12);
        assert_eq!(s.set.dim(), 16);
    }

    #[test]
    fn deterministic() {
        let cfg = SynthConfig {
            n_traj: 3,
            steps: 5,
            ..SynthConfig::default()
        };
        assert_eq!(generate(&cfg, 9).unwrap().set, generate(&cfg, 9).unwrap().set);
    }
}
