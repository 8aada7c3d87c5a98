use cotdyn::rng::seeded;
use cotdyn::slds::{
    em_fit, emission_logdensity, forward_backward, predictive_weights, score_nll, simulate, transition_features,
    EmConfig, Manifold, RegimeDynamics, SldsParams, Variant,
};
use cotdyn::synth::{generate, SynthConfig};
use cotdyn::trajectories::{Trajectory, TrajectorySet};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;

fn normal(rng: &mut impl Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn simplex(k: usize, rng: &mut impl Rng) -> Vec<f64> {
    let w: Vec<f64> = (0..k).map(|_| rng.random::<f64>() + 0.05).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

fn random_params(seed: u64, k: usize, d: usize) -> SldsParams {
    let mut rng = seeded(seed);
    let dynamics = (0..k)
        .map(|_| {
            let l = DMatrix::from_fn(d, d, |i, j| if i >= j { 0.4 * normal(&mut rng) } else { 0.0 });
            RegimeDynamics {
                m: DMatrix::from_fn(d, d, |_, _| 0.2 * normal(&mut rng)),
                b: DVector::from_fn(d, |_, _| normal(&mut rng)),
                sigma: &l * l.transpose() + DMatrix::identity(d, d) * 0.2,
            }
        })
        .collect();
    let pi = DVector::from_vec(simplex(k, &mut rng));
    let rows: Vec<f64> = (0..k).flat_map(|_| simplex(k, &mut rng)).collect();
    SldsParams::new(
        pi,
        DMatrix::from_row_slice(k, k, &rows),
        dynamics,
        Manifold::Identity { center: DVector::zeros(d) },
        Variant::NoProjection,
    )
    .unwrap()
}

fn random_trajectory(seed: u64, d: usize, n: usize) -> Trajectory {
    let mut rng = seeded(seed ^ 0x5eed);
    let states = (0..=n).map(|_| DVector::from_fn(d, |_, _| normal(&mut rng))).collect();
    Trajectory::new("t", "m", "task", states).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn posteriors_are_consistent(seed in 0u64..10_000, k in 1usize..4, n in 1usize..30) {
        let params = random_params(seed, k, 2);
        let traj = random_trajectory(seed, 2, n);
        let post = forward_backward(&params, &transition_features(&traj, params.manifold()).unwrap()).unwrap();
        prop_assert_eq!(post.gamma.nrows(), n);
        for t in 0..n {
            prop_assert!((post.gamma.row(t).sum() - 1.0).abs() < 1e-10);
        }
        for (t, xi) in post.xi.iter().enumerate() {
            for i in 0..k {
                prop_assert!((xi.row(i).sum() - post.gamma[(t, i)]).abs() < 1e-10);
                prop_assert!((xi.column(i).sum() - post.gamma[(t + 1, i)]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn relabeling_leaves_likelihood_unchanged(seed in 0u64..10_000, n in 1usize..20) {
        let params = random_params(seed, 3, 2);
        let set = TrajectorySet::new(vec![random_trajectory(seed, 2, n)]).unwrap();
        let base = score_nll(&params, &set).unwrap();
        for perm in [[1, 0, 2], [2, 0, 1], [2, 1, 0]] {
            let other = score_nll(&params.permute(&perm).unwrap(), &set).unwrap();
            prop_assert!((base.0 - other.0).abs() <= 1e-9 * base.0.abs().max(1.0));
        }
    }

    #[test]
    fn predictive_weights_start_at_pi(seed in 0u64..10_000, n in 1usize..20) {
        let params = random_params(seed, 3, 2);
        let w = predictive_weights(&params, &random_trajectory(seed, 2, n)).unwrap();
        for j in 0..3 {
            prop_assert!((w[(0, j)] - params.pi()[j]).abs() < 1e-12);
        }
        for t in 0..w.nrows() {
            prop_assert!((w.row(t).sum() - 1.0).abs() < 1e-10);
        }
    }
}

#[test]
fn emission_matches_gaussian_formula() {
    let params = random_params(3, 2, 3);
    let mut rng = seeded(9);
    for _ in 0..20 {
        let x = DVector::from_fn(3, |_, _| normal(&mut rng));
        let dx = DVector::from_fn(3, |_, _| normal(&mut rng));
        for j in 0..2 {
            let d = &params.dynamics()[j];
            let r = &dx - (&d.m * &x + &d.b);
            let inv = d.sigma.clone().try_inverse().unwrap();
            let quad = (r.transpose() * inv * &r)[(0, 0)];
            let expected = -0.5 * (3.0 * (2.0 * std::f64::consts::PI).ln() + d.sigma.determinant().ln() + quad);
            let got = emission_logdensity(&params, j, &x, &dx).unwrap();
            approx::assert_relative_eq!(got, expected, max_relative = 1e-10);
        }
    }
}

#[test]
fn em_traces_are_monotone() {
    let cfg = SynthConfig {
        n_traj: 30,
        steps: 40,
        ..SynthConfig::default()
    };
    let s = generate(&cfg, 4).unwrap();
    let Manifold::Projected(basis) = s.truth.manifold() else { unreachable!() };
    for variant in [Variant::Full, Variant::NoStateDrift] {
        for (seed, k) in [(0, 2), (1, 3)] {
            let fit = em_fit(
                &s.set,
                Manifold::Projected(basis.clone()),
                &EmConfig { n_regimes: k, variant, seed, ..EmConfig::default() },
            )
            .unwrap();
            assert!(fit.trace.len() >= 2);
            for w in fit.trace.windows(2) {
                assert!(w[1] >= w[0] - 1e-8 * w[0].abs(), "{variant:?} K={k}: {} -> {}", w[0], w[1]);
            }
        }
    }
}

#[test]
fn simulated_occupancy_tracks_stationary_distribution() {
    let mut params = random_params(11, 3, 2);
    let trans = DMatrix::from_row_slice(3, 3, &[0.8, 0.15, 0.05, 0.1, 0.7, 0.2, 0.3, 0.3, 0.4]);
    params = params.with_trans(trans).unwrap();
    let stationary = params.stationary_distribution();
    let (_, path) = simulate(&params, &DVector::zeros(2), 100_000, 5).unwrap();
    for j in 0..3 {
        let freq = path.iter().filter(|&&z| z == j).count() as f64 / path.len() as f64;
        assert!((freq - stationary[j]).abs() < 0.01, "regime {j}: {freq} vs {}", stationary[j]);
    }
}
