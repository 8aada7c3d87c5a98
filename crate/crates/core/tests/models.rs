use cotdyn::belief_case::{
    adherent_occupancy, generate_scenario_data, run_belief_case, BeliefRunConfig, BeliefScenario, ScenarioConfig,
};
use cotdyn::harness::{fit_transfer_model, run_transfer, PipelineConfig};
use cotdyn::langevin::{density_ratio, linear_fit, stationary_density, transition_rate, trapezoid, uniform_grid, DoubleWell};
use cotdyn::linear_baseline::{fit_ridge_with, GlobalLinearModel, RidgePenalty};
use cotdyn::projection::{fit_projection, PcaTarget};
use cotdyn::rng::seeded;
use cotdyn::synth::{generate, SynthConfig};
use cotdyn::trajectories::{Trajectory, TrajectorySet};
use cotdyn::Error;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;

fn noisy_set(seed: u64, d: usize) -> TrajectorySet {
    let mut rng = seeded(seed);
    let trajs = (0..3)
        .map(|i| {
            let states = (0..8).map(|_| DVector::from_fn(d, |_, _| rng.sample(StandardNormal))).collect();
            Trajectory::new(format!("t{i}"), "m", "task", states).unwrap()
        })
        .collect();
    TrajectorySet::new(trajs).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    /// The fit is a stationary point of a strictly convex objective, so any
    /// perturbation of `A` or `c` raises it.
    #[test]
    fn ridge_minimizes_its_objective(seed in 0u64..10_000, lambda in 0.01f64..10.0, toward_zero: bool, i in 0usize..3, j in 0usize..3, step in -0.1f64..0.1) {
        prop_assume!(step.abs() > 1e-4);
        let penalty = if toward_zero { RidgePenalty::TowardZero } else { RidgePenalty::TowardIdentity };
        let set = noisy_set(seed, 3);
        let fit = fit_ridge_with(&set, lambda, penalty).unwrap();
        let base = fit.objective(&set, penalty);
        let mut a = fit.a().clone();
        a[(i, j)] += step;
        let moved_a = GlobalLinearModel::from_parts(a, fit.c().clone(), lambda);
        let mut c = fit.c().clone();
        c[i] += step;
        let moved_c = GlobalLinearModel::from_parts(fit.a().clone(), c, lambda);
        prop_assert!(moved_a.objective(&set, penalty) > base);
        prop_assert!(moved_c.objective(&set, penalty) > base);
    }
}

#[test]
fn ridge_recovers_noiseless_dynamics() {
    let a = DMatrix::from_row_slice(2, 2, &[0.9, 0.2, -0.1, 0.7]);
    let c = DVector::from_vec(vec![0.3, -0.5]);
    let mut rng = seeded(2);
    let trajs = (0..4)
        .map(|i| {
            let mut h = DVector::from_fn(2, |_, _| rng.sample::<f64, _>(StandardNormal) * 3.0);
            let mut states = vec![h.clone()];
            for _ in 0..10 {
                h = &a * &h + &c;
                states.push(h.clone());
            }
            Trajectory::new(format!("t{i}"), "m", "task", states).unwrap()
        })
        .collect();
    let fit = fit_ridge_with(&TrajectorySet::new(trajs).unwrap(), 0.0, RidgePenalty::TowardIdentity).unwrap();
    assert!((fit.a() - a).amax() < 1e-8);
    assert!((fit.c() - c).amax() < 1e-8);
}

#[test]
fn pca_on_increments_finds_the_plane() {
    let s = generate(&SynthConfig::default(), 1).unwrap();
    let cotdyn::slds::Manifold::Projected(truth) = s.truth.manifold() else { unreachable!() };
    let est = fit_projection(&s.set, 4, PcaTarget::Increments).unwrap();
    let overlap = truth.basis().tr_mul(est.basis());
    let sv = overlap.singular_values();
    assert!(sv.iter().all(|&v| v > 0.999), "principal cosines {sv:?}");
}

#[test]
fn stationary_density_is_normalized_and_symmetric() {
    for d in [0.1, 0.25, 1.0] {
        let model = DoubleWell::new(1.0, 1.0, d, 1e-3).unwrap();
        let grid = uniform_grid(-4.0, 4.0, 4001);
        let p = stationary_density(&model, &grid).unwrap();
        assert!((trapezoid(&grid, &p) - 1.0).abs() < 1e-6, "D={d}");
        for i in 0..grid.len() {
            assert!((p[i] - p[grid.len() - 1 - i]).abs() < 1e-12);
        }
        let ratio = density_ratio(&model, 1.0, 0.0).unwrap();
        assert!((ratio - (0.25 / d).exp()).abs() < 1e-9 * ratio);
    }
}

#[test]
fn crossing_counter_and_line_fit() {
    let series = [-1.0, -0.2, 0.3, 1.0, 0.1, -0.1, 0.9, -1.0, -0.6, 1.2];
    // Entries past +-0.5 alternate sides three times.
    let rate = transition_rate(&series, 0.5, 0.0, 0.5).unwrap();
    assert!((rate - 3.0 / (9.0 * 0.5)).abs() < 1e-12);
    assert!(matches!(transition_rate(&[0.1, 0.2], 1.0, 0.0, 0.5), Err(Error::Undefined(_))));
    let x = [1.0, 2.0, 4.0, 7.0];
    let y: Vec<f64> = x.iter().map(|v| 3.0 - 0.5 * v).collect();
    let (slope, intercept) = linear_fit(&x, &y).unwrap();
    assert!((slope + 0.5).abs() < 1e-12 && (intercept - 3.0).abs() < 1e-12);
}

#[test]
fn belief_data_respects_the_scenario() {
    let scenario = BeliefScenario::from_config(&ScenarioConfig::default(), 1).unwrap();
    let data = generate_scenario_data(&scenario, 20, 20, 2).unwrap();
    assert_eq!(data.set.len(), 40);
    for (i, beliefs) in data.beliefs.iter().enumerate() {
        assert_eq!(beliefs.len(), data.set.trajectories()[i].len());
        assert!(beliefs.iter().all(|b| (0.0..=1.0).contains(b)));
    }
    let clean: Vec<_> = data.paths.iter().zip(&data.poisoned).filter(|(_, p)| !**p).map(|(z, _)| z).collect();
    let poisoned: Vec<_> = data.paths.iter().zip(&data.poisoned).filter(|(_, p)| **p).map(|(z, _)| z).collect();
    assert_eq!(adherent_occupancy(&clean), 0.0);
    assert!(adherent_occupancy(&poisoned) > 0.5);
}

#[test]
fn clean_only_belief_run_matches_itself() {
    let cfg = BeliefRunConfig {
        n_clean: 40,
        n_poisoned: 0,
        ..BeliefRunConfig::default()
    };
    let run = run_belief_case(&cfg, 3).unwrap();
    let ks = run.report.ks_vs_clean.expect("clean finals exist");
    assert_eq!(ks.d, 0.0);
    assert_eq!(run.report.adherent_occupancy_clean, 0.0);
}

#[test]
fn transfer_checks_dimensions_and_handles_empty_lists() {
    let small = SynthConfig {
        n_traj: 30,
        steps: 30,
        ..SynthConfig::default()
    };
    let cfg = PipelineConfig {
        rank: 4,
        n_regimes: 2,
        min_jump: 0.0,
        ..PipelineConfig::default()
    };
    let train = generate(&small, 0).unwrap();
    assert!(run_transfer(&train.set, "a", &[], &cfg, 0).unwrap().is_empty());
    let other = generate(&SynthConfig { dim: 12, ..small.clone() }, 1).unwrap();
    let model = fit_transfer_model(&train.set, &cfg, 0).unwrap();
    assert!(matches!(model.score(&other.set), Err(Error::TransferIncompatible(_))));
    let rows = run_transfer(&train.set, "a", &[("a".into(), train.set.clone())], &cfg, 0).unwrap();
    assert_eq!(rows.len(), 1);
    assert!(rows[0].r2.is_finite() && rows[0].nll.is_finite());
}
