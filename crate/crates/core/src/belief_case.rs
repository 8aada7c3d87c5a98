//! Poisoned-trajectory belief harness: a three-regime SLDS whose transitions
//! are biased toward the adherent regime at poison steps, a small MLP probe
//! from manifold coordinates to belief scores, and distributional checks.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{random_orthonormal, standard_normal_vector, to_rows};
use crate::metrics::{ks_statistic, prediction_r2, KsResult};
use crate::projection::{fit_projection, PcaTarget, ProjectionBasis};
use crate::rng::{derive_seed, seeded, stream};
use crate::slds::{em_fit, filter_predict, simulate_with, EmConfig, Manifold, RegimeDynamics, SldsParams, Variant};
use crate::trajectories::{Trajectory, TrajectorySet};

pub const FACTUAL: usize = 0;
pub const TRANSITIONAL: usize = 1;
pub const ADHERENT: usize = 2;
/// Belief targets of the factual, transitional and adherent regimes.
pub const TARGETS: [f64; 3] = [0.05, 0.5, 0.95];
pub const BELIEF_NOISE: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct BeliefScenario {
    pub base_params: SldsParams,
    /// Zero-based transition indices at which poison applies.
    pub poison_steps: Vec<usize>,
    pub poison_boost: DMatrix<f64>,
    pub poison_displacement: DVector<f64>,
    pub horizon: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    pub dim: usize,
    pub noise: f64,
    pub contraction: f64,
    /// Rest point of each regime in manifold coordinates.
    pub attractors: Vec<Vec<f64>>,
    pub pi: Vec<f64>,
    pub trans: Vec<Vec<f64>>,
    pub poison_boost: Vec<Vec<f64>>,
    pub poison_displacement: Vec<f64>,
    pub poison_steps: Vec<usize>,
    pub horizon: usize,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            dim: 8,
            noise: 0.05,
            contraction: 0.4,
            attractors: vec![vec![-2.0, 0.0, 0.0], vec![0.0, 1.5, 0.0], vec![2.0, 0.0, 0.0]],
            pi: vec![1.0, 0.0, 0.0],
            trans: vec![
                vec![0.97, 0.03, 0.0],
                vec![0.4, 0.6, 0.0],
                vec![0.0, 0.005, 0.995],
            ],
            poison_boost: vec![
                vec![0.1, 0.1, 0.8],
                vec![0.05, 0.15, 0.8],
                vec![0.0, 0.0, 1.0],
            ],
            poison_displacement: vec![1.0, 0.0, 0.0],
            poison_steps: vec![10, 20, 30],
            horizon: 50,
        }
    }
}

fn matrix(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>> {
    crate::linalg::from_rows(rows).map_err(|_| Error::Config(format!("{what} has ragged rows")))
}

impl BeliefScenario {
    /// Builds the scenario on a random orthonormal manifold of `R^dim`.
    pub fn from_config(config: &ScenarioConfig, seed: u64) -> Result<Self> {
        if config.attractors.len() != 3 {
            return Err(Error::Config("the belief scenario has exactly three regimes".into()));
        }
        let k = config.attractors[0].len();
        if k == 0 || k > config.dim || config.attractors.iter().any(|a| a.len() != k) {
            return Err(Error::Config("attractors must share a rank no larger than dim".into()));
        }
        if config.horizon < 2 {
            return Err(Error::Config("horizon must be at least 2".into()));
        }
        if !(config.noise > 0.0) || !(config.contraction > 0.0 && config.contraction < 1.0) {
            return Err(Error::Config("noise must be positive and contraction in (0, 1)".into()));
        }
        let mut rng = stream(seed, 11);
        let basis = random_orthonormal(config.dim, k, &mut rng);
        let basis = ProjectionBasis::from_parts(basis, vec![1.0; k], DVector::zeros(config.dim))?;
        let dynamics = config
            .attractors
            .iter()
            .map(|a| RegimeDynamics {
                m: DMatrix::identity(k, k) * -config.contraction,
                b: DVector::from_vec(a.clone()) * config.contraction,
                sigma: DMatrix::identity(k, k) * config.noise.powi(2),
            })
            .collect();
        let base = SldsParams::new(
            DVector::from_vec(config.pi.clone()),
            matrix(&config.trans, "trans")?,
            dynamics,
            Manifold::Projected(basis),
            Variant::Full,
        )
        .map_err(|e| Error::Config(e.to_string()))?;
        let scenario = Self {
            base_params: base,
            poison_steps: config.poison_steps.clone(),
            poison_boost: matrix(&config.poison_boost, "poison_boost")?,
            poison_displacement: DVector::from_vec(config.poison_displacement.clone()),
            horizon: config.horizon,
        };
        scenario.validate()?;
        Ok(scenario)
    }

    fn validate(&self) -> Result<()> {
        self.base_params
            .with_trans(self.poison_boost.clone())
            .map_err(|e| Error::Config(format!("poison_boost: {e}")))?;
        if self.poison_displacement.len() != self.base_params.rank() {
            return Err(Error::Config("poison displacement must live in the manifold".into()));
        }
        if self.poison_steps.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config("poison steps must be strictly increasing".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> ScenarioJson {
        let basis = match self.base_params.manifold() {
            Manifold::Projected(b) => Some(b.to_json()),
            Manifold::Identity { .. } => None,
        };
        ScenarioJson {
            base_params: self.base_params.to_json("inline"),
            basis,
            poison_steps: self.poison_steps.clone(),
            poison_boost: to_rows(&self.poison_boost),
            poison_displacement: self.poison_displacement.iter().cloned().collect(),
            horizon: self.horizon,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioJson {
    pub base_params: crate::slds::SldsJson,
    pub basis: Option<crate::projection::BasisJson>,
    pub poison_steps: Vec<usize>,
    pub poison_boost: Vec<Vec<f64>>,
    pub poison_displacement: Vec<f64>,
    pub horizon: usize,
}

#[derive(Debug, Clone)]
pub struct BeliefData {
    pub set: TrajectorySet,
    /// One belief per state.
    pub beliefs: Vec<Vec<f64>>,
    /// Zero-based regime of each transition.
    pub paths: Vec<Vec<usize>>,
    pub poisoned: Vec<bool>,
}

impl BeliefData {
    pub fn final_beliefs(&self) -> Vec<f64> {
        self.beliefs.iter().map(|b| *b.last().expect("non-empty")).collect()
    }

    pub fn select(&self, idx: &[usize]) -> BeliefData {
        BeliefData {
            set: self.set.select(idx),
            beliefs: idx.iter().map(|&i| self.beliefs[i].clone()).collect(),
            paths: idx.iter().map(|&i| self.paths[i].clone()).collect(),
            poisoned: idx.iter().map(|&i| self.poisoned[i]).collect(),
        }
    }
}

/// Belief of each state: state `h_n` (n ≥ 1) carries the regime of the
/// transition that produced it; `h_0` takes the first transition's regime.
fn beliefs_for_path<R: Rng + ?Sized>(path: &[usize], rng: &mut R) -> Vec<f64> {
    std::iter::once(path[0])
        .chain(path.iter().cloned())
        .map(|z| (TARGETS[z] + BELIEF_NOISE * rng.sample::<f64, _>(StandardNormal)).clamp(0.0, 1.0))
        .collect()
}

pub fn generate_scenario_data(
    scenario: &BeliefScenario,
    n_clean: usize,
    n_poisoned: usize,
    seed: u64,
) -> Result<BeliefData> {
    let params = &scenario.base_params;
    let mut trajs = Vec::with_capacity(n_clean + n_poisoned);
    let mut beliefs = Vec::new();
    let mut paths = Vec::new();
    let mut poisoned = Vec::new();
    let start = &params.dynamics()[FACTUAL];
    let rest = -(start.m.clone().lu().solve(&start.b).unwrap_or_else(|| start.b.clone()));
    for i in 0..n_clean + n_poisoned {
        let is_poisoned = i >= n_clean;
        let s = derive_seed(seed, i as u64);
        let mut rng = stream(s, 1);
        let noise_sd = params.dynamics()[FACTUAL].sigma[(0, 0)].sqrt();
        let x0 = &rest + standard_normal_vector(params.rank(), &mut rng) * noise_sd;
        let h0 = params.manifold().center() + params.manifold().lift(&x0);
        let (traj, path) = simulate_with(params, &h0, scenario.horizon, s, |n, _| {
            if is_poisoned && scenario.poison_steps.binary_search(&n).is_ok() {
                Some((Some(scenario.poison_boost.clone()), Some(scenario.poison_displacement.clone())))
            } else {
                None
            }
        })?;
        let tag = if is_poisoned { "poisoned" } else { "clean" };
        trajs.push(Trajectory::new(format!("{tag}-{i:04}"), "belief", tag, traj.states().to_vec())?);
        beliefs.push(beliefs_for_path(&path, &mut rng));
        paths.push(path);
        poisoned.push(is_poisoned);
    }
    Ok(BeliefData {
        set: TrajectorySet::new(trajs)?,
        beliefs,
        paths,
        poisoned,
    })
}

/// Fraction of values outside `[0.2, 0.8]`.
pub fn bimodal_mass(values: &[f64]) -> f64 {
    values.iter().filter(|&&v| !(0.2..=0.8).contains(&v)).count() as f64 / values.len().max(1) as f64
}

/// Share of transitions spent in the adherent regime.
pub fn adherent_occupancy(paths: &[&Vec<usize>]) -> f64 {
    let total: usize = paths.iter().map(|p| p.len()).sum();
    let hits: usize = paths.iter().flat_map(|p| p.iter()).filter(|&&z| z == ADHERENT).count();
    hits as f64 / total.max(1) as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub lr: f64,
    pub momentum: f64,
    pub batch: usize,
    pub max_epochs: usize,
    pub patience: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            lr: 0.05,
            momentum: 0.9,
            batch: 32,
            max_epochs: 500,
            patience: 10,
        }
    }
}

pub const HIDDEN: usize = 32;

/// `k → 32 ReLU → 1` regressor with logistic output and built-in input
/// standardization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeliefProbe {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    pub w1: Vec<Vec<f64>>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: f64,
    pub validation_mse: f64,
    /// Robust scale (1.4826 MAD) of validation residuals.
    pub residual_scale: f64,
    pub epochs: usize,
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

impl BeliefProbe {
    fn standardize(&self, x: &DVector<f64>) -> Vec<f64> {
        x.iter()
            .zip(&self.mean)
            .zip(&self.scale)
            .map(|((v, m), s)| (v - m) / s)
            .collect()
    }

    fn forward(&self, u: &[f64], hidden: &mut [f64]) -> f64 {
        let mut z = self.b2;
        for (h, ((w, b), w2)) in hidden.iter_mut().zip(self.w1.iter().zip(&self.b1).zip(&self.w2)) {
            let a = b + w.iter().zip(u).map(|(w, u)| w * u).sum::<f64>();
            *h = a.max(0.0);
            z += w2 * *h;
        }
        sigmoid(z)
    }

    pub fn predict(&self, x: &DVector<f64>) -> f64 {
        let mut hidden = vec![0.0; HIDDEN];
        self.forward(&self.standardize(x), &mut hidden)
    }

    fn mse(&self, xs: &[Vec<f64>], ys: &[f64]) -> f64 {
        let mut hidden = vec![0.0; HIDDEN];
        xs.iter()
            .zip(ys)
            .map(|(u, y)| (self.forward(u, &mut hidden) - y).powi(2))
            .sum::<f64>()
            / ys.len().max(1) as f64
    }
}

/// Trains on per-trajectory state/belief sequences, holding out 20% of the
/// trajectories for early stopping.
pub fn train_probe(
    states: &[Vec<DVector<f64>>],
    beliefs: &[Vec<f64>],
    seed: u64,
    config: &ProbeConfig,
) -> Result<BeliefProbe> {
    let n: usize = states.iter().map(Vec::len).sum();
    if states.len() != beliefs.len() || states.iter().zip(beliefs).any(|(s, b)| s.len() != b.len()) {
        return Err(Error::Config("states and beliefs must pair up".into()));
    }
    if n < 100 || states.len() < 2 {
        return Err(Error::Config(format!(
            "probe needs at least 100 samples from 2 trajectories, got {n}"
        )));
    }
    let k = states[0][0].len();
    let mut rng = seeded(seed);
    let mut order: Vec<usize> = (0..states.len()).collect();
    order.shuffle(&mut rng);
    let n_val = ((states.len() as f64) * 0.2).round().max(1.0) as usize;
    let (val_idx, train_idx) = order.split_at(n_val);

    let all: Vec<&DVector<f64>> = train_idx.iter().flat_map(|&i| states[i].iter()).collect();
    let mean: Vec<f64> = (0..k)
        .map(|d| all.iter().map(|x| x[d]).sum::<f64>() / all.len() as f64)
        .collect();
    let scale: Vec<f64> = (0..k)
        .map(|d| {
            let v = all.iter().map(|x| (x[d] - mean[d]).powi(2)).sum::<f64>() / all.len() as f64;
            if v > 0.0 {
                v.sqrt()
            } else {
                1.0
            }
        })
        .collect();

    let mut probe = BeliefProbe {
        mean,
        scale,
        w1: (0..HIDDEN)
            .map(|_| {
                (0..k)
                    .map(|_| rng.sample::<f64, _>(StandardNormal) * (2.0 / k as f64).sqrt())
                    .collect()
            })
            .collect(),
        b1: vec![0.0; HIDDEN],
        w2: (0..HIDDEN)
            .map(|_| rng.sample::<f64, _>(StandardNormal) * (1.0 / HIDDEN as f64).sqrt())
            .collect(),
        b2: 0.0,
        validation_mse: f64::INFINITY,
        residual_scale: 0.0,
        epochs: 0,
    };
    let gather = |idx: &[usize], probe: &BeliefProbe| -> (Vec<Vec<f64>>, Vec<f64>) {
        let xs = idx
            .iter()
            .flat_map(|&i| states[i].iter().map(|x| probe.standardize(x)))
            .collect();
        let ys = idx.iter().flat_map(|&i| beliefs[i].iter().cloned()).collect();
        (xs, ys)
    };
    let (train_x, train_y) = gather(train_idx, &probe);
    let (val_x, val_y) = gather(val_idx, &probe);

    let initial = probe.mse(&train_x, &train_y);
    let mut best = probe.clone();
    best.validation_mse = probe.mse(&val_x, &val_y);
    let mut stale = 0;
    let mut vel_w1 = vec![vec![0.0; k]; HIDDEN];
    let mut vel_b1 = vec![0.0; HIDDEN];
    let mut vel_w2 = vec![0.0; HIDDEN];
    let mut vel_b2 = 0.0;
    let mut samples: Vec<usize> = (0..train_x.len()).collect();
    let mut hidden = vec![0.0; HIDDEN];
    for epoch in 1..=config.max_epochs {
        samples.shuffle(&mut rng);
        for batch in samples.chunks(config.batch.max(1)) {
            let mut g_w1 = vec![vec![0.0; k]; HIDDEN];
            let mut g_b1 = vec![0.0; HIDDEN];
            let mut g_w2 = vec![0.0; HIDDEN];
            let mut g_b2 = 0.0;
            for &s in batch {
                let u = &train_x[s];
                let out = probe.forward(u, &mut hidden);
                let dz = 2.0 * (out - train_y[s]) * out * (1.0 - out) / batch.len() as f64;
                g_b2 += dz;
                for h in 0..HIDDEN {
                    g_w2[h] += dz * hidden[h];
                    if hidden[h] > 0.0 {
                        let dh = dz * probe.w2[h];
                        g_b1[h] += dh;
                        for (g, x) in g_w1[h].iter_mut().zip(u) {
                            *g += dh * x;
                        }
                    }
                }
            }
            let (lr, mu) = (config.lr, config.momentum);
            for h in 0..HIDDEN {
                for d in 0..k {
                    vel_w1[h][d] = mu * vel_w1[h][d] - lr * g_w1[h][d];
                    probe.w1[h][d] += vel_w1[h][d];
                }
                vel_b1[h] = mu * vel_b1[h] - lr * g_b1[h];
                probe.b1[h] += vel_b1[h];
                vel_w2[h] = mu * vel_w2[h] - lr * g_w2[h];
                probe.w2[h] += vel_w2[h];
            }
            vel_b2 = mu * vel_b2 - lr * g_b2;
            probe.b2 += vel_b2;
        }
        let train_loss = probe.mse(&train_x, &train_y);
        if !train_loss.is_finite() || train_loss > 10.0 * initial {
            return Err(Error::LearningRate(format!(
                "training loss {train_loss} exceeded 10x the initial {initial} at epoch {epoch}"
            )));
        }
        let val = probe.mse(&val_x, &val_y);
        if val < best.validation_mse {
            best = probe.clone();
            best.validation_mse = val;
            best.epochs = epoch;
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.patience {
                break;
            }
        }
    }
    let mut residuals: Vec<f64> = val_x
        .iter()
        .zip(&val_y)
        .map(|(u, y)| (y - best.forward(u, &mut hidden)).abs())
        .collect();
    residuals.sort_by(f64::total_cmp);
    best.residual_scale = 1.4826 * residuals[residuals.len() / 2];
    Ok(best)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeliefEvaluation {
    /// One-step R² of manifold increments under causal regime weights.
    pub r2_hidden: f64,
    /// Same, for a predictor that always adds the mean training increment.
    pub r2_mean_increment: f64,
    pub final_belief_accuracy: f64,
    pub ks_final: KsResult,
    pub simulated_final: Vec<f64>,
    pub true_final: Vec<f64>,
}

/// Scores a fitted SLDS and probe on held-out trajectories. The simulated
/// final belief is the probe reading of the one-step prediction of the last
/// state, plus noise at the probe's validation residual scale.
pub fn evaluate_belief_prediction(
    slds: &SldsParams,
    probe: &BeliefProbe,
    test: &TrajectorySet,
    beliefs: &[Vec<f64>],
    mean_increment: &DVector<f64>,
    seed: u64,
) -> Result<BeliefEvaluation> {
    if test.is_empty() {
        return Err(Error::Empty("belief test set is empty".into()));
    }
    let manifold = slds.manifold();
    let mut rng = seeded(seed);
    let (mut pred, mut base, mut actual) = (Vec::new(), Vec::new(), Vec::new());
    let mut simulated_final = Vec::with_capacity(test.len());
    let mut true_final = Vec::with_capacity(test.len());
    let mut hits = 0;
    for (t, b) in test.trajectories().iter().zip(beliefs) {
        let next = filter_predict(slds, t)?;
        for (n, w) in t.states().windows(2).enumerate() {
            pred.push(manifold.project_increment(&(&next[n] - &w[0])));
            actual.push(manifold.project_increment(&(&w[1] - &w[0])));
            base.push(mean_increment.clone());
        }
        let last = next.last().expect("at least one transition");
        let g: f64 = rng.sample(StandardNormal);
        let sim = (probe.predict(&manifold.project(last)?) + probe.residual_scale * g).clamp(0.0, 1.0);
        let truth = *b.last().expect("beliefs per state");
        if (sim > 0.5) == (truth > 0.5) {
            hits += 1;
        }
        simulated_final.push(sim);
        true_final.push(truth);
    }
    Ok(BeliefEvaluation {
        r2_hidden: prediction_r2(&pred, &actual)?,
        r2_mean_increment: prediction_r2(&base, &actual)?,
        final_belief_accuracy: hits as f64 / test.len() as f64,
        ks_final: ks_statistic(&simulated_final, &true_final)?,
        simulated_final,
        true_final,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BeliefRunConfig {
    pub scenario: ScenarioConfig,
    pub n_clean: usize,
    pub n_poisoned: usize,
    pub n_regimes: usize,
    pub rank: usize,
    pub probe: ProbeConfig,
}

impl Default for BeliefRunConfig {
    fn default() -> Self {
        Self {
            scenario: ScenarioConfig::default(),
            n_clean: 100,
            n_poisoned: 100,
            n_regimes: 3,
            rank: 3,
            probe: ProbeConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeliefReport {
    pub n_clean: usize,
    pub n_poisoned: usize,
    pub bimodal_mass: f64,
    pub ablated_upper_mass: f64,
    pub adherent_occupancy_clean: f64,
    pub adherent_occupancy_poisoned: f64,
    /// Final beliefs of the whole set against the clean subset.
    pub ks_vs_clean: Option<KsResult>,
    pub probe_validation_mse: f64,
    pub probe_residual_scale: f64,
    pub slds_log_likelihood: f64,
    pub evaluation: BeliefEvaluation,
}

#[derive(Debug, Clone)]
pub struct BeliefRun {
    pub scenario: BeliefScenario,
    pub data: BeliefData,
    pub report: BeliefReport,
    pub fit: crate::slds::EmFit,
    pub probe: BeliefProbe,
}

/// Interleaved 80/20 split of the clean and of the poisoned trajectories.
fn split(data: &BeliefData, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut rng = seeded(seed);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for flag in [false, true] {
        let mut idx: Vec<usize> = (0..data.poisoned.len()).filter(|&i| data.poisoned[i] == flag).collect();
        idx.shuffle(&mut rng);
        let n_test = (idx.len() as f64 * 0.2).round() as usize;
        test.extend_from_slice(&idx[..n_test]);
        train.extend_from_slice(&idx[n_test..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}

pub fn run_belief_case(config: &BeliefRunConfig, seed: u64) -> Result<BeliefRun> {
    let scenario = BeliefScenario::from_config(&config.scenario, derive_seed(seed, 1))?;
    let data = generate_scenario_data(&scenario, config.n_clean, config.n_poisoned, derive_seed(seed, 2))?;
    let finals = data.final_beliefs();
    let ablated = generate_scenario_data(&scenario, config.n_clean + config.n_poisoned, 0, derive_seed(seed, 2))?;
    let ablated_finals = ablated.final_beliefs();
    let clean_finals: Vec<f64> = finals
        .iter()
        .zip(&data.poisoned)
        .filter(|(_, &p)| !p)
        .map(|(f, _)| *f)
        .collect();

    let (train_idx, test_idx) = split(&data, derive_seed(seed, 3));
    if test_idx.is_empty() || train_idx.len() < 2 {
        return Err(Error::Config("belief case needs at least 2 training and 1 test trajectory".into()));
    }
    let train = data.select(&train_idx);
    let test = data.select(&test_idx);

    let basis = fit_projection(&train.set, config.rank, PcaTarget::States)?;
    let manifold = Manifold::Projected(basis);
    let fit = em_fit(
        &train.set,
        manifold.clone(),
        &EmConfig {
            n_regimes: config.n_regimes,
            seed: derive_seed(seed, 4),
            ..EmConfig::default()
        },
    )?;
    let projected: Vec<Vec<DVector<f64>>> = train
        .set
        .trajectories()
        .iter()
        .map(|t| t.states().iter().map(|h| manifold.project(h)).collect())
        .collect::<Result<_>>()?;
    let probe = train_probe(&projected, &train.beliefs, derive_seed(seed, 5), &config.probe)?;
    let n_inc = train.set.n_transitions() as f64;
    let mean_increment = train
        .set
        .all_increments()
        .map(|d| manifold.project_increment(&d))
        .fold(DVector::zeros(config.rank), |acc, d| acc + d)
        / n_inc;
    let evaluation = evaluate_belief_prediction(
        &fit.params,
        &probe,
        &test.set,
        &test.beliefs,
        &mean_increment,
        derive_seed(seed, 6),
    )?;

    let clean_paths: Vec<&Vec<usize>> = data.paths.iter().zip(&data.poisoned).filter(|(_, &p)| !p).map(|(p, _)| p).collect();
    let poisoned_paths: Vec<&Vec<usize>> = data.paths.iter().zip(&data.poisoned).filter(|(_, &p)| p).map(|(p, _)| p).collect();
    let report = BeliefReport {
        n_clean: config.n_clean,
        n_poisoned: config.n_poisoned,
        bimodal_mass: bimodal_mass(&finals),
        ablated_upper_mass: ablated_finals.iter().filter(|&&b| b > 0.8).count() as f64 / ablated_finals.len().max(1) as f64,
        adherent_occupancy_clean: adherent_occupancy(&clean_paths),
        adherent_occupancy_poisoned: adherent_occupancy(&poisoned_paths),
        ks_vs_clean: if clean_finals.is_empty() {
            None
        } else {
            Some(ks_statistic(&finals, &clean_finals)?)
        },
        probe_validation_mse: probe.validation_mse,
        probe_residual_scale: probe.residual_scale,
        slds_log_likelihood: *fit.trace.last().expect("trace non-empty"),
        evaluation,
    };
    Ok(BeliefRun {
        scenario,
        data,
        report,
        fit,
        probe,
    })
}

/// CSV `traj_id,step,belief,regime` with one-based regimes.
pub fn write_beliefs(path: &std::path::Path, data: &BeliefData) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["traj_id", "step", "belief", "regime"])?;
    for ((t, b), p) in data.set.trajectories().iter().zip(&data.beliefs).zip(&data.paths) {
        for (n, belief) in b.iter().enumerate() {
            let z = if n == 0 { p[0] } else { p[n - 1] };
            w.write_record([t.id.clone(), n.to_string(), belief.to_string(), (z + 1).to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> BeliefScenario {
        BeliefScenario::from_config(&ScenarioConfig::default(), seed).unwrap()
    }

    #[test]
    fn clean_runs_never_reach_adherent() {
        let data = generate_scenario_data(&small(1), 40, 0, 2).unwrap();
        assert!(data.final_beliefs().iter().all(|&b| b < 0.8));
        assert!(data.paths.iter().flatten().all(|&z| z != ADHERENT));
        assert_eq!(data.set.trajectories()[0].len(), 51);
        assert_eq!(data.beliefs[0].len(), 51);
    }

    #[test]
    fn certain_poison_switches_every_run() {
        let cfg = ScenarioConfig {
            poison_boost: vec![vec![0.0, 0.0, 1.0], vec![0.0, 0.0, 1.0], vec![0.0, 0.0, 1.0]],
            trans: vec![vec![0.97, 0.03, 0.0], vec![0.4, 0.6, 0.0], vec![0.0, 0.0, 1.0]],
            poison_steps: vec![10],
            ..ScenarioConfig::default()
        };
        let s = BeliefScenario::from_config(&cfg, 3).unwrap();
        let data = generate_scenario_data(&s, 0, 20, 4).unwrap();
        for p in &data.paths {
            assert!(p[10..].iter().all(|&z| z == ADHERENT));
        }
    }

    #[test]
    fn poison_raises_adherent_occupancy() {
        let data = generate_scenario_data(&small(5), 30, 30, 6).unwrap();
        let clean: Vec<&Vec<usize>> = data.paths[..30].iter().collect();
        let pois: Vec<&Vec<usize>> = data.paths[30..].iter().collect();
        assert!(adherent_occupancy(&clean) <= adherent_occupancy(&pois));
    }

    #[test]
    fn generation_is_deterministic() {
        let s = small(7);
        let a = generate_scenario_data(&s, 3, 3, 8).unwrap();
        let b = generate_scenario_data(&s, 3, 3, 8).unwrap();
        assert_eq!(a.set, b.set);
        assert_eq!(a.beliefs, b.beliefs);
    }

    fn clusters(values: &[f64]) -> (Vec<Vec<DVector<f64>>>, Vec<Vec<f64>>) {
        let mut rng = seeded(9);
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for t in 0..20 {
            let c = t % 3;
            let mut tx = Vec::new();
            let mut ty = Vec::new();
            for _ in 0..10 {
                let center = DVector::from_vec(vec![c as f64 * 4.0, -(c as f64) * 2.0]);
                tx.push(center + standard_normal_vector(2, &mut rng) * 0.1);
                ty.push(values[c]);
            }
            xs.push(tx);
            ys.push(ty);
        }
        (xs, ys)
    }

    #[test]
    fn probe_fits_constant_target() {
        let (xs, ys) = clusters(&[0.5, 0.5, 0.5]);
        let p = train_probe(&xs, &ys, 1, &ProbeConfig::default()).unwrap();
        for t in &xs {
            for x in t {
                assert!((p.predict(x) - 0.5).abs() < 0.05);
            }
        }
        assert!(p.predict(&DVector::from_vec(vec![100.0, -100.0])) <= 1.0);
    }

    #[test]
    fn probe_separates_clusters() {
        let (xs, ys) = clusters(&[0.05, 0.5, 0.95]);
        let p = train_probe(&xs, &ys, 2, &ProbeConfig::default()).unwrap();
        assert!(p.validation_mse < 0.01, "{}", p.validation_mse);
        assert_eq!(p, train_probe(&xs, &ys, 2, &ProbeConfig::default()).unwrap());
    }

    #[test]
    fn probe_rejects_tiny_data_and_flags_divergence() {
        let (xs, ys) = clusters(&[0.05, 0.5, 0.95]);
        assert!(train_probe(&xs[..5], &ys[..5], 1, &ProbeConfig::default()).is_err());
        let wild = ProbeConfig {
            lr: 1e6,
            ..ProbeConfig::default()
        };
        match train_probe(&xs, &ys, 1, &wild) {
            Err(Error::LearningRate(_)) | Ok(_) => {}
            Err(e) => panic!("unexpected {e}"),
        }
    }
}
