//! Flat JSON run configuration. Every key is optional; each command reads
//! the keys it understands and falls back to the library defaults.

use std::path::{Path, PathBuf};

use cotdyn::belief_case::BeliefRunConfig;
use cotdyn::error::{Error, Result};
use cotdyn::harness::PipelineConfig;
use cotdyn::langevin::StudyConfig;
use cotdyn::slds::Variant;
use cotdyn::synth::SynthConfig;
use serde::Deserialize;

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub input: Option<PathBuf>,
    pub tests: Option<Vec<PathBuf>>,

    pub rank: Option<usize>,
    pub n_regimes: Option<usize>,
    pub lambda: Option<f64>,
    pub min_jump: Option<f64>,
    pub filter_after_standardize: Option<bool>,
    pub variant: Option<Variant>,
    pub test_fraction: Option<f64>,
    pub k_min: Option<usize>,
    pub k_max: Option<usize>,
    pub auto_k: Option<bool>,
    pub autocorr_lags: Option<usize>,
    pub max_iters: Option<usize>,
    pub tol: Option<f64>,

    pub n_traj: Option<usize>,
    /// Transitions per synthetic trajectory, or steps per Langevin chain.
    pub steps: Option<usize>,
    pub dim: Option<usize>,
    pub noise: Option<f64>,
    pub offset_scale: Option<f64>,
    pub persistence: Option<f64>,
    pub contraction_min: Option<f64>,
    pub contraction_max: Option<f64>,
    pub state_drift: Option<bool>,

    pub a: Option<f64>,
    pub b: Option<f64>,
    pub noise_d: Option<f64>,
    pub dt: Option<f64>,
    pub chains: Option<usize>,
    pub x0: Option<f64>,
    pub bins: Option<usize>,
    pub hist_lo: Option<f64>,
    pub hist_hi: Option<f64>,
    pub density_points: Option<usize>,
    pub series_len: Option<usize>,
    pub series_stride: Option<usize>,
    pub arrhenius_d: Option<Vec<f64>>,
    pub hysteresis: Option<f64>,

    pub n_clean: Option<usize>,
    pub n_poisoned: Option<usize>,
    pub horizon: Option<usize>,
    pub poison_steps: Option<Vec<usize>>,
    pub probe_lr: Option<f64>,
    pub probe_max_epochs: Option<usize>,
    pub probe_patience: Option<usize>,
}

fn set<T: Clone>(target: &mut T, value: &Option<T>) {
    if let Some(v) = value {
        *target = v.clone();
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    pub fn pipeline(&self) -> Result<PipelineConfig> {
        let mut c = PipelineConfig::default();
        set(&mut c.rank, &self.rank);
        set(&mut c.n_regimes, &self.n_regimes);
        set(&mut c.lambda, &self.lambda);
        set(&mut c.min_jump, &self.min_jump);
        set(&mut c.filter_after_standardize, &self.filter_after_standardize);
        set(&mut c.variant, &self.variant);
        set(&mut c.test_fraction, &self.test_fraction);
        set(&mut c.k_range.0, &self.k_min);
        set(&mut c.k_range.1, &self.k_max);
        set(&mut c.auto_k, &self.auto_k);
        set(&mut c.autocorr_lags, &self.autocorr_lags);
        set(&mut c.max_iters, &self.max_iters);
        set(&mut c.tol, &self.tol);
        c.validate()?;
        Ok(c)
    }

    pub fn synth(&self) -> SynthConfig {
        let mut c = SynthConfig::default();
        set(&mut c.n_regimes, &self.n_regimes);
        set(&mut c.rank, &self.rank);
        set(&mut c.dim, &self.dim);
        set(&mut c.n_traj, &self.n_traj);
        set(&mut c.steps, &self.steps);
        set(&mut c.noise, &self.noise);
        set(&mut c.offset_scale, &self.offset_scale);
        set(&mut c.persistence, &self.persistence);
        set(&mut c.contraction.0, &self.contraction_min);
        set(&mut c.contraction.1, &self.contraction_max);
        set(&mut c.state_drift, &self.state_drift);
        c
    }

    pub fn langevin(&self) -> StudyConfig {
        let mut c = StudyConfig::default();
        set(&mut c.a, &self.a);
        set(&mut c.b, &self.b);
        set(&mut c.noise_d, &self.noise_d);
        set(&mut c.dt, &self.dt);
        set(&mut c.steps, &self.steps);
        set(&mut c.chains, &self.chains);
        set(&mut c.x0, &self.x0);
        set(&mut c.bins, &self.bins);
        set(&mut c.hist_range.0, &self.hist_lo);
        set(&mut c.hist_range.1, &self.hist_hi);
        set(&mut c.density_points, &self.density_points);
        set(&mut c.series_len, &self.series_len);
        set(&mut c.series_stride, &self.series_stride);
        set(&mut c.arrhenius_d, &self.arrhenius_d);
        set(&mut c.hysteresis, &self.hysteresis);
        c
    }

    pub fn belief(&self) -> BeliefRunConfig {
        let mut c = BeliefRunConfig::default();
        set(&mut c.n_clean, &self.n_clean);
        set(&mut c.n_poisoned, &self.n_poisoned);
        set(&mut c.n_regimes, &self.n_regimes);
        set(&mut c.rank, &self.rank);
        set(&mut c.scenario.horizon, &self.horizon);
        set(&mut c.scenario.poison_steps, &self.poison_steps);
        set(&mut c.probe.lr, &self.probe_lr);
        set(&mut c.probe.max_epochs, &self.probe_max_epochs);
        set(&mut c.probe.patience, &self.probe_patience);
        c
    }
}
