//! End-to-end runs: filter, standardize, project, ridge, mixture, SLDS and
//! held-out evaluation, plus the ablation and transfer tables built on them.

use std::path::Path;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linear_baseline::{fit_ridge, residuals, GlobalLinearModel, Residual};
use crate::metrics::{occupancy, pooled_autocorrelation, prediction_r2, EvalReport, JumpMoments};
use crate::projection::{fit_projection, PcaTarget, ProjectionBasis};
use crate::regime_detect::{assign_regimes, fit_gmm, project_residuals, select_k, Assignment, GmmFit, Selection};
use crate::rng::{derive_seed, seeded};
use crate::slds::{
    em_fit, em_fit_from_labels, filter_predict, forward_backward, score_nll, transition_features, EmConfig, EmFit, Manifold,
    SldsParams, Variant, DEFAULT_MAX_ITERS, DEFAULT_TOL,
};
use crate::trajectories::{filter_jumps, jump_norm_distribution, standardize, TrajectorySet};

/// Relative singular-value tolerance below which PCA directions are dropped.
pub const RANK_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub rank: usize,
    pub n_regimes: usize,
    pub lambda: f64,
    pub min_jump: f64,
    /// Apply `min_jump` in standardized units (after standardization).
    pub filter_after_standardize: bool,
    pub variant: Variant,
    pub test_fraction: f64,
    /// Inclusive range of mixture sizes scored by BIC/AIC.
    pub k_range: (usize, usize),
    /// Use the BIC-selected size instead of `n_regimes`.
    pub auto_k: bool,
    pub autocorr_lags: usize,
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            rank: 40,
            n_regimes: 4,
            lambda: crate::linear_baseline::DEFAULT_LAMBDA,
            min_jump: 10.0,
            filter_after_standardize: true,
            variant: Variant::Full,
            test_fraction: 0.2,
            k_range: (1, 6),
            auto_k: false,
            autocorr_lags: 5,
            max_iters: DEFAULT_MAX_ITERS,
            tol: DEFAULT_TOL,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.rank == 0 || self.n_regimes == 0 {
            return bad("rank and n_regimes must be positive");
        }
        if !(self.lambda >= 0.0) || !(self.min_jump >= 0.0) {
            return bad("lambda and min_jump must be non-negative");
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return bad("test_fraction must lie in (0, 1)");
        }
        if self.k_range.0 == 0 || self.k_range.0 > self.k_range.1 {
            return bad("k_range must satisfy 1 <= lo <= hi");
        }
        if self.variant == Variant::NoRegime && self.n_regimes != 1 && !self.auto_k {
            return bad("no_regime requires n_regimes = 1");
        }
        if !(self.tol > 0.0) {
            return bad("tol must be positive");
        }
        Ok(())
    }
}

fn stage<T>(name: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        e @ Error::Stage { .. } => e,
        e => Error::Stage {
            stage: name,
            source: Box::new(e),
        },
    })
}

/// Standardizes and filters in the configured order.
pub fn prepare(set: &TrajectorySet, config: &PipelineConfig) -> Result<(TrajectorySet, usize, usize)> {
    if config.filter_after_standardize {
        let st = stage("standardize", standardize(set))?;
        let f = stage("filter", filter_jumps(&st.set, config.min_jump))?;
        Ok((f.set, f.dropped, f.removed_states))
    } else {
        let f = stage("filter", filter_jumps(set, config.min_jump))?;
        let st = stage("standardize", standardize(&f.set))?;
        Ok((st.set, f.dropped, f.removed_states))
    }
}

/// Deterministic split by trajectory: `(train, test)` index lists in
/// original order.
pub fn split_indices(n: usize, test_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    use rand::seq::SliceRandom;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut seeded(seed));
    let n_test = ((n as f64) * test_fraction).round().clamp(1.0, (n.max(2) - 1) as f64) as usize;
    let mut test = idx[..n_test.min(n)].to_vec();
    let mut train = idx[n_test.min(n)..].to_vec();
    test.sort_unstable();
    train.sort_unstable();
    (train, test)
}

/// Fits PCA at the requested rank, clamped to the data's numerical rank.
pub fn fit_basis(set: &TrajectorySet, rank: usize) -> Result<ProjectionBasis> {
    let available = set.dim().min(set.n_transitions());
    let r = rank.min(available);
    if r < rank {
        log::warn!("rank {rank} clamped to {r}");
    }
    let basis = fit_projection(set, r, PcaTarget::Increments)?;
    let numerical = basis.numerical_rank(RANK_TOL).max(1);
    if numerical < r {
        log::warn!("rank {r} clamped to numerical rank {numerical}");
        return basis.truncate(numerical);
    }
    Ok(basis)
}

/// One-step SLDS predictions of every increment, scored causally.
fn slds_increments(params: &SldsParams, set: &TrajectorySet) -> Result<(Vec<DVector<f64>>, Vec<DVector<f64>>)> {
    let per: Vec<(Vec<DVector<f64>>, Vec<DVector<f64>>)> = set
        .trajectories()
        .par_iter()
        .map(|t| {
            let next = filter_predict(params, t)?;
            let pred = t.states().iter().zip(&next).map(|(h, p)| p - h).collect();
            Ok((pred, t.increments().collect()))
        })
        .collect::<Result<_>>()?;
    Ok(per.into_iter().fold((Vec::new(), Vec::new()), |mut acc, (p, a)| {
        acc.0.extend(p);
        acc.1.extend(a);
        acc
    }))
}

pub fn slds_r2(params: &SldsParams, set: &TrajectorySet) -> Result<f64> {
    let (p, a) = slds_increments(params, set)?;
    prediction_r2(&p, &a)
}

pub fn ridge_r2(model: &GlobalLinearModel, set: &TrajectorySet) -> Result<f64> {
    let pred: Vec<DVector<f64>> = set
        .trajectories()
        .iter()
        .flat_map(|t| t.states()[..t.len() - 1].iter().map(|h| model.drift(h)))
        .collect();
    let actual: Vec<DVector<f64>> = set.all_increments().collect();
    prediction_r2(&pred, &actual)
}

/// Per-transition NLL of the ridge model under a diagonal Gaussian whose
/// variances are the per-dimension residual variances on `fit_set`.
pub fn ridge_nll(model: &GlobalLinearModel, fit_set: &TrajectorySet, set: &TrajectorySet) -> Result<f64> {
    let fit_res = residuals(model, fit_set);
    if fit_res.is_empty() || set.n_transitions() == 0 {
        return Err(Error::Empty("no transitions for ridge NLL".into()));
    }
    let var = fit_res
        .iter()
        .fold(DVector::zeros(model.dim()), |acc, r| acc + r.xi.component_mul(&r.xi))
        / fit_res.len() as f64;
    let var = var.map(|v| v.max(crate::slds::SIGMA_FLOOR));
    let log_norm: f64 = var.iter().map(|v| (2.0 * std::f64::consts::PI * v).ln()).sum::<f64>() * 0.5;
    let total: f64 = residuals(model, set)
        .iter()
        .map(|r| log_norm + 0.5 * r.xi.iter().zip(var.iter()).map(|(x, v)| x * x / v).sum::<f64>())
        .sum();
    Ok(total / set.n_transitions() as f64)
}

/// Held-out statistics of a fitted SLDS.
pub fn evaluate(params: &SldsParams, set: &TrajectorySet, lags: usize) -> Result<EvalReport> {
    let r2 = slds_r2(params, set)?;
    let (_, nll) = score_nll(params, set)?;
    let jumps = jump_norm_distribution(set)?;
    let gammas = set
        .trajectories()
        .par_iter()
        .map(|t| Ok(forward_backward(params, &transition_features(t, params.manifold())?)?.gamma))
        .collect::<Result<Vec<_>>>()?;
    let series: Vec<Vec<f64>> = set
        .trajectories()
        .iter()
        .map(|t| t.increments().map(|d| d.norm()).collect())
        .collect();
    let autocorr = if lags == 0 {
        Vec::new()
    } else {
        pooled_autocorrelation(&series, lags).unwrap_or_else(|e| {
            log::warn!("autocorrelation skipped: {e}");
            Vec::new()
        })
    };
    Ok(EvalReport {
        r2,
        nll_per_transition: nll,
        jump_moment_table: JumpMoments {
            mean: jumps.mean(),
            variance: jumps.variance(),
        },
        occupancy: occupancy(&gammas, params.n_regimes())?,
        autocorr,
    })
}

fn manifold_for(variant: Variant, basis: &ProjectionBasis) -> Manifold {
    match variant {
        Variant::NoProjection => Manifold::Identity {
            center: basis.center().clone(),
        },
        _ => Manifold::Projected(basis.clone()),
    }
}

/// Regroups flat per-transition labels by trajectory.
fn labels_by_trajectory(set: &TrajectorySet, flat: &[usize]) -> Vec<Vec<usize>> {
    let mut out = Vec::with_capacity(set.len());
    let mut pos = 0;
    for t in set.trajectories() {
        let n = t.n_transitions();
        out.push(flat[pos..pos + n].to_vec());
        pos += n;
    }
    out
}

/// Training-side artifacts shared by every variant.
#[derive(Debug, Clone)]
pub struct Stages {
    pub basis: ProjectionBasis,
    pub ridge: GlobalLinearModel,
    pub residuals: Vec<Residual>,
    pub selection: Option<Selection>,
    pub gmm: GmmFit,
    pub assignments: Vec<Assignment>,
    pub n_regimes: usize,
}

/// `with_selection` also scores the BIC/AIC table over `k_range`, which is
/// always done when `auto_k` is set.
pub fn fit_stages(train: &TrajectorySet, config: &PipelineConfig, seed: u64, with_selection: bool) -> Result<Stages> {
    let basis = stage("projection", fit_basis(train, config.rank))?;
    let ridge = stage("ridge", fit_ridge(train, config.lambda))?;
    let res = residuals(&ridge, train);
    let zeta = stage("regimes", project_residuals(&res, &basis))?;
    let selection = if with_selection || config.auto_k {
        let hi = config.k_range.1.min(zeta.len().saturating_sub(1)).max(config.k_range.0);
        Some(stage("regimes", select_k(&zeta, config.k_range.0, hi, derive_seed(seed, 12)))?)
    } else {
        None
    };
    let n_regimes = match &selection {
        Some(sel) if config.auto_k => sel.best_k,
        _ => config.n_regimes,
    };
    let gmm = stage("regimes", fit_gmm(&zeta, n_regimes, derive_seed(seed, 11)))?;
    let assignments = stage("regimes", assign_regimes(&gmm.params, &zeta))?;
    Ok(Stages {
        basis,
        ridge,
        residuals: res,
        selection,
        gmm,
        assignments,
        n_regimes,
    })
}

/// Fits one SLDS variant from two starts, the mixture labels and k-means on
/// `(x, dx)`, keeping the one with the higher training likelihood.
pub fn fit_variant(train: &TrajectorySet, stages: &Stages, variant: Variant, config: &PipelineConfig, seed: u64) -> Result<EmFit> {
    let k = if variant == Variant::NoRegime { 1 } else { stages.n_regimes };
    let manifold = manifold_for(variant, &stages.basis);
    let em = EmConfig {
        n_regimes: k,
        variant,
        max_iters: config.max_iters,
        tol: config.tol,
        seed: derive_seed(seed, 13),
    };
    if k == 1 {
        let labels = labels_by_trajectory(train, &vec![0; stages.assignments.len()]);
        return stage("slds", em_fit_from_labels(train, manifold, &em, &labels));
    }
    let flat: Vec<usize> = stages.assignments.iter().map(|a| a.label - 1).collect();
    let labels = labels_by_trajectory(train, &flat);
    let from_mixture = em_fit_from_labels(train, manifold.clone(), &em, &labels);
    let from_kmeans = em_fit(train, manifold, &em);
    let ll = |f: &EmFit| *f.trace.last().expect("trace non-empty");
    match (from_mixture, from_kmeans) {
        (Ok(a), Ok(b)) => Ok(if ll(&b) > ll(&a) { b } else { a }),
        (Ok(a), Err(e)) | (Err(e), Ok(a)) => {
            log::warn!("one SLDS start failed: {e}");
            Ok(a)
        }
        (Err(e), Err(_)) => Err(Error::Stage {
            stage: "slds",
            source: Box::new(e),
        }),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub n_trajectories: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub dropped_trajectories: usize,
    pub removed_states: usize,
    pub rank: usize,
    pub n_regimes: usize,
    pub bic_best_k: Option<usize>,
    pub variant: Variant,
    pub em_iterations: usize,
    pub em_reseeds: usize,
    pub train_log_likelihood: f64,
    pub ridge_r2: f64,
    pub ridge_nll_per_transition: f64,
    pub slds: EvalReport,
}

#[derive(Debug, Clone)]
pub struct PipelineRun {
    pub report: PipelineReport,
    pub train: TrajectorySet,
    pub test: TrajectorySet,
    pub stages: Stages,
    pub fit: EmFit,
}

/// Standardized, filtered and split data.
pub fn prepare_split(set: &TrajectorySet, config: &PipelineConfig, seed: u64) -> Result<(TrajectorySet, TrajectorySet, usize, usize)> {
    config.validate()?;
    let (prepared, dropped, removed) = prepare(set, config)?;
    if prepared.len() < 2 {
        return Err(Error::Stage {
            stage: "filter",
            source: Box::new(Error::Empty(format!("{} trajectories survive filtering", prepared.len()))),
        });
    }
    let (train_idx, test_idx) = split_indices(prepared.len(), config.test_fraction, derive_seed(seed, 10));
    Ok((prepared.select(&train_idx), prepared.select(&test_idx), dropped, removed))
}

pub fn run_pipeline(set: &TrajectorySet, config: &PipelineConfig, seed: u64) -> Result<PipelineRun> {
    let (train, test, dropped, removed) = prepare_split(set, config, seed)?;
    let stages = fit_stages(&train, config, seed, true)?;
    let fit = fit_variant(&train, &stages, config.variant, config, seed)?;
    let slds = stage("evaluate", evaluate(&fit.params, &test, config.autocorr_lags))?;
    let report = PipelineReport {
        n_trajectories: set.len(),
        n_train: train.len(),
        n_test: test.len(),
        dropped_trajectories: dropped,
        removed_states: removed,
        rank: stages.basis.rank(),
        n_regimes: fit.params.n_regimes(),
        bic_best_k: stages.selection.as_ref().map(|s| s.best_k),
        variant: config.variant,
        em_iterations: fit.trace.len(),
        em_reseeds: fit.reseeds,
        train_log_likelihood: *fit.trace.last().expect("trace non-empty"),
        ridge_r2: stage("evaluate", ridge_r2(&stages.ridge, &test))?,
        ridge_nll_per_transition: stage("evaluate", ridge_nll(&stages.ridge, &train, &test))?,
        slds,
    };
    Ok(PipelineRun {
        report,
        train,
        test,
        stages,
        fit,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub r2: f64,
    pub nll: f64,
}

pub const ABLATION_ROWS: [&str; 5] = ["full", "no_regime", "no_projection", "no_state_drift", "ridge"];

/// Full, NR, NP and NSD fits plus the ridge reference, on one split.
pub fn run_ablation(set: &TrajectorySet, config: &PipelineConfig, seed: u64) -> Result<Vec<AblationRow>> {
    Ok(run_ablation_fits(set, config, seed)?.0)
}

/// [`run_ablation`] that also returns the four SLDS fits.
pub fn run_ablation_fits(set: &TrajectorySet, config: &PipelineConfig, seed: u64) -> Result<(Vec<AblationRow>, Vec<EmFit>)> {
    let (train, test, _, _) = prepare_split(set, config, seed)?;
    let stages = fit_stages(&train, config, seed, false)?;
    let mut rows = Vec::with_capacity(ABLATION_ROWS.len());
    let mut fits = Vec::with_capacity(4);
    for variant in [Variant::Full, Variant::NoRegime, Variant::NoProjection, Variant::NoStateDrift] {
        let fit = fit_variant(&train, &stages, variant, config, seed)?;
        rows.push(AblationRow {
            variant: variant.name().to_string(),
            r2: stage("evaluate", slds_r2(&fit.params, &test))?,
            nll: stage("evaluate", score_nll(&fit.params, &test))?.1,
        });
        fits.push(fit);
    }
    rows.push(AblationRow {
        variant: "ridge".into(),
        r2: stage("evaluate", ridge_r2(&stages.ridge, &test))?,
        nll: stage("evaluate", ridge_nll(&stages.ridge, &train, &test))?,
    });
    Ok((rows, fits))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferRow {
    pub train_tag: String,
    pub test_tag: String,
    pub r2: f64,
    pub nll: f64,
}

/// A model fitted on a whole training set, with the preprocessing needed to
/// score other sets in the same coordinates.
#[derive(Debug, Clone)]
pub struct TransferModel {
    pub params: SldsParams,
    standardization: Option<crate::trajectories::Standardization>,
    config: PipelineConfig,
}

pub fn fit_transfer_model(train: &TrajectorySet, config: &PipelineConfig, seed: u64) -> Result<TransferModel> {
    config.validate()?;
    let (prepared, _, _) = prepare(train, config)?;
    let stages = fit_stages(&prepared, config, seed, false)?;
    let fit = fit_variant(&prepared, &stages, config.variant, config, seed)?;
    Ok(TransferModel {
        params: fit.params,
        standardization: prepared.standardization().cloned(),
        config: config.clone(),
    })
}

impl TransferModel {
    /// `(r2, nll_per_transition)` on a raw test set, preprocessed with the
    /// training standardization.
    pub fn score(&self, test: &TrajectorySet) -> Result<(f64, f64)> {
        if test.dim() != self.params.dim() {
            return Err(Error::TransferIncompatible(format!(
                "test dimension {} differs from training dimension {}",
                test.dim(),
                self.params.dim()
            )));
        }
        let scaled = |s: &TrajectorySet| match &self.standardization {
            Some(st) => s.apply_standardization(st),
            None => Ok(s.clone()),
        };
        let prepared = if self.config.filter_after_standardize {
            filter_jumps(&scaled(test)?, self.config.min_jump)?.set
        } else {
            scaled(&filter_jumps(test, self.config.min_jump)?.set)?
        };
        if prepared.n_transitions() < 2 {
            return Err(Error::Empty("test set has too few transitions after filtering".into()));
        }
        Ok((slds_r2(&self.params, &prepared)?, score_nll(&self.params, &prepared)?.1))
    }
}

pub fn run_transfer(
    train: &TrajectorySet,
    train_tag: &str,
    tests: &[(String, TrajectorySet)],
    config: &PipelineConfig,
    seed: u64,
) -> Result<Vec<TransferRow>> {
    if tests.is_empty() {
        return Ok(Vec::new());
    }
    let model = fit_transfer_model(train, config, seed)?;
    tests
        .iter()
        .map(|(tag, set)| {
            let (r2, nll) = model.score(set)?;
            Ok(TransferRow {
                train_tag: train_tag.to_string(),
                test_tag: tag.clone(),
                r2,
                nll,
            })
        })
        .collect()
}

/// Writes rows with a header derived from the serialized field names.
pub fn write_rows<T: Serialize>(path: &Path, rows: &[T], header: &[&str]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

impl PipelineRun {
    /// Writes the report and plot-ready tables into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        write_json(&dir.join("report.json"), &self.report)?;
        write_json(&dir.join("basis.json"), &self.stages.basis.to_json())?;
        write_json(&dir.join("ridge.json"), &self.stages.ridge.to_json())?;
        write_json(&dir.join("gmm.json"), &self.stages.gmm.params.to_json())?;
        write_json(&dir.join("slds.json"), &self.fit.params.to_json("basis.json"))?;

        let mut w = csv::Writer::from_path(dir.join("ll_trace.csv"))?;
        w.write_record(["iteration", "log_likelihood"])?;
        for (i, ll) in self.fit.trace.iter().enumerate() {
            w.write_record([i.to_string(), ll.to_string()])?;
        }
        w.flush()?;

        let k = self.stages.basis.rank();
        let mut w = csv::Writer::from_path(dir.join("residuals.csv"))?;
        let mut header = vec!["traj_id".to_string(), "step".into(), "norm".into()];
        header.extend((1..=k).map(|j| format!("zeta_{j}")));
        w.write_record(&header)?;
        let zeta = project_residuals(&self.stages.residuals, &self.stages.basis)?;
        for (r, z) in self.stages.residuals.iter().zip(&zeta) {
            let mut row = vec![r.traj_id.clone(), r.step.to_string(), r.xi.norm().to_string()];
            row.extend(z.iter().map(|v| v.to_string()));
            w.write_record(&row)?;
        }
        w.flush()?;

        crate::regime_detect::write_assignments(&dir.join("regimes.csv"), &self.stages.residuals, &self.stages.assignments)?;
        crate::slds::write_posteriors(&dir.join("posteriors.csv"), &self.fit.params, &self.test)?;
        let table = self.stages.selection.as_ref().map_or(&[][..], |s| &s.table[..]);
        write_rows(&dir.join("bic.csv"), table, &["k", "log_likelihood", "bic", "aic"])?;

        let jumps = jump_norm_distribution(&self.train)?;
        let mut w = csv::Writer::from_path(dir.join("jump_cdf.csv"))?;
        w.write_record(["norm", "cdf"])?;
        let sorted = jumps.sorted();
        let stride = (sorted.len() / 500).max(1);
        for (i, x) in sorted.iter().enumerate().step_by(stride) {
            w.write_record([x.to_string(), ((i + 1) as f64 / sorted.len() as f64).to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_is_disjoint_and_covering() {
        let (train, test) = split_indices(10, 0.2, 3);
        assert_eq!(test.len(), 2);
        let mut all = [train.clone(), test.clone()].concat();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert_eq!((train, test), split_indices(10, 0.2, 3));
    }

    #[test]
    fn config_rejects_bad_values() {
        for c in [
            PipelineConfig { rank: 0, ..Default::default() },
            PipelineConfig { test_fraction: 1.0, ..Default::default() },
            PipelineConfig { k_range: (3, 2), ..Default::default() },
            PipelineConfig { variant: Variant::NoRegime, ..Default::default() },
        ] {
            assert!(c.validate().is_err());
        }
        PipelineConfig::default().validate().unwrap();
    }
}
