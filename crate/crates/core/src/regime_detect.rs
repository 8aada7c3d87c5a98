//! Regime discovery on projected baseline residuals: full-covariance
//! Gaussian mixtures fitted by EM and selected by BIC.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::kmeans::{kmeans, LLOYD_ITERATIONS};
use crate::linalg::{covariance, eigen_floor, from_rows, mean_vector, to_rows, GaussianLogDensity, LN_2PI};
use crate::linear_baseline::Residual;
use crate::projection::ProjectionBasis;

pub const DEFAULT_COMPONENTS: usize = 4;
pub const COVARIANCE_FLOOR: f64 = 1e-6;
const MAX_ITERATIONS: usize = 500;
const REL_TOL: f64 = 1e-7;
const MIN_WEIGHT: f64 = 1e-8;
const MAX_RESEEDS: usize = 3;

/// `ζ_t = V_kᵀ ξ_t`. Residuals are deviations already, so no centering.
pub fn project_residuals(residuals: &[Residual], basis: &ProjectionBasis) -> Result<Vec<DVector<f64>>> {
    residuals
        .iter()
        .map(|r| {
            check_dim(basis.dim(), r.xi.len())?;
            Ok(basis.basis().tr_mul(&r.xi))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct GmmParams {
    pub weights: Vec<f64>,
    pub means: Vec<DVector<f64>>,
    pub covariances: Vec<DMatrix<f64>>,
    pub log_likelihood: f64,
}

impl GmmParams {
    pub fn n_components(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    fn densities(&self) -> Result<Vec<GaussianLogDensity>> {
        self.covariances.iter().map(GaussianLogDensity::new).collect()
    }

    /// Per-component `ln π_j + ln N(x | μ_j, Σ_j)`.
    fn joint_logs(&self, dens: &[GaussianLogDensity], x: &DVector<f64>) -> Vec<f64> {
        dens.iter()
            .zip(&self.means)
            .zip(&self.weights)
            .map(|((g, m), w)| w.ln() + g.eval(&(x - m)))
            .collect()
    }

    pub fn to_json(&self) -> GmmJson {
        GmmJson {
            weights: self.weights.clone(),
            means: self.means.iter().map(|m| m.iter().cloned().collect()).collect(),
            covariances: self.covariances.iter().map(to_rows).collect(),
            log_likelihood: self.log_likelihood,
        }
    }

    pub fn from_json(json: &GmmJson) -> Result<Self> {
        Ok(Self {
            weights: json.weights.clone(),
            means: json.means.iter().map(|m| DVector::from_vec(m.clone())).collect(),
            covariances: json.covariances.iter().map(|c| from_rows(c)).collect::<Result<_>>()?,
            log_likelihood: json.log_likelihood,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GmmJson {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub covariances: Vec<Vec<Vec<f64>>>,
    pub log_likelihood: f64,
}

#[derive(Debug, Clone)]
pub struct GmmFit {
    pub params: GmmParams,
    /// Training log-likelihood after each E-step.
    pub trace: Vec<f64>,
    pub reseeds: usize,
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// EM for a `K`-component full-covariance mixture, initialized by seeded
/// k-means.
pub fn fit_gmm(points: &[DVector<f64>], n_components: usize, seed: u64) -> Result<GmmFit> {
    let n = points.len();
    if n_components == 0 || n_components > n {
        return Err(Error::Config(format!(
            "cannot fit {n_components} components to {n} points"
        )));
    }
    let km = kmeans(points, n_components, seed, LLOYD_ITERATIONS)?;
    fit_gmm_with_labels(points, n_components, &km.labels)
}

/// EM started from a hard initial assignment (zero-based labels).
pub fn fit_gmm_with_labels(points: &[DVector<f64>], n_components: usize, labels: &[usize]) -> Result<GmmFit> {
    let n = points.len();
    let k = n_components;
    let mut resp = vec![0.0; n * k];
    for (i, &l) in labels.iter().enumerate() {
        resp[i * k + l] = 1.0;
    }
    let global_mean = mean_vector(points).ok_or_else(|| Error::Empty("no points".into()))?;
    let global_cov = eigen_floor(&covariance(points, &global_mean), COVARIANCE_FLOOR);

    let mut params = m_step(points, &resp, k, &global_cov);
    let mut trace = Vec::new();
    let mut reseeds = 0;
    loop {
        while let Some(j) = params.weights.iter().position(|&w| w < MIN_WEIGHT) {
            if reseeds == MAX_RESEEDS {
                return Err(Error::DegenerateComponent {
                    component: j,
                    reseeds,
                });
            }
            reseeds += 1;
            reseed(points, &mut params, j, &global_cov)?;
            trace.clear();
        }
        let ll = e_step(&params, points, &mut resp)?;
        params.log_likelihood = ll;
        let converged = trace
            .last()
            .is_some_and(|&prev: &f64| ll - prev < REL_TOL * ll.abs());
        trace.push(ll);
        if converged || trace.len() > MAX_ITERATIONS {
            break;
        }
        params = m_step(points, &resp, k, &global_cov);
    }
    Ok(GmmFit {
        params,
        trace,
        reseeds,
    })
}

const CHUNK: usize = 512;

/// Fills row-major responsibilities and returns the log-likelihood. Chunks
/// are reduced in order, so the sum does not depend on the thread count.
fn e_step(params: &GmmParams, points: &[DVector<f64>], resp: &mut [f64]) -> Result<f64> {
    let k = params.n_components();
    let d = params.dim();
    let comps: Vec<(DMatrix<f64>, f64)> = params
        .densities()?
        .iter()
        .zip(&params.weights)
        .map(|(g, w)| (g.factor(), w.ln() - 0.5 * (g.log_det() + d as f64 * LN_2PI)))
        .collect();
    let partial: Vec<f64> = points
        .par_chunks(CHUNK)
        .zip(resp.par_chunks_mut(CHUNK * k))
        .map(|(pts, out)| {
            let mut y = vec![0.0; d];
            let mut ll = 0.0;
            for (x, row) in pts.iter().zip(out.chunks_mut(k)) {
                for (j, ((l, c), mean)) in comps.iter().zip(&params.means).enumerate() {
                    for i in 0..d {
                        let mut s = x[i] - mean[i];
                        for m in 0..i {
                            s -= l[(i, m)] * y[m];
                        }
                        y[i] = s / l[(i, i)];
                    }
                    row[j] = c - 0.5 * y.iter().map(|v| v * v).sum::<f64>();
                }
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                row.iter_mut().for_each(|r| *r = (*r - m).exp());
                let total: f64 = row.iter().sum();
                ll += m + total.ln();
                row.iter_mut().for_each(|r| *r /= total);
            }
            ll
        })
        .collect();
    Ok(partial.iter().sum())
}

fn m_step(points: &[DVector<f64>], resp: &[f64], k: usize, fallback_cov: &DMatrix<f64>) -> GmmParams {
    let n = points.len();
    let d = points[0].len();
    let mut weights = Vec::with_capacity(k);
    let mut means = Vec::with_capacity(k);
    let mut covariances = Vec::with_capacity(k);
    let mut c = vec![0.0; d];
    for j in 0..k {
        let nj: f64 = (0..n).map(|i| resp[i * k + j]).sum();
        weights.push(nj / n as f64);
        if nj <= 0.0 {
            means.push(DVector::zeros(d));
            covariances.push(fallback_cov.clone());
            continue;
        }
        let mut mean = DVector::zeros(d);
        for (i, x) in points.iter().enumerate() {
            mean.axpy(resp[i * k + j], x, 1.0);
        }
        mean /= nj;
        let mut cov = DMatrix::zeros(d, d);
        for (i, x) in points.iter().enumerate() {
            let r = resp[i * k + j];
            for a in 0..d {
                c[a] = x[a] - mean[a];
            }
            for b in 0..d {
                let rb = r * c[b];
                for a in b..d {
                    cov[(a, b)] += rb * c[a];
                }
            }
        }
        for b in 0..d {
            for a in b + 1..d {
                cov[(b, a)] = cov[(a, b)];
            }
        }
        cov /= nj;
        means.push(mean);
        covariances.push(eigen_floor(&cov, COVARIANCE_FLOOR));
    }
    GmmParams {
        weights,
        means,
        covariances,
        log_likelihood: f64::NEG_INFINITY,
    }
}

/// Moves a collapsed component onto the worst-explained point.
fn reseed(points: &[DVector<f64>], params: &mut GmmParams, j: usize, cov: &DMatrix<f64>) -> Result<()> {
    let k = params.n_components();
    params.weights[j] = 1.0 / k as f64;
    let total: f64 = params.weights.iter().sum();
    params.weights.iter_mut().for_each(|w| *w /= total);
    params.covariances[j] = cov.clone();
    let dens = params.densities()?;
    let worst = points
        .iter()
        .map(|x| log_sum_exp(&params.joint_logs(&dens, x)))
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(i, _)| i)
        .expect("points non-empty");
    params.means[j] = points[worst].clone();
    log::warn!("mixture component {j} collapsed; re-seeded at point {worst}");
    Ok(())
}

/// Free parameters of a full-covariance mixture.
pub fn parameter_count(n_components: usize, dim: usize) -> usize {
    let k = n_components;
    k - 1 + k * dim + k * dim * (dim + 1) / 2
}

/// Returns `(bic, aic)`.
pub fn information_criteria(model: &GmmParams, n: usize) -> (f64, f64) {
    let p = parameter_count(model.n_components(), model.dim());
    criteria(p, model.log_likelihood, (n as f64).ln())
}

fn criteria(p: usize, ll: f64, ln_n: f64) -> (f64, f64) {
    let p = p as f64;
    (p * ln_n - 2.0 * ll, 2.0 * p - 2.0 * ll)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriteriaRow {
    pub k: usize,
    pub log_likelihood: f64,
    pub bic: f64,
    pub aic: f64,
}

#[derive(Debug, Clone)]
pub struct Selection {
    pub best_k: usize,
    pub table: Vec<CriteriaRow>,
    pub best: GmmParams,
}

/// Fits every `K` in the inclusive range with seed `seed + K` and returns
/// the BIC minimizer, ties broken toward smaller `K`.
pub fn select_k(points: &[DVector<f64>], k_min: usize, k_max: usize, seed: u64) -> Result<Selection> {
    if k_min == 0 || k_min > k_max {
        return Err(Error::Config(format!("empty component range {k_min}..={k_max}")));
    }
    if k_max > points.len() {
        return Err(Error::Config(format!(
            "range maximum {k_max} exceeds {} points",
            points.len()
        )));
    }
    let mut table = Vec::new();
    let mut best: Option<(f64, usize, GmmParams)> = None;
    for k in k_min..=k_max {
        let fit = fit_gmm(points, k, seed.wrapping_add(k as u64))?;
        let (bic, aic) = information_criteria(&fit.params, points.len());
        table.push(CriteriaRow {
            k,
            log_likelihood: fit.params.log_likelihood,
            bic,
            aic,
        });
        if best.as_ref().map_or(true, |(b, _, _)| bic < *b) {
            best = Some((bic, k, fit.params));
        }
    }
    let (_, best_k, best) = best.expect("range non-empty");
    Ok(Selection { best_k, table, best })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    /// One-based component label.
    pub label: usize,
    pub responsibilities: Vec<f64>,
}

pub fn assign_regimes(model: &GmmParams, points: &[DVector<f64>]) -> Result<Vec<Assignment>> {
    let dens = model.densities()?;
    points
        .iter()
        .map(|x| {
            check_dim(model.dim(), x.len())?;
            let logs = model.joint_logs(&dens, x);
            let norm = log_sum_exp(&logs);
            let responsibilities: Vec<f64> = logs.iter().map(|l| (l - norm).exp()).collect();
            let mut label = 0;
            for (j, &r) in responsibilities.iter().enumerate() {
                if r > responsibilities[label] {
                    label = j;
                }
            }
            Ok(Assignment {
                label: label + 1,
                responsibilities,
            })
        })
        .collect()
}

/// CSV `traj_id,step,label,r1..rK`.
pub fn write_assignments(path: &Path, residuals: &[Residual], assignments: &[Assignment]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let k = assignments.first().map_or(0, |a| a.responsibilities.len());
    let mut header = vec!["traj_id".to_string(), "step".into(), "label".into()];
    header.extend((1..=k).map(|j| format!("r{j}")));
    w.write_record(&header)?;
    for (r, a) in residuals.iter().zip(assignments) {
        let mut row = vec![r.traj_id.clone(), r.step.to_string(), a.label.to_string()];
        row.extend(a.responsibilities.iter().map(|v| v.to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::standard_normal_vector;
    use crate::rng::seeded;

    fn blobs(seed: u64, centers: &[[f64; 2]], per: usize, sd: f64) -> Vec<DVector<f64>> {
        let mut rng = seeded(seed);
        let mut pts = Vec::new();
        for _ in 0..per {
            for c in centers {
                pts.push(DVector::from_row_slice(c) + standard_normal_vector(2, &mut rng) * sd);
            }
        }
        pts
    }

    #[test]
    fn residual_projection_examples() {
        let basis = ProjectionBasis::from_parts(
            DMatrix::from_column_slice(3, 1, &[0.0, 1.0, 0.0]),
            vec![1.0],
            DVector::from_element(3, 9.0),
        )
        .unwrap();
        let res = |xi: Vec<f64>| Residual {
            traj_id: "a".into(),
            step: 0,
            xi: DVector::from_vec(xi),
        };
        let z = project_residuals(&[res(vec![0.0, -2.5, 0.0]), res(vec![4.0, 0.0, 1.0])], &basis).unwrap();
        assert!((z[0].norm() - 2.5).abs() < 1e-10);
        assert_eq!(z[1][0], 0.0);
        assert!(project_residuals(&[res(vec![1.0, 2.0])], &basis).is_err());
    }

    #[test]
    fn two_separated_clusters() {
        let pts = blobs(1, &[[10.0, 0.0], [-10.0, 0.0]], 200, 1.0);
        let fit = fit_gmm(&pts, 2, 7).unwrap().params;
        let (pos, neg) = if fit.means[0][0] > 0.0 { (0, 1) } else { (1, 0) };
        assert!((&fit.means[pos] - DVector::from_vec(vec![10.0, 0.0])).amax() < 0.1 * 2.0);
        assert!((fit.means[pos][0] - 10.0).abs() < 0.1);
        assert!((fit.means[neg][0] + 10.0).abs() < 0.1);
        assert!((fit.weights[0] - 0.5).abs() < 0.05);
    }

    #[test]
    fn single_component_is_closed_form() {
        let pts = blobs(2, &[[1.0, -2.0]], 300, 1.5);
        let fit = fit_gmm(&pts, 1, 3).unwrap().params;
        let mean = mean_vector(&pts).unwrap();
        let cov = covariance(&pts, &mean);
        assert!((&fit.means[0] - mean).amax() < 1e-8);
        assert!((&fit.covariances[0] - cov).amax() < 1e-8);
        assert_eq!(fit.weights, vec![1.0]);
    }

    #[test]
    fn deterministic_given_seed() {
        let pts = blobs(3, &[[0.0, 0.0], [3.0, 3.0], [-3.0, 3.0]], 50, 1.0);
        let a = fit_gmm(&pts, 3, 11).unwrap().params;
        let b = fit_gmm(&pts, 3, 11).unwrap().params;
        assert_eq!(a, b);
    }

    #[test]
    fn em_trace_is_monotone() {
        let pts = blobs(4, &[[0.0, 0.0], [2.0, 1.0], [-1.0, 2.5]], 80, 1.0);
        for k in 1..=5 {
            let fit = fit_gmm(&pts, k, 5).unwrap();
            for w in fit.trace.windows(2) {
                assert!(w[1] >= w[0] - 1e-9 * w[0].abs(), "k={k}: {} -> {}", w[0], w[1]);
            }
        }
    }

    #[test]
    fn permuting_initial_labels_permutes_components() {
        let pts = blobs(5, &[[0.0, 0.0], [4.0, 0.0], [0.0, 4.0]], 40, 1.0);
        let km = kmeans(&pts, 3, 9, LLOYD_ITERATIONS).unwrap();
        let perm = [2usize, 0, 1];
        let permuted: Vec<usize> = km.labels.iter().map(|&l| perm[l]).collect();
        let a = fit_gmm_with_labels(&pts, 3, &km.labels).unwrap().params;
        let b = fit_gmm_with_labels(&pts, 3, &permuted).unwrap().params;
        for j in 0..3 {
            assert!((&a.means[j] - &b.means[perm[j]]).amax() < 1e-9);
            assert!((a.weights[j] - b.weights[perm[j]]).abs() < 1e-12);
        }
    }

    #[test]
    fn too_many_components_rejected() {
        let pts = blobs(6, &[[0.0, 0.0]], 3, 1.0);
        assert!(fit_gmm(&pts, 4, 0).is_err());
    }

    #[test]
    fn criteria_arithmetic() {
        assert_eq!(parameter_count(1, 1), 2);
        let (bic, aic) = criteria(2, 0.0, 2.0);
        assert!((bic - 4.0).abs() < 1e-12);
        assert!((aic - 4.0).abs() < 1e-12);

        let model = GmmParams {
            weights: vec![1.0],
            means: vec![DVector::zeros(1)],
            covariances: vec![DMatrix::identity(1, 1)],
            log_likelihood: 5.0,
        };
        let doubled = GmmParams {
            log_likelihood: 10.0,
            ..model.clone()
        };
        let (b1, a1) = information_criteria(&model, 50);
        let (b2, a2) = information_criteria(&doubled, 50);
        assert!(b2 < b1 && a2 < a1);
    }

    #[test]
    fn selection_finds_four_clusters_and_one_cloud() {
        let four = blobs(7, &[[8.0, 8.0], [-8.0, 8.0], [8.0, -8.0], [-8.0, -8.0]], 60, 1.0);
        assert_eq!(select_k(&four, 1, 8, 3).unwrap().best_k, 4);
        let one = blobs(8, &[[0.0, 0.0]], 240, 1.0);
        assert_eq!(select_k(&one, 1, 8, 3).unwrap().best_k, 1);
        let single = select_k(&four, 3, 3, 0).unwrap();
        assert_eq!(single.best_k, 3);
        assert_eq!(single.table.len(), 1);
    }

    #[test]
    fn selection_table_deterministic() {
        let pts = blobs(9, &[[0.0, 0.0], [5.0, 0.0]], 50, 1.0);
        assert_eq!(select_k(&pts, 1, 4, 2).unwrap().table, select_k(&pts, 1, 4, 2).unwrap().table);
    }

    fn naive_density(x: &DVector<f64>, m: &DVector<f64>, c: &DMatrix<f64>) -> f64 {
        let d = x.len() as f64;
        let diff = x - m;
        let q = (diff.transpose() * c.clone().try_inverse().unwrap() * &diff)[(0, 0)];
        (-0.5 * q).exp() / ((2.0 * std::f64::consts::PI).powf(d / 2.0) * c.determinant().sqrt())
    }

    #[test]
    fn assignment_matches_bayes_rule() {
        let pts = blobs(10, &[[0.0, 0.0], [2.0, 1.0]], 60, 1.0);
        let model = fit_gmm(&pts, 2, 1).unwrap().params;
        let out = assign_regimes(&model, &pts).unwrap();
        for (x, a) in pts.iter().zip(&out) {
            let joint: Vec<f64> = (0..2)
                .map(|j| model.weights[j] * naive_density(x, &model.means[j], &model.covariances[j]))
                .collect();
            let total: f64 = joint.iter().sum();
            for j in 0..2 {
                assert!((a.responsibilities[j] - joint[j] / total).abs() < 1e-10);
            }
            assert!((a.responsibilities.iter().sum::<f64>() - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn assignment_at_component_mean() {
        let model = GmmParams {
            weights: vec![0.5, 0.5],
            means: vec![DVector::from_vec(vec![0.0, 0.0]), DVector::from_vec(vec![10.0, 0.0])],
            covariances: vec![DMatrix::identity(2, 2), DMatrix::identity(2, 2)],
            log_likelihood: 0.0,
        };
        let a = assign_regimes(&model, &[DVector::from_vec(vec![10.0, 0.0])]).unwrap();
        assert_eq!(a[0].label, 2);
        assert!(a[0].responsibilities[1] > 0.99);

        let single = GmmParams {
            weights: vec![1.0],
            means: vec![DVector::zeros(2)],
            covariances: vec![DMatrix::identity(2, 2)],
            log_likelihood: 0.0,
        };
        let a = assign_regimes(&single, &[DVector::from_vec(vec![3.0, -1.0])]).unwrap();
        assert_eq!(a[0].label, 1);
        assert_eq!(a[0].responsibilities, vec![1.0]);
    }
}
