//! Evaluation statistics shared by the harnesses.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::slds::SldsParams;

/// `1 - Σ‖a - p‖² / Σ‖a - ā‖²`.
pub fn prediction_r2(predicted: &[DVector<f64>], actual: &[DVector<f64>]) -> Result<f64> {
    if predicted.len() != actual.len() {
        return Err(Error::DimensionMismatch {
            expected: actual.len(),
            found: predicted.len(),
        });
    }
    if actual.len() < 2 {
        return Err(Error::Undefined("R² needs at least two vectors".into()));
    }
    let mean = actual.iter().fold(DVector::zeros(actual[0].len()), |acc, a| acc + a) / actual.len() as f64;
    let sst: f64 = actual.iter().map(|a| (a - &mean).norm_squared()).sum();
    if sst == 0.0 {
        return Err(Error::Undefined("actual vectors have zero variance".into()));
    }
    let sse: f64 = predicted
        .iter()
        .zip(actual)
        .map(|(p, a)| (a - p).norm_squared())
        .sum();
    Ok(1.0 - sse / sst)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KsResult {
    pub d: f64,
    pub p_value: f64,
}

/// Two-sample Kolmogorov–Smirnov distance with the asymptotic p-value.
pub fn ks_statistic(sample_a: &[f64], sample_b: &[f64]) -> Result<KsResult> {
    if sample_a.is_empty() || sample_b.is_empty() {
        return Err(Error::Empty("KS needs two non-empty samples".into()));
    }
    let mut a = sample_a.to_vec();
    let mut b = sample_b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len(), b.len());
    let (mut i, mut j) = (0, 0);
    let mut d: f64 = 0.0;
    while i < na && j < nb {
        let v = a[i].min(b[j]);
        while i < na && a[i] <= v {
            i += 1;
        }
        while j < nb && b[j] <= v {
            j += 1;
        }
        d = d.max((i as f64 / na as f64 - j as f64 / nb as f64).abs());
    }
    let ne = (na * nb) as f64 / (na + nb) as f64;
    Ok(KsResult {
        d,
        p_value: kolmogorov_q(ne.sqrt() * d),
    })
}

/// Survival function of the Kolmogorov distribution,
/// `Q(λ) = 2 Σ (-1)^{k-1} exp(-2k²λ²)`, truncated at 100 terms. Small `λ`
/// uses the equivalent theta-function form, where the alternating series
/// converges too slowly.
pub fn kolmogorov_q(lambda: f64) -> f64 {
    if lambda <= 0.0 {
        return 1.0;
    }
    let q = if lambda < 1.0 {
        let c = std::f64::consts::PI.powi(2) / (8.0 * lambda * lambda);
        let s: f64 = (0..100)
            .map(|k| (-((2 * k + 1) as f64).powi(2) * c).exp())
            .sum();
        1.0 - (2.0 * std::f64::consts::PI).sqrt() / lambda * s
    } else {
        2.0 * (1..=100)
            .map(|k| {
                let sign = if k % 2 == 1 { 1.0 } else { -1.0 };
                sign * (-2.0 * (k * k) as f64 * lambda * lambda).exp()
            })
            .sum::<f64>()
    };
    q.clamp(0.0, 1.0)
}

/// Sample autocorrelation at lags `1..=max_lag`.
pub fn autocorrelation(series: &[f64], max_lag: usize) -> Result<Vec<f64>> {
    if series.len() <= max_lag {
        return Err(Error::Undefined(format!(
            "series of length {} is too short for lag {max_lag}",
            series.len()
        )));
    }
    let mean = series.iter().sum::<f64>() / series.len() as f64;
    let c: Vec<f64> = series.iter().map(|x| x - mean).collect();
    let denom: f64 = c.iter().map(|x| x * x).sum();
    if denom == 0.0 {
        return Err(Error::Undefined("constant series".into()));
    }
    Ok((1..=max_lag)
        .map(|l| c.iter().zip(&c[l..]).map(|(a, b)| a * b).sum::<f64>() / denom)
        .collect())
}

/// Autocorrelation of several series around their pooled mean, summing the
/// lagged products within each series only.
pub fn pooled_autocorrelation(series: &[Vec<f64>], max_lag: usize) -> Result<Vec<f64>> {
    let n: usize = series.iter().map(Vec::len).sum();
    if n == 0 || series.iter().all(|s| s.len() <= max_lag) {
        return Err(Error::Undefined("no series long enough".into()));
    }
    let mean = series.iter().flatten().sum::<f64>() / n as f64;
    let denom: f64 = series.iter().flatten().map(|x| (x - mean).powi(2)).sum();
    if denom == 0.0 {
        return Err(Error::Undefined("constant series".into()));
    }
    Ok((1..=max_lag)
        .map(|l| {
            series
                .iter()
                .filter(|s| s.len() > l)
                .map(|s| {
                    s.iter()
                        .zip(&s[l..])
                        .map(|(a, b)| (a - mean) * (b - mean))
                        .sum::<f64>()
                })
                .sum::<f64>()
                / denom
        })
        .collect())
}

pub const MAX_ALIGN_REGIMES: usize = 8;

fn permutations(k: usize) -> Vec<Vec<usize>> {
    fn rec(prefix: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Vec<usize>>) {
        if prefix.len() == used.len() {
            out.push(prefix.clone());
            return;
        }
        for i in 0..used.len() {
            if !used[i] {
                used[i] = true;
                prefix.push(i);
                rec(prefix, used, out);
                prefix.pop();
                used[i] = false;
            }
        }
    }
    let mut out = Vec::new();
    rec(&mut Vec::new(), &mut vec![false; k], &mut out);
    out
}

/// Permutation `σ` minimizing `Σ_j ‖b_j - b̂_σ(j)‖ + ‖M_j - M̂_σ(j)‖_F`:
/// true regime `j` corresponds to estimated regime `σ[j]`.
pub fn align_labels(truth: &SldsParams, est: &SldsParams) -> Result<Vec<usize>> {
    let k = truth.n_regimes();
    if est.n_regimes() != k {
        return Err(Error::DimensionMismatch {
            expected: k,
            found: est.n_regimes(),
        });
    }
    if k > MAX_ALIGN_REGIMES {
        return Err(Error::Config(format!("cannot align {k} > {MAX_ALIGN_REGIMES} regimes")));
    }
    let cost = DMatrix::from_fn(k, k, |i, j| {
        let (t, e) = (&truth.dynamics()[i], &est.dynamics()[j]);
        (&t.b - &e.b).norm() + (&t.m - &e.m).norm()
    });
    let mut best = (f64::INFINITY, Vec::new());
    for p in permutations(k) {
        let c: f64 = p.iter().enumerate().map(|(i, &j)| cost[(i, j)]).sum();
        if c < best.0 {
            best = (c, p);
        }
    }
    Ok(best.1)
}

/// Fraction of transitions whose argmax posterior is each regime.
pub fn occupancy(gammas: &[DMatrix<f64>], k: usize) -> Result<Vec<f64>> {
    let mut counts = vec![0.0; k];
    let mut total = 0.0;
    for g in gammas {
        for row in g.row_iter() {
            let mut best = 0;
            for j in 1..k {
                if row[j] > row[best] {
                    best = j;
                }
            }
            counts[best] += 1.0;
            total += 1.0;
        }
    }
    if total == 0.0 {
        return Err(Error::Empty("no posteriors".into()));
    }
    Ok(counts.into_iter().map(|c| c / total).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JumpMoments {
    pub mean: f64,
    pub variance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub r2: f64,
    pub nll_per_transition: f64,
    pub jump_moment_table: JumpMoments,
    pub occupancy: Vec<f64>,
    pub autocorr: Vec<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn v(x: f64) -> DVector<f64> {
        DVector::from_element(1, x)
    }

    #[test]
    fn r2_examples() {
        let actual = vec![v(0.0), v(2.0)];
        assert_eq!(prediction_r2(&actual, &actual).unwrap(), 1.0);
        assert!(prediction_r2(&[v(1.0), v(1.0)], &actual).unwrap().abs() < 1e-12);
        assert!((prediction_r2(&[v(0.0), v(1.0)], &actual).unwrap() - 0.5).abs() < 1e-12);
        assert!(prediction_r2(&[v(0.0), v(0.0)], &[v(1.0), v(1.0)]).is_err());
    }

    #[test]
    fn ks_examples() {
        let r = ks_statistic(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!((r.d, r.p_value), (0.0, 1.0));
        assert_eq!(ks_statistic(&[0.0; 3], &[1.0; 3]).unwrap().d, 1.0);
        assert!(ks_statistic(&[], &[1.0]).is_err());
    }

    #[test]
    fn ks_matches_brute_force() {
        let mut rng = seeded(4);
        let a: Vec<f64> = (0..500).map(|_| rng.sample(StandardNormal)).collect();
        let b: Vec<f64> = (0..500).map(|_| rng.sample(StandardNormal)).collect();
        let ecdf = |s: &[f64], x: f64| s.iter().filter(|&&v| v <= x).count() as f64 / s.len() as f64;
        let brute = a
            .iter()
            .chain(&b)
            .map(|&x| (ecdf(&a, x) - ecdf(&b, x)).abs())
            .fold(0.0, f64::max);
        let r = ks_statistic(&a, &b).unwrap();
        assert!((r.d - brute).abs() < 1e-12);
        assert_eq!(r, ks_statistic(&b, &a).unwrap());
    }

    #[test]
    fn kolmogorov_tail_reference_values() {
        // standard table values of the Kolmogorov distribution
        assert!((kolmogorov_q(1.36) - 0.0494).abs() < 1e-3);
        assert!((kolmogorov_q(1.63) - 0.0098).abs() < 1e-3);
        assert!((kolmogorov_q(0.5) - 0.9639).abs() < 1e-3);
        // both series agree where they overlap
        let c = std::f64::consts::PI.powi(2) / 8.0;
        let theta = 1.0 - (2.0 * std::f64::consts::PI).sqrt() * (0..100).map(|k| (-((2 * k + 1) as f64).powi(2) * c).exp()).sum::<f64>();
        assert!((theta - kolmogorov_q(1.0)).abs() < 1e-12);
    }

    #[test]
    fn autocorrelation_examples() {
        let alt: Vec<f64> = (0..100).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        // lag-1 products cover n-1 pairs, so the value is -(n-1)/n
        assert!((autocorrelation(&alt, 1).unwrap()[0] + 0.99).abs() < 1e-10);
        assert!(autocorrelation(&[1.0; 5], 1).is_err());
        assert!(autocorrelation(&[1.0, 2.0], 2).is_err());

        let mut rng = seeded(2);
        let mut x = 0.0;
        let ar: Vec<f64> = (0..100_000)
            .map(|_| {
                x = 0.7 * x + rng.sample::<f64, _>(StandardNormal);
                x
            })
            .collect();
        assert!((autocorrelation(&ar, 1).unwrap()[0] - 0.7).abs() < 0.02);
    }

    #[test]
    fn occupancy_counts_argmax() {
        let g = DMatrix::from_row_slice(3, 2, &[0.9, 0.1, 0.4, 0.6, 0.5, 0.5]);
        assert_eq!(occupancy(&[g], 2).unwrap(), vec![2.0 / 3.0, 1.0 / 3.0]);
    }
}
