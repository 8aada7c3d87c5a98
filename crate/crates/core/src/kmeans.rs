//! Seeded k-means used to initialize the mixture and SLDS fits.

use nalgebra::DVector;
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::seeded;

pub const LLOYD_ITERATIONS: usize = 25;

#[derive(Debug, Clone)]
pub struct KMeans {
    pub centroids: Vec<DVector<f64>>,
    /// Zero-based cluster of every point.
    pub labels: Vec<usize>,
}

/// k-means++ seeding (squared-distance sampling) followed by a fixed number
/// of Lloyd iterations. Empty clusters keep their previous centroid.
pub fn kmeans(points: &[DVector<f64>], k: usize, seed: u64, iterations: usize) -> Result<KMeans> {
    let n = points.len();
    if k == 0 || k > n {
        return Err(Error::Config(format!("cannot form {k} clusters from {n} points")));
    }
    let mut rng = seeded(seed);
    let mut centroids = vec![points[rng.random_range(0..n)].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| (p - &centroids[0]).norm_squared()).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if target < w {
                    pick = i;
                    break;
                }
                target -= w;
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        let c = points[next].clone();
        for (p, d) in points.iter().zip(d2.iter_mut()) {
            *d = d.min((p - &c).norm_squared());
        }
        centroids.push(c);
    }

    let mut labels = vec![0; n];
    for _ in 0..iterations.max(1) {
        for (p, l) in points.iter().zip(labels.iter_mut()) {
            *l = nearest(&centroids, p);
        }
        let dim = points[0].len();
        let mut sums = vec![DVector::zeros(dim); k];
        let mut counts = vec![0usize; k];
        for (p, &l) in points.iter().zip(&labels) {
            sums[l] += p;
            counts[l] += 1;
        }
        for j in 0..k {
            if counts[j] > 0 {
                centroids[j] = &sums[j] / counts[j] as f64;
            }
        }
    }
    for (p, l) in points.iter().zip(labels.iter_mut()) {
        *l = nearest(&centroids, p);
    }
    Ok(KMeans { centroids, labels })
}

fn nearest(centroids: &[DVector<f64>], p: &DVector<f64>) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (j, c) in centroids.iter().enumerate() {
        let d = (p - c).norm_squared();
        if d < best_d {
            best_d = d;
            best = j;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn separates_two_blobs() {
        let mut pts = Vec::new();
        for i in 0..20 {
            let e = i as f64 * 0.01;
            pts.push(DVector::from_vec(vec![-5.0 + e, 0.0]));
            pts.push(DVector::from_vec(vec![5.0 - e, 0.0]));
        }
        let km = kmeans(&pts, 2, 1, LLOYD_ITERATIONS).unwrap();
        for pair in km.labels.chunks(2) {
            assert_ne!(pair[0], pair[1]);
        }
        assert!(kmeans(&pts, 41, 1, 1).is_err());
    }
}
