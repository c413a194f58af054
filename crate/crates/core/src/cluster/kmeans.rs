//! Lloyd's algorithm with k-means++ seeding.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest centroid; ties go to the lowest index.
pub(crate) fn nearest(centroids: &[Vec<f64>], x: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centroids.iter().enumerate() {
        let d = sq_dist(c, x);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KMeans {
    pub centroids: Vec<Vec<f64>>,
    pub iterations: usize,
}

pub(crate) fn check_input(x: &[Vec<f64>], k: usize) -> Result<usize> {
    if k == 0 {
        return Err(Error::InvalidArgument("number of clusters must be positive".into()));
    }
    if k > x.len() {
        return Err(Error::InvalidArgument(format!(
            "{k} clusters requested for {} samples",
            x.len()
        )));
    }
    let d = x[0].len();
    if x.iter().any(|r| r.len() != d) {
        return Err(Error::InvalidArgument("ragged feature rows".into()));
    }
    Ok(d)
}

fn plus_plus(x: &[Vec<f64>], k: usize, rng: &mut RngStream) -> Vec<Vec<f64>> {
    let mut centroids = vec![x[rng.below(x.len())].clone()];
    let mut d2: Vec<f64> = x.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total <= 0.0 {
            rng.below(x.len())
        } else {
            let mut u = rng.uniform() * total;
            let mut idx = x.len() - 1;
            for (i, &w) in d2.iter().enumerate() {
                if u < w {
                    idx = i;
                    break;
                }
                u -= w;
            }
            idx
        };
        let c = x[pick].clone();
        for (p, dd) in x.iter().zip(d2.iter_mut()) {
            *dd = dd.min(sq_dist(p, &c));
        }
        centroids.push(c);
    }
    centroids
}

/// Point farthest from its nearest centroid, excluding already taken points.
pub(crate) fn farthest_point(x: &[Vec<f64>], centroids: &[Vec<f64>], taken: &[usize]) -> usize {
    let mut best = (0, -1.0);
    for (i, p) in x.iter().enumerate() {
        if taken.contains(&i) {
            continue;
        }
        let d = nearest(centroids, p).1;
        if d > best.1 {
            best = (i, d);
        }
    }
    best.0
}

impl KMeans {
    pub fn fit(x: &[Vec<f64>], k: usize, max_iter: usize, rng: &mut RngStream) -> Result<Self> {
        let d = check_input(x, k)?;
        let mut centroids = plus_plus(x, k, rng);
        let mut labels = vec![usize::MAX; x.len()];
        let mut iterations = 0;
        for it in 0..max_iter.max(1) {
            iterations = it + 1;
            let mut changed = false;
            for (p, l) in x.iter().zip(labels.iter_mut()) {
                let (c, _) = nearest(&centroids, p);
                if *l != c {
                    *l = c;
                    changed = true;
                }
            }
            let mut sums = vec![vec![0.0; d]; k];
            let mut counts = vec![0usize; k];
            for (p, &l) in x.iter().zip(&labels) {
                counts[l] += 1;
                for (s, v) in sums[l].iter_mut().zip(p) {
                    *s += v;
                }
            }
            let mut reseeded = Vec::new();
            for c in 0..k {
                if counts[c] == 0 {
                    let far = farthest_point(x, &centroids, &reseeded);
                    log::warn!("k-means cluster {c} emptied; reseeding from sample {far}");
                    centroids[c] = x[far].clone();
                    reseeded.push(far);
                    changed = true;
                } else {
                    centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
                }
            }
            if !changed {
                break;
            }
        }
        Ok(KMeans { centroids, iterations })
    }

    /// Sum of squared distances to the nearest centroid.
    pub fn inertia(&self, x: &[Vec<f64>]) -> f64 {
        x.iter().map(|p| nearest(&self.centroids, p).1).sum()
    }

    pub fn predict(&self, x: &[f64]) -> usize {
        nearest(&self.centroids, x).0
    }
}
