//! Full-covariance Gaussian mixture fitted by EM from a K-Means start.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::ops::log_sum_exp;

use super::kmeans::{check_input, KMeans};

pub const COVARIANCE_REG: f64 = 1e-6;

/// Lower Cholesky factor of a symmetric positive-definite matrix.
pub fn cholesky(a: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let n = a.len();
    let mut l = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[i][k] * l[j][k]).sum();
            if i == j {
                let v = a[i][i] - s;
                if v <= 0.0 || !v.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "matrix is not positive definite at pivot {i}"
                    )));
                }
                l[i][j] = v.sqrt();
            } else {
                l[i][j] = (a[i][j] - s) / l[j][j];
            }
        }
    }
    Ok(l)
}

/// `(log det A, x^T A^{-1} x)` from the Cholesky factor of `A`.
fn logdet_and_mahalanobis(l: &[Vec<f64>], x: &[f64]) -> (f64, f64) {
    let n = l.len();
    let mut y = vec![0.0; n];
    for i in 0..n {
        let s: f64 = (0..i).map(|k| l[i][k] * y[k]).sum();
        y[i] = (x[i] - s) / l[i][i];
    }
    let logdet = 2.0 * l.iter().enumerate().map(|(i, r)| r[i].ln()).sum::<f64>();
    (logdet, y.iter().map(|v| v * v).sum())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gmm {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub covariances: Vec<Vec<Vec<f64>>>,
    /// Total log-likelihood after each E-step.
    pub log_likelihoods: Vec<f64>,
}

struct Component {
    log_weight: f64,
    mean: Vec<f64>,
    chol: Vec<Vec<f64>>,
}

fn components(g: &Gmm) -> Result<Vec<Component>> {
    g.weights
        .iter()
        .zip(&g.means)
        .zip(&g.covariances)
        .map(|((w, m), c)| {
            Ok(Component {
                log_weight: w.ln(),
                mean: m.clone(),
                chol: cholesky(c)?,
            })
        })
        .collect()
}

fn log_joint(comps: &[Component], x: &[f64]) -> Vec<f64> {
    let d = x.len() as f64;
    comps
        .iter()
        .map(|c| {
            let diff: Vec<f64> = x.iter().zip(&c.mean).map(|(a, b)| a - b).collect();
            let (logdet, maha) = logdet_and_mahalanobis(&c.chol, &diff);
            c.log_weight - 0.5 * (d * (2.0 * std::f64::consts::PI).ln() + logdet + maha)
        })
        .collect()
}

fn scatter(x: &[Vec<f64>], w: &[f64], mean: &[f64], total: f64) -> Vec<Vec<f64>> {
    let d = mean.len();
    let mut c = vec![vec![0.0; d]; d];
    for (p, &wi) in x.iter().zip(w) {
        if wi == 0.0 {
            continue;
        }
        let diff: Vec<f64> = p.iter().zip(mean).map(|(a, b)| a - b).collect();
        for i in 0..d {
            for j in i..d {
                c[i][j] += wi * diff[i] * diff[j];
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            c[i][j] /= total;
            c[j][i] = c[i][j];
        }
        c[i][i] += COVARIANCE_REG;
    }
    c
}

fn weighted_mean(x: &[Vec<f64>], w: &[f64], total: f64) -> Vec<f64> {
    let mut m = vec![0.0; x[0].len()];
    for (p, &wi) in x.iter().zip(w) {
        for (mi, v) in m.iter_mut().zip(p) {
            *mi += wi * v;
        }
    }
    m.iter_mut().for_each(|v| *v /= total);
    m
}

impl Gmm {
    pub fn fit(
        x: &[Vec<f64>],
        k: usize,
        max_iter: usize,
        tol: f64,
        rng: &mut RngStream,
    ) -> Result<Self> {
        check_input(x, k)?;
        let n = x.len();
        let km = KMeans::fit(x, k, 300, rng)?;
        let ones = vec![1.0; n];
        let global_mean = weighted_mean(x, &ones, n as f64);
        let global_cov = scatter(x, &ones, &global_mean, n as f64);
        let mut g = Gmm {
            weights: Vec::with_capacity(k),
            means: km.centroids.clone(),
            covariances: Vec::with_capacity(k),
            log_likelihoods: Vec::new(),
        };
        for c in 0..k {
            let w: Vec<f64> = x
                .iter()
                .map(|p| if km.predict(p) == c { 1.0 } else { 0.0 })
                .collect();
            let cnt: f64 = w.iter().sum();
            g.weights.push(cnt.max(1.0) / n as f64);
            g.covariances.push(if cnt >= 2.0 {
                scatter(x, &w, &g.means[c], cnt)
            } else {
                global_cov.clone()
            });
        }
        let wsum: f64 = g.weights.iter().sum();
        g.weights.iter_mut().for_each(|w| *w /= wsum);

        for _ in 0..max_iter.max(1) {
            let comps = components(&g)?;
            let mut resp = vec![vec![0.0; n]; k];
            let mut ll = 0.0;
            let mut point_ll = Vec::with_capacity(n);
            for (i, p) in x.iter().enumerate() {
                let lj = log_joint(&comps, p);
                let lse = log_sum_exp(&lj);
                ll += lse;
                point_ll.push(lse);
                for c in 0..k {
                    resp[c][i] = (lj[c] - lse).exp();
                }
            }
            if !ll.is_finite() {
                return Err(Error::NonFinite("GMM log-likelihood".into()));
            }
            let prev = g.log_likelihoods.last().copied();
            g.log_likelihoods.push(ll);
            if let Some(prev) = prev {
                if ((ll - prev) / prev.abs().max(f64::MIN_POSITIVE)).abs() < tol {
                    break;
                }
            }
            let mut taken: Vec<usize> = Vec::new();
            for c in 0..k {
                let nk: f64 = resp[c].iter().sum();
                if nk < 1e-8 {
                    // the worst-explained sample becomes the new centre
                    let far = (0..n)
                        .filter(|i| !taken.contains(i))
                        .min_by(|&a, &b| point_ll[a].total_cmp(&point_ll[b]))
                        .unwrap_or(0);
                    log::warn!("GMM component {c} emptied; reseeding from sample {far}");
                    taken.push(far);
                    g.means[c] = x[far].clone();
                    g.covariances[c] = global_cov.clone();
                    g.weights[c] = 1.0 / n as f64;
                    continue;
                }
                g.weights[c] = nk / n as f64;
                g.means[c] = weighted_mean(x, &resp[c], nk);
                g.covariances[c] = scatter(x, &resp[c], &g.means[c], nk);
            }
            let wsum: f64 = g.weights.iter().sum();
            g.weights.iter_mut().for_each(|w| *w /= wsum);
        }
        Ok(g)
    }

    /// Most responsible component, ties to the lowest index.
    pub fn predict_all(&self, x: &[Vec<f64>]) -> Result<Vec<usize>> {
        let comps = components(self)?;
        Ok(x
            .iter()
            .map(|p| crate::model::experts::argmax(&log_joint(&comps, p)))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cholesky_reconstructs() {
        let a = vec![vec![4.0, 2.0], vec![2.0, 3.0]];
        let l = cholesky(&a).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                let v: f64 = (0..2).map(|k| l[i][k] * l[j][k]).sum();
                assert!((v - a[i][j]).abs() < 1e-12);
            }
        }
        assert!(cholesky(&[vec![0.0]]).is_err());
    }

    #[test]
    fn single_component_mean_is_sample_mean() {
        let mut rng = RngStream::new(2);
        let x: Vec<Vec<f64>> = (0..40).map(|_| vec![rng.normal(), 3.0 + rng.normal()]).collect();
        let g = Gmm::fit(&x, 1, 200, 1e-4, &mut RngStream::new(0)).unwrap();
        let m0 = x.iter().map(|p| p[0]).sum::<f64>() / 40.0;
        let m1 = x.iter().map(|p| p[1]).sum::<f64>() / 40.0;
        assert!((g.means[0][0] - m0).abs() < 1e-12);
        assert!((g.means[0][1] - m1).abs() < 1e-12);
        assert_eq!(g.weights, vec![1.0]);
        assert!(g.predict_all(&x).unwrap().iter().all(|&l| l == 0));
    }
}
