//! Low-rank-plus-diagonal multivariate normal `N(mu, P P^T + diag(d))`.
//!
//! Density evaluation goes through the Woodbury identity and the matrix
//! determinant lemma, so the cost is `O(dim * rank^2)` and the `dim x dim`
//! covariance is never formed.

use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Gaussian over `dim` logits with covariance `P P^T + diag(d)`, `P` stored
/// row-major as `dim x rank`.
#[derive(Clone, Debug, PartialEq)]
pub struct LowRankGaussian {
    mu: Vec<f64>,
    factor: Vec<f64>,
    diag: Vec<f64>,
    rank: usize,
}

impl LowRankGaussian {
    pub fn new(mu: Vec<f64>, factor: Vec<f64>, diag: Vec<f64>, rank: usize) -> Result<Self> {
        let dim = mu.len();
        if rank == 0 || factor.len() != dim * rank || diag.len() != dim {
            return Err(Error::dim(
                "low_rank_gaussian",
                alloc::format!(
                    "mu {dim}, factor {} (rank {rank}), diag {}",
                    factor.len(),
                    diag.len()
                ),
            ));
        }
        if let Some(bad) = diag.iter().find(|&&d| !(d > 0.0 && d.is_finite())) {
            return Err(Error::Numeric(alloc::format!(
                "diagonal entries must be positive and finite, found {bad}"
            )));
        }
        Ok(Self {
            mu,
            factor,
            diag,
            rank,
        })
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn mean(&self) -> &[f64] {
        &self.mu
    }

    pub fn factor(&self) -> &[f64] {
        &self.factor
    }

    pub fn diag(&self) -> &[f64] {
        &self.diag
    }

    /// Dense `P P^T + diag(d)`; quadratic in `dim`, meant for small
    /// instances and inspection.
    pub fn covariance_dense(&self) -> Vec<f64> {
        let (n, a) = (self.dim(), self.rank);
        let mut cov = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                let pi = &self.factor[i * a..(i + 1) * a];
                let pj = &self.factor[j * a..(j + 1) * a];
                cov[i * n + j] = pi.iter().zip(pj).map(|(x, y)| x * y).sum();
            }
            cov[i * n + i] += self.diag[i];
        }
        cov
    }

    /// Reparameterised draw `mu + P e1 + sqrt(d) * e2`.
    pub fn sample(&self, rng: &mut impl Rng) -> Vec<f64> {
        let e1: Vec<f64> = (0..self.rank).map(|_| rng.sample(StandardNormal)).collect();
        self.mu
            .iter()
            .enumerate()
            .map(|(i, &m)| {
                let e2: f64 = rng.sample(StandardNormal);
                let low: f64 = self.factor[i * self.rank..(i + 1) * self.rank]
                    .iter()
                    .zip(&e1)
                    .map(|(p, e)| p * e)
                    .sum();
                m + low + Float::sqrt(self.diag[i]) * e2
            })
            .collect()
    }

    /// Exact log-density at `z`.
    pub fn log_prob(&self, z: &[f64]) -> Result<f64> {
        let (n, a) = (self.dim(), self.rank);
        if z.len() != n {
            return Err(Error::dim(
                "log_prob",
                alloc::format!("point of length {} for a {n}-dim distribution", z.len()),
            ));
        }
        // Capacitance C = I + P^T D^-1 P and u = P^T D^-1 (z - mu).
        let mut cap = vec![0.0; a * a];
        let mut u = vec![0.0; a];
        let mut maha = 0.0;
        let mut log_det = 0.0;
        for i in 0..n {
            let inv = 1.0 / self.diag[i];
            let r = z[i] - self.mu[i];
            maha += r * r * inv;
            log_det += Float::ln(self.diag[i]);
            let p = &self.factor[i * a..(i + 1) * a];
            for j in 0..a {
                u[j] += p[j] * inv * r;
                for k in 0..=j {
                    cap[j * a + k] += p[j] * inv * p[k];
                }
            }
        }
        for j in 0..a {
            cap[j * a + j] += 1.0;
        }
        let chol = cholesky_lower(&mut cap, a)?;
        // (z - mu)^T Sigma^-1 (z - mu) = r^T D^-1 r - |L^-1 u|^2
        let y = forward_substitute(chol, a, &u);
        maha -= y.iter().map(|v| v * v).sum::<f64>();
        log_det += 2.0 * (0..a).map(|j| Float::ln(chol[j * a + j])).sum::<f64>();
        let value = -0.5 * (n as f64 * Float::ln(2.0 * core::f64::consts::PI) + log_det + maha);
        if !value.is_finite() {
            return Err(Error::Numeric("log_prob is not finite".into()));
        }
        Ok(value)
    }
}

/// In-place Cholesky of the lower triangle of a symmetric `n x n` matrix.
fn cholesky_lower(m: &mut [f64], n: usize) -> Result<&[f64]> {
    for j in 0..n {
        let mut d = m[j * n + j];
        for k in 0..j {
            d -= m[j * n + k] * m[j * n + k];
        }
        if !(d > 0.0) {
            return Err(Error::Numeric("capacitance matrix is not positive definite".into()));
        }
        let l = Float::sqrt(d);
        m[j * n + j] = l;
        for i in j + 1..n {
            let mut s = m[i * n + j];
            for k in 0..j {
                s -= m[i * n + k] * m[j * n + k];
            }
            m[i * n + j] = s / l;
        }
    }
    Ok(m)
}

fn forward_substitute(l: &[f64], n: usize, b: &[f64]) -> Vec<f64> {
    let mut y = vec![0.0; n];
    for i in 0..n {
        let s: f64 = (0..i).map(|k| l[i * n + k] * y[k]).sum();
        y[i] = (b[i] - s) / l[i * n + i];
    }
    y
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn standard_normal_at_zero() {
        let g = LowRankGaussian::new(vec![0.0], vec![0.0], vec![1.0], 1).unwrap();
        let lp = g.log_prob(&[0.0]).unwrap();
        assert!((lp + 0.918_938_533_204_672_7).abs() < 1e-12);
    }

    #[test]
    fn rejects_non_positive_diagonal() {
        assert!(LowRankGaussian::new(vec![0.0; 2], vec![0.0; 2], vec![1.0, 0.0], 1).is_err());
        assert!(LowRankGaussian::new(vec![0.0; 2], vec![0.0; 3], vec![1.0, 1.0], 1).is_err());
    }

    #[test]
    fn dense_covariance_of_rank_one_2x2() {
        let p = vec![1.0, 2.0, -1.0, 0.5];
        let g = LowRankGaussian::new(vec![0.0; 4], p.clone(), vec![0.1, 0.2, 0.3, 0.4], 1).unwrap();
        let cov = g.covariance_dense();
        for i in 0..4 {
            for j in 0..4 {
                let want = p[i] * p[j] + if i == j { g.diag()[i] } else { 0.0 };
                assert!((cov[i * 4 + j] - want).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn density_peaks_at_the_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mu: Vec<f64> = (0..6).map(|i| i as f64 * 0.3).collect();
        let factor: Vec<f64> = (0..12).map(|i| (i as f64).sin()).collect();
        let g = LowRankGaussian::new(mu.clone(), factor, vec![0.5; 6], 2).unwrap();
        let at_mean = g.log_prob(&mu).unwrap();
        for _ in 0..50 {
            let z = g.sample(&mut rng);
            assert!(g.log_prob(&z).unwrap() <= at_mean);
        }
    }

    #[test]
    fn vanishing_noise_returns_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let eps = 1e-5;
        let mu: Vec<f64> = (0..16).map(|i| i as f64 - 8.0).collect();
        let g = LowRankGaussian::new(mu.clone(), vec![0.0; 32], vec![eps; 16], 2).unwrap();
        let z = g.sample(&mut rng);
        for (a, b) in z.iter().zip(&mu) {
            assert!((a - b).abs() < 3.0 * eps.sqrt() * 2.0);
        }
    }
}
