#![allow(clippy::field_reassign_with_default, clippy::needless_range_loop)]

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tab_core::gradcheck::uniform;
use tab_core::lowrank::LowRankGaussian;
use tab_core::model::{ModelConfig, SampleNoise, SsHead, SEG_CHANNELS};
use tab_core::nn::ParamStore;
use tab_core::{Error, Graph, Tensor};

fn head(alpha: usize, seed: u64) -> (ParamStore<f64>, SsHead) {
    let mut cfg = ModelConfig::default();
    cfg.ss.alpha = alpha;
    let mut ps = ParamStore::new();
    let h = SsHead::new(&mut ps, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    (ps, h)
}

fn random_gaussian(dim: usize, rank: usize, rng: &mut impl Rng) -> LowRankGaussian {
    let mu = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let factor = (0..dim * rank).map(|_| rng.random_range(-0.7..0.7)).collect();
    let diag = (0..dim).map(|_| rng.random_range(0.2..1.0)).collect();
    LowRankGaussian::new(mu, factor, diag, rank).unwrap()
}

fn dense(g: &LowRankGaussian) -> DMatrix<f64> {
    let n = g.dim();
    DMatrix::from_row_slice(n, n, &g.covariance_dense())
}

/// Log-density from a dense Cholesky factorisation of the full covariance.
fn dense_log_prob(g: &LowRankGaussian, z: &[f64]) -> f64 {
    let n = g.dim();
    let chol = dense(g).cholesky().expect("covariance is positive definite");
    let r = DVector::from_iterator(n, z.iter().zip(g.mean()).map(|(a, b)| a - b));
    let sol = chol.solve(&r);
    let log_det: f64 = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    -0.5 * (n as f64 * (2.0 * std::f64::consts::PI).ln() + log_det + r.dot(&sol))
}

#[test]
fn zero_factor_weights_give_diagonal_covariance() {
    let (mut ps, h) = head(3, 0);
    let w = ps.get(h.heads.weight).value.clone();
    let mut w0 = w.clone();
    w0.data_mut()[SEG_CHANNELS..(1 + h.rank) * SEG_CHANNELS].fill(0.0);
    ps.set_value(h.heads.weight, w0).unwrap();
    let b = h.heads.bias.unwrap();
    ps.get_mut(b).value.data_mut()[1..=h.rank].fill(0.0);
    let prior = h.prior.as_ref().unwrap().weight;
    ps.get_mut(prior).value.data_mut()[..h.rank].fill(0.0);

    let mut g = Graph::new();
    let f = g.constant(uniform(&[2, SEG_CHANNELS, 3, 3], -2.0, 2.0, 1));
    let out = h.forward(&mut g, &ps, f).unwrap();
    assert!(g.value(out.factor.unwrap()).data().iter().all(|&v| v == 0.0));
    let cov = h.distribution(&g, &out, 1).unwrap().covariance_dense();
    for i in 0..9 {
        for j in 0..9 {
            assert_eq!(cov[i * 9 + j] == 0.0, i != j);
        }
    }
}

#[test]
fn rank_one_two_by_two_matches_dense_formula() {
    let (ps, h) = head(1, 2);
    let mut g = Graph::new();
    let f = g.constant(uniform(&[1, SEG_CHANNELS, 2, 2], -2.0, 2.0, 3));
    let out = h.forward(&mut g, &ps, f).unwrap();
    let p = g.value(out.factor.unwrap()).data().to_vec();
    let d = g.value(out.diag.unwrap()).data().to_vec();
    assert_eq!((p.len(), d.len()), (4, 4));
    let cov = h.distribution(&g, &out, 0).unwrap().covariance_dense();
    for i in 0..4 {
        for j in 0..4 {
            let expect = p[i] * p[j] + if i == j { d[i] } else { 0.0 };
            assert!((cov[i * 4 + j] - expect).abs() < 1e-15);
        }
    }
}

#[test]
fn graph_sample_matches_reparameterisation() {
    let (ps, h) = head(2, 4);
    let mut g = Graph::new();
    let f = g.constant(uniform(&[2, SEG_CHANNELS, 2, 3], -2.0, 2.0, 5));
    let out = h.forward(&mut g, &ps, f).unwrap();
    let noise = SampleNoise::<f64>::draw(2, 2, 2, 3, &mut ChaCha8Rng::seed_from_u64(6));
    let z = h.sample(&mut g, &out, &noise).unwrap();
    for row in 0..2 {
        let dist = h.distribution(&g, &out, row).unwrap();
        let e1 = &noise.low_rank.data()[row * 2..row * 2 + 2];
        let e2 = &noise.pixel.data()[row * 6..row * 6 + 6];
        for i in 0..6 {
            let low: f64 = (0..2).map(|j| dist.factor()[i * 2 + j] * e1[j]).sum();
            let expect = dist.mean()[i] + low + dist.diag()[i].sqrt() * e2[i];
            assert!((g.value(z).data()[row * 6 + i] - expect).abs() < 1e-12);
        }
    }
}

#[test]
fn vanishing_noise_sample_is_the_mean() {
    let (mut ps, h) = head(2, 7);
    let w = h.heads.weight;
    let mut wt = ps.get(w).value.clone();
    wt.data_mut()[SEG_CHANNELS..].fill(0.0);
    ps.set_value(w, wt).unwrap();
    let b = h.heads.bias.unwrap();
    ps.get_mut(b).value.data_mut()[1..].copy_from_slice(&[0.0, 0.0, -80.0]);
    ps.get_mut(h.prior.as_ref().unwrap().weight).value.fill(0.0);
    let mut g = Graph::new();
    let f = g.constant(uniform(&[1, SEG_CHANNELS, 2, 2], -2.0, 2.0, 8));
    let out = h.forward(&mut g, &ps, f).unwrap();
    let noise = SampleNoise::<f64>::draw(1, 2, 2, 2, &mut ChaCha8Rng::seed_from_u64(9));
    let z = h.sample(&mut g, &out, &noise).unwrap();
    let bound = 3.0 * 1e-5f64.sqrt();
    for (a, m) in g.value(z).data().iter().zip(g.value(out.mu).data()) {
        assert!((a - m).abs() < bound);
    }
}

#[test]
fn monte_carlo_moments_match_the_low_rank_covariance() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let dist = random_gaussian(8, 2, &mut rng);
    let n = 200_000;
    let mut mean = [0.0; 8];
    let mut second = [0.0; 64];
    for _ in 0..n {
        let z = dist.sample(&mut rng);
        for i in 0..8 {
            mean[i] += z[i];
            for j in 0..8 {
                second[i * 8 + j] += z[i] * z[j];
            }
        }
    }
    let cov = dist.covariance_dense();
    for i in 0..8 {
        mean[i] /= n as f64;
        assert!((mean[i] - dist.mean()[i]).abs() < 0.02);
    }
    for i in 0..8 {
        for j in 0..8 {
            let c = second[i * 8 + j] / n as f64 - mean[i] * mean[j];
            assert!((c - cov[i * 8 + j]).abs() < 0.05, "({i}, {j}): {c} vs {}", cov[i * 8 + j]);
        }
    }
}

#[test]
fn log_prob_matches_dense_cholesky() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for dim in [2, 4, 8, 16] {
        for _ in 0..25 {
            let rank = rng.random_range(1..=dim.min(4));
            let dist = random_gaussian(dim, rank, &mut rng);
            let z: Vec<f64> = (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect();
            let (a, b) = (dist.log_prob(&z).unwrap(), dense_log_prob(&dist, &z));
            assert!(((a - b) / b).abs() < 1e-6, "dim {dim}: {a} vs {b}");
        }
    }
}

#[test]
fn non_finite_input_is_a_numeric_error() {
    let dist = LowRankGaussian::new(vec![0.0; 2], vec![0.0; 2], vec![1.0; 2], 1).unwrap();
    assert!(matches!(dist.log_prob(&[f64::NAN, 0.0]), Err(Error::Numeric(_))));
    assert!(LowRankGaussian::new(vec![0.0; 2], vec![0.0; 2], vec![1.0, f64::INFINITY], 1).is_err());
}

/// Pathwise gradient of `E[sum sigmoid(z)] / n` with respect to `mu` against
/// finite differences of the same Monte-Carlo objective.
#[test]
fn reparameterisation_gradient_matches_finite_differences() {
    let (ps, h) = head(2, 12);
    let n = 10_000;
    let (hh, ww) = (1, 3);
    let mut g = Graph::new();
    let f = g.constant(uniform(&[1, SEG_CHANNELS, hh, ww], -1.0, 1.0, 13));
    let base = h.forward(&mut g, &ps, f).unwrap();
    let mu0 = g.value(base.mu).clone();
    let factor = g.value(base.factor.unwrap()).clone();
    let diag = g.value(base.diag.unwrap()).clone();
    let noise = SampleNoise::<f64>::draw(n, 2, hh, ww, &mut ChaCha8Rng::seed_from_u64(14));

    let objective = |mu: &Tensor<f64>, grad: bool| -> (f64, Option<Tensor<f64>>) {
        let mut g = Graph::new();
        let m = g.leaf(mu.clone(), grad);
        let p = g.constant(factor.clone());
        let d = g.constant(diag.clone());
        let rows = vec![0; n];
        let out = tab_core::model::HeadOutput {
            mu: g.index_select0(m, &rows).unwrap(),
            factor: Some(g.index_select0(p, &rows).unwrap()),
            diag: Some(g.index_select0(d, &rows).unwrap()),
        };
        let z = h.sample(&mut g, &out, &noise).unwrap();
        let s = g.sigmoid(z);
        let total = g.sum(s);
        let loss = g.scale(total, 1.0 / n as f64);
        let v = g.value(loss).item().unwrap();
        if grad {
            g.backward(loss).unwrap();
            return (v, g.grad(m).cloned());
        }
        (v, None)
    };
    let (_, grad) = objective(&mu0, true);
    let grad = grad.unwrap();

    // Per-sample pathwise terms sigma'(z_i) give the standard error.
    let mut gz = Graph::new();
    let z = {
        let m = gz.constant(mu0.clone());
        let p = gz.constant(factor.clone());
        let d = gz.constant(diag.clone());
        let rows = vec![0; n];
        let out = tab_core::model::HeadOutput {
            mu: gz.index_select0(m, &rows).unwrap(),
            factor: Some(gz.index_select0(p, &rows).unwrap()),
            diag: Some(gz.index_select0(d, &rows).unwrap()),
        };
        h.sample(&mut gz, &out, &noise).unwrap()
    };
    let zs = gz.value(z).data().to_vec();
    let hstep = 1e-4;
    for i in 0..hh * ww {
        let terms: Vec<f64> = (0..n)
            .map(|k| {
                let s = 1.0 / (1.0 + (-zs[k * hh * ww + i]).exp());
                s * (1.0 - s)
            })
            .collect();
        let mean = terms.iter().sum::<f64>() / n as f64;
        let var = terms.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
        let se = (var / n as f64).sqrt();
        let mut up = mu0.clone();
        up.data_mut()[i] += hstep;
        let mut down = mu0.clone();
        down.data_mut()[i] -= hstep;
        let fd = (objective(&up, false).0 - objective(&down, false).0) / (2.0 * hstep);
        let combined = (2.0f64).sqrt() * se;
        assert!((grad.data()[i] - fd).abs() < 3.0 * combined, "pixel {i}: {} vs {fd} (se {se})", grad.data()[i]);
        assert!((grad.data()[i] - mean).abs() < 1e-10);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]
    #[test]
    fn diagonal_respects_the_floor(seed in any::<u64>(), shift in -60.0f64..5.0) {
        let (mut ps, h) = head(3, seed);
        let b = h.heads.bias.unwrap();
        ps.get_mut(b).value.data_mut()[h.rank + 1] = shift;
        let mut g = Graph::new();
        let f = g.constant(uniform(&[2, SEG_CHANNELS, 3, 2], -5.0, 5.0, seed ^ 7));
        let out = h.forward(&mut g, &ps, f).unwrap();
        prop_assert!(g.value(out.diag.unwrap()).data().iter().all(|&d| d >= 1e-5));
    }

    #[test]
    fn covariance_is_positive_definite(seed in any::<u64>(), dim in 2usize..10, rank in 1usize..4) {
        let dist = random_gaussian(dim, rank, &mut ChaCha8Rng::seed_from_u64(seed));
        let cov = dense(&dist);
        prop_assert!((cov.clone() - cov.transpose()).abs().max() == 0.0);
        let min_eig = cov.symmetric_eigen().eigenvalues.min();
        let min_d = dist.diag().iter().cloned().fold(f64::INFINITY, f64::min);
        prop_assert!(min_eig >= min_d - 1e-12);
    }

    #[test]
    fn density_peaks_at_the_mean(seed in any::<u64>(), dim in 1usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dist = random_gaussian(dim, 1, &mut rng);
        let z: Vec<f64> = (0..dim).map(|_| rng.random_range(-3.0..3.0)).collect();
        prop_assert!(dist.log_prob(dist.mean()).unwrap() >= dist.log_prob(&z).unwrap());
    }
}
