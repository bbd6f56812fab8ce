//! Stochastic segmentation head: per-pixel mean logits `mu`, a rank-`alpha`
//! covariance factor `P` and a positive diagonal `D`, sampled with the
//! reparameterisation `z = mu + P e1 + sqrt(D) * e2`.

use alloc::vec::Vec;

use rand::Rng;
use rand_distr::StandardNormal;

use super::config::{ModelConfig, Variant};
use super::encoder::SEG_CHANNELS;
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::lowrank::LowRankGaussian;
use crate::nn::{Conv2d, Init, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Standard-normal draws for one reparameterised sample of `n` maps.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleNoise<T> {
    /// `[n, 1, alpha]`, shared across the pixels of a map.
    pub low_rank: Tensor<T>,
    /// `[n, 1, h, w]`, one per pixel.
    pub pixel: Tensor<T>,
}

impl<T: Scalar> SampleNoise<T> {
    /// Draws row by row in a fixed order, so the noise for row `i` depends
    /// only on the generator state and `i`.
    pub fn draw(n: usize, alpha: usize, h: usize, w: usize, rng: &mut impl Rng) -> Self {
        let mut low = Vec::with_capacity(n * alpha);
        let mut pix = Vec::with_capacity(n * h * w);
        for _ in 0..n {
            low.extend((0..alpha).map(|_| T::from_f64(rng.sample(StandardNormal))));
            pix.extend((0..h * w).map(|_| T::from_f64(rng.sample(StandardNormal))));
        }
        Self {
            low_rank: Tensor::new(&[n, 1, alpha], low).expect("sized above"),
            pixel: Tensor::new(&[n, 1, h, w], pix).expect("sized above"),
        }
    }

    pub fn cast<U: Scalar>(&self) -> SampleNoise<U> {
        SampleNoise {
            low_rank: self.low_rank.cast(),
            pixel: self.pixel.cast(),
        }
    }
}

/// Graph nodes of the head for `n` decoded maps.
#[derive(Clone, Copy, Debug)]
pub struct HeadOutput {
    /// Mean logits `[n, 1, H, W]`.
    pub mu: Var,
    /// Covariance factor `[n, alpha, H * W]` (row `j` is column `j` of `P`);
    /// absent when the factor is pinned to zero.
    pub factor: Option<Var>,
    /// Diagonal `[n, 1, H, W]`, every entry `>= eps_floor`.
    pub diag: Option<Var>,
}

/// The three 1x1 heads share one convolution over `f_seg` producing
/// `[mu | P | D]` channels. With the mu prior, the P and D heads see
/// `concat(mu, f_seg)`; their weight column for `mu` is held separately in
/// `prior` and applied to `mu` after it is computed, which is the same
/// linear map without materialising the concatenation.
#[derive(Clone, Debug)]
pub struct SsHead {
    pub heads: Conv2d,
    pub prior: Option<Conv2d>,
    /// Columns of the factor, 0 when it is pinned to zero.
    pub rank: usize,
    pub has_diag: bool,
    pub alpha: usize,
    pub eps_floor: f64,
}

impl SsHead {
    pub fn new<T: Scalar>(ps: &mut ParamStore<T>, cfg: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let v = cfg.variant;
        let alpha = cfg.ss.alpha;
        let rank = match v {
            Variant::NoSs | Variant::DiagGauss => 0,
            _ => alpha,
        };
        let has_diag = v != Variant::NoSs;
        let extra = rank + usize::from(has_diag);
        let heads = Conv2d::new(ps, "ss.heads", SEG_CHANNELS, 1 + extra, 1, 1, true, rng);
        if extra > 0 {
            // mu keeps the Kaiming draw; P and D start near zero.
            let mut w = ps.get(heads.weight).value.clone();
            let small: Tensor<T> = Init::Normal { std: 0.01 }.tensor(&[extra * SEG_CHANNELS], rng);
            w.data_mut()[SEG_CHANNELS..].copy_from_slice(small.data());
            ps.set_value(heads.weight, w)?;
        }
        let prior = if extra > 0 && v != Variant::NoMuPrior {
            let conv = Conv2d::new(ps, "ss.prior", 1, extra, 1, 1, false, rng);
            ps.set_value(conv.weight, Init::Normal { std: 0.01 }.tensor(&[extra, 1, 1, 1], rng))?;
            Some(conv)
        } else {
            None
        };
        Ok(Self {
            heads,
            prior,
            rank,
            has_diag,
            alpha,
            eps_floor: cfg.ss.eps_floor,
        })
    }

    /// Distribution parameters from `f_seg` `[n, 32, H, W]`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, f_seg: Var) -> Result<HeadOutput> {
        let all = self.heads.forward(g, ps, f_seg)?;
        let extra = self.rank + usize::from(self.has_diag);
        if extra == 0 {
            return Ok(HeadOutput {
                mu: all,
                factor: None,
                diag: None,
            });
        }
        let mu = g.narrow(all, 1, 0, 1)?;
        let mut rest = g.narrow(all, 1, 1, extra)?;
        if let Some(prior) = &self.prior {
            let from_mu = prior.forward(g, ps, mu)?;
            rest = g.add(rest, from_mu)?;
        }
        let factor = if self.rank > 0 {
            let p = if self.has_diag { g.narrow(rest, 1, 0, self.rank)? } else { rest };
            let &[n, a, h, w] = g.shape(p) else { unreachable!("conv output is 4-d") };
            Some(g.reshape(p, &[n, a, h * w])?)
        } else {
            None
        };
        let diag = if self.has_diag {
            let raw = if self.rank > 0 { g.narrow(rest, 1, self.rank, 1)? } else { rest };
            let sp = g.softplus(raw);
            Some(g.add_scalar(sp, self.eps_floor))
        } else {
            None
        };
        Ok(HeadOutput { mu, factor, diag })
    }

    /// Reparameterised logits `mu + P e1 + sqrt(D) * e2`; `mu` itself when the
    /// head is deterministic.
    pub fn sample<T: Scalar>(&self, g: &mut Graph<T>, out: &HeadOutput, noise: &SampleNoise<T>) -> Result<Var> {
        let Some(diag) = out.diag else {
            return Ok(out.mu);
        };
        let shape = g.shape(out.mu).to_vec();
        let n = shape[0];
        if noise.pixel.shape() != shape.as_slice() || noise.low_rank.shape() != [n, 1, self.alpha] {
            return Err(Error::dim(
                "sample",
                alloc::format!(
                    "noise {:?} / {:?} for mean {shape:?} and rank {}",
                    noise.pixel.shape(),
                    noise.low_rank.shape(),
                    self.alpha
                ),
            ));
        }
        let e2 = g.constant(noise.pixel.clone());
        let sd = g.sqrt(diag);
        let local = g.mul(sd, e2)?;
        let mut z = g.add(out.mu, local)?;
        if let Some(p) = out.factor {
            let e1 = g.constant(noise.low_rank.clone());
            let low = g.bmm(e1, p, false)?;
            let low = g.reshape(low, &shape)?;
            z = g.add(z, low)?;
        }
        Ok(z)
    }

    /// Distribution of row `row` as a plain [`LowRankGaussian`].
    pub fn distribution<T: Scalar>(&self, g: &Graph<T>, out: &HeadOutput, row: usize) -> Result<LowRankGaussian> {
        let mu_t = g.value(out.mu).index_axis0(row)?;
        let dim = mu_t.len();
        let mu = mu_t.to_f64_vec();
        let diag = match out.diag {
            Some(d) => g.value(d).index_axis0(row)?.to_f64_vec(),
            None => alloc::vec![self.eps_floor; dim],
        };
        let mut factor = alloc::vec![0.0; dim * self.alpha];
        if let Some(p) = out.factor {
            let pt = g.value(p).index_axis0(row)?;
            for (j, col) in pt.data().chunks(dim).enumerate() {
                for (i, v) in col.iter().enumerate() {
                    factor[i * self.alpha + j] = v.as_f64();
                }
            }
        }
        LowRankGaussian::new(mu, factor, diag, self.alpha)
    }
}
