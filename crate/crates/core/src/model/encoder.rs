//! Residual mini-encoder and the mirrored upsampling decoder.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use super::config::ModelConfig;
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{BatchNorm2d, Conv2d, ParamStore};
use crate::scalar::Scalar;

/// Convolution, batch norm and an optional ReLU.
#[derive(Clone, Debug)]
pub struct ConvBn {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
    pub relu: bool,
}

impl ConvBn {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        ps: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        relu: bool,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            conv: Conv2d::new(ps, &format!("{name}.conv"), c_in, c_out, kernel, stride, false, rng),
            bn: BatchNorm2d::new(ps, &format!("{name}.bn"), c_out),
            relu,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var) -> Result<Var> {
        let y = self.conv.forward(g, ps, x)?;
        let y = self.bn.forward(g, ps, y)?;
        Ok(if self.relu { g.relu(y) } else { y })
    }
}

/// Two 3x3 convolutions (the first with stride 2) plus a strided 1x1
/// projection shortcut.
#[derive(Clone, Debug)]
pub struct ResidualStage {
    pub conv1: ConvBn,
    pub conv2: ConvBn,
    pub shortcut: ConvBn,
}

impl ResidualStage {
    fn new<T: Scalar>(ps: &mut ParamStore<T>, name: &str, c_in: usize, c_out: usize, rng: &mut impl Rng) -> Self {
        Self {
            conv1: ConvBn::new(ps, &format!("{name}.conv1"), c_in, c_out, 3, 2, true, rng),
            conv2: ConvBn::new(ps, &format!("{name}.conv2"), c_out, c_out, 3, 1, false, rng),
            shortcut: ConvBn::new(ps, &format!("{name}.shortcut"), c_in, c_out, 1, 2, false, rng),
        }
    }

    fn forward<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var) -> Result<Var> {
        let y = self.conv1.forward(g, ps, x)?;
        let y = self.conv2.forward(g, ps, y)?;
        let s = self.shortcut.forward(g, ps, x)?;
        let sum = g.add(y, s)?;
        Ok(g.relu(sum))
    }
}

/// Encoder activations for one batch.
#[derive(Clone, Debug)]
pub struct EncoderOutput {
    /// Deepest feature map `[B, C', H/stride, W/stride]`.
    pub f_img: Var,
    /// `f_img` reduced to `d` channels by a 1x1 convolution.
    pub f_re: Var,
    /// Features at 1/2, 1/4, 1/8 resolution (fewer for shallow encoders).
    pub skips: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub stem: ConvBn,
    pub stages: Vec<ResidualStage>,
    pub reduce: Conv2d,
    pub stride: usize,
}

/// Skip features are taken at the first `MAX_SKIPS` resolutions.
const MAX_SKIPS: usize = 3;

impl Encoder {
    pub fn new<T: Scalar>(ps: &mut ParamStore<T>, cfg: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let w = &cfg.encoder.widths;
        let stem = ConvBn::new(ps, "encoder.stem", cfg.in_channels, w[0], 3, 2, true, rng);
        let stages = (1..w.len())
            .map(|i| ResidualStage::new(ps, &format!("encoder.stage{i}"), w[i - 1], w[i], rng))
            .collect();
        let last = *w.last().unwrap_or(&w[0]);
        let reduce = Conv2d::new(ps, "encoder.reduce", last, cfg.d, 1, 1, true, rng);
        Ok(Self {
            stem,
            stages,
            reduce,
            stride: cfg.encoder.stride,
        })
    }

    /// Channel widths of the skip features, shallowest first.
    pub fn skip_widths(cfg: &ModelConfig) -> Vec<usize> {
        let w = &cfg.encoder.widths;
        w[..w.len().saturating_sub(1).min(MAX_SKIPS)].to_vec()
    }

    /// `x` is `[B, C, H, W]` with `H` and `W` divisible by the stride.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var) -> Result<EncoderOutput> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 4 || !shape[2].is_multiple_of(self.stride) || !shape[3].is_multiple_of(self.stride) || shape[2] == 0 || shape[3] == 0 {
            return Err(Error::dim(
                "encode",
                format!(
                    "input {shape:?} must be [B, C, H, W] with H and W divisible by {}",
                    self.stride
                ),
            ));
        }
        let mut feats = Vec::with_capacity(self.stages.len() + 1);
        let mut h = self.stem.forward(g, ps, x)?;
        feats.push(h);
        for stage in &self.stages {
            h = stage.forward(g, ps, h)?;
            feats.push(h);
        }
        let f_re = self.reduce.forward(g, ps, h)?;
        let n_skips = (feats.len() - 1).min(MAX_SKIPS);
        Ok(EncoderOutput {
            f_img: h,
            f_re,
            skips: feats[..n_skips].to_vec(),
        })
    }
}

/// Bilinear x2 upsampling stages with skip concatenation, ending in a
/// 32-channel full-resolution feature map.
#[derive(Clone, Debug)]
pub struct SegDecoder {
    pub stages: Vec<ConvBn>,
    pub out: ConvBn,
    /// For each stage, the skip index concatenated after upsampling.
    pub skip_at: Vec<Option<usize>>,
}

/// Channels of the decoded per-preference feature map.
pub const SEG_CHANNELS: usize = 32;

impl SegDecoder {
    pub fn new<T: Scalar>(
        ps: &mut ParamStore<T>,
        cfg: &ModelConfig,
        c_in: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let levels = cfg.levels();
        let skip_widths = Encoder::skip_widths(cfg);
        let mut stages = Vec::with_capacity(levels);
        let mut skip_at = Vec::with_capacity(levels);
        let mut c = c_in;
        for (j, &w) in cfg.decoder.widths.iter().enumerate() {
            // After stage j the resolution is 1 / 2^(levels - j - 1); skip i
            // lives at 1 / 2^(i + 1).
            let skip = (levels - j - 1).checked_sub(1).filter(|&i| i < skip_widths.len());
            let extra = skip.map_or(0, |i| skip_widths[i]);
            stages.push(ConvBn::new(ps, &format!("decoder.stage{j}"), c + extra, w, 3, 1, true, rng));
            skip_at.push(skip);
            c = w;
        }
        let out = ConvBn::new(ps, "decoder.out", c, SEG_CHANNELS, 1, 1, true, rng);
        Ok(Self { stages, out, skip_at })
    }

    /// `x` is `[N, c_in, h', w']`; `skips` must already have `N` rows.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        ps: &ParamStore<T>,
        x: Var,
        skips: &[Var],
    ) -> Result<Var> {
        let mut h = x;
        for (stage, skip) in self.stages.iter().zip(&self.skip_at) {
            h = g.upsample_bilinear(h, 2)?;
            if let Some(i) = *skip {
                let s = *skips.get(i).ok_or_else(|| {
                    Error::Config(format!("decoder expects skip {i} but got {}", skips.len()))
                })?;
                h = g.concat(&[h, s], 1)?;
            }
            h = stage.forward(g, ps, h)?;
        }
        self.out.forward(g, ps, h)
    }
}
